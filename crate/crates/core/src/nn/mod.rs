//! Minimal NCHW tensor machinery with explicit forward/backward passes.
//!
//! Layers expose `infer(&self, ..)` for read-only inference and
//! `forward(&mut self, ..)` / `backward(&mut self, ..)` for training; the
//! training forward caches whatever the backward pass needs.

mod conv;
mod norm;
mod ops;

pub use conv::{Conv2d, ConvGeom};
pub use norm::BatchNorm2d;
pub use ops::{
    bilinear_resize, bilinear_resize_backward, broadcast_spatial, concat_channels, crop_spatial,
    crop_spatial_backward, global_avg_pool, global_avg_pool_backward, max_pool_3x3_s2,
    max_pool_backward, reflect_pad, reflect_pad_backward, relu_backward, relu_inplace,
    split_channels, MaxPoolIndices,
};

use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Dense `f32` tensor in NCHW layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn plane_len(&self) -> usize {
        self.shape[2] * self.shape[3]
    }

    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.plane_len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// A named weight. Buffers (batch-norm running statistics) are stored as
/// non-trainable params with an empty gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub trainable: bool,
}

impl Param {
    pub fn new(shape: Vec<usize>, value: Vec<f32>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Self {
            shape,
            value,
            grad,
            trainable: true,
        }
    }

    pub fn buffer(shape: Vec<usize>, value: Vec<f32>) -> Self {
        Self {
            shape,
            value,
            grad: Vec::new(),
            trainable: false,
        }
    }

    pub fn numel(&self) -> usize {
        self.value.len()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    /// He-normal initialization for a conv weight `[cout, cin, k, k]`, fan-out mode.
    pub fn kaiming_conv(shape: [usize; 4], rng: &mut impl Rng) -> Self {
        let fan_out = (shape[0] * shape[2] * shape[3]) as f32;
        let normal = Normal::new(0.0, (2.0 / fan_out).sqrt()).expect("positive std");
        let value = (0..shape.iter().product::<usize>())
            .map(|_| normal.sample(rng))
            .collect();
        Self::new(shape.to_vec(), value)
    }
}

/// Layers that own named parameters.
pub trait Module {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>);
    /// Drops activations cached by the last training forward pass.
    fn clear_cache(&mut self);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Row-major strided single-precision GEMM: `C = A B + beta C` where A is
/// `m x k` and B is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(k == 0 || last(m, k, rsa, csa) < a.len(), "sgemm: A out of bounds");
    assert!(k == 0 || last(k, n, rsb, csb) < b.len(), "sgemm: B out of bounds");
    assert!(last(m, n, rsc, csc) < c.len(), "sgemm: C out of bounds");
    // SAFETY: the assertions above bound every index matrixmultiply touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}
