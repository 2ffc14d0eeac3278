use std::ops::Range;

use rand::Rng;
use rayon::prelude::*;

use super::{join, sgemm, Module, Param, Tensor};

/// Output columns per im2col block in the forward pass.
const BLOCK_COLUMNS: usize = 16 * 1024;
/// Samples per backward work item; fixed so gradient summation order does
/// not depend on the thread count.
const BACKWARD_GROUP: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvGeom {
    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1) + 1;
        let out = |x: usize| (x + 2 * self.padding).saturating_sub(span) / self.stride + 1;
        (out(h), out(w))
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col(x: &[f32], h: usize, w: usize, g: &ConvGeom, rows: Range<usize>, wo: usize, col: &mut [f32]) {
    let ncol = rows.len() * wo;
    let k = g.kernel;
    for ci in 0..g.cin {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let krow = (ci * k + ki) * k + kj;
                let dst = &mut col[krow * ncol..(krow + 1) * ncol];
                let off = (kj * g.dilation) as isize - g.padding as isize;
                for (ri, r) in rows.clone().enumerate() {
                    let drow = &mut dst[ri * wo..(ri + 1) * wo];
                    let iy = (r * g.stride + ki * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if g.stride == 1 {
                        let lo = (-off).clamp(0, wo as isize) as usize;
                        let hi = (w as isize - off).clamp(lo as isize, wo as isize) as usize;
                        drow[..lo].fill(0.0);
                        drow[hi..].fill(0.0);
                        if hi > lo {
                            let s = (lo as isize + off) as usize;
                            drow[lo..hi].copy_from_slice(&src[s..s + hi - lo]);
                        }
                    } else {
                        for (c, d) in drow.iter_mut().enumerate() {
                            let ix = (c * g.stride) as isize + off;
                            *d = if ix >= 0 && ix < w as isize {
                                src[ix as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f32], h: usize, w: usize, g: &ConvGeom, ho: usize, wo: usize, dx: &mut [f32]) {
    let ncol = ho * wo;
    let k = g.kernel;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let krow = (ci * k + ki) * k + kj;
                let src = &col[krow * ncol..(krow + 1) * ncol];
                let off = (kj * g.dilation) as isize - g.padding as isize;
                for r in 0..ho {
                    let iy = (r * g.stride + ki * g.dilation) as isize - g.padding as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let srow = &src[r * wo..(r + 1) * wo];
                    if g.stride == 1 {
                        let lo = (-off).clamp(0, wo as isize) as usize;
                        let hi = (w as isize - off).clamp(lo as isize, wo as isize) as usize;
                        for c in lo..hi {
                            drow[(c as isize + off) as usize] += srow[c];
                        }
                    } else {
                        for (c, &v) in srow.iter().enumerate() {
                            let ix = (c * g.stride) as isize + off;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution, square kernel, optional bias.
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Option<Param>,
    geom: ConvGeom,
    input: Option<Tensor>,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let geom = ConvGeom {
            cin,
            cout,
            kernel,
            stride,
            padding,
            dilation,
        };
        Self {
            weight: Param::kaiming_conv([cout, cin, kernel, kernel], rng),
            bias: bias.then(|| Param::new(vec![cout], vec![0.0; cout])),
            geom,
            input: None,
        }
    }

    pub fn geom(&self) -> ConvGeom {
        self.geom
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let g = &self.geom;
        assert_eq!(x.c(), g.cin, "conv expects {} input channels", g.cin);
        let (n, h, w) = (x.n(), x.h(), x.w());
        let (ho, wo) = g.output_size(h, w);
        let p = ho * wo;
        let kdim = g.patch_len();
        let weight = &self.weight.value;
        let mut out = Tensor::zeros([n, g.cout, ho, wo]);
        out.data_mut()
            .par_chunks_mut(g.cout * p)
            .enumerate()
            .for_each(|(s, out_s)| {
                let x_s = x.sample(s);
                if g.is_pointwise() {
                    sgemm(g.cout, kdim, p, weight, (kdim, 1), x_s, (p, 1), 0.0, out_s, (p, 1));
                } else {
                    let rows_per_block = (BLOCK_COLUMNS / wo.max(1)).clamp(1, ho.max(1));
                    let mut col = vec![0.0f32; kdim * rows_per_block * wo];
                    let mut r0 = 0;
                    while r0 < ho {
                        let r1 = (r0 + rows_per_block).min(ho);
                        let nc = (r1 - r0) * wo;
                        im2col(x_s, h, w, g, r0..r1, wo, &mut col[..kdim * nc]);
                        sgemm(
                            g.cout,
                            kdim,
                            nc,
                            weight,
                            (kdim, 1),
                            &col[..kdim * nc],
                            (nc, 1),
                            0.0,
                            &mut out_s[r0 * wo..],
                            (p, 1),
                        );
                        r0 = r1;
                    }
                }
                if let Some(bias) = &self.bias {
                    for (plane, &b) in out_s.chunks_mut(p).zip(&bias.value) {
                        plane.iter_mut().for_each(|v| *v += b);
                    }
                }
            });
        out
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let y = self.infer(x);
        self.input = Some(x.clone());
        y
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        self.backward_impl(dy, true).expect("input gradient requested")
    }

    /// Accumulates weight/bias gradients only (first layer of a network).
    pub fn backward_params_only(&mut self, dy: &Tensor) {
        self.backward_impl(dy, false);
    }

    fn backward_impl(&mut self, dy: &Tensor, want_dx: bool) -> Option<Tensor> {
        let x = self.input.take().expect("backward without a training forward");
        let g = self.geom;
        let (n, h, w) = (x.n(), x.h(), x.w());
        let (ho, wo) = g.output_size(h, w);
        assert_eq!(dy.shape(), [n, g.cout, ho, wo], "conv backward: dy shape");
        let p = ho * wo;
        let kdim = g.patch_len();
        let weight = &self.weight.value;
        let x_len = x.sample_len();

        let mut dx = want_dx.then(|| Tensor::zeros(x.shape()));
        let groups: Vec<Range<usize>> = (0..n)
            .step_by(BACKWARD_GROUP)
            .map(|s| s..(s + BACKWARD_GROUP).min(n))
            .collect();

        let work = |range: Range<usize>, mut dx_group: Option<&mut [f32]>| -> Vec<f32> {
            let mut dw = vec![0.0f32; g.cout * kdim];
            let mut col = if g.is_pointwise() {
                Vec::new()
            } else {
                vec![0.0f32; kdim * p]
            };
            let mut dcol = if want_dx && !g.is_pointwise() {
                vec![0.0f32; kdim * p]
            } else {
                Vec::new()
            };
            for (i, s) in range.enumerate() {
                let x_s = x.sample(s);
                let dy_s = dy.sample(s);
                let col_s: &[f32] = if g.is_pointwise() {
                    x_s
                } else {
                    im2col(x_s, h, w, &g, 0..ho, wo, &mut col);
                    &col
                };
                sgemm(g.cout, p, kdim, dy_s, (p, 1), col_s, (1, p), 1.0, &mut dw, (kdim, 1));
                if let Some(dxg) = dx_group.as_deref_mut() {
                    let dx_s = &mut dxg[i * x_len..(i + 1) * x_len];
                    if g.is_pointwise() {
                        sgemm(kdim, g.cout, p, weight, (1, kdim), dy_s, (p, 1), 0.0, dx_s, (p, 1));
                    } else {
                        sgemm(kdim, g.cout, p, weight, (1, kdim), dy_s, (p, 1), 0.0, &mut dcol, (p, 1));
                        col2im(&dcol, h, w, &g, ho, wo, dx_s);
                    }
                }
            }
            dw
        };

        let partials: Vec<Vec<f32>> = match dx.as_mut() {
            Some(dx) => dx
                .data_mut()
                .par_chunks_mut(BACKWARD_GROUP * x_len)
                .zip(groups.into_par_iter())
                .map(|(chunk, range)| work(range, Some(chunk)))
                .collect(),
            None => groups.into_par_iter().map(|r| work(r, None)).collect(),
        };
        for part in &partials {
            for (acc, v) in self.weight.grad.iter_mut().zip(part) {
                *acc += v;
            }
        }
        if let Some(bias) = &mut self.bias {
            for s in 0..n {
                for (c, plane) in dy.sample(s).chunks(p).enumerate() {
                    bias.grad[c] += plane.iter().map(|&v| v as f64).sum::<f64>() as f32;
                }
            }
        }
        dx
    }
}

impl Module for Conv2d {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.weight));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b));
        }
    }

    fn clear_cache(&mut self) {
        self.input = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct seven-loop convolution.
    fn reference(x: &Tensor, w: &[f32], b: Option<&[f32]>, g: &ConvGeom) -> Tensor {
        let (n, h, wd) = (x.n(), x.h(), x.w());
        let (ho, wo) = g.output_size(h, wd);
        let mut out = Tensor::zeros([n, g.cout, ho, wo]);
        let k = g.kernel;
        for s in 0..n {
            for co in 0..g.cout {
                for r in 0..ho {
                    for c in 0..wo {
                        let mut acc = b.map_or(0.0, |b| b[co] as f64);
                        for ci in 0..g.cin {
                            for ki in 0..k {
                                for kj in 0..k {
                                    let iy = (r * g.stride + ki * g.dilation) as isize - g.padding as isize;
                                    let ix = (c * g.stride + kj * g.dilation) as isize - g.padding as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                        continue;
                                    }
                                    let xv = x.data()[((s * g.cin + ci) * h + iy as usize) * wd + ix as usize];
                                    let wv = w[((co * g.cin + ci) * k + ki) * k + kj];
                                    acc += xv as f64 * wv as f64;
                                }
                            }
                        }
                        out.data_mut()[((s * g.cout + co) * ho + r) * wo + c] = acc as f32;
                    }
                }
            }
        }
        out
    }

    fn random_tensor(shape: [usize; 4], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    const CASES: [(usize, usize, usize, usize, usize, usize); 6] = [
        // cin, cout, kernel, stride, padding, dilation
        (3, 4, 7, 2, 3, 1),
        (4, 5, 3, 1, 1, 1),
        (4, 6, 3, 2, 1, 1),
        (5, 3, 1, 1, 0, 1),
        (4, 4, 1, 2, 0, 1),
        (3, 4, 3, 1, 2, 2),
    ];

    #[test]
    fn forward_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(cin, cout, k, s, p, d) in &CASES {
            let conv = Conv2d::new(cin, cout, k, s, p, d, true, &mut rng);
            let mut conv = conv;
            conv.bias.as_mut().unwrap().value = (0..cout).map(|i| i as f32 * 0.1).collect();
            let x = random_tensor([2, cin, 9, 11], &mut rng);
            let y = conv.infer(&x);
            let r = reference(&x, &conv.weight.value, conv.bias.as_ref().map(|b| &b.value[..]), &conv.geom());
            assert_eq!(y.shape(), r.shape());
            for (a, b) in y.data().iter().zip(r.data()) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(cin, cout, k, s, p, d) in &CASES {
            let mut conv = Conv2d::new(cin, cout, k, s, p, d, true, &mut rng);
            let x = random_tensor([5, cin, 7, 6], &mut rng);
            let y = conv.forward(&x);
            // loss = sum(y * probe)
            let probe = random_tensor(y.shape(), &mut rng);
            let dx = conv.backward(&probe);
            let loss = |conv: &Conv2d, x: &Tensor| -> f64 {
                reference(x, &conv.weight.value, conv.bias.as_ref().map(|b| &b.value[..]), &conv.geom())
                    .data()
                    .iter()
                    .zip(probe.data())
                    .map(|(a, b)| *a as f64 * *b as f64)
                    .sum()
            };
            let eps = 1e-2f32;
            for idx in [0, x.data().len() / 2, x.data().len() - 1] {
                let mut xp = x.clone();
                xp.data_mut()[idx] += eps;
                let mut xm = x.clone();
                xm.data_mut()[idx] -= eps;
                let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * eps as f64);
                assert!((fd - dx.data()[idx] as f64).abs() < 1e-2, "dx {fd} vs {}", dx.data()[idx]);
            }
            for idx in [0, conv.weight.numel() - 1] {
                let analytic = conv.weight.grad[idx] as f64;
                let mut cp = conv.clone();
                cp.weight.value[idx] += eps;
                let mut cm = conv.clone();
                cm.weight.value[idx] -= eps;
                let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * eps as f64);
                assert!((fd - analytic).abs() < 2e-2 * (1.0 + fd.abs()), "dw {fd} vs {analytic}");
            }
            let db: f64 = probe.data().chunks(probe.plane_len()).step_by(1).enumerate()
                .filter(|(i, _)| i % cout == 0)
                .map(|(_, pl)| pl.iter().map(|&v| v as f64).sum::<f64>())
                .sum();
            assert!((db - conv.bias.as_ref().unwrap().grad[0] as f64).abs() < 1e-3);
        }
    }

    #[test]
    fn output_sizes() {
        let g = ConvGeom { cin: 3, cout: 64, kernel: 7, stride: 2, padding: 3, dilation: 1 };
        assert_eq!(g.output_size(128, 128), (64, 64));
        let g = ConvGeom { cin: 256, cout: 128, kernel: 3, stride: 1, padding: 18, dilation: 18 };
        assert_eq!(g.output_size(8, 8), (8, 8));
    }
}
