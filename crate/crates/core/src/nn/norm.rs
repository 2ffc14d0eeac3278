use rayon::prelude::*;

use super::{join, Module, Param, Tensor};

const MOMENTUM: f64 = 0.1;
const EPS: f64 = 1e-5;

/// Batch normalization over (N, H, W) per channel. Training mode normalizes
/// with batch statistics and updates the running estimates; inference uses
/// the running estimates.
#[derive(Clone, Debug)]
pub struct BatchNorm2d {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    cache: Option<(Tensor, Vec<f32>)>,
}

impl BatchNorm2d {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(vec![channels], vec![1.0; channels]),
            beta: Param::new(vec![channels], vec![0.0; channels]),
            running_mean: Param::buffer(vec![channels], vec![0.0; channels]),
            running_var: Param::buffer(vec![channels], vec![1.0; channels]),
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let c = self.channels();
        assert_eq!(x.c(), c);
        let (scale, shift): (Vec<f32>, Vec<f32>) = (0..c)
            .map(|ch| {
                let s = self.gamma.value[ch] as f64
                    / (self.running_var.value[ch] as f64 + EPS).sqrt();
                (s as f32, (self.beta.value[ch] as f64 - self.running_mean.value[ch] as f64 * s) as f32)
            })
            .unzip();
        let mut y = x.clone();
        let p = x.plane_len();
        y.data_mut().par_chunks_mut(c * p).for_each(|sample| {
            for (ch, plane) in sample.chunks_mut(p).enumerate() {
                let (a, b) = (scale[ch], shift[ch]);
                plane.iter_mut().for_each(|v| *v = *v * a + b);
            }
        });
        y
    }

    fn channel_sums(t: &Tensor, f: impl Fn(usize, usize) -> f64 + Sync) -> Vec<f64> {
        // f(channel, flat index) summed over all samples and pixels
        let (n, c, p) = (t.n(), t.c(), t.plane_len());
        (0..c)
            .into_par_iter()
            .map(|ch| {
                let mut acc = 0.0;
                for s in 0..n {
                    let base = (s * c + ch) * p;
                    for i in base..base + p {
                        acc += f(ch, i);
                    }
                }
                acc
            })
            .collect()
    }

    pub fn forward(&mut self, x: &Tensor) -> Tensor {
        let c = self.channels();
        assert_eq!(x.c(), c);
        let count = (x.n() * x.plane_len()) as f64;
        let data = x.data();
        let mean: Vec<f64> = Self::channel_sums(x, |_, i| data[i] as f64)
            .into_iter()
            .map(|s| s / count)
            .collect();
        let var: Vec<f64> = Self::channel_sums(x, |ch, i| {
            let d = data[i] as f64 - mean[ch];
            d * d
        })
        .into_iter()
        .map(|s| s / count)
        .collect();
        let inv_std: Vec<f32> = var.iter().map(|v| (1.0 / (v + EPS).sqrt()) as f32).collect();

        let p = x.plane_len();
        let mut xhat = x.clone();
        xhat.data_mut().par_chunks_mut(c * p).for_each(|sample| {
            for (ch, plane) in sample.chunks_mut(p).enumerate() {
                let (m, s) = (mean[ch] as f32, inv_std[ch]);
                plane.iter_mut().for_each(|v| *v = (*v - m) * s);
            }
        });
        let mut y = xhat.clone();
        let (gamma, beta) = (&self.gamma.value, &self.beta.value);
        y.data_mut().par_chunks_mut(c * p).for_each(|sample| {
            for (ch, plane) in sample.chunks_mut(p).enumerate() {
                let (g, b) = (gamma[ch], beta[ch]);
                plane.iter_mut().for_each(|v| *v = *v * g + b);
            }
        });

        let unbias = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        for ch in 0..c {
            let rm = &mut self.running_mean.value[ch];
            *rm = ((1.0 - MOMENTUM) * *rm as f64 + MOMENTUM * mean[ch]) as f32;
            let rv = &mut self.running_var.value[ch];
            *rv = ((1.0 - MOMENTUM) * *rv as f64 + MOMENTUM * var[ch] * unbias) as f32;
        }
        self.cache = Some((xhat, inv_std));
        y
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let (xhat, inv_std) = self.cache.take().expect("backward without a training forward");
        assert_eq!(dy.shape(), xhat.shape());
        let c = self.channels();
        let count = (dy.n() * dy.plane_len()) as f64;
        let (d, xh) = (dy.data(), xhat.data());
        let sum_dy = Self::channel_sums(dy, |_, i| d[i] as f64);
        let sum_dy_xhat = Self::channel_sums(dy, |_, i| d[i] as f64 * xh[i] as f64);
        for ch in 0..c {
            self.gamma.grad[ch] += sum_dy_xhat[ch] as f32;
            self.beta.grad[ch] += sum_dy[ch] as f32;
        }
        let coef: Vec<(f32, f32, f32)> = (0..c)
            .map(|ch| {
                (
                    self.gamma.value[ch] * inv_std[ch],
                    (sum_dy[ch] / count) as f32,
                    (sum_dy_xhat[ch] / count) as f32,
                )
            })
            .collect();
        let p = dy.plane_len();
        let mut dx = dy.clone();
        dx.data_mut()
            .par_chunks_mut(c * p)
            .zip(xhat.data().par_chunks(c * p))
            .for_each(|(dsample, xsample)| {
                for (ch, (dplane, xplane)) in dsample.chunks_mut(p).zip(xsample.chunks(p)).enumerate() {
                    let (k, mdy, mdyx) = coef[ch];
                    for (g, &xv) in dplane.iter_mut().zip(xplane) {
                        *g = k * (*g - mdy - xv * mdyx);
                    }
                }
            });
        dx
    }
}

impl Module for BatchNorm2d {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.gamma));
        out.push((join(prefix, "bias"), &self.beta));
        out.push((join(prefix, "running_mean"), &self.running_mean));
        out.push((join(prefix, "running_var"), &self.running_var));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param)>) {
        out.push((join(prefix, "weight"), &mut self.gamma));
        out.push((join(prefix, "bias"), &mut self.beta));
        out.push((join(prefix, "running_mean"), &mut self.running_mean));
        out.push((join(prefix, "running_var"), &mut self.running_var));
    }

    fn clear_cache(&mut self) {
        self.cache = None;
    }
}
