//! Parameter-free tensor operations and their gradients.

use rayon::prelude::*;

use super::Tensor;

pub fn relu_inplace(x: &mut Tensor) {
    x.data_mut().par_iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `dy` in place by the activation output `y`.
pub fn relu_backward(dy: &mut Tensor, y: &Tensor) {
    assert_eq!(dy.shape(), y.shape());
    dy.data_mut()
        .par_iter_mut()
        .zip(y.data().par_iter())
        .for_each(|(g, &v)| {
            if v <= 0.0 {
                *g = 0.0;
            }
        });
}

/// Argmax positions (flat index within the input plane) of a max pool.
#[derive(Clone, Debug)]
pub struct MaxPoolIndices {
    input_shape: [usize; 4],
    indices: Vec<u32>,
}

/// 3x3 max pool, stride 2, padding 1.
pub fn max_pool_3x3_s2(x: &Tensor) -> (Tensor, MaxPoolIndices) {
    let [n, c, h, w] = x.shape();
    let (ho, wo) = ((h + 2 - 3) / 2 + 1, (w + 2 - 3) / 2 + 1);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let mut indices = vec![0u32; n * c * ho * wo];
    out.data_mut()
        .par_chunks_mut(ho * wo)
        .zip(indices.par_chunks_mut(ho * wo))
        .zip(x.data().par_chunks(h * w))
        .for_each(|((o, idx), plane)| {
            for r in 0..ho {
                for col in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut arg = 0usize;
                    for dr in 0..3 {
                        let iy = (2 * r + dr) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for dc in 0..3 {
                            let ix = (2 * col + dc) as isize - 1;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = iy as usize * w + ix as usize;
                            if plane[i] > best {
                                best = plane[i];
                                arg = i;
                            }
                        }
                    }
                    o[r * wo + col] = best;
                    idx[r * wo + col] = arg as u32;
                }
            }
        });
    (
        out,
        MaxPoolIndices {
            input_shape: x.shape(),
            indices,
        },
    )
}

pub fn max_pool_backward(dy: &Tensor, idx: &MaxPoolIndices) -> Tensor {
    let mut dx = Tensor::zeros(idx.input_shape);
    let plane_in = idx.input_shape[2] * idx.input_shape[3];
    let plane_out = dy.plane_len();
    dx.data_mut()
        .par_chunks_mut(plane_in)
        .zip(dy.data().par_chunks(plane_out))
        .zip(idx.indices.par_chunks(plane_out))
        .for_each(|((d, g), ix)| {
            for (&v, &i) in g.iter().zip(ix) {
                d[i as usize] += v;
            }
        });
    dx
}

pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let [n, c, _, _] = x.shape();
    let p = x.plane_len() as f64;
    let data = x
        .data()
        .chunks(x.plane_len())
        .map(|plane| (plane.iter().map(|&v| v as f64).sum::<f64>() / p) as f32)
        .collect();
    Tensor::from_vec([n, c, 1, 1], data)
}

pub fn global_avg_pool_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let scale = 1.0 / (h * w) as f32;
    let mut dx = broadcast_spatial(dy, h, w);
    dx.data_mut().iter_mut().for_each(|v| *v *= scale);
    dx
}

/// Repeats a `[n, c, 1, 1]` tensor over an `h x w` plane.
pub fn broadcast_spatial(x: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, c, _, _] = x.shape();
    let mut data = Vec::with_capacity(n * c * h * w);
    for &v in x.data() {
        data.extend(std::iter::repeat_n(v, h * w));
    }
    Tensor::from_vec([n, c, h, w], data)
}

pub fn concat_channels(parts: &[&Tensor]) -> Tensor {
    let [n, _, h, w] = parts[0].shape();
    let c: usize = parts.iter().map(|t| t.c()).sum();
    let mut data = Vec::with_capacity(n * c * h * w);
    for s in 0..n {
        for t in parts {
            assert_eq!((t.n(), t.h(), t.w()), (n, h, w), "concat: mismatched shapes");
            data.extend_from_slice(t.sample(s));
        }
    }
    Tensor::from_vec([n, c, h, w], data)
}

pub fn split_channels(x: &Tensor, sizes: &[usize]) -> Vec<Tensor> {
    let [n, c, h, w] = x.shape();
    assert_eq!(sizes.iter().sum::<usize>(), c);
    let p = h * w;
    let mut parts: Vec<Vec<f32>> = sizes.iter().map(|s| Vec::with_capacity(n * s * p)).collect();
    for s in 0..n {
        let mut offset = 0;
        let sample = x.sample(s);
        for (part, &size) in parts.iter_mut().zip(sizes) {
            part.extend_from_slice(&sample[offset * p..(offset + size) * p]);
            offset += size;
        }
    }
    parts
        .into_iter()
        .zip(sizes)
        .map(|(d, &size)| Tensor::from_vec([n, size, h, w], d))
        .collect()
}

#[derive(Clone, Copy)]
struct Tap {
    i0: usize,
    i1: usize,
    w0: f32,
    w1: f32,
}

fn bilinear_taps(input: usize, output: usize) -> Vec<Tap> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l1 = (src - i0 as f64).clamp(0.0, 1.0) as f32;
            Tap {
                i0,
                i1,
                w0: 1.0 - l1,
                w1: l1,
            }
        })
        .collect()
}

/// Bilinear resize with half-pixel centers (`align_corners = false`).
pub fn bilinear_resize(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    let (rows, cols) = (bilinear_taps(h, out_h), bilinear_taps(w, out_w));
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    out.data_mut()
        .par_chunks_mut(out_h * out_w)
        .zip(x.data().par_chunks(h * w))
        .for_each(|(o, plane)| {
            for (r, tr) in rows.iter().enumerate() {
                let top = &plane[tr.i0 * w..(tr.i0 + 1) * w];
                let bot = &plane[tr.i1 * w..(tr.i1 + 1) * w];
                let orow = &mut o[r * out_w..(r + 1) * out_w];
                for (v, tc) in orow.iter_mut().zip(&cols) {
                    let a = tc.w0 * top[tc.i0] + tc.w1 * top[tc.i1];
                    let b = tc.w0 * bot[tc.i0] + tc.w1 * bot[tc.i1];
                    *v = tr.w0 * a + tr.w1 * b;
                }
            }
        });
    out
}

pub fn bilinear_resize_backward(dy: &Tensor, in_h: usize, in_w: usize) -> Tensor {
    let [n, c, out_h, out_w] = dy.shape();
    let (rows, cols) = (bilinear_taps(in_h, out_h), bilinear_taps(in_w, out_w));
    let mut dx = Tensor::zeros([n, c, in_h, in_w]);
    dx.data_mut()
        .par_chunks_mut(in_h * in_w)
        .zip(dy.data().par_chunks(out_h * out_w))
        .for_each(|(d, g)| {
            for (r, tr) in rows.iter().enumerate() {
                let grow = &g[r * out_w..(r + 1) * out_w];
                for (&v, tc) in grow.iter().zip(&cols) {
                    let (a, b) = (tr.w0 * v, tr.w1 * v);
                    d[tr.i0 * in_w + tc.i0] += a * tc.w0;
                    d[tr.i0 * in_w + tc.i1] += a * tc.w1;
                    d[tr.i1 * in_w + tc.i0] += b * tc.w0;
                    d[tr.i1 * in_w + tc.i1] += b * tc.w1;
                }
            }
        });
    dx
}

fn reflect(i: usize, n: usize) -> usize {
    if i < n {
        i
    } else {
        2 * (n - 1) - i
    }
}

/// Reflection-pads the bottom and right edges up to `out_h x out_w`. Each
/// pad must be smaller than the corresponding input size.
pub fn reflect_pad(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let [n, c, h, w] = x.shape();
    assert!(out_h >= h && out_w >= w && out_h - h < h.max(1) && out_w - w < w.max(1));
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    out.data_mut()
        .par_chunks_mut(out_h * out_w)
        .zip(x.data().par_chunks(h * w))
        .for_each(|(o, plane)| {
            for r in 0..out_h {
                let src = &plane[reflect(r, h) * w..(reflect(r, h) + 1) * w];
                let orow = &mut o[r * out_w..(r + 1) * out_w];
                orow[..w].copy_from_slice(src);
                for col in w..out_w {
                    orow[col] = src[reflect(col, w)];
                }
            }
        });
    out
}

pub fn reflect_pad_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, c, out_h, out_w] = dy.shape();
    let mut dx = Tensor::zeros([n, c, h, w]);
    dx.data_mut()
        .par_chunks_mut(h * w)
        .zip(dy.data().par_chunks(out_h * out_w))
        .for_each(|(d, g)| {
            for r in 0..out_h {
                let dr = reflect(r, h);
                for col in 0..out_w {
                    d[dr * w + reflect(col, w)] += g[r * out_w + col];
                }
            }
        });
    dx
}

/// Keeps the top-left `h x w` region of every plane.
pub fn crop_spatial(x: &Tensor, h: usize, w: usize) -> Tensor {
    let [n, c, xh, xw] = x.shape();
    if (xh, xw) == (h, w) {
        return x.clone();
    }
    let mut data = Vec::with_capacity(n * c * h * w);
    for plane in x.data().chunks(xh * xw) {
        for r in 0..h {
            data.extend_from_slice(&plane[r * xw..r * xw + w]);
        }
    }
    Tensor::from_vec([n, c, h, w], data)
}

pub fn crop_spatial_backward(dy: &Tensor, full_h: usize, full_w: usize) -> Tensor {
    let [n, c, h, w] = dy.shape();
    if (h, w) == (full_h, full_w) {
        return dy.clone();
    }
    let mut dx = Tensor::zeros([n, c, full_h, full_w]);
    for (d, g) in dx.data_mut().chunks_mut(full_h * full_w).zip(dy.data().chunks(h * w)) {
        for r in 0..h {
            d[r * full_w..r * full_w + w].copy_from_slice(&g[r * w..(r + 1) * w]);
        }
    }
    dx
}
