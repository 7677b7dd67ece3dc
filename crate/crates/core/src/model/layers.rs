//! Layer kernels with hand-derived backward passes.
//!
//! Activations are `[N, C, H, W]` tensors for feature maps and `[N, F]`
//! for flat features. Batch norm treats `[N, F]` as `[N, F, 1, 1]`.

use crate::numerics::{Rng, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// A trainable tensor together with its momentum buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub velocity: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let velocity = Tensor::zeros(value.shape());
        Param { value, velocity }
    }
}

fn he_normal(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let std = (2.0 / fan_in as f64).sqrt();
    Tensor::from_fn(shape, |_| rng.normal() * std)
}

/// `(channels, spatial)` view of an activation shape.
pub(crate) fn channel_layout(shape: &[usize]) -> (usize, usize, usize) {
    match shape {
        [n, f] => (*n, *f, 1),
        [n, c, h, w] => (*n, *c, h * w),
        _ => panic!("unsupported activation rank {shape:?}"),
    }
}

// ---------------------------------------------------------------- dense

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Param, // [out, in]
    pub bias: Param,   // [out]
}

fn transpose(t: &Tensor) -> Tensor {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let d = t.data();
    Tensor::from_fn(&[c, r], |i| d[(i % r) * c + i / r])
}

impl Dense {
    pub fn new(inputs: usize, units: usize, rng: &mut Rng) -> Self {
        Dense {
            weight: Param::new(he_normal(&[units, inputs], inputs, rng)),
            bias: Param::new(Tensor::zeros(&[units])),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut y = x
            .matmul(&transpose(&self.weight.value))
            .expect("dense shapes validated at build");
        let units = self.bias.value.len();
        let b = self.bias.value.data();
        for row in y.data_mut().chunks_mut(units) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        y
    }

    /// Returns `(dx, dW, db)`.
    pub fn backward(&self, x: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
        let dw = transpose(dy).matmul(x).expect("dense backward shapes");
        let dx = dy.matmul(&self.weight.value).expect("dense backward shapes");
        let units = self.bias.value.len();
        let mut db = vec![0.0; units];
        for row in dy.data().chunks(units) {
            for (acc, v) in db.iter_mut().zip(row) {
                *acc += v;
            }
        }
        (dx, dw, Tensor::from_parts(vec![units], db))
    }
}

// ---------------------------------------------------------------- conv

/// Stride-1 convolution with zero "same" padding (`k / 2` per side).
/// Convolutions that feed batch norm carry no bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub weight: Param,        // [out, in, k, k]
    pub bias: Option<Param>, // [out]
    pub inputs: usize,
    pub outputs: usize,
    pub kernel: usize,
}

/// Output rows `y` whose source row `y + off` lies inside `[0, len)`.
fn valid_range(len: usize, off: isize) -> std::ops::Range<usize> {
    let lo = (-off).max(0) as usize;
    let hi = (len as isize - off).clamp(0, len as isize) as usize;
    lo..hi.max(lo)
}

impl Conv {
    pub fn new(inputs: usize, outputs: usize, kernel: usize, bias: bool, rng: &mut Rng) -> Self {
        let fan_in = inputs * kernel * kernel;
        Conv {
            weight: Param::new(he_normal(&[outputs, inputs, kernel, kernel], fan_in, rng)),
            bias: bias.then(|| Param::new(Tensor::zeros(&[outputs]))),
            inputs,
            outputs,
            kernel,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let (cin, cout, k) = (self.inputs, self.outputs, self.kernel);
        let pad = (k / 2) as isize;
        let hw = h * w;
        let xs = x.data();
        let ws = self.weight.value.data();
        let mut out = vec![0.0; n * cout * hw];
        for b in 0..n {
            for co in 0..cout {
                let o = &mut out[(b * cout + co) * hw..(b * cout + co + 1) * hw];
                if let Some(b) = &self.bias {
                    let bv = b.value.data()[co];
                    o.iter_mut().for_each(|v| *v = bv);
                }
                for ci in 0..cin {
                    let xin = &xs[(b * cin + ci) * hw..(b * cin + ci + 1) * hw];
                    for ky in 0..k {
                        let oy = ky as isize - pad;
                        for kx in 0..k {
                            let ox = kx as isize - pad;
                            let wv = ws[((co * cin + ci) * k + ky) * k + kx];
                            let xr = valid_range(w, ox);
                            for y in valid_range(h, oy) {
                                let sy = (y as isize + oy) as usize;
                                let orow = &mut o[y * w + xr.start..y * w + xr.end];
                                let start = (xr.start as isize + ox) as usize;
                                let irow = &xin[sy * w + start..sy * w + start + orow.len()];
                                for (ov, iv) in orow.iter_mut().zip(irow) {
                                    *ov += wv * iv;
                                }
                            }
                        }
                    }
                }
            }
        }
        Tensor::from_parts(vec![n, cout, h, w], out)
    }

    /// Returns `(dx, dW, db)`; `db` is `None` for bias-free convolutions.
    pub fn backward(&self, x: &Tensor, dy: &Tensor) -> (Tensor, Tensor, Option<Tensor>) {
        let (n, h, w) = (x.shape()[0], x.shape()[2], x.shape()[3]);
        let (cin, cout, k) = (self.inputs, self.outputs, self.kernel);
        let pad = (k / 2) as isize;
        let hw = h * w;
        let xs = x.data();
        let ds = dy.data();
        let ws = self.weight.value.data();
        let mut dx = vec![0.0; n * cin * hw];
        let mut dw = vec![0.0; cout * cin * k * k];
        let mut db = vec![0.0; cout];
        for b in 0..n {
            for co in 0..cout {
                let g = &ds[(b * cout + co) * hw..(b * cout + co + 1) * hw];
                db[co] += g.iter().sum::<f64>();
                for ci in 0..cin {
                    let base = (b * cin + ci) * hw;
                    for ky in 0..k {
                        let oy = ky as isize - pad;
                        for kx in 0..k {
                            let ox = kx as isize - pad;
                            let widx = ((co * cin + ci) * k + ky) * k + kx;
                            let wv = ws[widx];
                            let xr = valid_range(w, ox);
                            let mut acc = 0.0;
                            for y in valid_range(h, oy) {
                                let sy = (y as isize + oy) as usize;
                                let start = (xr.start as isize + ox) as usize;
                                let len = xr.end - xr.start;
                                let grow = &g[y * w + xr.start..y * w + xr.end];
                                let src = base + sy * w + start;
                                let irow = &xs[src..src + len];
                                for (gv, iv) in grow.iter().zip(irow) {
                                    acc += gv * iv;
                                }
                                let drow = &mut dx[src..src + len];
                                for (dv, gv) in drow.iter_mut().zip(grow) {
                                    *dv += wv * gv;
                                }
                            }
                            dw[widx] += acc;
                        }
                    }
                }
            }
        }
        (
            Tensor::from_parts(x.shape().to_vec(), dx),
            Tensor::from_parts(vec![cout, cin, k, k], dw),
            self.bias.as_ref().map(|_| Tensor::from_parts(vec![cout], db)),
        )
    }
}

// ---------------------------------------------------------------- batch norm

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::new(Tensor::filled(&[channels], 1.0)),
            beta: Param::new(Tensor::zeros(&[channels])),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    /// Normalizes with batch statistics (biased variance).
    pub fn forward_train(&self, x: &Tensor) -> (Tensor, BnCache) {
        let (n, c, s) = channel_layout(x.shape());
        let count = (n * s) as f64;
        let xs = x.data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ch in 0..c {
            let mut sum = 0.0;
            for b in 0..n {
                sum += xs[(b * c + ch) * s..(b * c + ch + 1) * s].iter().sum::<f64>();
            }
            mean[ch] = sum / count;
            let mut sq = 0.0;
            for b in 0..n {
                for v in &xs[(b * c + ch) * s..(b * c + ch + 1) * s] {
                    sq += (v - mean[ch]) * (v - mean[ch]);
                }
            }
            var[ch] = sq / count;
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let g = self.gamma.value.data();
        let be = self.beta.value.data();
        let mut xhat = vec![0.0; xs.len()];
        let mut out = vec![0.0; xs.len()];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                    xhat[i] = (xs[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + be[ch];
                }
            }
        }
        (
            Tensor::from_parts(x.shape().to_vec(), out),
            BnCache {
                xhat,
                inv_std,
                mean,
                var,
            },
        )
    }

    pub fn forward_eval(&self, x: &Tensor) -> Tensor {
        let (n, c, s) = channel_layout(x.shape());
        let g = self.gamma.value.data();
        let be = self.beta.value.data();
        let mut out = x.data().to_vec();
        for b in 0..n {
            for ch in 0..c {
                let inv = 1.0 / (self.running_var[ch] + BN_EPS).sqrt();
                for v in &mut out[(b * c + ch) * s..(b * c + ch + 1) * s] {
                    *v = g[ch] * (*v - self.running_mean[ch]) * inv + be[ch];
                }
            }
        }
        Tensor::from_parts(x.shape().to_vec(), out)
    }

    /// Returns `(dx, dgamma, dbeta)`.
    pub fn backward(&self, cache: &BnCache, dy: &Tensor) -> (Tensor, Tensor, Tensor) {
        let (n, c, s) = channel_layout(dy.shape());
        let m = (n * s) as f64;
        let ds = dy.data();
        let g = self.gamma.value.data();
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for b in 0..n {
            for ch in 0..c {
                for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                    dgamma[ch] += ds[i] * cache.xhat[i];
                    dbeta[ch] += ds[i];
                }
            }
        }
        // dx = g * inv_std / m * (m * dy - sum(dy) - xhat * sum(dy * xhat))
        let mut dx = vec![0.0; ds.len()];
        for b in 0..n {
            for ch in 0..c {
                let scale = g[ch] * cache.inv_std[ch] / m;
                for i in (b * c + ch) * s..(b * c + ch + 1) * s {
                    dx[i] = scale * (m * ds[i] - dbeta[ch] - cache.xhat[i] * dgamma[ch]);
                }
            }
        }
        (
            Tensor::from_parts(dy.shape().to_vec(), dx),
            Tensor::from_parts(vec![c], dgamma),
            Tensor::from_parts(vec![c], dbeta),
        )
    }

    /// Folds one batch's statistics into the running estimates. The running
    /// variance uses the unbiased batch variance.
    pub fn absorb(&mut self, cache: &BnCache, count: usize) {
        let correction = if count > 1 {
            count as f64 / (count as f64 - 1.0)
        } else {
            1.0
        };
        for ch in 0..self.running_mean.len() {
            self.running_mean[ch] =
                BN_MOMENTUM * self.running_mean[ch] + (1.0 - BN_MOMENTUM) * cache.mean[ch];
            self.running_var[ch] = BN_MOMENTUM * self.running_var[ch]
                + (1.0 - BN_MOMENTUM) * cache.var[ch] * correction;
        }
    }
}

// ---------------------------------------------------------------- stateless ops

pub fn relu(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v.max(0.0)).collect())
}

/// Gradient through ReLU given either its input or its output (the masks agree).
pub fn relu_backward(x_or_y: &Tensor, dy: &Tensor) -> Tensor {
    let d = x_or_y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_parts(dy.shape().to_vec(), d)
}

pub fn sigmoid_scalar(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| sigmoid_scalar(v)).collect())
}

pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let d = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&p, &g)| g * p * (1.0 - p))
        .collect();
    Tensor::from_parts(dy.shape().to_vec(), d)
}

/// Global average pooling and global max pooling, concatenated:
/// `[N, C, H, W] -> [N, 2C]` with means first. Also returns the flat
/// argmax index (first occurrence) of every `(n, c)` plane.
pub fn gap_gmp(x: &Tensor) -> (Tensor, Vec<usize>) {
    let (n, c, s) = channel_layout(x.shape());
    let xs = x.data();
    let mut out = vec![0.0; n * 2 * c];
    let mut argmax = vec![0; n * c];
    for b in 0..n {
        for ch in 0..c {
            let plane = &xs[(b * c + ch) * s..(b * c + ch + 1) * s];
            out[b * 2 * c + ch] = plane.iter().sum::<f64>() / s as f64;
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = i;
                }
            }
            out[b * 2 * c + c + ch] = plane[best];
            argmax[b * c + ch] = best;
        }
    }
    (Tensor::from_parts(vec![n, 2 * c], out), argmax)
}

pub fn gap_gmp_backward(in_shape: &[usize], argmax: &[usize], dy: &Tensor) -> Tensor {
    let (n, c, s) = channel_layout(in_shape);
    let ds = dy.data();
    let mut dx = vec![0.0; n * c * s];
    for b in 0..n {
        for ch in 0..c {
            let gmean = ds[b * 2 * c + ch] / s as f64;
            let plane = &mut dx[(b * c + ch) * s..(b * c + ch + 1) * s];
            plane.iter_mut().for_each(|v| *v = gmean);
            plane[argmax[b * c + ch]] += ds[b * 2 * c + c + ch];
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

/// Inverted-dropout mask: each entry is 0 with probability `p`, else `1/(1-p)`.
pub fn dropout_mask(len: usize, p: f64, rng: &mut Rng) -> Vec<f64> {
    if p == 0.0 {
        return vec![1.0; len];
    }
    let keep = 1.0 / (1.0 - p);
    (0..len).map(|_| if rng.bernoulli(p) { 0.0 } else { keep }).collect()
}

pub fn apply_mask(x: &Tensor, mask: &[f64]) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        x.data().iter().zip(mask).map(|(a, m)| a * m).collect(),
    )
}

/// 2x2 average pooling with stride 2; `H` and `W` must be even.
pub fn avg_pool2(x: &Tensor) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (oh, ow) = (h / 2, w / 2);
    let xs = x.data();
    let mut out = vec![0.0; n * c * oh * ow];
    for p in 0..n * c {
        let src = &xs[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            for xx in 0..ow {
                let i = 2 * y * w + 2 * xx;
                out[p * oh * ow + y * ow + xx] =
                    0.25 * (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]);
            }
        }
    }
    Tensor::from_parts(vec![n, c, oh, ow], out)
}

pub fn avg_pool2_backward(in_shape: &[usize], dy: &Tensor) -> Tensor {
    let (n, c, h, w) = (in_shape[0], in_shape[1], in_shape[2], in_shape[3]);
    let (oh, ow) = (h / 2, w / 2);
    let ds = dy.data();
    let mut dx = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                let g = 0.25 * ds[p * oh * ow + y * ow + xx];
                let i = p * h * w + 2 * y * w + 2 * xx;
                dx[i] = g;
                dx[i + 1] = g;
                dx[i + w] = g;
                dx[i + w + 1] = g;
            }
        }
    }
    Tensor::from_parts(in_shape.to_vec(), dx)
}

/// Concatenates two `[N, C, H, W]` maps along channels.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, ca, s) = channel_layout(a.shape());
    let (_, cb, _) = channel_layout(b.shape());
    let mut out = Vec::with_capacity(n * (ca + cb) * s);
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * ca * s..(i + 1) * ca * s]);
        out.extend_from_slice(&b.data()[i * cb * s..(i + 1) * cb * s]);
    }
    let mut shape = a.shape().to_vec();
    shape[1] = ca + cb;
    Tensor::from_parts(shape, out)
}

/// Splits a channel gradient into its leading `first` channels and the rest.
pub fn split_channels(t: &Tensor, first: usize) -> (Tensor, Tensor) {
    let (n, c, s) = channel_layout(t.shape());
    let rest = c - first;
    let mut a = Vec::with_capacity(n * first * s);
    let mut b = Vec::with_capacity(n * rest * s);
    for i in 0..n {
        let sample = &t.data()[i * c * s..(i + 1) * c * s];
        a.extend_from_slice(&sample[..first * s]);
        b.extend_from_slice(&sample[first * s..]);
    }
    let mut sa = t.shape().to_vec();
    sa[1] = first;
    let mut sb = t.shape().to_vec();
    sb[1] = rest;
    (Tensor::from_parts(sa, a), Tensor::from_parts(sb, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::ReduceMode;

    #[test]
    fn conv_identity_kernel_copies_input() {
        let mut rng = Rng::new(1);
        let mut conv = Conv::new(1, 1, 3, true, &mut rng);
        let mut w = vec![0.0; 9];
        w[4] = 1.0;
        conv.weight.value = Tensor::new(vec![1, 1, 3, 3], w).unwrap();
        let x = Tensor::from_fn(&[2, 1, 4, 5], |i| i as f64);
        assert_eq!(conv.forward(&x), x);
    }

    #[test]
    fn conv_shifted_kernel_zero_pads() {
        let mut rng = Rng::new(1);
        let mut conv = Conv::new(1, 1, 3, true, &mut rng);
        let mut w = vec![0.0; 9];
        w[5] = 1.0; // reads the right neighbour
        conv.weight.value = Tensor::new(vec![1, 1, 3, 3], w).unwrap();
        let x = Tensor::new(vec![1, 1, 1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(conv.forward(&x).data(), &[2.0, 3.0, 0.0]);
    }

    #[test]
    fn gap_gmp_matches_reduce() {
        let mut rng = Rng::new(4);
        let x = Tensor::from_fn(&[3, 5, 4, 4], |_| rng.normal());
        let (out, _) = gap_gmp(&x);
        let mean = x.reduce(&[2, 3], ReduceMode::Mean).unwrap();
        let max = x.reduce(&[2, 3], ReduceMode::Max).unwrap();
        for b in 0..3 {
            for c in 0..5 {
                assert!((out.data()[b * 10 + c] - mean.data()[b * 5 + c]).abs() < 1e-15);
                assert_eq!(out.data()[b * 10 + 5 + c], max.data()[b * 5 + c]);
            }
        }
    }

    #[test]
    fn concat_then_split_round_trips() {
        let a = Tensor::from_fn(&[2, 3, 2, 2], |i| i as f64);
        let b = Tensor::from_fn(&[2, 1, 2, 2], |i| -(i as f64));
        let (a2, b2) = split_channels(&concat_channels(&a, &b), 3);
        assert_eq!(a, a2);
        assert_eq!(b, b2);
    }

    #[test]
    fn avg_pool_halves() {
        let x = Tensor::from_fn(&[1, 1, 2, 4], |i| i as f64);
        assert_eq!(avg_pool2(&x).data(), &[2.5, 4.5]);
    }
}
