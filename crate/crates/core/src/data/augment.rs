//! Online augmentations.
//!
//! Each spec carries `[lo, hi]` ranges that are sampled uniformly per call;
//! a degenerate range `[v, v]` gives a fixed transform and consumes no
//! randomness. Geometric transforms resample bilinearly with reflection at
//! the borders and keep the patch size. Every output is clamped to `[0, 1]`.
//!
//! Documented bounds: rotate [-45, 45] degrees, crop_pad [0, 0.2] of each
//! side, scale [0.8, 1.2], translate [-0.2, 0.2] of the size per axis,
//! blend alphas [0, 1], noise sigma [0, 0.25], hue [-0.5, 0.5] turns,
//! saturation [0, 2], brightness [-0.5, 0.5], contrast [0.5, 2].

use serde::{Deserialize, Serialize};

use super::Example;
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub type Range = (f64, f64);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentSpec {
    Hflip,
    Vflip,
    /// Exact quarter turns, counterclockwise.
    Rot90 { turns: u8 },
    Rotate { degrees: Range },
    CropPad { fraction: Range },
    Scale { factor: Range },
    Translate { fraction: Range },
    SharpenBlend { alpha: Range },
    EmbossBlend { alpha: Range },
    GaussianNoise { sigma: Range },
    HueSaturation { hue: Range, saturation: Range },
    Brightness { delta: Range },
    Contrast { factor: Range },
    /// Applies `steps` in order.
    Sequence { steps: Vec<AugmentSpec> },
}

fn fixed(v: f64) -> Range {
    (v, v)
}

fn check(name: &str, r: Range, lo: f64, hi: f64) -> Result<()> {
    if !(r.0 <= r.1 && r.0 >= lo && r.1 <= hi) {
        return Err(Error::Config(format!(
            "{name} range [{}, {}] must be ordered and within [{lo}, {hi}]",
            r.0, r.1
        )));
    }
    Ok(())
}

impl AugmentSpec {
    pub fn rotate(degrees: f64) -> Self {
        AugmentSpec::Rotate { degrees: fixed(degrees) }
    }
    pub fn crop_pad(fraction: f64) -> Self {
        AugmentSpec::CropPad { fraction: fixed(fraction) }
    }
    pub fn scale(factor: f64) -> Self {
        AugmentSpec::Scale { factor: fixed(factor) }
    }
    pub fn translate(fraction: f64) -> Self {
        AugmentSpec::Translate { fraction: fixed(fraction) }
    }
    pub fn sharpen(alpha: f64) -> Self {
        AugmentSpec::SharpenBlend { alpha: fixed(alpha) }
    }
    pub fn emboss(alpha: f64) -> Self {
        AugmentSpec::EmbossBlend { alpha: fixed(alpha) }
    }
    pub fn noise(sigma: f64) -> Self {
        AugmentSpec::GaussianNoise { sigma: fixed(sigma) }
    }
    pub fn hue_saturation(hue: f64, saturation: f64) -> Self {
        AugmentSpec::HueSaturation {
            hue: fixed(hue),
            saturation: fixed(saturation),
        }
    }
    pub fn brightness(delta: f64) -> Self {
        AugmentSpec::Brightness { delta: fixed(delta) }
    }
    pub fn contrast(factor: f64) -> Self {
        AugmentSpec::Contrast { factor: fixed(factor) }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AugmentSpec::Hflip => "hflip",
            AugmentSpec::Vflip => "vflip",
            AugmentSpec::Rot90 { .. } => "rot90",
            AugmentSpec::Rotate { .. } => "rotate",
            AugmentSpec::CropPad { .. } => "crop_pad",
            AugmentSpec::Scale { .. } => "scale",
            AugmentSpec::Translate { .. } => "translate",
            AugmentSpec::SharpenBlend { .. } => "sharpen_blend",
            AugmentSpec::EmbossBlend { .. } => "emboss_blend",
            AugmentSpec::GaussianNoise { .. } => "gaussian_noise",
            AugmentSpec::HueSaturation { .. } => "hue_saturation",
            AugmentSpec::Brightness { .. } => "brightness",
            AugmentSpec::Contrast { .. } => "contrast",
            AugmentSpec::Sequence { .. } => "sequence",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AugmentSpec::Hflip | AugmentSpec::Vflip => Ok(()),
            AugmentSpec::Rot90 { turns } if *turns > 3 => {
                Err(Error::Config(format!("rot90 turns must be 0..=3, got {turns}")))
            }
            AugmentSpec::Rot90 { .. } => Ok(()),
            AugmentSpec::Rotate { degrees } => check("rotate", *degrees, -45.0, 45.0),
            AugmentSpec::CropPad { fraction } => check("crop_pad", *fraction, 0.0, 0.2),
            AugmentSpec::Scale { factor } => check("scale", *factor, 0.8, 1.2),
            AugmentSpec::Translate { fraction } => check("translate", *fraction, -0.2, 0.2),
            AugmentSpec::SharpenBlend { alpha } => check("sharpen_blend", *alpha, 0.0, 1.0),
            AugmentSpec::EmbossBlend { alpha } => check("emboss_blend", *alpha, 0.0, 1.0),
            AugmentSpec::GaussianNoise { sigma } => check("gaussian_noise", *sigma, 0.0, 0.25),
            AugmentSpec::HueSaturation { hue, saturation } => {
                check("hue", *hue, -0.5, 0.5)?;
                check("saturation", *saturation, 0.0, 2.0)
            }
            AugmentSpec::Brightness { delta } => check("brightness", *delta, -0.5, 0.5),
            AugmentSpec::Contrast { factor } => check("contrast", *factor, 0.5, 2.0),
            AugmentSpec::Sequence { steps } => steps.iter().try_for_each(AugmentSpec::validate),
        }
    }
}

/// Each transform fires independently with `probability`, in list order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    pub probability: f64,
    pub transforms: Vec<AugmentSpec>,
}

impl AugmentPolicy {
    pub fn none() -> Self {
        AugmentPolicy {
            probability: 0.0,
            transforms: Vec::new(),
        }
    }

    /// Flips, rotation, crop, scale, translation, sharpen, emboss, noise and
    /// hue/saturation over their full documented ranges.
    pub fn full_ten(probability: f64) -> Self {
        AugmentPolicy {
            probability,
            transforms: vec![
                AugmentSpec::Hflip,
                AugmentSpec::Vflip,
                AugmentSpec::Rotate { degrees: (-45.0, 45.0) },
                AugmentSpec::CropPad { fraction: (0.0, 0.2) },
                AugmentSpec::Scale { factor: (0.8, 1.2) },
                AugmentSpec::Translate { fraction: (-0.2, 0.2) },
                AugmentSpec::SharpenBlend { alpha: (0.0, 1.0) },
                AugmentSpec::EmbossBlend { alpha: (0.0, 1.0) },
                AugmentSpec::GaussianNoise { sigma: (0.0, 0.05) },
                AugmentSpec::HueSaturation {
                    hue: (-0.05, 0.05),
                    saturation: (0.8, 1.2),
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.probability) {
            return Err(Error::Config(format!(
                "augmentation probability must lie in [0, 1], got {}",
                self.probability
            )));
        }
        self.transforms.iter().try_for_each(AugmentSpec::validate)
    }

    pub fn is_identity(&self) -> bool {
        self.probability == 0.0 || self.transforms.is_empty()
    }

    pub fn apply(&self, e: &Example, rng: &mut Rng) -> Example {
        if self.is_identity() {
            return e.clone();
        }
        let mut patch = e.patch().clone();
        for t in &self.transforms {
            if rng.bernoulli(self.probability) {
                patch = transform(&patch, t, rng);
            }
        }
        e.with_patch(patch)
    }
}

/// Applies `spec` to the patch of `e`; id and label are kept.
pub fn augment(e: &Example, spec: &AugmentSpec, rng: &mut Rng) -> Example {
    e.with_patch(transform(e.patch(), spec, rng))
}

fn draw(r: Range, rng: &mut Rng) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.uniform_in(r.0, r.1)
    }
}

/// Applies one spec to a `[C, H, W]` patch.
pub fn transform(patch: &Tensor, spec: &AugmentSpec, rng: &mut Rng) -> Tensor {
    let out = match spec {
        AugmentSpec::Hflip => permute(patch, |y, x, _, w| (y, w - 1 - x)),
        AugmentSpec::Vflip => permute(patch, |y, x, h, _| (h - 1 - y, x)),
        AugmentSpec::Rot90 { turns } => rot90(patch, *turns),
        AugmentSpec::Rotate { degrees } => rotate(patch, draw(*degrees, rng).to_radians()),
        AugmentSpec::CropPad { fraction } => {
            let sides = [0; 4].map(|_| draw(*fraction, rng));
            crop_resize(patch, sides)
        }
        AugmentSpec::Scale { factor } => {
            let f = draw(*factor, rng);
            let (cy, cx) = center(patch);
            resample(patch, |y, x| (cy + (y - cy) / f, cx + (x - cx) / f))
        }
        AugmentSpec::Translate { fraction } => {
            let (h, w) = hw(patch);
            let ty = draw(*fraction, rng) * h as f64;
            let tx = draw(*fraction, rng) * w as f64;
            resample(patch, |y, x| (y - ty, x - tx))
        }
        AugmentSpec::SharpenBlend { alpha } => {
            let a = draw(*alpha, rng);
            blend(patch, &conv3x3(patch, &[0.0, -1.0, 0.0, -1.0, 5.0, -1.0, 0.0, -1.0, 0.0]), a)
        }
        AugmentSpec::EmbossBlend { alpha } => {
            let a = draw(*alpha, rng);
            blend(patch, &conv3x3(patch, &[-2.0, -1.0, 0.0, -1.0, 1.0, 1.0, 0.0, 1.0, 2.0]), a)
        }
        AugmentSpec::GaussianNoise { sigma } => {
            let s = draw(*sigma, rng);
            if s == 0.0 {
                patch.clone()
            } else {
                let data = patch.data().iter().map(|v| v + s * rng.normal()).collect();
                Tensor::from_parts(patch.shape().to_vec(), data)
            }
        }
        AugmentSpec::HueSaturation { hue, saturation } => {
            let dh = draw(*hue, rng);
            let sat = draw(*saturation, rng);
            hue_saturation(patch, dh, sat)
        }
        AugmentSpec::Brightness { delta } => {
            let d = draw(*delta, rng);
            Tensor::from_parts(patch.shape().to_vec(), patch.data().iter().map(|v| v + d).collect())
        }
        AugmentSpec::Contrast { factor } => contrast(patch, draw(*factor, rng)),
        AugmentSpec::Sequence { steps } => {
            let mut p = patch.clone();
            for s in steps {
                p = transform(&p, s, rng);
            }
            p
        }
    };
    clamp01(out)
}

fn hw(p: &Tensor) -> (usize, usize) {
    (p.shape()[1], p.shape()[2])
}

fn center(p: &Tensor) -> (f64, f64) {
    let (h, w) = hw(p);
    ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0)
}

fn clamp01(t: Tensor) -> Tensor {
    let shape = t.shape().to_vec();
    Tensor::from_parts(shape, t.into_data().into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Output pixel `(y, x)` copies input pixel `src(y, x, h, w)`.
fn permute(p: &Tensor, src: impl Fn(usize, usize, usize, usize) -> (usize, usize)) -> Tensor {
    let (c, h, w) = (p.shape()[0], p.shape()[1], p.shape()[2]);
    let mut out = vec![0.0; p.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let (sy, sx) = src(y, x, h, w);
                out[(ch * h + y) * w + x] = p.data()[(ch * h + sy) * w + sx];
            }
        }
    }
    Tensor::from_parts(p.shape().to_vec(), out)
}

fn rot90(p: &Tensor, turns: u8) -> Tensor {
    let (h, w) = hw(p);
    if h != w {
        return rotate(p, f64::from(turns) * std::f64::consts::FRAC_PI_2);
    }
    (0..turns % 4).fold(p.clone(), |acc, _| permute(&acc, |y, x, _, w| (x, w - 1 - y)))
}

/// Counterclockwise rotation about the patch center.
fn rotate(p: &Tensor, theta: f64) -> Tensor {
    if theta == 0.0 {
        return p.clone();
    }
    let (cy, cx) = center(p);
    let (s, c) = theta.sin_cos();
    resample(p, |y, x| {
        let (dy, dx) = (y - cy, x - cx);
        (cy + c * dy - s * dx, cx + s * dy + c * dx)
    })
}

/// Crops `[top, bottom, left, right]` fractions and stretches back.
fn crop_resize(p: &Tensor, sides: [f64; 4]) -> Tensor {
    let (h, w) = hw(p);
    let (hf, wf) = (h as f64, w as f64);
    let (top, left) = (sides[0] * hf, sides[2] * wf);
    let ch = hf * (1.0 - sides[0] - sides[1]);
    let cw = wf * (1.0 - sides[2] - sides[3]);
    resample(p, |y, x| (top + (y + 0.5) * ch / hf - 0.5, left + (x + 0.5) * cw / wf - 0.5))
}

/// Folds a continuous coordinate into `[0, n - 1]` by mirroring.
fn reflect(u: f64, n: usize) -> f64 {
    if n == 1 {
        return 0.0;
    }
    let period = 2.0 * (n - 1) as f64;
    let u = u.abs() % period;
    if u > (n - 1) as f64 {
        period - u
    } else {
        u
    }
}

/// Bilinear resampling: output `(y, x)` reads input at `src(y, x)`.
fn resample(p: &Tensor, src: impl Fn(f64, f64) -> (f64, f64)) -> Tensor {
    let (c, h, w) = (p.shape()[0], p.shape()[1], p.shape()[2]);
    let d = p.data();
    let mut out = vec![0.0; p.len()];
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y as f64, x as f64);
            let (sy, sx) = (reflect(sy, h), reflect(sx, w));
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            for ch in 0..c {
                let at = |yy: usize, xx: usize| d[(ch * h + yy) * w + xx];
                let top = (1.0 - fx) * at(y0, x0) + fx * at(y0, x1);
                let bottom = (1.0 - fx) * at(y1, x0) + fx * at(y1, x1);
                out[(ch * h + y) * w + x] = (1.0 - fy) * top + fy * bottom;
            }
        }
    }
    Tensor::from_parts(p.shape().to_vec(), out)
}

/// Per-channel 3x3 filter with mirrored borders.
fn conv3x3(p: &Tensor, k: &[f64; 9]) -> Tensor {
    let (c, h, w) = (p.shape()[0], p.shape()[1], p.shape()[2]);
    let d = p.data();
    let idx = |i: isize, n: usize| reflect(i as f64, n) as usize;
    let mut out = vec![0.0; p.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let yy = idx(y as isize + ky as isize - 1, h);
                        let xx = idx(x as isize + kx as isize - 1, w);
                        acc += k[ky * 3 + kx] * d[(ch * h + yy) * w + xx];
                    }
                }
                out[(ch * h + y) * w + x] = acc;
            }
        }
    }
    Tensor::from_parts(p.shape().to_vec(), out)
}

fn blend(a: &Tensor, b: &Tensor, alpha: f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| (1.0 - alpha) * x + alpha * y).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

fn contrast(p: &Tensor, f: f64) -> Tensor {
    let (c, h, w) = (p.shape()[0], p.shape()[1], p.shape()[2]);
    let plane = h * w;
    let mut out = p.data().to_vec();
    for ch in 0..c {
        let slice = &mut out[ch * plane..(ch + 1) * plane];
        let mean = slice.iter().sum::<f64>() / plane as f64;
        slice.iter_mut().for_each(|v| *v = mean + (*v - mean) * f);
    }
    Tensor::from_parts(p.shape().to_vec(), out)
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as u8 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Shifts hue by `dh` turns and scales saturation. Single-channel patches
/// have no hue or saturation and pass through unchanged.
fn hue_saturation(p: &Tensor, dh: f64, sat: f64) -> Tensor {
    let (c, h, w) = (p.shape()[0], p.shape()[1], p.shape()[2]);
    if c != 3 || (dh == 0.0 && sat == 1.0) {
        return p.clone();
    }
    let plane = h * w;
    let d = p.data();
    let mut out = vec![0.0; p.len()];
    for i in 0..plane {
        let (hh, s, v) = rgb_to_hsv(d[i], d[plane + i], d[2 * plane + i]);
        let (r, g, b) = hsv_to_rgb(hh + dh, (s * sat).clamp(0.0, 1.0), v);
        out[i] = r;
        out[plane + i] = g;
        out[2 * plane + i] = b;
    }
    Tensor::from_parts(p.shape().to_vec(), out)
}
