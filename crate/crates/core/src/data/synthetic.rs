//! Synthetic stand-in for stained tissue patches.
//!
//! Every patch has a mid-gray background with a smooth low-frequency
//! texture and per-pixel gaussian noise. Positives also carry a bright
//! textured gaussian blob centered inside the central third of the patch.
//! Pixels are quantized to 8-bit levels so generated data survives a trip
//! through PGM/PPM files bit-exactly.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{Dataset, Example, Label, SplitTag};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Per-channel background tint and blob tint (pinkish tissue, purple blob).
const BACKGROUND_TINT: [f64; 3] = [1.0, 0.82, 0.95];
const BLOB_TINT: [f64; 3] = [0.85, 0.6, 1.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n: usize,
    pub positive_frac: f64,
    pub patch_size: usize,
    pub channels: usize,
    /// Standard deviation of the per-pixel noise.
    pub noise: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n: 200,
            positive_frac: 0.5,
            patch_size: 16,
            channels: 1,
            noise: 0.1,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("synthetic n must be positive".into()));
        }
        if !(self.positive_frac > 0.0 && self.positive_frac < 1.0) {
            return Err(Error::Config(format!(
                "positive_frac must lie in (0, 1), got {}",
                self.positive_frac
            )));
        }
        if self.patch_size < 4 {
            return Err(Error::Config(format!("patch_size must be at least 4, got {}", self.patch_size)));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(Error::Config(format!("channels must be 1 or 3, got {}", self.channels)));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise must be >= 0, got {}", self.noise)));
        }
        Ok(())
    }
}

/// Bounds `[lo, hi)` of the central third along one axis.
pub fn center_region(size: usize) -> (usize, usize) {
    (size / 3, size - size / 3)
}

/// Mean intensity over the central third of every channel.
pub fn center_mean(patch: &Tensor) -> f64 {
    let s = patch.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let (y0, y1) = center_region(h);
    let (x0, x1) = center_region(w);
    let mut sum = 0.0;
    for ch in 0..c {
        for y in y0..y1 {
            for x in x0..x1 {
                sum += patch.data()[(ch * h + y) * w + x];
            }
        }
    }
    sum / (c * (y1 - y0) * (x1 - x0)) as f64
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn render(cfg: &SyntheticConfig, positive: bool, rng: &mut Rng) -> Tensor {
    let s = cfg.patch_size;
    let sf = s as f64;
    let base = 0.5 + rng.uniform_in(-0.03, 0.03);
    // two plane waves, 0.5 to 2 cycles across the patch
    let waves: Vec<(f64, f64, f64)> = (0..2)
        .map(|_| {
            let angle = rng.uniform_in(0.0, 2.0 * PI);
            let freq = rng.uniform_in(0.5, 2.0) * 2.0 * PI / sf;
            (freq * angle.cos(), freq * angle.sin(), rng.uniform_in(0.0, 2.0 * PI))
        })
        .collect();
    let blob = positive.then(|| {
        let jitter = sf / 8.0;
        let cy = (sf - 1.0) / 2.0 + rng.uniform_in(-jitter, jitter);
        let cx = (sf - 1.0) / 2.0 + rng.uniform_in(-jitter, jitter);
        let amp = rng.uniform_in(0.35, 0.5);
        let sigma = (sf / 6.4).max(1.0);
        let grain = rng.uniform_in(0.0, 2.0 * PI);
        (cy, cx, amp, sigma, grain)
    });
    let c = cfg.channels;
    let mut data = vec![0.0; c * s * s];
    for y in 0..s {
        for x in 0..s {
            let (yf, xf) = (y as f64, x as f64);
            let texture: f64 = waves.iter().map(|(ky, kx, ph)| (ky * yf + kx * xf + ph).sin()).sum::<f64>() * 0.02;
            let blob_v = blob.map_or(0.0, |(cy, cx, amp, sigma, grain)| {
                let r2 = (yf - cy).powi(2) + (xf - cx).powi(2);
                let grainy = 0.8 + 0.2 * (1.7 * xf + 2.3 * yf + grain).cos();
                amp * grainy * (-r2 / (2.0 * sigma * sigma)).exp()
            });
            for ch in 0..c {
                let (bt, kt) = if c == 1 { (1.0, 1.0) } else { (BACKGROUND_TINT[ch], BLOB_TINT[ch]) };
                let v = (base + texture) * bt + blob_v * kt;
                data[(ch * s + y) * s + x] = v;
            }
        }
    }
    if cfg.noise > 0.0 {
        for v in &mut data {
            *v += cfg.noise * rng.normal();
        }
    }
    for v in &mut data {
        *v = quantize(*v);
    }
    Tensor::from_parts(vec![c, s, s], data)
}

/// Generates `round(n * positive_frac)` positives at random positions among
/// `n` examples with ids `syn00000`, `syn00001`, ...
pub fn generate_synthetic(cfg: &SyntheticConfig, rng: &mut Rng) -> Result<Dataset> {
    generate_with_prefix(cfg, "syn", rng)
}

/// As [`generate_synthetic`] with ids `<prefix>00000`, ...
pub fn generate_with_prefix(cfg: &SyntheticConfig, prefix: &str, rng: &mut Rng) -> Result<Dataset> {
    cfg.validate()?;
    let n_pos = ((cfg.n as f64 * cfg.positive_frac).round() as usize).clamp(1, cfg.n.max(2) - 1);
    let mut positive = vec![false; cfg.n];
    positive[..n_pos].iter_mut().for_each(|p| *p = true);
    rng.shuffle(&mut positive);
    let root = Rng::new(rng.next_u64());
    let examples: Vec<Example> = positive
        .par_iter()
        .enumerate()
        .map(|(i, &pos)| {
            let id = format!("{prefix}{i:05}");
            let patch = render(cfg, pos, &mut root.fork(&id));
            let label = if pos { Label::Positive } else { Label::Negative };
            Example { id, patch, label }
        })
        .collect();
    Dataset::new(examples, SplitTag::Train)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{filter_outliers, OutlierThresholds};
    use crate::metrics::auc;

    #[test]
    fn exact_positive_count() {
        let cfg = SyntheticConfig {
            n: 100,
            positive_frac: 0.3,
            ..Default::default()
        };
        let d = generate_synthetic(&cfg, &mut Rng::new(5)).unwrap();
        assert_eq!(d.len(), 100);
        assert_eq!(d.count(Label::Positive), 30);
    }

    #[test]
    fn same_seed_same_dataset() {
        let cfg = SyntheticConfig::default();
        let a = generate_synthetic(&cfg, &mut Rng::new(9)).unwrap();
        let b = generate_synthetic(&cfg, &mut Rng::new(9)).unwrap();
        assert_eq!(a, b);
        let c = generate_synthetic(&cfg, &mut Rng::new(10)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn noiseless_center_mean_separates_classes() {
        for channels in [1, 3] {
            for size in [8, 16, 32] {
                let cfg = SyntheticConfig {
                    n: 400,
                    noise: 0.0,
                    channels,
                    patch_size: size,
                    ..Default::default()
                };
                let d = generate_synthetic(&cfg, &mut Rng::new(size as u64)).unwrap();
                let scores: Vec<f64> = d.examples().iter().map(|e| center_mean(e.patch())).collect();
                let labels: Vec<bool> = d.examples().iter().map(|e| e.label() == Label::Positive).collect();
                assert_eq!(auc(&scores, &labels).unwrap(), 1.0, "channels={channels} size={size}");
            }
        }
    }

    #[test]
    fn default_patches_survive_outlier_filter() {
        for noise in [0.0, 0.1, 0.3] {
            let cfg = SyntheticConfig {
                n: 300,
                noise,
                ..Default::default()
            };
            let d = generate_synthetic(&cfg, &mut Rng::new(1)).unwrap();
            let (kept, removed) = filter_outliers(&d, &OutlierThresholds::default()).unwrap();
            assert_eq!((kept.len(), removed.len()), (300, 0));
        }
    }

    #[test]
    fn pixels_are_8bit_levels() {
        let d = generate_synthetic(&SyntheticConfig::default(), &mut Rng::new(2)).unwrap();
        for e in d.examples() {
            for &v in e.patch().data() {
                assert_eq!(quantize(v), v);
            }
        }
    }
}
