//! Central-difference verification of the analytic backward pass.
//!
//! The check runs one train-mode forward to fix the dropout masks, then
//! re-evaluates the loss with every parameter nudged by `±eps`. Batch norm
//! keeps normalizing with the statistics of the (perturbed) batch, so the
//! numerical derivative sees exactly the function the backward pass
//! differentiates. Running statistics are never touched.
//!
//! A coordinate whose `±eps` interval moves a ReLU input across zero or
//! changes a max-pooling winner straddles a kink, where the central
//! difference is not a derivative; such coordinates are counted as skipped
//! instead of compared.

use super::{bce_loss, Gradients, Mode, Network};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// Denominator floor for the relative error. Central differences at
/// `eps = 1e-5` resolve a gradient only to about 1e-10 (loss roundoff over
/// `2 eps`), so gradients below the floor are compared on absolute error.
pub const REL_ERROR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerCheck {
    pub index: usize,
    pub kind: String,
    pub params: usize,
    /// Coordinates whose difference interval crossed a kink.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub max_abs_gradient: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub eps: f64,
    pub layers: Vec<LayerCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.layers.iter().fold(0.0, |m, l| m.max(l.max_rel_error))
    }

    pub fn passed(&self, tolerance: f64) -> bool {
        self.max_rel_error() < tolerance
    }

    pub fn skipped(&self) -> usize {
        self.layers.iter().map(|l| l.skipped).sum()
    }

    pub fn checked(&self) -> usize {
        self.layers.iter().map(|l| l.params - l.skipped).sum()
    }

    pub fn failures(&self, tolerance: f64) -> Vec<&LayerCheck> {
        self.layers.iter().filter(|l| l.max_rel_error >= tolerance).collect()
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(REL_ERROR_FLOOR)
}

pub fn grad_check(net: &Network, batch: &Tensor, labels: &Tensor, eps: f64) -> Result<GradCheckReport> {
    grad_check_with(net, batch, labels, eps, |_| {})
}

/// Like [`grad_check`], but lets the caller alter the analytic gradients
/// before comparison (used to confirm the check catches broken backward code).
pub fn grad_check_with(
    net: &Network,
    batch: &Tensor,
    labels: &Tensor,
    eps: f64,
    tamper: impl FnOnce(&mut Gradients),
) -> Result<GradCheckReport> {
    if !(1e-6..=1e-4).contains(&eps) {
        return Err(Error::Validation(format!("eps {eps} outside [1e-6, 1e-4]")));
    }
    let mut work = net.clone();
    work.set_mode(Mode::Train);
    let (_, cache) = work.run(batch, super::Pass::Train(&mut Rng::new(0x6772_6164)))?;
    let (probs, base) = work.forward_replay(batch, &cache)?;
    let pattern = work.branch_pattern(&base);
    let loss = bce_loss(&probs, labels, None)?;
    let mut analytic = work.backward(&cache, &loss.grad)?;
    tamper(&mut analytic);

    let loss_at = |w: &Network| -> Result<(f64, bool)> {
        let (p, c) = w.forward_replay(batch, &cache)?;
        Ok((bce_loss(&p, labels, None)?.value, w.branch_pattern(&c) == pattern))
    };

    let mut layers = Vec::new();
    let n_layers = analytic.layers.len();
    for li in 0..n_layers {
        if analytic.layers[li].is_empty() {
            continue;
        }
        let mut worst: f64 = 0.0;
        let mut worst_abs: f64 = 0.0;
        let mut biggest: f64 = 0.0;
        let mut count = 0;
        let mut skipped = 0;
        for pi in 0..analytic.layers[li].len() {
            for k in 0..analytic.layers[li][pi].len() {
                let original = work.params_mut()[li][pi].value.data()[k];
                work.params_mut()[li][pi].value.data_mut()[k] = original + eps;
                let (up, up_smooth) = loss_at(&work)?;
                work.params_mut()[li][pi].value.data_mut()[k] = original - eps;
                let (down, down_smooth) = loss_at(&work)?;
                work.params_mut()[li][pi].value.data_mut()[k] = original;
                count += 1;
                if !(up_smooth && down_smooth) {
                    skipped += 1;
                    continue;
                }
                let numeric = (up - down) / (2.0 * eps);
                let a = analytic.layers[li][pi].data()[k];
                worst = worst.max(relative_error(a, numeric));
                worst_abs = worst_abs.max((a - numeric).abs());
                biggest = biggest.max(a.abs());
            }
        }
        layers.push(LayerCheck {
            index: li,
            kind: work.config.layers[li].name().to_string(),
            params: count,
            skipped,
            max_rel_error: worst,
            max_abs_error: worst_abs,
            max_abs_gradient: biggest,
        });
    }
    Ok(GradCheckReport { eps, layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{InputShape, LayerSpec, NetworkConfig};

    fn batch_and_labels(n: usize, c: usize, hw: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = Rng::new(seed);
        let x = Tensor::from_fn(&[n, c, hw, hw], |_| rng.uniform());
        let l = Tensor::from_fn(&[n, 1], |i| (i % 2) as f64);
        (x, l)
    }

    fn single_dense() -> Network {
        let cfg = NetworkConfig {
            input: InputShape {
                channels: 3,
                height: 2,
                width: 2,
            },
            layers: vec![LayerSpec::GapGmpConcat, LayerSpec::Dense { units: 1 }, LayerSpec::Sigmoid],
        };
        Network::build(&cfg, &mut Rng::new(5)).unwrap()
    }

    #[test]
    fn single_dense_layer_matches() {
        let (x, l) = batch_and_labels(4, 3, 2, 1);
        let report = grad_check(&single_dense(), &x, &l, 1e-5).unwrap();
        assert!(report.passed(1e-4), "{report:?}");
    }

    #[test]
    fn doubled_gradient_is_caught() {
        let (x, l) = batch_and_labels(4, 3, 2, 1);
        let report = grad_check_with(&single_dense(), &x, &l, 1e-5, |g| {
            for t in &mut g.layers[1] {
                t.data_mut().iter_mut().for_each(|v| *v *= 2.0);
            }
        })
        .unwrap();
        let err = report.layers[0].max_rel_error;
        assert!((err - 1.0 / 3.0).abs() < 1e-4, "{err}");
    }

    #[test]
    fn zero_input_conv_gradients_vanish() {
        let cfg = NetworkConfig::desk_default(1, 4);
        let net = Network::build(&cfg, &mut Rng::new(2)).unwrap();
        let x = Tensor::zeros(&[3, 1, 4, 4]);
        let l = Tensor::new(vec![3, 1], vec![1.0, 0.0, 1.0]).unwrap();
        let report = grad_check(&net, &x, &l, 1e-5).unwrap();
        let conv = &report.layers[0];
        assert_eq!(conv.kind, "conv3x3");
        assert!(conv.max_rel_error < 1e-4, "{report:?}");
    }

    #[test]
    fn eps_outside_range_is_rejected() {
        let (x, l) = batch_and_labels(2, 3, 2, 1);
        assert!(grad_check(&single_dense(), &x, &l, 1e-2).is_err());
    }
}

#[cfg(test)]
mod full_network {
    use super::*;
    use crate::model::NetworkConfig;

    #[test]
    fn desk_default_network_passes() {
        for seed in 0..3 {
            let net = Network::build(&NetworkConfig::desk_default(1, 8), &mut Rng::new(seed)).unwrap();
            let mut rng = Rng::new(100 + seed);
            let x = Tensor::from_fn(&[4, 1, 8, 8], |_| rng.uniform());
            let l = Tensor::new(vec![4, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
            let report = grad_check(&net, &x, &l, 1e-5).unwrap();
            assert!(report.passed(1e-4), "seed {seed}: {:?}", report.failures(1e-4));
        }
    }
}
