//! Averaging models that differ only in their seeds shrinks the spread of
//! the prediction at a fixed input.

use patchssl::data::SyntheticConfig;
use patchssl::experiment::{initial_network, prepare_pools, ExperimentConfig};
use patchssl::infer::{ensemble_predict, predict_probs};
use patchssl::ssl::run_ssl;
use patchssl::Rng;

const MODELS: usize = 40;
const ENSEMBLE: usize = 5;
const POINTS: usize = 20;

fn variance(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64
}

#[test]
fn seed_ensemble_reduces_variance() {
    let mut cfg = ExperimentConfig::default();
    cfg.data.synthetic = SyntheticConfig {
        n: 120,
        patch_size: 8,
        noise: 0.25,
        ..Default::default()
    };
    cfg.data.holdout_n = POINTS;
    cfg.train.epochs = 3;
    cfg.train.lr_max = 0.05;
    cfg.train.batch_size = 16;
    cfg.ssl.runs = 1;
    let pools = prepare_pools(&cfg).unwrap();
    let points = pools.holdout.clone().unwrap();

    // per model, the predictions at every test point
    let preds: Vec<Vec<f64>> = (0..MODELS as u64)
        .map(|seed| {
            let mut c = cfg.clone();
            c.seed = 1000 + seed;
            let net = initial_network(&c, &pools).unwrap();
            let out = run_ssl(net, &pools, &c.train, &c.ssl, c.data.val_frac, &Rng::new(c.seed)).unwrap();
            predict_probs(&out.network, points.examples()).unwrap()
        })
        .collect();

    let mut ratios: Vec<f64> = (0..POINTS)
        .map(|i| {
            let single: Vec<f64> = preds.iter().map(|p| p[i]).collect();
            let ensembles: Vec<f64> = single.chunks(ENSEMBLE).map(|g| ensemble_predict(g, None).unwrap()).collect();
            variance(&ensembles) / variance(&single)
        })
        .collect();
    ratios.sort_by(f64::total_cmp);
    let median = 0.5 * (ratios[POINTS / 2 - 1] + ratios[POINTS / 2]);
    assert!(median <= 1.0, "median variance ratio {median}, ratios {ratios:?}");
}
