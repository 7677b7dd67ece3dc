use std::collections::BTreeMap;

use proptest::prelude::*;

use patchssl::data::{generate_synthetic, Label, SyntheticConfig};
use patchssl::experiment::{prepare_pools, supervised_pools, train_on, ExperimentConfig};
use patchssl::ssl::{assign_pseudo_labels, balance_pseudo, strip_labels, PseudoLabelSet, PseudoThresholds};
use patchssl::Rng;

fn small(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.seed = seed;
    cfg.data.synthetic = SyntheticConfig {
        n: 400,
        patch_size: 8,
        noise: 0.1,
        ..Default::default()
    };
    cfg.data.labeled_frac = 0.3;
    cfg.train.epochs = 3;
    cfg.train.lr_max = 0.05;
    cfg.train.batch_size = 16;
    cfg.ssl.runs = 4;
    cfg
}

#[test]
fn zero_alpha_ignores_the_unlabeled_pool() {
    // pseudo sets are still built and enter validation, but never the gradient
    let mut cfg = small(8);
    cfg.ssl.alpha.alpha_final = 0.0;
    let pools = prepare_pools(&cfg).unwrap();
    let with = train_on(&cfg, &pools).unwrap();
    let without = train_on(&cfg, &supervised_pools(&pools)).unwrap();
    assert_eq!(with.network, without.network);
    assert!(with.pseudo_sets.iter().any(|s| !s.is_empty()));
}

#[test]
fn pseudo_term_changes_training() {
    let cfg = small(8);
    let pools = prepare_pools(&cfg).unwrap();
    let with = train_on(&cfg, &pools).unwrap();
    let without = train_on(&cfg, &supervised_pools(&pools)).unwrap();
    assert!(with.history.runs.iter().any(|r| r.pseudo_train > 0));
    assert_ne!(with.network, without.network);
}

#[test]
fn run_history_shape() {
    let cfg = small(4);
    let out = train_on(&cfg, &prepare_pools(&cfg).unwrap()).unwrap();
    assert_eq!(out.history.runs.len(), 4);
    assert_eq!(out.history.epochs.len(), 12);
    assert_eq!(out.history.runs[0].alpha, 0.0);
    for (r, set) in out.pseudo_sets.iter().enumerate() {
        assert_eq!(set.source_run, r);
        assert_eq!(set.n_pos, set.n_neg);
    }
    let best = &out.history.epochs[out.summary.best_run * 3 + out.summary.best_epoch];
    assert_eq!(best.clean_val_auc, out.summary.best_clean_val_auc);
    assert!(out.history.epochs.iter().all(|e| e.clean_val_auc <= out.summary.best_clean_val_auc));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pseudo_sets_stay_inside_the_unlabeled_pool(
        probs in proptest::collection::vec(0.0f64..=1.0, 40),
        lo in 0.0f64..0.4,
        hi in 0.6f64..1.0,
    ) {
        let d = generate_synthetic(&SyntheticConfig { n: 40, patch_size: 8, ..Default::default() }, &mut Rng::new(1)).unwrap();
        let pool = strip_labels(&d).unwrap();
        let map: BTreeMap<String, f64> = pool.ids().into_iter().map(String::from).zip(probs.iter().copied()).collect();
        let th = PseudoThresholds { positive_above: hi, negative_below: lo };
        let c = assign_pseudo_labels(&map, &th).unwrap();
        let b = balance_pseudo(&c);
        let set = PseudoLabelSet::build(&pool, &b, 1).unwrap();
        prop_assert_eq!(set.n_pos, set.n_neg);
        prop_assert_eq!(set.len(), 2 * c.positive.len().min(c.negative.len()));
        for e in &set.examples {
            let original = pool.examples().iter().find(|o| o.id() == e.id()).unwrap();
            prop_assert_eq!(original.patch(), e.patch());
            let p = map[e.id()];
            match e.label() {
                Label::PseudoPositive => prop_assert!(p > hi),
                Label::PseudoNegative => prop_assert!(p < lo),
                other => prop_assert!(false, "unexpected label {:?}", other),
            }
        }
        // balancing keeps the most confident of the larger class
        let kept: Vec<f64> = b.positive.iter().chain(&b.negative).map(|(_, p)| (p - 0.5).abs()).collect();
        let dropped = c.positive.iter().chain(&c.negative).filter(|x| !b.positive.contains(x) && !b.negative.contains(x));
        for (_, p) in dropped {
            let side: Vec<f64> = if *p > 0.5 { b.positive.iter() } else { b.negative.iter() }.map(|(_, q)| (q - 0.5).abs()).collect();
            prop_assert!(side.iter().all(|&q| q >= (p - 0.5).abs()));
        }
        prop_assert!(kept.iter().all(|k| *k > 0.0));
    }
}

#[test]
fn labeled_pools_never_gain_pseudo_examples() {
    let cfg = small(6);
    let pools = prepare_pools(&cfg).unwrap();
    let out = train_on(&cfg, &pools).unwrap();
    let unlabeled = pools.unlabeled.ids();
    for set in &out.pseudo_sets {
        for e in &set.examples {
            assert!(unlabeled.contains(&e.id()));
            assert!(e.label().is_pseudo());
        }
    }
    assert!(pools.train.examples().iter().chain(pools.val.examples()).all(|e| e.label().is_real()));
}
