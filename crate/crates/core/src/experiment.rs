//! Experiment configuration and the data-to-model pipeline behind the
//! training commands.
//!
//! Every random choice draws from a stream forked off the root seed by a
//! purpose label (`synthetic`, `holdout`, `labeled-split`, `val-split`,
//! `init`, `ssl`), so changing one stage never shifts another.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::synthetic::generate_with_prefix;
use crate::data::{filter_outliers, load_dataset, split, Dataset, Label, OutlierThresholds, SplitTag, SyntheticConfig};
use crate::error::{Error, Result};
use crate::meta::{config_hash, ArtifactMeta};
use crate::model::{Network, NetworkConfig};
use crate::numerics::Rng;
use crate::ssl::{run_ssl, strip_labels, Pools, SslOutcome, SslSettings, TrainSettings};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest to train from; the synthetic generator is used when absent.
    pub manifest: Option<PathBuf>,
    /// Labeled examples kept for evaluation only.
    pub holdout_manifest: Option<PathBuf>,
    pub synthetic: SyntheticConfig,
    /// Size of an independently generated synthetic holdout set (0 = none).
    pub holdout_n: usize,
    /// Fraction of labeled examples that keep their labels; the rest join
    /// the unlabeled pool.
    pub labeled_frac: f64,
    pub val_frac: f64,
    pub filter_outliers: bool,
    pub outliers: OutlierThresholds,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            holdout_manifest: None,
            synthetic: SyntheticConfig::default(),
            holdout_n: 0,
            labeled_frac: 1.0,
            val_frac: 0.2,
            filter_outliers: true,
            outliers: OutlierThresholds::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    /// Defaults to the desk network sized for the data.
    pub model: Option<NetworkConfig>,
    pub train: TrainSettings,
    pub ssl: SslSettings,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = ExperimentConfig::from_toml(&text, path)?;
        // relative data paths are resolved against the config's directory
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.manifest, &mut cfg.data.holdout_manifest].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if !(d.labeled_frac > 0.0 && d.labeled_frac <= 1.0) {
            return Err(Error::Config(format!("labeled_frac must lie in (0, 1], got {}", d.labeled_frac)));
        }
        if !(d.val_frac > 0.0 && d.val_frac < 1.0) {
            return Err(Error::Config(format!("val_frac must lie in (0, 1), got {}", d.val_frac)));
        }
        if d.manifest.is_none() {
            d.synthetic.validate()?;
        }
        d.outliers.validate()?;
        self.train.validate()?;
        self.ssl.validate()
    }

    /// Hash of the canonical JSON rendering of the resolved config.
    pub fn hash(&self) -> String {
        config_hash(&serde_json::to_string(self).expect("config serializes"))
    }

    pub fn meta(&self) -> ArtifactMeta {
        ArtifactMeta::new(self.seed, self.hash())
    }
}

/// Builds the labeled train/val pools, the unlabeled pool and the holdout.
pub fn prepare_pools(cfg: &ExperimentConfig) -> Result<Pools> {
    cfg.validate()?;
    let d = &cfg.data;
    let root = Rng::new(cfg.seed);
    let full = match &d.manifest {
        Some(m) => load_dataset(m, None)?,
        None => generate_with_prefix(&d.synthetic, "syn", &mut root.fork("synthetic"))?,
    };
    let full = if d.filter_outliers {
        filter_outliers(&full, &d.outliers)?.0
    } else {
        full
    };
    let labeled = full.filtered(SplitTag::Train, |e| e.label().is_real());
    let mut unlabeled: Vec<_> = full.filtered(SplitTag::Unlabeled, |e| e.label() == Label::Unlabeled).into_examples();
    let labeled = if d.labeled_frac < 1.0 {
        let (rest, keep) = split(&labeled, d.labeled_frac, &mut root.fork("labeled-split"))?;
        unlabeled.extend(strip_labels(&rest)?.into_examples());
        keep
    } else {
        labeled
    };
    let (train, val) = split(&labeled, d.val_frac, &mut root.fork("val-split"))?;
    let holdout = match (&d.holdout_manifest, d.holdout_n) {
        (Some(m), _) => Some(load_dataset(m, None)?.filtered(SplitTag::Test, |e| e.label().is_real())),
        (None, 0) => None,
        (None, n) if d.manifest.is_none() => {
            let hc = SyntheticConfig { n, ..d.synthetic };
            let h = generate_with_prefix(&hc, "hold", &mut root.fork("holdout"))?;
            Some(Dataset::new(h.into_examples(), SplitTag::Test)?)
        }
        (None, _) => return Err(Error::Config("holdout_n needs synthetic data; use holdout_manifest".into())),
    };
    Ok(Pools {
        train,
        val,
        unlabeled: Dataset::new(unlabeled, SplitTag::Unlabeled)?,
        holdout,
    })
}

/// Network config for these pools: the configured one, or the desk default
/// sized to the patches.
pub fn network_config(cfg: &ExperimentConfig, pools: &Pools) -> Result<NetworkConfig> {
    if let Some(m) = &cfg.model {
        return Ok(m.clone());
    }
    let shape = pools
        .train
        .patch_shape()
        .ok_or_else(|| Error::Validation("empty training pool".into()))?;
    if shape[1] != shape[2] {
        return Err(Error::Config(format!("non-square patches {shape:?} need an explicit model config")));
    }
    Ok(NetworkConfig::desk_default(shape[0], shape[1]))
}

pub fn initial_network(cfg: &ExperimentConfig, pools: &Pools) -> Result<Network> {
    Network::build(&network_config(cfg, pools)?, &mut Rng::new(cfg.seed).fork("init"))
}

/// Trains on prepared pools. With `runs = 1` (or no unlabeled data) this is
/// plain supervised training.
pub fn train_on(cfg: &ExperimentConfig, pools: &Pools) -> Result<SslOutcome> {
    let net = initial_network(cfg, pools)?;
    run_ssl(net, pools, &cfg.train, &cfg.ssl, cfg.data.val_frac, &Rng::new(cfg.seed).fork("ssl"))
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<(Pools, SslOutcome)> {
    let pools = prepare_pools(cfg)?;
    let out = train_on(cfg, &pools)?;
    Ok((pools, out))
}

/// The same pools with the unlabeled pool removed.
pub fn supervised_pools(pools: &Pools) -> Pools {
    Pools {
        unlabeled: Dataset::new(Vec::new(), SplitTag::Unlabeled).expect("empty dataset"),
        ..pools.clone()
    }
}
