//! Batched prediction, test-time augmentation and ensembling.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::augment::transform;
use crate::data::{AugmentSpec, Example};
use crate::error::{Error, Result};
use crate::meta::ArtifactMeta;
use crate::model::{stack_batch, Network};
use crate::numerics::{derive_seed, Rng};

/// Examples per eval-mode forward pass.
pub const PREDICT_CHUNK: usize = 64;
/// Root of the noise streams used by stochastic TTA transforms.
const TTA_SEED: u64 = 0x7474_615f_6e6f_6973;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TtaPresetName {
    #[serde(rename = "tta_dense10")]
    Dense10,
    #[serde(rename = "tta_ens15")]
    Ens15,
}

impl fmt::Display for TtaPresetName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TtaPresetName::Dense10 => "tta_dense10",
            TtaPresetName::Ens15 => "tta_ens15",
        })
    }
}

impl FromStr for TtaPresetName {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tta_dense10" => Ok(TtaPresetName::Dense10),
            "tta_ens15" => Ok(TtaPresetName::Ens15),
            _ => Err(Error::Config(format!("unknown TTA preset `{s}` (expected tta_dense10 or tta_ens15)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TtaPreset {
    pub name: String,
    pub transforms: Vec<AugmentSpec>,
}

impl TtaPreset {
    pub fn named(name: TtaPresetName) -> Self {
        match name {
            TtaPresetName::Dense10 => TtaPreset::dense10(),
            TtaPresetName::Ens15 => TtaPreset::ens15(),
        }
    }

    /// One fixed instance of each training augmentation kind.
    pub fn dense10() -> Self {
        TtaPreset {
            name: TtaPresetName::Dense10.to_string(),
            transforms: vec![
                AugmentSpec::Hflip,
                AugmentSpec::Vflip,
                AugmentSpec::rotate(30.0),
                AugmentSpec::crop_pad(0.1),
                AugmentSpec::scale(1.1),
                AugmentSpec::translate(0.1),
                AugmentSpec::sharpen(0.5),
                AugmentSpec::emboss(0.5),
                AugmentSpec::noise(0.02),
                AugmentSpec::hue_saturation(0.05, 1.2),
            ],
        }
    }

    /// The seven non-trivial dihedral views, four single photometric
    /// changes and four photometric combinations.
    pub fn ens15() -> Self {
        let seq = |steps: Vec<AugmentSpec>| AugmentSpec::Sequence { steps };
        TtaPreset {
            name: TtaPresetName::Ens15.to_string(),
            transforms: vec![
                AugmentSpec::Vflip,
                AugmentSpec::Hflip,
                AugmentSpec::Rot90 { turns: 1 },
                AugmentSpec::Rot90 { turns: 2 },
                AugmentSpec::Rot90 { turns: 3 },
                seq(vec![AugmentSpec::Hflip, AugmentSpec::Rot90 { turns: 1 }]),
                seq(vec![AugmentSpec::Hflip, AugmentSpec::Rot90 { turns: 3 }]),
                AugmentSpec::brightness(0.1),
                AugmentSpec::contrast(1.2),
                AugmentSpec::hue_saturation(0.0, 1.2),
                AugmentSpec::hue_saturation(0.05, 1.0),
                seq(vec![AugmentSpec::brightness(0.05), AugmentSpec::contrast(1.1)]),
                seq(vec![AugmentSpec::hue_saturation(-0.05, 0.8), AugmentSpec::brightness(-0.05)]),
                seq(vec![
                    AugmentSpec::brightness(-0.05),
                    AugmentSpec::contrast(0.9),
                    AugmentSpec::hue_saturation(0.03, 1.1),
                ]),
                seq(vec![AugmentSpec::brightness(0.05), AugmentSpec::hue_saturation(0.0, 1.1)]),
            ],
        }
    }

    pub fn empty() -> Self {
        TtaPreset {
            name: "none".into(),
            transforms: Vec::new(),
        }
    }

    /// The original patch followed by each transformed copy.
    pub fn views(&self, e: &Example) -> Vec<Example> {
        let mut rng = Rng::new(derive_seed(TTA_SEED, e.id()));
        let mut out = Vec::with_capacity(self.transforms.len() + 1);
        out.push(e.clone());
        for t in &self.transforms {
            out.push(e.with_patch(transform(e.patch(), t, &mut rng)));
        }
        out
    }
}

/// Eval-mode probabilities in input order.
pub fn predict_probs(net: &Network, examples: &[Example]) -> Result<Vec<f64>> {
    let chunks: Vec<Vec<f64>> = examples
        .par_chunks(PREDICT_CHUNK)
        .map(|chunk| {
            let batch = stack_batch(chunk.iter().map(Example::patch))?;
            Ok(net.predict(&batch)?.into_data())
        })
        .collect::<Result<_>>()?;
    Ok(chunks.concat())
}

/// Equal-weight mean of the prediction on `e` and on each preset view.
pub fn tta_predict(net: &Network, e: &Example, preset: &TtaPreset) -> Result<f64> {
    let preds = predict_probs(net, &preset.views(e))?;
    ensemble_predict(&preds, None)
}

pub fn tta_predict_many(net: &Network, examples: &[Example], preset: &TtaPreset) -> Result<Vec<f64>> {
    examples.par_iter().map(|e| tta_predict(net, e, preset)).collect()
}

/// Weighted arithmetic mean, equal weights by default.
///
/// Inputs are summed in sorted order as offsets from the minimum, so the
/// result does not depend on input order, equals `p` when every input is
/// `p`, and always lies within `[min, max]`.
pub fn ensemble_predict(preds: &[f64], weights: Option<&[f64]>) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::Validation("ensemble needs at least one prediction".into()));
    }
    if let Some(i) = preds.iter().position(|p| !p.is_finite()) {
        return Err(Error::Validation(format!("prediction {i} is not finite")));
    }
    let mut pairs: Vec<(f64, f64)> = match weights {
        None => preds.iter().map(|&p| (p, 1.0)).collect(),
        Some(w) => {
            if w.len() != preds.len() {
                return Err(Error::Validation(format!("{} weights for {} predictions", w.len(), preds.len())));
            }
            if let Some(i) = w.iter().position(|v| !(*v >= 0.0 && v.is_finite())) {
                return Err(Error::Validation(format!("weight {i} is negative or not finite")));
            }
            preds.iter().copied().zip(w.iter().copied()).collect()
        }
    };
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let total: f64 = pairs.iter().map(|p| p.1).sum();
    if total <= 0.0 {
        return Err(Error::Validation("ensemble weights sum to zero".into()));
    }
    let lo = pairs[0].0;
    let hi = pairs[pairs.len() - 1].0;
    let offset: f64 = pairs.iter().map(|(p, w)| w * (p - lo)).sum::<f64>() / total;
    Ok((lo + offset).clamp(lo, hi))
}

/// Writes `id,probability` rows after a metadata comment line.
pub fn write_predictions(path: &Path, rows: &[(String, f64)], meta: &ArtifactMeta) -> Result<()> {
    let mut out = format!("{}\nid,probability\n", meta.comment_line());
    for (id, p) in rows {
        out.push_str(&format!("{id},{p:?}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<(String, f64)>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    let headers = reader.headers().map_err(|e| Error::parse(path, e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != ["id", "probability"] {
        return Err(Error::parse(path, "header must be `id,probability`"));
    }
    let mut rows = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::parse(path, format!("row {row}: {e}")))?;
        let p: f64 = record[1]
            .parse()
            .map_err(|_| Error::parse(path, format!("row {row}: `{}` is not a number", &record[1])))?;
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::parse(path, format!("row {row}: probability {p} outside [0, 1]")));
        }
        if !seen.insert(record[0].to_string()) {
            return Err(Error::parse(path, format!("row {row}: duplicate id {}", &record[0])));
        }
        rows.push((record[0].to_string(), p));
    }
    Ok(rows)
}
