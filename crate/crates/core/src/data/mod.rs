//! Patches, datasets, outlier filtering and stratified splitting.

pub mod augment;
pub mod io;
pub mod synthetic;

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub use augment::{augment, AugmentPolicy, AugmentSpec};
pub use io::{load_dataset, save_dataset};
pub use synthetic::{generate_synthetic, SyntheticConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Positive,
    Negative,
    Unlabeled,
    PseudoPositive,
    PseudoNegative,
}

impl Label {
    /// Training target, if any.
    pub fn target(self) -> Option<f64> {
        match self {
            Label::Positive | Label::PseudoPositive => Some(1.0),
            Label::Negative | Label::PseudoNegative => Some(0.0),
            Label::Unlabeled => None,
        }
    }

    pub fn is_pseudo(self) -> bool {
        matches!(self, Label::PseudoPositive | Label::PseudoNegative)
    }

    pub fn is_real(self) -> bool {
        matches!(self, Label::Positive | Label::Negative)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    id: String,
    patch: Tensor,
    label: Label,
}

fn check_patch(id: &str, patch: &Tensor) -> Result<()> {
    if patch.shape().len() != 3 {
        return Err(Error::Validation(format!(
            "example {id}: patch must be [C, H, W], got {:?}",
            patch.shape()
        )));
    }
    if let Some(v) = patch.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Validation(format!("example {id}: pixel value {v} outside [0, 1]")));
    }
    Ok(())
}

impl Example {
    /// Builds an example with a real label or `Unlabeled`; pseudo labels are
    /// only assigned by the pseudo-labeling engine.
    pub fn new(id: impl Into<String>, patch: Tensor, label: Label) -> Result<Self> {
        let id = id.into();
        if label.is_pseudo() {
            return Err(Error::Validation(format!(
                "example {id}: pseudo labels cannot be assigned directly"
            )));
        }
        check_patch(&id, &patch)?;
        Ok(Example { id, patch, label })
    }

    pub(crate) fn with_pseudo_label(&self, positive: bool) -> Example {
        Example {
            id: self.id.clone(),
            patch: self.patch.clone(),
            label: if positive {
                Label::PseudoPositive
            } else {
                Label::PseudoNegative
            },
        }
    }

    pub(crate) fn with_patch(&self, patch: Tensor) -> Example {
        debug_assert!(check_patch(&self.id, &patch).is_ok());
        Example {
            id: self.id.clone(),
            patch,
            label: self.label,
        }
    }

    /// Copy of this example with its label hidden.
    pub fn unlabeled(&self) -> Example {
        Example {
            label: Label::Unlabeled,
            ..self.clone()
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn patch(&self) -> &Tensor {
        &self.patch
    }

    pub fn label(&self) -> Label {
        self.label
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Val,
    Test,
    Unlabeled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    examples: Vec<Example>,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, split: SplitTag) -> Result<Self> {
        let mut seen = HashSet::with_capacity(examples.len());
        for e in &examples {
            if !seen.insert(e.id.as_str()) {
                return Err(Error::Validation(format!("duplicate example id {}", e.id)));
            }
        }
        Ok(Dataset { examples, split })
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn into_examples(self) -> Vec<Example> {
        self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn ids(&self) -> Vec<&str> {
        self.examples.iter().map(|e| e.id.as_str()).collect()
    }

    pub fn count(&self, label: Label) -> usize {
        self.examples.iter().filter(|e| e.label == label).count()
    }

    /// Examples matching `keep`, preserving order.
    pub fn filtered(&self, split: SplitTag, keep: impl Fn(&Example) -> bool) -> Dataset {
        Dataset {
            examples: self.examples.iter().filter(|e| keep(e)).cloned().collect(),
            split,
        }
    }

    /// `[C, H, W]` of the first patch, if any.
    pub fn patch_shape(&self) -> Option<&[usize]> {
        self.examples.first().map(|e| e.patch.shape())
    }
}

/// Thresholds for discarding near-blank patches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OutlierThresholds {
    /// Maximum tolerated fraction of white pixels.
    pub white_thresh: f64,
    /// Maximum tolerated fraction of black pixels.
    pub black_thresh: f64,
    /// Intensity at or above which a pixel counts as white.
    pub white_level: f64,
    /// Intensity at or below which a pixel counts as black.
    pub black_level: f64,
}

impl Default for OutlierThresholds {
    fn default() -> Self {
        OutlierThresholds {
            white_thresh: 0.95,
            black_thresh: 0.95,
            white_level: 0.96,
            black_level: 0.04,
        }
    }
}

impl OutlierThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("white_thresh", self.white_thresh), ("black_thresh", self.black_thresh)] {
            if !(v > 0.0 && v <= 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1], got {v}")));
            }
        }
        Ok(())
    }

    pub fn is_outlier(&self, patch: &Tensor) -> bool {
        let n = patch.len() as f64;
        let white = patch.data().iter().filter(|&&v| v >= self.white_level).count() as f64 / n;
        let black = patch.data().iter().filter(|&&v| v <= self.black_level).count() as f64 / n;
        white > self.white_thresh || black > self.black_thresh
    }
}

/// Partitions `d` into `(kept, removed)`.
pub fn filter_outliers(d: &Dataset, th: &OutlierThresholds) -> Result<(Dataset, Dataset)> {
    th.validate()?;
    let kept = d.filtered(d.split, |e| !th.is_outlier(&e.patch));
    let removed = d.filtered(d.split, |e| th.is_outlier(&e.patch));
    Ok((kept, removed))
}

/// Stratified random split into `(train, val)`. Each label group sends
/// `round(val_frac * n)` examples (at least one, at most `n - 1`) to
/// validation. Output order follows the input order.
pub fn split(d: &Dataset, val_frac: f64, rng: &mut Rng) -> Result<(Dataset, Dataset)> {
    if !(val_frac > 0.0 && val_frac < 1.0) {
        return Err(Error::Config(format!("val_frac must lie in (0, 1), got {val_frac}")));
    }
    let mut groups: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for (i, e) in d.examples.iter().enumerate() {
        groups.entry(e.label).or_default().push(i);
    }
    let mut in_val = vec![false; d.len()];
    for (label, mut idx) in groups {
        if idx.len() < 2 {
            return Err(Error::Validation(format!(
                "cannot split class {label:?} with {} example(s)",
                idx.len()
            )));
        }
        let n = idx.len();
        let n_val = ((val_frac * n as f64).round() as usize).clamp(1, n - 1);
        rng.shuffle(&mut idx);
        for &i in &idx[..n_val] {
            in_val[i] = true;
        }
    }
    let train = Dataset {
        examples: d.examples.iter().zip(&in_val).filter(|(_, v)| !**v).map(|(e, _)| e.clone()).collect(),
        split: SplitTag::Train,
    };
    let val = Dataset {
        examples: d.examples.iter().zip(&in_val).filter(|(_, v)| **v).map(|(e, _)| e.clone()).collect(),
        split: SplitTag::Val,
    };
    Ok((train, val))
}
