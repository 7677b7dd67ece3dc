//! Pseudo-labeling: threshold assignment, class balancing, the alpha ramp,
//! the combined loss and the repeated fine-tuning driver.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentPolicy, Dataset, Example, Label, SplitTag};
use crate::error::{Error, Result};
use crate::infer::{predict_probs, tta_predict_many, TtaPreset, TtaPresetName};
use crate::meta::ArtifactMeta;
use crate::metrics::auc;
use crate::model::{bce_loss, loss::clamp_prob, sgd_momentum_step, stack_batch, LossValue, Network};
use crate::numerics::{Rng, Tensor};
use crate::schedule::{self, OneCycleConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PseudoThresholds {
    pub positive_above: f64,
    pub negative_below: f64,
}

impl Default for PseudoThresholds {
    fn default() -> Self {
        PseudoThresholds {
            positive_above: 0.9,
            negative_below: 0.1,
        }
    }
}

impl PseudoThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 < self.negative_below && self.negative_below < self.positive_above && self.positive_above < 1.0) {
            return Err(Error::Config(format!(
                "need 0 < negative_below < positive_above < 1, got {} / {}",
                self.negative_below, self.positive_above
            )));
        }
        Ok(())
    }
}

/// Weight of the pseudo-label term per fine-tuning run: zero before `t1`,
/// a linear ramp up to `alpha_final` at `t2`, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AlphaSchedule {
    pub alpha_final: f64,
    pub t1: usize,
    pub t2: usize,
}

impl Default for AlphaSchedule {
    fn default() -> Self {
        AlphaSchedule {
            alpha_final: 1.0,
            t1: 1,
            t2: 5,
        }
    }
}

impl AlphaSchedule {
    /// `alpha_final = 0` is accepted and switches the pseudo term off.
    pub fn validate(&self) -> Result<()> {
        if self.t1 >= self.t2 {
            return Err(Error::Config(format!("alpha ramp needs t1 < t2, got {} / {}", self.t1, self.t2)));
        }
        if !(self.alpha_final >= 0.0 && self.alpha_final.is_finite()) {
            return Err(Error::Config(format!("alpha_final must be >= 0, got {}", self.alpha_final)));
        }
        Ok(())
    }
}

pub fn alpha_at(sched: &AlphaSchedule, run: usize) -> f64 {
    if run < sched.t1 {
        0.0
    } else if run < sched.t2 {
        sched.alpha_final * (run - sched.t1) as f64 / (sched.t2 - sched.t1) as f64
    } else {
        sched.alpha_final
    }
}

/// Thresholded ids with their probabilities, before or after balancing.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Candidates {
    pub positive: Vec<(String, f64)>,
    pub negative: Vec<(String, f64)>,
}

pub fn assign_pseudo_labels(probs: &BTreeMap<String, f64>, th: &PseudoThresholds) -> Result<Candidates> {
    th.validate()?;
    let mut c = Candidates::default();
    for (id, &p) in probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Validation(format!("probability {p} for {id} outside [0, 1]")));
        }
        if p > th.positive_above {
            c.positive.push((id.clone(), p));
        } else if p < th.negative_below {
            c.negative.push((id.clone(), p));
        }
    }
    Ok(c)
}

/// Most confident first (largest `|p - 0.5|`), ties by ascending id.
fn by_confidence(items: &mut [(String, f64)]) {
    items.sort_by(|a, b| {
        let ca = (a.1 - 0.5).abs();
        let cb = (b.1 - 0.5).abs();
        cb.total_cmp(&ca).then_with(|| a.0.cmp(&b.0))
    });
}

/// Keeps the `k = min(n_pos, n_neg)` most confident candidates of each class.
pub fn balance_pseudo(c: &Candidates) -> Candidates {
    let k = c.positive.len().min(c.negative.len());
    let mut positive = c.positive.clone();
    let mut negative = c.negative.clone();
    by_confidence(&mut positive);
    by_confidence(&mut negative);
    positive.truncate(k);
    negative.truncate(k);
    Candidates { positive, negative }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabelSet {
    /// Sorted by id.
    pub examples: Vec<Example>,
    pub source_run: usize,
    pub n_pos: usize,
    pub n_neg: usize,
}

impl PseudoLabelSet {
    pub fn empty(source_run: usize) -> Self {
        PseudoLabelSet {
            examples: Vec::new(),
            source_run,
            n_pos: 0,
            n_neg: 0,
        }
    }

    /// Attaches the balanced labels to the matching examples of `pool`.
    pub fn build(pool: &Dataset, balanced: &Candidates, source_run: usize) -> Result<Self> {
        let by_id: BTreeMap<&str, &Example> = pool.examples().iter().map(|e| (e.id(), e)).collect();
        let mut examples = Vec::with_capacity(balanced.positive.len() + balanced.negative.len());
        for (list, positive) in [(&balanced.positive, true), (&balanced.negative, false)] {
            for (id, _) in list {
                let e = by_id
                    .get(id.as_str())
                    .ok_or_else(|| Error::Validation(format!("pseudo candidate {id} is not in the unlabeled pool")))?;
                examples.push(e.with_pseudo_label(positive));
            }
        }
        examples.sort_by(|a, b| a.id().cmp(b.id()));
        Ok(PseudoLabelSet {
            examples,
            source_run,
            n_pos: balanced.positive.len(),
            n_neg: balanced.negative.len(),
        })
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombinedLoss {
    pub value: f64,
    pub labeled: Option<LossValue>,
    pub pseudo: Option<LossValue>,
}

/// `(1/n) sum BCE(labeled) + alpha * (1/n') sum BCE(pseudo)`. Each batch is
/// `(probs, labels)`; a missing batch contributes nothing, and so does the
/// pseudo batch when `alpha == 0`.
pub fn combined_loss(
    labeled: Option<(&Tensor, &Tensor)>,
    pseudo: Option<(&Tensor, &Tensor)>,
    alpha: f64,
) -> Result<CombinedLoss> {
    let labeled = labeled.filter(|(p, _)| !p.is_empty());
    let pseudo = pseudo.filter(|(p, _)| !p.is_empty());
    if labeled.is_none() && pseudo.is_none() {
        return Err(Error::Validation("combined loss needs at least one non-empty batch".into()));
    }
    let lab = labeled.map(|(p, l)| bce_loss(p, l, None)).transpose()?;
    let pse = if alpha == 0.0 {
        None
    } else {
        pseudo.map(|(p, l)| bce_loss(p, l, None)).transpose()?
    };
    let value = match (&lab, &pse) {
        (Some(a), Some(b)) => a.value + alpha * b.value,
        (Some(a), None) => a.value,
        (None, Some(b)) => alpha * b.value,
        (None, None) => 0.0,
    };
    Ok(CombinedLoss {
        value,
        labeled: lab,
        pseudo: pse,
    })
}

fn binary_entropy(p: f64) -> f64 {
    let p = clamp_prob(p);
    -(p * p.ln() + (1.0 - p) * (1.0 - p).ln())
}

/// Mean binary entropy (nonnegative, in nats) of clamped probabilities.
pub fn unlabeled_entropy(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Validation("entropy of an empty prediction set".into()));
    }
    Ok(probs.iter().map(|&p| binary_entropy(p)).sum::<f64>() / probs.len() as f64)
}

/// Mean labeled log-likelihood minus `lambda` times the mean unlabeled
/// entropy. Reported only; never optimized directly.
pub fn map_objective(probs: &[f64], labels: &[f64], unlabeled_probs: &[f64], lambda: f64) -> Result<f64> {
    if probs.is_empty() || probs.len() != labels.len() {
        return Err(Error::Validation(format!(
            "MAP objective needs matching non-empty inputs, got {} / {}",
            probs.len(),
            labels.len()
        )));
    }
    let ll = probs
        .iter()
        .zip(labels)
        .map(|(&p, &l)| {
            let p = clamp_prob(p);
            l * p.ln() + (1.0 - l) * (1.0 - p).ln()
        })
        .sum::<f64>()
        / probs.len() as f64;
    let h = if unlabeled_probs.is_empty() {
        0.0
    } else {
        unlabeled_entropy(unlabeled_probs)?
    };
    Ok(ll - lambda * h)
}

/// Optimization settings shared by every fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    /// `lr_min = lr_max / lr_div`.
    pub lr_div: f64,
    /// `final_lr = lr_min / final_div`.
    pub final_div: f64,
    pub momentum_high: f64,
    pub momentum_low: f64,
    /// Each one-cycle ramp spans this fraction of a run's iterations.
    pub step_fraction: f64,
    pub augment: AugmentPolicy,
}

impl Default for TrainSettings {
    fn default() -> Self {
        TrainSettings {
            epochs: 7,
            batch_size: 32,
            lr_max: schedule::DEFAULT_LR_MAX,
            lr_div: 10.0,
            final_div: schedule::DEFAULT_ANNIHILATION_FACTOR,
            momentum_high: schedule::DEFAULT_MOMENTUM_HIGH,
            momentum_low: schedule::DEFAULT_MOMENTUM_LOW,
            step_fraction: schedule::DEFAULT_STEP_FRACTION,
            augment: AugmentPolicy::none(),
        }
    }
}

impl TrainSettings {
    pub fn one_cycle(&self, total_iterations: usize) -> Result<OneCycleConfig> {
        let lr_min = self.lr_max / self.lr_div;
        let cfg = OneCycleConfig {
            lr_max: self.lr_max,
            lr_min,
            momentum_high: self.momentum_high,
            momentum_low: self.momentum_low,
            step_size: schedule::default_step(total_iterations, self.step_fraction),
            total_iterations,
            final_lr: lr_min / self.final_div,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr_div > 1.0 && self.final_div >= 1.0) {
            return Err(Error::Config("need lr_div > 1 and final_div >= 1".into()));
        }
        if !(self.step_fraction > 0.0 && self.step_fraction < 0.5) {
            return Err(Error::Config(format!("step_fraction must lie in (0, 0.5), got {}", self.step_fraction)));
        }
        self.one_cycle(100)?;
        self.augment.validate()
    }
}

/// How the pseudo pool is cut into mini-batches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoBatching {
    /// Pseudo batches of `batch_size`; an epoch walks the larger pool.
    Matched,
    /// An epoch walks the labeled pool; the pseudo pool is spread over the
    /// same iterations, `ceil(n_pseudo / iterations)` per batch.
    Spread,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SslSettings {
    pub runs: usize,
    pub pseudo_batching: PseudoBatching,
    pub thresholds: PseudoThresholds,
    pub alpha: AlphaSchedule,
    /// Average pseudo-label predictions over a TTA preset.
    pub tta_pseudo: Option<TtaPresetName>,
    /// Unlabeled examples scored each epoch for the entropy diagnostic.
    pub entropy_sample: usize,
    /// Weight of the entropy term in the reported MAP objective.
    pub map_lambda: f64,
}

impl Default for SslSettings {
    fn default() -> Self {
        SslSettings {
            runs: 10,
            pseudo_batching: PseudoBatching::Spread,
            thresholds: PseudoThresholds::default(),
            alpha: AlphaSchedule::default(),
            tta_pseudo: None,
            entropy_sample: 256,
            map_lambda: 1.0,
        }
    }
}

impl SslSettings {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::Config("runs must be positive".into()));
        }
        self.thresholds.validate()?;
        self.alpha.validate()
    }
}

/// Labeled train/val pools, the unlabeled pool and an optional untouched
/// holdout set.
#[derive(Debug, Clone, PartialEq)]
pub struct Pools {
    pub train: Dataset,
    pub val: Dataset,
    pub unlabeled: Dataset,
    pub holdout: Option<Dataset>,
}

impl Pools {
    pub fn validate(&self) -> Result<()> {
        for (name, d) in [("train", &self.train), ("val", &self.val)] {
            if d.is_empty() || d.examples().iter().any(|e| !e.label().is_real()) {
                return Err(Error::Validation(format!("{name} pool must be non-empty and fully labeled")));
            }
        }
        if self.unlabeled.examples().iter().any(|e| e.label() != Label::Unlabeled) {
            return Err(Error::Validation("unlabeled pool contains labeled examples".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub run: usize,
    pub epoch: usize,
    pub iterations: usize,
    pub alpha: f64,
    pub train_loss: f64,
    /// On the validation pool including pseudo-labeled examples.
    pub val_loss: f64,
    pub val_auc: f64,
    /// On the labeled validation examples only.
    pub clean_val_auc: f64,
    pub holdout_auc: Option<f64>,
    pub unlabeled_entropy: Option<f64>,
    pub map_objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub alpha: f64,
    pub candidates_pos: usize,
    pub candidates_neg: usize,
    pub pseudo_pos: usize,
    pub pseudo_neg: usize,
    pub pseudo_train: usize,
    pub pseudo_val: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub runs: Vec<RunRecord>,
    pub epochs: Vec<EpochRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub best_run: usize,
    pub best_epoch: usize,
    pub best_clean_val_auc: f64,
    pub final_val_auc: f64,
    pub final_clean_val_auc: f64,
    pub final_holdout_auc: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum HistoryLine<'a> {
    Meta(&'a ArtifactMeta),
    Run(&'a RunRecord),
    Epoch(&'a EpochRecord),
    Summary(&'a Summary),
}

impl RunHistory {
    /// JSON lines: a metadata record, then each run record followed by its
    /// epochs, then the summary.
    pub fn to_jsonl(&self, meta: &ArtifactMeta, summary: &Summary) -> Result<String> {
        let enc = |l: HistoryLine| serde_json::to_string(&l).map_err(|e| Error::Numeric(e.to_string()));
        let mut out = enc(HistoryLine::Meta(meta))? + "\n";
        for r in &self.runs {
            out += &(enc(HistoryLine::Run(r))? + "\n");
            for e in self.epochs.iter().filter(|e| e.run == r.run) {
                out += &(enc(HistoryLine::Epoch(e))? + "\n");
            }
        }
        out += &(enc(HistoryLine::Summary(summary))? + "\n");
        Ok(out)
    }

    pub fn write(&self, path: &Path, meta: &ArtifactMeta, summary: &Summary) -> Result<()> {
        fs::write(path, self.to_jsonl(meta, summary)?).map_err(|e| Error::io(path, e))
    }
}

pub struct SslOutcome {
    pub network: Network,
    pub best_network: Network,
    pub history: RunHistory,
    pub pseudo_sets: Vec<PseudoLabelSet>,
    pub summary: Summary,
}

/// Endless reshuffled walk over `0..n`.
struct Sampler {
    order: Vec<usize>,
    cursor: usize,
}

impl Sampler {
    fn new(n: usize) -> Self {
        Sampler {
            order: (0..n).collect(),
            cursor: n,
        }
    }

    fn next_batch(&mut self, size: usize, rng: &mut Rng) -> Vec<usize> {
        let size = size.min(self.order.len());
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.cursor == self.order.len() {
                rng.shuffle(&mut self.order);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

fn labels_of(examples: &[&Example]) -> Result<Tensor> {
    let l = examples
        .iter()
        .map(|e| e.label().target().ok_or_else(|| Error::Validation(format!("{} has no training target", e.id()))))
        .collect::<Result<Vec<f64>>>()?;
    Tensor::new(vec![l.len(), 1], l)
}

fn targets(examples: &[Example]) -> Vec<f64> {
    examples.iter().map(|e| e.label().target().unwrap_or(0.0)).collect()
}

fn bools(t: &[f64]) -> Vec<bool> {
    t.iter().map(|&v| v == 1.0).collect()
}

struct Step {
    loss: f64,
}

/// One SGD step on a labeled batch and an optional pseudo batch.
fn train_step(
    net: &mut Network,
    labeled: &[&Example],
    pseudo: &[&Example],
    alpha: f64,
    lr: f64,
    momentum: f64,
    policy: &AugmentPolicy,
    rng: &mut Rng,
) -> Result<Step> {
    let mut forward = |batch: &[&Example], rng: &mut Rng| -> Result<_> {
        let views: Vec<Example> = batch.iter().map(|e| policy.apply(e, rng)).collect();
        let x = stack_batch(views.iter().map(Example::patch))?;
        let (p, cache) = net.forward(&x, rng)?;
        Ok((p, cache, labels_of(batch)?))
    };
    let lab = forward(labeled, rng)?;
    let pse = if alpha != 0.0 && !pseudo.is_empty() {
        Some(forward(pseudo, rng)?)
    } else {
        None
    };
    let loss = combined_loss(
        Some((&lab.0, &lab.2)),
        pse.as_ref().map(|(p, _, l)| (p, l)),
        alpha,
    )?;
    if !loss.value.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss {}", loss.value)));
    }
    let mut grads = net.backward(&lab.1, &loss.labeled.as_ref().expect("labeled batch").grad)?;
    if let (Some((_, cache, _)), Some(pl)) = (&pse, &loss.pseudo) {
        grads.add_scaled(&net.backward(cache, &pl.grad)?, alpha)?;
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    sgd_momentum_step(net, &grads, lr, momentum)?;
    Ok(Step { loss: loss.value })
}

fn diverged(run: usize, epoch: usize, iteration: usize, e: Error) -> Error {
    match e {
        Error::Numeric(reason) => Error::Diverged {
            run,
            epoch,
            iteration,
            reason,
        },
        other => other,
    }
}

/// Splits a pseudo set class by class, sending `round(val_frac * k)` of each
/// class to validation.
fn split_pseudo(set: &PseudoLabelSet, val_frac: f64, rng: &mut Rng) -> (Vec<Example>, Vec<Example>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for label in [Label::PseudoPositive, Label::PseudoNegative] {
        let mut group: Vec<&Example> = set.examples.iter().filter(|e| e.label() == label).collect();
        rng.shuffle(&mut group);
        let n_val = (val_frac * group.len() as f64).round() as usize;
        val.extend(group[..n_val].iter().map(|e| (*e).clone()));
        train.extend(group[n_val..].iter().map(|e| (*e).clone()));
    }
    train.sort_by(|a, b| a.id().cmp(b.id()));
    val.sort_by(|a, b| a.id().cmp(b.id()));
    (train, val)
}

fn pseudo_probs(net: &Network, pool: &Dataset, tta: Option<TtaPresetName>) -> Result<Vec<f64>> {
    match tta {
        None => predict_probs(net, pool.examples()),
        Some(name) => tta_predict_many(net, pool.examples(), &TtaPreset::named(name)),
    }
}

/// Runs `ssl.runs` fine-tuning runs of `train.epochs` epochs each.
///
/// Run 0 sees only labeled data. Before every later run the current network
/// scores the unlabeled pool and the pseudo set is rebuilt from scratch;
/// its examples join the train and validation pools in proportion
/// `val_frac`. Epoch length follows [`PseudoBatching`] and the one-cycle
/// schedule restarts with every run. All randomness is derived from `rng`'s seed, so the
/// unlabeled pool never perturbs the labeled training stream.
pub fn run_ssl(
    mut net: Network,
    pools: &Pools,
    train: &TrainSettings,
    ssl: &SslSettings,
    val_frac: f64,
    rng: &Rng,
) -> Result<SslOutcome> {
    pools.validate()?;
    train.validate()?;
    ssl.validate()?;
    let holdout_targets = pools.holdout.as_ref().map(|h| bools(&targets(h.examples())));
    let clean_val_targets = bools(&targets(pools.val.examples()));
    let train_targets = targets(pools.train.examples());
    let entropy_pool: Vec<Example> = {
        let mut idx: Vec<usize> = (0..pools.unlabeled.len()).collect();
        rng.fork("entropy-sample").shuffle(&mut idx);
        idx.truncate(ssl.entropy_sample);
        idx.sort_unstable();
        idx.into_iter().map(|i| pools.unlabeled.examples()[i].clone()).collect()
    };

    let mut history = RunHistory::default();
    let mut pseudo_sets = Vec::new();
    let mut best: Option<(f64, usize, usize, Network)> = None;

    for run in 0..ssl.runs {
        let mut run_rng = rng.fork(&format!("run-{run}"));
        let alpha = alpha_at(&ssl.alpha, run);
        let (pseudo, candidates) = if run == 0 || pools.unlabeled.is_empty() {
            (PseudoLabelSet::empty(run), Candidates::default())
        } else {
            let probs = pseudo_probs(&net, &pools.unlabeled, ssl.tta_pseudo)?;
            let map: BTreeMap<String, f64> =
                pools.unlabeled.ids().into_iter().map(String::from).zip(probs).collect();
            let c = assign_pseudo_labels(&map, &ssl.thresholds)?;
            let balanced = balance_pseudo(&c);
            (PseudoLabelSet::build(&pools.unlabeled, &balanced, run)?, c)
        };
        let (pseudo_train, pseudo_val) = split_pseudo(&pseudo, val_frac, &mut rng.fork(&format!("pseudo-split-{run}")));
        history.runs.push(RunRecord {
            run,
            alpha,
            candidates_pos: candidates.positive.len(),
            candidates_neg: candidates.negative.len(),
            pseudo_pos: pseudo.n_pos,
            pseudo_neg: pseudo.n_neg,
            pseudo_train: pseudo_train.len(),
            pseudo_val: pseudo_val.len(),
        });

        let val_pool: Vec<Example> = pools.val.examples().iter().cloned().chain(pseudo_val.iter().cloned()).collect();
        let val_targets = targets(&val_pool);
        let pseudo_active = alpha != 0.0 && !pseudo_train.is_empty();
        let n_train = pools.train.len();
        let n_driver = match ssl.pseudo_batching {
            PseudoBatching::Matched if pseudo_active => n_train.max(pseudo_train.len()),
            _ => n_train,
        };
        let iterations = n_driver.div_ceil(train.batch_size);
        let pseudo_batch = match ssl.pseudo_batching {
            PseudoBatching::Matched => train.batch_size,
            PseudoBatching::Spread => pseudo_train.len().div_ceil(iterations),
        };
        let cycle = train.one_cycle(train.epochs * iterations)?;
        let mut lab_sampler = Sampler::new(n_train);
        let mut pse_sampler = Sampler::new(pseudo_train.len());

        for epoch in 0..train.epochs {
            let mut loss_sum = 0.0;
            for it in 0..iterations {
                let t = epoch * iterations + it;
                let lr = schedule::lr_at(&cycle, t)?;
                let momentum = schedule::momentum_at(&cycle, t)?;
                let lab: Vec<&Example> = lab_sampler
                    .next_batch(train.batch_size, &mut run_rng)
                    .into_iter()
                    .map(|i| &pools.train.examples()[i])
                    .collect();
                let pse: Vec<&Example> = if pseudo_active {
                    pse_sampler
                        .next_batch(pseudo_batch, &mut run_rng)
                        .into_iter()
                        .map(|i| &pseudo_train[i])
                        .collect()
                } else {
                    Vec::new()
                };
                let step = train_step(&mut net, &lab, &pse, alpha, lr, momentum, &train.augment, &mut run_rng)
                    .map_err(|e| diverged(run, epoch, it, e))?;
                loss_sum += step.loss;
            }

            let val_probs = predict_probs(&net, &val_pool)?;
            let val_loss = bce_loss(
                &Tensor::new(vec![val_probs.len(), 1], val_probs.clone())?,
                &Tensor::new(vec![val_targets.len(), 1], val_targets.clone())?,
                None,
            )?
            .value;
            if !val_loss.is_finite() {
                return Err(diverged(run, epoch, iterations, Error::Numeric("non-finite validation loss".into())));
            }
            let val_auc = auc(&val_probs, &bools(&val_targets))?;
            let clean_val_auc = auc(&val_probs[..pools.val.len()], &clean_val_targets)?;
            let holdout_auc = match (&pools.holdout, &holdout_targets) {
                (Some(h), Some(t)) => Some(auc(&predict_probs(&net, h.examples())?, t)?),
                _ => None,
            };
            let ent_probs = predict_probs(&net, &entropy_pool)?;
            let unlabeled_entropy = (!ent_probs.is_empty()).then(|| unlabeled_entropy(&ent_probs)).transpose()?;
            let train_probs = predict_probs(&net, pools.train.examples())?;
            let map = map_objective(&train_probs, &train_targets, &ent_probs, ssl.map_lambda)?;
            history.epochs.push(EpochRecord {
                run,
                epoch,
                iterations,
                alpha,
                train_loss: loss_sum / iterations as f64,
                val_loss,
                val_auc,
                clean_val_auc,
                holdout_auc,
                unlabeled_entropy,
                map_objective: map,
            });
            if best.as_ref().is_none_or(|b| clean_val_auc > b.0) {
                best = Some((clean_val_auc, run, epoch, net.clone()));
            }
        }
        pseudo_sets.push(pseudo);
    }

    let last = history.epochs.last().expect("at least one epoch");
    let (best_auc, best_run, best_epoch, best_network) = best.expect("at least one epoch");
    let summary = Summary {
        best_run,
        best_epoch,
        best_clean_val_auc: best_auc,
        final_val_auc: last.val_auc,
        final_clean_val_auc: last.clean_val_auc,
        final_holdout_auc: last.holdout_auc,
    };
    Ok(SslOutcome {
        network: net,
        best_network,
        history,
        pseudo_sets,
        summary,
    })
}

/// Hides the labels of every example.
pub fn strip_labels(d: &Dataset) -> Result<Dataset> {
    Dataset::new(d.examples().iter().map(Example::unlabeled).collect(), SplitTag::Unlabeled)
}
