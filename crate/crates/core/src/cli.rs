//! Command-line interface.
//!
//! Exit status is 0 on success, 1 for runtime numeric failures (divergence)
//! and 2 for usage, configuration, validation and I/O errors.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::{filter_outliers, generate_synthetic, load_dataset, save_dataset, OutlierThresholds, SyntheticConfig};
use crate::error::{Error, Result};
use crate::experiment::{prepare_pools, train_on, ExperimentConfig};
use crate::infer::{ensemble_predict, predict_probs, read_predictions, tta_predict_many, write_predictions, TtaPreset, TtaPresetName};
use crate::meta::{config_hash, ArtifactMeta};
use crate::metrics::roc_points;
use crate::model::checkpoint;
use crate::numerics::Rng;
use crate::schedule::{self, OneCycleConfig};
use crate::ssl::SslOutcome;

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "patchssl", version, about = "Semi-supervised patch classifier trainer")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic patch dataset (manifest + PGM/PPM files).
    GenData(GenDataArgs),
    /// Drop near-blank patches from a dataset.
    Filter(FilterArgs),
    /// Supervised training on the labeled pool.
    Train(TrainArgs),
    /// Repeated fine-tuning with pseudo-labels.
    SslTrain(TrainArgs),
    /// Score a manifest with a checkpoint.
    Predict(PredictArgs),
    /// Score a manifest with test-time augmentation.
    TtaPredict(TtaPredictArgs),
    /// Average prediction files.
    Ensemble(EnsembleArgs),
    /// ROC curve and AUC of a prediction file against a manifest.
    Eval(EvalArgs),
    /// Write the one-cycle learning-rate and momentum table.
    DumpSchedule(DumpScheduleArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    #[arg(long, default_value_t = 0.5)]
    pub positive_frac: f64,
    #[arg(long, default_value_t = 16)]
    pub patch_size: usize,
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long, default_value_t = 0.1)]
    pub noise: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct FilterArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0.95)]
    pub white_thresh: f64,
    #[arg(long, default_value_t = 0.95)]
    pub black_thresh: f64,
    #[arg(long, default_value_t = 0.96)]
    pub white_level: f64,
    #[arg(long, default_value_t = 0.04)]
    pub black_level: f64,
}

/// Flags override the config file.
#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr_max: Option<f64>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub alpha_final: Option<f64>,
    #[arg(long)]
    pub tta_pseudo: Option<TtaPresetName>,
}

#[derive(Debug, Args, Serialize)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TtaPredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "tta_dense10")]
    pub preset: TtaPresetName,
}

#[derive(Debug, Args, Serialize)]
pub struct EnsembleArgs {
    /// Prediction files; repeat the flag for each model.
    #[arg(long = "preds", required = true)]
    pub preds: Vec<PathBuf>,
    /// Comma-separated nonnegative weights, one per file.
    #[arg(long, value_delimiter = ',')]
    pub weights: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long)]
    pub preds: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory for `roc.csv` and `summary.json`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct DumpScheduleArgs {
    #[arg(long, default_value_t = schedule::DEFAULT_LR_MAX)]
    pub lr_max: f64,
    /// Defaults to lr_max / 10.
    #[arg(long)]
    pub lr_min: Option<f64>,
    /// Defaults to lr_min / 100.
    #[arg(long)]
    pub final_lr: Option<f64>,
    #[arg(long, default_value_t = schedule::DEFAULT_MOMENTUM_HIGH)]
    pub momentum_high: f64,
    #[arg(long, default_value_t = schedule::DEFAULT_MOMENTUM_LOW)]
    pub momentum_low: f64,
    /// Defaults to 40% of the total.
    #[arg(long)]
    pub step: Option<usize>,
    #[arg(long)]
    pub total: usize,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parses `argv`, runs the command and returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { 0 };
        }
    };
    match execute(&cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_runtime() {
                EXIT_RUNTIME
            } else {
                EXIT_USAGE
            }
        }
    }
}

pub fn execute(cmd: &Command) -> Result<()> {
    match cmd {
        Command::GenData(a) => gen_data(a),
        Command::Filter(a) => filter(a),
        Command::Train(a) => train(a, true),
        Command::SslTrain(a) => train(a, false),
        Command::Predict(a) => predict(a),
        Command::TtaPredict(a) => tta_predict(a),
        Command::Ensemble(a) => ensemble(a),
        Command::Eval(a) => eval(a),
        Command::DumpSchedule(a) => dump_schedule(a),
    }
}

fn args_meta(seed: u64, args: &impl Serialize) -> ArtifactMeta {
    ArtifactMeta::new(seed, config_hash(&serde_json::to_string(args).expect("arguments serialize")))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let cfg = SyntheticConfig {
        n: a.n,
        positive_frac: a.positive_frac,
        patch_size: a.patch_size,
        channels: a.channels,
        noise: a.noise,
    };
    let d = generate_synthetic(&cfg, &mut Rng::new(a.seed).fork("synthetic"))?;
    let manifest = save_dataset(&d, &a.out, &args_meta(a.seed, a))?;
    println!("wrote {} patches to {}", d.len(), manifest.display());
    Ok(())
}

fn filter(a: &FilterArgs) -> Result<()> {
    let th = OutlierThresholds {
        white_thresh: a.white_thresh,
        black_thresh: a.black_thresh,
        white_level: a.white_level,
        black_level: a.black_level,
    };
    let d = load_dataset(&a.manifest, None)?;
    let (kept, removed) = filter_outliers(&d, &th)?;
    let meta = args_meta(0, a);
    save_dataset(&kept, &a.out, &meta)?;
    let mut text = format!("{}\nid\n", meta.comment_line());
    for id in removed.ids() {
        text.push_str(id);
        text.push('\n');
    }
    write(&a.out.join("removed.csv"), text)?;
    println!("kept {}, removed {}", kept.len(), removed.len());
    Ok(())
}

/// Config file, then flag overrides. `supervised` pins one run with the
/// pseudo term off.
pub fn resolve_config(a: &TrainArgs, supervised: bool) -> Result<ExperimentConfig> {
    let mut cfg = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = &a.manifest {
        cfg.data.manifest = Some(v.clone());
    }
    if let Some(v) = a.epochs {
        cfg.train.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.train.batch_size = v;
    }
    if let Some(v) = a.lr_max {
        cfg.train.lr_max = v;
    }
    if let Some(v) = a.runs {
        cfg.ssl.runs = v;
    }
    if let Some(v) = a.alpha_final {
        cfg.ssl.alpha.alpha_final = v;
    }
    if let Some(v) = a.tta_pseudo {
        cfg.ssl.tta_pseudo = Some(v);
    }
    if supervised {
        cfg.ssl.runs = 1;
        cfg.ssl.alpha.alpha_final = 0.0;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Writes `config.toml`, `history.jsonl`, `model.ckpt`, `best.ckpt` and
/// `pseudo_labels.csv` under `out`.
pub fn write_training_outputs(out: &Path, cfg: &ExperimentConfig, outcome: &SslOutcome) -> Result<()> {
    create_dir(out)?;
    let meta = cfg.meta();
    write(&out.join("config.toml"), format!("{}\n{}", meta.comment_line(), cfg.to_toml()?))?;
    outcome.history.write(&out.join("history.jsonl"), &meta, &outcome.summary)?;
    checkpoint::save(&outcome.network, &meta, &out.join("model.ckpt"))?;
    checkpoint::save(&outcome.best_network, &meta, &out.join("best.ckpt"))?;
    let mut pseudo = format!("{}\nrun,id,label\n", meta.comment_line());
    for set in &outcome.pseudo_sets {
        for e in &set.examples {
            let label = if e.label().target() == Some(1.0) { 1 } else { 0 };
            pseudo.push_str(&format!("{},{},{label}\n", set.source_run, e.id()));
        }
    }
    write(&out.join("pseudo_labels.csv"), pseudo)
}

fn train(a: &TrainArgs, supervised: bool) -> Result<()> {
    let cfg = resolve_config(a, supervised)?;
    let pools = prepare_pools(&cfg)?;
    let outcome = train_on(&cfg, &pools)?;
    write_training_outputs(&a.out, &cfg, &outcome)?;
    let s = &outcome.summary;
    println!(
        "final val AUC {:.4} (labeled only {:.4}); best labeled val AUC {:.4} at run {} epoch {}",
        s.final_val_auc, s.final_clean_val_auc, s.best_clean_val_auc, s.best_run, s.best_epoch
    );
    if let Some(h) = s.final_holdout_auc {
        println!("holdout AUC {h:.4}");
    }
    Ok(())
}

fn model_meta(model: &Path, args: &impl Serialize) -> Result<(crate::model::Network, ArtifactMeta)> {
    let (net, meta) = checkpoint::load(model)?;
    Ok((net, args_meta(meta.seed, args)))
}

fn shape_of(net: &crate::model::Network) -> [usize; 3] {
    let s = net.input_shape();
    [s.channels, s.height, s.width]
}

fn predict(a: &PredictArgs) -> Result<()> {
    let (net, meta) = model_meta(&a.model, a)?;
    let d = load_dataset(&a.manifest, Some(shape_of(&net)))?;
    let probs = predict_probs(&net, d.examples())?;
    let rows: Vec<(String, f64)> = d.ids().into_iter().map(String::from).zip(probs).collect();
    write_predictions(&a.out, &rows, &meta)
}

fn tta_predict(a: &TtaPredictArgs) -> Result<()> {
    let (net, meta) = model_meta(&a.model, a)?;
    let d = load_dataset(&a.manifest, Some(shape_of(&net)))?;
    let probs = tta_predict_many(&net, d.examples(), &TtaPreset::named(a.preset))?;
    let rows: Vec<(String, f64)> = d.ids().into_iter().map(String::from).zip(probs).collect();
    write_predictions(&a.out, &rows, &meta)
}

fn ensemble(a: &EnsembleArgs) -> Result<()> {
    let files = a.preds.iter().map(|p| read_predictions(p)).collect::<Result<Vec<_>>>()?;
    if let Some(w) = &a.weights {
        if w.len() != files.len() {
            return Err(Error::Config(format!("{} weights for {} prediction files", w.len(), files.len())));
        }
    }
    let first = &files[0];
    let mut rows = Vec::with_capacity(first.len());
    for (i, (id, _)) in first.iter().enumerate() {
        let mut preds = Vec::with_capacity(files.len());
        for (f, path) in files.iter().zip(&a.preds) {
            match f.get(i) {
                Some((other, p)) if other == id => preds.push(*p),
                _ => {
                    return Err(Error::Validation(format!(
                        "{} does not list the same ids in the same order as {}",
                        path.display(),
                        a.preds[0].display()
                    )))
                }
            }
        }
        rows.push((id.clone(), ensemble_predict(&preds, a.weights.as_deref())?));
    }
    if files.iter().any(|f| f.len() != first.len()) {
        return Err(Error::Validation("prediction files differ in length".into()));
    }
    write_predictions(&a.out, &rows, &args_meta(0, a))
}

fn eval(a: &EvalArgs) -> Result<()> {
    let preds = read_predictions(&a.preds)?;
    let d = load_dataset(&a.manifest, None)?;
    let truth: std::collections::HashMap<&str, bool> = d
        .examples()
        .iter()
        .filter(|e| e.label().is_real())
        .map(|e| (e.id(), e.label().target() == Some(1.0)))
        .collect();
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (id, p) in &preds {
        if let Some(&l) = truth.get(id.as_str()) {
            scores.push(*p);
            labels.push(l);
        }
    }
    let roc = roc_points(&scores, &labels)?;
    let n_pos = labels.iter().filter(|&&l| l).count();
    let summary = serde_json::json!({ "auc": roc.auc, "n_pos": n_pos, "n_neg": labels.len() - n_pos });
    println!("{summary}");
    if let Some(out) = &a.out {
        create_dir(out)?;
        let meta = args_meta(0, a);
        let mut csv = format!("{}\nthreshold,fpr,tpr\n", meta.comment_line());
        // the first point sits above every score
        csv.push_str(&format!("inf,{:?},{:?}\n", roc.points[0].0, roc.points[0].1));
        for (t, (fpr, tpr)) in roc.thresholds.iter().zip(&roc.points[1..]) {
            csv.push_str(&format!("{t:?},{fpr:?},{tpr:?}\n"));
        }
        write(&out.join("roc.csv"), csv)?;
        let doc = serde_json::json!({ "meta": meta, "auc": roc.auc, "n_pos": n_pos, "n_neg": labels.len() - n_pos });
        write(&out.join("summary.json"), format!("{doc:#}\n"))?;
    }
    Ok(())
}

fn dump_schedule(a: &DumpScheduleArgs) -> Result<()> {
    let lr_min = a.lr_min.unwrap_or(a.lr_max / 10.0);
    let cfg = OneCycleConfig {
        lr_max: a.lr_max,
        lr_min,
        momentum_high: a.momentum_high,
        momentum_low: a.momentum_low,
        step_size: a.step.unwrap_or_else(|| schedule::default_step(a.total, schedule::DEFAULT_STEP_FRACTION)),
        total_iterations: a.total,
        final_lr: a.final_lr.unwrap_or(lr_min / schedule::DEFAULT_ANNIHILATION_FACTOR),
    };
    let mut csv = format!("{}\nt,lr,momentum\n", args_meta(0, a).comment_line());
    for (t, lr, m) in schedule::table(&cfg)? {
        csv.push_str(&format!("{t},{lr:?},{m:?}\n"));
    }
    match &a.out {
        Some(p) => write(p, csv),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}
