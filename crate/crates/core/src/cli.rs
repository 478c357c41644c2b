//! Command-line surface binding the pipeline into reproducible runs:
//! synthetic data generation, training with ablation flags, checkpoint
//! evaluation, attention localization, augmentation previews, and
//! preprocessing previews.
//!
//! Configuration precedence: built-in desk defaults, then a flat key=value
//! config file, then command-line flags. Config keys spell exactly like the
//! long flags; unknown keys fail fast. Every run directory receives the
//! resolved configuration both as JSON and as a reloadable key=value file.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};

use crate::augment::{make_auxiliary_batch, AugmentConfig};
use crate::autograd::Graph;
use crate::backbone::ParamSet;
use crate::checkpoint;
use crate::dataset::{
    load_manifest, load_samples, stratified_folds, synthesize_dataset, Manifest, ManifestEntry,
    Sample, SynthSpec,
};
use crate::error::{Error, Result};
use crate::imgops::{self, PixelBox};
use crate::metrics::{self, MetricsReport};
use crate::model::{init_model_params, model_forward, ModelConfig};
use crate::preprocess::{self, PreprocessConfig, StochasticAugConfig};
use crate::rng;
use crate::trainer::{batch_tensor, write_train_log, PreppedData, TrainConfig, Trainer};

#[derive(Parser)]
#[command(
    name = "finecls",
    version,
    about = "Attention-guided fine-grained classification of grayscale images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic blob dataset with localization masks
    Synth(SynthArgs),
    /// Train on a manifest; ablation flags select scales, pooling,
    /// augmentations, and the consistency term
    Train(TrainArgs),
    /// Inference-only metrics for a checkpoint on a manifest
    Evaluate(EvaluateArgs),
    /// Attention localization scored against manifest annotations
    Localize(LocalizeArgs),
    /// Render the augmentation routes and attention for one sample
    AugmentPreview(PreviewArgs),
    /// Write before/after pairs of the deterministic preprocessing
    Preprocess(PreprocessArgs),
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // --help and --version land here with non-error kinds
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Train(a) => cmd_train(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Localize(a) => cmd_localize(a),
        Command::AugmentPreview(a) => cmd_augment_preview(a),
        Command::Preprocess(a) => cmd_preprocess(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

// ---------------------------------------------------------------- config

/// Key=value overrides read from a config file; every key must be consumed.
#[derive(Default)]
struct Kv(BTreeMap<String, String>);

impl Kv {
    fn take(&mut self, key: &str) -> Option<String> {
        self.0.remove(key)
    }

    fn finish(self) -> Result<()> {
        if let Some(key) = self.0.keys().next() {
            return Err(Error::Usage(format!("unknown config key `{key}`")));
        }
        Ok(())
    }
}

fn read_kv(path: &Path) -> Result<Kv> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Usage(format!(
                "{} line {}: expected key=value, got `{line}`",
                path.display(),
                i + 1
            ))
        })?;
        map.insert(key.trim().to_string(), value.trim().to_string());
    }
    Ok(Kv(map))
}

fn parse_key<T: FromStr>(key: &str, s: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    s.trim()
        .parse::<T>()
        .map_err(|e| Error::Usage(format!("{key}: {e}")))
}

fn parse_on_off(key: &str, s: &str) -> Result<bool> {
    match s.trim() {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        other => Err(Error::Usage(format!("{key}: expected on|off, got `{other}`"))),
    }
}

fn parse_usize_list(key: &str, s: &str, expected: Option<usize>) -> Result<Vec<usize>> {
    let items: Result<Vec<usize>> = s
        .split(',')
        .map(|p| parse_key::<usize>(key, p))
        .collect();
    let items = items?;
    if let Some(n) = expected {
        if items.len() != n {
            return Err(Error::Usage(format!(
                "{key}: expected {n} comma-separated values, got {}",
                items.len()
            )));
        }
    }
    Ok(items)
}

/// Flag beats file; either string goes through the same parser.
fn pick_str(flag: &Option<String>, kv: &mut Kv, key: &str) -> Option<String> {
    let file = kv.take(key);
    flag.clone().or(file)
}

/// Typed flag beats file value parsed with `parse_key`.
fn pick_num<T: FromStr>(flag: Option<T>, kv: &mut Kv, key: &str) -> Result<Option<T>>
where
    T::Err: std::fmt::Display,
{
    let file = kv.take(key);
    if flag.is_some() {
        return Ok(flag);
    }
    file.map(|s| parse_key::<T>(key, &s)).transpose()
}

/// Fully resolved run settings, echoed into every run directory.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RunConfig {
    pub manifest: String,
    pub folds: usize,
    pub classes: Vec<String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
}

/// Desk-scale defaults: 64 px inputs and a 15-epoch budget, sized so the
/// full synthetic protocol finishes in minutes on a small CPU.
fn desk_defaults() -> (usize, ModelConfig, TrainConfig, PreprocessConfig) {
    let model = ModelConfig::desk(2, 64);
    let train = TrainConfig {
        epochs: 15,
        lr: 0.002,
        ..TrainConfig::default()
    };
    let preprocess = PreprocessConfig {
        target_size: (64, 64),
        ..PreprocessConfig::default()
    };
    (1, model, train, preprocess)
}

#[derive(Debug)]
struct ResolvedRun {
    manifest: PathBuf,
    folds: usize,
    model: ModelConfig,
    train: TrainConfig,
    preprocess: PreprocessConfig,
}

fn resolve_run(args: &TrainArgs) -> Result<ResolvedRun> {
    let mut kv = match &args.config {
        Some(path) => read_kv(path)?,
        None => Kv::default(),
    };
    let (mut folds, mut model, mut train, mut preprocess) = desk_defaults();

    let manifest = match args.manifest.clone().or(kv.take("manifest").map(PathBuf::from)) {
        Some(p) => p,
        None => return Err(Error::Usage("--manifest is required".into())),
    };
    if let Some(v) = pick_num(args.folds, &mut kv, "folds")? {
        folds = v;
    }
    if let Some(v) = pick_num(args.epochs, &mut kv, "epochs")? {
        train.epochs = v;
    }
    if let Some(v) = pick_num(args.batch_size, &mut kv, "batch-size")? {
        train.batch_size = v;
    }
    if let Some(v) = pick_num(args.lr, &mut kv, "lr")? {
        train.lr = v;
    }
    if let Some(v) = pick_num(args.momentum, &mut kv, "momentum")? {
        train.momentum = v;
    }
    if let Some(v) = pick_num(args.weight_decay, &mut kv, "weight-decay")? {
        train.weight_decay = v;
    }
    if let Some(v) = pick_num(args.theta, &mut kv, "theta")? {
        train.theta = v;
    }
    if let Some(v) = pick_num(args.seed, &mut kv, "seed")? {
        train.seed = v;
    }
    if let Some(v) = pick_num(args.input_size, &mut kv, "input-size")? {
        model.backbone.input_size = v;
        preprocess.target_size = (v, v);
    }
    if let Some(v) = pick_num(args.n_maps, &mut kv, "n-maps")? {
        model.attention.n_maps = v;
    }
    if let Some(s) = pick_str(&args.scales, &mut kv, "scales") {
        model.attention.scales = parse_usize_list("scales", &s, None)?;
    }
    if let Some(s) = pick_str(&args.channels, &mut kv, "channels") {
        let c = parse_usize_list("channels", &s, Some(3))?;
        model.backbone.stage_channels = (c[0], c[1], c[2]);
    }
    if let Some(s) = pick_str(&args.pooling, &mut kv, "pooling") {
        model.pooling = parse_key("pooling", &s)?;
    }
    if let Some(s) = pick_str(&args.augs, &mut kv, "augs") {
        train.augment.enabled = parse_key("augs", &s)?;
    }
    if let Some(s) = pick_str(&args.consistency, &mut kv, "consistency") {
        train.consistency = parse_key("consistency", &s)?;
    }
    if let Some(s) = pick_str(&args.clahe, &mut kv, "clahe") {
        preprocess.clahe_enabled = parse_on_off("clahe", &s)?;
    }
    if let Some(v) = pick_num(args.clip_limit, &mut kv, "clip-limit")? {
        preprocess.clip_limit = v;
    }
    if let Some(s) = pick_str(&args.tiles, &mut kv, "tiles") {
        let t = parse_usize_list("tiles", &s, Some(2))?;
        preprocess.tiles = (t[0], t[1]);
    }
    if let Some(s) = pick_str(&args.stochastic, &mut kv, "stochastic") {
        train.stochastic = if parse_on_off("stochastic", &s)? {
            Some(StochasticAugConfig::default())
        } else {
            None
        };
    }
    if let Some(s) = pick_str(&args.deterministic, &mut kv, "deterministic") {
        train.deterministic = parse_on_off("deterministic", &s)?;
    }
    kv.finish()?;
    if folds == 0 {
        return Err(Error::Usage("folds must be at least 1".into()));
    }
    Ok(ResolvedRun {
        manifest,
        folds,
        model,
        train,
        preprocess,
    })
}

/// Key=value echo of a resolved run; feeding it back via --config
/// reproduces the run.
fn config_text(run: &RunConfig) -> String {
    let model = &run.model;
    let train = &run.train;
    let pre = &run.preprocess;
    let scales: Vec<String> = model.attention.scales.iter().map(|s| s.to_string()).collect();
    let (c1, c2, c3) = model.backbone.stage_channels;
    format!(
        "manifest={}\nfolds={}\nepochs={}\nbatch-size={}\nlr={}\nmomentum={}\n\
         weight-decay={}\ntheta={}\nseed={}\ninput-size={}\nn-maps={}\nscales={}\n\
         channels={c1},{c2},{c3}\npooling={}\naugs={}\nconsistency={}\nclahe={}\n\
         clip-limit={}\ntiles={},{}\nstochastic={}\ndeterministic={}\n",
        run.manifest,
        run.folds,
        train.epochs,
        train.batch_size,
        train.lr,
        train.momentum,
        train.weight_decay,
        train.theta,
        train.seed,
        model.backbone.input_size,
        model.attention.n_maps,
        scales.join(","),
        model.pooling,
        train.augment.enabled,
        train.consistency,
        if pre.clahe_enabled { "on" } else { "off" },
        pre.clip_limit,
        pre.tiles.0,
        pre.tiles.1,
        if train.stochastic.is_some() { "on" } else { "off" },
        if train.deterministic { "on" } else { "off" },
    )
}

// ---------------------------------------------------------------- helpers

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn safe_name(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '-'
            }
        })
        .collect()
}

fn prepare_run_dir(run_dir: &Option<PathBuf>, out: &Option<PathBuf>) -> Result<PathBuf> {
    if let Some(dir) = run_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        return Ok(dir.clone());
    }
    let parent = out.clone().unwrap_or_else(|| PathBuf::from("runs"));
    fs::create_dir_all(&parent).map_err(|e| Error::io(&parent, e))?;
    let secs = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .expect("clock before 1970")
        .as_secs();
    let mut suffix = 0usize;
    loop {
        let name = if suffix == 0 {
            format!("run-{secs}")
        } else {
            format!("run-{secs}-{suffix}")
        };
        let candidate = parent.join(name);
        if !candidate.exists() {
            fs::create_dir(&candidate).map_err(|e| Error::io(&candidate, e))?;
            return Ok(candidate);
        }
        suffix += 1;
    }
}

fn confusion_rows(m: &metrics::ConfusionMatrix) -> Vec<Vec<u64>> {
    let counts = m.rows();
    (0..counts.nrows())
        .map(|r| counts.row(r).to_vec())
        .collect()
}

/// Rebuild parameters (and optimizer state) from a checkpoint along with
/// the trainer wiring recorded in its metadata.
struct LoadedCheckpoint {
    meta: checkpoint::CheckpointMeta,
    params: ParamSet<f32>,
}

fn load_checkpoint_model(path: &Path, batch_size: usize) -> Result<LoadedCheckpoint> {
    let (meta, _) = checkpoint::load(path)?;
    let train = TrainConfig {
        batch_size,
        seed: meta.seed,
        ..TrainConfig::default()
    };
    let trainer = Trainer {
        model: &meta.config,
        train: &train,
        preprocess: &meta.preprocess,
        classes: &meta.classes,
    };
    let state = trainer.load_state(path)?;
    Ok(LoadedCheckpoint {
        meta,
        params: state.params,
    })
}

fn require_matching_classes(meta: &checkpoint::CheckpointMeta, manifest: &Manifest) -> Result<()> {
    if manifest.classes != meta.classes {
        return Err(Error::Data(format!(
            "manifest classes {:?} do not match checkpoint classes {:?}",
            manifest.classes, meta.classes
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------- synth

#[derive(Args)]
struct SynthArgs {
    /// Number of classes
    #[arg(long, default_value_t = 3)]
    classes: usize,
    /// Samples per class
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    /// Square image size in pixels
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Stamp a bright corner glyph uncorrelated with the class
    #[arg(long)]
    marker: bool,
    /// Output directory for images, masks, and manifest.csv
    #[arg(long)]
    out: PathBuf,
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        classes: args.classes,
        per_class: args.per_class,
        size: args.size,
        seed: args.seed,
        marker: args.marker,
    };
    let samples = synthesize_dataset(&spec)?;
    let images_dir = args.out.join("images");
    let masks_dir = args.out.join("masks");
    fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;
    fs::create_dir_all(&masks_dir).map_err(|e| Error::io(&masks_dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    let mut classes = Vec::new();
    for sample in &samples {
        let image_rel = format!("images/{}.png", sample.id);
        let mask_rel = format!("masks/{}.png", sample.id);
        imgops::write_gray_png(&args.out.join(&image_rel), &sample.image)?;
        let mask = match &sample.annotation {
            Some(crate::dataset::Annotation::Mask(m)) => m,
            _ => unreachable!("synthetic samples always carry a mask"),
        };
        imgops::write_gray_png(&args.out.join(&mask_rel), &mask.mapv(|b| f32::from(b as u8)))?;
        let label = format!("class{}", sample.label);
        if !classes.contains(&label) {
            classes.push(label.clone());
        }
        entries.push(ManifestEntry {
            path: image_rel,
            label,
            annotation_path: Some(mask_rel),
        });
    }
    let manifest = Manifest {
        entries,
        classes,
        root: args.out.clone(),
    };
    let manifest_path = args.out.join("manifest.csv");
    crate::dataset::write_manifest(&manifest_path, &manifest)?;
    println!(
        "wrote {} samples ({} classes) under {}",
        samples.len(),
        args.classes,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- train

#[derive(Args, Default)]
struct TrainArgs {
    /// Dataset manifest CSV
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Flat key=value config file (flags override it)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Parent directory for the timestamped run directory
    #[arg(long)]
    out: Option<PathBuf>,
    /// Exact run directory (overrides --out)
    #[arg(long)]
    run_dir: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Cross-validation folds; 1 trains a single stratified 80/20 split
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f32>,
    #[arg(long)]
    momentum: Option<f32>,
    #[arg(long)]
    weight_decay: Option<f32>,
    /// Confidence threshold of the soft-distance target rule
    #[arg(long)]
    theta: Option<f32>,
    #[arg(long)]
    seed: Option<u64>,
    /// Network input resolution (multiple of 32)
    #[arg(long)]
    input_size: Option<usize>,
    /// Attention maps per sample
    #[arg(long)]
    n_maps: Option<usize>,
    /// Pyramid scales feeding attention, e.g. 2,3
    #[arg(long)]
    scales: Option<String>,
    /// Backbone stage widths, e.g. 32,64,128
    #[arg(long)]
    channels: Option<String>,
    /// gap | gmp | attention
    #[arg(long)]
    pooling: Option<String>,
    /// Comma list of mixup,patch,dim; empty or `none` disables
    #[arg(long)]
    augs: Option<String>,
    /// soft | l2 | none
    #[arg(long)]
    consistency: Option<String>,
    /// on | off
    #[arg(long)]
    clahe: Option<String>,
    #[arg(long)]
    clip_limit: Option<f32>,
    /// CLAHE tile grid, e.g. 8,8
    #[arg(long)]
    tiles: Option<String>,
    /// Photometric/geometric training augmentations: on | off
    #[arg(long)]
    stochastic: Option<String>,
    /// on | off (recorded; runs are deterministic by construction)
    #[arg(long)]
    deterministic: Option<String>,
}

#[derive(serde::Serialize)]
struct FoldMetrics {
    fold: usize,
    train_samples: usize,
    eval_samples: usize,
    confusion: Vec<Vec<u64>>,
    report: MetricsReport,
    per_class_auc: Vec<Option<f64>>,
    macro_auc: Option<f64>,
}

#[derive(serde::Serialize)]
struct RunMetrics {
    classes: Vec<String>,
    folds: Vec<FoldMetrics>,
    mean_multiclass_accuracy: f64,
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let resolved = resolve_run(&args)?;
    let manifest = load_manifest(&resolved.manifest, true)?;
    let samples = load_samples(&manifest)?;
    let classes = manifest.classes.clone();

    let mut model = resolved.model;
    model.classes = classes.len();
    let train = resolved.train;
    let preprocess = resolved.preprocess;
    let trainer = Trainer {
        model: &model,
        train: &train,
        preprocess: &preprocess,
        classes: &classes,
    };
    trainer.validate()?;

    let data = PreppedData::from_samples(&samples, &preprocess)?;
    // a single "fold" is the first split of a 5-fold partition: 80/20
    let split_k = if resolved.folds == 1 { 5 } else { resolved.folds };
    let split = stratified_folds(&data.labels, split_k, train.seed)?;
    let fold_ids: Vec<usize> = (0..resolved.folds).collect();

    let run_dir = prepare_run_dir(&args.run_dir, &args.out)?;
    let echo = RunConfig {
        manifest: resolved.manifest.display().to_string(),
        folds: resolved.folds,
        classes: classes.clone(),
        model: model.clone(),
        train: train.clone(),
        preprocess: preprocess.clone(),
    };
    write_json(&run_dir.join("config.json"), &echo)?;
    let cfg_txt = run_dir.join("config.txt");
    fs::write(&cfg_txt, config_text(&echo)).map_err(|e| Error::io(&cfg_txt, e))?;

    let mut fold_metrics = Vec::new();
    for &fold in &fold_ids {
        let ckpt = run_dir.join(format!("fold{fold}.fckp"));
        let outcome = trainer.train_fold(&data, &split, fold, Some(&ckpt))?;
        write_train_log(
            &run_dir.join(format!("fold{fold}_train_log.csv")),
            &outcome.state.history,
        )?;
        let eval = &outcome.eval;
        println!(
            "fold {fold}: trained {} samples, held-out accuracy {:.4} on {}",
            data.len() - outcome.eval_indices.len(),
            eval.report.multiclass_accuracy,
            outcome.eval_indices.len()
        );
        fold_metrics.push(FoldMetrics {
            fold,
            train_samples: data.len() - outcome.eval_indices.len(),
            eval_samples: outcome.eval_indices.len(),
            confusion: confusion_rows(&eval.confusion),
            report: eval.report.clone(),
            per_class_auc: eval.per_class_auc.clone(),
            macro_auc: eval.macro_auc,
        });
    }
    let mean_acc = fold_metrics
        .iter()
        .map(|f| f.report.multiclass_accuracy)
        .sum::<f64>()
        / fold_metrics.len() as f64;
    write_json(
        &run_dir.join("metrics.json"),
        &RunMetrics {
            classes,
            folds: fold_metrics,
            mean_multiclass_accuracy: mean_acc,
        },
    )?;
    println!(
        "mean held-out accuracy {:.4}; artifacts in {}",
        mean_acc,
        run_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- evaluate

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory (default: `eval` beside the checkpoint)
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write the one-vs-rest ROC CSV only for this class
    #[arg(long)]
    roc_class: Option<String>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(serde::Serialize)]
struct EvalMetricsFile {
    classes: Vec<String>,
    samples: usize,
    confusion: Vec<Vec<u64>>,
    report: MetricsReport,
    per_class_auc: Vec<Option<f64>>,
    macro_auc: Option<f64>,
}

fn write_roc_csv(path: &Path, curve: &metrics::RocCurve) -> Result<()> {
    let mut text = String::from("threshold,fpr,tpr\n");
    for (t, (fpr, tpr)) in curve.thresholds.iter().zip(&curve.points) {
        text.push_str(&format!("{t},{fpr},{tpr}\n"));
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    let loaded = load_checkpoint_model(&args.checkpoint, args.batch_size)?;
    let meta = &loaded.meta;
    let manifest = load_manifest(&args.manifest, true)?;
    require_matching_classes(meta, &manifest)?;
    let samples = load_samples(&manifest)?;
    let data = PreppedData::from_samples(&samples, &meta.preprocess)?;

    let train = TrainConfig {
        batch_size: args.batch_size,
        seed: meta.seed,
        ..TrainConfig::default()
    };
    let trainer = Trainer {
        model: &meta.config,
        train: &train,
        preprocess: &meta.preprocess,
        classes: &meta.classes,
    };
    let idx: Vec<usize> = (0..data.len()).collect();
    let outcome = trainer.evaluate(&loaded.params, &data, &idx)?;

    let out = args
        .out
        .clone()
        .unwrap_or_else(|| {
            args.checkpoint
                .parent()
                .unwrap_or(Path::new("."))
                .join("eval")
        });
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    write_json(
        &out.join("metrics.json"),
        &EvalMetricsFile {
            classes: meta.classes.clone(),
            samples: data.len(),
            confusion: confusion_rows(&outcome.confusion),
            report: outcome.report.clone(),
            per_class_auc: outcome.per_class_auc.clone(),
            macro_auc: outcome.macro_auc,
        },
    )?;

    let mut text = String::from("true\\predicted");
    for c in &meta.classes {
        text.push(',');
        text.push_str(c);
    }
    text.push('\n');
    let counts = outcome.confusion.rows();
    for (r, class) in meta.classes.iter().enumerate() {
        text.push_str(class);
        for c in 0..meta.classes.len() {
            text.push_str(&format!(",{}", counts[(r, c)]));
        }
        text.push('\n');
    }
    let confusion_path = out.join("confusion.csv");
    fs::write(&confusion_path, text).map_err(|e| Error::io(&confusion_path, e))?;

    let mut predictions = String::from("id,true,predicted");
    for c in &meta.classes {
        predictions.push_str(&format!(",prob_{c}"));
    }
    predictions.push('\n');
    for (row, &i) in idx.iter().enumerate() {
        predictions.push_str(&format!(
            "{},{},{}",
            data.ids[i], meta.classes[data.labels[i]], meta.classes[outcome.predictions[row]]
        ));
        for c in 0..meta.classes.len() {
            predictions.push_str(&format!(",{:.6}", outcome.probabilities[(row, c)]));
        }
        predictions.push('\n');
    }
    let pred_path = out.join("predictions.csv");
    fs::write(&pred_path, predictions).map_err(|e| Error::io(&pred_path, e))?;

    let roc_targets: Vec<usize> = match &args.roc_class {
        Some(name) => {
            let c = meta
                .classes
                .iter()
                .position(|x| x == name)
                .ok_or_else(|| Error::Usage(format!("unknown class `{name}`")))?;
            vec![c]
        }
        None => (0..meta.classes.len()).collect(),
    };
    for c in roc_targets {
        let scores: Vec<f64> = idx
            .iter()
            .enumerate()
            .map(|(row, _)| outcome.probabilities[(row, c)])
            .collect();
        let positive: Vec<bool> = idx.iter().map(|&i| data.labels[i] == c).collect();
        match metrics::roc_auc(&scores, &positive) {
            Ok(curve) => {
                write_roc_csv(&out.join(format!("roc_{}.csv", safe_name(&meta.classes[c]))), &curve)?
            }
            Err(e) if args.roc_class.is_some() => return Err(e),
            Err(_) => eprintln!(
                "note: skipping ROC for `{}` (needs positives and negatives)",
                meta.classes[c]
            ),
        }
    }

    println!(
        "evaluated {} samples: accuracy {:.4}, macro F1 {}, macro AUC {}",
        data.len(),
        outcome.report.multiclass_accuracy,
        outcome
            .report
            .macro_f1
            .map_or("undefined".to_string(), |v| format!("{v:.4}")),
        outcome
            .macro_auc
            .map_or("undefined".to_string(), |v| format!("{v:.4}")),
    );
    println!("reports in {}", out.display());
    Ok(())
}

// ---------------------------------------------------------------- localize

#[derive(Args)]
struct LocalizeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Heatmap threshold in [0,1], or `sweep` for 0.00..1.00 step 0.05
    #[arg(long, default_value = "0.5")]
    threshold: String,
    /// Output directory (default: `localization` beside the checkpoint)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
}

#[derive(serde::Serialize)]
struct LocalizationSample {
    id: String,
    label: String,
    iou: f64,
    predicted: Option<PixelBox>,
    truth: Option<PixelBox>,
}

#[derive(serde::Serialize)]
struct LocalizationFile {
    threshold: f32,
    mean_box_iou: f64,
    samples: Vec<LocalizationSample>,
}

fn cmd_localize(args: LocalizeArgs) -> Result<()> {
    let loaded = load_checkpoint_model(&args.checkpoint, args.batch_size)?;
    let meta = &loaded.meta;
    let manifest = load_manifest(&args.manifest, true)?;
    require_matching_classes(meta, &manifest)?;
    let samples = load_samples(&manifest)?;
    let annotated: Vec<&Sample> = samples.iter().filter(|s| s.annotation.is_some()).collect();
    if annotated.is_empty() {
        return Err(Error::Data(
            "no annotated samples in manifest; localization needs masks or boxes".into(),
        ));
    }
    let owned: Vec<Sample> = annotated.iter().map(|&s| s.clone()).collect();
    let data = PreppedData::from_samples(&owned, &meta.preprocess)?;

    let train = TrainConfig {
        batch_size: args.batch_size,
        seed: meta.seed,
        ..TrainConfig::default()
    };
    let trainer = Trainer {
        model: &meta.config,
        train: &train,
        preprocess: &meta.preprocess,
        classes: &meta.classes,
    };
    let idx: Vec<usize> = (0..data.len()).collect();
    let outcome = trainer.evaluate(&loaded.params, &data, &idx)?;

    let truth_boxes: Vec<Option<PixelBox>> = owned
        .iter()
        .map(|s| s.annotation.as_ref().and_then(|a| a.bbox()))
        .collect();
    let dims: Vec<(usize, usize)> = owned.iter().map(|s| s.image.dim()).collect();

    let mean_iou_at = |threshold: f32| -> (f64, Vec<LocalizationSample>) {
        let mut entries = Vec::with_capacity(owned.len());
        let mut total = 0.0;
        for (i, sample) in owned.iter().enumerate() {
            let loc = metrics::localize(
                &outcome.attention[i].view(),
                0,
                dims[i].0,
                dims[i].1,
                threshold,
            );
            let iou = match &truth_boxes[i] {
                Some(truth) => loc.box_iou(truth),
                None => 0.0,
            };
            total += iou;
            entries.push(LocalizationSample {
                id: sample.id.clone(),
                label: meta.classes[sample.label].clone(),
                iou,
                predicted: loc.bbox,
                truth: truth_boxes[i],
            });
        }
        (total / owned.len() as f64, entries)
    };

    let out = args
        .out
        .clone()
        .unwrap_or_else(|| {
            args.checkpoint
                .parent()
                .unwrap_or(Path::new("."))
                .join("localization")
        });
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;

    let chosen = if args.threshold.trim() == "sweep" {
        let mut csv = String::from("threshold,mean_iou\n");
        let mut best = (0.0f32, f64::NEG_INFINITY);
        for i in 0..=20 {
            let t = i as f32 * 0.05;
            let (mean, _) = mean_iou_at(t);
            csv.push_str(&format!("{t:.2},{mean:.6}\n"));
            if mean > best.1 {
                best = (t, mean);
            }
        }
        let sweep_path = out.join("localization_sweep.csv");
        fs::write(&sweep_path, csv).map_err(|e| Error::io(&sweep_path, e))?;
        println!("sweep best: mean box IoU {:.4} at threshold {:.2}", best.1, best.0);
        best.0
    } else {
        let t: f32 = parse_key("threshold", &args.threshold)?;
        if !t.is_finite() {
            return Err(Error::Usage("threshold must be finite".into()));
        }
        t
    };

    let (mean, entries) = mean_iou_at(chosen);
    write_json(
        &out.join("localization.json"),
        &LocalizationFile {
            threshold: chosen,
            mean_box_iou: mean,
            samples: entries,
        },
    )?;

    let heat_dir = out.join("heatmaps");
    fs::create_dir_all(&heat_dir).map_err(|e| Error::io(&heat_dir, e))?;
    for (i, sample) in owned.iter().enumerate() {
        let loc = metrics::localize(&outcome.attention[i].view(), 0, dims[i].0, dims[i].1, chosen);
        imgops::write_gray_png(
            &heat_dir.join(format!("{}.png", safe_name(&sample.id))),
            &loc.heatmap,
        )?;
    }

    println!(
        "mean box IoU {:.4} at threshold {:.2} over {} annotated samples; reports in {}",
        mean,
        chosen,
        owned.len(),
        out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- preview

#[derive(Args)]
struct PreviewArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Sample index within the manifest
    #[arg(long, default_value_t = 0)]
    index: usize,
    /// Checkpoint providing attention; omitted = seeded random weights
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(serde::Serialize)]
struct PreviewInfo {
    id: String,
    label: String,
    choices: crate::augment::SampleChoices,
}

fn cmd_augment_preview(args: PreviewArgs) -> Result<()> {
    let manifest = load_manifest(&args.manifest, true)?;
    let samples = load_samples(&manifest)?;
    let sample = samples.get(args.index).ok_or_else(|| {
        Error::Usage(format!(
            "index {} out of range; manifest has {} samples",
            args.index,
            samples.len()
        ))
    })?;

    let (model, pre, params) = match &args.checkpoint {
        Some(path) => {
            let loaded = load_checkpoint_model(path, 1)?;
            (loaded.meta.config.clone(), loaded.meta.preprocess.clone(), loaded.params)
        }
        None => {
            let (_, mut model, _, pre) = desk_defaults();
            model.classes = manifest.classes.len();
            let params = init_model_params(&model, args.seed)?;
            (model, pre, params)
        }
    };

    let clean = preprocess::preprocess_image(&sample.image, &pre)?;
    let mut g = Graph::<f32>::new();
    let pv = params.leaves(&mut g);
    let input = g.leaf(batch_tensor(std::slice::from_ref(&clean), pre.zscore));
    let out_nodes = model_forward(&mut g, &pv, &model, input)?;
    let stack = g.value(out_nodes.attention).clone();

    let mut rng = rng::derive(args.seed, "preview");
    let aux = make_auxiliary_batch(
        std::slice::from_ref(&clean),
        &stack.view(),
        &AugmentConfig::default(),
        &mut rng,
    )?;

    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    let panels = imgops::compose_panels(
        &[&clean, &aux.mixup[0], &aux.patching[0], &aux.dimming[0]],
        4,
    );
    imgops::write_gray_png(&args.out.join("preview.png"), &panels)?;

    let (h, w) = clean.dim();
    let heat = metrics::localize(&stack.view(), 0, h, w, 0.5).heatmap;
    imgops::write_gray_png(&args.out.join("preview_attention.png"), &heat)?;

    let mut srng = rng::derive(args.seed, "preview-stochastic");
    let stochastic = preprocess::apply_stochastic_augs(
        &sample.image,
        &StochasticAugConfig::default(),
        (h, w),
        &mut srng,
    );
    let pair = imgops::compose_panels(&[&clean, &stochastic], 4);
    imgops::write_gray_png(&args.out.join("preview_stochastic.png"), &pair)?;

    write_json(
        &args.out.join("preview.json"),
        &PreviewInfo {
            id: sample.id.clone(),
            label: manifest.classes[sample.label].clone(),
            choices: aux.choices[0].clone(),
        },
    )?;
    println!(
        "previews for `{}` written to {}",
        sample.id,
        args.out.display()
    );
    Ok(())
}

// ---------------------------------------------------------------- preprocess

#[derive(Args)]
struct PreprocessArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// on | off
    #[arg(long)]
    clahe: Option<String>,
    #[arg(long)]
    clip_limit: Option<f32>,
    /// CLAHE tile grid, e.g. 8,8
    #[arg(long)]
    tiles: Option<String>,
    #[arg(long)]
    input_size: Option<usize>,
}

fn cmd_preprocess(args: PreprocessArgs) -> Result<()> {
    let (_, _, _, mut pre) = desk_defaults();
    if let Some(s) = &args.clahe {
        pre.clahe_enabled = parse_on_off("clahe", s)?;
    }
    if let Some(v) = args.clip_limit {
        pre.clip_limit = v;
    }
    if let Some(s) = &args.tiles {
        let t = parse_usize_list("tiles", s, Some(2))?;
        pre.tiles = (t[0], t[1]);
    }
    if let Some(v) = args.input_size {
        pre.target_size = (v, v);
    }
    pre.validate()?;

    let manifest = load_manifest(&args.manifest, true)?;
    let samples = load_samples(&manifest)?;
    fs::create_dir_all(&args.out).map_err(|e| Error::io(&args.out, e))?;
    for sample in &samples {
        let before = imgops::resize_bilinear(&sample.image, pre.target_size.0, pre.target_size.1);
        let after = preprocess::preprocess_image(&sample.image, &pre)?;
        let pair = imgops::compose_panels(&[&before, &after], 4);
        imgops::write_gray_png(
            &args.out.join(format!("{}.png", safe_name(&sample.id))),
            &pair,
        )?;
    }
    println!(
        "wrote {} before/after pairs to {}",
        samples.len(),
        args.out.display()
    );
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv_from(text: &str) -> Kv {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, text).unwrap();
        read_kv(&path).unwrap()
    }

    #[test]
    fn config_file_keys_apply_and_flags_win() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "epochs=3\nlr=0.25\npooling=gmp\nmanifest=m.csv\n").unwrap();
        let args = TrainArgs {
            config: Some(path),
            lr: Some(0.5),
            ..TrainArgs::default()
        };
        let resolved = resolve_run(&args).unwrap();
        assert_eq!(resolved.train.epochs, 3);
        assert_eq!(resolved.train.lr, 0.5);
        assert_eq!(resolved.model.pooling, crate::model::Pooling::Gmp);
        assert_eq!(resolved.manifest, PathBuf::from("m.csv"));
    }

    #[test]
    fn misspelled_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "manifest=m.csv\nepochz=3\n").unwrap();
        let args = TrainArgs {
            config: Some(path),
            ..TrainArgs::default()
        };
        let err = resolve_run(&args).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("epochz"), "{err}");
    }

    #[test]
    fn config_echo_round_trips_through_the_parser() {
        let (folds, mut model, train, preprocess) = desk_defaults();
        model.classes = 3;
        let echo = RunConfig {
            manifest: "m.csv".into(),
            folds,
            classes: vec!["a".into(), "b".into(), "c".into()],
            model: model.clone(),
            train: train.clone(),
            preprocess: preprocess.clone(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.txt");
        std::fs::write(&path, config_text(&echo)).unwrap();
        let args = TrainArgs {
            config: Some(path),
            ..TrainArgs::default()
        };
        let resolved = resolve_run(&args).unwrap();
        assert_eq!(resolved.train, train);
        assert_eq!(resolved.preprocess, preprocess);
        assert_eq!(resolved.folds, folds);
        let mut m = resolved.model;
        m.classes = 3;
        assert_eq!(m, model);
    }

    #[test]
    fn kv_parsing_skips_comments_and_trims() {
        let mut kv = kv_from("# comment\n\n lr = 0.5 \n");
        assert_eq!(kv.take("lr").as_deref(), Some("0.5"));
        assert!(kv.finish().is_ok());
    }

    #[test]
    fn on_off_values_parse_strictly() {
        assert!(parse_on_off("clahe", "on").unwrap());
        assert!(!parse_on_off("clahe", "off").unwrap());
        assert!(parse_on_off("clahe", "maybe").is_err());
    }

    #[test]
    fn file_names_are_sanitized() {
        assert_eq!(safe_name("images/c0-0001.png"), "images-c0-0001.png");
        assert_eq!(safe_name("a b/c"), "a-b-c");
    }

    #[test]
    fn missing_manifest_is_a_usage_error() {
        let err = resolve_run(&TrainArgs::default()).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
