//! Operator front end: dataset generation and splitting, both training
//! stages, single-image inference, the metric report, and the ablation
//! matrix. Flags override config-file values, and every artifact-producing
//! run persists its resolved configuration next to its outputs.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use candle_core::Device;
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use reflectgen::aux_encoder::{aux_sample_from_tuple, train_aux, AuxConfig, AuxSample};
use reflectgen::ckpt;
use reflectgen::dataset::{
    load_tuple, sample_dataset, split_dataset, DataTuple, DatasetManifest, SampleOptions,
};
use reflectgen::diffusion::{infer, prepare_diffusion_samples, train_diffusion, DenoiserConfig};
use reflectgen::evaluation::{ablate, evaluate, EvalCase, EvalOptions};
use reflectgen::img::{load_mask_png, load_rgb_png, save_rgb_png};

#[derive(Parser)]
#[command(
    name = "reflectgen",
    version,
    about = "Reflection generation: synthetic scenes, box/type training, \
             control-conditioned denoising, metrics"
)]
struct Cli {
    /// TOML config file; command-line flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output root (fallback: $REFLECTGEN_OUT, then ./reflectgen-out).
    #[arg(long, global = true, env = "REFLECTGEN_OUT", value_name = "DIR")]
    out: Option<PathBuf>,
    /// Recorded in resolved configs; every code path is seed-deterministic.
    #[arg(long, global = true, value_name = "BOOL")]
    deterministic: Option<bool>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthetic dataset operations.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Train the reflection-type classifier + box-offset regressor.
    TrainAux(TrainAuxArgs),
    /// Train the control-conditioned denoiser.
    TrainDiffusion(TrainDiffusionArgs),
    /// Generate reflections for one composite, one image per seed.
    Infer(InferArgs),
    /// Metric report over a test split.
    Evaluate(EvaluateArgs),
    /// Train and evaluate the five conditioning-flag combinations.
    Ablate(AblateArgs),
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Sample scenes and write tuples plus manifest.json.
    Generate(GenerateArgs),
    /// Split manifest.json into train.json and test.json.
    Split(SplitArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Target directory (default: <out>/dataset).
    #[arg(long, value_name = "DIR")]
    dir: Option<PathBuf>,
    /// Number of tuples.
    #[arg(long)]
    n: Option<usize>,
    /// Fraction labeled "vertical".
    #[arg(long)]
    type_ratio: Option<f64>,
    /// Canvas height in pixels.
    #[arg(long)]
    canvas_h: Option<usize>,
    /// Canvas width in pixels.
    #[arg(long)]
    canvas_w: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SplitArgs {
    /// Dataset directory containing manifest.json.
    #[arg(long, value_name = "DIR")]
    dir: PathBuf,
    /// Fraction of tuples routed to the test split.
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainAuxArgs {
    /// Dataset directory.
    #[arg(long, value_name = "DIR")]
    dataset: PathBuf,
    /// Manifest inside the dataset dir (default: train.json, else manifest.json).
    #[arg(long, value_name = "FILE")]
    manifest: Option<String>,
    /// Held-out manifest for per-epoch metrics (default: test.json when present).
    #[arg(long, value_name = "FILE")]
    val_manifest: Option<String>,
    /// Cap on training tuples (default: all).
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    backbone_width: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path (default: <out>/aux/aux.safetensors).
    #[arg(long, value_name = "FILE")]
    ckpt: Option<PathBuf>,
}

#[derive(Args)]
struct TrainDiffusionArgs {
    #[arg(long, value_name = "DIR")]
    dataset: PathBuf,
    /// Manifest inside the dataset dir (default: train.json, else manifest.json).
    #[arg(long, value_name = "FILE")]
    manifest: Option<String>,
    /// Aux checkpoint whose frozen predictions drive the conditioning.
    #[arg(long, value_name = "FILE")]
    aux: Option<PathBuf>,
    /// Condition on ground-truth boxes and types instead of aux predictions.
    #[arg(long)]
    gt_boxes: bool,
    /// Cap on training tuples (default: all).
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    train_steps: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path (default: <out>/diffusion/diffusion.safetensors).
    #[arg(long, value_name = "FILE")]
    ckpt: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long, value_name = "FILE")]
    aux: PathBuf,
    #[arg(long, value_name = "FILE")]
    diffusion: PathBuf,
    /// Composite image (PNG) to add a reflection to.
    #[arg(long, value_name = "FILE")]
    composite: PathBuf,
    /// Foreground mask (PNG) of the inserted object.
    #[arg(long, value_name = "FILE")]
    fg_mask: PathBuf,
    /// Fraction of the trajectory re-noised (default: checkpoint value).
    #[arg(long)]
    strength: Option<f64>,
    /// Sampler steps (default: checkpoint value).
    #[arg(long)]
    steps: Option<usize>,
    /// One output image per seed.
    #[arg(long = "seed", num_args = 1.., value_name = "SEED")]
    seeds: Vec<u64>,
    /// Output directory (default: <out>/infer).
    #[arg(long, value_name = "DIR")]
    dir: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long, value_name = "DIR")]
    dataset: PathBuf,
    /// Manifest inside the dataset dir (default: test.json, else manifest.json).
    #[arg(long, value_name = "FILE")]
    manifest: Option<String>,
    #[arg(long, value_name = "FILE")]
    aux: PathBuf,
    #[arg(long, value_name = "FILE")]
    diffusion: PathBuf,
    /// Cap on evaluated tuples (default: all).
    #[arg(long)]
    limit: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report directory (default: <out>/evaluate).
    #[arg(long, value_name = "DIR")]
    dir: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long, value_name = "DIR")]
    dataset: PathBuf,
    /// Training manifest (default: train.json, else manifest.json).
    #[arg(long, value_name = "FILE")]
    train_manifest: Option<String>,
    /// Evaluation manifest (default: test.json, else manifest.json).
    #[arg(long, value_name = "FILE")]
    test_manifest: Option<String>,
    #[arg(long, value_name = "FILE")]
    aux: PathBuf,
    /// Cap on training tuples per row (default: all).
    #[arg(long)]
    train_limit: Option<usize>,
    /// Cap on evaluated tuples (default: all).
    #[arg(long)]
    eval_limit: Option<usize>,
    /// Training budget per row (default: config value).
    #[arg(long)]
    train_steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Report directory (default: <out>/ablate).
    #[arg(long, value_name = "DIR")]
    dir: Option<PathBuf>,
}

/// Config-file shape. Sections mirror the library configs; unknown keys are
/// rejected everywhere.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileConfig {
    seed: Option<u64>,
    deterministic: Option<bool>,
    dataset: Option<DatasetSection>,
    aux: Option<AuxConfig>,
    diffusion: Option<DenoiserConfig>,
    eval: Option<EvalOptions>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct DatasetSection {
    n: usize,
    type_ratio: f64,
    canvas_h: usize,
    canvas_w: usize,
    test_fraction: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection { n: 2400, type_ratio: 0.9, canvas_h: 64, canvas_w: 64, test_fraction: 0.1 }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(&cli) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(cli: &Cli) -> Result<()> {
    let file = load_file_config(cli.config.as_deref())?;
    match &cli.cmd {
        Cmd::Dataset(DatasetCmd::Generate(a)) => cmd_generate(cli, a, &file),
        Cmd::Dataset(DatasetCmd::Split(a)) => cmd_split(cli, a, &file),
        Cmd::TrainAux(a) => cmd_train_aux(cli, a, &file),
        Cmd::TrainDiffusion(a) => cmd_train_diffusion(cli, a, &file),
        Cmd::Infer(a) => cmd_infer(cli, a, &file),
        Cmd::Evaluate(a) => cmd_evaluate(cli, a, &file),
        Cmd::Ablate(a) => cmd_ablate(cli, a, &file),
    }
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
        }
    }
}

fn out_root(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from("reflectgen-out"))
}

fn deterministic(cli: &Cli, file: &FileConfig) -> bool {
    cli.deterministic.or(file.deterministic).unwrap_or(true)
}

fn device() -> Device {
    Device::Cpu
}

fn persist_resolved<T: Serialize>(dir: &Path, name: &str, resolved: &T) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let text = toml::to_string_pretty(resolved).context("serializing resolved config")?;
    std::fs::write(dir.join(name), text)
        .with_context(|| format!("writing {}", dir.join(name).display()))?;
    Ok(())
}

/// Picks `explicit` when given, otherwise `preferred` when it exists,
/// otherwise manifest.json.
fn resolve_manifest(
    dir: &Path,
    explicit: Option<&str>,
    preferred: &str,
) -> Result<(DatasetManifest, String)> {
    let name = match explicit {
        Some(n) => n.to_string(),
        None if dir.join(preferred).exists() => preferred.to_string(),
        None => "manifest.json".to_string(),
    };
    let path = dir.join(&name);
    let manifest = DatasetManifest::load(&path)
        .with_context(|| format!("loading manifest {}", path.display()))?;
    Ok((manifest, name))
}

/// Loads up to `limit` tuples; a tuple that fails to load or validate aborts
/// with its id in the error.
fn load_cases(dir: &Path, manifest: &DatasetManifest, limit: Option<usize>) -> Result<Vec<EvalCase>> {
    let take = limit.unwrap_or(manifest.entries.len()).min(manifest.entries.len());
    manifest.entries[..take]
        .iter()
        .map(|e| {
            let tuple =
                load_tuple(dir, e).with_context(|| format!("loading tuple {}", e.tuple_id))?;
            Ok(EvalCase { tuple_id: e.tuple_id.clone(), tuple })
        })
        .collect()
}

#[derive(Serialize)]
struct ResolvedGenerate {
    command: &'static str,
    seed: u64,
    deterministic: bool,
    n: usize,
    type_ratio: f64,
    canvas_h: usize,
    canvas_w: usize,
}

fn cmd_generate(cli: &Cli, args: &GenerateArgs, file: &FileConfig) -> Result<()> {
    let section = file.dataset.unwrap_or_default();
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let opts = SampleOptions {
        n: args.n.unwrap_or(section.n),
        type_ratio: args.type_ratio.unwrap_or(section.type_ratio),
        seed,
        canvas_h: args.canvas_h.unwrap_or(section.canvas_h),
        canvas_w: args.canvas_w.unwrap_or(section.canvas_w),
    };
    let dir = args.dir.clone().unwrap_or_else(|| out_root(cli).join("dataset"));
    let manifest = sample_dataset(&dir, &opts)?;
    // No paths in here: regenerating with the same arguments must produce
    // byte-identical directories wherever they live.
    persist_resolved(
        &dir,
        "resolved-generate.toml",
        &ResolvedGenerate {
            command: "dataset generate",
            seed,
            deterministic: deterministic(cli, file),
            n: opts.n,
            type_ratio: opts.type_ratio,
            canvas_h: opts.canvas_h,
            canvas_w: opts.canvas_w,
        },
    )?;
    println!("wrote {} tuples to {}", manifest.entries.len(), dir.display());
    Ok(())
}

#[derive(Serialize)]
struct ResolvedSplit {
    command: &'static str,
    seed: u64,
    deterministic: bool,
    test_fraction: f64,
}

fn cmd_split(cli: &Cli, args: &SplitArgs, file: &FileConfig) -> Result<()> {
    let section = file.dataset.unwrap_or_default();
    let seed = args.seed.or(file.seed).unwrap_or(0);
    let test_fraction = args.test_fraction.unwrap_or(section.test_fraction);
    let (manifest, _) = resolve_manifest(&args.dir, None, "manifest.json")?;
    let (train, test) = split_dataset(&manifest, test_fraction, seed)?;
    train.save(&args.dir.join("train.json"))?;
    test.save(&args.dir.join("test.json"))?;
    persist_resolved(
        &args.dir,
        "resolved-split.toml",
        &ResolvedSplit {
            command: "dataset split",
            seed,
            deterministic: deterministic(cli, file),
            test_fraction,
        },
    )?;
    println!(
        "split {} tuples into {} train / {} test",
        manifest.entries.len(),
        train.entries.len(),
        test.entries.len()
    );
    Ok(())
}

#[derive(Serialize)]
struct ResolvedTrainAux {
    command: &'static str,
    deterministic: bool,
    dataset: PathBuf,
    manifest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    val_manifest: Option<String>,
    tuples: usize,
    checkpoint: PathBuf,
    aux: AuxConfig,
}

fn cmd_train_aux(cli: &Cli, args: &TrainAuxArgs, file: &FileConfig) -> Result<()> {
    let device = device();
    let mut cfg = file.aux.clone().unwrap_or_default();
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.backbone_width {
        cfg.backbone_width = v;
    }
    if let Some(v) = args.depth {
        cfg.depth = v;
    }
    if let Some(v) = args.seed.or(file.seed) {
        cfg.seed = v;
    }

    let (manifest, manifest_name) =
        resolve_manifest(&args.dataset, args.manifest.as_deref(), "train.json")?;
    let cases = load_cases(&args.dataset, &manifest, args.limit)?;
    let samples: Vec<AuxSample> = cases
        .iter()
        .map(|c| aux_sample_from_tuple(&c.tuple, &device))
        .collect::<reflectgen::error::Result<_>>()?;

    let val_name = match &args.val_manifest {
        Some(n) => Some(n.clone()),
        None if args.dataset.join("test.json").exists() => Some("test.json".to_string()),
        None => None,
    };
    let val_samples: Vec<AuxSample> = match &val_name {
        Some(name) => {
            let (vm, _) = resolve_manifest(&args.dataset, Some(name), name)?;
            load_cases(&args.dataset, &vm, None)?
                .iter()
                .map(|c| aux_sample_from_tuple(&c.tuple, &device))
                .collect::<reflectgen::error::Result<_>>()?
        }
        None => Vec::new(),
    };

    println!(
        "training type/box predictor on {} tuples ({} held out), {} epochs",
        samples.len(),
        val_samples.len(),
        cfg.epochs
    );
    let (model, report) = train_aux(&samples, &val_samples, &cfg, &device)?;

    let ckpt_path =
        args.ckpt.clone().unwrap_or_else(|| out_root(cli).join("aux").join("aux.safetensors"));
    ckpt::save_aux(&ckpt_path, &model, cfg.epochs as u64)?;
    let report_dir = ckpt_path.parent().map(Path::to_path_buf).unwrap_or_else(|| ".".into());
    std::fs::create_dir_all(&report_dir)?;
    std::fs::write(
        report_dir.join("aux-train-report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    persist_resolved(
        &report_dir,
        "resolved-train-aux.toml",
        &ResolvedTrainAux {
            command: "train-aux",
            deterministic: deterministic(cli, file),
            dataset: args.dataset.clone(),
            manifest: manifest_name,
            val_manifest: val_name,
            tuples: samples.len(),
            checkpoint: ckpt_path.clone(),
            aux: cfg,
        },
    )?;
    if let Some(last) = report.last() {
        println!(
            "epoch {}: train loss {:.4}, held-out accuracy {:.3}, mean overlap {:.4}",
            last.epoch, last.train_loss, last.val_accuracy, last.val_mean_kfiou
        );
    }
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

#[derive(Serialize)]
struct ResolvedTrainDiffusion {
    command: &'static str,
    deterministic: bool,
    dataset: PathBuf,
    manifest: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    aux_checkpoint: Option<PathBuf>,
    tuples: usize,
    checkpoint: PathBuf,
    diffusion: DenoiserConfig,
}

#[derive(Serialize)]
struct DiffusionTrainReport {
    steps: usize,
    final_loss: Option<f64>,
    tail50_mean: Option<f64>,
    losses: Vec<f64>,
}

fn cmd_train_diffusion(cli: &Cli, args: &TrainDiffusionArgs, file: &FileConfig) -> Result<()> {
    let device = device();
    let mut cfg = file.diffusion.clone().unwrap_or_default();
    if let Some(v) = args.train_steps {
        cfg.train_steps = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.learning_rate {
        cfg.learning_rate = v;
    }
    if args.gt_boxes {
        cfg.gt_boxes = true;
    }
    if let Some(v) = args.seed.or(file.seed) {
        cfg.seed = v;
    }

    let (manifest, manifest_name) =
        resolve_manifest(&args.dataset, args.manifest.as_deref(), "train.json")?;
    let cases = load_cases(&args.dataset, &manifest, args.limit)?;
    let tuples: Vec<DataTuple> = cases.into_iter().map(|c| c.tuple).collect();

    let aux_model = match (&args.aux, cfg.gt_boxes) {
        (Some(p), false) => Some(ckpt::load_aux(p, &device)?),
        (_, true) => None,
        (None, false) => bail!("--aux checkpoint required unless --gt-boxes is set"),
    };
    let samples = prepare_diffusion_samples(&tuples, aux_model.as_ref(), &cfg, &device)?;

    println!(
        "training denoiser on {} tuples for {} steps (conditioning: {})",
        samples.len(),
        cfg.train_steps,
        if cfg.gt_boxes { "ground-truth boxes" } else { "aux predictions" }
    );
    let (model, losses) = train_diffusion(&samples, &cfg, &device)?;

    let ckpt_path = args
        .ckpt
        .clone()
        .unwrap_or_else(|| out_root(cli).join("diffusion").join("diffusion.safetensors"));
    ckpt::save_diffusion(&ckpt_path, &model, cfg.train_steps as u64)?;
    let report_dir = ckpt_path.parent().map(Path::to_path_buf).unwrap_or_else(|| ".".into());
    std::fs::create_dir_all(&report_dir)?;
    let tail = losses.len().saturating_sub(50);
    let report = DiffusionTrainReport {
        steps: losses.len(),
        final_loss: losses.last().copied(),
        tail50_mean: if losses.is_empty() {
            None
        } else {
            Some(losses[tail..].iter().sum::<f64>() / (losses.len() - tail) as f64)
        },
        losses,
    };
    std::fs::write(
        report_dir.join("diffusion-train-report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    persist_resolved(
        &report_dir,
        "resolved-train-diffusion.toml",
        &ResolvedTrainDiffusion {
            command: "train-diffusion",
            deterministic: deterministic(cli, file),
            dataset: args.dataset.clone(),
            manifest: manifest_name,
            aux_checkpoint: args.aux.clone().filter(|_| !cfg.gt_boxes),
            tuples: samples.len(),
            checkpoint: ckpt_path.clone(),
            diffusion: cfg,
        },
    )?;
    if let Some(m) = report.tail50_mean {
        println!("mean loss over the last 50 steps: {m:.4}");
    }
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

#[derive(Serialize)]
struct ResolvedInfer {
    command: &'static str,
    deterministic: bool,
    aux_checkpoint: PathBuf,
    diffusion_checkpoint: PathBuf,
    composite: PathBuf,
    fg_mask: PathBuf,
    strength: f64,
    steps: usize,
    seeds: Vec<u64>,
}

fn cmd_infer(cli: &Cli, args: &InferArgs, file: &FileConfig) -> Result<()> {
    let device = device();
    let aux = ckpt::load_aux(&args.aux, &device)?;
    let model = ckpt::load_diffusion(&args.diffusion, &device)?;
    let composite = load_rgb_png(&args.composite)?;
    let fg_mask = load_mask_png(&args.fg_mask)?;
    let strength = args.strength.unwrap_or(model.config().strength);
    let steps = args.steps.unwrap_or(model.config().sampler_steps);
    let seeds =
        if args.seeds.is_empty() { vec![file.seed.unwrap_or(0)] } else { args.seeds.clone() };

    let dir = args.dir.clone().unwrap_or_else(|| out_root(cli).join("infer"));
    std::fs::create_dir_all(&dir)?;
    let stem = args
        .composite
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "composite".into());
    for &seed in &seeds {
        let img = infer(&model, &aux, &composite, &fg_mask, strength, steps, seed)?;
        let path = dir.join(format!("{stem}_s{seed}.png"));
        save_rgb_png(&img, &path)?;
        println!("wrote {}", path.display());
    }
    persist_resolved(
        &dir,
        "resolved-infer.toml",
        &ResolvedInfer {
            command: "infer",
            deterministic: deterministic(cli, file),
            aux_checkpoint: args.aux.clone(),
            diffusion_checkpoint: args.diffusion.clone(),
            composite: args.composite.clone(),
            fg_mask: args.fg_mask.clone(),
            strength,
            steps,
            seeds,
        },
    )?;
    Ok(())
}

#[derive(Serialize)]
struct ResolvedEvaluate {
    command: &'static str,
    deterministic: bool,
    dataset: PathBuf,
    manifest: String,
    aux_checkpoint: PathBuf,
    diffusion_checkpoint: PathBuf,
    tuples: usize,
    eval: EvalOptions,
}

fn cmd_evaluate(cli: &Cli, args: &EvaluateArgs, file: &FileConfig) -> Result<()> {
    let device = device();
    let aux = ckpt::load_aux(&args.aux, &device)?;
    let model = ckpt::load_diffusion(&args.diffusion, &device)?;
    let (manifest, manifest_name) =
        resolve_manifest(&args.dataset, args.manifest.as_deref(), "test.json")?;
    let cases = load_cases(&args.dataset, &manifest, args.limit)?;

    let mut opts = file.eval.unwrap_or_default();
    if let Some(s) = args.seed.or(file.seed) {
        opts.seed = s;
    }
    println!(
        "evaluating {} tuples ({} sampler steps, strength {})",
        cases.len(),
        model.config().sampler_steps,
        model.config().strength
    );
    let eval = evaluate(&cases, &aux, &model, &opts)?;

    let dir = args.dir.clone().unwrap_or_else(|| out_root(cli).join("evaluate"));
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("report.json"), eval.to_json()?)?;
    let table = eval.render_table();
    std::fs::write(dir.join("report.txt"), &table)?;
    persist_resolved(
        &dir,
        "resolved-evaluate.toml",
        &ResolvedEvaluate {
            command: "evaluate",
            deterministic: deterministic(cli, file),
            dataset: args.dataset.clone(),
            manifest: manifest_name,
            aux_checkpoint: args.aux.clone(),
            diffusion_checkpoint: args.diffusion.clone(),
            tuples: cases.len(),
            eval: opts,
        },
    )?;
    print!("{table}");
    println!("report written to {}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct ResolvedAblate {
    command: &'static str,
    deterministic: bool,
    dataset: PathBuf,
    train_manifest: String,
    test_manifest: String,
    aux_checkpoint: PathBuf,
    train_tuples: usize,
    eval_tuples: usize,
    eval: EvalOptions,
    diffusion: DenoiserConfig,
}

fn cmd_ablate(cli: &Cli, args: &AblateArgs, file: &FileConfig) -> Result<()> {
    let device = device();
    let aux = ckpt::load_aux(&args.aux, &device)?;
    let mut cfg = file.diffusion.clone().unwrap_or_default();
    if let Some(v) = args.train_steps {
        cfg.train_steps = v;
    }
    if let Some(v) = args.seed.or(file.seed) {
        cfg.seed = v;
    }
    let mut opts = file.eval.unwrap_or_default();
    if let Some(s) = args.seed.or(file.seed) {
        opts.seed = s;
    }

    let (train_manifest, train_name) =
        resolve_manifest(&args.dataset, args.train_manifest.as_deref(), "train.json")?;
    let train_tuples: Vec<DataTuple> = load_cases(&args.dataset, &train_manifest, args.train_limit)?
        .into_iter()
        .map(|c| c.tuple)
        .collect();
    let (test_manifest, test_name) =
        resolve_manifest(&args.dataset, args.test_manifest.as_deref(), "test.json")?;
    let cases = load_cases(&args.dataset, &test_manifest, args.eval_limit)?;

    println!(
        "ablation matrix: 5 rows x {} train steps, evaluated on {} tuples",
        cfg.train_steps,
        cases.len()
    );
    let table = ablate(&train_tuples, &cases, &aux, &cfg, &opts, &device)?;

    let dir = args.dir.clone().unwrap_or_else(|| out_root(cli).join("ablate"));
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("ablation.json"), table.to_json()?)?;
    let rendered = table.render_table();
    std::fs::write(dir.join("ablation.txt"), &rendered)?;
    persist_resolved(
        &dir,
        "resolved-ablate.toml",
        &ResolvedAblate {
            command: "ablate",
            deterministic: deterministic(cli, file),
            dataset: args.dataset.clone(),
            train_manifest: train_name,
            test_manifest: test_name,
            aux_checkpoint: args.aux.clone(),
            train_tuples: train_tuples.len(),
            eval_tuples: cases.len(),
            eval: opts,
            diffusion: cfg,
        },
    )?;
    print!("{rendered}");
    println!("ablation report written to {}", dir.display());
    Ok(())
}
