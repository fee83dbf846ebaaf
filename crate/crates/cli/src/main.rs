//! Single command-line entry point for the pipeline: dataset generation,
//! augmentation, training, evaluation, and gradient checking.
//!
//! Exit codes are stable for scripting: 0 success, 1 usage error, 2
//! runtime/data error. Every run prints its resolved configuration first
//! (suppressed by --quiet), and all randomness derives from --seed, so a
//! repeated invocation reproduces its outputs byte for byte.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};

use nigra_core::augment::{augment_dataset, Angle, AugmentOp, Interp, MirrorAxis};
use nigra_core::data::{
    generate_dataset, load_manifest, save_manifest, split_dataset, ClassLabel, DatasetManifest,
    PhantomParams, Split, SplitRatios,
};
use nigra_core::layers::{grad_check_suite, LayerKind};
use nigra_core::model::{Network, Scale};
use nigra_core::rng::derive_seed;
use nigra_core::trainer::{
    evaluate, export_metrics_csv, fit, format_sig, load_checkpoint, load_split_tensors,
    save_checkpoint, Arm, ModelKind, TrainConfig,
};
use nigra_core::{Error, Result};

/// Substream of the base seed used when assigning splits in gen-data,
/// disjoint from the per-image streams the generator derives itself.
const SPLIT_STREAM: u64 = 0x5b17;

#[derive(Parser)]
#[command(name = "nigra", version, about = "Synthetic-phantom CNN training pipeline")]
struct Cli {
    /// Base seed for every derived random stream.
    #[arg(long, global = true, value_name = "U64")]
    seed: Option<u64>,

    /// Derive all randomness from the seed (default 42). With `false`, an
    /// unseeded run draws its base seed from system entropy instead.
    #[arg(long, global = true, default_value_t = true, value_name = "BOOL", action = clap::ArgAction::Set)]
    deterministic: bool,

    /// Suppress the resolved-config line and progress output.
    #[arg(long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic phantom dataset with train/val/test splits.
    GenData(GenDataArgs),
    /// Expand a dataset with rotations and mirrors.
    Augment(AugmentArgs),
    /// Train one arm and write metrics plus the best checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on one manifest split.
    Eval(EvalArgs),
    /// Finite-difference gradient checks over the layer zoo.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output directory for the images and manifest.csv.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    /// Images per class.
    #[arg(long = "per-class", value_name = "N")]
    per_class: usize,

    /// Square image edge in pixels.
    #[arg(long, default_value_t = 64, value_name = "PX")]
    size: usize,

    /// Standard deviation of the additive pixel noise.
    #[arg(long, default_value_t = 8.0, value_name = "STD")]
    noise: f64,

    /// Split ratios as train,val,test. Defaults to the corpus proportions.
    #[arg(long, value_parser = parse_ratios, value_name = "T,V,T")]
    ratios: Option<SplitRatios>,
}

#[derive(Args)]
struct AugmentArgs {
    /// Source manifest; images resolve relative to its directory.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,

    /// Output directory for the augmented images and manifest.csv.
    #[arg(long, value_name = "DIR")]
    out: PathBuf,

    /// Rotation angles in degrees, comma separated. Angles outside
    /// [0, 360) are normalized and noted.
    #[arg(long, value_delimiter = ',', value_name = "DEG", num_args = 1..)]
    rotate: Vec<f64>,

    /// Mirror plane(s) to add.
    #[arg(long, value_enum, value_name = "AXIS")]
    mirror: Option<MirrorChoice>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MirrorChoice {
    Vertical,
    Horizontal,
    Both,
}

#[derive(Args)]
struct TrainArgs {
    /// Manifest with train and val splits assigned.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,

    /// Classification arm: which classes the run discriminates.
    #[arg(long, value_parser = parse_arm, value_name = "PN|PM|MN|PMN")]
    arm: Arm,

    /// Architecture to train.
    #[arg(long, default_value = "alexnet", value_parser = parse_model, value_name = "NAME")]
    model: ModelKind,

    /// Input resolution / width preset.
    #[arg(long, default_value = "mini", value_parser = parse_scale, value_name = "full|mini")]
    scale: Scale,

    #[arg(long, default_value_t = 10, value_name = "N")]
    epochs: usize,

    /// Learning rate.
    #[arg(long, default_value_t = 0.005, value_name = "R")]
    lr: f64,

    /// Mini-batch size.
    #[arg(long, default_value_t = 32, value_name = "N")]
    batch: usize,

    /// Where to write the per-epoch metrics CSV.
    #[arg(long, value_name = "OUT.csv")]
    metrics: Option<PathBuf>,

    /// Where to write the best checkpoint.
    #[arg(long, value_name = "OUT.ckpt")]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Manifest whose split is evaluated.
    #[arg(long, value_name = "FILE")]
    manifest: PathBuf,

    /// Which split to evaluate.
    #[arg(long, default_value = "test", value_parser = parse_split, value_name = "NAME")]
    split: Split,

    /// Checkpoint to load; it carries the arm, model, and scale.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Layer family to check.
    #[arg(long, value_enum, default_value = "all", value_name = "NAME")]
    layer: LayerChoice,

    /// Random configurations per layer.
    #[arg(long, default_value_t = 100, value_name = "N")]
    trials: usize,

    /// Maximum allowed relative error.
    #[arg(long, default_value_t = 1e-4, value_name = "T")]
    tol: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum LayerChoice {
    All,
    Conv,
    Pool,
    Act,
    Lrn,
    Bn,
    Fc,
    Softmax,
}

impl LayerChoice {
    fn kinds(self) -> Vec<LayerKind> {
        match self {
            LayerChoice::All => LayerKind::ALL.to_vec(),
            LayerChoice::Conv => vec![LayerKind::Conv],
            LayerChoice::Pool => vec![LayerKind::MaxPool, LayerKind::MeanPool],
            LayerChoice::Act => vec![LayerKind::Sigmoid, LayerKind::Tanh, LayerKind::Relu],
            LayerChoice::Lrn => vec![LayerKind::Lrn],
            LayerChoice::Bn => vec![LayerKind::BatchNorm],
            LayerChoice::Fc => vec![LayerKind::Fc],
            LayerChoice::Softmax => vec![LayerKind::SoftmaxCe],
        }
    }

    fn token(self) -> &'static str {
        match self {
            LayerChoice::All => "all",
            LayerChoice::Conv => "conv",
            LayerChoice::Pool => "pool",
            LayerChoice::Act => "act",
            LayerChoice::Lrn => "lrn",
            LayerChoice::Bn => "bn",
            LayerChoice::Fc => "fc",
            LayerChoice::Softmax => "softmax",
        }
    }
}

fn parse_arm(s: &str) -> std::result::Result<Arm, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_model(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_scale(s: &str) -> std::result::Result<Scale, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_ratios(s: &str) -> std::result::Result<SplitRatios, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three ratios train,val,test, got {s:?}"));
    }
    let mut v = [0.0f64; 3];
    for (slot, part) in v.iter_mut().zip(&parts) {
        *slot = part.trim().parse().map_err(|_| format!("bad ratio {part:?}"))?;
    }
    SplitRatios::new(v[0], v[1], v[2]).map_err(|e| e.to_string())
}

fn main() {
    let code = match Cli::try_parse() {
        Ok(cli) => match run(cli) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                2
            }
        },
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            code
        }
    };
    std::process::exit(code);
}

fn entropy_seed() -> u64 {
    use std::hash::{BuildHasher, RandomState};
    RandomState::new().hash_one(0x9e37_79b9_7f4a_7c15u64)
}

fn run(cli: Cli) -> Result<()> {
    let seed = match (cli.seed, cli.deterministic) {
        (Some(s), _) => s,
        (None, true) => 42,
        (None, false) => entropy_seed(),
    };
    let quiet = cli.quiet;
    match cli.cmd {
        Cmd::GenData(a) => cmd_gen_data(a, seed, cli.deterministic, quiet),
        Cmd::Augment(a) => cmd_augment(a, seed, cli.deterministic, quiet),
        Cmd::Train(a) => cmd_train(a, seed, cli.deterministic, quiet),
        Cmd::Eval(a) => cmd_eval(a, seed, cli.deterministic, quiet),
        Cmd::Gradcheck(a) => cmd_gradcheck(a, seed, cli.deterministic, quiet),
    }
}

/// Directory that a manifest's relative paths resolve against.
fn manifest_dir(manifest: &Path) -> &Path {
    manifest.parent().unwrap_or(Path::new("."))
}

fn cmd_gen_data(a: GenDataArgs, seed: u64, deterministic: bool, quiet: bool) -> Result<()> {
    if !quiet {
        println!(
            "config: cmd=gen-data out={} per-class={} size={} noise={} ratios={} seed={seed} deterministic={deterministic}",
            a.out.display(),
            a.per_class,
            a.size,
            a.noise,
            a.ratios.map_or("default".to_string(), |r| format!(
                "{},{},{}",
                r.train, r.val, r.test
            )),
        );
    }
    let mut params = PhantomParams::new(ClassLabel::Pd, 0);
    params.size = a.size;
    params.noise_std = a.noise;
    let manifest = generate_dataset(a.per_class, &params, &a.out, seed)?;
    let ratios = a.ratios.unwrap_or_default();
    let split = split_dataset(&manifest, &ratios, derive_seed(seed, SPLIT_STREAM))?;
    save_manifest(&split, &a.out.join("manifest.csv"))?;
    println!("wrote {} images and manifest.csv to {}", split.len(), a.out.display());
    Ok(())
}

fn cmd_augment(a: AugmentArgs, seed: u64, deterministic: bool, quiet: bool) -> Result<()> {
    if !quiet {
        let rotate = if a.rotate.is_empty() {
            "none".to_string()
        } else {
            a.rotate.iter().map(f64::to_string).collect::<Vec<_>>().join(",")
        };
        let mirror = match a.mirror {
            None => "none",
            Some(MirrorChoice::Vertical) => "vertical",
            Some(MirrorChoice::Horizontal) => "horizontal",
            Some(MirrorChoice::Both) => "both",
        };
        println!(
            "config: cmd=augment manifest={} out={} rotate={rotate} mirror={mirror} seed={seed} deterministic={deterministic}",
            a.manifest.display(),
            a.out.display(),
        );
    }
    let manifest = load_manifest(&a.manifest)?;
    let mut plan = Vec::new();
    for &deg in &a.rotate {
        let angle = Angle::new(deg)?;
        if angle.degrees() != deg && !quiet {
            println!("note: rotation {deg} normalized to {}", angle.degrees());
        }
        plan.push(AugmentOp::Rotate(angle));
    }
    match a.mirror {
        None => {}
        Some(MirrorChoice::Vertical) => plan.push(AugmentOp::Mirror(MirrorAxis::Vertical)),
        Some(MirrorChoice::Horizontal) => plan.push(AugmentOp::Mirror(MirrorAxis::Horizontal)),
        Some(MirrorChoice::Both) => {
            plan.push(AugmentOp::Mirror(MirrorAxis::Vertical));
            plan.push(AugmentOp::Mirror(MirrorAxis::Horizontal));
        }
    }
    let out = augment_dataset(&manifest, manifest_dir(&a.manifest), &plan, Interp::Nearest, &a.out)?;
    save_manifest(&out, &a.out.join("manifest.csv"))?;
    println!(
        "wrote {} rows ({} sources x {} ops) and manifest.csv to {}",
        out.len(),
        manifest.len(),
        plan.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs, seed: u64, deterministic: bool, quiet: bool) -> Result<()> {
    let cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        epochs: a.epochs,
        seed,
        arm: a.arm,
        model: a.model,
        scale: a.scale,
        ..TrainConfig::default()
    };
    if !quiet {
        println!(
            "config: cmd=train manifest={} arm={} model={} scale={} epochs={} lr={} momentum={} weight-decay={} batch={} metrics={} checkpoint={} seed={seed} deterministic={deterministic}",
            a.manifest.display(),
            cfg.arm,
            cfg.model,
            cfg.scale.token(),
            cfg.epochs,
            cfg.learning_rate,
            cfg.momentum,
            cfg.weight_decay,
            cfg.batch_size,
            a.metrics.as_deref().map_or("none".into(), |p| p.display().to_string()),
            a.checkpoint.as_deref().map_or("none".into(), |p| p.display().to_string()),
        );
    }
    let manifest = load_manifest(&a.manifest)?;
    let dir = manifest_dir(&a.manifest);
    let outcome = fit(&cfg, &manifest, dir)?;
    if !quiet {
        for rec in &outcome.history {
            println!(
                "epoch {}: train_loss={} val_loss={} val_acc={}",
                rec.epoch,
                format_sig(rec.train_loss, 6),
                format_sig(rec.val_loss, 6),
                format_sig(rec.val_acc, 6)
            );
        }
    }
    if let Some(path) = &a.metrics {
        if outcome.history.is_empty() {
            write_initial_summary_csv(&cfg, &manifest, dir, &outcome.best.weights, path)?;
        } else {
            export_metrics_csv(&outcome.history, path)?;
        }
    }
    if let Some(path) = &a.checkpoint {
        save_checkpoint(&outcome.best, path)?;
    }
    if outcome.history.is_empty() {
        println!("checkpointed initial weights (0 epochs trained)");
    } else {
        let best = &outcome.history[outcome.history.len() - 1];
        let chosen = outcome
            .history
            .iter()
            .find(|r| r.epoch == outcome.best.epoch)
            .unwrap_or(best);
        println!(
            "best epoch={}: val_loss={} val_acc={}",
            chosen.epoch,
            format_sig(chosen.val_loss, 6),
            format_sig(chosen.val_acc, 6)
        );
    }
    Ok(())
}

/// The `--epochs 0` metrics file: the header plus a summary row holding the
/// initial state's metrics (train column = infer-mode loss on the train
/// split), so the file shape matches a trained run's.
fn write_initial_summary_csv(
    cfg: &TrainConfig,
    manifest: &DatasetManifest,
    dir: &Path,
    weights: &nigra_core::model::WeightStore,
    path: &Path,
) -> Result<()> {
    let spec = cfg.model.build(cfg.arm.num_classes(), cfg.scale)?;
    let net = Network::from_weights(spec, weights)?;
    let input = net.spec().input_shape().clone();
    let train = load_split_tensors(manifest, dir, Split::Train, cfg.arm, &input)?;
    let val = load_split_tensors(manifest, dir, Split::Val, cfg.arm, &input)?;
    let (train_loss, _) = evaluate(&net, &train)?;
    let (val_loss, val_acc) = evaluate(&net, &val)?;
    let text = format!(
        "epoch,train_loss,val_loss,val_acc\nbest,{},{},{}\n",
        format_sig(train_loss, 6),
        format_sig(val_loss, 6),
        format_sig(val_acc, 6)
    );
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn cmd_eval(a: EvalArgs, seed: u64, deterministic: bool, quiet: bool) -> Result<()> {
    if !quiet {
        println!(
            "config: cmd=eval manifest={} split={} checkpoint={} seed={seed} deterministic={deterministic}",
            a.manifest.display(),
            a.split.as_str(),
            a.checkpoint.display(),
        );
    }
    let ckpt = load_checkpoint(&a.checkpoint)?;
    let cfg = &ckpt.config;
    let spec = cfg.model.build(cfg.arm.num_classes(), cfg.scale)?;
    let net = Network::from_weights(spec, &ckpt.weights)?;
    let manifest = load_manifest(&a.manifest)?;
    let data = load_split_tensors(
        &manifest,
        manifest_dir(&a.manifest),
        a.split,
        cfg.arm,
        net.spec().input_shape(),
    )?;
    let (loss, acc) = evaluate(&net, &data)?;
    println!("loss={} acc={acc:.2}", format_sig(loss, 6));
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs, seed: u64, deterministic: bool, quiet: bool) -> Result<()> {
    if !quiet {
        println!(
            "config: cmd=gradcheck layer={} trials={} tol={:e} seed={seed} deterministic={deterministic}",
            a.layer.token(),
            a.trials,
            a.tol,
        );
    }
    let mut failed = 0usize;
    let kinds = a.layer.kinds();
    for kind in &kinds {
        let report = grad_check_suite(*kind, a.trials, seed, a.tol)?;
        println!(
            "layer={} configs={} checked={} max_rel_err={:.3e} tol={:.1e} status={}",
            report.layer,
            report.configs,
            report.checked,
            report.max_rel_err,
            report.tolerance,
            if report.pass { "pass" } else { "fail" }
        );
        if !report.pass {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(Error::train(format!(
            "gradient check failed for {failed} of {} layers",
            kinds.len()
        )));
    }
    println!("gradcheck: all {} layers pass", kinds.len());
    Ok(())
}
