use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use dualseg::data::{load_dataset, png_io, read_registry, synth_generate, Split, SynthConfig};
use dualseg::fusion::{ClassEntry, FusionRule, Head, LabelRegistry};
use dualseg::harness::checkpoint::check_registries;
use dualseg::harness::evaluate::fuse_sample;
use dualseg::harness::{ablate_losses, evaluate, infer_overlay, train, Checkpoint, EvalMode, EvalOptions, TrainConfig};

#[derive(Parser)]
#[command(name = "dualseg", version, about = "Dual-head segmentation: synthesize, train, evaluate, fuse")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset folder.
    Synth(SynthArgs),
    /// Train one model instance.
    Train(TrainArgs),
    /// Score checkpoints on a dataset split.
    Eval(EvalArgs),
    /// Write fused global masks for every frame of a split.
    Fuse(FuseArgs),
    /// Fused mask and colour overlay for one image.
    Overlay(OverlayArgs),
    /// Compare Tversky, cross-entropy and combined losses over seeds.
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 200)]
    train: usize,
    #[arg(long, default_value_t = 50)]
    val: usize,
    #[arg(long, default_value_t = 0)]
    test: usize,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 2)]
    anatomy_classes: usize,
    #[arg(long, default_value_t = 2)]
    tool_classes: usize,
    /// Class manifest to use instead of generated class names.
    #[arg(long)]
    classes: Option<PathBuf>,
}

/// Flags that override keys of the training config file.
#[derive(Args)]
struct TrainOverrides {
    /// TOML training config; keys not given fall back to defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    instance: Option<Head>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl TrainOverrides {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::default(),
        };
        if let Some(v) = &self.dataset {
            cfg.dataset_root = v.clone();
        }
        if let Some(v) = &self.output {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.instance {
            cfg.instance = v;
        }
        if let Some(v) = &self.variant {
            cfg.variant = v.clone();
        }
        if let Some(v) = self.embed_dim {
            cfg.embed_dim = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(v) = self.lr {
            cfg.lr_base = v;
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: TrainOverrides,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "val")]
    split: Split,
    #[arg(long, default_value = "fused")]
    mode: EvalMode,
    /// Anatomy checkpoint directory.
    #[arg(long)]
    anatomy: Option<PathBuf>,
    /// Tool checkpoint directory.
    #[arg(long)]
    tool: Option<PathBuf>,
    #[arg(long, default_value = "priority")]
    rule: String,
    /// Morphological refinement radius after fusion.
    #[arg(long)]
    refine: Option<usize>,
    #[arg(long)]
    exclude_background: bool,
    /// Writes `<out>.json` and `<out>.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long, default_value = "val")]
    split: Split,
    #[arg(long)]
    anatomy: PathBuf,
    #[arg(long)]
    tool: PathBuf,
    #[arg(long)]
    refine: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct OverlayArgs {
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    anatomy: PathBuf,
    #[arg(long)]
    tool: PathBuf,
    #[arg(long)]
    refine: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    overrides: TrainOverrides,
    /// Comma-separated seeds.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
    seeds: Vec<u64>,
}

fn parse_rule(s: &str) -> Result<FusionRule> {
    match s {
        "priority" => Ok(FusionRule::Priority),
        "plain_or" => Ok(FusionRule::PlainOr),
        _ => bail!(dualseg::Error::Config(format!("unknown fusion rule {s:?}"))),
    }
}

fn load_checkpoint(dir: &Path, head: Head) -> Result<Checkpoint<f32>> {
    let c = Checkpoint::<f32>::load(dir).with_context(|| format!("loading {}", dir.display()))?;
    if c.model.spec.head != head {
        bail!(dualseg::Error::Config(format!(
            "{} holds a {} model, expected {head}",
            dir.display(),
            c.model.spec.head
        )));
    }
    Ok(c)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<serde_json::Value> {
    let registry = match &a.classes {
        Some(p) => {
            let entries: Vec<ClassEntry> = serde_json::from_str(&fs::read_to_string(p)?)?;
            LabelRegistry::from_entries(&entries)?
        }
        None => LabelRegistry::synthetic(a.anatomy_classes, a.tool_classes),
    };
    let cfg = SynthConfig {
        seed: a.seed,
        train: a.train,
        val: a.val,
        test: a.test,
        size: a.size,
    };
    synth_generate(&a.out, &cfg, &registry)?;
    Ok(serde_json::json!({ "dataset": a.out, "config": cfg }))
}

fn run_train(a: TrainArgs) -> Result<serde_json::Value> {
    let cfg = a.overrides.resolve()?;
    let outcome = train(&cfg, |e| println!("{}", serde_json::to_string(e).unwrap_or_default()))?;
    Ok(serde_json::json!({
        "output": cfg.output_dir,
        "best_epoch": outcome.best_epoch,
        "steps": outcome.steps,
    }))
}

fn run_eval(a: EvalArgs) -> Result<serde_json::Value> {
    let registry = read_registry(&a.dataset)?;
    let heads: &[Head] = match a.mode {
        EvalMode::Anatomy => &[Head::Anatomy],
        EvalMode::Tool => &[Head::Tool],
        EvalMode::Fused => &[Head::Anatomy, Head::Tool],
    };
    let need = |head: Head, p: &Option<PathBuf>| -> Result<Option<Checkpoint<f32>>> {
        match p {
            Some(dir) if heads.contains(&head) => Ok(Some(load_checkpoint(dir, head)?)),
            None if heads.contains(&head) => bail!(dualseg::Error::Config(format!("--{head} checkpoint required"))),
            _ => Ok(None),
        }
    };
    let anat = need(Head::Anatomy, &a.anatomy)?;
    let tool = need(Head::Tool, &a.tool)?;
    let loaded: Vec<&Checkpoint<f32>> = anat.iter().chain(tool.iter()).collect();
    check_registries(&registry, &loaded)?;

    let samples = load_dataset::<f32>(&a.dataset, a.split, &registry, heads)?;
    let opts = EvalOptions {
        mode: a.mode,
        rule: parse_rule(&a.rule)?,
        refine_radius: a.refine,
        include_background: !a.exclude_background,
    };
    let report = evaluate(
        anat.as_ref().map(|c| &c.model as _),
        tool.as_ref().map(|c| &c.model as _),
        &samples,
        &registry,
        &opts,
    )?;
    if let Some(out) = &a.out {
        write_text(&out.with_extension("json"), &serde_json::to_string_pretty(&report)?)?;
        write_text(&out.with_extension("csv"), &report.to_csv())?;
    }
    Ok(serde_json::to_value(&report)?)
}

fn run_fuse(a: FuseArgs) -> Result<serde_json::Value> {
    let registry = read_registry(&a.dataset)?;
    let anat = load_checkpoint(&a.anatomy, Head::Anatomy)?;
    let tool = load_checkpoint(&a.tool, Head::Tool)?;
    check_registries(&registry, &[&anat, &tool])?;
    let samples = load_dataset::<f32>(&a.dataset, a.split, &registry, &[])?;
    fs::create_dir_all(&a.out)?;
    let palette = registry.global_palette();
    for s in &samples {
        let fused = fuse_sample(&anat.model, &tool.model, s, &registry, FusionRule::Priority, a.refine)?;
        png_io::write_mask(&a.out.join(format!("{}.png", s.id)), &fused, &palette)?;
    }
    Ok(serde_json::json!({ "frames": samples.len(), "out": a.out }))
}

fn run_overlay(a: OverlayArgs) -> Result<serde_json::Value> {
    let anat = load_checkpoint(&a.anatomy, Head::Anatomy)?;
    let tool = load_checkpoint(&a.tool, Head::Tool)?;
    check_registries(&anat.registry, &[&tool])?;
    let meta = infer_overlay(&anat.model, &tool.model, &anat.registry, &a.image, &a.out, a.refine)?;
    Ok(serde_json::to_value(meta)?)
}

fn run_ablate(a: AblateArgs) -> Result<serde_json::Value> {
    let cfg = a.overrides.resolve()?;
    let report = ablate_losses(&cfg, &a.seeds, |arm, seed, miou| {
        eprintln!("{arm} seed {seed}: val mIoU {miou:.4}");
    })?;
    fs::create_dir_all(&cfg.output_dir)?;
    write_text(&cfg.output_dir.join("ablation.json"), &serde_json::to_string_pretty(&report)?)?;
    write_text(&cfg.output_dir.join("ablation.csv"), &report.to_csv())?;
    Ok(serde_json::to_value(&report)?)
}

fn run(cli: Cli) -> Result<serde_json::Value> {
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => run_train(a),
        Command::Eval(a) => run_eval(a),
        Command::Fuse(a) => run_fuse(a),
        Command::Overlay(a) => run_overlay(a),
        Command::Ablate(a) => run_ablate(a),
    }
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<dualseg::Error>())
        .map(dualseg::Error::kind)
        .or_else(|| e.chain().find_map(|c| c.downcast_ref::<std::io::Error>()).map(|_| "io"))
        .unwrap_or("other")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let msg = serde_json::json!({ "error": error_kind(&e), "message": format!("{e:#}") });
            eprintln!("{msg}");
            ExitCode::FAILURE
        }
    }
}
