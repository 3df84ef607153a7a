//! `flowedit`: dataset generation, toy training, editing and studies.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use flowedit_core::control::AttentionMode;
use flowedit_core::flow::SolverKind;
use flowedit_core::harness::data::generate_dataset;
use flowedit_core::harness::image_io::save_png;
use flowedit_core::harness::runs::{
    execute_edit, execute_reconstruct, execute_study, format_report, report, rerun, write_json, EditRunConfig,
    ImageSource, MetricsFile, StudyConfig, StudyKind,
};
use flowedit_core::harness::train::{train_to_checkpoint, TrainConfig};
use flowedit_core::mask::EditMask;
use flowedit_core::Error;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_MISSING_CHECKPOINT: u8 = 3;
const EXIT_BAD_CONFIG: u8 = 4;

#[derive(Parser)]
#[command(name = "flowedit", version, about = "Training-free text-driven editing on a toy flow-matching transformer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a captioned shapes dataset to PNG files.
    GenData(GenDataArgs),
    /// Train the toy model and write a checkpoint.
    Train(TrainArgs),
    /// Invert an image and re-sample it under its own prompt.
    Reconstruct(EditArgs),
    /// Edit an image from a source prompt to a target prompt.
    Edit(EditArgs),
    /// Compare the pipeline with each module switched on and off.
    Ablate(StudyArgs),
    /// Compare attention feature combinations.
    Sweep(StudyArgs),
    /// Compare the full pipeline against global V injection and no injection.
    Compare(StudyArgs),
    /// Aggregate completed run directories into one table.
    Report(ReportArgs),
    /// Repeat a run directory from its saved config.
    Rerun(RerunArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 64)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    /// JSON training config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dataset_size: Option<usize>,
    /// Checkpoint path; the loss curve and summary are written beside it.
    #[arg(long, default_value = "checkpoints/shapes-toy.safetensors")]
    out: PathBuf,
}

/// Pipeline flags shared by single edits and studies.
#[derive(Args, Default)]
struct PipelineFlags {
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Attention combination taken from the source pass: V, QV, QKV or KV.
    #[arg(long)]
    mode: Option<AttentionMode>,
    #[arg(long, value_parser = parse_solver)]
    solver: Option<SolverKind>,
    /// Latent-shift noise seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    no_kvmix: bool,
    #[arg(long)]
    no_latents_shift: bool,
    /// Injection used when the masked blend is off, or "none".
    #[arg(long)]
    baseline_mode: Option<String>,
    /// Comma-separated sampling steps to control (default: all).
    #[arg(long, value_delimiter = ',')]
    active_steps: Option<Vec<usize>>,
    /// Comma-separated source words defining the mask.
    #[arg(long, value_delimiter = ',')]
    edit_words: Option<Vec<String>>,
}

#[derive(Args)]
struct EditArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Source image (PNG, 32x32 RGB).
    #[arg(long, conflicts_with = "index")]
    image: Option<PathBuf>,
    /// Use sample INDEX of the generated dataset as the source image.
    #[arg(long)]
    index: Option<usize>,
    #[arg(long)]
    dataset_seed: Option<u64>,
    #[arg(long)]
    source_prompt: Option<String>,
    #[arg(long)]
    target_prompt: Option<String>,
    /// Edit mask PNG at patch or pixel resolution.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long)]
    save_cache: bool,
    #[arg(long)]
    reconstruct: bool,
    #[command(flatten)]
    pipeline: PipelineFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StudyArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    cases: Option<usize>,
    #[arg(long)]
    case_seed: Option<u64>,
    /// Comma-separated latent-shift noise seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated attention combinations (sweep only).
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<AttentionMode>>,
    #[arg(long)]
    no_images: bool,
    #[command(flatten)]
    pipeline: PipelineFlags,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directories to aggregate.
    #[arg(required = true)]
    runs: Vec<PathBuf>,
    /// Aggregate runs made with different checkpoints.
    #[arg(long)]
    allow_mixed_checkpoints: bool,
    /// Also write the table to this file.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct RerunArgs {
    run: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn parse_solver(s: &str) -> std::result::Result<SolverKind, String> {
    s.parse::<SolverKind>().map_err(|e| e.to_string())
}

/// Failure carrying its process exit code.
#[derive(Debug)]
struct Exit(u8, anyhow::Error);

fn bad_config(e: impl Into<anyhow::Error>) -> Exit {
    Exit(EXIT_BAD_CONFIG, e.into())
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> std::result::Result<T, Exit> {
    let Some(path) = path else {
        return Ok(T::default());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config {}", path.display()))
        .map_err(bad_config)?;
    serde_json::from_str(&text)
        .with_context(|| format!("malformed config {}", path.display()))
        .map_err(bad_config)
}

fn require_checkpoint(path: &Path) -> std::result::Result<(), Exit> {
    if !path.is_file() {
        return Err(Exit(
            EXIT_MISSING_CHECKPOINT,
            anyhow::anyhow!("checkpoint {} not found; run `flowedit train` first", path.display()),
        ));
    }
    Ok(())
}

fn apply_pipeline(flags: &PipelineFlags, cfg: &mut flowedit_core::EditConfig) -> std::result::Result<(), Exit> {
    if let Some(v) = flags.steps {
        cfg.num_steps = v;
    }
    if let Some(v) = flags.delta {
        cfg.delta = v;
    }
    if let Some(v) = flags.beta {
        cfg.beta = v;
    }
    if let Some(v) = flags.mode {
        cfg.schedule.mode = v;
    }
    if let Some(v) = flags.solver {
        cfg.solver = v;
    }
    if let Some(v) = flags.seed {
        cfg.noise_seed = v;
    }
    if flags.no_kvmix {
        cfg.kvmix = false;
    }
    if flags.no_latents_shift {
        cfg.latents_shift = false;
    }
    if let Some(m) = &flags.baseline_mode {
        cfg.baseline_mode = match m.to_ascii_lowercase().as_str() {
            "none" => None,
            other => Some(other.parse().map_err(|e: Error| Exit(EXIT_USAGE, e.into()))?),
        };
    }
    if let Some(v) = &flags.active_steps {
        cfg.schedule.active_steps = Some(v.clone());
    }
    if let Some(v) = &flags.edit_words {
        cfg.edit_words = Some(v.clone());
    }
    cfg.validate().map_err(bad_config)
}

fn classify(e: Error) -> Exit {
    match e.root() {
        Error::Checkpoint { .. } => Exit(EXIT_MISSING_CHECKPOINT, e.into()),
        _ => Exit(EXIT_FAILURE, e.into()),
    }
}

fn print_metrics(out: &Path, m: &MetricsFile) {
    println!("{}", flowedit_core::harness::experiments::format_table(&m.rows));
    println!("run directory: {}", out.display());
}

fn gen_data(args: GenDataArgs) -> std::result::Result<(), Exit> {
    let io = |e: std::io::Error| Exit(EXIT_FAILURE, e.into());
    std::fs::create_dir_all(args.out.join("images")).map_err(io)?;
    std::fs::create_dir_all(args.out.join("masks")).map_err(io)?;
    let samples = generate_dataset(args.n, args.seed);
    let mut captions = String::new();
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:05}.png");
        save_png(&s.latent().map_err(classify)?, &args.out.join("images").join(&name)).map_err(classify)?;
        EditMask::from_tokens(s.mask.clone(), (32, 32))
            .and_then(|m| m.save_png(&args.out.join("masks").join(&name), 1))
            .map_err(classify)?;
        captions.push_str(
            &serde_json::json!({"file": name, "caption": s.caption, "attributes": s.attributes}).to_string(),
        );
        captions.push('\n');
    }
    std::fs::write(args.out.join("captions.jsonl"), captions).map_err(io)?;
    let manifest = serde_json::json!({
        "n": args.n,
        "seed": args.seed,
        "dataset_hash": flowedit_core::harness::data::dataset_hash(&samples),
    });
    write_json(&args.out.join("manifest.json"), &manifest).map_err(classify)?;
    println!("wrote {} samples to {}", args.n, args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> std::result::Result<(), Exit> {
    let mut cfg: TrainConfig = load_config(args.config.as_deref())?;
    if let Some(v) = args.steps {
        cfg.steps = v;
    }
    if let Some(v) = args.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.dataset_size {
        cfg.dataset_size = v;
    }
    let summary = train_to_checkpoint(&cfg, &args.out, |p| {
        eprintln!("step {:>5}  train {:.4}  eval {:.4}", p.step, p.train_loss, p.eval_loss);
    })
    .map_err(classify)?;
    println!(
        "checkpoint {} ({} parameters), eval loss {:.4} -> {:.4}, sha256 {}",
        args.out.display(),
        summary.parameter_count,
        summary.initial_eval_loss,
        summary.final_eval_loss,
        summary.checkpoint_hash
    );
    Ok(())
}

fn edit_config(args: &EditArgs) -> std::result::Result<EditRunConfig, Exit> {
    let mut cfg: EditRunConfig = load_config(args.config.as_deref())?;
    if let Some(v) = &args.checkpoint {
        cfg.checkpoint = v.clone();
    }
    if let Some(p) = &args.image {
        cfg.image = ImageSource::Png(p.clone());
    }
    if args.index.is_some() || args.dataset_seed.is_some() {
        let (seed0, index0) = match cfg.image {
            ImageSource::Dataset { seed, index } => (seed, index),
            ImageSource::Png(_) => (1000, 0),
        };
        cfg.image = ImageSource::Dataset {
            seed: args.dataset_seed.unwrap_or(seed0),
            index: args.index.unwrap_or(index0),
        };
    }
    if let Some(v) = &args.source_prompt {
        cfg.source_prompt = Some(v.clone());
    }
    if let Some(v) = &args.target_prompt {
        cfg.target_prompt = Some(v.clone());
    }
    if let Some(v) = &args.mask {
        cfg.mask = Some(v.clone());
    }
    cfg.save_cache |= args.save_cache;
    cfg.edit.reconstruct |= args.reconstruct;
    apply_pipeline(&args.pipeline, &mut cfg.edit)?;
    require_checkpoint(&cfg.checkpoint)?;
    Ok(cfg)
}

fn study_config(args: &StudyArgs, kind: StudyKind) -> std::result::Result<StudyConfig, Exit> {
    let mut cfg: StudyConfig = load_config(args.config.as_deref())?;
    cfg.kind = kind;
    if let Some(v) = &args.checkpoint {
        cfg.checkpoint = v.clone();
    }
    if let Some(v) = args.cases {
        cfg.num_cases = v;
    }
    if let Some(v) = args.case_seed {
        cfg.case_seed = v;
    }
    if let Some(v) = &args.seeds {
        cfg.seeds = v.clone();
    }
    if let Some(v) = &args.modes {
        cfg.modes = v.clone();
    }
    if args.no_images {
        cfg.save_images = false;
    }
    apply_pipeline(&args.pipeline, &mut cfg.edit)?;
    require_checkpoint(&cfg.checkpoint)?;
    Ok(cfg)
}

fn study(args: StudyArgs, kind: StudyKind) -> std::result::Result<(), Exit> {
    let cfg = study_config(&args, kind)?;
    let m = execute_study(&cfg, &args.out).map_err(classify)?;
    print_metrics(&args.out, &m);
    Ok(())
}

fn run(cli: Cli) -> std::result::Result<(), Exit> {
    match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Reconstruct(a) => {
            let cfg = edit_config(&a)?;
            let m = execute_reconstruct(&cfg, &a.out).map_err(classify)?;
            print_metrics(&a.out, &m);
            Ok(())
        }
        Command::Edit(a) => {
            let cfg = edit_config(&a)?;
            if cfg.target_prompt.is_none() {
                return Err(Exit(EXIT_USAGE, anyhow::anyhow!("edit needs --target-prompt (or target_prompt in the config)")));
            }
            let m = execute_edit(&cfg, &a.out).map_err(classify)?;
            print_metrics(&a.out, &m);
            Ok(())
        }
        Command::Ablate(a) => study(a, StudyKind::Ablate),
        Command::Sweep(a) => study(a, StudyKind::Sweep),
        Command::Compare(a) => study(a, StudyKind::Compare),
        Command::Report(a) => {
            let rows = report(&a.runs, a.allow_mixed_checkpoints).map_err(classify)?;
            let table = format_report(&rows);
            print!("{table}");
            if let Some(out) = a.out {
                std::fs::write(&out, table).map_err(|e| Exit(EXIT_FAILURE, e.into()))?;
            }
            Ok(())
        }
        Command::Rerun(a) => {
            let m = rerun(&a.run, &a.out).map_err(|e| match e.root() {
                Error::Json(_) => bad_config(e),
                _ => classify(e),
            })?;
            print_metrics(&a.out, &m);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Exit(code, err)) => {
            eprintln!("error: {err:#}");
            ExitCode::from(code)
        }
    }
}
