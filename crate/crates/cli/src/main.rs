//! `cellsynth`: prepare training data, train the denoiser and the flow
//! network, generate annotated sequences, evaluate them and sweep the
//! step-count grid.
//!
//! Exit codes: 0 on success, 1 when arguments or config are invalid, 2 when
//! a run fails.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use cellsynth::ablation::{run_ablation, AblationGrid};
use cellsynth::checkpoint::{file_sha256, save_denoiser, save_flow};
use cellsynth::config::{
    load_config, resolve_training_config, ConfigErrors, Network, Overrides, TrainingConfig, TrainingOverrides,
};
use cellsynth::diffusion::{ScheduleSpec, TrainReport};
use cellsynth::manifest::RunManifest;
use cellsynth::metrics::EmbedderRegistry;
use cellsynth::pipeline::{
    evaluate, format_report, load_reference_frames, load_training_data, prepare_data, run_generation_with,
    train_denoiser, train_flow, MetricSelection, Models, PipelineError,
};
use cellsynth::seed::derive_seed;
use cellsynth::toy::{write_toy_dataset, ToySequence};
use clap::{Args, Parser, Subcommand};

/// Rejected input, reported with exit code 1.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct Invalid(String);

#[derive(Parser)]
#[command(name = "cellsynth", version, about = "Synthetic annotated live-cell video")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the shape model and intensity scaling of an annotated sequence.
    PrepareData(PrepareArgs),
    /// Train the denoising network on cell crops.
    TrainDdpm(TrainArgs),
    /// Train the flow network on consecutive mask pairs.
    TrainFpm(TrainArgs),
    /// Generate annotated sequences from a config file.
    Generate(GenerateArgs),
    /// Score a predicted sequence against a ground-truth one.
    Evaluate(EvaluateArgs),
    /// Generate and score every (first-frame, later-frame) step pair.
    Ablate(AblateArgs),
    /// Write a small procedural annotated sequence.
    MakeToyData(ToyArgs),
}

#[derive(Args)]
struct PrepareArgs {
    /// Sequence directory (or its parent).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Output directory for shape_model.json and normalization.json.
    #[arg(long, default_value = "prepared")]
    out: PathBuf,
    #[arg(long)]
    crop_size: Option<usize>,
    /// Config file whose [training] section supplies defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: Option<PathBuf>,
    /// Checkpoint to write (default ddpm.ckpt or fpm.ckpt).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    crop_size: Option<usize>,
    #[arg(long)]
    base_width: Option<usize>,
    #[arg(long)]
    levels: Option<usize>,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    t_first: Option<usize>,
    #[arg(long)]
    t_later: Option<usize>,
    #[arg(long)]
    num_sequences: Option<usize>,
    /// Validate the config and load the models without generating.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    gt: PathBuf,
    #[arg(long)]
    pred: PathBuf,
    /// Comma-separated subset of seg,tra,fid,fvd.
    #[arg(long, default_value = "seg,tra,fid,fvd")]
    metrics: String,
    #[arg(long, default_value = "downsample-flatten")]
    embedder: String,
    #[arg(long, default_value = "clip-downsample")]
    video_embedder: String,
    /// Write `key = value` lines here and a JSON copy next to it.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Real sequence for the Fréchet distances (default paths.reference_data).
    #[arg(long)]
    reference: Option<PathBuf>,
    /// Output directory (default <paths.output>/ablation).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    t_first: Option<Vec<usize>>,
    #[arg(long, value_delimiter = ',')]
    t_later: Option<Vec<usize>>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 10)]
    frames: usize,
    #[arg(long, default_value_t = 128)]
    width: usize,
    #[arg(long, default_value_t = 96)]
    height: usize,
    #[arg(long, default_value_t = 6)]
    cells: usize,
    #[arg(long, default_value_t = 6.0)]
    radius: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &anyhow::Error) -> u8 {
    let invalid = e.chain().any(|c| {
        c.is::<Invalid>() || c.is::<ConfigErrors>() || matches!(c.downcast_ref::<PipelineError>(), Some(PipelineError::Config(_)))
    });
    if invalid {
        1
    } else {
        2
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::PrepareData(a) => prepare(a),
        Command::TrainDdpm(a) => train(a, Network::Ddpm),
        Command::TrainFpm(a) => train(a, Network::Fpm),
        Command::Generate(a) => generate(a),
        Command::Evaluate(a) => evaluate_cmd(a),
        Command::Ablate(a) => ablate(a),
        Command::MakeToyData(a) => make_toy(a),
    }
}

fn dataset_of(t: &TrainingConfig) -> Result<PathBuf> {
    t.data
        .clone()
        .ok_or_else(|| Invalid("no dataset given: pass --data or set training.data".into()).into())
}

fn prepare(a: PrepareArgs) -> Result<()> {
    let overrides = TrainingOverrides {
        data: a.data,
        crop_size: a.crop_size,
        ..Default::default()
    };
    let training = resolve_training_config(a.config.as_deref(), Network::Ddpm, &overrides)?;
    let dataset = dataset_of(&training)?;
    let mut manifest = RunManifest::new("prepare-data", serde_json::to_value(&training)?);
    let data = manifest.time("load", || load_training_data(&dataset, training.crop_size))?;
    let prepared = manifest.time("fit", || prepare_data(&data, &a.out))?;
    println!(
        "{} crops ({} skipped), {} mask pairs ({} skipped), {} shape modes ({} retained)",
        prepared.crops, prepared.skipped_crops, prepared.pairs, prepared.skipped_pairs, prepared.shape_modes, prepared.retained_modes
    );
    manifest.outputs = serde_json::to_value(&prepared)?;
    manifest.append_to(&a.out).context("writing manifest")?;
    Ok(())
}

fn write_losses(path: &Path, report: &TrainReport) -> Result<()> {
    let text: String = std::iter::once("iteration,loss\n".to_string())
        .chain(report.losses.iter().enumerate().map(|(i, l)| format!("{},{l}\n", i + 1)))
        .collect();
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn train(a: TrainArgs, network: Network) -> Result<()> {
    let overrides = TrainingOverrides {
        data: a.data,
        crop_size: a.crop_size,
        seed: a.seed,
        iters: a.iters,
        batch: a.batch,
        lr: a.lr,
        base_width: a.base_width,
        levels: a.levels,
    };
    let training = resolve_training_config(a.config.as_deref(), network, &overrides)?;
    let dataset = dataset_of(&training)?;
    let (name, stage) = match network {
        Network::Ddpm => ("train-ddpm", "ddpm"),
        Network::Fpm => ("train-fpm", "fpm"),
    };
    let out = a.out.unwrap_or_else(|| PathBuf::from(format!("{stage}.ckpt")));
    let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_path_buf();
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;

    let mut manifest = RunManifest::new(name, serde_json::to_value(&training)?);
    manifest.seeds.insert("master".into(), training.seed);
    manifest.seeds.insert(format!("{stage}-init"), derive_seed(training.seed, &format!("{stage}-init"), 0));
    manifest.seeds.insert(format!("{stage}-train"), derive_seed(training.seed, &format!("{stage}-train"), 0));
    let data = manifest.time("load", || load_training_data(&dataset, training.crop_size))?;
    let report = match network {
        Network::Ddpm => {
            log::info!("training denoiser on {} crops", data.images.len());
            let (net, meta, report) = manifest.time("train", || train_denoiser(&data, &training, ScheduleSpec::default()))?;
            save_denoiser(&out, &net, &meta)?;
            report
        }
        Network::Fpm => {
            log::info!("training flow network on {} mask pairs", data.pairs.len());
            let (net, meta, report) = manifest.time("train", || train_flow(&data, &training))?;
            save_flow(&out, &net, &meta)?;
            report
        }
    };
    let losses = out.with_extension("losses.csv");
    write_losses(&losses, &report)?;
    let hash = file_sha256(&out)?;
    manifest.checkpoint_hashes.insert(stage.into(), hash.clone());
    manifest.outputs = serde_json::json!({
        "checkpoint": out,
        "losses": losses,
        "initial_loss": report.head_mean(50),
        "final_loss": report.tail_mean(50),
        "diverged": report.diverged,
    });
    manifest.append_to(&dir).context("writing manifest")?;
    if report.diverged {
        log::warn!("training loss rose; the checkpoint was written anyway");
    }
    println!(
        "{}: loss {:.4} -> {:.4}, sha256 {hash}",
        out.display(),
        report.head_mean(50),
        report.tail_mean(50)
    );
    Ok(())
}

fn generate(a: GenerateArgs) -> Result<()> {
    let overrides = Overrides {
        seed: a.seed,
        output: a.output,
        t_first: a.t_first,
        t_later: a.t_later,
        num_sequences: a.num_sequences,
    };
    let config = load_config(&a.config, &overrides)?;
    let models = Models::load(
        &config.paths.ddpm_checkpoint,
        &config.paths.fpm_checkpoint,
        &config.paths.shape_model,
    )?;
    let g = &config.generation;
    let per_sequence = g.num_cells * (g.t_first + (g.length - 1) * g.t_later);
    if a.dry_run {
        println!("{}", serde_json::to_string_pretty(&config)?);
        println!(
            "would write {} sequence(s) to {}, {per_sequence} denoiser evaluations each",
            g.num_sequences,
            config.paths.output.display()
        );
        return Ok(());
    }
    let summary = run_generation_with(&models, &config)?;
    for (seq, evals) in summary.sequences.iter().zip(&summary.denoiser_evaluations) {
        println!("{}: {evals} denoiser evaluations", seq.display());
    }
    Ok(())
}

fn evaluate_cmd(a: EvaluateArgs) -> Result<()> {
    let metrics = MetricSelection::parse(&a.metrics).map_err(Invalid)?;
    let registry = EmbedderRegistry::with_builtins();
    for id in [&a.embedder, &a.video_embedder] {
        if registry.get(id).is_err() {
            return Err(Invalid(format!("unknown embedder `{id}`; available: {}", registry.ids().collect::<Vec<_>>().join(", "))).into());
        }
    }
    let mut manifest = RunManifest::new(
        "evaluate",
        serde_json::json!({
            "gt": a.gt,
            "pred": a.pred,
            "metrics": a.metrics,
            "embedder": a.embedder,
            "video_embedder": a.video_embedder,
        }),
    );
    let report = manifest.time("evaluate", || evaluate(&a.gt, &a.pred, &metrics, &a.embedder, &a.video_embedder, &registry))?;
    let text = format_report(&report);
    print!("{text}");
    if let Some(out) = &a.out {
        let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir)?;
        fs::write(out, &text).with_context(|| format!("writing {}", out.display()))?;
        let json = out.with_extension("json");
        fs::write(&json, serde_json::to_string_pretty(&report)?).with_context(|| format!("writing {}", json.display()))?;
        manifest.outputs = serde_json::to_value(&report)?;
        manifest.append_to(dir).context("writing manifest")?;
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let overrides = Overrides {
        seed: a.seed,
        ..Default::default()
    };
    let config = load_config(&a.config, &overrides)?;
    let paper = AblationGrid::paper();
    let grid = AblationGrid {
        t_first: a.t_first.unwrap_or(paper.t_first),
        t_later: a.t_later.unwrap_or(paper.t_later),
    };
    let steps = config.generation.diffusion_steps;
    for &f in &grid.t_first {
        if f == 0 || f > steps {
            return Err(Invalid(format!("--t-first values must be in 1..={steps}, got {f}")).into());
        }
    }
    if let Some(&l) = grid.t_later.iter().find(|&&l| l > steps) {
        return Err(Invalid(format!("--t-later values must be at most {steps}, got {l}")).into());
    }
    let models = Models::load(
        &config.paths.ddpm_checkpoint,
        &config.paths.fpm_checkpoint,
        &config.paths.shape_model,
    )?;
    let reference = match a.reference.or_else(|| config.paths.reference_data.clone()) {
        Some(path) => Some(load_reference_frames(&path)?),
        None => {
            log::info!("no reference sequence: FID and FVD are skipped");
            None
        }
    };
    let out = a.out.unwrap_or_else(|| config.paths.output.join("ablation"));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;

    let mut manifest = RunManifest::new("ablate", serde_json::to_value(&config)?);
    manifest.seeds.insert("master".into(), config.generation.seed);
    manifest.checkpoint_hashes = models.hashes.clone();
    let registry = EmbedderRegistry::with_builtins();
    let report = manifest.time("grid", || {
        run_ablation(&models, &config.generation, &config.scene, &grid, reference.as_deref(), &registry)
    });
    for row in &report.rows {
        manifest
            .denoiser_evaluations
            .insert(format!("{}_{}", row.t_first, row.t_later), row.denoiser_evaluations);
    }
    let text = report.format_text();
    print!("{text}");
    fs::write(out.join("ablation.txt"), &text)?;
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&report)?)?;
    manifest.outputs = serde_json::json!({ "table": out.join("ablation.txt"), "rows": out.join("ablation.json") });
    manifest.append_to(&out).context("writing manifest")?;
    let failed = report.rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        anyhow::bail!("{failed} of {} grid cells failed", report.rows.len());
    }
    Ok(())
}

fn make_toy(a: ToyArgs) -> Result<()> {
    if a.frames == 0 || a.cells == 0 || a.width == 0 || a.height == 0 || a.radius <= 0.0 {
        return Err(Invalid("frames, cells, width, height and radius must be positive".into()).into());
    }
    let spec = ToySequence {
        frames: a.frames,
        width: a.width,
        height: a.height,
        cells: a.cells,
        cell_radius: a.radius,
        seed: a.seed,
    };
    let seq = write_toy_dataset(&a.out, &spec)?;
    let mut manifest = RunManifest::new(
        "make-toy-data",
        serde_json::json!({
            "frames": a.frames,
            "width": a.width,
            "height": a.height,
            "cells": a.cells,
            "radius": a.radius,
        }),
    );
    manifest.seeds.insert("master".into(), a.seed);
    manifest.outputs = serde_json::json!({ "sequence": seq });
    manifest.append_to(&a.out).context("writing manifest")?;
    println!("{}", seq.display());
    Ok(())
}
