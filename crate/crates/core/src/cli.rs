//! Command-line surface: `train`, `eval`, `sample` and `interp-grid`.
//!
//! A training run directory has a fixed layout:
//!
//! ```text
//! <out>/ckpt/step_NNNNNN.mixdl
//! <out>/trace.jsonl
//! <out>/snapshots/
//! <out>/reports/
//! ```

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{self, Checkpoint};
use crate::config::{RunConfig, OUTPUT_ENV};
use crate::data::{make_synthetic_fewshot, FewShotDataset};
use crate::error::{MixdlError, Result};
use crate::imaging::{save_grid, Image};
use crate::metrics::{evaluate_generator, parse_metric_list, sample_latents, GeneratorPaths, PathGenerator};
use crate::mixup::LatentSpace;
use crate::train::{StepRecord, TrainCallback, TrainOptions, Trainer};

pub const CKPT_DIR: &str = "ckpt";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const SNAPSHOT_DIR: &str = "snapshots";
pub const REPORT_DIR: &str = "reports";
const LOCK_FILE: &str = ".train.lock";
const SNAPSHOT_SAMPLES: usize = 16;

#[derive(Debug, Parser)]
#[command(name = "mixdl", version, about = "Few-shot GAN training with mixup distance regularization")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a TOML config.
    Train(TrainArgs),
    /// Write a metric report for a checkpoint.
    Eval(EvalArgs),
    /// Write a grid of samples from a checkpoint.
    Sample(SampleArgs),
    /// Write latent interpolation strips from a checkpoint.
    InterpGrid(InterpArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides MIXDL_OUT and the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Continue from a checkpoint up to the configured step count.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Comma-separated: diversity, ppl, modes, fid, pr.
    #[arg(long, default_value = "diversity,ppl,modes")]
    pub metrics: String,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Report path; defaults to `<run>/reports/eval_step_NNNNNN.json`.
    #[arg(long)]
    pub output: Option<PathBuf>,
    /// Generated samples for diversity, modes and embeddings.
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub ppl_paths: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// PNG path; defaults to `<run>/snapshots/sample_seed<seed>.png`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InterpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub pairs: usize,
    /// Subintervals per strip; each strip has `steps + 1` frames.
    #[arg(long, default_value_t = 10)]
    pub steps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory for the strips; defaults to `<run>/snapshots/interp`.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Sample(a) => sample(a),
        Command::InterpGrid(a) => interp_grid(a),
    }
}

/// Exclusive marker that one training process owns a run directory.
struct RunLock(PathBuf);

impl RunLock {
    fn acquire(dir: &Path) -> Result<Self> {
        let path = dir.join(LOCK_FILE);
        match std::fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(RunLock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(MixdlError::Configuration(format!(
                "{} is locked by another training run (remove {} if that run is dead)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(MixdlError::io(path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.0);
    }
}

struct Snapshots {
    dir: PathBuf,
    every: u64,
    latents: Vec<Vec<f64>>,
}

impl TrainCallback for Snapshots {
    fn on_cadence(&mut self, trainer: &Trainer, _record: &StepRecord) -> Result<()> {
        let step = trainer.state().step;
        let last = step == trainer.config().steps;
        if !(last || (self.every > 0 && step % self.every == 0)) {
            return Ok(());
        }
        let images = trainer.state().generator.generate(&self.latents)?;
        save_grid(&images, 4, &self.dir.join(format!("step_{step:06}.png")))
    }
}

struct Reports {
    dir: PathBuf,
    every: u64,
    config: RunConfig,
}

impl TrainCallback for Reports {
    fn on_cadence(&mut self, trainer: &Trainer, _record: &StepRecord) -> Result<()> {
        let step = trainer.state().step;
        let last = step == trainer.config().steps;
        if self.config.eval.metrics.is_empty() || !(last || (self.every > 0 && step % self.every == 0)) {
            return Ok(());
        }
        let report = evaluate_generator(
            &trainer.state().generator,
            trainer.config().interpolation_space,
            trainer.dataset().images(),
            &self.config.eval.settings(),
            self.config.train.seed,
        )?;
        report.write(&self.dir.join(format!("step_{step:06}.json")))
    }
}

fn create_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p).map_err(|e| MixdlError::io(p, e))
}

fn train(args: TrainArgs) -> Result<()> {
    let cfg = RunConfig::load(&args.config)?.with_seed(args.seed);
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir());
    for sub in [CKPT_DIR, SNAPSHOT_DIR, REPORT_DIR] {
        create_dir(&out.join(sub))?;
    }
    let _lock = RunLock::acquire(&out)?;
    let dataset = cfg.load_dataset()?;
    let trace_path = out.join(TRACE_FILE);
    let mut trainer = match &args.resume {
        Some(ck) => {
            let ck = checkpoint::load(ck)?;
            let train_cfg = crate::train::TrainConfig {
                steps: cfg.train.steps,
                ..ck.train
            };
            Trainer::with_state(train_cfg, ck.model, ck.state, dataset)?
        }
        None => {
            if trace_path.exists() {
                std::fs::remove_file(&trace_path).map_err(|e| MixdlError::io(&trace_path, e))?;
            }
            Trainer::new(cfg.train.clone(), cfg.model.clone(), dataset)?
        }
    };
    trainer.set_metadata(serde_json::to_value(&cfg).expect("run config serializes"));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    rng.set_stream(3);
    let mut snapshots = Snapshots {
        dir: out.join(SNAPSHOT_DIR),
        every: cfg.eval.snapshot_every,
        latents: sample_latents(SNAPSHOT_SAMPLES, cfg.model.d_z, &mut rng),
    };
    let mut reports = Reports {
        dir: out.join(REPORT_DIR),
        every: cfg.eval.every,
        config: cfg.clone(),
    };
    let options = TrainOptions {
        callback_every: 1,
        checkpoint_dir: Some(out.join(CKPT_DIR)),
        checkpoint_every: cfg.output.checkpoint_every,
        trace_path: Some(trace_path),
    };
    let outcome = trainer.run(&options, &mut [&mut snapshots, &mut reports])?;
    println!(
        "trained to step {} ({} new records); latest checkpoint: {}",
        trainer.state().step,
        outcome.trace.len(),
        outcome
            .checkpoints
            .last()
            .map_or_else(|| "none".into(), |p| p.display().to_string())
    );
    Ok(())
}

/// Where outputs for a checkpoint go: MIXDL_OUT if set, else the run
/// directory holding its `ckpt/` folder, else the checkpoint's directory.
fn run_dir_for(ckpt: &Path) -> PathBuf {
    if let Some(out) = std::env::var_os(OUTPUT_ENV) {
        return PathBuf::from(out);
    }
    let parent = ckpt.parent().unwrap_or(Path::new("."));
    match (parent.file_name(), parent.parent()) {
        (Some(name), Some(run)) if name == CKPT_DIR => run.to_path_buf(),
        _ => parent.to_path_buf(),
    }
}

fn run_config_of(ck: &Checkpoint) -> Option<RunConfig> {
    serde_json::from_value(ck.metadata.clone()).ok()
}

fn dataset_of(ck: &Checkpoint) -> Result<FewShotDataset> {
    match run_config_of(ck) {
        Some(cfg) => cfg.load_dataset(),
        None => make_synthetic_fewshot(0, 10, ck.model.resolution),
    }
}

fn eval(args: EvalArgs) -> Result<()> {
    let ck = checkpoint::load(&args.checkpoint)?;
    let mut settings = run_config_of(&ck).map(|c| c.eval.settings()).unwrap_or_default();
    settings.metrics = parse_metric_list(&args.metrics)?;
    if let Some(n) = args.samples {
        settings.samples = n;
    }
    if let Some(n) = args.ppl_paths {
        settings.ppl_paths = n;
    }
    let dataset = dataset_of(&ck)?;
    let seed = args.seed.unwrap_or(ck.train.seed);
    let report = evaluate_generator(
        &ck.state.generator,
        ck.train.interpolation_space,
        dataset.images(),
        &settings,
        seed,
    )?;
    let path = args.output.unwrap_or_else(|| {
        run_dir_for(&args.checkpoint)
            .join(REPORT_DIR)
            .join(format!("eval_step_{:06}.json", ck.state.step))
    });
    report.write(&path)?;
    println!("{}", path.display());
    Ok(())
}

fn sample(args: SampleArgs) -> Result<()> {
    if args.n == 0 {
        return Err(MixdlError::param("--n must be at least 1"));
    }
    let ck = checkpoint::load(&args.checkpoint)?;
    let g = &ck.state.generator;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let images = g.generate(&sample_latents(args.n, g.latent_dim(), &mut rng))?;
    let cols = (args.n as f64).sqrt().ceil() as usize;
    let path = args.output.unwrap_or_else(|| {
        run_dir_for(&args.checkpoint)
            .join(SNAPSHOT_DIR)
            .join(format!("sample_seed{}.png", args.seed))
    });
    save_grid(&images, cols, &path)?;
    println!("{}", path.display());
    Ok(())
}

/// Frames along the straight line between two latents, both ends included.
pub fn interpolation_strip(
    paths: &dyn PathGenerator,
    a: &[f64],
    b: &[f64],
    steps: usize,
) -> Result<Vec<Image>> {
    let points: Vec<Vec<f64>> = (0..=steps)
        .map(|k| {
            let t = k as f64 / steps as f64;
            a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect()
        })
        .collect();
    paths.render_points(&points)
}

fn interp_grid(args: InterpArgs) -> Result<()> {
    if args.pairs == 0 || args.steps == 0 {
        return Err(MixdlError::param("--pairs and --steps must be at least 1"));
    }
    let ck = checkpoint::load(&args.checkpoint)?;
    let space: LatentSpace = ck.train.interpolation_space;
    let paths = GeneratorPaths {
        generator: &ck.state.generator,
        space,
    };
    let dir = args
        .output
        .unwrap_or_else(|| run_dir_for(&args.checkpoint).join(SNAPSHOT_DIR).join("interp"));
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    for i in 0..args.pairs {
        let a = paths.sample_endpoint(&mut rng)?;
        let b = paths.sample_endpoint(&mut rng)?;
        let frames = interpolation_strip(&paths, &a, &b, args.steps)?;
        save_grid(&frames, frames.len(), &dir.join(format!("pair_{i:02}.png")))?;
    }
    println!("{}", dir.display());
    Ok(())
}
