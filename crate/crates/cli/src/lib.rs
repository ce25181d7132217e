//! Commands behind the `sbuf` binary. Each writes only under its output
//! directory.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;

use sbuf_core::autodiff::Checkpoint;
use sbuf_core::metrics::{load_manifest_items, render_svg, summarize, sweep, write_csv, BinSummary, EvalRecord};
use sbuf_core::nets::InputRep;
use sbuf_core::rng::stream;
use sbuf_core::signal::io::{read_wav, write_wav, Manifest, ManifestEntry};
use sbuf_core::train::data::{source_for, DataConfig};
use sbuf_core::train::{run_training, InferenceModel, Trainer};
use sbuf_core::verify::{run_all, VerifyOptions};
use sbuf_core::{Error, ExperimentConfig, Result, SamplerMode};

pub const CHECKPOINT_FILE: &str = "checkpoint.sbuf";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const CSV_FILE: &str = "sweep.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PLOT_FILE: &str = "sweep.svg";

#[derive(Debug, Parser)]
#[command(name = "sbuf", version, about = "Schrödinger-bridge few-step signal enhancement")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Experiment configuration (TOML). Defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides `out_dir` of the config.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the analytic and Monte-Carlo self-checks.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Negative control: flip the sign of w_y in the identity suite.
        #[arg(long)]
        corrupt_w_y: bool,
    },
    /// Write the synthetic test set and its manifest.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write checkpoints and a JSONL log.
    Train {
        #[command(flatten)]
        common: Common,
        /// Write an untrained waveform-input checkpoint whose one-step output
        /// equals its input, and stop.
        #[arg(long)]
        identity_debug: bool,
    },
    /// Enhance a mono float WAV file.
    Enhance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Output WAV path.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        steps: usize,
        #[arg(long, default_value = "marginal")]
        mode: SamplerMode,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a checkpoint over step counts and SNR bins.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Parallel evaluation workers; 1 is bit-reproducible.
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Comma-separated step counts, e.g. `1,2,4,8`.
        #[arg(long, value_delimiter = ',')]
        steps: Option<Vec<usize>>,
        /// Restrict to one sampler mode.
        #[arg(long)]
        mode: Option<SamplerMode>,
    },
}

/// Loads the config (or defaults) and applies command-line overrides.
pub fn resolve_config(common: &Common) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn prepare_out(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)
        .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", dir.display())))
}

/// Prints one line per check. Returns whether all passed.
pub fn cmd_verify(opts: &VerifyOptions, out: &mut dyn Write) -> Result<bool> {
    let results = run_all(opts)?;
    for r in &results {
        writeln!(out, "{r}")?;
    }
    let failed = results.iter().filter(|r| !r.passed).count();
    writeln!(out, "{} checks, {failed} failed", results.len())?;
    Ok(failed == 0)
}

/// Writes `clean/*.wav`, `degraded/*.wav` and the manifest.
pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<Manifest> {
    let DataConfig::Synth(data) = &cfg.data else {
        return Err(Error::Config("synth needs a synthetic audio data config".into()));
    };
    data.validate()?;
    let root = &cfg.out_dir;
    for sub in ["clean", "degraded"] {
        prepare_out(&root.join(sub))?;
    }
    let mut entries = Vec::with_capacity(data.test_items);
    for i in 0..data.test_items {
        let (pair, kind) = data.test_pair(cfg.seed, i)?;
        let id = format!("item{i:04}");
        let clean = format!("clean/{id}.wav");
        let degraded = format!("degraded/{id}.wav");
        write_wav(root.join(&clean), &pair.clean, pair.sample_rate)?;
        write_wav(root.join(&degraded), &pair.degraded, pair.sample_rate)?;
        entries.push(ManifestEntry { id, clean, degraded, seed: cfg.seed, snr_db: pair.snr_db, task: pair.task, kind });
    }
    let manifest = Manifest { root: root.clone(), entries };
    manifest.write(root.join(MANIFEST_FILE))?;
    info!("wrote {} items to {}", data.test_items, root.display());
    Ok(manifest)
}

/// Trains to `train.total_steps`. Returns the final checkpoint path.
pub fn cmd_train(cfg: &ExperimentConfig, identity_debug: bool) -> Result<PathBuf> {
    let dir = &cfg.out_dir;
    prepare_out(dir)?;
    let final_path = dir.join(CHECKPOINT_FILE);
    if identity_debug {
        let mut cfg = cfg.clone();
        cfg.generator.input_rep = InputRep::Waveform;
        Trainer::new(&cfg)?.to_checkpoint()?.save(&final_path)?;
        return Ok(final_path);
    }
    fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let mut trainer = Trainer::new(cfg)?;
    let mut source = source_for(&cfg.data, cfg.seed);
    let mut log = std::io::BufWriter::new(fs::File::create(dir.join(LOG_FILE))?);
    let total = cfg.train.total_steps;
    run_training(&mut trainer, source.as_mut(), &mut log, |tr| {
        let ck = tr.to_checkpoint()?;
        if tr.step < total {
            ck.save(dir.join(format!("checkpoint_{:07}.sbuf", tr.step)))
        } else {
            ck.save(&final_path)
        }
    })?;
    log.flush()?;
    info!("saved {}", final_path.display());
    Ok(final_path)
}

/// Enhances one file with the EMA generator of `checkpoint`.
pub fn cmd_enhance(checkpoint: &Path, input: &Path, output: &Path, steps: usize, mode: SamplerMode, seed: u64) -> Result<usize> {
    let (mut model, cfg) = InferenceModel::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let (y, sr) = read_wav(input)?;
    if let DataConfig::Synth(d) = &cfg.data {
        if d.sample_rate != sr {
            return Err(Error::Config(format!(
                "{} is sampled at {sr} Hz but the model expects {} Hz",
                input.display(),
                d.sample_rate
            )));
        }
    }
    let out = model.enhance(&y, steps, mode, &mut stream(seed, &[]))?;
    if let Some(parent) = output.parent() {
        if !parent.as_os_str().is_empty() {
            prepare_out(parent)?;
        }
    }
    write_wav(output, &out, sr)?;
    Ok(model.calls)
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub records: Vec<EvalRecord>,
    pub summary: Vec<BinSummary>,
    pub csv_path: PathBuf,
}

/// Evaluates `checkpoint` on the manifest items. The eval settings come
/// from `cfg` when given, otherwise from the checkpoint.
pub fn cmd_sweep(checkpoint: &Path, manifest: &Path, cfg: Option<&ExperimentConfig>, out_dir: &Path, workers: usize) -> Result<SweepOutput> {
    let (mut model, ck_cfg) = InferenceModel::from_checkpoint(&Checkpoint::load(checkpoint)?)?;
    let cfg = cfg.unwrap_or(&ck_cfg);
    let eval = &cfg.eval;
    eval.validate()?;
    // The inference grid must cover the requested step counts.
    let grid = model.sched.n_steps.max(eval.max_steps);
    model.sched = model.sched.with_steps(grid)?;
    let items = load_manifest_items(&Manifest::read(manifest)?)?;
    prepare_out(out_dir)?;
    let records = sweep(&model, &items, eval, cfg.seed, workers)?;
    let csv_path = out_dir.join(CSV_FILE);
    write_csv(&records, std::io::BufWriter::new(fs::File::create(&csv_path)?))?;
    let summary = summarize(&records, &items, eval)?;
    let json = serde_json::to_string_pretty(&summary).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(out_dir.join(SUMMARY_FILE), json + "\n")?;
    if eval.plot {
        fs::write(out_dir.join(PLOT_FILE), render_svg(&summary))?;
    }
    info!("wrote {} rows to {}", records.len(), csv_path.display());
    Ok(SweepOutput { records, summary, csv_path })
}

/// Dispatches a parsed command line. Returns the process exit code.
pub fn run(cli: Cli) -> Result<i32> {
    match cli.command {
        Command::Verify { seed, corrupt_w_y } => {
            let ok = cmd_verify(&VerifyOptions { seed, corrupt_w_y }, &mut std::io::stdout().lock())?;
            Ok(if ok { 0 } else { 1 })
        }
        Command::Synth { common } => {
            cmd_synth(&resolve_config(&common)?)?;
            Ok(0)
        }
        Command::Train { common, identity_debug } => {
            let path = cmd_train(&resolve_config(&common)?, identity_debug)?;
            println!("{}", path.display());
            Ok(0)
        }
        Command::Enhance { checkpoint, input, out, steps, mode, seed } => {
            cmd_enhance(&checkpoint, &input, &out, steps, mode, seed)?;
            Ok(0)
        }
        Command::Sweep { common, checkpoint, manifest, workers, steps, mode } => {
            let mut cfg = match &common.config {
                Some(_) => resolve_config(&common)?,
                None => {
                    let mut c = sbuf_core::train::config_from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
                    if let Some(s) = common.seed {
                        c.seed = s;
                    }
                    c
                }
            };
            if let Some(steps) = steps {
                cfg.eval.max_steps = cfg.eval.max_steps.max(steps.iter().copied().max().unwrap_or(1));
                cfg.eval.steps = steps;
            }
            if let Some(mode) = mode {
                cfg.eval.modes = vec![mode];
            }
            let out_dir = common.out.clone().unwrap_or_else(|| cfg.out_dir.join("sweep"));
            cmd_sweep(&checkpoint, &manifest, Some(&cfg), &out_dir, workers)?;
            println!("{}", out_dir.join(CSV_FILE).display());
            Ok(0)
        }
    }
}
