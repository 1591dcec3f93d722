use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use trendid::adapt::{AdaptResult, ADAPT_FORMAT_VERSION};
use trendid::config::{ConfigError, RunConfig};
use trendid::export::{export_latent, meta_path, LatentTrack};
use trendid::pipeline;
use trendid::synth::{load_dataset, save_dataset};
use trendid::train::{TrainError, TrainedModel};

#[derive(Parser)]
#[command(name = "trendid", version, about = "Trend-ID training and few-shot adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark dataset.
    Gen {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to `<out_dir>/data.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pretrain the feature extractor on the pooled training split.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Defaults to `<out_dir>/pretrained.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the head and the trends on the training split.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Frozen feature extractor from `pretrain`; pretrains inline when absent.
        #[arg(long)]
        pretrained: Option<PathBuf>,
        /// Defaults to the configured `out_dir`.
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Few-shot adaptation on every held-out sequence.
    Adapt {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Defaults to `<out_dir>/adapt.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Metrics for the training split and the held-out sequences.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Results of `adapt`; adaptation is rerun when absent.
        #[arg(long)]
        adapted: Option<PathBuf>,
        /// Defaults to `<out_dir>/metrics.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write trend trajectories as CSV plus a metadata file.
    ExportLatent {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Adapted trajectories to append after the training ones.
        #[arg(long)]
        adapted: Option<PathBuf>,
        /// Dataset used to label adapted sequences with their environment.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

/// File written by `adapt`.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AdaptFile {
    format_version: u32,
    results: Vec<AdaptResult>,
}

enum Failure {
    Config(ConfigError),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    RunConfig::load(path).map_err(|e| match e {
        ConfigError::Io { .. } => Failure::Runtime(e.into()),
        invalid => Failure::Config(invalid),
    })
}

fn write_text(path: &Path, text: &str) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn load_checkpoint(path: &Path) -> anyhow::Result<TrainedModel> {
    TrainedModel::load(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

fn load_adapted(path: &Path) -> anyhow::Result<Vec<AdaptResult>> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    let file: AdaptFile =
        serde_json::from_str(&text).with_context(|| format!("cannot parse {}", path.display()))?;
    if file.format_version != ADAPT_FORMAT_VERSION {
        bail!("{}: unsupported format version {}", path.display(), file.format_version);
    }
    Ok(file.results)
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Gen { config, out } => {
            let cfg = load_config(&config)?;
            let out = out.unwrap_or_else(|| cfg.paths.out_dir.join("data.jsonl"));
            let dataset = pipeline::generate_dataset(&cfg).context("generation failed")?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
            }
            save_dataset(&dataset, &out).with_context(|| format!("cannot write {}", out.display()))?;
            info!(
                "wrote {} sequences, {} samples to {}",
                dataset.len(),
                dataset.sample_count(),
                out.display()
            );
        }
        Command::Pretrain { config, data, out } => {
            let cfg = load_config(&config)?;
            let out = out.unwrap_or_else(|| cfg.paths.out_dir.join("pretrained.json"));
            let (train_set, _) = pipeline::load_split(&cfg, &data).context("cannot load dataset")?;
            match pipeline::pretrain(&cfg, &train_set).context("pretraining failed")? {
                Some(m) => {
                    write_text(&out, &m.to_json())?;
                    info!("wrote {}", out.display());
                }
                None => warn!("identity feature extractor has nothing to pretrain; no file written"),
            }
        }
        Command::Train {
            config,
            data,
            pretrained,
            out_dir,
        } => {
            let cfg = load_config(&config)?;
            let out_dir = out_dir.unwrap_or_else(|| cfg.paths.out_dir.clone());
            fs::create_dir_all(&out_dir).with_context(|| format!("cannot create {}", out_dir.display()))?;
            let (train_set, test_set) = pipeline::load_split(&cfg, &data).context("cannot load dataset")?;
            info!("{} training and {} held-out sequences", train_set.len(), test_set.len());
            let pre = pretrained.as_deref().map(load_checkpoint).transpose()?;
            let (model, report) = pipeline::train(&cfg, &train_set, pre.as_ref(), |epoch, m| {
                let path = out_dir.join(format!("checkpoint_epoch{epoch:05}.json"));
                m.save(&path)?;
                info!("checkpoint {}", path.display());
                Ok::<(), TrainError>(())
            })
            .context("training failed")?;
            let ckpt = out_dir.join("checkpoint.json");
            model.save(&ckpt).with_context(|| format!("cannot write {}", ckpt.display()))?;
            write_text(&out_dir.join("train_report.jsonl"), &report.to_jsonl())?;
            if let Some(last) = report.history.last() {
                info!(
                    "trained {} epochs in {:.1}s, final total {:.4}",
                    report.history.len(),
                    report.wall_clock_secs,
                    last.total
                );
            }
            info!("wrote {}", ckpt.display());
        }
        Command::Adapt {
            config,
            data,
            checkpoint,
            out,
        } => {
            let cfg = load_config(&config)?;
            let out = out.unwrap_or_else(|| cfg.paths.out_dir.join("adapt.json"));
            let model = load_checkpoint(&checkpoint)?;
            let (_, test_set) = pipeline::load_split(&cfg, &data).context("cannot load dataset")?;
            let started = Instant::now();
            let results = pipeline::adapt_held_out(&cfg, &model, &test_set).context("adaptation failed")?;
            info!(
                "adapted {} sequences in {:.2}s",
                results.len(),
                started.elapsed().as_secs_f64()
            );
            let file = AdaptFile {
                format_version: ADAPT_FORMAT_VERSION,
                results,
            };
            let text = serde_json::to_string_pretty(&file).context("cannot serialize results")?;
            write_text(&out, &(text + "\n"))?;
            info!("wrote {}", out.display());
        }
        Command::Eval {
            config,
            data,
            checkpoint,
            adapted,
            out,
        } => {
            let cfg = load_config(&config)?;
            let out = out.unwrap_or_else(|| cfg.paths.out_dir.join("metrics.json"));
            let model = load_checkpoint(&checkpoint)?;
            let (train_set, test_set) = pipeline::load_split(&cfg, &data).context("cannot load dataset")?;
            let adapted = match adapted {
                Some(path) => load_adapted(&path)?,
                None if test_set.is_empty() => Vec::new(),
                None => pipeline::adapt_held_out(&cfg, &model, &test_set).context("adaptation failed")?,
            };
            let report =
                pipeline::evaluate(&cfg, &model, &train_set, &test_set, &adapted).context("evaluation failed")?;
            for (name, m) in &report.splits {
                info!("{name}: NLL {:.4} RMSE {:.4} coverage {:.3}", m.nll, m.rmse, m.coverage95);
            }
            write_text(&out, &report.to_json())?;
            info!("wrote {}", out.display());
        }
        Command::ExportLatent {
            checkpoint,
            adapted,
            data,
            out,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let trajectories = (0..model.trends.len())
                .map(|i| model.trajectory(i))
                .collect::<Result<Vec<_>, _>>()
                .context("cannot unroll trends")?;
            let adapted = adapted.as_deref().map(load_adapted).transpose()?.unwrap_or_default();
            let labels = match &data {
                Some(path) => load_dataset(path)
                    .with_context(|| format!("cannot load {}", path.display()))?
                    .env_labels(),
                None => Vec::new(),
            };
            let mut tracks: Vec<LatentTrack<'_>> = model
                .environments
                .iter()
                .zip(&trajectories)
                .map(|((id, env), t)| LatentTrack {
                    sequence_id: id,
                    env,
                    trajectory: t,
                })
                .collect();
            for r in &adapted {
                let env = labels
                    .iter()
                    .find(|(id, _)| id == &r.sequence_id)
                    .map_or("unknown", |(_, e)| e.as_str());
                tracks.push(LatentTrack {
                    sequence_id: &r.sequence_id,
                    env,
                    trajectory: &r.trajectory,
                });
            }
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
            }
            let meta = export_latent(&tracks, &out).context("export failed")?;
            info!(
                "wrote {} rows to {} and {}",
                meta.rows,
                out.display(),
                meta_path(&out).display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version print to stdout and exit 0; usage errors exit 2.
            e.exit();
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
