//! Command-line front end. Every subcommand writes the resolved config it
//! ran with into its output directory.
//!
//! Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
//! failure. `MC4AD_NUM_THREADS` caps worker threads.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geometry::normalize_cloud;
use crate::io::{load_cloud, write_atomic, write_ply, DatasetLayout};
use crate::metrics::{evaluate, evaluate_with, load_test_sets, PointPooling};
use crate::net::{parameter_count_for, Checkpoint, Network, NetworkConfig, Variant};
use crate::scoring::{heatmap_colors, hqc_run, score};
use crate::synth::synthesize_dataset;
use crate::training::{train, TrainOutputs, TrainState, LOG_FILE};

pub const THREADS_ENV: &str = "MC4AD_NUM_THREADS";

#[derive(Debug, Parser)]
#[command(
    name = "mc4ad",
    version,
    about = "Corrective-force point-cloud anomaly detection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// JSON run config; omitted fields take their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train a network on the train split of every class.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Train the pruned variant.
        #[arg(long)]
        pruned: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from a `train_state.bin` written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score the test split and write the metric table.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Debug: use the ground-truth masks as scores.
        #[arg(long)]
        oracle: bool,
    },
    /// Two-stage screening with a pruned and a full checkpoint.
    Hqc {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        pruned_ckpt: PathBuf,
        #[arg(long)]
        full_ckpt: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        b: Option<f64>,
    },
    /// Write a colored PLY anomaly map and a score sidecar for one cloud.
    ExportMap {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        cloud: PathBuf,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    match &common.config {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn require(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf> {
    flag.or_else(|| fallback.clone())
        .ok_or_else(|| Error::config(name, "no path given on the command line or in the config"))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn load_network(path: &Path) -> Result<Network> {
    Network::from_checkpoint(&Checkpoint::load(path)?)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(value)?.as_bytes())
}

#[derive(Serialize)]
struct EvalSummary<'a> {
    result: &'a crate::metrics::EvalResult,
    parameter_count: Option<usize>,
    pruned_to_full_parameter_ratio: f64,
}

/// Runs one parsed command.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common, seed } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = seed {
                cfg.synth.seed = s;
            }
            cfg.synth.validate()?;
            cfg.paths.out = Some(common.out.clone());
            synthesize_dataset(&cfg.synth, &common.out)?;
            cfg.write_resolved(&common.out)?;
            eprintln!("dataset written to {}", common.out.display());
        }
        Command::Train {
            common,
            data,
            pruned,
            epochs,
            seed,
            resume,
        } => {
            let mut cfg = load_config(&common)?;
            if pruned {
                cfg.network.variant = Variant::Pruned;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let data = require(data, &cfg.paths.data, "paths.data")?;
            cfg.paths.data = Some(data.clone());
            cfg.paths.out = Some(common.out.clone());
            cfg.train = cfg.train.resolved(cfg.network.variant);
            let spec = cfg.train_spec();
            spec.network.validate()?;
            spec.train.validate(spec.network.variant)?;
            spec.dagen.validate()?;
            spec.loss.validate()?;

            let layout = DatasetLayout::open(&data)?;
            let clouds = layout
                .train_files()
                .into_iter()
                .map(load_cloud)
                .collect::<Result<Vec<_>>>()?;
            if clouds.is_empty() {
                return Err(Error::Data {
                    path: data,
                    message: "no training clouds found".into(),
                });
            }
            let resume = resume.map(|p| TrainState::load(&p)).transpose()?;
            create_dir(&common.out)?;
            cfg.write_resolved(&common.out)?;
            let out = train(
                &clouds,
                &spec,
                &TrainOutputs {
                    dir: Some(common.out.clone()),
                },
                resume,
                |e| {
                    eprintln!(
                        "epoch {:>4} lr {:.6} L_dist {:.5} L_dir {:.5} L_sym {:.5} L_comb {:.5} ({:.1}s)",
                        e.epoch, e.lr, e.l_dist, e.l_dir, e.l_sym, e.l_comb, e.wall_seconds
                    )
                },
            )?;
            eprintln!(
                "trained {} epochs; log in {}",
                out.state.epochs_done,
                common.out.join(LOG_FILE).display()
            );
        }
        Command::Evaluate {
            common,
            checkpoint,
            data,
            oracle,
        } => {
            let mut cfg = load_config(&common)?;
            let data = require(data, &cfg.paths.data, "paths.data")?;
            cfg.paths.data = Some(data.clone());
            cfg.paths.out = Some(common.out.clone());
            let classes = load_test_sets(&DatasetLayout::open(&data)?)?;
            let pooling: PointPooling = cfg.eval.pooling;
            let (result, params) = if oracle {
                let r = evaluate_with(&classes, pooling, |_, m| {
                    Ok(m.iter().map(|&v| v as f64).collect())
                })?;
                (r, None)
            } else {
                let ck = require(checkpoint, &cfg.paths.checkpoint, "paths.checkpoint")?;
                cfg.paths.checkpoint = Some(ck.clone());
                let net = load_network(&ck)?;
                cfg.network = net.config().clone();
                (
                    evaluate(&net, &classes, pooling)?,
                    Some(net.parameter_count()),
                )
            };
            create_dir(&common.out)?;
            cfg.write_resolved(&common.out)?;
            write_atomic(&common.out.join("metrics.csv"), result.to_csv().as_bytes())?;
            let full = NetworkConfig {
                variant: Variant::Full,
                ..cfg.network.clone()
            };
            let pr = NetworkConfig {
                variant: Variant::Pruned,
                ..cfg.network.clone()
            };
            write_json(
                &common.out.join("metrics.json"),
                &EvalSummary {
                    result: &result,
                    parameter_count: params,
                    pruned_to_full_parameter_ratio: parameter_count_for(&pr) as f64
                        / parameter_count_for(&full) as f64,
                },
            )?;
            for n in &result.notices {
                eprintln!("notice: {n}");
            }
            print!("{}", result.to_csv());
        }
        Command::Hqc {
            common,
            pruned_ckpt,
            full_ckpt,
            data,
            b,
        } => {
            let mut cfg = load_config(&common)?;
            if let Some(b) = b {
                cfg.hqc.b = b;
            }
            cfg.hqc.validate()?;
            let data = require(data, &cfg.paths.data, "paths.data")?;
            cfg.paths.data = Some(data.clone());
            cfg.paths.out = Some(common.out.clone());
            let pruned = load_network(&pruned_ckpt)?;
            let full = load_network(&full_ckpt)?;
            let classes = load_test_sets(&DatasetLayout::open(&data)?)?;
            let mut ids = String::from("sample_id,class,stem\n");
            let mut clouds = Vec::new();
            for c in &classes {
                for (stem, cloud, _) in &c.samples {
                    ids.push_str(&format!("{},{},{stem}\n", clouds.len(), c.name));
                    clouds.push(cloud.clone());
                }
            }
            let report = hqc_run(&clouds, &pruned, &full, &cfg.hqc)?;
            create_dir(&common.out)?;
            cfg.write_resolved(&common.out)?;
            write_atomic(&common.out.join("hqc.csv"), report.to_csv().as_bytes())?;
            write_atomic(&common.out.join("hqc_samples.csv"), ids.as_bytes())?;
            write_json(&common.out.join("hqc_summary.json"), &report.summary)?;
            for w in &report.summary.warnings {
                eprintln!("warning: {w}");
            }
            eprintln!(
                "{} samples, {} bypassed, {:.2} samples/s",
                report.summary.n, report.summary.bypass_count, report.summary.effective_fps
            );
        }
        Command::ExportMap {
            common,
            checkpoint,
            cloud,
        } => {
            let mut cfg = load_config(&common)?;
            let ck = require(checkpoint, &cfg.paths.checkpoint, "paths.checkpoint")?;
            cfg.paths.checkpoint = Some(ck.clone());
            cfg.paths.out = Some(common.out.clone());
            let net = load_network(&ck)?;
            cfg.network = net.config().clone();
            let input = normalize_cloud(&load_cloud(&cloud)?);
            let result = score(&net, &input)?;
            let colors = heatmap_colors(&result.point_scores);
            let stem = cloud
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "cloud".into());
            create_dir(&common.out)?;
            cfg.write_resolved(&common.out)?;
            write_ply(
                &common.out.join(format!("{stem}_map.ply")),
                &input.without_normals(),
                Some(&colors),
            )?;
            let mut side = String::with_capacity(result.point_scores.len() * 12);
            for s in &result.point_scores {
                side.push_str(&format!("{s}\n"));
            }
            write_atomic(
                &common.out.join(format!("{stem}_scores.txt")),
                side.as_bytes(),
            )?;
            eprintln!("object score {}", result.object_score);
        }
    }
    Ok(())
}

/// Configures the worker pool from `MC4AD_NUM_THREADS`.
pub fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::config(THREADS_ENV, "must be a positive integer"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::config(THREADS_ENV, e.to_string()))?;
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
