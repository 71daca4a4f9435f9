use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use yoloret::app::{self, Metric, TrainToyOptions};
use yoloret::data::Dataset;
use yoloret::model::YoloRet;
use yoloret::{Result, WeightStore};

#[derive(Parser)]
#[command(name = "yoloret", version, about = "Real-time CPU object detector")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum MetricArg {
    Voc,
    Coco,
}

#[derive(Subcommand)]
enum Cmd {
    /// Detect objects in one PPM image.
    Detect {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.25)]
        conf: f32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a weights file on a JSON-lines dataset.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "voc")]
        metric: MetricArg,
        #[arg(long, default_value_t = 0.05)]
        conf: f32,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Batch-1 latency on a synthetic input.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Random weights from --seed when omitted.
        #[arg(long)]
        weights: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 50)]
        iters: usize,
        #[arg(long, default_value_t = 5)]
        warmup: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Drop the trailing backbone blocks from a weights file.
    Truncate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        blocks: usize,
    },
    /// Two-phase training on a small dataset.
    TrainToy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long = "epochs-p1")]
        epochs_p1: usize,
        #[arg(long = "epochs-p2")]
        epochs_p2: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON training settings; defaults when omitted.
        #[arg(long)]
        train_config: Option<PathBuf>,
        /// Weights to copy leading backbone blocks from.
        #[arg(long)]
        transfer: Option<PathBuf>,
        #[arg(long, default_value_t = 0, requires = "transfer")]
        transfer_blocks: usize,
        #[arg(long)]
        weights_out: Option<PathBuf>,
        #[arg(long)]
        loss_csv: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Multiply-accumulate and parameter counts.
    Flops {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic shapes dataset.
    Synth {
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn emit<T: Serialize>(report: &T, out: Option<&Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(report)? + "\n";
    match out {
        Some(p) => write(p, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())).into())
}

fn model(config: Option<&Path>) -> Result<YoloRet> {
    YoloRet::new(app::load_config(config)?)
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Detect {
            config,
            weights,
            image,
            conf,
            out,
        } => {
            let m = model(config.as_deref())?;
            let store = app::load_weights(&m, Some(&weights), 0)?;
            emit(&app::run_detect(&m, &store, &image, conf)?, out.as_deref())
        }
        Cmd::Eval {
            config,
            weights,
            dataset,
            metric,
            conf,
            out,
        } => {
            let m = model(config.as_deref())?;
            let store = app::load_weights(&m, Some(&weights), 0)?;
            let ds = Dataset::load(&dataset, m.config().num_classes)?;
            let metric = match metric {
                MetricArg::Voc => Metric::Voc,
                MetricArg::Coco => Metric::Coco,
            };
            emit(&app::run_eval(&m, &store, &ds, metric, conf)?, out.as_deref())
        }
        Cmd::Bench {
            config,
            weights,
            seed,
            iters,
            warmup,
            out,
        } => {
            let m = model(config.as_deref())?;
            let store = app::load_weights(&m, weights.as_deref(), seed)?;
            emit(&app::run_bench(&m, &store, warmup, iters)?, out.as_deref())
        }
        Cmd::Truncate { input, out, blocks } => {
            let mut store = WeightStore::load(&input)?;
            let report = app::truncate_store(&mut store, blocks)?;
            store.save(&out)?;
            emit(&report, None)
        }
        Cmd::TrainToy {
            config,
            dataset,
            epochs_p1,
            epochs_p2,
            seed,
            train_config,
            transfer,
            transfer_blocks,
            weights_out,
            loss_csv,
            out,
        } => {
            let m = model(config.as_deref())?;
            let cfg = app::load_train_config(train_config.as_deref())?;
            let ds = Dataset::load(&dataset, m.config().num_classes)?;
            let transfer = match transfer {
                Some(p) => Some((WeightStore::load(&p)?, transfer_blocks)),
                None => None,
            };
            let opts = TrainToyOptions {
                seed,
                epochs_phase1: epochs_p1,
                epochs_phase2: epochs_p2,
                transfer,
            };
            let done = app::run_train_toy(&m, &ds, &cfg, opts)?;
            if let Some(p) = weights_out {
                done.weights.save(&p)?;
            }
            if let Some(p) = loss_csv {
                write(&p, done.loss_csv.as_bytes())?;
            }
            emit(&done.report, out.as_deref())
        }
        Cmd::Flops { config, out } => emit(&app::run_flops(&model(config.as_deref())?)?, out.as_deref()),
        Cmd::Synth { dir, n, size, seed } => emit(&app::run_synth(&dir, n, size, seed)?, None),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return ExitCode::from(if usage { 1 } else { 0 });
        }
    };
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}
