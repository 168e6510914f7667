//! `xc`: train, evaluate and ablate extreme multilabel classifiers.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use crate::config::RunConfig;

/// A configuration problem: unknown key, bad value or missing setting.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

const OUTPUTS: &str = "\
Configuration is a flat JSON object holding every trainer key (batch_size, \
epochs, lr_encoder, lr_classifier, warmup_steps, dropout, \
weight_decay_classifier, k_r, k_h, k_p, tau_s, tau_r, curriculum_ramp, \
strategy, seed, eval_every, embed_dim, hidden_dim, init, index_kind, \
up_to_date_index, max_degree, build_beam, query_beam, probe_rows) plus run \
keys (train_path, test_path, label_features_path, checkpoint, tfidf, \
label_subset, ks, eval_mode, propensity_a, propensity_b, arms, synth_*, \
binary_cache, recall_k, recall_queries). Without train_path a planted \
synthetic dataset is generated from the synth_* keys.

Output files (under --out):
  train:        model.xast, config.json, metrics.json,
                train_log.json and train_log.csv with header
                epoch,wall_seconds,mean_slate_loss,probe_full_loss,p_at_1,p_at_5,snapshot_epoch
  eval:         metrics_exact.json and/or metrics_anns.json, recall.json (eval_mode both)
  ablate:       curve_<arm>.csv with header epoch,wall_seconds,p_at_1,p_at_5;
                summary.csv with header arm,final_p_at_1,final_p_at_5,mean_epoch_seconds,wall_seconds;
                summary.json
  gen-synth:    train.txt, test.txt, label_features.txt, synth.json (+ .xcds caches with binary_cache)
  index-recall: recall.json

Environment: XC_ASTRA_THREADS caps the worker pool size.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical error.";

#[derive(Debug, Parser)]
#[command(name = "xc", version, about = "Extreme multilabel training with sampled hard negatives", after_help = OUTPUTS)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// JSON configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one configuration key; the value is parsed as JSON, else kept as a string.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "xc-out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write its checkpoint, log and metrics.
    Train,
    /// Evaluate a checkpoint with exact or index-based prediction.
    Eval,
    /// Train one model per arm with a shared budget and compare.
    Ablate,
    /// Generate a planted-prototype synthetic dataset.
    GenSynth,
    /// Measure graph-index recall against exact scoring on a checkpoint.
    IndexRecall,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if let Some(e) = cause.downcast_ref::<xc_core::Error>() {
            return if e.is_numerical() {
                4
            } else if e.is_data() {
                3
            } else {
                2
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
        if cause.downcast_ref::<serde_json::Error>().is_some() {
            return 2;
        }
    }
    1
}

fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var("XC_ASTRA_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| ConfigError(format!("XC_ASTRA_THREADS must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| ConfigError(format!("cannot size the worker pool: {e}")))?;
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    init_threads()?;
    let cfg = RunConfig::load(cli.config.as_deref(), &cli.set)?;
    match cli.command {
        Command::Train => commands::cmd_train(&cfg, &cli.out),
        Command::Eval => commands::cmd_eval(&cfg, &cli.out),
        Command::Ablate => commands::cmd_ablate(&cfg, &cli.out),
        Command::GenSynth => commands::cmd_gen_synth(&cfg, &cli.out),
        Command::IndexRecall => commands::cmd_index_recall(&cfg, &cli.out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
