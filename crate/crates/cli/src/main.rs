//! `tempo`: generate synthetic ordering datasets, train the
//! multi-frame head, evaluate orderings and retrieval, and benchmark
//! FLOP scaling.
//!
//! Exit codes: 0 success, 2 usage/config/format problems, 3 numeric
//! failure during training.

mod config;

use clap::{Args, Parser, Subcommand};
use config::{load, write_resolved, RunConfig};
use std::path::PathBuf;
use std::process::ExitCode;
use tempo_core::checkpoint::load_checkpoint;
use tempo_core::dataset::{read_dataset, write_dataset};
use tempo_core::error::CoreError;
use tempo_core::report::{evaluate_ordering, retrieval_topk};
use tempo_core::synth::gen_dataset;
use tempo_core::trainer::train;

#[derive(Parser)]
#[command(name = "tempo", version, about = "Temporal-ordering pretext pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config file overlaying the profile defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base profile for all defaults.
    #[arg(long, default_value = "desk")]
    profile: String,
    /// Master seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a dataset file plus its JSON meta sidecar.
    Gen {
        #[command(flatten)]
        common: Common,
        /// Dataset path; defaults to <out>/dataset.tmpo.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train on a dataset; writes per-epoch checkpoints and metrics.jsonl.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset path; defaults to <out>/dataset.tmpo.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Resume from a checkpoint instead of initializing fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Hold out this many trailing samples for evaluation.
        #[arg(long, default_value_t = 200)]
        holdout: usize,
    },
    /// Evaluate a checkpoint: ordering report and retrieval accuracy.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Top-k cutoff for retrieval accuracy.
        #[arg(long, default_value_t = 5)]
        topk: usize,
        /// Score retrieval on encoder outputs instead of raw features.
        #[arg(long)]
        encoded_retrieval: bool,
        /// Also check greedy against the exhaustive decoder.
        #[arg(long)]
        bruteforce: bool,
        /// Cap the number of evaluated samples.
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Benchmark counted FLOPs (and wall time) against sequence length.
    Bench {
        #[command(flatten)]
        common: Common,
        /// Comma-separated strictly increasing sequence lengths.
        #[arg(long, default_value = "4,6,8", value_delimiter = ',')]
        n_list: Vec<usize>,
        /// Wall-clock repetitions per length; 0 skips timing.
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// CSV output path; defaults to <out>/scaling.csv.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    init_thread_pool();
    let cli = Cli::parse();
    let code = match run(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    };
    ExitCode::from(code)
}

/// Worker parallelism cap: TEMPO_THREADS, when set, bounds the rayon
/// pool used for per-sample evaluation and generation.
fn init_thread_pool() {
    if let Ok(value) = std::env::var("TEMPO_THREADS") {
        if let Ok(threads) = value.parse::<usize>() {
            if threads >= 1 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
            }
        }
    }
}

enum CliError {
    Usage(String),
    Numeric(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Numeric(m) => write!(f, "{m}"),
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::Numerics { .. } => CliError::Numeric(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn resolve(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = load(&common.profile, common.config.as_deref()).map_err(usage)?;
    if let Some(seed) = common.seed {
        cfg.apply_master_seed(seed);
    }
    cfg.validate().map_err(usage)?;
    write_resolved(&cfg, &common.out).map_err(usage)?;
    Ok(cfg)
}

fn default_data_path(common: &Common, data: &Option<PathBuf>) -> PathBuf {
    data.clone().unwrap_or_else(|| common.out.join("dataset.tmpo"))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Gen { common, data } => {
            let cfg = resolve(&common)?;
            let path = default_data_path(&common, &data);
            let samples = gen_dataset(&cfg.scene_spec(), cfg.samples, cfg.model.seq_len)?;
            write_dataset(&path, &samples)?;
            println!("wrote {} samples to {}", samples.len(), path.display());
            Ok(())
        }
        Command::Train {
            common,
            data,
            resume,
            holdout,
        } => {
            let cfg = resolve(&common)?;
            let path = default_data_path(&common, &data);
            let (header, samples) = read_dataset(&path)?;
            if samples.is_empty() {
                return Err(usage(format!("{} holds no samples", path.display())));
            }
            if header.d as usize != cfg.model.feat_dim || header.p as usize != cfg.model.proposals {
                return Err(usage(format!(
                    "dataset is {}x{} per frame but the model expects {}x{}",
                    header.p, header.d, cfg.model.proposals, cfg.model.feat_dim
                )));
            }
            let holdout = holdout.min(samples.len().saturating_sub(1));
            let (train_set, eval_set) = samples.split_at(samples.len() - holdout);
            let eval = if eval_set.is_empty() { None } else { Some(eval_set) };

            let outcome = match resume {
                Some(ckpt_path) => {
                    let ckpt = load_checkpoint(&ckpt_path, Some(&cfg.model))?;
                    tempo_core::trainer::resume(ckpt, train_set, eval, &cfg.train, Some(&common.out))?
                }
                None => train(train_set, eval, &cfg.model, &cfg.train, Some(&common.out))?,
            };
            if let Some(last) = outcome.records.last() {
                println!(
                    "trained to epoch {}: loss {:.6}, exact {:.3}, tau {:.3}",
                    last.epoch, last.loss, last.exact_match, last.kendall_tau
                );
            }
            Ok(())
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            topk,
            encoded_retrieval,
            bruteforce,
            limit,
        } => {
            let cfg = resolve(&common)?;
            let ckpt = load_checkpoint(&checkpoint, Some(&cfg.model))?;
            let (_, samples) = read_dataset(&data)?;
            if samples.is_empty() {
                return Err(usage(format!("{} holds no samples", data.display())));
            }
            let samples = match limit {
                Some(cap) => &samples[..samples.len().min(cap)],
                None => &samples[..],
            };

            let report = evaluate_ordering(samples, &ckpt.store, &ckpt.model, bruteforce)?;

            // retrieval pool: one class per source sequence
            let mut pool = Vec::new();
            for (class, s) in samples.iter().take(32).enumerate() {
                for f in &s.frames {
                    pool.push((f.clone(), class as u64));
                }
            }
            let retrieval = if pool.len() > topk {
                let encoded = encoded_retrieval.then_some(&ckpt.model);
                Some(retrieval_topk(&pool, topk, &ckpt.store, encoded)?)
            } else {
                None
            };

            let mut out = serde_json::to_value(&report).expect("report serializes");
            out["retrieval_topk"] = serde_json::json!({
                "k": topk,
                "accuracy": retrieval,
                "encoded": encoded_retrieval,
                "pool": pool.len(),
            });
            let text = serde_json::to_string_pretty(&out).expect("report serializes");
            println!("{text}");
            let path = common.out.join("ordering.json");
            std::fs::write(&path, text).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))?;
            Ok(())
        }
        Command::Bench {
            common,
            n_list,
            reps,
            csv,
        } => {
            let cfg = resolve(&common)?;
            let report = tempo_core::bench::run_scaling(&cfg.model, &n_list, reps)?;
            let text = report.to_csv();
            print!("{text}");
            let path = csv.unwrap_or_else(|| common.out.join("scaling.csv"));
            std::fs::write(&path, &text).map_err(|e| usage(format!("cannot write {}: {e}", path.display())))?;
            Ok(())
        }
    }
}
