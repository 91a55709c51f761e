//! `xsum`: data preparation, statistics, training, inference and evaluation
//! for joint video and text summarization.
//!
//! Exit codes: 0 on success, 2 on usage or configuration errors, 1 on
//! runtime failures. Failures print one JSON object on the last line of
//! stderr.

mod commands;
mod config;
mod output;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xsum::dataset::SplitSizes;
use xsum::metrics::RankTarget;
use xsum::tsum::DecodeMode;

/// Misuse of the command line or a bad configuration file.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Environment variable naming the frame-feature store.
pub const CACHE_ENV: &str = "XSUM_CACHE";

#[derive(Debug, Parser)]
#[command(name = "xsum", version, about = "Joint video and text summarization of long videos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Annotation file, one JSON record per line.
    #[arg(long)]
    pub data: PathBuf,
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for initialisation, batch order and splitting.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory; defaults to `runs/<command>`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct InferenceFlags {
    /// Model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split to run on: train, val, test or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Fraction of frames kept in a video summary.
    #[arg(long)]
    pub budget_ratio: Option<f64>,
    /// Longest generated text summary, in tokens.
    #[arg(long)]
    pub max_gen_len: Option<usize>,
    /// `greedy` or `beam:<k>`.
    #[arg(long, value_parser = parse_decode)]
    pub decode: Option<DecodeMode>,
}

#[derive(Debug, Clone, Args)]
pub struct TrainFlags {
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Weight of the video-summary loss.
    #[arg(long)]
    pub lambda_v: Option<f64>,
    /// Weight of the text-summary loss.
    #[arg(long)]
    pub lambda_t: Option<f64>,
    /// Context-aggregation window, in frames.
    #[arg(long)]
    pub window: Option<usize>,
    /// Frames seen by the temporal encoder; longer videos are truncated.
    #[arg(long)]
    pub max_video_len: Option<usize>,
    /// Longest text summary the decoder can generate.
    #[arg(long)]
    pub max_gen_len: Option<usize>,
}

impl TrainFlags {
    fn any(&self) -> bool {
        self.epochs.is_some()
            || self.lambda_v.is_some()
            || self.lambda_t.is_some()
            || self.window.is_some()
            || self.max_video_len.is_some()
            || self.max_gen_len.is_some()
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check an annotation file, and optionally `summarize` outputs against it.
    Validate {
        #[command(flatten)]
        common: Common,
        /// Selections file written by `summarize`.
        #[arg(long)]
        selections: Option<PathBuf>,
        /// Text summaries file written by `summarize`.
        #[arg(long)]
        summaries: Option<PathBuf>,
    },
    /// Corpus statistics and human leave-one-out agreement.
    Stats {
        #[command(flatten)]
        common: Common,
    },
    /// Filter by compression ratio and assign length-stratified splits.
    Split {
        #[command(flatten)]
        common: Common,
        /// Exact split sizes as `train,val,test`.
        #[arg(long, value_parser = parse_sizes)]
        sizes: Option<SplitSizes>,
    },
    /// Train the joint model on the train split, validating on val.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        flags: TrainFlags,
        /// Continue from a checkpoint written by an earlier `train`.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Also compute validation metrics after every epoch.
        #[arg(long)]
        val_metrics: bool,
    },
    /// Write frame selections and text summaries for a split.
    Summarize {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inference: InferenceFlags,
    },
    /// Score a checkpoint on a split; writes JSON and per-video CSV.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        inference: InferenceFlags,
        /// Dual encoder from `finetune-score`, enabling the similarity score.
        #[arg(long)]
        dual: Option<PathBuf>,
        /// Rank correlations against each annotator or the mean curve.
        #[arg(long, value_parser = parse_rank_target)]
        rank_target: Option<RankTarget>,
    },
    /// Contrastively finetune the frame/text dual encoder used for scoring.
    FinetuneScore {
        #[command(flatten)]
        common: Common,
        /// Optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Histogram images of the corpus statistics plus a JSON sidecar.
    Plot {
        #[command(flatten)]
        common: Common,
    },
}

fn parse_decode(s: &str) -> Result<DecodeMode, String> {
    s.parse().map_err(|e: xsum::Error| e.to_string())
}

fn parse_sizes(s: &str) -> Result<SplitSizes, String> {
    let parts: Vec<&str> = s.split(',').collect();
    let [a, b, c] = parts.as_slice() else {
        return Err("expected three comma-separated sizes".into());
    };
    let n = |x: &str| x.trim().parse::<usize>().map_err(|e| format!("`{x}`: {e}"));
    Ok(SplitSizes::new(n(a)?, n(b)?, n(c)?))
}

fn parse_rank_target(s: &str) -> Result<RankTarget, String> {
    match s {
        "per-annotator" => Ok(RankTarget::PerAnnotator),
        "mean-curve" => Ok(RankTarget::MeanCurve),
        _ => Err("expected `per-annotator` or `mean-curve`".into()),
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Validate {
            common,
            selections,
            summaries,
        } => commands::validate(&common, selections.as_deref(), summaries.as_deref()),
        Command::Stats { common } => commands::stats(&common),
        Command::Split { common, sizes } => commands::split(&common, sizes),
        Command::Train {
            common,
            flags,
            resume,
            val_metrics,
        } => {
            if resume.is_some() && (flags.any() || common.config.is_some() || common.seed.is_some()) {
                return Err(UsageError(
                    "--resume takes its configuration from the checkpoint; drop --config, --seed and training overrides"
                        .into(),
                )
                .into());
            }
            commands::train(&common, &flags, resume.as_deref(), val_metrics)
        }
        Command::Summarize { common, inference } => commands::summarize(&common, &inference),
        Command::Evaluate {
            common,
            inference,
            dual,
            rank_target,
        } => commands::evaluate(&common, &inference, dual.as_deref(), rank_target),
        Command::FinetuneScore { common, steps } => commands::finetune_score(&common, steps),
        Command::Plot { common } => commands::plot(&common),
    }
}

fn error_json(kind: &str, err: &anyhow::Error) -> String {
    let causes: Vec<String> = err.chain().skip(1).map(|c| c.to_string()).collect();
    serde_json::json!({ "error": { "kind": kind, "message": err.to_string(), "causes": causes } }).to_string()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("{}", error_json("usage", &e));
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("{}", error_json("runtime", &e));
            ExitCode::from(1)
        }
    }
}
