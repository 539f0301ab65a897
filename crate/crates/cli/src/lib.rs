//! The `ard` command line: pipeline stages, evaluation, steering and the
//! report server.

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub mod commands;
pub mod files;
pub mod server;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "ard", version, about = "Concept discovery with sparse autoencoders over stored activations")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a TopK sparse autoencoder on every token of a store.
    Train(TrainArgs),
    /// Select each feature's most and least representative clips.
    Score(ScoreArgs),
    /// Rank features by monosemanticity.
    Rank(RankArgs),
    /// Caption and name the top-ranked features, writing report.json.
    Name(NameArgs),
    /// Match concept names to reference labels and compute metrics.
    Eval(EvalArgs),
    /// Write a store of steered activations.
    Steer(SteerArgs),
    /// Sensitivity of judged labels to a steering intervention.
    Sensitivity(SensitivityArgs),
    /// Serve the report, audio and annotations over HTTP.
    Serve(ServeArgs),
    /// Aggregate expert annotations.
    AnnotateSummary(AnnotateSummaryArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub expansion: usize,
    #[arg(long, default_value_t = 250)]
    pub topk: usize,
    #[arg(long, default_value_t = 100_000)]
    pub steps: usize,
    /// Tokens per optimizer step.
    #[arg(long, default_value_t = 4096)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub lr: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    #[arg(long, default_value_t = 1e-8)]
    pub adam_eps: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Take batches in store order instead of shuffling.
    #[arg(long)]
    pub no_shuffle: bool,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the loss curve as `step,mean_loss`.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    /// Clips kept per feature on each side.
    #[arg(long, default_value_t = ard_core::retrieval::DEFAULT_P)]
    pub p: usize,
    #[arg(long, default_value = "scores.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RankArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value = "scores.json")]
    pub scores: PathBuf,
    /// Number of features to keep.
    #[arg(long, default_value_t = ard_core::scoring::DEFAULT_TOP_C)]
    pub top_c: usize,
    #[arg(long, default_value_t = ard_core::scoring::DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long, default_value = "monosemanticity.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct NameArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value = "scores.json")]
    pub scores: PathBuf,
    #[arg(long, default_value = "monosemanticity.json")]
    pub ranking: PathBuf,
    /// `http:<url>`, `file:<dir>` or `mock`.
    #[arg(long, default_value = "mock")]
    pub provider: ard_core::naming::ProviderKind,
    #[arg(long, default_value = ard_core::naming::DEFAULT_CAPTION_PROMPT)]
    pub caption_prompt: String,
    #[arg(long, default_value = ard_core::naming::DEFAULT_SUMMARY_PROMPT)]
    pub summary_prompt: String,
    /// Per-request timeout in seconds.
    #[arg(long, default_value_t = 120.0)]
    pub timeout: f64,
    #[arg(long, default_value_t = 2)]
    pub max_retries: u32,
    #[arg(long, default_value_t = 4)]
    pub max_in_flight: usize,
    /// Defaults to $ARD_CACHE_DIR, then `.ard-cache`.
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    #[arg(long)]
    pub no_cache: bool,
    #[arg(long, default_value = "report.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Store holding `label_<id>` and `concept_<feature>` embeddings.
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value = "report.json")]
    pub report: PathBuf,
    #[arg(long)]
    pub refs: PathBuf,
    /// Take MS from this monosemanticity.json instead of the report.
    #[arg(long)]
    pub ranking: Option<PathBuf>,
    #[arg(long, default_value_t = ard_core::evaluation::DEFAULT_GAMMA)]
    pub gamma: f64,
    #[arg(long, default_value = "eval.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SteerArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub feature: usize,
    #[arg(long)]
    pub value: f64,
    /// Directory of the new store.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SensitivityArgs {
    /// CSV with header `sample_id,baseline_label,steered_label`.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub source: String,
    #[arg(long)]
    pub target: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, default_value = "report.json")]
    pub report: PathBuf,
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, default_value = "annotations.jsonl")]
    pub annotations: PathBuf,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: String,
    /// 0 picks a free port.
    #[arg(long, default_value_t = server::DEFAULT_PORT)]
    pub port: u16,
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
    /// Serve only a seeded random subset of this many concepts.
    #[arg(long)]
    pub sample: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct AnnotateSummaryArgs {
    #[arg(long, default_value = "report.json")]
    pub report: PathBuf,
    #[arg(long, default_value = "annotations.jsonl")]
    pub annotations: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Parse `args` (program name first), run, and return the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match commands::dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_DOMAIN
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn usage_codes() {
        assert_eq!(run(["ard", "rank", "--help"]), EXIT_OK);
        assert_eq!(run(["ard", "rank", "--bogus"]), EXIT_USAGE);
        assert_eq!(run(["ard"]), EXIT_USAGE);
        assert_eq!(run(["ard", "frobnicate"]), EXIT_USAGE);
    }

    #[test]
    fn domain_error_code() {
        assert_eq!(run(["ard", "score", "--store", "/nonexistent", "--model", "/nonexistent"]), EXIT_DOMAIN);
    }

    #[test]
    fn provider_flag_parses() {
        let cli = Cli::try_parse_from(["ard", "name", "--store", "s", "--model", "m", "--provider", "file:/tmp/c"]).unwrap();
        match cli.command {
            Command::Name(a) => assert_eq!(a.provider, ard_core::naming::ProviderKind::File("/tmp/c".into())),
            other => panic!("{other:?}"),
        }
        assert!(Cli::try_parse_from(["ard", "name", "--store", "s", "--model", "m", "--provider", "ftp"]).is_err());
    }
}
