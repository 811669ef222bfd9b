//! Batch driver: featurize, segment, explain, evaluate, analyze and render.
//!
//! Exit codes are 0 on success, 1 when some utterances failed and 2 for
//! configuration errors.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub mod commands;
pub mod config;
pub mod manifest;
pub mod oracle;
pub mod render;

use config::{Ablations, FlatConfig};
use s2t_saliency::saliency::{ImpactKind, Method};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("{} of {total} utterances failed: {}", failed.len(), failed.join(", "))]
    Partial { failed: Vec<String>, total: usize },
    #[error(transparent)]
    Core(#[from] s2t_saliency::Error),
    #[error("{context}: {source}")]
    Io {
        context: String,
        source: std::io::Error,
    },
    #[error("image output: {0}")]
    Image(#[from] image::ImageError),
}

impl CliError {
    pub fn io(context: impl std::fmt::Display, source: std::io::Error) -> Self {
        CliError::Io {
            context: context.to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "s2t-saliency", version, about = "Saliency explanations for speech-to-text models")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the normalized log-mel spectrogram of every utterance.
    Featurize(FeaturizeArgs),
    /// Write the multi-scale SLIC segmentations of every utterance.
    Segment(SegmentArgs),
    /// Explain every utterance and write one bundle per id.
    Explain(ExplainArgs),
    /// Deletion or size curves over a directory of bundles.
    Evaluate(EvaluateArgs),
    /// Corpus analyses over a directory of bundles.
    Analyze(AnalyzeArgs),
    /// Render a token or sentence map as a PNG heatmap.
    Render(RenderArgs),
    /// Write the synthetic tone corpus the toy oracle understands.
    MakeToyCorpus(ToyCorpusArgs),
}

/// Run settings. Flags override the `--config` file, which overrides the
/// method's defaults.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON file with flat keys, e.g. {"method": "spes", "n_spec_iters": 2000}.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub method: Option<Method>,
    #[arg(long)]
    pub n_spec_iters: Option<usize>,
    #[arg(long)]
    pub n_tok_iters: Option<usize>,
    #[arg(long)]
    pub p_spec: Option<f64>,
    #[arg(long)]
    pub p_tok: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Patch densities per second, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub phis: Option<Vec<f64>>,
    /// Duration cap in seconds; defaults to 7.5 for asr and 5 for st entries.
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub compactness: Option<f64>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long, value_enum)]
    pub impact: Option<ImpactArg>,
    /// Threads per utterance; 0 uses every core.
    #[arg(long)]
    pub workers: Option<usize>,
    /// One scale at 500 patches per second.
    #[arg(long)]
    pub no_multiscale: bool,
    /// Gaussian pre-smoothing with sigma 10 before SLIC.
    #[arg(long)]
    pub grid: bool,
    /// Fixed patch counts 2000, 2500, 3000.
    #[arg(long)]
    pub no_duration_adaptation: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ImpactArg {
    Kl,
    ProbDiff,
}

impl ConfigArgs {
    pub fn flat(&self) -> Result<FlatConfig, CliError> {
        let base = match &self.config {
            Some(p) => FlatConfig::load(p)?,
            None => FlatConfig::default(),
        };
        let flags = FlatConfig {
            method: self.method,
            n_spec_iters: self.n_spec_iters,
            n_tok_iters: self.n_tok_iters,
            p_spec: self.p_spec,
            p_tok: self.p_tok,
            rng_seed: self.seed,
            phis: self.phis.clone(),
            tau_s: self.tau,
            compactness: self.compactness,
            sigma: self.sigma,
            impact: self.impact.map(|i| match i {
                ImpactArg::Kl => ImpactKind::Kl,
                ImpactArg::ProbDiff => ImpactKind::ProbDiff,
            }),
            workers: self.workers,
            ..Default::default()
        };
        Ok(base.overlay(&flags).apply_ablations(Ablations {
            no_multiscale: self.no_multiscale,
            grid: self.grid,
            no_duration_adaptation: self.no_duration_adaptation,
        }))
    }
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// `toy` or `remote:URL`; defaults to $S2T_ORACLE_URL, else toy.
    #[arg(long)]
    pub oracle: Option<String>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum CurveKind {
    Deletion,
    Size,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SaliencySource {
    /// Sentence maps from the bundles.
    Bundle,
    /// Uniform noise, the chance baseline.
    Random,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub bundles: PathBuf,
    #[arg(long, value_enum)]
    pub metric: CurveKind,
    #[arg(long, value_enum, default_value = "bundle")]
    pub saliency: SaliencySource,
    /// Seed of the random baseline.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Only used by deletion.
    #[arg(long)]
    pub oracle: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportKind {
    Time,
    Frequency,
    Kurtosis,
    Positions,
    Intermediate,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub bundles: PathBuf,
    #[arg(long, value_enum)]
    pub report: ReportKind,
    /// Word whose frequency profile is reported.
    #[arg(long)]
    pub word: Option<String>,
    /// Tokens left out of the positional statistics.
    #[arg(long, value_delimiter = ',')]
    pub exclude: Vec<String>,
    #[arg(long, default_value_t = 100)]
    pub min_count: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub bundle: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Position of the explained token; the sentence map when absent.
    #[arg(long)]
    pub token: Option<usize>,
    /// Blend the heatmap over the input spectrogram.
    #[arg(long)]
    pub overlay: bool,
    /// Pixels per cell side.
    #[arg(long, default_value_t = 4)]
    pub scale: u32,
}

#[derive(Debug, Args)]
pub struct ToyCorpusArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

pub fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Featurize(a) => commands::featurize(&a),
        Command::Segment(a) => commands::segment(&a),
        Command::Explain(a) => commands::explain(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Analyze(a) => commands::analyze(&a),
        Command::Render(a) => commands::render(&a),
        Command::MakeToyCorpus(a) => commands::make_toy_corpus(&a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
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
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
