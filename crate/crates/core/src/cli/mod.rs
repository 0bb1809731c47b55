//! Batch command-line interface.
//!
//! Every command writes its outputs and a `manifest.json` into the directory
//! given by `-o`. Pixel indices in files read or written here are 1-based.

pub mod bench;
mod commands;
pub mod manifest;

use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use thiserror::Error;

use crate::error::UnmixError;
use crate::glup::GlupConfig;
use crate::nglup::{NglupConfig, WeightPolicy, WeightSource};
use crate::synth::PurePixelPlacement;

pub use bench::{run_detection_trial, tabulate, DetectionRate, TrialOutcome};
pub use manifest::{RunManifest, SolverSummary};

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Unmix(#[from] UnmixError),
    #[error("{0}")]
    Usage(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest serialization failed: {0}")]
    Json(serde_json::Error),
    #[error("could not configure the thread pool: {0}")]
    Threads(String),
}

/// How a command ended when it did not fail outright.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Completed,
    /// Outputs were written but a solver stopped before meeting its criteria.
    NotConverged,
}

#[derive(Debug, Parser)]
#[command(name = "hsunmix", version, about = "Blind, fully constrained hyperspectral unmixing")]
pub struct Cli {
    /// Worker threads; 1 runs everything serially.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Exit with status 0 even when a solver did not converge.
    #[arg(long, global = true)]
    pub allow_nonconverged: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene with known endmembers and abundances.
    Synth(SynthArgs),
    /// Solve GLUP or NGLUP on a scene.
    Unmix(UnmixArgs),
    /// Threshold row means of an abundance matrix and drop near-duplicates.
    Detect(DetectArgs),
    /// Fully constrained least squares abundances for given endmembers.
    Fcls(FclsArgs),
    /// N-FINDR endmember extraction.
    Nfindr(NfindrArgs),
    /// Compare estimates with a reference.
    Metrics(MetricsArgs),
    /// Tabulate how often NGLUP detects each number of endmembers.
    BenchDetect(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algo {
    Glup,
    Nglup,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    FirstM,
    Random,
}

impl From<Placement> for PurePixelPlacement {
    fn from(p: Placement) -> Self {
        match p {
            Placement::FirstM => PurePixelPlacement::FirstM,
            Placement::Random => PurePixelPlacement::Random,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyArg {
    Heteroscedastic,
    LikelihoodScaled,
    Identity,
}

impl From<PolicyArg> for WeightPolicy {
    fn from(p: PolicyArg) -> Self {
        match p {
            PolicyArg::Heteroscedastic => WeightPolicy::Heteroscedastic,
            PolicyArg::LikelihoodScaled => WeightPolicy::LikelihoodScaled,
            PolicyArg::Identity => WeightPolicy::Identity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SourceArg {
    Split,
    Primal,
}

impl From<SourceArg> for WeightSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Split => WeightSource::Split,
            SourceArg::Primal => WeightSource::Primal,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 3)]
    pub endmembers: usize,
    #[arg(long, default_value_t = 100)]
    pub pixels: usize,
    #[arg(long, default_value_t = 420)]
    pub bands: usize,
    /// Signal-to-noise ratio in dB; `inf` for a noise-free scene.
    #[arg(long, default_value_t = 50.0)]
    pub snr: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Placement::FirstM)]
    pub placement: Placement,
    /// Largest pairwise coherence allowed between generated spectra.
    #[arg(long, default_value_t = 0.95)]
    pub max_coherence: f64,
    /// Endmember library (bands by endmembers) to use instead of generated
    /// spectra; `--bands` and `--endmembers` are then taken from the file.
    #[arg(long)]
    pub spectra: Option<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
}

/// Solver flags shared by `unmix` and `bench-detect`.
#[derive(Debug, Clone, Args, Serialize)]
pub struct SolverArgs {
    #[arg(long, default_value_t = 10.0)]
    pub mu: f64,
    #[arg(long, default_value_t = 100.0)]
    pub rho: f64,
    /// Primal and dual ADMM tolerance.
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 5000)]
    pub max_iter: usize,
    /// NGLUP inner iterations per weight update.
    #[arg(long, default_value_t = 1)]
    pub jmax: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub eps_outer: f64,
    #[arg(long, default_value_t = 200)]
    pub max_outer: usize,
    #[arg(long, value_enum, default_value_t = PolicyArg::Heteroscedastic)]
    pub weight_policy: PolicyArg,
    #[arg(long, value_enum, default_value_t = SourceArg::Split)]
    pub weight_source: SourceArg,
    #[arg(long, default_value_t = 1e-8)]
    pub weight_ridge: f64,
}

impl SolverArgs {
    pub fn glup_config(&self) -> GlupConfig {
        GlupConfig {
            mu: self.mu,
            rho: self.rho,
            eps_primal: self.eps,
            eps_dual: self.eps,
            max_iterations: self.max_iter,
        }
    }

    /// NGLUP settings; the warm start uses the same GLUP parameters.
    pub fn nglup_config(&self) -> NglupConfig {
        NglupConfig {
            glup: self.glup_config(),
            warm_start: self.glup_config(),
            j_max: self.jmax,
            eps_outer: self.eps_outer,
            max_outer_iterations: self.max_outer,
            weight_ridge: self.weight_ridge,
            weight_policy: self.weight_policy.into(),
            weight_source: self.weight_source.into(),
        }
    }
}

#[derive(Debug, Args, Serialize)]
#[command(group(ArgGroup::new("candidates").args(["omega", "all", "sample"])))]
pub struct UnmixArgs {
    #[arg(long, value_enum)]
    pub algo: Algo,
    #[arg(long)]
    pub scene: PathBuf,
    /// File of 1-based candidate pixel indices.
    #[arg(long)]
    pub omega: Option<PathBuf>,
    /// Use every pixel as a candidate (the default).
    #[arg(long)]
    pub all: bool,
    /// Draw this many candidates uniformly without replacement.
    #[arg(long)]
    pub sample: Option<usize>,
    /// Seed for `--sample`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct DetectArgs {
    /// Abundance matrix written by `unmix`.
    #[arg(long)]
    pub x: PathBuf,
    #[arg(long)]
    pub scene: PathBuf,
    /// Candidate indices the rows of X refer to; defaults to every pixel.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    #[arg(long, default_value_t = 0.01)]
    pub threshold: f64,
    #[arg(long, default_value_t = 0.95)]
    pub max_coherence: f64,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct FclsArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Endmember spectra, bands by endmembers.
    #[arg(long)]
    pub endmembers: PathBuf,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct NfindrArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub m: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = crate::baselines::DEFAULT_MAX_SWEEPS)]
    pub max_sweeps: usize,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args, Serialize)]
#[command(group(ArgGroup::new("against").args(["reference", "truth"])))]
pub struct MetricsArgs {
    /// Estimated abundance matrix.
    #[arg(long, requires = "against")]
    pub estimate: Option<PathBuf>,
    /// Reference matrix of the same shape as the estimate.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    /// Directory written by `synth`; its `A.hsm` is embedded into candidate
    /// coordinates.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Candidate indices for `--truth`; defaults to every pixel.
    #[arg(long, requires = "truth")]
    pub candidates: Option<PathBuf>,
    /// Estimated spectra, bands by endmembers.
    #[arg(long, requires = "reference_spectra")]
    pub spectra: Option<PathBuf>,
    #[arg(long, requires = "spectra")]
    pub reference_spectra: Option<PathBuf>,
    #[arg(short, long)]
    pub output: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct BenchArgs {
    #[arg(long, default_value_t = 7)]
    pub endmembers: usize,
    #[arg(long, default_value_t = 100)]
    pub pixels: usize,
    #[arg(long, default_value_t = 420)]
    pub bands: usize,
    /// Comma-separated SNR values in dB.
    #[arg(long, value_delimiter = ',', default_values_t = [20.0, 30.0])]
    pub snr: Vec<f64>,
    #[arg(long, default_value_t = 25)]
    pub trials: usize,
    /// Trial `i` uses seed `seed + i`.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 0.01)]
    pub threshold: f64,
    #[command(flatten)]
    pub solver: SolverArgs,
    #[arg(short, long)]
    pub output: PathBuf,
}

/// Runs a parsed command line.
pub fn run(cli: Cli) -> Result<Outcome, CliError> {
    if let Some(threads) = cli.threads {
        if threads == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Threads(e.to_string()))?;
    }
    let converged = match &cli.command {
        Command::Synth(a) => commands::synth(a)?,
        Command::Unmix(a) => commands::unmix(a)?,
        Command::Detect(a) => commands::detect(a)?,
        Command::Fcls(a) => commands::fcls(a)?,
        Command::Nfindr(a) => commands::nfindr(a)?,
        Command::Metrics(a) => commands::metrics(a)?,
        Command::BenchDetect(a) => commands::bench_detect(a)?,
    };
    Ok(if converged { Outcome::Completed } else { Outcome::NotConverged })
}
