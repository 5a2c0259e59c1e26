//! Command-line front end: loads model and sample documents, runs the
//! identifiability analyses and writes JSON reports or triplet dumps.
//!
//! Exit codes: 0 locally identifiable, 1 not locally identifiable,
//! 2 indeterminate, 3 precondition warnings (the anchor is near `S` or an
//! input is near an activation boundary), 64 usage error, 65 malformed or
//! unusable data, 66 missing input file, 74 write failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use nalgebra::DMatrix;
use reluid::identifiability::IdentifiabilityReport;
use reluid::{EvaluateOptions, NetworkParams, RankPolicy, Verdict, DEFAULT_PATH_CAP};

pub mod commands;
pub mod perturb;
pub mod sweep;

pub use sweep::{SeedSummary, SweepReport, SweepRow};

pub const EXIT_USAGE: i32 = 64;
pub const EXIT_DATA: i32 = 65;
pub const EXIT_NO_INPUT: i32 = 66;
pub const EXIT_IO: i32 = 74;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("cannot read {path}: {message}")]
    NoInput { path: PathBuf, message: String },
    #[error("cannot write {path}: {message}")]
    Io { path: PathBuf, message: String },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::NoInput { .. } => EXIT_NO_INPUT,
            CliError::Io { .. } => EXIT_IO,
        }
    }
}

impl From<reluid::Error> for CliError {
    fn from(e: reluid::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "reluid", version, about = "Local identifiability checks for ReLU networks on a finite sample")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Model document (JSON).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Sample document (JSON).
    #[arg(long)]
    pub sample: Option<PathBuf>,
    /// Relative singular-value tolerance for numerical ranks.
    #[arg(long, default_value_t = 1e-8)]
    pub rank_tol: f64,
    /// Tolerance for the degenerate set; default 1e-12 * (1 + max |theta|).
    #[arg(long)]
    pub s_tol: Option<f64>,
    /// Activation-margin warning threshold; default 1e-6 * (1 + max |z|).
    #[arg(long)]
    pub margin_tol: Option<f64>,
    /// Maximum number of enumerated paths.
    #[arg(long, default_value_t = DEFAULT_PATH_CAP)]
    pub path_cap: u128,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the report here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MatrixKind {
    Gamma,
    Alpha,
    Lift,
    Dpsi,
    Fd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Distribution {
    /// Independent standard normal coordinates.
    Normal,
    /// Row `i` is `(-1)^i |g|` with `g` standard normal.
    Alternating,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DirectionSource {
    /// Random combination of a kernel basis of Gamma.
    Kernel,
    /// Uniform random unit vector.
    Random,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate both rank conditions and report a verdict.
    Check(CommonArgs),
    /// Residual of the path-space linear representation on the sample.
    LiftVerify {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 1e-9)]
        rel_tol: f64,
        /// Also check the identity exactly in rational arithmetic.
        #[arg(long)]
        exact: bool,
    },
    /// Dump a matrix in triplet format.
    Jacobian {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum, default_value_t = MatrixKind::Gamma)]
        matrix: MatrixKind,
        /// Finite-difference step for `--matrix fd`.
        #[arg(long, default_value_t = 1e-6)]
        fd_step: f64,
    },
    /// Full singular spectra of Gamma, alpha and D psi.
    Rank(CommonArgs),
    /// Ranks over nested samples of increasing size, one run per seed.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Architecture for random parameters when no model is given, e.g. 2,3,2.
        #[arg(long, value_delimiter = ',')]
        layer_sizes: Option<Vec<usize>>,
        #[arg(long, value_enum, default_value_t = Distribution::Normal)]
        distribution: Distribution,
        /// Largest sample size; the grid is 1..=n-max (default 4 * ceil(dim / N_L)).
        #[arg(long)]
        n_max: Option<usize>,
        #[arg(long, default_value_t = 20)]
        num_seeds: u64,
    },
    /// Flatness probe along a kernel direction and, when the necessary
    /// condition fails, a continuation search for a twin.
    Perturb {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, value_enum, default_value_t = DirectionSource::Kernel)]
        direction: DirectionSource,
        /// Probe offsets; default is the activation margin times 1e-4..1e-1.
        #[arg(long, value_delimiter = ',')]
        t_grid: Option<Vec<f64>>,
        /// Starting offset of the continuation.
        #[arg(long)]
        t0: Option<f64>,
        #[arg(long, default_value_t = 5)]
        attempts: usize,
        /// Where to write the twin model when one is found.
        #[arg(long)]
        witness_out: Option<PathBuf>,
    },
    /// Rescale so every hidden neuron's largest outgoing weight is +-1.
    Canonicalize(CommonArgs),
}

/// Validated settings shared by all subcommands.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub model: Option<PathBuf>,
    pub sample: Option<PathBuf>,
    pub rank_policy: RankPolicy,
    pub tol_s: Option<f64>,
    pub margin_tol: Option<f64>,
    pub path_cap: u128,
    pub seed: u64,
    pub out: Option<PathBuf>,
}

fn positive(name: &str, v: f64) -> CliResult<f64> {
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(CliError::Usage(format!("--{name} must be positive, got {v}")))
    }
}

impl RunConfig {
    pub fn from_args(a: &CommonArgs) -> CliResult<Self> {
        let rank_policy = RankPolicy::relative(positive("rank-tol", a.rank_tol)?).map_err(|e| CliError::Usage(e.to_string()))?;
        let tol_s = a.s_tol.map(|v| positive("s-tol", v)).transpose()?;
        let margin_tol = a.margin_tol.map(|v| positive("margin-tol", v)).transpose()?;
        if a.path_cap < 1 {
            return Err(CliError::Usage("--path-cap must be at least 1".into()));
        }
        Ok(Self {
            model: a.model.clone(),
            sample: a.sample.clone(),
            rank_policy,
            tol_s,
            margin_tol,
            path_cap: a.path_cap,
            seed: a.seed,
            out: a.out.clone(),
        })
    }

    pub fn evaluate_options(&self) -> EvaluateOptions {
        EvaluateOptions {
            rank_policy: self.rank_policy,
            tol_s: self.tol_s,
            margin_tol: self.margin_tol,
            path_cap: self.path_cap,
            ..Default::default()
        }
    }

    pub fn load_model(&self) -> CliResult<NetworkParams> {
        let path = self.model.as_deref().ok_or_else(|| CliError::Usage("--model is required".into()))?;
        load_model(path)
    }

    pub fn load_sample(&self) -> CliResult<DMatrix<f64>> {
        let path = self.sample.as_deref().ok_or_else(|| CliError::Usage("--sample is required".into()))?;
        load_sample(path)
    }
}

fn read(path: &Path) -> CliResult<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::NoInput { path: path.to_path_buf(), message: e.to_string() })
}

pub fn load_model(path: &Path) -> CliResult<NetworkParams> {
    reluid::io::parse_model(&read(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn load_sample(path: &Path) -> CliResult<DMatrix<f64>> {
    reluid::io::parse_sample(&read(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

pub fn write_file(path: &Path, text: &str) -> CliResult<()> {
    std::fs::write(path, text).map_err(|e| CliError::Io { path: path.to_path_buf(), message: e.to_string() })
}

/// Exit code for an identifiability report.
pub fn exit_code(report: &IdentifiabilityReport) -> i32 {
    if !report.preconditions_verified {
        return 3;
    }
    match report.verdict {
        Verdict::LocallyIdentifiable => 0,
        Verdict::NotLocallyIdentifiable => 1,
        Verdict::Indeterminate => 2,
    }
}

/// Text produced by a command and the exit code to return.
pub struct Outcome {
    pub text: String,
    pub code: i32,
}

pub fn execute(cli: &Cli) -> CliResult<(Outcome, Option<PathBuf>)> {
    let (common, outcome) = match &cli.command {
        Command::Check(c) => (c, commands::check(&RunConfig::from_args(c)?)?),
        Command::LiftVerify { common, rel_tol, exact } => {
            (common, commands::lift_verify(&RunConfig::from_args(common)?, positive("rel-tol", *rel_tol)?, *exact)?)
        }
        Command::Jacobian { common, matrix, fd_step } => {
            (common, commands::jacobian(&RunConfig::from_args(common)?, *matrix, positive("fd-step", *fd_step)?)?)
        }
        Command::Rank(c) => (c, commands::rank(&RunConfig::from_args(c)?)?),
        Command::Sweep { common, layer_sizes, distribution, n_max, num_seeds } => {
            let opts =
                sweep::SweepOptions { layer_sizes: layer_sizes.clone(), distribution: *distribution, n_max: *n_max, num_seeds: *num_seeds };
            (common, sweep::run(&RunConfig::from_args(common)?, &opts)?)
        }
        Command::Perturb { common, direction, t_grid, t0, attempts, witness_out } => {
            let opts = perturb::PerturbOptions {
                direction: *direction,
                t_grid: t_grid.clone(),
                t0: t0.map(|v| positive("t0", v)).transpose()?,
                attempts: *attempts,
                witness_out: witness_out.clone(),
            };
            (common, perturb::run(&RunConfig::from_args(common)?, &opts)?)
        }
        Command::Canonicalize(c) => (c, commands::canonicalize(&RunConfig::from_args(c)?)?),
    };
    Ok((outcome, common.out.clone()))
}

/// Parses arguments, runs the command, writes the report and returns the
/// process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let text = e.render().to_string();
            let _ = if e.use_stderr() { stderr.write_all(text.as_bytes()) } else { stdout.write_all(text.as_bytes()) };
            return code;
        }
    };
    let result = execute(&cli).and_then(|(outcome, out)| {
        match out {
            Some(path) => write_file(&path, &outcome.text)?,
            None => {
                stdout.write_all(outcome.text.as_bytes()).map_err(|e| CliError::Io { path: "<stdout>".into(), message: e.to_string() })?
            }
        }
        Ok(outcome.code)
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "reluid: {e}");
            e.exit_code()
        }
    }
}
