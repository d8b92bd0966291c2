use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "cdph",
    version,
    about = "Fit, evaluate and simulate common-shock bivariate discrete phase-type models"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to count data with EM.
    Fit(FitArgs),
    /// Evaluate a model file.
    Eval(EvalArgs),
    /// Draw samples from a reference generator or a model file.
    Simulate(SimulateArgs),
    /// Build a model from existing ones (min, max, sum, mixture, vecsum).
    Construct(ConstructArgs),
    /// Rerun a simulation study or fit user data for all three model sizes.
    Reproduce(ReproduceArgs),
}

#[derive(Debug, Args)]
pub struct FitArgs {
    /// Data file: `n1,n2[,weight]` rows, or a frequency table with --table.
    #[arg(long)]
    pub input: PathBuf,
    /// Read the input as a two-way frequency table.
    #[arg(long)]
    pub table: bool,
    #[arg(long, num_args = 2, value_names = ["E", "S"], default_values_t = [2, 1])]
    pub dims: Vec<usize>,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub iters: usize,
    /// Observed lattice `N = c (tau - 2) + k` per coordinate.
    #[arg(long, num_args = 4, value_names = ["C1", "K1", "C2", "K2"], default_values_t = [1.0, 2.0, 1.0, 2.0], allow_negative_numbers = true)]
    pub shift: Vec<f64>,
    /// Directory receiving model.json and trace.csv.
    #[arg(long)]
    pub output_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Model file.
    #[arg(long)]
    pub input: PathBuf,
    /// Tail mass left out of grids, per coordinate.
    #[arg(long, default_value_t = 1e-12)]
    pub trunc_tol: f64,
    /// Write to this file instead of standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[command(subcommand)]
    pub query: EvalQuery,
}

#[derive(Debug, Subcommand)]
pub enum EvalQuery {
    /// Joint pmf at observed values `x1 x2` (one value for a univariate model).
    Pmf {
        #[arg(num_args = 1..=2, allow_negative_numbers = true)]
        values: Vec<f64>,
    },
    /// Probability generating function at `z1 z2` in [0, 1].
    Pgf {
        #[arg(num_args = 1..=2)]
        values: Vec<f64>,
    },
    /// Raw cross moment `E[tau1^r1 tau2^r2]` (`E[tau^r]` for a univariate model).
    Moment {
        #[arg(num_args = 1..=2)]
        orders: Vec<u32>,
    },
    /// Factorial moment of the latent triple `(tau12, tau1 - tau12, tau2 - tau12)`
    /// (of `tau` for a univariate model).
    Factorial {
        #[arg(num_args = 1..=3)]
        orders: Vec<u32>,
    },
    /// pmf of `min(tau1, tau2)` at step `l`.
    Min { step: u64 },
    /// pmf of `max(tau1, tau2)` at step `l`.
    Max { step: u64 },
    /// pmf of `tau1 + tau2` at step `l`.
    Sum { step: u64 },
    /// pmf of the marginal `tau_k` at step `l`.
    Marginal { coord: usize, step: u64 },
    /// pmf over the truncation window as CSV.
    Grid,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(subcommand)]
    pub source: SimulateSource,
}

#[derive(Debug, Args)]
pub struct SimulateCommon {
    /// Number of draws.
    #[arg(long, default_value_t = 10_000)]
    pub count: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Write to this file instead of standard output.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum SimulateSource {
    /// `N_k = V_k + Z` with Poisson V1, V2 and common shock Z.
    BivPoisson {
        /// Marginal intensities of N1 and N2.
        #[arg(long, num_args = 2, value_names = ["N1", "N2"], default_values_t = [5.0, 4.0])]
        lambda_n: Vec<f64>,
        /// Intensity of the common shock.
        #[arg(long, default_value_t = 2.0)]
        lambda_z: f64,
        #[command(flatten)]
        common: SimulateCommon,
    },
    /// Conditionally independent Poissons mixed over one Lindley draw per pair.
    PoissonLindley {
        #[arg(long, default_value_t = 2.0)]
        theta: f64,
        #[arg(long, num_args = 2, value_names = ["R1", "R2"], default_values_t = [2.0, 3.0])]
        rates: Vec<f64>,
        #[command(flatten)]
        common: SimulateCommon,
    },
    /// Exact draws from a model file.
    Model {
        #[arg(long)]
        input: PathBuf,
        /// Emit `tau1,tau2,m,z1,z2` instead of observed values.
        #[arg(long)]
        latent: bool,
        #[command(flatten)]
        common: SimulateCommon,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Construction {
    Min,
    Max,
    Sum,
    Mixture,
    Vecsum,
}

#[derive(Debug, Args)]
pub struct ConstructArgs {
    #[arg(value_enum)]
    pub operation: Construction,
    /// Input model file; repeat for mixture and vecsum.
    #[arg(long, required = true)]
    pub input: Vec<PathBuf>,
    /// Mixture weights, one per input.
    #[arg(long, num_args = 1..)]
    pub weights: Vec<f64>,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Study {
    #[value(name = "poisson-1")]
    Poisson1,
    #[value(name = "poisson-2")]
    Poisson2,
    #[value(name = "poisson-3")]
    Poisson3,
    Lindley,
    Userdata,
}

#[derive(Debug, Args)]
pub struct ReproduceArgs {
    #[arg(value_enum)]
    pub study: Study,
    /// Frequency table for `userdata`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[arg(long)]
    pub output_dir: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 500)]
    pub iters: usize,
    /// Simulated sample size for generator studies.
    #[arg(long, default_value_t = 10_000)]
    pub draws: usize,
    /// Observed lattice for `userdata`; counts starting at zero by default.
    #[arg(long, num_args = 4, value_names = ["C1", "K1", "C2", "K2"], default_values_t = [1.0, 0.0, 1.0, 0.0], allow_negative_numbers = true)]
    pub shift: Vec<f64>,
}
