//! `steinpair` command-line front end.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod commands;
mod input;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Environment variable read when `--threads` is absent.
pub const THREADS_ENV: &str = "STEINPAIR_THREADS";

#[derive(Parser, Debug)]
#[command(name = "steinpair", version, about = "Stein-method distance bounds for reversible Markov chain functionals")]
pub struct Cli {
    /// Worker threads (overrides STEINPAIR_THREADS).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Write the JSON report here instead of stdout.
    #[arg(long, short, global = true)]
    out: Option<PathBuf>,
    /// Progress messages on stderr.
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Command {
    /// Spectrum, gap and Poincare constant of a reversible kernel.
    AnalyzeKernel(AnalyzeArgs),
    /// One Stein bound for a functional of a reversible kernel.
    Bound(BoundArgs),
    /// Hoeffding decomposition summary on a product space.
    Hoeffding(HoeffdingArgs),
    /// Normal approximation bound for a degenerate U-statistic.
    UstatBound(UstatArgs),
    /// Pearson chi-square statistic bound.
    Pearson(PearsonArgs),
    /// Geometric random graph subgraph-count bound over an n grid.
    Geomgraph(GeomGraphArgs),
    /// Empirical Wasserstein distance and dominance verdict.
    Verify(VerifyArgs),
    /// Bound, W1 estimate and verdict over an n grid, as CSV.
    #[command(subcommand)]
    Sweep(SweepCommand),
}

#[derive(Args, Debug, Serialize)]
pub struct AnalyzeArgs {
    /// Kernel as CSV (`mu, K(x, .)` rows) or JSON (`labels`, `mu`, `K`).
    #[arg(long)]
    pub kernel: PathBuf,
    /// Optional functional to project onto the eigenspaces.
    #[arg(long)]
    pub functional: Option<PathBuf>,
    /// Relative tolerance for clustering eigenvalues.
    #[arg(long, default_value_t = steinpair::core_operator::DEFAULT_CLUSTER_TOL)]
    pub cluster_tol: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct BoundArgs {
    #[arg(long)]
    pub kernel: PathBuf,
    #[arg(long)]
    pub functional: PathBuf,
    /// gb11, gb12, gb21, gb22, genexpair2, gb31, gb32, gb33, cb1, cb2,
    /// gamma_first, gamma_second or gamma_pair.
    #[arg(long)]
    pub variant: String,
    /// Gamma target parameter.
    #[arg(long)]
    pub nu: Option<f64>,
    /// Pair coefficient for cb1, cb2, gamma_pair (default E[Gamma(F)] / Var F).
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Conditioning of the classical bounds: x or w.
    #[arg(long, default_value = "x")]
    pub conditioning: String,
    /// Sup norm of h' for Gamma bounds.
    #[arg(long, default_value_t = 1.0)]
    pub h1: f64,
    /// Sup norm of h'' for Gamma bounds.
    #[arg(long, default_value_t = 1.0)]
    pub h2: f64,
    /// Report path (same as --out).
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(long, default_value_t = steinpair::core_operator::DEFAULT_CLUSTER_TOL)]
    pub cluster_tol: f64,
}

#[derive(Args, Debug, Serialize)]
pub struct HoeffdingArgs {
    /// Product space JSON (`alphabets`, `marginals`).
    #[arg(long)]
    pub space: PathBuf,
    /// Functional over configurations in index order, or `label,value` rows.
    #[arg(long)]
    pub functional: PathBuf,
    /// Also evaluate the product-space bound (F must be normalized).
    #[arg(long)]
    pub bound: bool,
    /// JSON map from order to kappa_q; defaults to 2q.
    #[arg(long)]
    pub kappa: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct UstatArgs {
    /// Tensor CSV (`i_1, ..., i_m, value` rows) or builtin:
    /// coincidence, coincidence3, product.
    #[arg(long)]
    pub kernel: String,
    /// Alphabet size (required for builtins; inferred from the CSV otherwise).
    #[arg(long)]
    pub alphabet: Option<usize>,
    /// Letter weights, inline (`0.2,0.8`) or a CSV path; uniform by default.
    #[arg(long)]
    pub nu: Option<String>,
    /// Sample size.
    #[arg(long)]
    pub n: usize,
    /// genboundsymstat, symustat1 or symustat2.
    #[arg(long, default_value = "symustat1")]
    pub variant: String,
    /// JSON map `"p,q,r,l" -> K`; missing keys are then an error.
    #[arg(long)]
    pub k_constants: Option<PathBuf>,
    /// Draws for the empirical distance (0 skips it).
    #[arg(long, default_value_t = 0)]
    pub mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct PearsonArgs {
    #[arg(long)]
    pub n: usize,
    /// Number of classes (ignored with csv:).
    #[arg(long)]
    pub m: Option<usize>,
    /// uniform, zipf:<alpha> or csv:<path>.
    #[arg(long, default_value = "uniform")]
    pub dist: String,
    /// rate or explicit.
    #[arg(long, default_value = "rate")]
    pub mode: String,
    /// Draws for the empirical distance (0 skips it).
    #[arg(long, default_value_t = 0)]
    pub mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug, Clone, Serialize)]
pub struct GeomGraphArgs {
    #[arg(long)]
    pub d: usize,
    /// edge, triangle, path3 or adj:<csv>.
    #[arg(long, default_value = "edge")]
    pub motif: String,
    /// cube or gauss.
    #[arg(long, default_value = "cube")]
    pub density: String,
    /// Radius rule `c*n^-a`.
    #[arg(long)]
    pub tn: String,
    /// Comma-separated increasing sample sizes.
    #[arg(long, value_delimiter = ',', required = true)]
    pub ngrid: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Simulated graphs per n.
    #[arg(long, default_value_t = 20_000)]
    pub replicates: usize,
    /// Monte Carlo draws per contraction norm.
    #[arg(long, default_value_t = 400_000)]
    pub norm_samples: usize,
    /// Also fit the variance growth exponent (needs four grid points).
    #[arg(long)]
    pub variance_check: bool,
}

#[derive(Args, Debug, Serialize)]
pub struct VerifyArgs {
    /// Sampler specification JSON (tagged by `kind`).
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    pub samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// normal or gamma:<nu>.
    #[arg(long, default_value = "normal")]
    pub against: String,
    /// Bound report JSON whose total is checked for dominance.
    #[arg(long)]
    pub bound: Option<PathBuf>,
}

#[derive(Subcommand, Debug, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepCommand {
    /// Pearson statistic over `--ngrid`.
    Pearson(PearsonSweepArgs),
    /// Geometric graph counts over `--ngrid`.
    Geomgraph(GeomGraphSweepArgs),
}

#[derive(Args, Debug, Serialize)]
pub struct PearsonSweepArgs {
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, default_value = "uniform")]
    pub dist: String,
    #[arg(long, default_value = "rate")]
    pub mode: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub ngrid: Vec<usize>,
    #[arg(long, default_value_t = 100_000)]
    pub mc_samples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// CSV output path (stdout when absent).
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
pub struct GeomGraphSweepArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub graph: GeomGraphArgs,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

/// Process exit statuses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok = 0,
    Validation = 1,
    Numerical = 2,
    Dominance = 3,
}

impl From<&steinpair::Error> for Status {
    fn from(e: &steinpair::Error) -> Self {
        if e.is_numerical() {
            Status::Numerical
        } else {
            Status::Validation
        }
    }
}

fn configure_threads(requested: Option<usize>) -> steinpair::Result<()> {
    let threads = match requested {
        Some(t) => Some(t),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) => Some(v.trim().parse().map_err(|_| steinpair::Error::Invalid(format!("{THREADS_ENV}={v:?} is not a thread count")))?),
            Err(_) => None,
        },
    };
    if let Some(t) = threads {
        if t == 0 {
            return Err(steinpair::Error::Invalid("thread count must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new().num_threads(t).build_global().map_err(|e| steinpair::Error::Invalid(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(Status::Validation as u8) } else { ExitCode::SUCCESS };
        }
    };
    let status = configure_threads(cli.threads).and_then(|_| commands::run(&cli));
    match status {
        Ok(s) => ExitCode::from(s as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(Status::from(&e) as u8)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_status_by_error_kind() {
        assert_eq!(Status::from(&steinpair::Error::Numerical("x".into())), Status::Numerical);
        assert_eq!(Status::from(&steinpair::Error::Invalid("x".into())), Status::Validation);
        assert_eq!(Status::from(&steinpair::Error::Precondition("x".into())), Status::Validation);
    }

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
