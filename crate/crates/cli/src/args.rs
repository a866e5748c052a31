use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{Convention, DrcMode, Format, MethodChoice, SolverFlags};

#[derive(Debug, Parser)]
#[command(name = "riskquant", version, about = "Magnitude-propensity risk quantization and default-risk engines")]
pub struct Cli {
    /// TOML file with default settings; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// VaR, ES and worst case of a PnL sample.
    Measure(MeasureArgs),
    /// Two- and three-point magnitude/propensity quantizers.
    Quantize(QuantizeArgs),
    /// Default Risk Charge engines.
    Drc {
        #[arg(value_enum)]
        mode: DrcMode,
        #[command(flatten)]
        args: DrcArgs,
    },
    /// Daily measures and quantizers over a directory of PnL files.
    ReportSeries(SeriesArgs),
}

#[derive(Debug, Clone, Args)]
pub struct InputArgs {
    /// PnL file (CSV, semicolon or tab separated).
    #[arg(long)]
    pub input: PathBuf,
    /// Column to read; the first column by default.
    #[arg(long)]
    pub column: Option<String>,
    #[arg(long, value_enum)]
    pub convention: Option<Convention>,
}

#[derive(Debug, Clone, Args)]
pub struct OutputArgs {
    /// Report destination; stdout when omitted.
    #[arg(long, short)]
    pub output: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub format: Option<Format>,
}

#[derive(Debug, Clone, Args)]
pub struct MeasureArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// ES level when it differs from `alpha`.
    #[arg(long)]
    pub es_alpha: Option<f64>,
    /// Horizon in days for square-root-of-time scaling.
    #[arg(long)]
    pub horizon: Option<u32>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct QuantizeArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, value_enum)]
    pub method: Option<MethodChoice>,
    /// Floor the extreme magnitude at the VaR of level `alpha`.
    #[arg(long)]
    pub constrained: bool,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Also solve the two-point problem.
    #[arg(long)]
    pub two_point: bool,
    /// Criticality-check directions.
    #[arg(long)]
    pub directions: Option<usize>,
    /// Write a loss histogram (CSV) here.
    #[arg(long)]
    pub histogram: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub bins: usize,
    /// Write the final transport plan (CSV) here.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[command(flatten)]
    pub solver: SolverFlags,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct DrcArgs {
    /// Portfolio CSV: ead, lgd, pd, then rho or beta_1..beta_K.
    #[arg(long)]
    pub portfolio: PathBuf,
    /// Square factor correlation CSV for multi-factor portfolios.
    #[arg(long)]
    pub correlation: Option<PathBuf>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Monte Carlo scenarios.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Gauss–Hermite order of the exact enumerator.
    #[arg(long)]
    pub quad_order: Option<usize>,
    /// Half width of the tail window, in ranks.
    #[arg(long)]
    pub half_width: Option<usize>,
    /// Write the scenario set (CSV) here.
    #[arg(long)]
    pub scenarios: Option<PathBuf>,
    #[command(flatten)]
    pub output: OutputArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SeriesArgs {
    /// Directory of daily PnL files, processed in file-name order.
    #[arg(long)]
    pub dir: PathBuf,
    #[arg(long)]
    pub column: Option<String>,
    #[arg(long, value_enum)]
    pub convention: Option<Convention>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_enum)]
    pub method: Option<MethodChoice>,
    #[arg(long)]
    pub constrained: bool,
    #[command(flatten)]
    pub solver: SolverFlags,
    #[command(flatten)]
    pub output: OutputArgs,
}
