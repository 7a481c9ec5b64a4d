//! Command-line front end: `maskgen`, `mvindex`, `weibel`, `eval` and
//! `overlay`.
//!
//! Every failure is reported as a one-line `{"error", "detail"}` object on
//! stderr with exit status 1 (bad input) or 2 (internal error).

pub mod commands;
pub mod config;
pub mod error;
pub mod report;

use std::ffi::OsString;
use std::panic::AssertUnwindSafe;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::PipelineConfig;
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "mvi",
    version,
    about = "Volume-corrected mitotic index pipeline"
)]
pub struct Cli {
    /// Pipeline configuration JSON.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Seed for random grid offsets; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build an epithelium reference mask from an IHC region.
    Maskgen(MaskgenArgs),
    /// Compute the M/V-Index report for an ROI.
    Mvindex(MvindexArgs),
    /// Estimate the epithelium fraction of a mask by point counting.
    Weibel(WeibelArgs),
    /// Compare masks or paired value series.
    Eval(EvalArgs),
    /// Render a TP/FP/FN overlay of two masks.
    Overlay(OverlayArgs),
}

#[derive(Debug, Args)]
pub struct MaskgenArgs {
    /// Tile manifest of the registered IHC region.
    #[arg(long)]
    pub ihc: PathBuf,
    /// Stain basis JSON; overrides the config.
    #[arg(long)]
    pub stains: Option<PathBuf>,
    /// MaskGenParams JSON; overrides the config.
    #[arg(long)]
    pub params: Option<PathBuf>,
    /// Output mask PNG. Parameters and warnings go to the `.json` beside it.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MvindexArgs {
    /// Manifest of the ROI frame the detections refer to.
    #[arg(long)]
    pub roi: PathBuf,
    /// Probability tile manifest (`.json`) or binary mask PNG.
    #[arg(long)]
    pub seg: PathBuf,
    /// Resolution of a mask PNG given to `--seg`; defaults to the ROI's.
    #[arg(long)]
    pub seg_mpp: Option<f64>,
    /// Detections, one JSON object per line.
    #[arg(long)]
    pub dets: PathBuf,
    /// Detection score threshold; overrides the config.
    #[arg(long)]
    pub det_threshold: Option<f64>,
    /// Report output; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// PNG with kept boxes in green and rejected ones in red.
    #[arg(long)]
    pub overlay: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct WeibelArgs {
    /// Mask PNG or mask tile manifest.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long, default_value_t = mvi_core::mvindex::WEIBEL_POINTS)]
    pub points: usize,
    /// Point offset inside each lattice cell as `x,y` in [0, 1); drawn from
    /// the seed when absent.
    #[arg(long, value_parser = parse_offset)]
    pub offset: Option<(f64, f64)>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, requires = "reference", conflicts_with_all = ["pred_series", "ref_series"])]
    pub pred: Option<PathBuf>,
    #[arg(long = "ref", id = "reference", requires = "pred")]
    pub reference: Option<PathBuf>,
    /// CSV with header `id,value`.
    #[arg(long, requires = "ref_series")]
    pub pred_series: Option<PathBuf>,
    #[arg(long, requires = "pred_series")]
    pub ref_series: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OverlayArgs {
    /// RGB PNG or tile manifest the masks were derived from.
    #[arg(long)]
    pub image: PathBuf,
    #[arg(long)]
    pub pred: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_offset(s: &str) -> Result<(f64, f64), String> {
    let (x, y) = s.split_once(',').ok_or("expected `x,y`")?;
    let parse = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("`{v}`: {e}"));
    Ok((parse(x)?, parse(y)?))
}

/// Parses `args`, runs the command and returns the process exit status.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let detail = e.to_string();
            let first = detail
                .lines()
                .next()
                .unwrap_or_default()
                .trim_start_matches("error: ");
            eprintln!("{}", CliError::new("usage", first).to_json_line());
            return error::EXIT_INPUT;
        }
    };
    let outcome = std::panic::catch_unwind(AssertUnwindSafe(|| execute(cli)));
    let result = outcome.unwrap_or_else(|payload| {
        let detail = payload
            .downcast_ref::<&str>()
            .map(|s| s.to_string())
            .or_else(|| payload.downcast_ref::<String>().cloned())
            .unwrap_or_else(|| "panic".into());
        Err(CliError::internal(detail))
    });
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            e.exit
        }
    }
}

fn execute(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let work = move || match cli.command {
        Command::Maskgen(a) => commands::maskgen(&a, &config),
        Command::Mvindex(a) => commands::mvindex(&a, &config),
        Command::Weibel(a) => commands::weibel(&a, &config),
        Command::Eval(a) => commands::eval(&a),
        Command::Overlay(a) => commands::overlay(&a, &config),
    };
    match cli.threads {
        Some(0) => Err(CliError::new("usage", "--threads must be ≥ 1")),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::internal(e.to_string()))?
            .install(work),
        None => work(),
    }
}
