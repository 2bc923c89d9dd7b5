//! Batch frontend: phantom generation, registration, ISO vs ISO+RSO
//! comparison, gradient-share diagnostics and slice export.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use roireg::volume::Axis;
use roireg::{Error, ErrorKind, RoiBox};

pub mod commands;
pub mod config;

pub use commands::{
    cmd_compare, cmd_diagnose, cmd_phantom, cmd_register, cmd_slice, compare_arms, Comparison, CompareReport,
    RegisterMetrics,
};
pub use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "roireg", version, about = "Interactive deformable registration, batch mode")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic fixed/moving pair with known deformation.
    Phantom(PhantomArgs),
    /// Initialize, run ISO, then RSO for each listed box.
    Register(RegisterArgs),
    /// Run ISO-only and ISO+RSO arms from the same starting field.
    Compare(CompareArgs),
    /// Per-block gradient share of the full-image loss.
    Diagnose(DiagnoseArgs),
    /// Export one windowed slice as an 8-bit PNG.
    Slice(SliceArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Identity,
    Coarse,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Phantom spec JSON; the built-in acceptance phantom when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Overrides the spec's noise seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Run config JSON: {loss, optimizer, iso_iters, rso_iters, seed, init, ...}.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub init: Option<InitArg>,
    /// Control-grid levels for `--init coarse`.
    #[arg(long)]
    pub levels: Option<u32>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub reg_weight: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct RegisterArgs {
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub iso_iters: Option<usize>,
    #[arg(long)]
    pub rso_iters: Option<usize>,
    /// Inclusive voxel box `x0,y0,z0,x1,y1,z1`; repeat for several RSO rounds.
    #[arg(long = "roi")]
    pub rois: Vec<RoiBox>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub roi: RoiBox,
    #[arg(long, default_value_t = 500)]
    pub iso_only_iters: usize,
    /// ISO then RSO iteration counts of the second arm.
    #[arg(long, default_value = "100,400", value_parser = parse_pair)]
    pub combo: (usize, usize),
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub fixed: PathBuf,
    #[arg(long)]
    pub moving: PathBuf,
    /// Displacement field; zero when omitted.
    #[arg(long)]
    pub dvf: Option<PathBuf>,
    /// Block size `bx,by,bz` in voxels.
    #[arg(long, value_parser = parse_triple)]
    pub blocks: [usize; 3],
    /// Report path; printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SliceArgs {
    #[arg(long)]
    pub volume: PathBuf,
    /// Render `volume - subtract` instead.
    #[arg(long)]
    pub subtract: Option<PathBuf>,
    #[arg(long, default_value = "z")]
    pub axis: Axis,
    #[arg(long)]
    pub index: usize,
    /// Display window `lo,hi` in HU.
    #[arg(long, default_value = "-1000,500", value_parser = parse_window, allow_hyphen_values = true)]
    pub window: (f64, f64),
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_pair(s: &str) -> Result<(usize, usize), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok((a.parse().map_err(|e| format!("{e}"))?, b.parse().map_err(|e| format!("{e}"))?)),
        _ => Err(format!("expected `a,b`, got `{s}`")),
    }
}

fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{e}")))
        .collect::<Result<_, _>>()?;
    v.try_into().map_err(|_| format!("expected `bx,by,bz`, got `{s}`"))
}

fn parse_window(s: &str) -> Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    match parts.as_slice() {
        [a, b] => Ok((a.parse().map_err(|e| format!("{e}"))?, b.parse().map_err(|e| format!("{e}"))?)),
        _ => Err(format!("expected `lo,hi`, got `{s}`")),
    }
}

/// A failure tagged with the step that produced it.
#[derive(Debug, thiserror::Error)]
#[error("{stage}: {source}")]
pub struct CliError {
    pub stage: &'static str,
    #[source]
    pub source: Error,
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self.source.kind() {
            ErrorKind::Argument => 2,
            ErrorKind::Data => 3,
            ErrorKind::Numeric => 4,
            ErrorKind::State => 1,
        }
    }
}

pub(crate) trait Stage<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError>;
}

impl<T> Stage<T> for roireg::Result<T> {
    fn stage(self, stage: &'static str) -> Result<T, CliError> {
        self.map_err(|source| CliError { stage, source })
    }
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> roireg::Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

pub(crate) fn create_dir(path: &Path) -> roireg::Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Phantom(a) => cmd_phantom(&a).map(|_| ()),
        Command::Register(a) => cmd_register(&a).map(|_| ()),
        Command::Compare(a) => {
            let report = cmd_compare(&a)?;
            println!(
                "roi rmse: iso-only {:.2} HU, combo {:.2} HU",
                report.iso_only.roi_rmse_hu, report.combo.roi_rmse_hu
            );
            Ok(())
        }
        Command::Diagnose(a) => {
            let report = cmd_diagnose(&a)?;
            if a.out.is_none() {
                println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
            }
            Ok(())
        }
        Command::Slice(a) => cmd_slice(&a),
    }
}

pub fn main_with_args(args: impl IntoIterator<Item = String>) -> ExitCode {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
