//! `cha`: generate codes and masks, run simulated acquisitions, and
//! demultiplex measurement files.
//!
//! Exit status: 0 on success, 2 for usage, configuration or input errors,
//! 3 when a simulation precondition fails at run time.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use cha_core::codes::{build_code, CodeError, CodeKind, CodeMatrix, MaskPattern};
use cha_core::experiments::{run_scenario, ExperimentError};
use cha_core::io::{
    base_to_csv, matrix_from_csv, matrix_to_csv, mask_svg, parse_config, read_text,
    signal_table_from_csv, signal_table_to_csv, write_atomic, write_report, IoError,
};
use cha_core::multiplex::{
    average_mse, monte_carlo_gain, snr_gain, theoretical_gain, Demultiplexer,
};

#[derive(Debug, Parser)]
#[command(name = "cha", version, about = "Coded aperture multiplexing toolkit")]
struct Cli {
    /// Master random seed (overrides the config file).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Monte-Carlo trials (overrides the config file).
    #[arg(long, global = true)]
    trials: Option<usize>,
    /// Output directory for reports.
    #[arg(long, global = true)]
    outdir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    SMatrix,
    Hadamard,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum CodeFormat {
    Matrix,
    Base,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write an S-matrix (or Sylvester Hadamard) code as CSV.
    GenCode {
        #[arg(long)]
        n: usize,
        #[arg(long, value_enum, default_value = "s-matrix")]
        kind: Kind,
        #[arg(long, value_enum, default_value = "matrix")]
        format: CodeFormat,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also print the noise statistics of the design.
        #[arg(long)]
        stats: bool,
    },
    /// Write the mask strip as an SVG drawing in millimetres.
    MaskSvg {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        pitch_mm: f64,
        #[arg(long)]
        diameter_mm: f64,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the scenario named in a JSON config and write a report directory.
    Simulate {
        #[arg(long)]
        config: PathBuf,
    },
    /// Recover element signals from a measurement CSV (time column + n columns).
    Demux {
        #[arg(long)]
        input: PathBuf,
        /// Code order; the S-matrix is regenerated.
        #[arg(long, conflicts_with = "matrix", required_unless_present = "matrix")]
        n: Option<usize>,
        /// Explicit weighing matrix CSV.
        #[arg(long)]
        matrix: Option<PathBuf>,
        /// Output file; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tabulate closed-form and Monte-Carlo gains for a set of designs.
    Report {
        /// S-matrix orders to include.
        #[arg(long, value_delimiter = ',', default_value = "7,31,59")]
        orders: Vec<usize>,
        /// Hadamard orders to include.
        #[arg(long, value_delimiter = ',', default_value = "4,8,16,32")]
        hadamard: Vec<usize>,
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        /// Output file; `<outdir>/gain_report.csv` or stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Runtime(m) => m,
        }
    }
}

impl From<CodeError> for Failure {
    fn from(e: CodeError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        Failure::Usage(e.to_string())
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        if e.is_config() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

fn runtime<E: std::fmt::Display>(e: E) -> Failure {
    Failure::Runtime(e.to_string())
}

fn emit(out: Option<&Path>, text: &str) -> Result<(), Failure> {
    match out {
        Some(path) => write_atomic(path, text.as_bytes()).map_err(runtime),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn code_for(kind: Kind, n: usize) -> Result<CodeMatrix, Failure> {
    let kind = match kind {
        Kind::SMatrix => CodeKind::SMatrix,
        Kind::Hadamard => CodeKind::Hadamard,
    };
    Ok(build_code(kind, n)?)
}

fn gen_code(
    n: usize,
    kind: Kind,
    format: CodeFormat,
    out: Option<&Path>,
    stats: bool,
) -> Result<(), Failure> {
    let w = code_for(kind, n)?;
    let text = match format {
        CodeFormat::Matrix => matrix_to_csv(&w),
        CodeFormat::Base => {
            let base: Vec<u8> = w.row(0).iter().map(|&v| v as u8).collect();
            if matches!(kind, Kind::Hadamard) {
                return Err(Failure::Usage(
                    "base format is only defined for cyclic S-matrix codes".into(),
                ));
            }
            base_to_csv(&base)
        }
    };
    emit(out, &text)?;
    let weight: i64 = w.row(0).iter().map(|&v| v as i64).sum();
    let gain = snr_gain(&w).map_err(runtime)?;
    eprintln!("n = {n}");
    eprintln!("row weight = {weight}");
    eprintln!("gain = {gain:.4}");
    if stats {
        let theory = theoretical_gain(w.kind(), n).map_err(runtime)?;
        let mse = average_mse(&w, 1.0).map_err(runtime)?;
        eprintln!("theoretical gain = {theory:.4}");
        eprintln!("mse / sigma^2 = {mse:.6}");
    }
    Ok(())
}

fn mask_svg_cmd(n: usize, pitch: f64, diameter: f64, out: Option<&Path>) -> Result<(), Failure> {
    let mask = MaskPattern::s_matrix(n, pitch, diameter)?;
    emit(out, &mask_svg(&mask))
}

fn simulate(cli: &Cli, config: &Path) -> Result<(), Failure> {
    let text = read_text(config)?;
    let mut loaded = parse_config(&text)?;
    for notice in &loaded.notices {
        info!("{notice}");
    }
    if let Some(seed) = cli.seed {
        loaded.file.config.seed = seed;
    }
    if let Some(trials) = cli.trials {
        loaded.file.config.trials = trials;
    }
    loaded.file.config.validate()?;
    let outdir = cli
        .outdir
        .clone()
        .unwrap_or_else(|| PathBuf::from(format!("cha-{}", loaded.file.scenario.name())));
    info!(
        "running {} (n = {}, seed = {})",
        loaded.file.scenario.name(),
        loaded.file.config.code_order,
        loaded.file.config.seed
    );
    let report = run_scenario(loaded.file.scenario, &loaded.file.config)?;
    let written = write_report(&outdir, &report).map_err(runtime)?;
    for path in written {
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

fn demux(
    input: &Path,
    n: Option<usize>,
    matrix: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), Failure> {
    let table = signal_table_from_csv(&read_text(input)?)?;
    let w = match (n, matrix) {
        (_, Some(path)) => matrix_from_csv(&read_text(path)?)?,
        (Some(n), None) => code_for(Kind::SMatrix, n)?,
        (None, None) => return Err(Failure::Usage("either --n or --matrix is required".into())),
    };
    if table.columns() != w.n() {
        return Err(Failure::Usage(format!(
            "measurement file has {} data columns but the code order is {}",
            table.columns(),
            w.n()
        )));
    }
    let d = Demultiplexer::new(&w).map_err(|e| Failure::Usage(e.to_string()))?;
    let xhat = d.apply(&table.values).map_err(runtime)?;
    emit(out, &signal_table_to_csv(&table.time, &xhat, "x"))
}

fn report(
    cli: &Cli,
    orders: &[usize],
    hadamard: &[usize],
    sigma: f64,
    out: Option<&Path>,
) -> Result<(), Failure> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Failure::Usage(format!("--sigma must be positive, got {sigma}")));
    }
    let trials = cli.trials.unwrap_or(10_000);
    let seed = cli.seed.unwrap_or(1);
    let mut designs: Vec<CodeMatrix> = Vec::new();
    for &n in orders {
        designs.push(code_for(Kind::SMatrix, n)?);
    }
    for &n in hadamard {
        designs.push(code_for(Kind::Hadamard, n)?);
    }
    let mut csv = String::from(
        "design,kind,n,theoretical_gain,snr_gain,mse_over_sigma2,mc_gain,mc_stderr\n",
    );
    for w in &designs {
        let n = w.n();
        let kind = match w.kind() {
            CodeKind::SMatrix => "s_matrix",
            CodeKind::Hadamard => "hadamard",
            CodeKind::Identity => "identity",
            CodeKind::Custom => "custom",
        };
        let theory = theoretical_gain(w.kind(), n).map_err(runtime)?;
        let gain = snr_gain(w).map_err(runtime)?;
        let mse = average_mse(w, 1.0).map_err(runtime)?;
        let mc = monte_carlo_gain(w, sigma, trials, seed).map_err(|e| Failure::Usage(e.to_string()))?;
        csv.push_str(&format!(
            "{kind}_{n},{kind},{n},{theory:e},{gain:e},{mse:e},{:e},{:e}\n",
            mc.measured_gain, mc.stderr
        ));
    }
    let target = out
        .map(Path::to_path_buf)
        .or_else(|| cli.outdir.as_ref().map(|d| d.join("gain_report.csv")));
    if let Some(path) = &target {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(runtime)?;
        }
    }
    emit(target.as_deref(), &csv)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::GenCode {
            n,
            kind,
            format,
            out,
            stats,
        } => gen_code(*n, *kind, *format, out.as_deref(), *stats),
        Command::MaskSvg {
            n,
            pitch_mm,
            diameter_mm,
            out,
        } => mask_svg_cmd(*n, *pitch_mm, *diameter_mm, out.as_deref()),
        Command::Simulate { config } => simulate(cli, config),
        Command::Demux {
            input,
            n,
            matrix,
            out,
        } => demux(input, *n, matrix.as_deref(), out.as_deref()),
        Command::Report {
            orders,
            hadamard,
            sigma,
            out,
        } => report(cli, orders, hadamard, *sigma, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
