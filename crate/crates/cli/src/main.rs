//! `qboost`: quality scale recovery from ACR ratings and pair comparisons.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use qboost_core::metrics::agreement_proportion;
use qboost_core::pcm::{pcm_from_acr, pcm_merge, AcrRatingTable, PairComparisonMatrix};
use qboost_core::quadrature::gauss_hermite_rule;
use qboost_core::sampler::{select_batch_with, BatchMode};
use qboost_core::scale::{fit, FitOptions, ModelKind, QualityEstimate};
use qboost_core::sim::{run_simulation, NoiseModel, SimulationConfig};
use thiserror::Error;

#[derive(Debug, Error)]
enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl From<qboost_core::Error> for CliError {
    fn from(e: qboost_core::Error) -> Self {
        use qboost_core::Error as E;
        match e {
            E::SingularInformation | E::InvalidDispersion(_) | E::UndefinedCorrelation(_) | E::DisconnectedDesign(_) => {
                CliError::Numerical(e.to_string())
            }
            E::InvalidConfig(_) | E::QuadratureOrder(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "qboost", version, about = "Quality scale recovery from ACR ratings and pair comparisons")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Mode {
    Tree,
    TopK,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Noise {
    Gaussian,
    UniformAdditive,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Convert ACR ratings (observer_id,stimulus_id,rating) to a PCM CSV.
    IngestAcr {
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Reject ratings below this value.
        #[arg(long, requires = "scale_max")]
        scale_min: Option<f64>,
        /// Reject ratings above this value.
        #[arg(long, requires = "scale_min")]
        scale_max: Option<f64>,
    },
    /// Fit a scaling model to a PCM CSV and write the estimate as JSON.
    Fit {
        input: PathBuf,
        #[arg(long, default_value = "case3", value_parser = parse_model)]
        model: ModelKind,
        #[arg(short, long)]
        output: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        pseudocount: Option<f64>,
        #[arg(long)]
        dispersion_ridge: Option<f64>,
    },
    /// Pick the next comparison batch from an estimate JSON.
    Select {
        estimate: PathBuf,
        #[arg(long)]
        batch_size: usize,
        #[arg(long, default_value_t = 21)]
        quadrature_order: usize,
        #[arg(long, value_enum, default_value_t = Mode::Tree)]
        mode: Mode,
        #[arg(long, default_value_t = 1)]
        iteration: usize,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Sum two PCM CSVs over the same stimuli.
    Merge {
        base: PathBuf,
        delta: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Monte Carlo comparison of the scaling models inside the active loop.
    Simulate {
        #[arg(long, default_value_t = 60)]
        n: usize,
        #[arg(long, default_value_t = 100)]
        reps: usize,
        #[arg(long, default_value_t = 50)]
        trials: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Comma-separated subset of case3,case5,bt.
        #[arg(long, value_delimiter = ',', default_value = "case3,case5,bt", value_parser = parse_model)]
        models: Vec<ModelKind>,
        /// Start every loop from a simulated, quantized ACR pass.
        #[arg(long)]
        acr_init: bool,
        #[arg(long, default_value_t = 15)]
        acr_observers: usize,
        #[arg(long, default_value_t = 5)]
        acr_levels: u32,
        #[arg(long, value_enum, default_value_t = Noise::Gaussian)]
        noise: Noise,
        #[arg(long, value_enum, default_value_t = Mode::Tree)]
        mode: Mode,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Agreement between a ground-truth PCM CSV and an estimate's ranking.
    Agreement { pcm: PathBuf, estimate: PathBuf },
    /// Run the study service.
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long, default_value = "studies")]
        data_dir: PathBuf,
    },
}

fn parse_model(s: &str) -> std::result::Result<ModelKind, String> {
    s.parse().map_err(|e: qboost_core::Error| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(e.code());
    }
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}

/// Caps the rayon pool at `QBOOST_THREADS` when set.
fn configure_threads() -> Result<()> {
    let Ok(raw) = std::env::var("QBOOST_THREADS") else {
        return Ok(());
    };
    let threads: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|t| *t > 0)
        .ok_or_else(|| CliError::Usage(format!("QBOOST_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| CliError::Usage(e.to_string()))
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::IngestAcr {
            input,
            output,
            scale_min,
            scale_max,
        } => {
            let table = read_acr(&input, scale_min.zip(scale_max))?;
            let pcm = pcm_from_acr(&table)?;
            write_pcm(&pcm, output.as_deref())
        }
        Command::Fit {
            input,
            model,
            output,
            seed,
            pseudocount,
            dispersion_ridge,
        } => {
            let pcm = read_pcm(&input)?;
            let defaults = FitOptions::default();
            let opts = FitOptions {
                seed,
                pseudocount: pseudocount.unwrap_or(defaults.pseudocount),
                dispersion_ridge: dispersion_ridge.unwrap_or(defaults.dispersion_ridge),
                ..defaults
            };
            let est = fit(model, &pcm, &opts, None)?;
            write_json(&est, output.as_deref())?;
            if !est.converged {
                return Err(CliError::Numerical(format!(
                    "{model} fit did not reach the gradient tolerance; estimate written anyway"
                )));
            }
            Ok(())
        }
        Command::Select {
            estimate,
            batch_size,
            quadrature_order,
            mode,
            iteration,
            output,
        } => {
            let est = read_estimate(&estimate)?;
            let rule = gauss_hermite_rule(quadrature_order)?;
            let mut batch = select_batch_with(&est, batch_size, &rule, batch_mode(mode))?;
            batch.iteration = iteration;
            write_json(&batch, output.as_deref())
        }
        Command::Merge { base, delta, output } => {
            let merged = pcm_merge(&read_pcm(&base)?, &read_pcm(&delta)?)?;
            write_pcm(&merged, output.as_deref())
        }
        Command::Simulate {
            n,
            reps,
            trials,
            seed,
            models,
            acr_init,
            acr_observers,
            acr_levels,
            noise,
            mode,
            format,
            output,
        } => {
            let config = SimulationConfig {
                n,
                reps,
                standard_trials: trials,
                models,
                batch_mode: batch_mode(mode),
                noise: match noise {
                    Noise::Gaussian => NoiseModel::Gaussian,
                    Noise::UniformAdditive => NoiseModel::UniformAdditive,
                },
                acr_init,
                acr_observers,
                acr_levels,
                seed,
                ..SimulationConfig::default()
            };
            config.validate()?;
            let report = run_simulation(&config)?;
            match format {
                Format::Json => write_json(&report, output.as_deref()),
                Format::Csv => write_bytes(report.to_csv().as_bytes(), output.as_deref()),
            }
        }
        Command::Agreement { pcm, estimate } => {
            let pcm = read_pcm(&pcm)?;
            let est = read_estimate(&estimate)?;
            let scores = pcm
                .ids()
                .iter()
                .map(|id| {
                    est.stimulus_ids
                        .iter()
                        .position(|e| e == id)
                        .map(|k| est.s_hat[k])
                        .ok_or_else(|| CliError::Data(format!("estimate has no score for stimulus {id}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            let agreement = agreement_proportion(&pcm, &scores)?;
            if agreement.missing > 0 || agreement.score_ties > 0 {
                eprintln!(
                    "warning: {} pair(s) without ground-truth comparisons, {} tied score pair(s)",
                    agreement.missing, agreement.score_ties
                );
            }
            write_json(&agreement, None)
        }
        Command::Serve { port, host, data_dir } => serve(&host, port, &data_dir),
    }
}

fn batch_mode(mode: Mode) -> BatchMode {
    match mode {
        Mode::Tree => BatchMode::SpanningTree,
        Mode::TopK => BatchMode::TopK,
    }
}

fn serve(host: &str, port: u16, data_dir: &Path) -> Result<()> {
    let state = qboost_service::AppState::open(data_dir).map_err(|e| CliError::Data(e.to_string()))?;
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Data(e.to_string()))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind((host, port))
            .await
            .map_err(|e| CliError::Usage(format!("cannot bind {host}:{port}: {e}")))?;
        let addr = listener.local_addr().map_err(|e| CliError::Data(e.to_string()))?;
        eprintln!("serving {} studies from {} on http://{addr}", state.study_ids().len(), data_dir.display());
        qboost_service::serve(listener, state)
            .await
            .map_err(|e| CliError::Data(e.to_string()))
    })
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn with_path(path: &Path) -> impl Fn(qboost_core::Error) -> CliError + '_ {
    move |e| match CliError::from(e) {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    }
}

fn read_acr(path: &Path, bounds: Option<(f64, f64)>) -> Result<AcrRatingTable> {
    let table = AcrRatingTable::read_csv(open(path)?).map_err(with_path(path))?;
    let Some((min, max)) = bounds else {
        return Ok(table);
    };
    let mut bounded = AcrRatingTable::with_bounds(min, max);
    for (obs, row) in table.observers() {
        for (stim, &r) in row {
            bounded.insert(obs, stim, r).map_err(with_path(path))?;
        }
    }
    Ok(bounded)
}

fn read_pcm(path: &Path) -> Result<PairComparisonMatrix> {
    PairComparisonMatrix::read_csv(open(path)?).map_err(with_path(path))
}

fn read_estimate(path: &Path) -> Result<QualityEstimate> {
    let mut text = String::new();
    open(path)?
        .read_to_string(&mut text)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let est: QualityEstimate = serde_json::from_str(&text).map_err(|e| {
        CliError::Data(format!("{}: line {} column {}: {e}", path.display(), e.line(), e.column()))
    })?;
    est.validate().map_err(with_path(path))?;
    Ok(est)
}

fn write_bytes(bytes: &[u8], output: Option<&Path>) -> Result<()> {
    let io = |e: io::Error| CliError::Data(e.to_string());
    match output {
        Some(p) => {
            let mut w = BufWriter::new(File::create(p).map_err(|e| CliError::Data(format!("{}: {e}", p.display())))?);
            w.write_all(bytes).map_err(io)?;
            w.flush().map_err(io)
        }
        None => io::stdout().lock().write_all(bytes).map_err(io),
    }
}

fn write_json<T: serde::Serialize>(value: &T, output: Option<&Path>) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    bytes.push(b'\n');
    write_bytes(&bytes, output)
}

fn write_pcm(pcm: &PairComparisonMatrix, output: Option<&Path>) -> Result<()> {
    let mut bytes = Vec::new();
    pcm.write_csv(&mut bytes)?;
    write_bytes(&bytes, output)
}
