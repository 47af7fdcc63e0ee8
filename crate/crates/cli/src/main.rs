//! Command line harness: dataset generation, experiment runs, reports.
//!
//! Exit codes: 0 on success, 2 for configuration problems (bad flags,
//! malformed or invalid config files), 3 for runtime failures.

mod config;
mod output;
mod presets;

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use clap::{Parser, Subcommand, ValueEnum};

use fedrisk_core::data::{generate, write_csv};
use fedrisk_core::error::Error;

use config::{ExperimentConfig, GeneratorSection};

#[derive(Parser)]
#[command(
    name = "fedrisk",
    version,
    about = "Deterministic federated training simulator for cross-institution risk models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-market risk dataset as CSV.
    GenData {
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Data seed; the same seed always writes the same bytes.
        #[arg(long)]
        seed: u64,
        /// Number of records.
        #[arg(long)]
        n: usize,
        /// Market weights as name=value pairs, e.g.
        /// "equity=0.4,crypto=0.3". Omitted markets keep their default
        /// share; the mix is renormalized to sum to one.
        #[arg(long)]
        markets: Option<String>,
    },
    /// Run the experiment described by a JSON config file.
    Run {
        /// Experiment config path.
        #[arg(long)]
        config: PathBuf,
        /// Output directory; overrides the config's output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed; overrides the config's master_seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Render the summary table of a finished run.
    Report {
        /// Run directory holding summary.csv.
        #[arg(long = "in")]
        input: PathBuf,
        /// Output format.
        #[arg(long, value_enum, default_value = "csv")]
        format: ReportFormat,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ReportFormat {
    Csv,
    Json,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = dispatch(cli) {
        eprintln!("error: {e}");
        let code = match e {
            Error::Config(_) | Error::Schema(_) | Error::Parse { .. } => 2,
            _ => 3,
        };
        std::process::exit(code);
    }
}

fn dispatch(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData {
            out,
            seed,
            n,
            markets,
        } => gen_data(out, seed, n, markets),
        Command::Run { config, out, seed } => run(config, out, seed),
        Command::Report { input, format } => report(input, format),
    }
}

fn gen_data(out: PathBuf, seed: u64, n: usize, markets: Option<String>) -> Result<(), Error> {
    let section = GeneratorSection {
        n_samples: n,
        seed: Some(seed),
        market_mix: markets.as_deref().map(parse_market_weights).transpose()?,
        ..GeneratorSection::default()
    };
    let cfg = section
        .resolve(seed)
        .map_err(|es| Error::config(es.join("; ")))?;
    let records = generate(&cfg)?;
    write_csv(&records, &out)?;
    println!("wrote {} records to {}", records.len(), out.display());
    Ok(())
}

fn parse_market_weights(s: &str) -> Result<BTreeMap<String, f64>, Error> {
    let mut map = BTreeMap::new();
    for part in s.split(',') {
        let part = part.trim();
        if part.is_empty() {
            continue;
        }
        let (name, value) = part.split_once('=').ok_or_else(|| {
            Error::config(format!("market weight {part:?} is not name=value"))
        })?;
        let weight: f64 = value.trim().parse().map_err(|_| {
            Error::config(format!("market weight for {name:?} is not a number: {value:?}"))
        })?;
        map.insert(name.trim().to_string(), weight);
    }
    if map.is_empty() {
        return Err(Error::config("--markets lists no name=value pairs"));
    }
    Ok(map)
}

fn run(config_path: PathBuf, out: Option<PathBuf>, seed: Option<u64>) -> Result<(), Error> {
    let text = fs::read_to_string(&config_path).map_err(|e| {
        Error::config(format!("cannot read {}: {e}", config_path.display()))
    })?;
    let mut cfg = ExperimentConfig::from_json(&text)
        .map_err(|e| Error::Schema(format!("{}: {e}", config_path.display())))?;
    if let Some(seed) = seed {
        cfg.master_seed = seed;
    }
    if let Some(out) = out {
        cfg.output_dir = Some(out);
    }
    let errors = cfg.validate();
    if !errors.is_empty() {
        return Err(Error::config(format!(
            "configuration errors:\n  {}",
            errors.join("\n  ")
        )));
    }
    let out_dir = cfg.output_dir.clone().ok_or_else(|| {
        Error::config("no output directory: set output_dir in the config or pass --out")
    })?;
    let results = with_thread_cap(|| presets::run_experiment(&cfg))?;
    let files = output::write_results(&out_dir, &results)?;
    for file in &files {
        println!("wrote {}", out_dir.join(file).display());
    }
    print!("{}", output::describe(&results));
    Ok(())
}

/// Runs `f` on a thread pool capped at FEDRISK_THREADS threads when that
/// variable is set. Repetitions and parallel clients both draw from this
/// pool.
fn with_thread_cap<T: Send>(
    f: impl FnOnce() -> Result<T, Error> + Send,
) -> Result<T, Error> {
    match std::env::var("FEDRISK_THREADS") {
        Err(std::env::VarError::NotPresent) => f(),
        Err(e) => Err(Error::config(format!("FEDRISK_THREADS: {e}"))),
        Ok(s) => {
            let threads: usize = s
                .trim()
                .parse()
                .ok()
                .filter(|&n| n >= 1)
                .ok_or_else(|| {
                    Error::config(format!(
                        "FEDRISK_THREADS must be a positive integer, got {s:?}"
                    ))
                })?;
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::config(format!("FEDRISK_THREADS: {e}")))?;
            pool.install(f)
        }
    }
}

fn report(input: PathBuf, format: ReportFormat) -> Result<(), Error> {
    let path = input.join(output::SUMMARY_FILE);
    let table = output::read_table(&path)?;
    match format {
        ReportFormat::Csv => {
            print!("{}", fs::read_to_string(&path)?);
        }
        ReportFormat::Json => {
            let json = output::table_to_json(&table);
            let text = serde_json::to_string_pretty(&json)
                .map_err(|e| Error::Schema(e.to_string()))?;
            println!("{text}");
        }
    }
    Ok(())
}
