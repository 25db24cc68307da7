use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use fedgwc::config::{parse_override, LoadedConfig};
use fedgwc::pipeline::{self, StateKind};
use fedgwc::{formats, Result};

#[derive(Parser)]
#[command(name = "fedgwc", version, about = "Clustered federated learning simulator")]
struct Cli {
    /// Root for default output directories.
    #[arg(long, env = "FEDGWC_OUT", default_value = "fedgwc-out", global = true)]
    out_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic federation from a config file.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Output directory [default: <out-root>/federation]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Override a config key, e.g. `--set federation.seed=3`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run an experiment on a generated federation.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        federation: PathBuf,
        /// Output directory [default: <out-root>/run]
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Score a labeling record against a federation (WAS, WADB, Rand).
    Eval {
        #[arg(long)]
        federation: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Also write the metrics record to this file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Emit tab-separated tables from a completed run.
    Report {
        #[arg(long)]
        run: PathBuf,
    },
    /// Print a final cluster's interaction or affinity matrix.
    DumpState {
        #[arg(long)]
        run: PathBuf,
        #[arg(long)]
        cluster: usize,
        #[arg(long, value_enum, default_value_t = Kind::Interaction)]
        kind: Kind,
        /// RBF spread for the affinity matrix [default: the run's beta]
        #[arg(long)]
        beta: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Interaction,
    Affinity,
}

fn load(config: &Path, overrides: &[String]) -> Result<LoadedConfig> {
    let parsed = overrides.iter().map(|o| parse_override(o)).collect::<Result<Vec<_>>>()?;
    LoadedConfig::from_file(config, &parsed)
}

// Writes to stdout, ignoring a closed pipe (`fedgwc ... | head`).
macro_rules! say {
    ($($arg:tt)*) => {{
        let _ = writeln!(std::io::stdout(), $($arg)*);
    }};
}

fn json(value: &impl serde::Serialize) -> String {
    serde_json::to_string_pretty(value).expect("serializable")
}

fn execute(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Generate { config, out, overrides } => {
            let loaded = load(&config, &overrides)?;
            let out = out.unwrap_or_else(|| cli.out_root.join("federation"));
            let manifest = pipeline::generate(&loaded, &out)?;
            say!("wrote {} clients to {}", manifest.clients.len(), out.display());
        }
        Command::Run { config, federation, out, overrides } => {
            let loaded = load(&config, &overrides)?;
            let out = out.unwrap_or_else(|| cli.out_root.join("run"));
            let report = pipeline::run(&loaded, &federation, &out)?;
            say!("clusters: {}", report.n_clusters);
            say!("mean balanced accuracy: {:.4}", report.mean_accuracy);
            if let Some(ri) = report.rand_index {
                say!("rand index vs ground truth: {ri:.4}");
            }
            say!("outputs in {}", out.display());
            if report.aborted_rounds > 0 {
                eprintln!("error: {} cluster rounds aborted on divergence; see the log", report.aborted_rounds);
                return Ok(ExitCode::from(3));
            }
        }
        Command::Eval { federation, labels, out } => {
            let record = pipeline::eval(&federation, &labels)?;
            if let Some(path) = out {
                formats::write_json(&path, &record)?;
            }
            say!("{}", json(&record));
        }
        Command::Report { run } => {
            for p in pipeline::report(&run)? {
                say!("{}", p.display());
            }
        }
        Command::DumpState { run, cluster, kind, beta } => {
            let kind = match kind {
                Kind::Interaction => StateKind::Interaction,
                Kind::Affinity => StateKind::Affinity,
            };
            let beta = match beta {
                Some(b) => b,
                None if matches!(kind, StateKind::Affinity) => pipeline::run_beta(&run)?,
                None => 0.0,
            };
            let _ = write!(std::io::stdout(), "{}", pipeline::dump_state(&run, cluster, kind, beta)?);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(u8::try_from(e.exit_code()).unwrap_or(1))
        }
    }
}
