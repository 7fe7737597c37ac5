use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use pathlab::harness::{run_experiment, sweep, ExperimentConfig, HarnessError, Overrides, SweepParam, REGISTRY};

#[derive(Parser)]
#[command(name = "pathlab", version, about = "Stochastic calculus on path space of embedded manifolds")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and print its report.
    Run {
        /// Experiment id; may instead come from the config file.
        experiment: Option<String>,
        #[command(flatten)]
        flags: Flags,
    },
    /// Rerun an experiment over a parameter and fit the convergence rate.
    Sweep {
        experiment: Option<String>,
        /// `dt` or `n-paths`.
        #[arg(long)]
        param: SweepParam,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[command(flatten)]
        flags: Flags,
    },
    /// List registered experiments.
    List,
}

#[derive(Args)]
struct Flags {
    /// TOML file with the same keys as these flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    manifold: Option<String>,
    #[arg(long)]
    scheme: Option<String>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    n_paths: Option<usize>,
    #[arg(long)]
    n_resamples: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    z_max: Option<f64>,
    #[arg(long)]
    budget: Option<f64>,
    #[arg(long)]
    gate_factor: Option<f64>,
    /// Directory for CSV and summary files.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the first few solution paths.
    #[arg(long)]
    dump_paths: bool,
}

impl Flags {
    fn resolve(self, experiment: Option<String>) -> Result<ExperimentConfig, HarnessError> {
        let file = match &self.config {
            Some(p) => Overrides::from_file(p)?,
            None => Overrides::default(),
        };
        let cli = Overrides {
            experiment,
            manifold: self.manifold,
            scheme: self.scheme,
            horizon: self.horizon,
            dt: self.dt,
            n_paths: self.n_paths,
            n_resamples: self.n_resamples,
            seed: self.seed,
            z_max: self.z_max,
            budget: self.budget,
            gate_factor: self.gate_factor,
            out: self.out,
            dump_paths: self.dump_paths.then_some(true),
        };
        let merged = file.merge(cli);
        let id = merged
            .experiment
            .clone()
            .ok_or_else(|| HarnessError::Config("no experiment given".into()))?;
        ExperimentConfig::resolve(&id, &merged)
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> Result<bool, HarnessError> {
    match cli.command {
        Command::List => {
            let width = REGISTRY.iter().map(|e| e.id().len()).max().unwrap_or(0);
            for e in REGISTRY {
                println!("{:<width$}  {}", e.id(), e.summary());
            }
            Ok(true)
        }
        Command::Run { experiment, flags } => {
            let cfg = flags.resolve(experiment)?;
            let report = run_experiment(&cfg)?;
            print!("{}", report.summary());
            Ok(report.passed())
        }
        Command::Sweep { experiment, param, values, flags } => {
            let cfg = flags.resolve(experiment)?;
            let report = sweep(&cfg, param, &values)?;
            for r in &report.reports {
                print!("{}", r.summary());
            }
            print!("{}", report.summary());
            Ok(report.passed())
        }
    }
}
