//! `epiwave` command line: generate synthetic incidence data, fit the
//! transmission-rate model, verify gradients, and recompute diagnostics.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use epiwave::config::RunConfig;
use epiwave::io::DiagnosticsRow;
use epiwave::pipeline::{
    run_diagnose, run_fit, run_gradcheck, run_synth, PipelineError,
};

#[derive(Parser)]
#[command(
    name = "epiwave",
    version,
    about = "Bayesian estimation of time-varying disease-transmission rates",
    after_help = "Set EPIWAVE_THREADS to bound the worker-thread count."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags shared by every subcommand that reads a run configuration.
#[derive(Args)]
struct ConfigArgs {
    /// Run-configuration TOML file; omit to use built-in defaults.
    config: Option<PathBuf>,
    /// Override the master RNG seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Override the population size N.
    #[arg(long, value_name = "N")]
    population: Option<f64>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, PipelineError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path).map_err(|e| PipelineError::Usage(e.to_string()))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(output) = &self.output {
            cfg.output = output.clone();
        }
        if let Some(n) = self.population {
            cfg.model.population = Some(n);
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (CSV plus ground-truth sidecar).
    Synth {
        #[command(flatten)]
        config: ConfigArgs,
        /// Wave period/decay scale of the generating transmission curve.
        #[arg(long)]
        a: Option<f64>,
        /// Inverse amplitude of the generating transmission curve.
        #[arg(long)]
        b: Option<f64>,
        /// Number of observed days.
        #[arg(long)]
        horizon: Option<usize>,
    },
    /// Fit the model to an incidence CSV and write draws and summaries.
    Fit {
        #[command(flatten)]
        config: ConfigArgs,
        /// Incidence CSV (`day,date,count`); overrides the config value.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Override the number of chains.
        #[arg(long)]
        chains: Option<usize>,
        /// Override the number of production draws per chain.
        #[arg(long)]
        production: Option<usize>,
        /// Override the number of burn-in steps per chain.
        #[arg(long)]
        burnin: Option<usize>,
    },
    /// Compare analytic gradients against finite differences.
    Gradcheck {
        #[command(flatten)]
        config: ConfigArgs,
        /// Corrupt the sensitivity Jacobian by this relative amount; a
        /// nonzero value must make the check fail (negative control).
        #[arg(long, default_value_t = 0.0)]
        jacobian_fuzz: f64,
    },
    /// Recompute convergence diagnostics from saved draw files.
    Diagnose {
        /// Directory holding draws_chain_*.csv (defaults to the config's
        /// output directory).
        #[arg(long)]
        dir: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn print_diag_rows(rows: &[DiagnosticsRow]) {
    if rows.is_empty() {
        println!("no convergence diagnostics (need at least 2 chains x 8 draws)");
        return;
    }
    println!("{:<12} {:>10} {:>12} {:>10}", "parameter", "rhat", "split_rhat", "ess");
    for row in rows {
        println!(
            "{:<12} {:>10} {:>12} {:>10.1}",
            row.parameter,
            row.rhat.to_string(),
            row.split_rhat.to_string(),
            row.ess
        );
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Synth { config, a, b, horizon } => {
            let mut cfg = config.load()?;
            if let Some(a) = a {
                cfg.synth.a = a;
            }
            if let Some(b) = b {
                cfg.synth.b = b;
            }
            if let Some(h) = horizon {
                cfg.model.horizon = Some(h);
            }
            let out = run_synth(&cfg)?;
            println!(
                "wrote {} ({} days) and {}",
                out.dataset_csv.display(),
                out.n_days,
                out.truth_sidecar.display()
            );
            Ok(())
        }
        Command::Fit { config, data, chains, production, burnin } => {
            let mut cfg = config.load()?;
            if let Some(data) = data {
                cfg.data = Some(data);
            }
            if let Some(chains) = chains {
                cfg.sampler.n_chains = chains;
            }
            if let Some(production) = production {
                cfg.sampler.n_production = production;
            }
            if let Some(burnin) = burnin {
                cfg.sampler.n_burnin = burnin;
            }
            let out = run_fit(&cfg)?;
            println!(
                "fit complete: {} chains ({} failed), {} draws",
                out.n_chains_ok, out.n_chains_failed, out.total_draws
            );
            for path in &out.draw_files {
                println!("  draws:       {}", path.display());
            }
            println!("  diagnostics: {}", out.diagnostics_csv.display());
            println!("  chain stats: {}", out.chain_stats_csv.display());
            println!("  beta(t):     {}", out.beta_csv.display());
            println!("  R0(t):       {}", out.r0_csv.display());
            println!("  predictive:  {}", out.predictive_csv.display());
            if !out.nonconverged.is_empty() {
                println!(
                    "warning: split R-hat above 1.1 for: {}",
                    out.nonconverged.join(", ")
                );
            }
            Ok(())
        }
        Command::Gradcheck { config, jacobian_fuzz } => {
            let cfg = config.load()?;
            let report = run_gradcheck(&cfg, jacobian_fuzz)?;
            for (label, err) in &report.per_model {
                println!("{label}: max relative gradient error {err:.3e}");
            }
            println!(
                "max relative gradient error {:.3e} over {} points per model (tolerance {:.0e})",
                report.max_rel_err, report.n_points, report.tolerance
            );
            if report.passed {
                println!("PASS");
                Ok(())
            } else {
                println!("FAIL");
                Err(PipelineError::Numerical(format!(
                    "gradient error {:.3e} exceeds {:.0e}",
                    report.max_rel_err, report.tolerance
                )))
            }
        }
        Command::Diagnose { dir, config } => {
            let cfg = config.load()?;
            let dir = dir.unwrap_or_else(|| cfg.output.clone());
            let report = run_diagnose(&dir)?;
            println!(
                "{} chains, at least {} draws each",
                report.n_chains, report.min_draws
            );
            print_diag_rows(&report.rows);
            println!("rewrote {}", report.diagnostics_csv.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    epiwave::par::init_threads_from_env();

    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
