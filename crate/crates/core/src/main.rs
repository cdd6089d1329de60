use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use inspection_bl::io::{load_inputs, RunInputs};
use inspection_bl::pipeline::{run_analysis, simulate_study, validate_inputs};
use inspection_bl::simulator::{SystemModel, Truth};
use inspection_bl::Error;

#[derive(Parser)]
#[command(version, about = "Bayes linear variance learning for corrosion inspection data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prior check, calibration, adjustment, forecasts and diagnostics.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        realizations: Option<usize>,
        #[arg(long)]
        extend_months: Option<usize>,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Replicated synthetic datasets on the configured design.
    SimulateStudy {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        true_wx: f64,
        #[arg(long)]
        true_sigr: f64,
        #[arg(long)]
        replicates: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        realizations: Option<usize>,
        /// Only the variance estimator; no Σ_r calibration per replicate.
        #[arg(long)]
        no_calibration: bool,
        #[arg(long, default_value = "study")]
        out: PathBuf,
    },
    /// Parse the inputs and print the prior discrepancy.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn load(config: &Path, seed: Option<u64>, realizations: Option<usize>) -> inspection_bl::Result<RunInputs> {
    let mut inputs = load_inputs(config)?;
    if let Some(s) = seed {
        inputs.prior.rng_seed = s;
    }
    if let Some(n) = realizations {
        inputs.prior.ensemble_size = n;
    }
    inputs.prior.validate()?;
    Ok(inputs)
}

fn run(cli: Cli) -> inspection_bl::Result<()> {
    match cli.command {
        Command::Analyze {
            config,
            seed,
            realizations,
            extend_months,
            out,
        } => {
            let mut inputs = load(&config, seed, realizations)?;
            if let Some(m) = extend_months {
                inputs.extend_months = m;
            }
            let analysis = run_analysis(&inputs)?;
            analysis.outputs().commit(&out)?;
            print!("{}", analysis.summary());
        }
        Command::SimulateStudy {
            config,
            true_wx,
            true_sigr,
            replicates,
            seed,
            realizations,
            no_calibration,
            out,
        } => {
            let inputs = load(&config, seed, realizations)?;
            if !(true_wx > 0.0 && true_sigr >= 0.0) {
                return Err(Error::Config("true variances must be positive".into()));
            }
            let model = SystemModel::new(inputs.prior, inputs.topology)?;
            let truth = Truth {
                mu_wx: true_wx,
                sigma_r: true_sigr,
            };
            let study = simulate_study(&model, &inputs.dataset, truth, replicates, !no_calibration)?;
            study.outputs().commit(&out)?;
            let (m, lo, hi) = study.estimator_summary();
            println!("estimator over {replicates} replicates: mean {m} (sqrt {})", m.sqrt());
            println!("5%: {lo} (sqrt {}), 95%: {hi} (sqrt {})", lo.sqrt(), hi.sqrt());
        }
        Command::Validate { config } => {
            let inputs = load(&config, None, None)?;
            print!("{}", validate_inputs(&inputs)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            match e {
                Error::Config(_) | Error::Parse { .. } | Error::Io { .. } | Error::InvalidPrior(_) => ExitCode::from(2),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
