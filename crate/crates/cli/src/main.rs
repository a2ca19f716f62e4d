use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use zofed_cli::config::parse_config;
use zofed_cli::runner::run_experiment;
use zofed_cli::verify::{run_suite, VerifyOptions};
use zofed_cli::HarnessError;
use zofed_core::engine::twostage::tuned_budget;
use zofed_core::tuning::{tuned_gamma, tuned_local_steps};
use zofed_core::Variant;

#[derive(Parser)]
#[command(name = "zofed", version, about = "Zeroth-order federated optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cell and replication of an experiment config.
    Run {
        config: PathBuf,
        /// Output directory; overrides `output_dir` from the config.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Number of cells run concurrently.
        #[arg(long, default_value_t = 1)]
        parallel_cells: usize,
    },
    /// Run the built-in oracle checks.
    Verify {
        /// Suite name: all, ball, unbiasedness, moreau, contraction, cournot, local_sgd, toy.
        #[arg(default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Multiply the VI step size by this factor (negative control).
        #[arg(long, default_value_t = 1.0)]
        break_alpha: f64,
    },
    /// Print tuned step size and local steps for known constants.
    Tune {
        variant: VariantArg,
        /// Number of clients.
        #[arg(long)]
        m: usize,
        /// Total iteration budget K.
        #[arg(long)]
        k: u64,
        #[arg(long)]
        eta: Option<f64>,
        /// Lipschitz constant of the (implicit) objective.
        #[arg(long)]
        l0: Option<f64>,
        /// Problem dimension.
        #[arg(long)]
        n: Option<usize>,
        /// Strong-monotonicity modulus of the lower-level VI (two-stage).
        #[arg(long)]
        mu_f: Option<f64>,
        /// Lipschitz constant of the lower-level VI map (two-stage).
        #[arg(long)]
        l_f: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    SingleLevel,
    Bilevel,
    Minimax,
    TwoStage,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::SingleLevel => Variant::SingleLevel,
            VariantArg::Bilevel => Variant::Bilevel,
            VariantArg::Minimax => Variant::Minimax,
            VariantArg::TwoStage => Variant::TwoStage,
        }
    }
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    match cli.command {
        Command::Run {
            config,
            out,
            parallel_cells,
        } => {
            let parsed = parse_config(&config)?;
            let out_dir = out
                .or_else(|| parsed.base.output_dir.clone().map(|d| parsed.base_dir.join(d)))
                .unwrap_or_else(|| PathBuf::from("results").join(&parsed.base.name));
            let report = run_experiment(&parsed, &out_dir, parallel_cells.max(1))?;
            println!(
                "{} cells, {} runs; results in {}",
                report.cells,
                report.jobs,
                out_dir.display()
            );
            if report.failures.is_empty() {
                Ok(())
            } else {
                for f in &report.failures {
                    eprintln!("{f}");
                }
                Err(HarnessError::Engine(format!("{} of {} runs failed", report.failures.len(), report.jobs)))
            }
        }
        Command::Verify { suite, seed, break_alpha } => {
            let checks = run_suite(&suite, &VerifyOptions { seed, alpha_factor: break_alpha })?;
            for c in &checks {
                println!("{c}");
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            println!("{} checks, {failed} failed", checks.len());
            if failed == 0 {
                Ok(())
            } else {
                Err(HarnessError::Check(format!("{failed} of {} checks failed", checks.len())))
            }
        }
        Command::Tune {
            variant,
            m,
            k,
            eta,
            l0,
            n,
            mu_f,
            l_f,
        } => {
            let variant = Variant::from(variant);
            println!("gamma = {}", tuned_gamma(variant, m, k, eta, l0, n)?);
            println!("H = {}", tuned_local_steps(k, m)?);
            if let (Variant::TwoStage, Some(mu), Some(l)) = (variant, mu_f, l_f) {
                let b = tuned_budget(mu, l)?;
                println!("tau = {}", b.tau);
                println!("alpha = {}", b.alpha);
            }
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
