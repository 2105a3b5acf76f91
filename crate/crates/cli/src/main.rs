use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedsurrogate::Error;
use fedsurrogate_cli::commands::{cmd_run, cmd_sweep, exit, exit_code, SweepAxis};
use fedsurrogate_cli::config::RunConfig;
use fedsurrogate_cli::verify::{report, run_suites, VerifyOptions};

#[derive(Parser)]
#[command(
    name = "fedsurrogate",
    version,
    about = "Local-update optimization lab on quadratic federated objectives"
)]
struct Cli {
    /// Only print errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Metrics CSV path; overrides the configured output.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (0 = all cores); overrides the config.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one configuration and write its metrics CSV.
    Run(RunArgs),
    /// Check the theory against the implementation.
    Verify {
        /// Suite name, or `all`.
        #[arg(default_value = "all")]
        suite: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Random instances per randomized check.
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        /// Draws per Monte-Carlo estimate.
        #[arg(long, default_value_t = 100_000)]
        mc_draws: usize,
        /// Seeds for statistical convergence checks.
        #[arg(long, default_value_t = 100)]
        seeds: usize,
    },
    /// Run a configuration once per grid value.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated client rates.
        #[arg(
            long,
            value_delimiter = ',',
            conflicts_with = "k_grid",
            required_unless_present = "k_grid"
        )]
        gamma_grid: Option<Vec<f64>>,
        /// Comma-separated local step counts.
        #[arg(long, value_delimiter = ',')]
        k_grid: Option<Vec<usize>>,
    },
}

fn load(args: &RunArgs) -> Result<(RunConfig, Option<PathBuf>), Error> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        config.master_seed = s;
    }
    if let Some(w) = args.workers {
        config.workers = w;
    }
    let base = args.config.parent().map(Path::to_path_buf);
    let out = args.out.clone().or_else(|| {
        config.output.as_ref().map(|p| match &base {
            Some(b) if p.is_relative() => b.join(p),
            _ => p.clone(),
        })
    });
    Ok((config, out))
}

fn base_dir(args: &RunArgs) -> Option<PathBuf> {
    args.config.parent().map(Path::to_path_buf)
}

fn main_inner(cli: Cli) -> Result<i32, Error> {
    match cli.command {
        Command::Run(args) => {
            let (config, out) = load(&args)?;
            let (_, output) = cmd_run(&config, base_dir(&args).as_deref(), out.as_deref())?;
            if out.is_none() {
                print!("{}", String::from_utf8_lossy(&output.csv));
            }
            if let Some(t) = output.result.diverged_at {
                log::warn!("run diverged at round {t}");
            }
            log::info!("final iterate {:?}", output.result.final_x.as_slice());
            Ok(exit::OK)
        }
        Command::Verify {
            suite,
            seed,
            instances,
            mc_draws,
            seeds,
        } => {
            let opts = VerifyOptions {
                seed,
                mc_draws,
                instances,
                seeds,
            };
            let checks = run_suites(&suite, &opts)?;
            print!("{}", report(&checks));
            Ok(if checks.iter().all(|c| c.pass) {
                exit::OK
            } else {
                exit::VERIFY_FAILED
            })
        }
        Command::Sweep {
            run,
            gamma_grid,
            k_grid,
        } => {
            let (config, out) = load(&run)?;
            let axis = match (gamma_grid, k_grid) {
                (Some(g), _) => SweepAxis::Gamma(g),
                (None, Some(k)) => SweepAxis::K(k),
                (None, None) => return Err(Error::InvalidParameter("sweep needs --gamma-grid or --k-grid".into())),
            };
            let sweep = cmd_sweep(&config, base_dir(&run).as_deref(), &axis, out.as_deref())?;
            if out.is_none() {
                print!("{}", String::from_utf8_lossy(&sweep.csv));
            }
            for p in &sweep.points {
                log::info!(
                    "{}={} final {:?} predicted {:?}",
                    p.axis,
                    p.value,
                    p.final_x,
                    p.predicted_x
                );
            }
            Ok(exit::OK)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "error" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let code = match main_inner(cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    };
    ExitCode::from(code as u8)
}
