//! `robust-alloc`: analytic, finite-difference, Monte Carlo and adversarial
//! solvers for the penalized robust allocation game, plus the noisy-covariance
//! study and the rolling backtest.
//!
//! Exit codes: 0 success, 2 invalid input, 1 numerical failure.

mod config;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use thiserror::Error;

use config::{BacktestArgs, FdmArgs, GanArgs, MarketArgs, McArgs, NoiseArgs, RunConfig};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid input: {0}")]
    Validation(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Validation(_) => 2,
            _ => 1,
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "robust-alloc", version, about = "Penalized robust portfolio allocation solvers", allow_negative_numbers = true)]
struct Cli {
    /// JSON run configuration; flags override its values
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// output directory
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// worker threads (1 gives bitwise-reproducible runs)
    #[arg(long, global = true, env = "ROBUST_ALLOC_THREADS")]
    threads: Option<usize>,
    /// master seed; per-stream seeds are derived from it
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Closed-form log-utility saddle point and value
    #[command(allow_negative_numbers = true)]
    Analytic {
        #[command(flatten)]
        market: MarketArgs,
    },
    /// Implicit finite-difference value surface
    #[command(allow_negative_numbers = true)]
    Fdm {
        #[command(flatten)]
        market: MarketArgs,
        #[command(flatten)]
        fdm: FdmArgs,
    },
    /// Regression Monte Carlo with control randomization
    #[command(allow_negative_numbers = true)]
    Mc {
        #[command(flatten)]
        market: MarketArgs,
        #[command(flatten)]
        mc: McArgs,
    },
    /// Alternating training of allocation and volatility networks
    #[command(allow_negative_numbers = true)]
    Gan {
        #[command(flatten)]
        market: MarketArgs,
        #[command(flatten)]
        gan: GanArgs,
    },
    /// Robust versus plain weights under a noisy covariance
    #[command(allow_negative_numbers = true)]
    Noise {
        #[command(flatten)]
        noise: NoiseArgs,
    },
    /// Rolling backtest on daily prices
    #[command(allow_negative_numbers = true)]
    Backtest {
        #[command(flatten)]
        backtest: BacktestArgs,
    },
    /// Analytic, finite-difference and Monte Carlo values side by side
    #[command(allow_negative_numbers = true)]
    Xcheck {
        #[command(flatten)]
        market: MarketArgs,
        #[command(flatten)]
        fdm: FdmArgs,
        #[command(flatten)]
        mc: McArgs,
    },
}

fn effective_config(cli: &Cli) -> Result<(RunConfig, &'static str), CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let name = match &cli.cmd {
        Cmd::Analytic { market } => {
            market.apply(&mut cfg.market);
            "analytic"
        }
        Cmd::Fdm { market, fdm } => {
            market.apply(&mut cfg.market);
            fdm.apply(&mut cfg.fdm);
            "fdm"
        }
        Cmd::Mc { market, mc } => {
            market.apply(&mut cfg.market);
            mc.apply(&mut cfg.mc);
            "mc"
        }
        Cmd::Gan { market, gan } => {
            market.apply(&mut cfg.market);
            gan.apply(&mut cfg.gan);
            "gan"
        }
        Cmd::Noise { noise } => {
            noise.apply(&mut cfg.noise);
            "noise"
        }
        Cmd::Backtest { backtest } => {
            backtest.apply(&mut cfg.backtest);
            "backtest"
        }
        Cmd::Xcheck { market, fdm, mc } => {
            market.apply(&mut cfg.market);
            fdm.apply(&mut cfg.fdm);
            mc.apply(&mut cfg.mc);
            "xcheck"
        }
    };
    cfg.command = Some(name.to_string());
    Ok((cfg, name))
}

fn execute(cli: &Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::Validation("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Validation(format!("thread pool: {e}")))?;
    }
    let (cfg, name) = effective_config(cli)?;
    std::fs::create_dir_all(&cli.out)?;
    let echo = serde_json::to_string_pretty(&cfg).expect("config serializes");
    std::fs::write(cli.out.join("run_config.json"), echo + "\n")?;
    match name {
        "analytic" => run::analytic(&cfg, &cli.out),
        "fdm" => run::fdm(&cfg, &cli.out),
        "mc" => run::mc(&cfg, &cli.out),
        "gan" => run::gan(&cfg, &cli.out),
        "noise" => run::noise(&cfg, &cli.out),
        "backtest" => run::backtest(&cfg, &cli.out),
        "xcheck" => run::xcheck(&cfg, &cli.out),
        _ => unreachable!(),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code())
        }
    }
}
