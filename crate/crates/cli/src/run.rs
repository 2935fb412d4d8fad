//! Subcommand pipelines.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use serde::Serialize;
use serde_json::json;

use robust_alloc::adversarial::{self, AdversarialError, TrainConfig};
use robust_alloc::analytic::{log_saddle_quadvar, log_saddle_sqdev, log_value, solve_foc_2asset, AnalyticError};
use robust_alloc::backtest::{self, BacktestConfig, BacktestError, EstimationWindow, NoiseConfig};
use robust_alloc::fdm::{self, FdmConfig, FdmError, Grid1D};
use robust_alloc::linalg::Matrix;
use robust_alloc::mc::{self, McConfig, McError};
use robust_alloc::model::{ControlBounds, MarketParams, ModelError, Penalty, SaddleControls, SigmaHat, Utility};

use crate::config::{derive_seed, stream, RunConfig};
use crate::CliError;

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::Singular { .. } | ModelError::Linalg(_) => CliError::Numerical(e.to_string()),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

impl From<AnalyticError> for CliError {
    fn from(e: AnalyticError) -> Self {
        match e {
            AnalyticError::Model(m) => m.into(),
            AnalyticError::Domain(_) => CliError::Validation(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<FdmError> for CliError {
    fn from(e: FdmError) -> Self {
        match e {
            FdmError::Grid(_) => CliError::Validation(e.to_string()),
            FdmError::Model(m) => m.into(),
            FdmError::Analytic(a) => a.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<McError> for CliError {
    fn from(e: McError) -> Self {
        match e {
            McError::Config(_) => CliError::Validation(e.to_string()),
            McError::Model(m) => m.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<AdversarialError> for CliError {
    fn from(e: AdversarialError) -> Self {
        match e {
            AdversarialError::Config(_) | AdversarialError::Shape(_) => CliError::Validation(e.to_string()),
            AdversarialError::Model(m) => m.into(),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<BacktestError> for CliError {
    fn from(e: BacktestError) -> Self {
        match e {
            BacktestError::Io(io) => CliError::Io(io),
            BacktestError::NoiseTooLarge { .. } => CliError::Numerical(e.to_string()),
            BacktestError::Model(m) => m.into(),
            BacktestError::Analytic(a) => a.into(),
            _ => CliError::Validation(e.to_string()),
        }
    }
}

fn create(out: &Path, name: &str) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(out.join(name))?))
}

fn write_json(out: &Path, name: &str, v: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).expect("summary serializes");
    std::fs::write(out.join(name), text + "\n")?;
    Ok(())
}

fn sigma_json(s: &SigmaHat<f64>) -> serde_json::Value {
    match *s {
        SigmaHat::Vol(v) => json!({ "sigma": v }),
        SigmaHat::Pair { s1, s2, rho } => json!({ "sigma1": s1, "sigma2": s2, "rho": rho }),
    }
}

/// Analytic log-utility saddle for the configured market.
fn analytic_saddle(params: &MarketParams<f64>, utility: &Utility<f64>, pen: Penalty) -> Result<SaddleControls<f64>, CliError> {
    if !matches!(utility, Utility::Log) {
        return Err(CliError::Validation("closed forms exist for log utility only".into()));
    }
    match (params.dim(), pen) {
        (1, Penalty::SqDevVol) => Ok(log_saddle_sqdev(params)?),
        (1, Penalty::QuadVar) => Ok(log_saddle_quadvar(params)?),
        (2, Penalty::FrobDev | Penalty::FrobSq) => Ok(solve_foc_2asset(params, pen)?),
        (d, p) => Err(CliError::Validation(format!("no closed form for {p:?} with {d} asset(s)"))),
    }
}

pub fn analytic(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let params = cfg.market.params()?;
    let pen = cfg.market.penalty();
    let c = analytic_saddle(&params, &cfg.market.utility()?, pen)?;
    let value = log_value(0.0, cfg.market.x0, &params, pen, &c)?;
    println!("value  {value:.10}");
    println!("alpha  {:?}", c.alpha);
    match c.sigma {
        SigmaHat::Vol(s) => println!("sigma  {s:.10}"),
        SigmaHat::Pair { s1, s2, rho } => println!("sigma  ({s1:.10}, {s2:.10}), rho {rho:.10}"),
    }
    write_json(
        out,
        "summary.json",
        &json!({
            "value": value,
            "alpha": c.alpha,
            "worst_case": sigma_json(&c.sigma),
            "residual": c.residual,
            "degenerate": c.degenerate,
        }),
    )
}

fn fdm_solve(cfg: &RunConfig) -> Result<fdm::PdeSolution<f64>, CliError> {
    let params = cfg.market.params()?;
    let utility = cfg.market.utility()?;
    let pen = cfg.market.penalty();
    let o = &cfg.fdm;
    let x0 = cfg.market.x0;
    let power = matches!(utility, Utility::Power { .. });
    let x_min = o.x_min.unwrap_or(if power { 0.0 } else { x0 / 5.0 });
    let x_max = o.x_max.unwrap_or(if power { 10.0 * x0 } else { 5.0 * x0 });
    let grid = Grid1D::new(x_min, x_max, o.nodes, o.steps, params.horizon())?;
    let fc = FdmConfig { tol: o.tol, max_iter: o.max_iter, ..FdmConfig::default() };
    let sol = match (params.dim(), &utility) {
        (1, _) if pen != Penalty::QuadVar => {
            return Err(CliError::Validation("the one-asset solver is implemented for the quadvar penalty".into()))
        }
        (1, Utility::Log) => fdm::solve_log_1asset(&grid, &params, &fc)?,
        (1, Utility::Power { .. }) => fdm::solve_power_1asset(&grid, &params, &utility, &fc)?,
        (2, Utility::Log) => fdm::solve_log_2asset(&grid, &params, pen, &fc)?,
        _ => return Err(CliError::Validation("two-asset finite differences need log utility".into())),
    };
    Ok(sol)
}

pub fn fdm(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let sol = fdm_solve(cfg)?;
    sol.write_csv(create(out, "pde_values.csv")?)?;
    let value = sol.value_at(0, cfg.market.x0);
    println!("value at x0  {value:.10}");
    println!("max fixed-point iterations  {}", sol.max_iterations());
    write_json(
        out,
        "summary.json",
        &json!({
            "value": value,
            "max_iterations": sol.max_iterations(),
            "flagged_nodes": sol.flagged_nodes,
            "floored_vx": sol.floored_vx,
        }),
    )
}

fn mc_run(cfg: &RunConfig) -> Result<mc::McRun<f64>, CliError> {
    let params = cfg.market.params()?;
    let utility = cfg.market.utility()?;
    let o = &cfg.mc;
    let mcfg = McConfig {
        x0: cfg.market.x0,
        paths: o.paths,
        steps: o.steps,
        seed: derive_seed(cfg.seed, stream::BACKWARD),
        forward_seed: derive_seed(cfg.seed, stream::FORWARD),
        forward_paths: o.forward_paths,
        antithetic: o.antithetic.into(),
        bounds: ControlBounds::default(),
        law: None,
    };
    Ok(mc::run(&params, cfg.market.penalty(), &utility, &mcfg)?)
}

pub fn mc(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let run = mc_run(cfg)?;
    mc::write_diagnostics(&run.backward, create(out, "mc_diagnostics.csv")?)?;
    let e = run.estimates;
    println!("backward  {:.8} (se {:.2e})", e.backward, e.backward_se);
    println!("forward   {:.8} (se {:.2e})", e.forward, e.forward_se);
    let flagged: Vec<usize> = run.backward.fits.iter().filter(|f| f.flagged).map(|f| f.step).collect();
    write_json(
        out,
        "summary.json",
        &json!({
            "estimates": e,
            "bracket": [e.forward - 2.0 * e.forward_se, e.backward + 2.0 * e.backward_se],
            "flagged_steps": flagged,
            "initial_controls": run.backward.controls.first(),
        }),
    )
}

pub fn gan(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let params = cfg.market.params()?;
    let utility = cfg.market.utility()?;
    let pen = cfg.market.penalty();
    let o = &cfg.gan;
    let mut tc = TrainConfig::desk(cfg.market.x0, derive_seed(cfg.seed, stream::GAN));
    tc.samples = o.samples;
    tc.steps = o.steps;
    tc.epochs_fast = o.epochs_fast;
    tc.epochs_slow = o.epochs_slow;
    tc.lr_fast = o.lr_fast;
    tc.lr_slow = o.lr_slow;
    tc.batch = o.batch;
    tc.width = o.width;
    tc.beta = o.beta;
    tc.sigma_scale = o.sigma_scale;
    let res = adversarial::train(&tc, &params, pen, &utility)?;
    adversarial::write_history(&res.history, create(out, "loss_history.csv")?)?;
    adversarial::write_controls(&res.controls, create(out, "gan_controls.csv")?)?;
    let reference = analytic_saddle(&params, &utility, pen)
        .ok()
        .and_then(|c| log_value(0.0, cfg.market.x0, &params, pen, &c).ok());
    println!("learned value  {:.8}", res.value);
    if let Some(a) = reference {
        println!("analytic       {a:.8} (difference {:.2e})", res.value - a);
    }
    write_json(out, "summary.json", &json!({ "value": res.value, "analytic": reference, "controls": res.controls }))
}

fn noise_config(cfg: &RunConfig) -> Result<NoiseConfig, CliError> {
    let o = &cfg.noise;
    if o.mu.len() != 2 || o.sigma0.len() != 4 {
        return Err(CliError::Validation("noise study needs two drifts and a row-major 2x2 covariance".into()));
    }
    let s0 = Matrix::from_vec(2, 2, o.sigma0.clone()).map_err(|e| CliError::Validation(e.to_string()))?;
    let lambda_ref = o.lambda0.first().copied().unwrap_or(1.0);
    let nc = NoiseConfig {
        params: MarketParams::multi_asset(o.mu.clone(), o.r, s0, lambda_ref, 1.0)?,
        x0: 1.0,
        epsilons: o.eps.clone(),
        lambdas: o.lambda0.clone(),
        draws: o.draws,
        seed: derive_seed(cfg.seed, stream::NOISE),
        max_tries: o.max_tries,
    };
    if nc.lambdas.is_empty() || nc.epsilons.is_empty() {
        return Err(CliError::Validation("penalty and noise grids must be nonempty".into()));
    }
    nc.validate()?;
    Ok(nc)
}

pub fn noise(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let nc = noise_config(cfg)?;
    let rows = backtest::noise_experiment(&nc)?;
    backtest::write_noise_csv(&rows, create(out, "noise_table.csv")?)?;
    let mut crossings = Vec::new();
    for &l in &nc.lambdas {
        let c = backtest::crossing_point(&nc, l)?;
        match c {
            Some(e) => println!("lambda0 {l:>10}: crossing at eps {e:.6}"),
            None => println!("lambda0 {l:>10}: no crossing in range"),
        }
        crossings.push(json!({ "lambda0": l, "epsilon": c }));
    }
    // grid argmax per ε, ties to the smallest λ₀ (rows are in λ₀-major order)
    let mut best = Vec::new();
    for &e in &nc.epsilons {
        let mut pick: Option<(f64, f64)> = None;
        let mut cands: Vec<_> = rows.iter().filter(|r| r.epsilon == e).collect();
        cands.sort_by(|a, b| a.lambda0.total_cmp(&b.lambda0));
        for r in cands {
            if pick.is_none_or(|(_, u)| r.robust_eu > u) {
                pick = Some((r.lambda0, r.robust_eu));
            }
        }
        best.push(json!({ "epsilon": e, "lambda0": pick.map(|p| p.0) }));
    }
    write_json(out, "summary.json", &json!({ "crossing_points": crossings, "best_lambda": best }))
}

pub fn backtest(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let o = &cfg.backtest;
    let window = EstimationWindow { lookback: o.lookback, decay: o.decay, annualization: 252.0 };
    let (series, dropped, source) = match &o.prices {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Validation(format!("price file {} not found", p.display())));
            }
            let (s, a) = backtest::load_prices_csv(p, o.strict)?;
            (s, a.dropped, p.display().to_string())
        }
        None => {
            if o.fixture_mu.len() != 2 || o.fixture_sigma.len() != 4 {
                return Err(CliError::Validation("fixture needs two drifts and a row-major 2x2 covariance".into()));
            }
            let sig = Matrix::from_vec(2, 2, o.fixture_sigma.clone()).map_err(|e| CliError::Validation(e.to_string()))?;
            let days = o.lookback + o.fixture_starts + o.days + 1;
            let start = chrono::NaiveDate::from_ymd_opt(2010, 1, 4).expect("valid date");
            let s = backtest::generate_gbm(&["A", "B"], days, &o.fixture_mu, &sig, start, derive_seed(cfg.seed, stream::GBM))?;
            backtest::write_prices_csv(&s, create(out, "fixture_prices.csv")?)?;
            (s, 0, "synthetic GBM fixture".to_string())
        }
    };
    let last = series.len().checked_sub(o.days + 1).filter(|&l| l >= o.lookback).ok_or_else(|| {
        CliError::Validation(format!(
            "{} days of prices cannot cover a {}-day lookback and {} days ahead",
            series.len(),
            o.lookback,
            o.days
        ))
    })?;
    let mut starts: Vec<usize> = (o.lookback..=last).collect();
    if let Some(n) = o.starts {
        if n == 0 || n > starts.len() {
            return Err(CliError::Validation(format!("{n} starts requested, {} available", starts.len())));
        }
        starts.truncate(n);
    }
    let bc = BacktestConfig { lambda0: o.lambda0, r: o.r, days: o.days, window };
    let res = backtest::run_backtest(&series, &bc, &starts)?;
    backtest::write_backtest_csv(&res, create(out, "backtest.csv")?)?;
    for (d, why) in &res.skipped {
        eprintln!("skipped start {d}: {why}");
    }
    let s = &res.summary;
    println!("portfolios {} (skipped {}), source: {source}", s.portfolios, s.skipped);
    println!("robust     mean ln X_T {:.6}  std {:.6}", s.robust.mean_ln_xt, s.robust.std_ln_xt);
    println!("non-robust mean ln X_T {:.6}  std {:.6}", s.nonrobust.mean_ln_xt, s.nonrobust.std_ln_xt);
    write_json(out, "summary.json", &json!({ "summary": s, "dropped_dates": dropped, "source": source }))
}

pub fn xcheck(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let params = cfg.market.params()?;
    let pen = cfg.market.penalty();
    let utility = cfg.market.utility()?;
    if params.dim() != 1 || pen != Penalty::QuadVar || !matches!(utility, Utility::Log) {
        return Err(CliError::Validation("xcheck compares one-asset log utility under the quadvar penalty".into()));
    }
    let x0 = cfg.market.x0;
    let c = analytic_saddle(&params, &utility, pen)?;
    let exact = log_value(0.0, x0, &params, pen, &c)?;
    let sol = fdm_solve(cfg)?;
    let pde = sol.value_at(0, x0);
    let run = mc_run(cfg)?;
    let e = run.estimates;
    let (lo, hi) = (e.forward - 2.0 * e.forward_se, e.backward + 2.0 * e.backward_se);
    let fdm_ok = (pde - exact).abs() <= 1e-3;
    let mc_ok = lo <= exact && exact <= hi;
    println!("{:<10} {:>14} {:>14}", "method", "value", "minus exact");
    println!("{:<10} {:>14.8} {:>14}", "analytic", exact, "");
    println!("{:<10} {:>14.8} {:>14.2e}", "fdm", pde, pde - exact);
    println!("{:<10} {:>14.8} {:>14.2e}", "mc fwd", e.forward, e.forward - exact);
    println!("{:<10} {:>14.8} {:>14.2e}", "mc bwd", e.backward, e.backward - exact);
    println!("mc bracket [{lo:.8}, {hi:.8}]");
    println!("fdm within 1e-3: {}; analytic inside mc bracket: {}", pass(fdm_ok), pass(mc_ok));
    write_json(
        out,
        "summary.json",
        &json!({
            "analytic": exact,
            "fdm": pde,
            "mc": e,
            "bracket": [lo, hi],
            "fdm_ok": fdm_ok,
            "mc_ok": mc_ok,
        }),
    )?;
    if fdm_ok && mc_ok {
        Ok(())
    } else {
        Err(CliError::Numerical("methods disagree".into()))
    }
}

fn pass(b: bool) -> &'static str {
    if b {
        "pass"
    } else {
        "FAIL"
    }
}
