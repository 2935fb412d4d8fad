//! Robust versus plain log-optimal portfolios: a noisy-covariance study
//! and a rolling backtest on daily prices.
//!
//! Everything here works on `f64` price data.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use chrono::{Datelike, NaiveDate, Weekday};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::analytic::{solve_foc_2asset, AnalyticError};
use crate::linalg::{cholesky, Matrix};
use crate::model::{nonrobust_log_weights, MarketParams, ModelError, Penalty};

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("assets are not aligned; missing dates: {0}")]
    Unaligned(String),
    #[error("invalid data: {0}")]
    Data(String),
    #[error("not enough history: need index >= {need}, got {got}")]
    InsufficientHistory { need: usize, got: usize },
    #[error("noise size {epsilon} too large: no positive definite covariance after {tries} draws")]
    NoiseTooLarge { epsilon: f64, tries: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Analytic(#[from] AnalyticError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Daily closes on a common date index.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceSeries {
    pub assets: Vec<String>,
    pub dates: Vec<NaiveDate>,
    /// `closes[asset][day]`
    pub closes: Vec<Vec<f64>>,
}

impl PriceSeries {
    pub fn new(assets: Vec<String>, dates: Vec<NaiveDate>, closes: Vec<Vec<f64>>) -> Result<Self, BacktestError> {
        if assets.len() != closes.len() {
            return Err(BacktestError::Data(format!("{} asset ids, {} close series", assets.len(), closes.len())));
        }
        if dates.windows(2).any(|w| w[0] >= w[1]) {
            return Err(BacktestError::Data("dates must be strictly increasing".into()));
        }
        for (a, c) in assets.iter().zip(&closes) {
            if c.len() != dates.len() {
                return Err(BacktestError::Data(format!("{a}: {} closes for {} dates", c.len(), dates.len())));
            }
            if let Some(i) = c.iter().position(|&v| !(v > 0.0 && v.is_finite())) {
                return Err(BacktestError::Data(format!("{a}: non-positive close on {}", dates[i])));
            }
        }
        Ok(Self { assets, dates, closes })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Simple return of `asset` from day `i − 1` to day `i`.
    pub fn ret(&self, asset: usize, i: usize) -> f64 {
        let c = &self.closes[asset];
        (c[i] - c[i - 1]) / c[i - 1]
    }
}

/// Outcome of aligning per-asset dates.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Alignment {
    /// dates present for some but not all assets
    pub dropped: usize,
}

/// Reads `date,asset_id,close` rows. Dates missing for some asset are dropped
/// (inner join) or, with `strict`, rejected.
pub fn read_prices_csv<R: Read>(reader: R, strict: bool) -> Result<(PriceSeries, Alignment), BacktestError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["date", "asset_id", "close"] {
        return Err(BacktestError::Parse { line: 1, msg: format!("expected header date,asset_id,close, got {}", headers.iter().collect::<Vec<_>>().join(",")) });
    }
    let mut per_asset: BTreeMap<String, BTreeMap<NaiveDate, f64>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line());
        let err = |msg: String| BacktestError::Parse { line, msg };
        if rec.len() != 3 {
            return Err(err(format!("expected 3 fields, got {}", rec.len())));
        }
        let date = NaiveDate::parse_from_str(&rec[0], "%Y-%m-%d").map_err(|e| err(format!("bad date {:?}: {e}", &rec[0])))?;
        let asset = rec[1].to_string();
        if asset.is_empty() {
            return Err(err("empty asset id".into()));
        }
        let close: f64 = rec[2].parse().map_err(|e| err(format!("bad close {:?}: {e}", &rec[2])))?;
        if !(close > 0.0 && close.is_finite()) {
            return Err(err(format!("close {close} must be positive")));
        }
        if !per_asset.contains_key(&asset) {
            order.push(asset.clone());
        }
        if per_asset.entry(asset.clone()).or_default().insert(date, close).is_some() {
            return Err(err(format!("duplicate row for {asset} on {date}")));
        }
    }
    if order.is_empty() {
        return Err(BacktestError::Data("no price rows".into()));
    }
    let all: BTreeSet<NaiveDate> = per_asset.values().flat_map(|m| m.keys().copied()).collect();
    let common: Vec<NaiveDate> = all.iter().copied().filter(|d| per_asset.values().all(|m| m.contains_key(d))).collect();
    let dropped = all.len() - common.len();
    if strict && dropped > 0 {
        let missing: Vec<String> = all
            .iter()
            .filter(|d| !per_asset.values().all(|m| m.contains_key(d)))
            .take(10)
            .map(|d| d.to_string())
            .collect();
        return Err(BacktestError::Unaligned(format!("{}{}", missing.join(", "), if dropped > 10 { ", ..." } else { "" })));
    }
    let closes = order.iter().map(|a| common.iter().map(|d| per_asset[a][d]).collect()).collect();
    Ok((PriceSeries::new(order, common, closes)?, Alignment { dropped }))
}

pub fn load_prices_csv(path: &std::path::Path, strict: bool) -> Result<(PriceSeries, Alignment), BacktestError> {
    read_prices_csv(std::fs::File::open(path)?, strict)
}

/// Writes `date,asset_id,close`, asset by asset.
pub fn write_prices_csv<W: Write>(series: &PriceSeries, w: W) -> Result<(), BacktestError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["date", "asset_id", "close"])?;
    for (a, c) in series.assets.iter().zip(&series.closes) {
        for (d, v) in series.dates.iter().zip(c) {
            wtr.write_record([d.to_string(), a.clone(), v.to_string()])?;
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Correlated geometric Brownian motions on weekdays from `start`, closes
/// starting at 100. `mu` and `sigma` are annual; a year has 252 days.
pub fn generate_gbm(assets: &[&str], days: usize, mu: &[f64], sigma: &Matrix<f64>, start: NaiveDate, seed: u64) -> Result<PriceSeries, BacktestError> {
    let d = assets.len();
    if mu.len() != d || sigma.rows() != d || sigma.cols() != d {
        return Err(BacktestError::Data("drift and covariance must match the asset count".into()));
    }
    let l = if sigma.frobenius_norm() == 0.0 {
        Matrix::zeros(d, d)
    } else {
        cholesky(sigma).ok_or_else(|| BacktestError::Data("covariance must be positive definite".into()))?
    };
    let dt = 1.0 / 252.0;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dates = Vec::with_capacity(days);
    let mut day = start;
    while dates.len() < days {
        if !matches!(day.weekday(), Weekday::Sat | Weekday::Sun) {
            dates.push(day);
        }
        day = day.succ_opt().ok_or_else(|| BacktestError::Data("date overflow".into()))?;
    }
    let mut closes = vec![Vec::with_capacity(days); d];
    let mut logp = vec![100f64.ln(); d];
    let mut z = vec![0.0; d];
    for t in 0..days {
        if t > 0 {
            for zi in z.iter_mut() {
                *zi = rng.sample(StandardNormal);
            }
            for i in 0..d {
                let shock: f64 = (0..=i).map(|k| l[(i, k)] * z[k]).sum();
                logp[i] += (mu[i] - 0.5 * sigma[(i, i)]) * dt + shock * dt.sqrt();
            }
        }
        for i in 0..d {
            closes[i].push(logp[i].exp());
        }
    }
    PriceSeries::new(assets.iter().map(|s| s.to_string()).collect(), dates, closes)
}

/// Lookback settings for drift and covariance estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimationWindow {
    /// number of daily returns used
    pub lookback: usize,
    pub decay: f64,
    pub annualization: f64,
}

impl Default for EstimationWindow {
    fn default() -> Self {
        Self { lookback: 1260, decay: 0.999, annualization: 252.0 }
    }
}

impl EstimationWindow {
    pub fn validate(&self) -> Result<(), BacktestError> {
        if !(self.decay > 0.0 && self.decay < 1.0) || self.lookback < 2 || !(self.annualization > 0.0) {
            return Err(BacktestError::Data(format!("invalid estimation window {self:?}")));
        }
        Ok(())
    }

    /// Normalized EWMA weights `(1−β)βᵗ/(1−β^L)`, `t = 0..L`.
    pub fn weights(&self) -> Vec<f64> {
        let b = self.decay;
        let norm = 1.0 - b.powi(self.lookback as i32);
        (0..self.lookback).map(|t| (1.0 - b) * b.powi(t as i32) / norm).collect()
    }
}

/// Annual drifts (EWMA of the last `lookback` daily returns up to day
/// `as_of`) and covariance (sample covariance of the same returns, annualized).
pub fn estimate_params(series: &PriceSeries, win: &EstimationWindow, as_of: usize) -> Result<(Vec<f64>, Matrix<f64>), BacktestError> {
    win.validate()?;
    let l = win.lookback;
    if as_of < l || as_of >= series.len() {
        return Err(BacktestError::InsufficientHistory { need: l, got: as_of });
    }
    let d = series.assets.len();
    let w = win.weights();
    let rets: Vec<Vec<f64>> = (0..d).map(|a| (0..l).map(|t| series.ret(a, as_of - t)).collect()).collect();
    let mu: Vec<f64> = rets.iter().map(|r| win.annualization * r.iter().zip(&w).map(|(x, wt)| x * wt).sum::<f64>()).collect();
    let means: Vec<f64> = rets.iter().map(|r| r.iter().sum::<f64>() / l as f64).collect();
    let mut cov = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..=i {
            let c: f64 = (0..l).map(|t| (rets[i][t] - means[i]) * (rets[j][t] - means[j])).sum::<f64>() / (l - 1) as f64;
            cov[(i, j)] = win.annualization * c;
            cov[(j, i)] = cov[(i, j)];
        }
    }
    Ok((mu, cov))
}

/// One step of the empirical wealth recursion with daily simple returns `ret`:
/// `X e^{αᵀR + (1 − Σα)rΔt − ½[αᵀ(R − μΔt)]²}`.
pub fn wealth_step(x: f64, alpha: &[f64], ret: &[f64], mu: &[f64], r: f64, dt: f64) -> f64 {
    let mut lin = (1.0 - alpha.iter().sum::<f64>()) * r * dt;
    let mut dev = 0.0;
    for i in 0..alpha.len() {
        lin += alpha[i] * ret[i];
        dev += alpha[i] * (ret[i] - mu[i] * dt);
    }
    x * (lin - 0.5 * dev * dev).exp()
}

/// Wealth path of constant weights over `days` days from `start`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PortfolioTrack {
    pub wealth: Vec<f64>,
    pub alpha: Vec<f64>,
    pub ln_terminal: f64,
}

pub fn evolve(series: &PriceSeries, start: usize, days: usize, alpha: &[f64], mu: &[f64], r: f64, dt: f64) -> Result<PortfolioTrack, BacktestError> {
    if start + days >= series.len() {
        return Err(BacktestError::Data(format!("start {start} needs {days} days ahead, series has {}", series.len())));
    }
    let mut wealth = Vec::with_capacity(days + 1);
    let mut x = 1.0;
    wealth.push(x);
    let mut ret = vec![0.0; alpha.len()];
    for n in 0..days {
        for (a, v) in ret.iter_mut().enumerate() {
            *v = series.ret(a, start + n + 1);
        }
        x = wealth_step(x, alpha, &ret, mu, r, dt);
        wealth.push(x);
    }
    Ok(PortfolioTrack { wealth, alpha: alpha.to_vec(), ln_terminal: x.ln() })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BacktestConfig {
    pub lambda0: f64,
    pub r: f64,
    pub days: usize,
    pub window: EstimationWindow,
}

impl Default for BacktestConfig {
    fn default() -> Self {
        Self { lambda0: 10.0, r: 0.015, days: 252, window: EstimationWindow::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BacktestRow {
    pub start_date: NaiveDate,
    pub robust: PortfolioTrack,
    pub nonrobust: PortfolioTrack,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StrategyStats {
    pub mean_ln_xt: f64,
    pub std_ln_xt: f64,
}

impl StrategyStats {
    fn of(v: &[f64]) -> Self {
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let var = if v.len() > 1 { v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        Self { mean_ln_xt: m, std_ln_xt: var.sqrt() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BacktestSummary {
    pub lambda0: f64,
    pub portfolios: usize,
    pub skipped: usize,
    pub robust: StrategyStats,
    pub nonrobust: StrategyStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestResult {
    pub rows: Vec<BacktestRow>,
    /// starts that could not be estimated, with the reason
    pub skipped: Vec<(NaiveDate, String)>,
    pub summary: BacktestSummary,
}

/// Rolling backtest: at each start, estimate (μ, Σ₀) from the lookback,
/// fix the robust (Frobenius-deviation penalty) and plain log-optimal
/// weights, and evolve both for `days` days from wealth 1.
pub fn run_backtest(series: &PriceSeries, cfg: &BacktestConfig, starts: &[usize]) -> Result<BacktestResult, BacktestError> {
    cfg.window.validate()?;
    if series.assets.len() != 2 {
        return Err(BacktestError::Data(format!("backtest needs 2 assets, got {}", series.assets.len())));
    }
    let dt = 1.0 / cfg.window.annualization;
    let horizon = cfg.days as f64 * dt;
    for &s in starts {
        if s < cfg.window.lookback {
            return Err(BacktestError::InsufficientHistory { need: cfg.window.lookback, got: s });
        }
        if s + cfg.days >= series.len() {
            return Err(BacktestError::Data(format!("start {s} leaves fewer than {} days ahead", cfg.days)));
        }
    }
    let outcomes: Vec<Result<BacktestRow, (NaiveDate, String)>> = starts
        .par_iter()
        .map(|&s| {
            let date = series.dates[s];
            let fail = |e: String| (date, e);
            let (mu, cov) = estimate_params(series, &cfg.window, s).map_err(|e| fail(e.to_string()))?;
            let params = MarketParams::multi_asset(mu.clone(), cfg.r, cov.clone(), cfg.lambda0, horizon).map_err(|e| fail(e.to_string()))?;
            let a_n = nonrobust_log_weights(&mu, cfg.r, &cov).map_err(|e| fail(e.to_string()))?;
            let a_r = solve_foc_2asset(&params, Penalty::FrobDev).map_err(|e| fail(e.to_string()))?.alpha;
            let robust = evolve(series, s, cfg.days, &a_r, &mu, cfg.r, dt).map_err(|e| fail(e.to_string()))?;
            let nonrobust = evolve(series, s, cfg.days, &a_n, &mu, cfg.r, dt).map_err(|e| fail(e.to_string()))?;
            Ok(BacktestRow { start_date: date, robust, nonrobust })
        })
        .collect();
    let mut rows = Vec::new();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => rows.push(r),
            Err(s) => skipped.push(s),
        }
    }
    if rows.is_empty() {
        return Err(BacktestError::Data(format!("every start failed; first: {:?}", skipped.first())));
    }
    let rob: Vec<f64> = rows.iter().map(|r| r.robust.ln_terminal).collect();
    let non: Vec<f64> = rows.iter().map(|r| r.nonrobust.ln_terminal).collect();
    let summary = BacktestSummary {
        lambda0: cfg.lambda0,
        portfolios: rows.len(),
        skipped: skipped.len(),
        robust: StrategyStats::of(&rob),
        nonrobust: StrategyStats::of(&non),
    };
    Ok(BacktestResult { rows, skipped, summary })
}

/// `start_date,robust_lnXT,nonrobust_lnXT,alpha1_r,alpha2_r,alpha1_n,alpha2_n`
pub fn write_backtest_csv<W: Write>(res: &BacktestResult, w: W) -> Result<(), BacktestError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["start_date", "robust_lnXT", "nonrobust_lnXT", "alpha1_r", "alpha2_r", "alpha1_n", "alpha2_n"])?;
    for r in &res.rows {
        wtr.write_record([
            r.start_date.to_string(),
            r.robust.ln_terminal.to_string(),
            r.nonrobust.ln_terminal.to_string(),
            r.robust.alpha[0].to_string(),
            r.robust.alpha[1].to_string(),
            r.nonrobust.alpha[0].to_string(),
            r.nonrobust.alpha[1].to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

/// Noisy-covariance study settings.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseConfig {
    /// two-asset market; its λ₀ is ignored in favour of `lambdas`
    pub params: MarketParams<f64>,
    pub x0: f64,
    pub epsilons: Vec<f64>,
    pub lambdas: Vec<f64>,
    pub draws: usize,
    pub seed: u64,
    /// candidate noise matrices tried per draw before giving up
    pub max_tries: usize,
}

impl NoiseConfig {
    /// μ = (0.035, 0.045), r = 0.015, Σ₀ = [[0.04, 0.006], [0.006, 0.09]],
    /// ε ∈ {0, 0.005, …, 0.1}, λ₀ ∈ {0.01, 1, 70}, 20 000 draws.
    pub fn desk(seed: u64) -> Self {
        let s0 = Matrix::from_rows(&[vec![0.04, 0.006], vec![0.006, 0.09]]).unwrap();
        Self {
            params: MarketParams::multi_asset(vec![0.035, 0.045], 0.015, s0, 1.0, 1.0).unwrap(),
            x0: 1.0,
            epsilons: (0..=20).map(|i| i as f64 * 0.005).collect(),
            lambdas: vec![0.01, 1.0, 70.0],
            draws: 20_000,
            seed,
            max_tries: 100,
        }
    }

    pub fn validate(&self) -> Result<(), BacktestError> {
        if self.params.dim() != 2 {
            return Err(BacktestError::Data("noise study needs a two-asset market".into()));
        }
        if self.draws == 0 || self.max_tries == 0 {
            return Err(BacktestError::Data("draws and max_tries must be positive".into()));
        }
        if self.epsilons.iter().any(|e| !(*e >= 0.0)) || self.lambdas.iter().any(|l| !(*l > 0.0)) {
            return Err(BacktestError::Data("noise sizes must be >= 0 and penalty weights > 0".into()));
        }
        if !(self.x0 > 0.0) {
            return Err(BacktestError::Data("initial wealth must be positive".into()));
        }
        if cholesky(&self.params.sigma0_matrix()).is_none() {
            return Err(BacktestError::Data("reference covariance must be positive definite".into()));
        }
        Ok(())
    }
}

/// Realized covariance of draw `k`: the first candidate `Σ₀ + ε(Z + Zᵀ)/2`
/// from stream `k` that is positive definite. The same stream is used for
/// every ε and λ₀.
pub fn noisy_covariance(sigma0: &Matrix<f64>, epsilon: f64, seed: u64, k: usize, max_tries: usize) -> Result<Matrix<f64>, BacktestError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k as u64);
    let d = sigma0.rows();
    for _ in 0..max_tries {
        let mut m = sigma0.clone();
        let z: Vec<f64> = (0..d * d).map(|_| rng.sample(StandardNormal)).collect();
        for i in 0..d {
            for j in 0..d {
                m[(i, j)] += epsilon * 0.5 * (z[i * d + j] + z[j * d + i]);
            }
        }
        if cholesky(&m).is_some() {
            return Ok(m);
        }
    }
    Err(BacktestError::NoiseTooLarge { epsilon, tries: max_tries })
}

/// `ln x + T(αᵀ(μ − r1) + r − ½αᵀΣα)`.
pub fn log_utility_constant(x0: f64, params: &MarketParams<f64>, alpha: &[f64], sigma: &Matrix<f64>) -> f64 {
    let b = params.excess();
    let drift: f64 = alpha.iter().zip(&b).map(|(a, e)| a * e).sum();
    let quad = sigma.quad_form(alpha).unwrap_or(f64::NAN);
    x0.ln() + params.horizon() * (drift + params.r() - 0.5 * quad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NoiseRow {
    pub lambda0: f64,
    pub epsilon: f64,
    pub robust_eu: f64,
    pub nonrobust_eu: f64,
    /// standard error of the robust − plain difference
    pub se: f64,
}

/// Weights of both strategies at penalty weight `lambda0`.
pub fn strategy_weights(params: &MarketParams<f64>, lambda0: f64) -> Result<(Vec<f64>, Vec<f64>), BacktestError> {
    let p = params.with_lambda0(lambda0)?;
    let robust = solve_foc_2asset(&p, Penalty::FrobDev)?.alpha;
    let plain = nonrobust_log_weights(params.mu(), params.r(), &params.sigma0_matrix())?;
    Ok((robust, plain))
}

/// Draw-averaged utilities of both weight vectors at noise size `epsilon`
/// and the standard error of their difference.
pub fn noise_point(cfg: &NoiseConfig, robust: &[f64], plain: &[f64], epsilon: f64) -> Result<(f64, f64, f64), BacktestError> {
    const UNIT: usize = 1024;
    let s0 = cfg.params.sigma0_matrix();
    let parts: Vec<Result<[f64; 4], BacktestError>> = (0..cfg.draws.div_ceil(UNIT))
        .into_par_iter()
        .map(|u| {
            let mut acc = [0.0; 4];
            for k in u * UNIT..((u + 1) * UNIT).min(cfg.draws) {
                let m = noisy_covariance(&s0, epsilon, cfg.seed, k, cfg.max_tries)?;
                let ur = log_utility_constant(cfg.x0, &cfg.params, robust, &m);
                let un = log_utility_constant(cfg.x0, &cfg.params, plain, &m);
                acc[0] += ur;
                acc[1] += un;
                acc[2] += ur - un;
                acc[3] += (ur - un) * (ur - un);
            }
            Ok(acc)
        })
        .collect();
    let mut acc = [0.0; 4];
    for p in parts {
        let p = p?;
        for i in 0..4 {
            acc[i] += p[i];
        }
    }
    let n = cfg.draws as f64;
    let md = acc[2] / n;
    let se = if cfg.draws > 1 { ((acc[3] - n * md * md).max(0.0) / (n - 1.0) / n).sqrt() } else { 0.0 };
    Ok((acc[0] / n, acc[1] / n, se))
}

/// Table over (λ₀, ε) of draw-averaged expected log utilities.
pub fn noise_experiment(cfg: &NoiseConfig) -> Result<Vec<NoiseRow>, BacktestError> {
    cfg.validate()?;
    let mut rows = Vec::with_capacity(cfg.lambdas.len() * cfg.epsilons.len());
    for &l in &cfg.lambdas {
        let (rob, plain) = strategy_weights(&cfg.params, l)?;
        for &e in &cfg.epsilons {
            let (ur, un, se) = noise_point(cfg, &rob, &plain, e)?;
            rows.push(NoiseRow { lambda0: l, epsilon: e, robust_eu: ur, nonrobust_eu: un, se });
        }
    }
    Ok(rows)
}

/// `lambda0,epsilon,robust_eu,nonrobust_eu,se`
pub fn write_noise_csv<W: Write>(rows: &[NoiseRow], w: W) -> Result<(), BacktestError> {
    let mut wtr = csv::Writer::from_writer(w);
    for r in rows {
        wtr.serialize(r)?;
    }
    wtr.flush()?;
    Ok(())
}

/// First point of the sorted `grid` where `diff` turns nonnegative, refined
/// by bisection to `tol`. A nonnegative value at the first grid point
/// returns that point; no sign change returns `None`.
pub fn crossing_on_grid(grid: &[f64], mut diff: impl FnMut(f64) -> Result<f64, BacktestError>, tol: f64) -> Result<Option<f64>, BacktestError> {
    let Some(&first) = grid.first() else { return Ok(None) };
    if diff(first)? >= 0.0 {
        return Ok(Some(first));
    }
    for w in grid.windows(2) {
        if diff(w[1])? >= 0.0 {
            let (mut lo, mut hi) = (w[0], w[1]);
            while hi - lo > tol {
                let mid = 0.5 * (lo + hi);
                if diff(mid)? >= 0.0 {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            return Ok(Some(hi));
        }
    }
    Ok(None)
}

/// Noise size at which the robust strategy catches up with the plain one.
pub fn crossing_point(cfg: &NoiseConfig, lambda0: f64) -> Result<Option<f64>, BacktestError> {
    cfg.validate()?;
    let (rob, plain) = strategy_weights(&cfg.params, lambda0)?;
    let mut grid = cfg.epsilons.clone();
    grid.sort_by(f64::total_cmp);
    crossing_on_grid(&grid, |e| noise_point(cfg, &rob, &plain, e).map(|(r, n, _)| r - n), 1e-6)
}

/// Grid λ₀ with the largest robust expected utility at noise size
/// `epsilon`; ties go to the smallest λ₀.
pub fn best_lambda(cfg: &NoiseConfig, epsilon: f64) -> Result<f64, BacktestError> {
    cfg.validate()?;
    let mut lambdas = cfg.lambdas.clone();
    lambdas.sort_by(f64::total_cmp);
    let mut best: Option<(f64, f64)> = None;
    for l in lambdas {
        let (rob, plain) = strategy_weights(&cfg.params, l)?;
        let (ur, _, _) = noise_point(cfg, &rob, &plain, epsilon)?;
        if best.is_none_or(|(_, b)| ur > b) {
            best = Some((l, ur));
        }
    }
    best.map(|b| b.0).ok_or_else(|| BacktestError::Data("empty penalty grid".into()))
}
