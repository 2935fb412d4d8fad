//! Run configuration: JSON file sections, command-line overrides, validation.

use std::path::PathBuf;

use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use robust_alloc::linalg::Matrix;
use robust_alloc::mc::Antithetic;
use robust_alloc::model::{MarketParams, Penalty, Utility};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum PenaltyName {
    Sqdev,
    Quadvar,
    Frobdev,
    Frobsq,
}

impl From<PenaltyName> for Penalty {
    fn from(p: PenaltyName) -> Self {
        match p {
            PenaltyName::Sqdev => Penalty::SqDevVol,
            PenaltyName::Quadvar => Penalty::QuadVar,
            PenaltyName::Frobdev => Penalty::FrobDev,
            PenaltyName::Frobsq => Penalty::FrobSq,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum UtilityName {
    Log,
    Power,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum AntitheticName {
    None,
    Backward,
    Both,
}

impl From<AntitheticName> for Antithetic {
    fn from(a: AntitheticName) -> Self {
        match a {
            AntitheticName::None => Antithetic::None,
            AntitheticName::Backward => Antithetic::Backward,
            AntitheticName::Both => Antithetic::Both,
        }
    }
}

/// Market, utility and penalty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MarketConfig {
    pub mu: Vec<f64>,
    pub r: f64,
    /// one asset: the reference volatility; two: the covariance, row-major
    pub sigma0: Vec<f64>,
    pub lambda0: f64,
    pub horizon: f64,
    pub x0: f64,
    pub penalty: PenaltyName,
    pub utility: UtilityName,
    pub gamma: f64,
    pub coef: f64,
}

impl Default for MarketConfig {
    fn default() -> Self {
        Self {
            mu: vec![0.035],
            r: 0.015,
            sigma0: vec![0.2],
            lambda0: 10.0,
            horizon: 1.0,
            x0: 5.0,
            penalty: PenaltyName::Quadvar,
            utility: UtilityName::Log,
            gamma: 0.25,
            coef: 4.0 / 3.0,
        }
    }
}

impl MarketConfig {
    pub fn params(&self) -> Result<MarketParams<f64>, CliError> {
        let d = self.mu.len();
        let p = match d {
            1 => {
                if self.sigma0.len() != 1 {
                    return Err(CliError::Validation(format!("one asset needs one sigma0 value, got {}", self.sigma0.len())));
                }
                MarketParams::one_asset(self.mu[0], self.r, self.sigma0[0], self.lambda0, self.horizon)?
            }
            2 => {
                if self.sigma0.len() != 4 {
                    return Err(CliError::Validation(format!(
                        "two assets need a 2x2 covariance (4 values, row-major), got {}",
                        self.sigma0.len()
                    )));
                }
                let m = Matrix::from_vec(2, 2, self.sigma0.clone()).map_err(|e| CliError::Validation(e.to_string()))?;
                MarketParams::multi_asset(self.mu.clone(), self.r, m, self.lambda0, self.horizon)?
            }
            _ => return Err(CliError::Validation(format!("{d} assets: only 1 or 2 are supported"))),
        };
        if !(self.x0 > 0.0) {
            return Err(CliError::Validation(format!("x0 = {} must be positive", self.x0)));
        }
        Ok(p)
    }

    pub fn utility(&self) -> Result<Utility<f64>, CliError> {
        Ok(match self.utility {
            UtilityName::Log => Utility::Log,
            UtilityName::Power => Utility::power(self.coef, self.gamma)?,
        })
    }

    pub fn penalty(&self) -> Penalty {
        self.penalty.into()
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct MarketArgs {
    /// drift per asset, comma separated
    #[arg(long, value_delimiter = ',')]
    pub mu: Option<Vec<f64>>,
    #[arg(long)]
    pub r: Option<f64>,
    /// reference volatility, or a row-major 2x2 covariance
    #[arg(long, value_delimiter = ',')]
    pub sigma0: Option<Vec<f64>>,
    #[arg(long)]
    pub lambda0: Option<f64>,
    #[arg(long)]
    pub horizon: Option<f64>,
    #[arg(long)]
    pub x0: Option<f64>,
    #[arg(long, value_enum)]
    pub penalty: Option<PenaltyName>,
    #[arg(long, value_enum)]
    pub utility: Option<UtilityName>,
    /// power utility exponent
    #[arg(long)]
    pub gamma: Option<f64>,
    /// power utility coefficient
    #[arg(long)]
    pub coef: Option<f64>,
}

macro_rules! apply {
    ($dst:expr, $src:expr, $($f:ident),+) => {
        $( if let Some(v) = $src.$f.clone() { $dst.$f = v; } )+
    };
}

impl MarketArgs {
    pub fn apply(&self, m: &mut MarketConfig) {
        apply!(m, self, mu, r, sigma0, lambda0, horizon, x0, penalty, utility, gamma, coef);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FdmOptions {
    pub nodes: usize,
    pub steps: usize,
    /// default: x0/5 (log) or 0 (power)
    pub x_min: Option<f64>,
    /// default: 5·x0 (log) or 10·x0 (power)
    pub x_max: Option<f64>,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FdmOptions {
    fn default() -> Self {
        Self { nodes: 401, steps: 100, x_min: None, x_max: None, tol: 1e-8, max_iter: 50 }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct FdmArgs {
    /// wealth nodes
    #[arg(long)]
    pub nodes: Option<usize>,
    /// time steps
    #[arg(long = "fdm-steps", id = "fdm_steps")]
    pub steps: Option<usize>,
    #[arg(long)]
    pub x_min: Option<f64>,
    #[arg(long)]
    pub x_max: Option<f64>,
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long)]
    pub max_iter: Option<usize>,
}

impl FdmArgs {
    pub fn apply(&self, o: &mut FdmOptions) {
        apply!(o, self, nodes, steps, tol, max_iter);
        if self.x_min.is_some() {
            o.x_min = self.x_min;
        }
        if self.x_max.is_some() {
            o.x_max = self.x_max;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McOptions {
    pub paths: usize,
    pub steps: usize,
    pub forward_paths: usize,
    pub antithetic: AntitheticName,
}

impl Default for McOptions {
    fn default() -> Self {
        Self { paths: 100_000, steps: 50, forward_paths: 100_000, antithetic: AntitheticName::Backward }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct McArgs {
    #[arg(long)]
    pub paths: Option<usize>,
    /// time steps
    #[arg(long = "mc-steps", id = "mc_steps")]
    pub steps: Option<usize>,
    #[arg(long)]
    pub forward_paths: Option<usize>,
    #[arg(long, value_enum)]
    pub antithetic: Option<AntitheticName>,
}

impl McArgs {
    pub fn apply(&self, o: &mut McOptions) {
        apply!(o, self, paths, steps, forward_paths, antithetic);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GanOptions {
    pub samples: usize,
    pub steps: usize,
    pub epochs_fast: usize,
    pub epochs_slow: usize,
    pub lr_fast: f64,
    pub lr_slow: f64,
    pub batch: usize,
    pub width: usize,
    pub beta: f64,
    pub sigma_scale: f64,
}

impl Default for GanOptions {
    fn default() -> Self {
        Self {
            samples: 20_000,
            steps: 13,
            epochs_fast: 60,
            epochs_slow: 30,
            lr_fast: 5e-4,
            lr_slow: 1e-4,
            batch: 500,
            width: 16,
            beta: 4.0,
            sigma_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct GanArgs {
    #[arg(long)]
    pub samples: Option<usize>,
    /// time steps
    #[arg(long = "gan-steps", id = "gan_steps")]
    pub steps: Option<usize>,
    #[arg(long)]
    pub epochs_fast: Option<usize>,
    #[arg(long)]
    pub epochs_slow: Option<usize>,
    #[arg(long)]
    pub lr_fast: Option<f64>,
    #[arg(long)]
    pub lr_slow: Option<f64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    /// knee of the volatility output activation
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub sigma_scale: Option<f64>,
}

impl GanArgs {
    pub fn apply(&self, o: &mut GanOptions) {
        apply!(o, self, samples, steps, epochs_fast, epochs_slow, lr_fast, lr_slow, batch, width, beta, sigma_scale);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseOptions {
    pub mu: Vec<f64>,
    pub r: f64,
    /// row-major 2x2 reference covariance
    pub sigma0: Vec<f64>,
    pub lambda0: Vec<f64>,
    pub eps: Vec<f64>,
    pub draws: usize,
    pub max_tries: usize,
}

impl Default for NoiseOptions {
    fn default() -> Self {
        Self {
            mu: vec![0.035, 0.045],
            r: 0.015,
            sigma0: vec![0.04, 0.006, 0.006, 0.09],
            lambda0: vec![0.01, 1.0, 70.0],
            eps: (0..=20).map(|i| i as f64 * 0.005).collect(),
            draws: 20_000,
            max_tries: 100,
        }
    }
}

/// A parsed noise grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid(pub Vec<f64>);

fn grid_arg(s: &str) -> Result<Grid, String> {
    parse_grid(s).map(Grid)
}

/// `a:step:b` (inclusive) or a comma-separated list.
pub fn parse_grid(s: &str) -> Result<Vec<f64>, String> {
    let parts: Vec<&str> = s.split(':').collect();
    match parts.len() {
        1 => s.split(',').map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"))).collect(),
        3 => {
            let p: Vec<f64> = parts.iter().map(|v| v.trim().parse::<f64>().map_err(|e| format!("{v:?}: {e}"))).collect::<Result<_, _>>()?;
            let (a, h, b) = (p[0], p[1], p[2]);
            if !(h > 0.0) || !(b >= a) {
                return Err(format!("range {s:?} needs a positive step and end >= start"));
            }
            let n = ((b - a) / h + 1e-9).floor() as usize;
            Ok((0..=n).map(|i| a + i as f64 * h).collect())
        }
        _ => Err(format!("{s:?} is neither a list nor start:step:end")),
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct NoiseArgs {
    #[arg(long, value_delimiter = ',')]
    pub mu: Option<Vec<f64>>,
    #[arg(long)]
    pub r: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    pub sigma0: Option<Vec<f64>>,
    /// penalty weights, comma separated
    #[arg(long, value_delimiter = ',')]
    pub lambda0: Option<Vec<f64>>,
    /// noise sizes: `start:step:end` or a comma-separated list
    #[arg(long, value_parser = grid_arg)]
    pub eps: Option<Grid>,
    #[arg(long)]
    pub draws: Option<usize>,
    #[arg(long)]
    pub max_tries: Option<usize>,
}

impl NoiseArgs {
    pub fn apply(&self, o: &mut NoiseOptions) {
        apply!(o, self, mu, r, sigma0, lambda0, draws, max_tries);
        if let Some(g) = &self.eps {
            o.eps = g.0.clone();
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BacktestOptions {
    /// `date,asset_id,close`; absent: a synthetic GBM fixture
    pub prices: Option<PathBuf>,
    /// reject dates missing for some asset instead of dropping them
    pub strict: bool,
    pub lambda0: f64,
    pub r: f64,
    pub days: usize,
    pub lookback: usize,
    pub decay: f64,
    /// number of consecutive daily starts; default: as many as the data allow
    pub starts: Option<usize>,
    pub fixture_starts: usize,
    pub fixture_mu: Vec<f64>,
    pub fixture_sigma: Vec<f64>,
}

impl Default for BacktestOptions {
    fn default() -> Self {
        Self {
            prices: None,
            strict: false,
            lambda0: 10.0,
            r: 0.015,
            days: 252,
            lookback: 1260,
            decay: 0.999,
            starts: None,
            fixture_starts: 1007,
            fixture_mu: vec![0.08, 0.04],
            fixture_sigma: vec![0.0256, 0.0012, 0.0012, 0.0225],
        }
    }
}

#[derive(Debug, Clone, Default, Args)]
pub struct BacktestArgs {
    #[arg(long)]
    pub prices: Option<PathBuf>,
    #[arg(long)]
    pub strict: bool,
    #[arg(long)]
    pub lambda0: Option<f64>,
    #[arg(long)]
    pub r: Option<f64>,
    /// investment days per portfolio
    #[arg(long)]
    pub days: Option<usize>,
    #[arg(long)]
    pub lookback: Option<usize>,
    #[arg(long)]
    pub decay: Option<f64>,
    #[arg(long)]
    pub starts: Option<usize>,
}

impl BacktestArgs {
    pub fn apply(&self, o: &mut BacktestOptions) {
        apply!(o, self, lambda0, r, days, lookback, decay);
        if self.prices.is_some() {
            o.prices = self.prices.clone();
        }
        if self.starts.is_some() {
            o.starts = self.starts;
        }
        if self.strict {
            o.strict = true;
        }
    }
}

/// Everything a run depends on; echoed to `run_config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub command: Option<String>,
    pub seed: u64,
    pub market: MarketConfig,
    pub fdm: FdmOptions,
    pub mc: McOptions,
    pub gan: GanOptions,
    pub noise: NoiseOptions,
    pub backtest: BacktestOptions,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            command: None,
            seed: 0,
            market: MarketConfig::default(),
            fdm: FdmOptions::default(),
            mc: McOptions::default(),
            gan: GanOptions::default(),
            noise: NoiseOptions::default(),
            backtest: BacktestOptions::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &std::path::Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Random stream labels.
pub mod stream {
    pub const BACKWARD: u64 = 1;
    pub const FORWARD: u64 = 2;
    pub const GAN: u64 = 3;
    pub const NOISE: u64 = 4;
    pub const GBM: u64 = 5;
}

/// Seed of stream `label` under the run seed: `splitmix64(seed ^ splitmix64(label))`.
pub fn derive_seed(seed: u64, label: u64) -> u64 {
    splitmix64(seed ^ splitmix64(label))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids() {
        assert_eq!(parse_grid("0:0.1:0.3").unwrap().len(), 4);
        assert_eq!(parse_grid("0.01,1,70").unwrap(), vec![0.01, 1.0, 70.0]);
        assert!(parse_grid("1:0:2").is_err());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(serde_json::from_str::<RunConfig>(r#"{"seed": 1, "bogus": 2}"#).is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"market": {"lambda": 2}}"#).is_err());
        let c: RunConfig = serde_json::from_str(r#"{"market": {"lambda0": 2}}"#).unwrap();
        assert_eq!(c.market.lambda0, 2.0);
    }

    #[test]
    fn seeds_differ_by_label() {
        let s: Vec<u64> = (1..=5).map(|l| derive_seed(0, l)).collect();
        for i in 0..5 {
            for j in 0..i {
                assert_ne!(s[i], s[j]);
            }
        }
    }
}
