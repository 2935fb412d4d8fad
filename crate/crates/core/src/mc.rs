//! Regression Monte Carlo with control randomization.
//!
//! Paths are simulated with randomly drawn controls. Walking backwards, the
//! continuation value is regressed on features of (wealth, controls); the
//! fitted function is then optimized over the controls, giving both the
//! value (an upper-biased estimate) and a policy. Re-simulating that policy
//! on fresh paths gives a lower-biased estimate.
//!
//! Paths are generated in fixed chunks, each with its own random stream, and
//! all reductions run in chunk order, so results do not depend on the number
//! of worker threads.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::linalg::{dot, least_squares, LinalgError, Lu, Matrix};
use crate::model::{merton_weight, nonrobust_log_weights, ControlBounds, MarketParams, ModelError, Penalty, Utility};
use crate::scalar::Real;

/// Paths per random stream.
pub const CHUNK: usize = 1024;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum McError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("rank-deficient regression at step {step} (condition number {cond:e})")]
    RankDeficient { step: usize, cond: f64 },
    #[error("non-finite value at step {step}")]
    NotFinite { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Uniform law of the randomized controls.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlLaw<T> {
    /// per-asset allocation range
    pub alpha: Vec<(T, T)>,
    /// per-asset volatility range
    pub sigma: Vec<(T, T)>,
    /// correlation range (two assets)
    pub rho: (T, T),
}

impl<T: Real> ControlLaw<T> {
    /// α uniform on [0, 2w] (w the log-optimal weight at the reference),
    /// σ on [σ_ref/2, 2σ_ref], ρ on [−0.8, 0.8].
    pub fn default_for(params: &MarketParams<T>) -> Result<Self, McError> {
        let s0 = params.sigma0_matrix();
        let d = params.dim();
        let w = if d == 1 {
            vec![merton_weight(params.mu()[0], params.r(), params.sigma0(), T::zero())?]
        } else {
            nonrobust_log_weights(params.mu(), params.r(), &s0)?
        };
        let two = T::lit(2.0);
        let alpha = w.iter().map(|&v| (T::zero().min(two * v), T::zero().max(two * v))).collect();
        let sigma = (0..d)
            .map(|i| {
                let s = s0[(i, i)].max(T::zero()).sqrt();
                (T::lit(0.5) * s, two * s)
            })
            .collect();
        Ok(Self { alpha, sigma, rho: (T::lit(-0.8), T::lit(0.8)) })
    }

    pub fn degenerate(alpha: Vec<T>, sigma: Vec<T>, rho: T) -> Self {
        Self {
            alpha: alpha.into_iter().map(|a| (a, a)).collect(),
            sigma: sigma.into_iter().map(|s| (s, s)).collect(),
            rho: (rho, rho),
        }
    }

    pub fn validate(&self, d: usize, bounds: &ControlBounds<T>) -> Result<(), McError> {
        if self.alpha.len() != d || self.sigma.len() != d {
            return Err(McError::Config(format!("control law sized for {} assets, market has {d}", self.alpha.len())));
        }
        for &(lo, hi) in &self.alpha {
            if !(lo <= hi) || lo < -bounds.alpha_max || hi > bounds.alpha_max {
                return Err(McError::Config(format!("allocation law [{lo}, {hi}] outside the admissible box")));
            }
        }
        for &(lo, hi) in &self.sigma {
            if !(lo <= hi) || lo < T::zero() || hi > bounds.sigma_max {
                return Err(McError::Config(format!("volatility law [{lo}, {hi}] outside the admissible box")));
            }
        }
        if !(self.rho.0 <= self.rho.1) || self.rho.0 < -T::one() || self.rho.1 > T::one() {
            return Err(McError::Config(format!("correlation law [{}, {}] outside [-1, 1]", self.rho.0, self.rho.1)));
        }
        Ok(())
    }

    fn mid(r: (T, T)) -> T {
        T::lit(0.5) * (r.0 + r.1)
    }

    /// Mean controls: allocations then the volatility parameters.
    pub fn mean(&self) -> (Vec<T>, Vec<T>) {
        let a = self.alpha.iter().map(|&r| Self::mid(r)).collect();
        let mut s: Vec<T> = self.sigma.iter().map(|&r| Self::mid(r)).collect();
        if self.sigma.len() == 2 {
            s.push(Self::mid(self.rho));
        }
        (a, s)
    }

    fn draw(&self, rng: &mut ChaCha8Rng, alpha: &mut [T], sigma: &mut [T]) {
        let u = |rng: &mut ChaCha8Rng, (lo, hi): (T, T)| -> T {
            let v: f64 = rng.random();
            lo + (hi - lo) * T::lit(v)
        };
        for (a, &r) in alpha.iter_mut().zip(&self.alpha) {
            *a = u(rng, r);
        }
        for (s, &r) in sigma.iter_mut().zip(&self.sigma) {
            *s = u(rng, r);
        }
        if sigma.len() == 3 {
            sigma[2] = u(rng, self.rho);
        }
    }
}

/// Which passes use antithetic increments (pairs of paths share controls and
/// see opposite Brownian increments).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Antithetic {
    None,
    #[default]
    Backward,
    Both,
}

impl Antithetic {
    pub fn backward(self) -> bool {
        !matches!(self, Antithetic::None)
    }

    pub fn forward(self) -> bool {
        matches!(self, Antithetic::Both)
    }
}

/// Simulated paths, path-major: entry `(m, n)` of a per-step array sits at
/// `m * steps + n` (wealth: `m * (steps + 1) + n`).
#[derive(Debug, Clone)]
pub struct PathEnsemble<T> {
    pub paths: usize,
    pub steps: usize,
    pub dim: usize,
    pub dt: T,
    pub x0: T,
    pub wealth: Vec<T>,
    /// `dim` allocations per (path, step)
    pub alpha: Vec<T>,
    /// σ per (path, step); (σ₁, σ₂, ρ) with two assets
    pub sigma: Vec<T>,
    /// `dim` Brownian increments per (path, step)
    pub increments: Vec<T>,
    pub seed: u64,
}

impl<T: Real> PathEnsemble<T> {
    pub fn sigma_len(&self) -> usize {
        if self.dim == 1 {
            1
        } else {
            3
        }
    }

    #[inline]
    pub fn x(&self, m: usize, n: usize) -> T {
        self.wealth[m * (self.steps + 1) + n]
    }

    #[inline]
    pub fn alpha_at(&self, m: usize, n: usize) -> &[T] {
        let k = (m * self.steps + n) * self.dim;
        &self.alpha[k..k + self.dim]
    }

    #[inline]
    pub fn sigma_at(&self, m: usize, n: usize) -> &[T] {
        let s = self.sigma_len();
        let k = (m * self.steps + n) * s;
        &self.sigma[k..k + s]
    }

    #[inline]
    pub fn dw_at(&self, m: usize, n: usize) -> &[T] {
        let k = (m * self.steps + n) * self.dim;
        &self.increments[k..k + self.dim]
    }
}

fn stream(seed: u64, chunk: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(chunk as u64);
    rng
}

/// Exponent of the one-step wealth update
/// `[αᵀ(μ−r1) + r − ½αᵀΣα]Δt + αᵀLΔW` with `LLᵀ = Σ`.
#[inline]
fn growth<T: Real>(excess: &[T], r: T, alpha: &[T], sigma: &[T], dt: T, dw: &[T]) -> T {
    let half = T::lit(0.5);
    if alpha.len() == 1 {
        let av = alpha[0] * sigma[0];
        return (alpha[0] * excess[0] + r - half * av * av) * dt + av * dw[0];
    }
    let (s1, s2, rho) = (sigma[0], sigma[1], sigma[2]);
    // Cholesky factor of [[s1², ρs1s2], [ρs1s2, s2²]]
    let l11 = s1;
    let l21 = rho * s2;
    let l22 = s2 * (T::one() - rho * rho).max(T::zero()).sqrt();
    let v1 = alpha[0] * l11 + alpha[1] * l21;
    let v2 = alpha[1] * l22;
    let quad = v1 * v1 + v2 * v2;
    (alpha[0] * excess[0] + alpha[1] * excess[1] + r - half * quad) * dt + v1 * dw[0] + v2 * dw[1]
}

/// Simulates `paths` wealth paths from `x0` with controls drawn i.i.d. per
/// (path, step) from `law`.
pub fn simulate_randomized<T: Real>(
    params: &MarketParams<T>,
    bounds: &ControlBounds<T>,
    law: &ControlLaw<T>,
    x0: T,
    paths: usize,
    steps: usize,
    seed: u64,
    antithetic: bool,
) -> Result<PathEnsemble<T>, McError> {
    let d = params.dim();
    if d > 2 {
        return Err(McError::Config(format!("{d} assets not supported")));
    }
    if paths < 2 || steps < 1 {
        return Err(McError::Config(format!("need at least 2 paths and 1 step, got {paths} and {steps}")));
    }
    if antithetic && paths % 2 != 0 {
        return Err(McError::Config("antithetic sampling needs an even path count".into()));
    }
    if !(x0 > T::zero()) {
        return Err(McError::Config(format!("initial wealth {x0} must be positive")));
    }
    law.validate(d, bounds)?;
    let sl = if d == 1 { 1 } else { 3 };
    let dt = params.horizon() / T::lit(steps as f64);
    let sqdt = dt.sqrt();
    let excess = params.excess();
    let r = params.r();
    let n_chunks = paths.div_ceil(CHUNK);
    let chunks: Vec<(Vec<T>, Vec<T>, Vec<T>, Vec<T>)> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let hi = (lo + CHUNK).min(paths);
            let count = hi - lo;
            let mut rng = stream(seed, c);
            let mut wealth = vec![T::zero(); count * (steps + 1)];
            let mut alpha = vec![T::zero(); count * steps * d];
            let mut sigma = vec![T::zero(); count * steps * sl];
            let mut dws = vec![T::zero(); count * steps * d];
            let mut local = 0;
            while local < count {
                let pair = antithetic && local + 1 < count;
                let width = if pair { 2 } else { 1 };
                for j in 0..width {
                    wealth[(local + j) * (steps + 1)] = x0;
                }
                for n in 0..steps {
                    let ka = (local * steps + n) * d;
                    let ks = (local * steps + n) * sl;
                    law.draw(&mut rng, &mut alpha[ka..ka + d], &mut sigma[ks..ks + sl]);
                    for i in 0..d {
                        let z: f64 = rng.sample(StandardNormal);
                        dws[ka + i] = T::lit(z) * sqdt;
                    }
                    if pair {
                        let kb = ((local + 1) * steps + n) * d;
                        let kbs = ((local + 1) * steps + n) * sl;
                        for i in 0..d {
                            alpha[kb + i] = alpha[ka + i];
                            dws[kb + i] = -dws[ka + i];
                        }
                        for i in 0..sl {
                            sigma[kbs + i] = sigma[ks + i];
                        }
                    }
                    for j in 0..width {
                        let p = local + j;
                        let k = (p * steps + n) * d;
                        let kss = (p * steps + n) * sl;
                        let g = growth(&excess, r, &alpha[k..k + d], &sigma[kss..kss + sl], dt, &dws[k..k + d]);
                        let w = p * (steps + 1) + n;
                        wealth[w + 1] = wealth[w] * g.exp();
                    }
                }
                local += width;
            }
            (wealth, alpha, sigma, dws)
        })
        .collect();
    let mut ens = PathEnsemble {
        paths,
        steps,
        dim: d,
        dt,
        x0,
        wealth: Vec::with_capacity(paths * (steps + 1)),
        alpha: Vec::with_capacity(paths * steps * d),
        sigma: Vec::with_capacity(paths * steps * sl),
        increments: Vec::with_capacity(paths * steps * d),
        seed,
    };
    for (w, a, s, z) in chunks {
        ens.wealth.extend(w);
        ens.alpha.extend(a);
        ens.sigma.extend(s);
        ens.increments.extend(z);
    }
    Ok(ens)
}

/// Regression basis families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum BasisFamily {
    /// 1, ln X, α, ασ, α²σ²
    Log1Asset,
    /// 1, X^γ, X^γα, X^γασ, X^γα²σ²
    Power1Asset,
    /// 1, ln X, α₁, α₂, α₁²σ₁², α₂²σ₂², α₁α₂σ₁σ₂ρ, σ₁⁴, σ₂⁴, σ₁²σ₂²ρ²
    Log2Asset,
}

/// A basis family together with the wealth exponent of the power family.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisSpec<T> {
    pub family: BasisFamily,
    pub gamma: T,
}

impl<T: Real> BasisSpec<T> {
    pub fn log_1asset() -> Self {
        Self { family: BasisFamily::Log1Asset, gamma: T::zero() }
    }

    pub fn power_1asset(gamma: T) -> Self {
        Self { family: BasisFamily::Power1Asset, gamma }
    }

    pub fn log_2asset() -> Self {
        Self { family: BasisFamily::Log2Asset, gamma: T::zero() }
    }

    /// Matching basis for a utility and asset count.
    pub fn for_utility(utility: &Utility<T>, dim: usize) -> Result<Self, McError> {
        match (utility, dim) {
            (Utility::Log, 1) => Ok(Self::log_1asset()),
            (Utility::Log, 2) => Ok(Self::log_2asset()),
            (Utility::Power { gamma, .. }, 1) => Ok(Self::power_1asset(*gamma)),
            _ => Err(McError::Config(format!("no basis for {utility:?} with {dim} assets"))),
        }
    }

    pub fn len(&self) -> usize {
        match self.family {
            BasisFamily::Log1Asset | BasisFamily::Power1Asset => 5,
            BasisFamily::Log2Asset => 10,
        }
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        match self.family {
            BasisFamily::Log2Asset => 2,
            _ => 1,
        }
    }

    /// Feature vector at wealth `x` (clamped at 1e−12) and controls.
    pub fn features(&self, x: T, alpha: &[T], sigma: &[T], out: &mut [T]) {
        let x = x.max(T::lit(1e-12));
        match self.family {
            BasisFamily::Log1Asset => {
                let (a, s) = (alpha[0], sigma[0]);
                out[0] = T::one();
                out[1] = x.ln();
                out[2] = a;
                out[3] = a * s;
                out[4] = a * a * s * s;
            }
            BasisFamily::Power1Asset => {
                let (a, s) = (alpha[0], sigma[0]);
                let q = x.powf(self.gamma);
                out[0] = T::one();
                out[1] = q;
                out[2] = q * a;
                out[3] = q * a * s;
                out[4] = q * a * a * s * s;
            }
            BasisFamily::Log2Asset => {
                let (a1, a2) = (alpha[0], alpha[1]);
                let (s1, s2, rho) = (sigma[0], sigma[1], sigma[2]);
                out[0] = T::one();
                out[1] = x.ln();
                out[2] = a1;
                out[3] = a2;
                out[4] = a1 * a1 * s1 * s1;
                out[5] = a2 * a2 * s2 * s2;
                out[6] = a1 * a2 * s1 * s2 * rho;
                out[7] = s1 * s1 * s1 * s1;
                out[8] = s2 * s2 * s2 * s2;
                out[9] = s1 * s1 * s2 * s2 * rho * rho;
            }
        }
    }

    pub fn eval(&self, beta: &[T], x: T, alpha: &[T], sigma: &[T]) -> T {
        let mut phi = [T::zero(); 10];
        self.features(x, alpha, sigma, &mut phi[..self.len()]);
        dot(beta, &phi[..self.len()])
    }
}

/// Regression output for one time step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegressionFit<T> {
    pub step: usize,
    pub beta: Vec<T>,
    pub residual_rms: T,
    pub cond: f64,
    /// max |Φᵀres| / (‖Φ_k‖‖res‖) over columns
    pub orthogonality: f64,
    /// the concavity coefficient had the wrong sign; controls fell back to the law mean
    pub flagged: bool,
}

/// Optimized controls at one wealth level.
#[derive(Debug, Clone, PartialEq)]
pub struct Extracted<T> {
    pub alpha: Vec<T>,
    /// σ, or (σ₁, σ₂, ρ)
    pub sigma: Vec<T>,
    pub flagged: bool,
    /// residual of the control polynomial / stationarity system
    pub residual: T,
}

/// Unique positive root of `κσ⁶ + Bσ + A = 0` with `κ < 0`, `A ≥ 0`.
fn sextic_root<T: Real>(kappa: T, b: T, a: T) -> T {
    let p = |s: T| kappa * s.powi(6) + b * s + a;
    if a == T::zero() && b <= T::zero() {
        return T::zero();
    }
    let mut hi = T::one();
    while p(hi) > T::zero() {
        hi = hi * T::lit(2.0);
        if !hi.is_finite() {
            return T::nan();
        }
    }
    let mut lo = T::zero();
    for _ in 0..300 {
        let mid = T::lit(0.5) * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if p(mid) > T::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if p(lo).abs() < p(hi).abs() {
        lo
    } else {
        hi
    }
}

fn extract_1asset<T: Real>(beta: &[T], q: T, lambda0: T, dt: T, bounds: &ControlBounds<T>, fallback: (T, T)) -> Extracted<T> {
    let (b2, b3, b4) = (beta[2], beta[3], beta[4]);
    if !(b4 < T::zero()) {
        return Extracted { alpha: vec![fallback.0], sigma: vec![fallback.1], flagged: true, residual: T::zero() };
    }
    let kappa = T::lit(8.0) * b4 * lambda0 * dt;
    let s = sextic_root(kappa, q * b2 * b3, q * b2 * b2);
    let residual = kappa * s.powi(6) + q * b2 * b3 * s + q * b2 * b2;
    let s_c = bounds.clamp_sigma(s);
    let a = -(b2 + b3 * s_c) / (T::lit(2.0) * b4 * s_c * s_c);
    Extracted { alpha: vec![bounds.clamp_alpha(a)], sigma: vec![s_c], flagged: false, residual }
}

/// Controls maximizing over α and minimizing over σ the fitted
/// `λ₀σ⁴Δt + β₂α + β₃ασ + β₄α²σ²` (log basis): σ solves
/// `4λ₀Δtσ⁶ + (β₂β₃/(2β₄))σ + β₂²/(2β₄) = 0`, α = −(β₂ + β₃σ)/(2β₄σ²).
pub fn optimal_controls_log<T: Real>(beta: &[T], params: &MarketParams<T>, dt: T, bounds: &ControlBounds<T>, fallback: (T, T)) -> Extracted<T> {
    extract_1asset(beta, T::one(), params.lambda0(), dt, bounds, fallback)
}

/// Per-path controls for the power basis: σ solves
/// `β₂²X^γ + β₂β₃X^γσ + 8β₄λ₀Δtσ⁶ = 0`.
pub fn optimal_controls_power<T: Real>(
    beta: &[T],
    params: &MarketParams<T>,
    dt: T,
    gamma: T,
    x: &[T],
    bounds: &ControlBounds<T>,
    fallback: (T, T),
) -> Vec<Extracted<T>> {
    x.iter()
        .map(|&xi| extract_1asset(beta, xi.max(T::lit(1e-12)).powf(gamma), params.lambda0(), dt, bounds, fallback))
        .collect()
}

/// Fitted two-asset objective `λ₀‖Σ‖²Δt + βᵀφ` (without the wealth terms),
/// its gradient and Hessian in (α₁, α₂, σ₁, σ₂, ρ).
pub struct Fitted2<T> {
    b: [T; 10],
    a: T,
    c: T,
    e: T,
}

impl<T: Real> Fitted2<T> {
    pub fn new(beta: &[T], lambda0: T, dt: T) -> Self {
        let mut b = [T::zero(); 10];
        b.copy_from_slice(&beta[..10]);
        let ld = lambda0 * dt;
        Self { b, a: ld + b[7], c: ld + b[8], e: T::lit(2.0) * ld + b[9] }
    }

    pub fn value(&self, v: &[T; 5]) -> T {
        let [a1, a2, s1, s2, rho] = *v;
        let b = &self.b;
        self.a * s1.powi(4) + self.c * s2.powi(4) + self.e * rho * rho * s1 * s1 * s2 * s2
            + b[2] * a1
            + b[3] * a2
            + b[4] * a1 * a1 * s1 * s1
            + b[5] * a2 * a2 * s2 * s2
            + b[6] * a1 * a2 * s1 * s2 * rho
    }

    pub fn gradient(&self, v: &[T; 5]) -> [T; 5] {
        let [a1, a2, s1, s2, rho] = *v;
        let b = &self.b;
        let (two, four) = (T::lit(2.0), T::lit(4.0));
        [
            b[2] + two * b[4] * a1 * s1 * s1 + b[6] * a2 * s1 * s2 * rho,
            b[3] + two * b[5] * a2 * s2 * s2 + b[6] * a1 * s1 * s2 * rho,
            four * self.a * s1.powi(3) + two * self.e * rho * rho * s1 * s2 * s2 + two * b[4] * a1 * a1 * s1 + b[6] * a1 * a2 * s2 * rho,
            four * self.c * s2.powi(3) + two * self.e * rho * rho * s1 * s1 * s2 + two * b[5] * a2 * a2 * s2 + b[6] * a1 * a2 * s1 * rho,
            two * self.e * rho * s1 * s1 * s2 * s2 + b[6] * a1 * a2 * s1 * s2,
        ]
    }

    pub fn hessian(&self, v: &[T; 5]) -> [[T; 5]; 5] {
        let [a1, a2, s1, s2, rho] = *v;
        let b = &self.b;
        let (two, four, twelve) = (T::lit(2.0), T::lit(4.0), T::lit(12.0));
        let e = self.e;
        let mut h = [[T::zero(); 5]; 5];
        h[0][0] = two * b[4] * s1 * s1;
        h[0][1] = b[6] * s1 * s2 * rho;
        h[0][2] = four * b[4] * a1 * s1 + b[6] * a2 * s2 * rho;
        h[0][3] = b[6] * a2 * s1 * rho;
        h[0][4] = b[6] * a2 * s1 * s2;
        h[1][1] = two * b[5] * s2 * s2;
        h[1][2] = b[6] * a1 * s2 * rho;
        h[1][3] = four * b[5] * a2 * s2 + b[6] * a1 * s1 * rho;
        h[1][4] = b[6] * a1 * s1 * s2;
        h[2][2] = twelve * self.a * s1 * s1 + two * e * rho * rho * s2 * s2 + two * b[4] * a1 * a1;
        h[2][3] = four * e * rho * rho * s1 * s2 + b[6] * a1 * a2 * rho;
        h[2][4] = four * e * rho * s1 * s2 * s2 + b[6] * a1 * a2 * s2;
        h[3][3] = twelve * self.c * s2 * s2 + two * e * rho * rho * s1 * s1 + two * b[5] * a2 * a2;
        h[3][4] = four * e * rho * s1 * s1 * s2 + b[6] * a1 * a2 * s1;
        h[4][4] = two * e * s1 * s1 * s2 * s2;
        for i in 0..5 {
            for j in 0..i {
                h[i][j] = h[j][i];
            }
        }
        h
    }

    /// Newton on the gradient over the variables in `free`.
    fn newton(&self, v: &mut [T; 5], free: &[usize], iters: usize) -> T {
        let res = |v: &[T; 5]| -> T {
            let g = self.gradient(v);
            free.iter().map(|&i| g[i].abs()).fold(T::zero(), T::max)
        };
        let mut r = res(v);
        for _ in 0..iters {
            let g = self.gradient(v);
            let h = self.hessian(v);
            let k = free.len();
            let mut m = Matrix::zeros(k, k);
            for (ii, &i) in free.iter().enumerate() {
                for (jj, &j) in free.iter().enumerate() {
                    m[(ii, jj)] = h[i][j];
                }
            }
            let rhs: Vec<T> = free.iter().map(|&i| -g[i]).collect();
            let Ok(step) = Lu::new(&m).and_then(|lu| lu.solve(&rhs)) else { break };
            let mut t = T::one();
            let mut improved = false;
            for _ in 0..30 {
                let mut trial = *v;
                for (ii, &i) in free.iter().enumerate() {
                    trial[i] = trial[i] + t * step[ii];
                }
                if trial[2] > T::zero() && trial[3] > T::zero() {
                    let rt = res(&trial);
                    if rt < r {
                        *v = trial;
                        r = rt;
                        improved = true;
                        break;
                    }
                }
                t = t * T::lit(0.5);
            }
            if !improved || r <= T::epsilon() * T::lit(16.0) * self.scale() {
                break;
            }
        }
        r
    }

    fn scale(&self) -> T {
        self.b.iter().fold(T::zero(), |m, &v| m.max(v.abs()))
    }
}

/// Two-asset controls from the 10 fitted coefficients.
///
/// For fixed α the fitted objective is quadratic in the covariance entries,
/// so `Σ̂(α)` is explicit and α-stationarity reduces to two cubic equations,
/// solved by Newton. If the implied |ρ| exceeds 1, ρ is truncated and the
/// remaining four variables are re-solved by Newton with ρ fixed.
pub fn optimal_controls_log_2asset<T: Real>(
    beta: &[T],
    params: &MarketParams<T>,
    dt: T,
    bounds: &ControlBounds<T>,
    fallback: (&[T], &[T]),
) -> Extracted<T> {
    let fall = || Extracted { alpha: fallback.0.to_vec(), sigma: fallback.1.to_vec(), flagged: true, residual: T::zero() };
    let f = Fitted2::new(beta, params.lambda0(), dt);
    let b = &f.b;
    let two = T::lit(2.0);
    if !(b[4] < T::zero() && b[5] < T::zero() && f.a > T::zero() && f.c > T::zero() && f.e > T::zero()) {
        return fall();
    }
    let k11 = -b[4] / (two * f.a);
    let k22 = -b[5] / (two * f.c);
    let k12 = -b[6] / (two * f.e);
    // α-stationarity with Σ̂(α) substituted
    let g = |a: [T; 2]| -> [T; 2] {
        [
            b[2] + two * b[4] * k11 * a[0].powi(3) + b[6] * k12 * a[0] * a[1] * a[1],
            b[3] + two * b[5] * k22 * a[1].powi(3) + b[6] * k12 * a[0] * a[0] * a[1],
        ]
    };
    let jac = |a: [T; 2]| -> [[T; 2]; 2] {
        let six = T::lit(6.0);
        [
            [six * b[4] * k11 * a[0] * a[0] + b[6] * k12 * a[1] * a[1], two * b[6] * k12 * a[0] * a[1]],
            [two * b[6] * k12 * a[0] * a[1], six * b[5] * k22 * a[1] * a[1] + b[6] * k12 * a[0] * a[0]],
        ]
    };
    let mut a = [(-b[2] / (two * b[4] * k11)).cbrt(), (-b[3] / (two * b[5] * k22)).cbrt()];
    let norm = |v: [T; 2]| v[0].abs().max(v[1].abs());
    let mut r = norm(g(a));
    for _ in 0..100 {
        let j = jac(a);
        let det = j[0][0] * j[1][1] - j[0][1] * j[1][0];
        if det == T::zero() || !det.is_finite() {
            break;
        }
        let gv = g(a);
        let step = [(j[1][1] * gv[0] - j[0][1] * gv[1]) / det, (j[0][0] * gv[1] - j[1][0] * gv[0]) / det];
        let mut t = T::one();
        let mut improved = false;
        for _ in 0..40 {
            let trial = [a[0] - t * step[0], a[1] - t * step[1]];
            let rt = norm(g(trial));
            if rt < r {
                a = trial;
                r = rt;
                improved = true;
                break;
            }
            t = t * T::lit(0.5);
        }
        if !improved {
            break;
        }
    }
    if !a[0].is_finite() || !a[1].is_finite() {
        return fall();
    }
    let s1 = (k11 * a[0] * a[0]).sqrt();
    let s2 = (k22 * a[1] * a[1]).sqrt();
    if !(s1 > T::zero() && s2 > T::zero()) {
        return fall();
    }
    let rho = k12 * a[0] * a[1] / (s1 * s2);
    let mut v = [a[0], a[1], s1, s2, rho];
    let residual = if rho.abs() <= T::one() {
        f.newton(&mut v, &[0, 1, 2, 3, 4], 20)
    } else {
        v[4] = rho.signum();
        f.newton(&mut v, &[0, 1, 2, 3], 50)
    };
    if !v.iter().all(|x| x.is_finite()) {
        return fall();
    }
    Extracted {
        alpha: vec![bounds.clamp_alpha(v[0]), bounds.clamp_alpha(v[1])],
        sigma: vec![bounds.clamp_sigma(v[2]), bounds.clamp_sigma(v[3]), v[4].max(-T::one()).min(T::one())],
        flagged: false,
        residual,
    }
}

/// Controls from a fit at the given wealth levels.
fn extract<T: Real>(
    basis: &BasisSpec<T>,
    beta: &[T],
    params: &MarketParams<T>,
    dt: T,
    bounds: &ControlBounds<T>,
    fallback: &(Vec<T>, Vec<T>),
    x: &[T],
) -> Vec<Extracted<T>> {
    match basis.family {
        BasisFamily::Log1Asset => {
            let e = optimal_controls_log(beta, params, dt, bounds, (fallback.0[0], fallback.1[0]));
            vec![e; x.len()]
        }
        BasisFamily::Power1Asset => {
            optimal_controls_power(beta, params, dt, basis.gamma, x, bounds, (fallback.0[0], fallback.1[0]))
        }
        BasisFamily::Log2Asset => {
            let e = optimal_controls_log_2asset(beta, params, dt, bounds, (&fallback.0, &fallback.1));
            vec![e; x.len()]
        }
    }
}

fn running_penalty<T: Real>(params: &MarketParams<T>, pen: Penalty, sigma: &[T]) -> T {
    if sigma.len() == 1 {
        pen.scalar(params, sigma[0])
    } else {
        let (s1, s2, rho) = (sigma[0], sigma[1], sigma[2]);
        let c = rho * s1 * s2;
        let m = Matrix::from_vec(2, 2, vec![s1 * s1, c, c, s2 * s2]).unwrap();
        pen.matrix(params, &m)
    }
}

/// Mean extracted controls at one step.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StepControls<T> {
    pub alpha: Vec<T>,
    pub sigma: Vec<T>,
    pub max_residual: T,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BackwardResult<T> {
    pub fits: Vec<RegressionFit<T>>,
    pub controls: Vec<StepControls<T>>,
    /// mean of v̄(n, ·) over paths, `n = 0..=N`
    pub step_values: Vec<T>,
    pub value: T,
    /// sqrt(Σₙ mean(resₙ²)/M): accumulated regression noise
    pub se: T,
}

fn check_penalty(basis: &BasisSpec<impl Real>, pen: Penalty) -> Result<(), McError> {
    let ok = match basis.family {
        BasisFamily::Log1Asset | BasisFamily::Power1Asset => pen == Penalty::QuadVar,
        BasisFamily::Log2Asset => pen == Penalty::FrobSq,
    };
    if ok {
        Ok(())
    } else {
        Err(McError::Config(format!("{:?} basis is derived for a different penalty than {pen:?}", basis.family)))
    }
}

/// Backward regression pass.
pub fn backward_pass<T: Real>(
    ens: &PathEnsemble<T>,
    basis: &BasisSpec<T>,
    params: &MarketParams<T>,
    pen: Penalty,
    utility: &Utility<T>,
    bounds: &ControlBounds<T>,
    law: &ControlLaw<T>,
) -> Result<BackwardResult<T>, McError> {
    check_penalty(basis, pen)?;
    if basis.dim() != ens.dim || params.dim() != ens.dim {
        return Err(McError::Config("basis, market and ensemble dimensions differ".into()));
    }
    let k = basis.len();
    let m = ens.paths;
    if m < 50 * k {
        return Err(McError::Config(format!("{m} paths is too few for {k} basis functions (need >= {})", 50 * k)));
    }
    let n_steps = ens.steps;
    let fallback = law.mean();
    let mut v: Vec<T> = (0..m).map(|p| utility.value(ens.x(p, n_steps).max(T::lit(1e-300)))).collect();
    let mut fits = vec![None; n_steps];
    let mut controls = vec![None; n_steps];
    let mut step_values = vec![T::zero(); n_steps + 1];
    step_values[n_steps] = mean(&v);
    let mut se2 = T::zero();
    let mut design = Matrix::zeros(m, k);
    let mut phi = vec![T::zero(); k];
    for n in (0..n_steps).rev() {
        for p in 0..m {
            basis.features(ens.x(p, n), ens.alpha_at(p, n), ens.sigma_at(p, n), &mut phi);
            for j in 0..k {
                design[(p, j)] = phi[j];
            }
        }
        // with a common starting point the wealth column duplicates the constant
        let (x_lo, x_hi) = (0..m).map(|p| ens.x(p, n)).fold((T::infinity(), T::neg_infinity()), |(a, b), x| (a.min(x), b.max(x)));
        let constant_wealth = x_hi - x_lo <= T::lit(1e-12) * x_hi.abs();
        let mut ls = if constant_wealth {
            let keep: Vec<usize> = (0..k).filter(|&j| j != 1).collect();
            let mut reduced = Matrix::zeros(m, k - 1);
            for p in 0..m {
                for (jj, &j) in keep.iter().enumerate() {
                    reduced[(p, jj)] = design[(p, j)];
                }
            }
            least_squares(&reduced, &v)
        } else {
            least_squares(&design, &v)
        }
        .map_err(|e| match e {
            LinalgError::Singular { cond } => McError::RankDeficient { step: n, cond },
            _ => McError::NotFinite { step: n },
        })?;
        if constant_wealth {
            ls.beta.insert(1, T::zero());
        }
        if !(ls.cond < 1e12) {
            return Err(McError::RankDeficient { step: n, cond: ls.cond });
        }
        let res_norm = ls.residuals.iter().map(|&r| r * r).sum::<T>().sqrt();
        let mut orth = 0.0f64;
        for j in 0..k {
            let mut num = T::zero();
            let mut col = T::zero();
            for p in 0..m {
                num = num + design[(p, j)] * ls.residuals[p];
                col = col + design[(p, j)] * design[(p, j)];
            }
            let den = col.sqrt() * res_norm;
            if den > T::zero() {
                orth = orth.max((num.abs() / den).f64());
            }
        }
        let ms = ls.residuals.iter().map(|&r| r * r).sum::<T>() / T::lit(m as f64);
        se2 = se2 + ms;
        let xs: Vec<T> = (0..m).map(|p| ens.x(p, n)).collect();
        let ex = extract(basis, &ls.beta, params, ens.dt, bounds, &fallback, &xs);
        let flagged = ex.iter().any(|e| e.flagged);
        let mut max_res = T::zero();
        for (p, e) in ex.iter().enumerate() {
            v[p] = running_penalty(params, pen, &e.sigma) * ens.dt + basis.eval(&ls.beta, xs[p], &e.alpha, &e.sigma);
            max_res = max_res.max(e.residual.abs());
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(McError::NotFinite { step: n });
        }
        step_values[n] = mean(&v);
        controls[n] = Some(mean_controls(&ex, max_res));
        fits[n] = Some(RegressionFit {
            step: n,
            beta: ls.beta,
            residual_rms: ms.sqrt(),
            cond: ls.cond,
            orthogonality: orth,
            flagged,
        });
    }
    Ok(BackwardResult {
        fits: fits.into_iter().map(Option::unwrap).collect(),
        controls: controls.into_iter().map(Option::unwrap).collect(),
        value: step_values[0],
        step_values,
        se: (se2 / T::lit(m as f64)).sqrt(),
    })
}

fn mean<T: Real>(v: &[T]) -> T {
    v.iter().copied().sum::<T>() / T::lit(v.len() as f64)
}

fn mean_controls<T: Real>(ex: &[Extracted<T>], max_residual: T) -> StepControls<T> {
    let n = T::lit(ex.len() as f64);
    let da = ex[0].alpha.len();
    let ds = ex[0].sigma.len();
    let alpha = (0..da).map(|i| ex.iter().map(|e| e.alpha[i]).sum::<T>() / n).collect();
    let sigma = (0..ds).map(|i| ex.iter().map(|e| e.sigma[i]).sum::<T>() / n).collect();
    StepControls { alpha, sigma, max_residual }
}

/// Weighted count, mean and sum of weighted squared deviations.
#[derive(Debug, Clone, Copy)]
struct Moments<T> {
    weight: T,
    mean: T,
    m2: T,
}

impl<T: Real> Moments<T> {
    fn empty() -> Self {
        Self { weight: T::zero(), mean: T::zero(), m2: T::zero() }
    }

    fn of(units: &[(T, T)]) -> Self {
        let weight = units.iter().fold(T::zero(), |a, u| a + u.1);
        if weight == T::zero() {
            return Self::empty();
        }
        let mean = units.iter().fold(T::zero(), |a, u| a + u.0 * u.1) / weight;
        let m2 = units.iter().fold(T::zero(), |a, u| a + u.1 * (u.0 - mean) * (u.0 - mean));
        Self { weight, mean, m2 }
    }

    fn merge(a: Self, b: Self) -> Self {
        let weight = a.weight + b.weight;
        if weight == T::zero() {
            return a;
        }
        let delta = b.mean - a.mean;
        Self { weight, mean: a.mean + delta * b.weight / weight, m2: a.m2 + b.m2 + delta * delta * a.weight * b.weight / weight }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ForwardResult<T> {
    pub value: T,
    pub se: T,
}

/// Re-simulates the extracted policy on fresh paths and averages
/// `λ₀ΣF Δt + U(X_N)`.
pub fn forward_resimulate<T: Real>(
    fits: &[RegressionFit<T>],
    basis: &BasisSpec<T>,
    params: &MarketParams<T>,
    pen: Penalty,
    utility: &Utility<T>,
    bounds: &ControlBounds<T>,
    law: &ControlLaw<T>,
    x0: T,
    paths: usize,
    seed: u64,
    antithetic: bool,
) -> Result<ForwardResult<T>, McError> {
    let steps = fits.len();
    if steps == 0 || paths < 2 {
        return Err(McError::Config("forward pass needs fits and at least 2 paths".into()));
    }
    if antithetic && paths % 2 != 0 {
        return Err(McError::Config("antithetic sampling needs an even path count".into()));
    }
    let d = basis.dim();
    let dt = params.horizon() / T::lit(steps as f64);
    let sqdt = dt.sqrt();
    let excess = params.excess();
    let r = params.r();
    let fallback = law.mean();
    // log bases give wealth-independent controls: extract once per step
    let constant: Option<Vec<Extracted<T>>> = match basis.family {
        BasisFamily::Power1Asset => None,
        _ => Some(fits.iter().map(|f| extract(basis, &f.beta, params, dt, bounds, &fallback, &[x0]).remove(0)).collect()),
    };
    let n_chunks = paths.div_ceil(CHUNK);
    let partial: Vec<Moments<T>> = (0..n_chunks)
        .into_par_iter()
        .map(|c| {
            let lo = c * CHUNK;
            let count = (lo + CHUNK).min(paths) - lo;
            let mut rng = stream(seed, c);
            let mut x = vec![x0; count];
            let mut run = vec![T::zero(); count];
            let mut z = vec![T::zero(); d];
            for (n, fit) in fits.iter().enumerate() {
                let ex_path = match &constant {
                    Some(_) => None,
                    None => Some(extract(basis, &fit.beta, params, dt, bounds, &fallback, &x)),
                };
                let mut p = 0;
                while p < count {
                    let pair = antithetic && p + 1 < count;
                    for zi in z.iter_mut() {
                        let s: f64 = rng.sample(StandardNormal);
                        *zi = T::lit(s) * sqdt;
                    }
                    let width = if pair { 2 } else { 1 };
                    for j in 0..width {
                        let q = p + j;
                        let e = match (&constant, &ex_path) {
                            (Some(c), _) => &c[n],
                            (None, Some(v)) => &v[q],
                            _ => unreachable!(),
                        };
                        let dw: Vec<T> = if j == 1 { z.iter().map(|&v| -v).collect() } else { z.clone() };
                        run[q] = run[q] + running_penalty(params, pen, &e.sigma) * dt;
                        x[q] = x[q] * growth(&excess, r, &e.alpha, &e.sigma, dt, &dw).exp();
                    }
                    p += width;
                }
            }
            // (unit value, weight); antithetic pair means are the independent draws
            let mut units: Vec<(T, T)> = Vec::with_capacity(count);
            let width = if antithetic { 2 } else { 1 };
            let mut q = 0;
            while q < count {
                let w = width.min(count - q);
                let mut v = T::zero();
                for j in 0..w {
                    v = v + run[q + j] + utility.value(x[q + j].max(T::lit(1e-300)));
                }
                let wt = T::lit(w as f64);
                units.push((v / wt, wt));
                q += w;
            }
            Moments::of(&units)
        })
        .collect();
    let total = partial.into_iter().fold(Moments::empty(), Moments::merge);
    let nf = T::lit(paths as f64);
    let value = total.mean;
    let n_units = if antithetic { nf / T::lit(2.0) } else { nf };
    let var = (total.m2 / (nf - T::one())).max(T::zero());
    let se = (var / n_units).sqrt();
    if !value.is_finite() {
        return Err(McError::NotFinite { step: steps });
    }
    Ok(ForwardResult { value, se })
}

/// Monte Carlo run settings.
#[derive(Debug, Clone, PartialEq)]
pub struct McConfig<T> {
    pub x0: T,
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    pub forward_seed: u64,
    pub forward_paths: usize,
    pub antithetic: Antithetic,
    pub bounds: ControlBounds<T>,
    /// `None`: [`ControlLaw::default_for`]
    pub law: Option<ControlLaw<T>>,
}

impl<T: Real> McConfig<T> {
    /// 10⁵ paths, 50 steps.
    pub fn desk(x0: T, seed: u64) -> Self {
        Self {
            x0,
            paths: 100_000,
            steps: 50,
            seed,
            forward_seed: seed ^ 0x9e37_79b9_7f4a_7c15,
            forward_paths: 100_000,
            antithetic: Antithetic::Backward,
            bounds: ControlBounds::default(),
            law: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimates<T> {
    pub backward: T,
    pub backward_se: T,
    pub forward: T,
    pub forward_se: T,
}

#[derive(Debug, Clone)]
pub struct McRun<T> {
    pub backward: BackwardResult<T>,
    pub forward: ForwardResult<T>,
    pub estimates: McEstimates<T>,
    pub basis: BasisSpec<T>,
}

/// Simulation, backward pass and forward resimulation.
pub fn run<T: Real>(params: &MarketParams<T>, pen: Penalty, utility: &Utility<T>, cfg: &McConfig<T>) -> Result<McRun<T>, McError> {
    let basis = BasisSpec::for_utility(utility, params.dim())?;
    let law = match &cfg.law {
        Some(l) => l.clone(),
        None => ControlLaw::default_for(params)?,
    };
    let ens = simulate_randomized(params, &cfg.bounds, &law, cfg.x0, cfg.paths, cfg.steps, cfg.seed, cfg.antithetic.backward())?;
    let backward = backward_pass(&ens, &basis, params, pen, utility, &cfg.bounds, &law)?;
    drop(ens);
    let forward = forward_resimulate(
        &backward.fits,
        &basis,
        params,
        pen,
        utility,
        &cfg.bounds,
        &law,
        cfg.x0,
        cfg.forward_paths,
        cfg.forward_seed,
        cfg.antithetic.forward(),
    )?;
    let estimates = McEstimates { backward: backward.value, backward_se: backward.se, forward: forward.value, forward_se: forward.se };
    Ok(McRun { backward, forward, estimates, basis })
}

/// Per-step diagnostics: `step,beta_0..beta_k,alpha_hat,sigma_hat,cond`
/// (two assets: `alpha_hat_1,alpha_hat_2,sigma_hat_1,sigma_hat_2,rho_hat`).
pub fn write_diagnostics<T: Real, W: Write>(res: &BackwardResult<T>, mut w: W) -> std::io::Result<()> {
    let k = res.fits.first().map_or(0, |f| f.beta.len());
    let two = res.controls.first().is_some_and(|c| c.alpha.len() == 2);
    let mut header = vec!["step".to_string()];
    header.extend((0..k).map(|j| format!("beta_{j}")));
    if two {
        header.extend(["alpha_hat_1", "alpha_hat_2", "sigma_hat_1", "sigma_hat_2", "rho_hat"].map(String::from));
    } else {
        header.extend(["alpha_hat", "sigma_hat"].map(String::from));
    }
    header.push("cond".into());
    writeln!(w, "{}", header.join(","))?;
    for (f, c) in res.fits.iter().zip(&res.controls) {
        let mut row = vec![f.step.to_string()];
        row.extend(f.beta.iter().map(|b| b.to_string()));
        row.extend(c.alpha.iter().map(|a| a.to_string()));
        row.extend(c.sigma.iter().map(|s| s.to_string()));
        row.push(f.cond.to_string());
        writeln!(w, "{}", row.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn sextic_trivial_roots() {
        let p = MarketParams::<f64>::reference_one_asset();
        // 4λ₀dt = 1 with λ₀ = 10
        let dt = 1.0 / 40.0;
        let b = ControlBounds::default();
        let e = optimal_controls_log(&[0.0, 0.0, 1.0, 0.0, -1.0], &p, dt, &b, (0.5, 0.2));
        assert_relative_eq!(e.sigma[0], 0.5f64.powf(1.0 / 6.0), epsilon = 1e-14);
        assert!(e.residual.abs() <= 1e-12);
        // X = 1, β₂ = 1, β₃ = 0, 8β₄λ₀dt = −1
        let dt = 1.0 / 80.0;
        let e = optimal_controls_power(&[0.0, 0.0, 1.0, 0.0, -1.0], &p, dt, 0.25, &[1.0], &b, (0.5, 0.2));
        assert_relative_eq!(e[0].sigma[0], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn wrong_sign_flags() {
        let p = MarketParams::<f64>::reference_one_asset();
        let e = optimal_controls_log(&[0.0, 0.0, 1.0, 0.0, 1.0], &p, 0.02, &ControlBounds::default(), (0.5, 0.2));
        assert!(e.flagged);
        assert_eq!((e.alpha[0], e.sigma[0]), (0.5, 0.2));
    }

    #[test]
    fn fitted2_derivatives_match_differences() {
        let beta = [0.1, 0.02, 0.0004, 0.0006, -0.01, -0.012, -0.02, 0.001, 0.002, -0.003];
        let f = Fitted2::new(&beta, 10.0, 0.02);
        let v = [0.7, 0.9, 0.15, 0.2, 0.4];
        let g = f.gradient(&v);
        let h = f.hessian(&v);
        let eps = 1e-6;
        for i in 0..5 {
            let mut up = v;
            let mut dn = v;
            up[i] += eps;
            dn[i] -= eps;
            let fd = (f.value(&up) - f.value(&dn)) / (2.0 * eps);
            assert_relative_eq!(g[i], fd, epsilon = 1e-9);
            let gu = f.gradient(&up);
            let gd = f.gradient(&dn);
            for j in 0..5 {
                assert_relative_eq!(h[i][j], (gu[j] - gd[j]) / (2.0 * eps), epsilon = 1e-7);
            }
        }
    }
}
