//! Market model, utilities, penalties and the pointwise Hamiltonian saddle.

use thiserror::Error;

use crate::linalg::{dot, solve_checked, symmetric_eigen, LinalgError, Matrix};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("singular reference covariance (condition estimate {cond:e})")]
    Singular { cond: f64 },
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Reference volatility (one asset) or reference covariance (several assets).
#[derive(Debug, Clone, PartialEq)]
pub enum Reference<T> {
    Volatility(T),
    Covariance(Matrix<T>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarketParams<T> {
    mu: Vec<T>,
    r: T,
    reference: Reference<T>,
    lambda0: T,
    horizon: T,
}

impl<T: Real> MarketParams<T> {
    pub fn one_asset(mu: T, r: T, sigma0: T, lambda0: T, horizon: T) -> Result<Self, ModelError> {
        if !(sigma0 >= T::zero()) || !sigma0.is_finite() {
            return Err(ModelError::InvalidParams(format!("reference volatility {sigma0} must be finite and >= 0")));
        }
        Self::validated(vec![mu], r, Reference::Volatility(sigma0), lambda0, horizon)
    }

    pub fn multi_asset(mu: Vec<T>, r: T, sigma0: Matrix<T>, lambda0: T, horizon: T) -> Result<Self, ModelError> {
        let d = mu.len();
        if sigma0.rows() != d || sigma0.cols() != d {
            return Err(ModelError::Shape(format!(
                "{d} drifts but a {}x{} reference covariance",
                sigma0.rows(),
                sigma0.cols()
            )));
        }
        if !sigma0.is_finite() || !sigma0.is_symmetric(T::lit(1e-12) * sigma0.frobenius_norm().max(T::one())) {
            return Err(ModelError::InvalidParams("reference covariance must be finite and symmetric".into()));
        }
        let (ev, _) = symmetric_eigen(&sigma0)?;
        let tol = T::lit(1e-12) * sigma0.frobenius_norm();
        if ev.iter().any(|&e| e < -tol) {
            return Err(ModelError::InvalidParams(format!(
                "reference covariance has a negative eigenvalue {}",
                ev[0]
            )));
        }
        Self::validated(mu, r, Reference::Covariance(sigma0), lambda0, horizon)
    }

    fn validated(mu: Vec<T>, r: T, reference: Reference<T>, lambda0: T, horizon: T) -> Result<Self, ModelError> {
        if mu.is_empty() {
            return Err(ModelError::InvalidParams("at least one asset required".into()));
        }
        if mu.iter().any(|m| !m.is_finite()) || !r.is_finite() {
            return Err(ModelError::InvalidParams("drifts and rate must be finite".into()));
        }
        if !(lambda0 > T::zero()) || !lambda0.is_finite() {
            return Err(ModelError::InvalidParams(format!("lambda0 = {lambda0} must be positive")));
        }
        if !(horizon > T::zero()) || !horizon.is_finite() {
            return Err(ModelError::InvalidParams(format!("horizon = {horizon} must be positive")));
        }
        Ok(Self { mu, r, reference, lambda0, horizon })
    }

    /// mu = 0.035, r = 0.015, sigma0 = 0.2, lambda0 = 10, T = 1.
    pub fn reference_one_asset() -> Self {
        Self::one_asset(T::lit(0.035), T::lit(0.015), T::lit(0.2), T::lit(10.0), T::one()).unwrap()
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &[T] {
        &self.mu
    }

    pub fn r(&self) -> T {
        self.r
    }

    pub fn lambda0(&self) -> T {
        self.lambda0
    }

    pub fn horizon(&self) -> T {
        self.horizon
    }

    pub fn reference(&self) -> &Reference<T> {
        &self.reference
    }

    /// Excess drift vector mu - r 1.
    pub fn excess(&self) -> Vec<T> {
        self.mu.iter().map(|&m| m - self.r).collect()
    }

    /// Reference volatility; for a covariance reference, the first asset's.
    pub fn sigma0(&self) -> T {
        match &self.reference {
            Reference::Volatility(s) => *s,
            Reference::Covariance(m) => m[(0, 0)].max(T::zero()).sqrt(),
        }
    }

    /// Reference covariance (1x1 for a volatility reference).
    pub fn sigma0_matrix(&self) -> Matrix<T> {
        match &self.reference {
            Reference::Volatility(s) => Matrix::diagonal(&[*s * *s]),
            Reference::Covariance(m) => m.clone(),
        }
    }

    pub fn with_lambda0(&self, lambda0: T) -> Result<Self, ModelError> {
        Self::validated(self.mu.clone(), self.r, self.reference.clone(), lambda0, self.horizon)
    }

    pub fn with_mu(&self, mu: Vec<T>) -> Result<Self, ModelError> {
        if mu.len() != self.mu.len() {
            return Err(ModelError::Shape(format!("{} drifts for {} assets", mu.len(), self.mu.len())));
        }
        Self::validated(mu, self.r, self.reference.clone(), self.lambda0, self.horizon)
    }

    pub fn with_horizon(&self, horizon: T) -> Result<Self, ModelError> {
        Self::validated(self.mu.clone(), self.r, self.reference.clone(), self.lambda0, horizon)
    }
}

/// Terminal utility.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Utility<T> {
    Log,
    /// `coef * x^gamma`
    Power { coef: T, gamma: T },
}

impl<T: Real> Utility<T> {
    pub fn power(coef: T, gamma: T) -> Result<Self, ModelError> {
        if !(coef > T::zero()) || !coef.is_finite() {
            return Err(ModelError::InvalidParams(format!("power coefficient {coef} must be positive")));
        }
        if !(gamma > T::zero() && gamma < T::one()) {
            return Err(ModelError::InvalidParams(format!("power exponent {gamma} must lie in (0, 1)")));
        }
        Ok(Utility::Power { coef, gamma })
    }

    pub fn eval(&self, x: T) -> Result<T, ModelError> {
        if !(x > T::zero()) {
            return Err(ModelError::Domain(format!("utility evaluated at non-positive wealth {x}")));
        }
        Ok(self.value(x))
    }

    /// Unchecked evaluation; callers guarantee `x > 0`.
    #[inline]
    pub fn value(&self, x: T) -> T {
        match *self {
            Utility::Log => x.ln(),
            Utility::Power { coef, gamma } => coef * x.powf(gamma),
        }
    }

    #[inline]
    pub fn deriv(&self, x: T) -> T {
        match *self {
            Utility::Log => x.recip(),
            Utility::Power { coef, gamma } => coef * gamma * x.powf(gamma - T::one()),
        }
    }

    #[inline]
    pub fn second_deriv(&self, x: T) -> T {
        match *self {
            Utility::Log => -(x * x).recip(),
            Utility::Power { coef, gamma } => coef * gamma * (gamma - T::one()) * x.powf(gamma - T::lit(2.0)),
        }
    }
}

/// Penalty on the adversary's volatility or covariance choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Penalty {
    /// λ₀(σ − σ₀)²
    SqDevVol,
    /// λ₀(σ²)²
    QuadVar,
    /// λ₀‖Σ − Σ₀‖²
    FrobDev,
    /// λ₀‖Σ‖²
    FrobSq,
}

/// Argument of a penalty: a volatility or a covariance matrix.
#[derive(Debug, Clone, Copy)]
pub enum CovArg<'a, T> {
    Vol(T),
    Cov(&'a Matrix<T>),
}

impl Penalty {
    pub fn eval<T: Real>(self, params: &MarketParams<T>, arg: CovArg<'_, T>) -> Result<T, ModelError> {
        match arg {
            CovArg::Vol(s) => {
                if params.dim() != 1 {
                    return Err(ModelError::Shape(format!(
                        "scalar volatility supplied for a {}-asset market",
                        params.dim()
                    )));
                }
                if !(s >= T::zero()) {
                    return Err(ModelError::Domain(format!("negative volatility {s}")));
                }
                Ok(self.scalar(params, s))
            }
            CovArg::Cov(m) => {
                let d = params.dim();
                if m.rows() != d || m.cols() != d {
                    return Err(ModelError::Shape(format!(
                        "{}x{} covariance for a {d}-asset market",
                        m.rows(),
                        m.cols()
                    )));
                }
                match self {
                    Penalty::FrobDev | Penalty::FrobSq => Ok(self.matrix(params, m)),
                    _ if d == 1 => Ok(self.scalar(params, m[(0, 0)].max(T::zero()).sqrt())),
                    _ => Err(ModelError::Shape(format!("{self:?} is defined for one asset only"))),
                }
            }
        }
    }

    /// λ₀F(σ) for a single asset. Matrix penalties act on the 1x1 matrix σ².
    #[inline]
    pub fn scalar<T: Real>(self, params: &MarketParams<T>, s: T) -> T {
        let l = params.lambda0();
        let s0 = params.sigma0();
        match self {
            Penalty::SqDevVol => l * (s - s0) * (s - s0),
            Penalty::QuadVar | Penalty::FrobSq => l * (s * s) * (s * s),
            Penalty::FrobDev => {
                let d = s * s - s0 * s0;
                l * d * d
            }
        }
    }

    /// d/dσ of [`Penalty::scalar`].
    #[inline]
    pub fn scalar_deriv<T: Real>(self, params: &MarketParams<T>, s: T) -> T {
        let l = params.lambda0();
        let s0 = params.sigma0();
        let two = T::lit(2.0);
        match self {
            Penalty::SqDevVol => two * l * (s - s0),
            Penalty::QuadVar | Penalty::FrobSq => T::lit(4.0) * l * s * s * s,
            Penalty::FrobDev => T::lit(4.0) * l * s * (s * s - s0 * s0),
        }
    }

    /// λ₀ times the squared Frobenius distance to the penalty's centre.
    pub fn matrix<T: Real>(self, params: &MarketParams<T>, m: &Matrix<T>) -> T {
        let l = params.lambda0();
        match self {
            Penalty::FrobDev => {
                let s0 = params.sigma0_matrix();
                let n = m.sub(&s0).map(|d| d.frobenius_norm()).unwrap_or(T::nan());
                l * n * n
            }
            _ => {
                let n = m.frobenius_norm();
                l * n * n
            }
        }
    }

    /// Centre of a Frobenius-type penalty (Σ₀ or the zero matrix).
    pub fn centre<T: Real>(self, params: &MarketParams<T>) -> Matrix<T> {
        match self {
            Penalty::FrobDev => params.sigma0_matrix(),
            _ => Matrix::zeros(params.dim(), params.dim()),
        }
    }

    pub fn is_frobenius(self) -> bool {
        matches!(self, Penalty::FrobDev | Penalty::FrobSq)
    }
}

/// Admissible control boxes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlBounds<T> {
    /// allocations lie in [-alpha_max, alpha_max] per asset
    pub alpha_max: T,
    pub sigma_min: T,
    pub sigma_max: T,
}

impl<T: Real> Default for ControlBounds<T> {
    fn default() -> Self {
        Self { alpha_max: T::lit(50.0), sigma_min: T::lit(1e-6), sigma_max: T::lit(5.0) }
    }
}

impl<T: Real> ControlBounds<T> {
    pub fn new(alpha_max: T, sigma_min: T, sigma_max: T) -> Result<Self, ModelError> {
        if !(alpha_max > T::zero()) || !alpha_max.is_finite() {
            return Err(ModelError::InvalidParams(format!("alpha bound {alpha_max} must be finite and positive")));
        }
        if !(sigma_min > T::zero() && sigma_min < sigma_max) || !sigma_max.is_finite() {
            return Err(ModelError::InvalidParams(format!(
                "volatility box [{sigma_min}, {sigma_max}] must be nonempty with a positive lower end"
            )));
        }
        Ok(Self { alpha_max, sigma_min, sigma_max })
    }

    pub fn widened(&self, factor: T) -> Self {
        Self { alpha_max: self.alpha_max * factor, sigma_min: self.sigma_min / factor, sigma_max: self.sigma_max * factor }
    }

    pub fn clamp_alpha(&self, a: T) -> T {
        a.max(-self.alpha_max).min(self.alpha_max)
    }

    pub fn clamp_sigma(&self, s: T) -> T {
        s.max(self.sigma_min).min(self.sigma_max)
    }
}

/// Worst-case volatility (one asset) or (σ₁, σ₂, ρ) (two assets).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaHat<T> {
    Vol(T),
    Pair { s1: T, s2: T, rho: T },
}

impl<T: Real> SigmaHat<T> {
    pub fn covariance(&self) -> Matrix<T> {
        match *self {
            SigmaHat::Vol(s) => Matrix::diagonal(&[s * s]),
            SigmaHat::Pair { s1, s2, rho } => {
                let c = rho * s1 * s2;
                Matrix::from_vec(2, 2, vec![s1 * s1, c, c, s2 * s2]).unwrap()
            }
        }
    }

    pub fn vol(&self) -> Option<T> {
        match *self {
            SigmaHat::Vol(s) => Some(s),
            SigmaHat::Pair { .. } => None,
        }
    }

    pub fn from_covariance(m: &Matrix<T>) -> Self {
        if m.rows() == 1 {
            return SigmaHat::Vol(m[(0, 0)].max(T::zero()).sqrt());
        }
        let s1 = m[(0, 0)].max(T::zero()).sqrt();
        let s2 = m[(1, 1)].max(T::zero()).sqrt();
        let rho = if s1 > T::zero() && s2 > T::zero() {
            (m[(0, 1)] / (s1 * s2)).max(-T::one()).min(T::one())
        } else {
            T::zero()
        };
        SigmaHat::Pair { s1, s2, rho }
    }
}

/// A saddle point of the pointwise game.
#[derive(Debug, Clone, PartialEq)]
pub struct SaddleControls<T> {
    pub alpha: Vec<T>,
    pub sigma: SigmaHat<T>,
    /// max absolute first-order-condition residual
    pub residual: T,
    /// no excess return: the trivial saddle was returned
    pub degenerate: bool,
    /// some control sits on its box boundary
    pub boundary: bool,
}

/// Merton fraction (μ − r)/(σ²(1 − γ)); γ = 0 is log utility.
pub fn merton_weight<T: Real>(mu: T, r: T, sigma: T, gamma: T) -> Result<T, ModelError> {
    if !(gamma < T::one()) {
        return Err(ModelError::Domain(format!("risk exponent {gamma} must be < 1")));
    }
    if !(sigma > T::zero()) {
        return Err(ModelError::Domain(format!("volatility {sigma} must be positive")));
    }
    Ok((mu - r) / (sigma * sigma * (T::one() - gamma)))
}

/// Log-utility weights Σ₀⁻¹(μ − r1).
pub fn nonrobust_log_weights<T: Real>(mu: &[T], r: T, sigma0: &Matrix<T>) -> Result<Vec<T>, ModelError> {
    if sigma0.rows() != mu.len() || sigma0.cols() != mu.len() {
        return Err(ModelError::Shape(format!(
            "{} drifts but a {}x{} covariance",
            mu.len(),
            sigma0.rows(),
            sigma0.cols()
        )));
    }
    let b: Vec<T> = mu.iter().map(|&m| m - r).collect();
    if b.iter().all(|&v| v == T::zero()) {
        return Ok(b);
    }
    solve_checked(sigma0, &b, 1e12).map_err(|e| match e {
        LinalgError::Singular { cond } => ModelError::Singular { cond },
        other => ModelError::Linalg(other),
    })
}

/// Exponent of the one-step wealth update for one asset.
#[inline]
pub fn log_growth<T: Real>(excess: T, r: T, alpha: T, sigma: T, dt: T, dw: T) -> T {
    let av = alpha * sigma;
    (alpha * excess + r - T::lit(0.5) * av * av) * dt + av * dw
}

/// Pointwise game integrand
/// λ₀F(Σ) + (aᵀ(μ−r1) + r)·x·p + ½·aᵀΣa·x²·M.
pub fn hamiltonian_integrand<T: Real>(
    x: T,
    p: T,
    m: T,
    params: &MarketParams<T>,
    pen: Penalty,
    alpha: &[T],
    sigma: &SigmaHat<T>,
) -> T {
    let b = params.excess();
    let xp = x * p;
    let x2m = x * x * m;
    match *sigma {
        SigmaHat::Vol(s) => {
            let a = alpha[0];
            pen.scalar(params, s) + (a * b[0] + params.r()) * xp + T::lit(0.5) * a * a * s * s * x2m
        }
        SigmaHat::Pair { .. } => {
            let cov = sigma.covariance();
            let quad = cov.quad_form(alpha).unwrap_or(T::nan());
            pen.matrix(params, &cov) + (dot(alpha, &b) + params.r()) * xp + T::lit(0.5) * quad * x2m
        }
    }
}

/// Partial derivatives of the two-asset integrand in (α₁, α₂, σ₁, σ₂, ρ),
/// with `xp = x·p` and `x2m = x²·M` (both 1 and −1 for the log surrogate).
pub fn foc_partials_2asset<T: Real>(
    params: &MarketParams<T>,
    pen: Penalty,
    alpha: [T; 2],
    s1: T,
    s2: T,
    rho: T,
    xp: T,
    x2m: T,
) -> [T; 5] {
    let b = params.excess();
    let c = pen.centre(params);
    let (two, half, four) = (T::lit(2.0), T::lit(0.5), T::lit(4.0));
    let l = params.lambda0();
    let s11 = s1 * s1;
    let s12 = rho * s1 * s2;
    let s22 = s2 * s2;
    let (a1, a2) = (alpha[0], alpha[1]);
    let da1 = xp * b[0] + x2m * (s11 * a1 + s12 * a2);
    let da2 = xp * b[1] + x2m * (s12 * a1 + s22 * a2);
    let g11 = two * l * (s11 - c[(0, 0)]) + half * x2m * a1 * a1;
    let g12 = four * l * (s12 - c[(0, 1)]) + x2m * a1 * a2;
    let g22 = two * l * (s22 - c[(1, 1)]) + half * x2m * a2 * a2;
    let ds1 = g11 * two * s1 + g12 * rho * s2;
    let ds2 = g22 * two * s2 + g12 * rho * s1;
    let drho = g12 * s1 * s2;
    [da1, da2, ds1, ds2, drho]
}

/// Max residual of the five stationarity conditions; at a clamped ρ = ±1 the
/// ρ-condition is replaced by its one-sided (KKT) version.
pub fn foc_residual_2asset<T: Real>(
    params: &MarketParams<T>,
    pen: Penalty,
    alpha: [T; 2],
    s1: T,
    s2: T,
    rho: T,
    xp: T,
    x2m: T,
) -> T {
    let g = foc_partials_2asset(params, pen, alpha, s1, s2, rho, xp, x2m);
    let mut res = g[0].abs().max(g[1].abs()).max(g[2].abs()).max(g[3].abs());
    let kkt = if rho >= T::one() {
        g[4].max(T::zero())
    } else if rho <= -T::one() {
        (-g[4]).max(T::zero())
    } else {
        g[4].abs()
    };
    res = res.max(kkt);
    res
}

/// Solves the Frobenius-penalized inner problem
/// `inf_Σ { q·bᵀΣ⁻¹b + λ₀‖Σ − C‖² }` for `q > 0`.
///
/// The minimizer is `Σ = C + (q/(2λ₀))·y yᵀ` where `(C + τI) y = b` and
/// `τ = q|y|²/(2λ₀)`, a scalar monotone equation solved by bisection.
/// Returns `(y, Σ)`; `y` plays the role of `Σ⁻¹b` (minimum-norm when Σ is
/// singular).
pub fn frobenius_saddle<T: Real>(b: &[T], centre: &Matrix<T>, q: T, lambda0: T) -> Result<(Vec<T>, Matrix<T>), ModelError> {
    let d = b.len();
    let bb = dot(b, b);
    if bb == T::zero() {
        return Ok((vec![T::zero(); d], centre.clone()));
    }
    let k = q / (T::lit(2.0) * lambda0);
    let centre_zero = centre.as_slice().iter().all(|&v| v == T::zero());
    let solve = |tau: T| -> Result<Vec<T>, ModelError> {
        let mut a = centre.clone();
        for i in 0..d {
            a[(i, i)] = a[(i, i)] + tau;
        }
        Ok(solve_checked(&a, b, 1e14)?)
    };
    let y = if centre_zero {
        // τ³ = k|b|² and y = b/τ
        let tau = (k * bb).cbrt();
        b.iter().map(|&v| v / tau).collect()
    } else {
        let hi0 = (k * bb).cbrt();
        let (mut lo, mut hi) = (T::zero(), hi0 * (T::one() + T::lit(1e-9)) + T::min_positive_value());
        let phi = |tau: T| -> Result<T, ModelError> {
            let y = solve(tau)?;
            Ok(tau - k * dot(&y, &y))
        };
        // the centre may be singular at τ = 0, so never evaluate there
        for _ in 0..200 {
            let mid = T::lit(0.5) * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if phi(mid)? < T::zero() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        solve(T::lit(0.5) * (lo + hi))?
    };
    let mut sigma = centre.clone();
    for i in 0..d {
        for j in 0..d {
            sigma[(i, j)] = sigma[(i, j)] + k * y[i] * y[j];
        }
    }
    Ok((y, sigma))
}

/// Evaluates `inf_Σ sup_a` of [`hamiltonian_integrand`] over the control boxes.
///
/// One asset: the inner supremum is a clamped quadratic in `a`; the outer
/// infimum is located by bisection on the envelope derivative in σ after a
/// log-spaced scan for sign changes. Two assets with a Frobenius penalty:
/// the inner problem is solved through [`frobenius_saddle`].
pub fn hamiltonian_saddle<T: Real>(
    x: T,
    p: T,
    m: T,
    params: &MarketParams<T>,
    pen: Penalty,
    bounds: &ControlBounds<T>,
) -> Result<(T, SaddleControls<T>), ModelError> {
    if !(x > T::zero()) || !p.is_finite() || !m.is_finite() {
        return Err(ModelError::Domain(format!("saddle requested at x = {x}, p = {p}, M = {m}")));
    }
    match params.dim() {
        1 => Ok(saddle_1d(x, p, m, params, pen, bounds)),
        2 => saddle_2d(x, p, m, params, pen, bounds),
        d => Err(ModelError::Unsupported(format!("pointwise saddle for {d} assets"))),
    }
}

fn saddle_1d<T: Real>(
    x: T,
    p: T,
    m: T,
    params: &MarketParams<T>,
    pen: Penalty,
    bounds: &ControlBounds<T>,
) -> (T, SaddleControls<T>) {
    let b = params.excess()[0];
    let k1 = b * x * p;
    let k2 = x * x * m;
    let half = T::lit(0.5);
    let r_max = bounds.alpha_max;
    let inner = |s: T| -> (T, bool) {
        let curv = s * s * k2;
        if curv < T::zero() {
            let a = -k1 / curv;
            let c = bounds.clamp_alpha(a);
            (c, c != a)
        } else {
            let up = r_max * k1 + half * r_max * r_max * curv;
            let dn = -r_max * k1 + half * r_max * r_max * curv;
            if k1 == T::zero() && curv == T::zero() {
                (T::zero(), false)
            } else if up >= dn {
                (r_max, true)
            } else {
                (-r_max, true)
            }
        }
    };
    let h = |s: T| -> T {
        let (a, _) = inner(s);
        pen.scalar(params, s) + (a * b + params.r()) * x * p + half * a * a * s * s * k2
    };
    let dh = |s: T| -> T {
        let (a, _) = inner(s);
        pen.scalar_deriv(params, s) + a * a * k2 * s
    };
    let (lo, hi) = (bounds.sigma_min, bounds.sigma_max);
    let n = 400;
    let ratio = (hi / lo).ln();
    let grid: Vec<T> = (0..=n)
        .map(|i| if i == n { hi } else { lo * (ratio * T::lit(i as f64 / n as f64)).exp() })
        .collect();
    let mut candidates = vec![lo, hi];
    let mut prev = dh(grid[0]);
    for w in grid.windows(2) {
        let next = dh(w[1]);
        if prev < T::zero() && next >= T::zero() {
            let (mut a, mut c) = (w[0], w[1]);
            for _ in 0..200 {
                let mid = half * (a + c);
                if mid <= a || mid >= c {
                    break;
                }
                if dh(mid) < T::zero() {
                    a = mid;
                } else {
                    c = mid;
                }
            }
            candidates.push(if dh(c).abs() < dh(a).abs() { c } else { a });
        }
        prev = next;
    }
    let s = candidates
        .into_iter()
        .min_by(|&u, &v| h(u).partial_cmp(&h(v)).unwrap_or(std::cmp::Ordering::Equal))
        .unwrap();
    let (a, a_clamped) = inner(s);
    let s_edge = s <= lo || s >= hi;
    let mut residual = T::zero();
    if !a_clamped {
        residual = residual.max((k1 + a * s * s * k2).abs());
    }
    if !s_edge {
        residual = residual.max(dh(s).abs());
    }
    let controls = SaddleControls {
        alpha: vec![a],
        sigma: SigmaHat::Vol(s),
        residual,
        degenerate: b == T::zero(),
        boundary: a_clamped || s_edge,
    };
    (h(s), controls)
}

fn saddle_2d<T: Real>(
    x: T,
    p: T,
    m: T,
    params: &MarketParams<T>,
    pen: Penalty,
    bounds: &ControlBounds<T>,
) -> Result<(T, SaddleControls<T>), ModelError> {
    if !pen.is_frobenius() {
        return Err(ModelError::Unsupported(format!("{pen:?} penalty with two assets")));
    }
    if !(m < T::zero()) {
        return Err(ModelError::Unsupported(
            "two-asset saddle outside the concave region (M >= 0)".into(),
        ));
    }
    let b = params.excess();
    let q = -p * p / (T::lit(2.0) * m);
    let (y, cov) = frobenius_saddle(&b, &pen.centre(params), q, params.lambda0())?;
    let scale = -p / (m * x);
    let raw: Vec<T> = y.iter().map(|&v| v * scale).collect();
    let alpha: Vec<T> = raw.iter().map(|&a| bounds.clamp_alpha(a)).collect();
    let a_clamped = alpha != raw;
    let mut sigma = SigmaHat::from_covariance(&cov);
    let mut s_clamped = false;
    if let SigmaHat::Pair { s1, s2, rho } = sigma {
        let (c1, c2) = (bounds.clamp_sigma(s1), bounds.clamp_sigma(s2));
        s_clamped = c1 != s1 || c2 != s2;
        sigma = SigmaHat::Pair { s1: c1, s2: c2, rho };
    }
    let SigmaHat::Pair { s1, s2, rho } = sigma else { unreachable!() };
    let residual = foc_residual_2asset(params, pen, [alpha[0], alpha[1]], s1, s2, rho, x * p, x * x * m);
    let value = hamiltonian_integrand(x, p, m, params, pen, &alpha, &sigma);
    Ok((
        value,
        SaddleControls {
            alpha,
            sigma,
            residual,
            degenerate: b.iter().all(|&v| v == T::zero()),
            boundary: a_clamped || s_clamped,
        },
    ))
}
