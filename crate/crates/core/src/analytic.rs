//! Closed-form saddle points for logarithmic utility.
//!
//! With log utility the optimal controls are constant in time and wealth, so
//! the game reduces to a static saddle of the drift integrand
//! `α(μ−r) + r − ½α²σ² + λ₀F(σ)`.

use thiserror::Error;

use crate::linalg::symmetric_eigen;
use crate::model::{
    foc_residual_2asset, frobenius_saddle, MarketParams, ModelError, Penalty, SaddleControls, SigmaHat,
};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AnalyticError {
    #[error("domain error: {0}")]
    Domain(String),
    #[error("first-order conditions not met (best residual {residual:e})")]
    NoConvergence { residual: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// The quartic `σ⁴ − σ₀σ³ − c = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuarticProblem<T> {
    pub c: T,
    pub sigma0: T,
}

impl<T: Real> QuarticProblem<T> {
    pub fn new(c: T, sigma0: T) -> Result<Self, AnalyticError> {
        if !(c >= T::zero()) || !(sigma0 >= T::zero()) || !c.is_finite() || !sigma0.is_finite() {
            return Err(AnalyticError::Domain(format!("quartic needs c >= 0 and sigma0 >= 0, got {c}, {sigma0}")));
        }
        if c == T::zero() && sigma0 == T::zero() {
            return Err(AnalyticError::Domain("c = sigma0 = 0 has no positive root".into()));
        }
        Ok(Self { c, sigma0 })
    }

    /// c = (μ − r)²/(2λ₀) for a one-asset market.
    pub fn from_params(params: &MarketParams<T>) -> Result<Self, AnalyticError> {
        let b = params.excess()[0];
        Self::new(b * b / (T::lit(2.0) * params.lambda0()), params.sigma0())
    }

    pub fn residual(&self, s: T) -> T {
        s * s * s * (s - self.sigma0) - self.c
    }
}

/// Both evaluations of the positive root.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuarticRoots<T> {
    pub closed_form: T,
    pub bisection: T,
}

/// Explicit radical root.
///
/// The textbook arrangement subtracts nearly equal cube-root terms when
/// σ₀⁴ ≪ c and divides 0 by 0 at σ₀ = 0. Here the same expression is
/// regrouped: with `Δ = 27σ₀⁴c² + 256c³`, `K³ = u = 768c³/(√(3Δ) + 9σ₀²c)`
/// and `κ = 4·12^{1/3}c`, the inner bracket equals `σ₀²(w−1)²/(4(w²+w+1))`
/// for `w = K²/κ`, and `w − 1 = σ₀²·m` with `m = −18cu/(κ(K⁴+K²κ+κ²))`.
pub fn quartic_closed_form<T: Real>(q: &QuarticProblem<T>) -> T {
    let (c, s0) = (q.c, q.sigma0);
    if c == T::zero() {
        return s0;
    }
    let l = T::lit;
    let s02 = s0 * s0;
    let delta = l(27.0) * s02 * s02 * c * c + l(256.0) * c * c * c;
    let u = l(768.0) * c * c * c / ((l(3.0) * delta).sqrt() + l(9.0) * s02 * c);
    let k = u.cbrt();
    let k2 = k * k;
    let kap = l(4.0) * l(12.0).cbrt() * c;
    let m = -l(18.0) * c * u / (kap * (k2 * k2 + k2 * kap + kap * kap));
    let w = T::one() + s02 * m;
    let s = (w * w + w + T::one()).sqrt();
    let sqrt_p = s0 * s02 * m.abs() / (l(2.0) * s);
    let p = sqrt_p * sqrt_p;
    let qq = l(0.75) * s02 - p + s / (l(2.0) * m.abs());
    s0 / l(4.0) + l(0.5) * sqrt_p + l(0.5) * qq.sqrt()
}

/// Bisection on `[σ₀, σ₀ + 1 + c^{1/4}]` down to adjacent floating point values.
pub fn quartic_bisection<T: Real>(q: &QuarticProblem<T>) -> T {
    let (mut lo, mut hi) = (q.sigma0, q.sigma0 + T::one() + q.c.sqrt().sqrt());
    if q.c == T::zero() {
        return q.sigma0;
    }
    for _ in 0..400 {
        let mid = T::lit(0.5) * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if q.residual(mid) < T::zero() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if q.residual(hi).abs() < q.residual(lo).abs() {
        hi
    } else {
        lo
    }
}

pub fn quartic_roots<T: Real>(q: &QuarticProblem<T>) -> QuarticRoots<T> {
    QuarticRoots { closed_form: quartic_closed_form(q), bisection: quartic_bisection(q) }
}

/// Unique positive root of the quartic. The radical is returned when it agrees
/// with bisection to 1e−10 relative, otherwise the bisection root.
pub fn solve_quartic_root<T: Real>(q: &QuarticProblem<T>) -> T {
    let roots = quartic_roots(q);
    let tol = T::lit(1e-10).max(T::epsilon() * T::lit(64.0));
    let agree = (roots.closed_form - roots.bisection).abs() <= tol * roots.bisection;
    debug_assert!(
        agree || !roots.closed_form.is_finite() || T::epsilon() > T::lit(1e-10),
        "radical {} vs bisection {}",
        roots.closed_form,
        roots.bisection
    );
    if agree {
        roots.closed_form
    } else {
        roots.bisection
    }
}

fn require_one_asset<T: Real>(params: &MarketParams<T>) -> Result<(), AnalyticError> {
    if params.dim() != 1 {
        return Err(AnalyticError::Domain(format!("one-asset saddle requested for {} assets", params.dim())));
    }
    Ok(())
}

/// Partial derivatives (∂α, ∂σ) of the one-asset log integrand.
pub fn log_partials_1asset<T: Real>(params: &MarketParams<T>, pen: Penalty, alpha: T, sigma: T) -> (T, T) {
    let b = params.excess()[0];
    let da = b - alpha * sigma * sigma;
    let ds = -alpha * alpha * sigma + pen.scalar_deriv(params, sigma);
    (da, ds)
}

/// Log-utility saddle under λ₀(σ − σ₀)².
pub fn log_saddle_sqdev<T: Real>(params: &MarketParams<T>) -> Result<SaddleControls<T>, AnalyticError> {
    require_one_asset(params)?;
    let b = params.excess()[0];
    let q = QuarticProblem::from_params(params)?;
    let s = solve_quartic_root(&q);
    let a = if b == T::zero() { T::zero() } else { b / (s * s) };
    let (da, ds) = log_partials_1asset(params, Penalty::SqDevVol, a, s);
    let residual = da.abs().max(ds.abs());
    Ok(SaddleControls {
        alpha: vec![a],
        sigma: SigmaHat::Vol(s),
        residual,
        degenerate: b == T::zero(),
        boundary: false,
    })
}

/// Log-utility saddle under λ₀σ⁴: σ̂² = ((μ−r)²/(4λ₀))^{1/3}, α̂ = (μ−r)/σ̂².
pub fn log_saddle_quadvar<T: Real>(params: &MarketParams<T>) -> Result<SaddleControls<T>, AnalyticError> {
    require_one_asset(params)?;
    let b = params.excess()[0];
    if b == T::zero() {
        return Ok(SaddleControls {
            alpha: vec![T::zero()],
            sigma: SigmaHat::Vol(T::zero()),
            residual: T::zero(),
            degenerate: true,
            boundary: false,
        });
    }
    let var = (b * b / (T::lit(4.0) * params.lambda0())).cbrt();
    let s = var.sqrt();
    let a = b / var;
    let (da, ds) = log_partials_1asset(params, Penalty::QuadVar, a, s);
    Ok(SaddleControls {
        alpha: vec![a],
        sigma: SigmaHat::Vol(s),
        residual: da.abs().max(ds.abs()),
        degenerate: false,
        boundary: false,
    })
}

/// The constant C = 3·2^{−4/3}λ₀^{1/3}|μ−r|^{4/3}; `r + C` is the optimal log
/// drift under λ₀σ⁴.
pub fn quadvar_drift_premium<T: Real>(excess: T, lambda0: T) -> T {
    T::lit(3.0) * T::lit(2.0).powf(T::lit(-4.0 / 3.0)) * lambda0.cbrt() * excess.abs().powf(T::lit(4.0 / 3.0))
}

/// Drift of ln X plus the running penalty at constant controls.
pub fn log_drift<T: Real>(params: &MarketParams<T>, pen: Penalty, controls: &SaddleControls<T>) -> Result<T, AnalyticError> {
    let b = params.excess();
    if controls.alpha.len() != b.len() {
        return Err(AnalyticError::Domain(format!(
            "{} allocations for {} assets",
            controls.alpha.len(),
            b.len()
        )));
    }
    let half = T::lit(0.5);
    let ab: T = controls.alpha.iter().zip(&b).map(|(&a, &e)| a * e).sum();
    let drift = match controls.sigma {
        SigmaHat::Vol(s) => {
            let a = controls.alpha[0];
            ab + params.r() - half * a * a * s * s + pen.scalar(params, s)
        }
        SigmaHat::Pair { .. } => {
            let cov = controls.sigma.covariance();
            let quad = cov.quad_form(&controls.alpha).map_err(ModelError::from)?;
            ab + params.r() - half * quad + pen.matrix(params, &cov)
        }
    };
    Ok(drift)
}

/// ln x + (T − t)·(drift of the constant-control game).
pub fn log_value<T: Real>(
    t: T,
    x: T,
    params: &MarketParams<T>,
    pen: Penalty,
    controls: &SaddleControls<T>,
) -> Result<T, AnalyticError> {
    if !(x > T::zero()) {
        return Err(AnalyticError::Domain(format!("wealth {x} must be positive")));
    }
    if !(t >= T::zero() && t <= params.horizon()) {
        return Err(AnalyticError::Domain(format!("time {t} outside [0, {}]", params.horizon())));
    }
    Ok(x.ln() + (params.horizon() - t) * log_drift(params, pen, controls)?)
}

/// Two-asset log-utility saddle under a Frobenius penalty.
///
/// Stationarity in Σ gives `Σ̂ = C + α̂α̂ᵀ/(4λ₀)` (C = Σ₀ or 0) and in α gives
/// `Σ̂α̂ = μ − r1`; together `(C + τI)α̂ = μ − r1` with `τ = |α̂|²/(4λ₀)`,
/// solved as a monotone scalar equation. Under λ₀‖Σ‖² the worst case is
/// rank one with ρ̂ = ±1 and α̂ is the minimum-norm maximizer.
pub fn solve_foc_2asset<T: Real>(params: &MarketParams<T>, pen: Penalty) -> Result<SaddleControls<T>, AnalyticError> {
    if params.dim() != 2 {
        return Err(AnalyticError::Domain(format!("two-asset saddle requested for {} assets", params.dim())));
    }
    if !pen.is_frobenius() {
        return Err(AnalyticError::Domain(format!("{pen:?} is not a covariance penalty")));
    }
    let b = params.excess();
    let (alpha, cov) = frobenius_saddle(&b, &pen.centre(params), T::lit(0.5), params.lambda0())?;
    let sigma = SigmaHat::from_covariance(&cov);
    let SigmaHat::Pair { s1, s2, rho } = sigma else { unreachable!() };
    let residual = foc_residual_2asset(params, pen, [alpha[0], alpha[1]], s1, s2, rho, T::one(), -T::one());
    let scale = T::one().max(b.iter().fold(T::zero(), |m, &v| m.max(v.abs())));
    if !(residual <= T::lit(1e-9) * scale) && T::epsilon() < T::lit(1e-10) {
        return Err(AnalyticError::NoConvergence { residual: residual.f64() });
    }
    Ok(SaddleControls {
        alpha,
        sigma,
        residual,
        degenerate: b.iter().all(|&v| v == T::zero()),
        boundary: rho.abs() >= T::one(),
    })
}

/// Second-order check at a two-asset saddle: the integrand is concave in α
/// (Hessian −Σ̂) and convex in the covariance entries (central differences
/// along each entry direction).
pub fn saddle_second_order_ok<T: Real>(params: &MarketParams<T>, pen: Penalty, controls: &SaddleControls<T>) -> bool {
    let cov = controls.sigma.covariance();
    let Ok((ev, _)) = symmetric_eigen(&cov) else { return false };
    let tol = T::lit(1e-12);
    let alpha_concave = ev.iter().all(|&e| -e <= tol);
    let f = |m: &crate::linalg::Matrix<T>| -> T {
        let quad = m.quad_form(&controls.alpha).unwrap_or(T::nan());
        -T::lit(0.5) * quad + pen.matrix(params, m)
    };
    let h = T::lit(1e-4);
    let d = cov.rows();
    let mut sigma_convex = true;
    for i in 0..d {
        for j in i..d {
            let mut up = cov.clone();
            let mut dn = cov.clone();
            up[(i, j)] = up[(i, j)] + h;
            dn[(i, j)] = dn[(i, j)] - h;
            if i != j {
                up[(j, i)] = up[(j, i)] + h;
                dn[(j, i)] = dn[(j, i)] - h;
            }
            let second = (f(&up) - T::lit(2.0) * f(&cov) + f(&dn)) / (h * h);
            sigma_convex &= second >= -T::lit(1e-6) * params.lambda0();
        }
    }
    alpha_concave && sigma_convex
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn quartic_trivial_roots() {
        let q = QuarticProblem::new(0.0, 0.2).unwrap();
        assert_eq!(solve_quartic_root(&q), 0.2);
        let q = QuarticProblem::new(16.0, 0.0).unwrap();
        assert_relative_eq!(quartic_closed_form(&q), 2.0, epsilon = 1e-15);
        assert_relative_eq!(solve_quartic_root(&q), 2.0, epsilon = 1e-15);
        assert!(QuarticProblem::new(0.0f64, 0.0).is_err());
    }

    #[test]
    fn quartic_small_c() {
        let q = QuarticProblem::new(2e-5f64, 0.2).unwrap();
        let r = quartic_roots(&q);
        assert!(r.bisection > 0.2 && r.bisection < 0.21);
        assert!(q.residual(r.bisection).abs() <= 1e-12);
        assert!((r.closed_form - r.bisection).abs() <= 1e-10);
    }

    #[test]
    fn quadvar_reference_saddle() {
        let p = MarketParams::<f64>::reference_one_asset();
        let s = log_saddle_quadvar(&p).unwrap();
        let sig = s.sigma.vol().unwrap();
        assert_relative_eq!(sig * sig, 0.0215443, epsilon = 1e-7);
        assert_relative_eq!(s.alpha[0], 0.928318, epsilon = 1e-6);
        assert!(s.residual <= 1e-12);
        let v = log_value(0.0, 5.0, &p, Penalty::QuadVar, &s).unwrap();
        let expect = 5f64.ln() + 0.015 + quadvar_drift_premium(0.02, 10.0);
        assert_relative_eq!(v, expect, epsilon = 1e-14);
        assert_relative_eq!(v, 1.6384, epsilon = 1e-4);
    }

    #[test]
    fn quadvar_degenerate() {
        let p = MarketParams::one_asset(0.015, 0.015, 0.2, 10.0, 1.0).unwrap();
        let s = log_saddle_quadvar(&p).unwrap();
        assert!(s.degenerate);
        assert_eq!(s.alpha[0], 0.0);
    }

    #[test]
    fn sqdev_reference_saddle() {
        let p = MarketParams::<f64>::reference_one_asset();
        let s = log_saddle_sqdev(&p).unwrap();
        assert_relative_eq!(s.sigma.vol().unwrap(), 0.2024117, epsilon = 1e-7);
        assert_relative_eq!(s.alpha[0], 0.488156, epsilon = 1e-6);
        assert!(s.residual <= 1e-10);
        let v = log_value(0.0, 5.0, &p, Penalty::SqDevVol, &s).unwrap();
        assert_relative_eq!(v, 1.6293776, epsilon = 1e-7);
    }

    #[test]
    fn two_asset_residuals() {
        let p = MarketParams::multi_asset(
            vec![0.035, 0.045],
            0.015,
            crate::linalg::Matrix::from_rows(&[vec![0.04, 0.01], vec![0.01, 0.09]]).unwrap(),
            10.0,
            1.0,
        )
        .unwrap();
        for pen in [Penalty::FrobDev, Penalty::FrobSq] {
            let s = solve_foc_2asset(&p, pen).unwrap();
            assert!(s.residual <= 1e-12, "{pen:?} residual {}", s.residual);
            assert!(saddle_second_order_ok(&p, pen, &s));
        }
    }
}
