//! Implicit finite differences for the HJBI equation in wealth.
//!
//! The Hamiltonian is concave in `v_xx`, so it is written as a supremum of
//! functions linear in `v_xx` (a Legendre transform). For a fixed slope `â`
//! each time step is a tridiagonal linear solve; the slope is then refreshed
//! from the solved row until it stops moving.

use std::io::Write;

use thiserror::Error;

use crate::analytic::{log_drift, log_saddle_quadvar, quadvar_drift_premium, solve_foc_2asset, AnalyticError};
use crate::linalg::{dot, solve_tridiagonal, LinalgError};
use crate::model::{frobenius_saddle, MarketParams, ModelError, Penalty, Utility};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FdmError {
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("fixed point did not converge at step {step}; increment history {history:?}")]
    NoConvergence { step: usize, history: Vec<f64> },
    #[error("zero pivot at node {node} of step {step}")]
    ZeroPivot { step: usize, node: usize },
    #[error("non-finite value at step {step}")]
    NotFinite { step: usize },
    #[error("no node with negative curvature at step {step}; linearization undefined")]
    NoConcaveNode { step: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Analytic(#[from] AnalyticError),
    #[error("I/O: {0}")]
    Io(String),
}

/// Uniform grid in wealth and time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid1D<T> {
    pub x_min: T,
    pub dx: T,
    /// number of wealth nodes, boundaries included
    pub nodes: usize,
    /// number of time steps
    pub steps: usize,
    pub horizon: T,
}

impl<T: Real> Grid1D<T> {
    pub fn new(x_min: T, x_max: T, nodes: usize, steps: usize, horizon: T) -> Result<Self, FdmError> {
        if nodes < 3 {
            return Err(FdmError::Grid(format!("need at least 3 nodes, got {nodes}")));
        }
        if steps < 1 {
            return Err(FdmError::Grid("need at least one time step".into()));
        }
        if !(x_min >= T::zero()) || !(x_max > x_min) || !x_max.is_finite() {
            return Err(FdmError::Grid(format!("wealth range [{x_min}, {x_max}] is invalid")));
        }
        if !(horizon > T::zero()) {
            return Err(FdmError::Grid(format!("horizon {horizon} must be positive")));
        }
        let dx = (x_max - x_min) / T::lit((nodes - 1) as f64);
        Ok(Self { x_min, dx, nodes, steps, horizon })
    }

    /// Log-utility default: 401 nodes on [x/5, 5x], 100 steps.
    pub fn log_default(x_center: T, horizon: T) -> Result<Self, FdmError> {
        Self::new(x_center / T::lit(5.0), x_center * T::lit(5.0), 401, 100, horizon)
    }

    /// Power-utility default: 501 nodes on [0, 10x], 100 steps.
    pub fn power_default(x_center: T, horizon: T) -> Result<Self, FdmError> {
        Self::new(T::zero(), x_center * T::lit(10.0), 501, 100, horizon)
    }

    #[inline]
    pub fn x(&self, i: usize) -> T {
        self.x_min + T::lit(i as f64) * self.dx
    }

    pub fn x_max(&self) -> T {
        self.x(self.nodes - 1)
    }

    pub fn dt(&self) -> T {
        self.horizon / T::lit(self.steps as f64)
    }

    pub fn t(&self, n: usize) -> T {
        T::lit(n as f64) * self.dt()
    }
}

/// `C = 3·2^{−4/3}λ₀^{1/3}(μ−r)^{4/3}` and `C₂ = (5/3)(2/3)^{−2/5}C^{3/5}`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LegendreConstants<T> {
    pub c: T,
    pub c2: T,
}

impl<T: Real> LegendreConstants<T> {
    pub fn new(excess: T, lambda0: T) -> Self {
        let c = quadvar_drift_premium(excess, lambda0);
        let c2 = T::lit(5.0 / 3.0) * T::lit(2.0 / 3.0).powf(T::lit(-0.4)) * c.powf(T::lit(0.6));
        Self { c, c2 }
    }

    pub fn from_params(params: &MarketParams<T>) -> Self {
        Self::new(params.excess()[0], params.lambda0())
    }

    /// `C₂ a^{2/5} v_x^{4/5}`, the part of `sup_a{a v_xx − H*(a)}` not linear in `v_xx`.
    #[inline]
    pub fn conjugate(&self, a: T, vx: T) -> T {
        self.c2 * a.powf(T::lit(0.4)) * vx.powf(T::lit(0.8))
    }
}

/// Maximizer `â = (2/3)·C·v_x^{4/3}·(−v_xx)^{−5/3}`; `None` when `v_xx ≥ 0`.
#[inline]
pub fn legendre_a_star<T: Real>(vx: T, vxx: T, consts: &LegendreConstants<T>) -> Option<T> {
    if !(vxx < T::zero()) {
        return None;
    }
    Some(T::lit(2.0 / 3.0) * consts.c * vx.powf(T::lit(4.0 / 3.0)) * (-vxx).powf(T::lit(-5.0 / 3.0)))
}

/// Boundary row of the tridiagonal system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Boundary<T> {
    /// prescribed value
    Dirichlet(T),
    /// zero one-sided difference with the adjacent node
    Neumann,
}

/// Iteration controls for the per-step fixed point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdmConfig<T> {
    /// stop when ‖â_j − â_{j−1}‖₂ ≤ tol·max(1, ‖â_j‖₂), or when the values
    /// move by no more than 128 ulp
    pub tol: T,
    pub max_iter: usize,
    pub vx_floor: T,
}

impl<T: Real> Default for FdmConfig<T> {
    fn default() -> Self {
        Self { tol: T::lit(1e-8), max_iter: 50, vx_floor: T::lit(1e-14) }
    }
}

/// Value surface and linearization slopes.
#[derive(Debug, Clone, PartialEq)]
pub struct PdeSolution<T> {
    pub grid: Grid1D<T>,
    /// `values[n][i]` at time `t_n`, node `x_i`; `n = 0..=N`
    pub values: Vec<Vec<T>>,
    /// `a_hat[n][i]` used for step `n < N`; row `N` holds the slopes implied
    /// by the terminal utility (the first guess for the last step)
    pub a_hat: Vec<Vec<T>>,
    pub iterations: Vec<usize>,
    /// nodes whose discrete curvature was nonnegative and reused another slope
    pub flagged_nodes: usize,
    /// first differences raised to the floor
    pub floored_vx: usize,
}

impl<T: Real> PdeSolution<T> {
    pub fn initial_row(&self) -> &[T] {
        &self.values[0]
    }

    /// Linear interpolation of `v(t_n, x)`.
    pub fn value_at(&self, n: usize, x: T) -> T {
        let g = &self.grid;
        let pos = ((x - g.x_min) / g.dx).max(T::zero());
        let i = pos.floor().to_usize().unwrap_or(0).min(g.nodes - 2);
        let w = pos - T::lit(i as f64);
        let row = &self.values[n];
        row[i] + w * (row[i + 1] - row[i])
    }

    pub fn max_iterations(&self) -> usize {
        self.iterations.iter().copied().max().unwrap_or(0)
    }

    /// Writes `t,x,value,a_hat`, one line per node.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "t,x,value,a_hat")?;
        for (n, (row, slopes)) in self.values.iter().zip(&self.a_hat).enumerate() {
            let t = self.grid.t(n);
            for (i, (v, a)) in row.iter().zip(slopes).enumerate() {
                writeln!(w, "{},{},{},{}", t, self.grid.x(i), v, a)?;
            }
        }
        Ok(())
    }
}

/// One implicit step for fixed slopes: solves
/// `sub·v_{i−1} + diag·v_i + sup·v_{i+1} = −v̄ⁿ⁺¹_i − source_i·Δt`
/// with `sub = âΔt/Δx² − r x_i Δt/(2Δx)`, `diag = −1 − 2âΔt/Δx²`,
/// `sup = âΔt/Δx² + r x_i Δt/(2Δx)` on interior nodes.
pub fn solve_linear_step<T: Real>(
    v_next: &[T],
    a_hat: &[T],
    source: &[T],
    grid: &Grid1D<T>,
    r: T,
    left: Boundary<T>,
    right: Boundary<T>,
) -> Result<Vec<T>, LinalgError> {
    let m = grid.nodes;
    let dt = grid.dt();
    let dx = grid.dx;
    let (mut sub, mut diag, mut sup, mut rhs) = (vec![T::zero(); m], vec![T::zero(); m], vec![T::zero(); m], vec![T::zero(); m]);
    for i in 1..m - 1 {
        let diff = a_hat[i] * dt / (dx * dx);
        let conv = r * grid.x(i) * dt / (T::lit(2.0) * dx);
        sub[i] = diff - conv;
        diag[i] = -T::one() - T::lit(2.0) * diff;
        sup[i] = diff + conv;
        rhs[i] = -v_next[i] - source[i] * dt;
    }
    match left {
        Boundary::Dirichlet(v) => {
            diag[0] = T::one();
            rhs[0] = v;
        }
        Boundary::Neumann => {
            diag[0] = -T::one();
            sup[0] = T::one();
        }
    }
    match right {
        Boundary::Dirichlet(v) => {
            diag[m - 1] = T::one();
            rhs[m - 1] = v;
        }
        Boundary::Neumann => {
            diag[m - 1] = T::one();
            sub[m - 1] = -T::one();
        }
    }
    if rhs.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NotFinite);
    }
    solve_tridiagonal(&sub, &diag, &sup, &rhs)
}

/// The displayed scheme for one step with the Legendre source term
/// `C₂ â^{2/5} ((v̄ᵢ₊₁ⁿ⁺¹ − v̄ᵢ₋₁ⁿ⁺¹)/(2Δx))^{4/5}`.
pub fn assemble_and_solve_step<T: Real>(
    v_next: &[T],
    a_hat: &[T],
    grid: &Grid1D<T>,
    r: T,
    consts: &LegendreConstants<T>,
    left: Boundary<T>,
    right: Boundary<T>,
) -> Result<Vec<T>, LinalgError> {
    let source = legendre_source(v_next, a_hat, grid, consts, T::lit(1e-14), &mut 0);
    solve_linear_step(v_next, a_hat, &source, grid, r, left, right)
}

fn legendre_source<T: Real>(
    v_next: &[T],
    a_hat: &[T],
    grid: &Grid1D<T>,
    consts: &LegendreConstants<T>,
    floor: T,
    floored: &mut usize,
) -> Vec<T> {
    let m = grid.nodes;
    let mut s = vec![T::zero(); m];
    for i in 1..m - 1 {
        let mut vx = (v_next[i + 1] - v_next[i - 1]) / (T::lit(2.0) * grid.dx);
        if vx < floor {
            vx = floor;
            *floored += 1;
        }
        s[i] = consts.conjugate(a_hat[i], vx);
    }
    s
}

#[derive(Default)]
struct Counters {
    flagged: usize,
    floored: usize,
}

/// Per-node slopes and explicit source terms derived from an iterate.
trait Linearization<T: Real> {
    /// Returns `(a_hat, source)`. `None` entries of the slope mark nodes
    /// where the linearization is undefined.
    fn evaluate(&self, v_iter: &[T], v_next: &[T], grid: &Grid1D<T>, floor: T, counters: &mut Counters) -> (Vec<Option<T>>, Vec<T>);

    /// Recomputes the source for already repaired slopes.
    fn source(&self, a_hat: &[T], v_iter: &[T], v_next: &[T], grid: &Grid1D<T>, floor: T, counters: &mut Counters) -> Vec<T>;
}

fn differences<T: Real>(v: &[T], i: usize, dx: T, floor: T, counters: &mut Counters) -> (T, T) {
    let mut vx = (v[i + 1] - v[i - 1]) / (T::lit(2.0) * dx);
    if vx < floor {
        vx = floor;
        counters.floored += 1;
    }
    let vxx = (v[i + 1] - T::lit(2.0) * v[i] + v[i - 1]) / (dx * dx);
    (vx, vxx)
}

struct LegendreLin<T> {
    consts: LegendreConstants<T>,
}

impl<T: Real> Linearization<T> for LegendreLin<T> {
    fn evaluate(&self, v_iter: &[T], v_next: &[T], grid: &Grid1D<T>, floor: T, counters: &mut Counters) -> (Vec<Option<T>>, Vec<T>) {
        let m = grid.nodes;
        let mut a = vec![Some(T::zero()); m];
        for i in 1..m - 1 {
            let (vx, vxx) = differences(v_iter, i, grid.dx, floor, counters);
            a[i] = legendre_a_star(vx, vxx, &self.consts);
        }
        let filled: Vec<T> = a.iter().map(|v| v.unwrap_or(T::zero())).collect();
        let s = self.source(&filled, v_iter, v_next, grid, floor, counters);
        (a, s)
    }

    fn source(&self, a_hat: &[T], _v_iter: &[T], v_next: &[T], grid: &Grid1D<T>, floor: T, counters: &mut Counters) -> Vec<T> {
        legendre_source(v_next, a_hat, grid, &self.consts, floor, &mut counters.floored)
    }
}

/// Two assets under a Frobenius penalty: nodewise saddle from
/// `q = v_x²/(−2v_xx)`, diffusion `½αᵀΣα x²` and explicit source
/// `x αᵀ(μ−r1) v̄_xⁿ⁺¹ + λ₀F(Σ)`.
struct FrobeniusLin<'a, T: Real> {
    params: &'a MarketParams<T>,
    pen: Penalty,
}

impl<'a, T: Real> FrobeniusLin<'a, T> {
    fn node(&self, vx: T, vxx: T, x: T) -> Option<(T, T, T)> {
        if !(vxx < T::zero()) {
            return None;
        }
        let b = self.params.excess();
        let q = vx * vx / (-T::lit(2.0) * vxx);
        let (y, cov) = frobenius_saddle(&b, &self.pen.centre(self.params), q, self.params.lambda0()).ok()?;
        let scale = -vx / (vxx * x);
        let alpha: Vec<T> = y.iter().map(|&v| v * scale).collect();
        let quad = cov.quad_form(&alpha).ok()?;
        let a = T::lit(0.5) * quad * x * x;
        Some((a, x * dot(&alpha, &b), self.pen.matrix(self.params, &cov)))
    }
}

impl<'a, T: Real> Linearization<T> for FrobeniusLin<'a, T> {
    fn evaluate(&self, v_iter: &[T], v_next: &[T], grid: &Grid1D<T>, floor: T, counters: &mut Counters) -> (Vec<Option<T>>, Vec<T>) {
        let m = grid.nodes;
        let mut a = vec![Some(T::zero()); m];
        let mut s = vec![T::zero(); m];
        for i in 1..m - 1 {
            let (vx, vxx) = differences(v_iter, i, grid.dx, floor, counters);
            let (vxn, _) = differences(v_next, i, grid.dx, floor, counters);
            match self.node(vx, vxx, grid.x(i)) {
                Some((ai, drift, pen)) => {
                    a[i] = Some(ai);
                    s[i] = drift * vxn + pen;
                }
                None => a[i] = None,
            }
        }
        (a, s)
    }

    fn source(&self, a_hat: &[T], v_iter: &[T], v_next: &[T], grid: &Grid1D<T>, floor: T, counters: &mut Counters) -> Vec<T> {
        // flagged nodes: keep the diffusion and use the neighbouring controls' source
        let (a, mut s) = self.evaluate(v_iter, v_next, grid, floor, counters);
        let m = grid.nodes;
        for i in 1..m - 1 {
            if a[i].is_none() {
                let j = nearest_defined(&a, i).unwrap_or(i);
                s[i] = s[j];
            }
        }
        let _ = a_hat;
        s
    }
}

fn nearest_defined<T: Real>(a: &[Option<T>], i: usize) -> Option<usize> {
    let m = a.len();
    for k in 1..m {
        if i >= k && i - k >= 1 && a[i - k].is_some() {
            return Some(i - k);
        }
        if i + k < m - 1 && a[i + k].is_some() {
            return Some(i + k);
        }
    }
    None
}

/// Fills undefined slopes: from `prev` when given, else from the nearest
/// interior node with a defined slope (left neighbour preferred).
fn repair<T: Real>(a: &[Option<T>], prev: Option<&[T]>, step: usize, counters: &mut Counters) -> Result<Vec<T>, FdmError> {
    let m = a.len();
    let mut out = vec![T::zero(); m];
    for i in 1..m - 1 {
        out[i] = match a[i] {
            Some(v) => v,
            None => {
                counters.flagged += 1;
                match prev {
                    Some(p) => p[i],
                    None => {
                        let j = nearest_defined(a, i).ok_or(FdmError::NoConcaveNode { step })?;
                        a[j].unwrap()
                    }
                }
            }
        };
    }
    Ok(out)
}

fn max_abs_diff<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |m, (&x, &y)| m.max((x - y).abs()))
}

fn max_abs<T: Real>(a: &[T]) -> T {
    a.iter().fold(T::zero(), |m, &x| m.max(x.abs()))
}

fn norm2_diff<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum::<T>().sqrt()
}

fn march<T: Real, L: Linearization<T>>(
    grid: &Grid1D<T>,
    r: T,
    terminal: Vec<T>,
    boundaries: impl Fn(usize) -> (Boundary<T>, Boundary<T>),
    lin: &L,
    cfg: &FdmConfig<T>,
) -> Result<PdeSolution<T>, FdmError> {
    let n_steps = grid.steps;
    let mut values = vec![Vec::new(); n_steps + 1];
    let mut a_rows = vec![Vec::new(); n_steps + 1];
    let mut iterations = vec![0; n_steps];
    let mut counters = Counters::default();
    values[n_steps] = terminal;
    {
        let v = &values[n_steps];
        let (a, _) = lin.evaluate(v, v, grid, cfg.vx_floor, &mut Counters::default());
        a_rows[n_steps] = repair(&a, None, n_steps, &mut Counters::default()).unwrap_or_else(|_| vec![T::zero(); grid.nodes]);
    }
    for n in (0..n_steps).rev() {
        let v_next = values[n + 1].clone();
        let (left, right) = boundaries(n);
        let (a0, _) = lin.evaluate(&v_next, &v_next, grid, cfg.vx_floor, &mut counters);
        let mut a_hat = repair(&a0, None, n, &mut counters)?;
        let mut history = Vec::new();
        let mut converged = false;
        let mut v_cur = Vec::new();
        let mut v_prev = Vec::new();
        for it in 1..=cfg.max_iter {
            let source = lin.source(&a_hat, if it == 1 { &v_next } else { &v_cur }, &v_next, grid, cfg.vx_floor, &mut counters);
            v_cur = solve_linear_step(&v_next, &a_hat, &source, grid, r, left, right).map_err(|e| match e {
                LinalgError::ZeroPivot { row } => FdmError::ZeroPivot { step: n, node: row },
                _ => FdmError::NotFinite { step: n },
            })?;
            iterations[n] = it;
            let (a_new, _) = lin.evaluate(&v_cur, &v_next, grid, cfg.vx_floor, &mut counters);
            let a_new = repair(&a_new, Some(&a_hat), n, &mut counters)?;
            let delta = norm2_diff(&a_new, &a_hat);
            let scale = a_new.iter().map(|&v| v * v).sum::<T>().sqrt().max(T::one());
            history.push(delta.f64());
            // where v is nearly flat the curvature, and so â, is roundoff;
            // an iterate that no longer moves the values has converged
            let settled = it > 1 && max_abs_diff(&v_cur, &v_prev) <= T::lit(128.0) * T::epsilon() * max_abs(&v_cur).max(T::one());
            if delta <= cfg.tol * scale || settled {
                converged = true;
                break;
            }
            a_hat = a_new;
            v_prev = v_cur.clone();
        }
        if !converged {
            return Err(FdmError::NoConvergence { step: n, history });
        }
        values[n] = v_cur;
        a_rows[n] = a_hat;
    }
    Ok(PdeSolution {
        grid: *grid,
        values,
        a_hat: a_rows,
        iterations,
        flagged_nodes: counters.flagged,
        floored_vx: counters.floored,
    })
}

/// Log utility, one asset, λ₀σ⁴ penalty. Both boundary columns follow the
/// explicit solution `ln x + (T − t)·(α̂(μ−r) + r − ½α̂²σ̂² + λ₀σ̂⁴)`.
pub fn solve_log_1asset<T: Real>(grid: &Grid1D<T>, params: &MarketParams<T>, cfg: &FdmConfig<T>) -> Result<PdeSolution<T>, FdmError> {
    if !(grid.x_min > T::zero()) {
        return Err(FdmError::Grid("log utility needs x_min > 0".into()));
    }
    if params.dim() != 1 {
        return Err(FdmError::Grid(format!("one-asset solver given {} assets", params.dim())));
    }
    check_horizon(grid, params)?;
    let saddle = log_saddle_quadvar(params)?;
    let drift = log_drift(params, Penalty::QuadVar, &saddle)?;
    let terminal: Vec<T> = (0..grid.nodes).map(|i| grid.x(i).ln()).collect();
    let (x0, x1) = (grid.x(0), grid.x_max());
    let bc = |n: usize| {
        let tau = grid.horizon - grid.t(n);
        (Boundary::Dirichlet(x0.ln() + tau * drift), Boundary::Dirichlet(x1.ln() + tau * drift))
    };
    let lin = LegendreLin { consts: LegendreConstants::from_params(params) };
    march(grid, params.r(), terminal, bc, &lin, cfg)
}

/// Power utility, one asset, λ₀σ⁴ penalty; `v(t, x_min) = U(x_min)` on the
/// left (0 at the origin) and a zero one-sided derivative on the right.
pub fn solve_power_1asset<T: Real>(
    grid: &Grid1D<T>,
    params: &MarketParams<T>,
    utility: &Utility<T>,
    cfg: &FdmConfig<T>,
) -> Result<PdeSolution<T>, FdmError> {
    if !matches!(utility, Utility::Power { .. }) {
        return Err(FdmError::Grid("power solver needs a power utility".into()));
    }
    if params.dim() != 1 {
        return Err(FdmError::Grid(format!("one-asset solver given {} assets", params.dim())));
    }
    check_horizon(grid, params)?;
    let terminal: Vec<T> = (0..grid.nodes)
        .map(|i| {
            let x = grid.x(i);
            if x > T::zero() {
                utility.value(x)
            } else {
                T::zero()
            }
        })
        .collect();
    let left = terminal[0];
    let bc = |_n: usize| (Boundary::Dirichlet(left), Boundary::Neumann);
    let lin = LegendreLin { consts: LegendreConstants::from_params(params) };
    march(grid, params.r(), terminal, bc, &lin, cfg)
}

/// Log utility, two assets, Frobenius penalty. Wealth stays one-dimensional;
/// each node solves the inner saddle from its current derivatives.
pub fn solve_log_2asset<T: Real>(
    grid: &Grid1D<T>,
    params: &MarketParams<T>,
    pen: Penalty,
    cfg: &FdmConfig<T>,
) -> Result<PdeSolution<T>, FdmError> {
    if !(grid.x_min > T::zero()) {
        return Err(FdmError::Grid("log utility needs x_min > 0".into()));
    }
    if params.dim() != 2 {
        return Err(FdmError::Grid(format!("two-asset solver given {} assets", params.dim())));
    }
    check_horizon(grid, params)?;
    let saddle = solve_foc_2asset(params, pen)?;
    let drift = log_drift(params, pen, &saddle)?;
    let terminal: Vec<T> = (0..grid.nodes).map(|i| grid.x(i).ln()).collect();
    let (x0, x1) = (grid.x(0), grid.x_max());
    let bc = |n: usize| {
        let tau = grid.horizon - grid.t(n);
        (Boundary::Dirichlet(x0.ln() + tau * drift), Boundary::Dirichlet(x1.ln() + tau * drift))
    };
    let lin = FrobeniusLin { params, pen };
    march(grid, params.r(), terminal, bc, &lin, cfg)
}

fn check_horizon<T: Real>(grid: &Grid1D<T>, params: &MarketParams<T>) -> Result<(), FdmError> {
    let tol = T::lit(1e-12) * params.horizon();
    if (grid.horizon - params.horizon()).abs() > tol {
        return Err(FdmError::Grid(format!(
            "grid horizon {} differs from market horizon {}",
            grid.horizon,
            params.horizon()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn legendre_log_slope() {
        let k = LegendreConstants::new(0.02, 10.0);
        let x = 3.0f64;
        let a = legendre_a_star(1.0 / x, -1.0 / (x * x), &k).unwrap();
        assert_relative_eq!(a, 2.0 / 3.0 * k.c * x * x, epsilon = 1e-14);
        assert_relative_eq!(a * (-1.0 / (x * x)), -2.0 / 3.0 * k.c, epsilon = 1e-15);
        assert!(legendre_a_star(1.0, 0.0, &k).is_none());
    }

    #[test]
    fn zero_rate_coefficients_sum() {
        let g = Grid1D::new(1.0f64, 5.0, 9, 4, 1.0).unwrap();
        let dt = g.dt();
        for a in [0.0, 0.3, 2.0] {
            let diff = a * dt / (g.dx * g.dx);
            let (sub, diag, sup) = (diff, -1.0 - 2.0 * diff, diff);
            assert_relative_eq!(sub + diag + sup, -1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn identity_step() {
        let g = Grid1D::new(1.0f64, 5.0, 9, 4, 1.0).unwrap();
        let v: Vec<f64> = (0..9).map(|i| (i as f64).sin()).collect();
        let k = LegendreConstants::new(0.0, 10.0);
        let out = assemble_and_solve_step(
            &v,
            &[0.0; 9],
            &g,
            0.0,
            &k,
            Boundary::Dirichlet(v[0]),
            Boundary::Dirichlet(v[8]),
        )
        .unwrap();
        for (a, b) in out.iter().zip(&v) {
            assert_relative_eq!(a, b, epsilon = 1e-15);
        }
    }

    #[test]
    fn grid_validation() {
        assert!(Grid1D::new(1.0f64, 5.0, 2, 4, 1.0).is_err());
        assert!(Grid1D::new(1.0f64, 5.0, 5, 0, 1.0).is_err());
        assert!(Grid1D::new(5.0f64, 1.0, 5, 1, 1.0).is_err());
    }
}
