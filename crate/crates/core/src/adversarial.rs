//! Alternating training of allocation and volatility networks.
//!
//! One small MLP per time step for each player. The α-network at step n
//! sees `[(Xₙ − x₀)/x₀, σₙ]`, the σ-network sees `[(Xₙ − x₀)/x₀, αₙ]`.
//! Phase 1 maximizes `mean[U(X_N) + λ₀ΣF(σₙ)Δt]` over the α-networks with
//! the σ paths frozen; phase 2 minimizes the same quantity over the
//! σ-networks with the α paths frozen. Gradients are computed by hand
//! (backpropagation through the wealth recursion).

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::model::{MarketParams, ModelError, Penalty, Utility};
use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AdversarialError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("non-finite loss in epoch {epoch}, phase {phase}")]
    NotFinite { epoch: usize, phase: Phase },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Sigmoid up to the knee `beta`, continued by its tangent line.
pub fn leaky_sigmoid<T: Real>(x: T, beta: T) -> T {
    if x <= beta {
        sigmoid(x)
    } else {
        let s = sigmoid(beta);
        s * (T::one() - s) * (x - beta) + s
    }
}

pub fn leaky_sigmoid_deriv<T: Real>(x: T, beta: T) -> T {
    let s = sigmoid(x.min(beta));
    s * (T::one() - s)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation<T> {
    Identity,
    LeakyRelu(T),
    /// `scale · LeakySigmoid_β`
    LeakySigmoid { beta: T, scale: T },
}

impl<T: Real> Activation<T> {
    pub fn apply(self, z: T) -> T {
        match self {
            Activation::Identity => z,
            Activation::LeakyRelu(s) => {
                if z >= T::zero() {
                    z
                } else {
                    s * z
                }
            }
            Activation::LeakySigmoid { beta, scale } => scale * leaky_sigmoid(z, beta),
        }
    }

    pub fn deriv(self, z: T) -> T {
        match self {
            Activation::Identity => T::one(),
            Activation::LeakyRelu(s) => {
                if z >= T::zero() {
                    T::one()
                } else {
                    s
                }
            }
            Activation::LeakySigmoid { beta, scale } => scale * leaky_sigmoid_deriv(z, beta),
        }
    }

    /// Pre-activation giving output `y`, if any.
    pub fn inverse(self, y: T) -> Option<T> {
        match self {
            Activation::Identity => Some(y),
            Activation::LeakyRelu(s) => Some(if y >= T::zero() { y } else { y / s }),
            Activation::LeakySigmoid { beta, scale } => {
                let u = y / scale;
                let sb = sigmoid(beta);
                if !(u > T::zero()) {
                    None
                } else if u <= sb {
                    Some((u / (T::one() - u)).ln())
                } else {
                    Some(beta + (u - sb) / (sb * (T::one() - sb)))
                }
            }
        }
    }
}

/// Dot product with four independent partial sums.
#[inline]
fn dot4<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] = acc[l] + a[4 * c + l] * b[4 * c + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for k in 4 * chunks..a.len() {
        s = s + a[k] * b[k];
    }
    s
}

/// Fully connected network with flat parameter storage: per layer the
/// weights (`out × in`, row-major) followed by the biases.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    sizes: Vec<usize>,
    /// parameter offset of each layer
    p_offs: Vec<usize>,
    /// cache offsets of z_l and a_l (a_0 is the input at 0)
    z_offs: Vec<usize>,
    a_offs: Vec<usize>,
    pub params: Vec<T>,
    hidden: Activation<T>,
    output: Activation<T>,
}

/// Forward-pass buffers for one evaluation: input, then (z, a) per layer.
#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    buf: Vec<T>,
    delta: Vec<T>,
    next: Vec<T>,
}

impl<T: Real> Mlp<T> {
    pub fn zeros(sizes: &[usize], hidden: Activation<T>, output: Activation<T>) -> Result<Self, AdversarialError> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(AdversarialError::Shape(format!("bad layer sizes {sizes:?}")));
        }
        let mut p_offs = vec![0];
        let mut z_offs = vec![];
        let mut a_offs = vec![0];
        let mut c = sizes[0];
        for w in sizes.windows(2) {
            p_offs.push(p_offs.last().unwrap() + w[0] * w[1] + w[1]);
            z_offs.push(c);
            a_offs.push(c + w[1]);
            c += 2 * w[1];
        }
        let n = p_offs.pop().unwrap();
        Ok(Self { sizes: sizes.to_vec(), p_offs, z_offs, a_offs, params: vec![T::zero(); n], hidden, output })
    }

    /// Weights and biases uniform on ±1/√fan_in.
    pub fn random(sizes: &[usize], hidden: Activation<T>, output: Activation<T>, rng: &mut impl Rng) -> Result<Self, AdversarialError> {
        let mut net = Self::zeros(sizes, hidden, output)?;
        let mut off = 0;
        for w in sizes.windows(2) {
            let bound = 1.0 / (w[0] as f64).sqrt();
            for p in &mut net.params[off..off + w[0] * w[1] + w[1]] {
                *p = T::lit(rng.random_range(-bound..bound));
            }
            off += w[0] * w[1] + w[1];
        }
        Ok(net)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn inputs(&self) -> usize {
        self.sizes[0]
    }

    pub fn outputs(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    fn layer_offset(&self, l: usize) -> usize {
        self.p_offs[l]
    }

    /// Output layer: zero weights, biases `b`.
    pub fn set_output_bias(&mut self, b: &[T]) {
        let l = self.layers() - 1;
        let off = self.layer_offset(l);
        let (i, o) = (self.sizes[l], self.sizes[l + 1]);
        for p in &mut self.params[off..off + i * o] {
            *p = T::zero();
        }
        self.params[off + i * o..off + i * o + o].copy_from_slice(b);
    }

    pub fn new_cache(&self) -> MlpCache<T> {
        let n = self.sizes[0] + 2 * self.sizes[1..].iter().sum::<usize>();
        let w = *self.sizes.iter().max().unwrap();
        MlpCache { buf: vec![T::zero(); n], delta: vec![T::zero(); w], next: vec![T::zero(); w] }
    }

    fn act(&self, l: usize) -> Activation<T> {
        if l + 1 == self.layers() {
            self.output
        } else {
            self.hidden
        }
    }

    /// Evaluates the network; the output is the tail of the cache.
    pub fn forward<'c>(&self, input: &[T], cache: &'c mut MlpCache<T>) -> &'c [T] {
        debug_assert_eq!(input.len(), self.sizes[0]);
        let buf = &mut cache.buf;
        buf[..input.len()].copy_from_slice(input);
        let mut a_off = 0;
        let mut p_off = 0;
        for l in 0..self.layers() {
            let (ni, no) = (self.sizes[l], self.sizes[l + 1]);
            let z_off = a_off + ni;
            let next_a = z_off + no;
            let act = self.act(l);
            for j in 0..no {
                let w = &self.params[p_off + j * ni..p_off + (j + 1) * ni];
                let s = self.params[p_off + ni * no + j] + dot4(w, &buf[a_off..a_off + ni]);
                buf[z_off + j] = s;
                buf[next_a + j] = act.apply(s);
            }
            p_off += ni * no + no;
            a_off = next_a;
        }
        &cache.buf[a_off..a_off + self.outputs()]
    }

    /// Accumulates `upstream · ∂out/∂params` into `grad` and writes
    /// `upstream · ∂out/∂input` into `dinput`.
    pub fn backward(&self, cache: &mut MlpCache<T>, upstream: &[T], grad: &mut [T], dinput: &mut [T]) {
        let MlpCache { buf, delta, next } = cache;
        delta[..upstream.len()].copy_from_slice(upstream);
        for l in (0..self.layers()).rev() {
            let (ni, no) = (self.sizes[l], self.sizes[l + 1]);
            let p_off = self.p_offs[l];
            let act = self.act(l);
            for j in 0..no {
                delta[j] = delta[j] * act.deriv(buf[self.z_offs[l] + j]);
            }
            let a_prev = &buf[self.a_offs[l]..self.a_offs[l] + ni];
            next[..ni].fill(T::zero());
            for j in 0..no {
                let d = delta[j];
                let row = p_off + j * ni;
                let w = &self.params[row..row + ni];
                let g = &mut grad[row..row + ni];
                for k in 0..ni {
                    g[k] = g[k] + d * a_prev[k];
                    next[k] = next[k] + d * w[k];
                }
                grad[p_off + ni * no + j] = grad[p_off + ni * no + j] + d;
            }
            std::mem::swap(delta, next);
        }
        dinput.copy_from_slice(&delta[..self.sizes[0]]);
    }
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub t: u64,
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
}

impl<T: Real> AdamState<T> {
    pub fn new(n: usize, lr: T) -> Self {
        Self {
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
            t: 0,
            lr,
            beta1: T::lit(0.9),
            beta2: T::lit(0.999),
            eps: T::lit(1e-8),
        }
    }

    /// One descent step on `params` along `grad`.
    pub fn step(&mut self, params: &mut [T], grad: &[T]) {
        self.t += 1;
        let c1 = T::one() - self.beta1.powi(self.t as i32);
        let c2 = T::one() - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (T::one() - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (T::one() - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] = params[i] - self.lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Which player is trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Alpha,
    Sigma,
    Eval,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Alpha => "alpha",
            Phase::Sigma => "sigma",
            Phase::Eval => "eval",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig<T> {
    pub x0: T,
    pub samples: usize,
    pub steps: usize,
    /// epochs at `lr_fast`, then at `lr_slow`
    pub epochs_fast: usize,
    pub epochs_slow: usize,
    pub lr_fast: T,
    pub lr_slow: T,
    /// mini-batch size; `samples` gives full-batch training
    pub batch: usize,
    pub width: usize,
    pub hidden_layers: usize,
    pub leaky_slope: T,
    pub beta: T,
    pub sigma_scale: T,
    pub antithetic: bool,
    pub seed: u64,
}

impl<T: Real> TrainConfig<T> {
    /// 2·10⁴ samples, 13 steps, 60 + 30 epochs, batches of 500.
    pub fn desk(x0: T, seed: u64) -> Self {
        Self {
            x0,
            samples: 20_000,
            steps: 13,
            epochs_fast: 60,
            epochs_slow: 30,
            lr_fast: T::lit(5e-4),
            lr_slow: T::lit(1e-4),
            batch: 500,
            width: 16,
            hidden_layers: 4,
            leaky_slope: T::lit(0.01),
            beta: T::lit(4.0),
            sigma_scale: T::one(),
            antithetic: true,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), AdversarialError> {
        let bad = |m: &str| Err(AdversarialError::Config(m.into()));
        if self.samples == 0 || self.steps == 0 || self.batch == 0 || self.width == 0 || self.hidden_layers == 0 {
            return bad("sizes must be positive");
        }
        if self.epochs_fast + self.epochs_slow == 0 {
            return bad("need at least one epoch");
        }
        if self.antithetic && self.samples % 2 != 0 {
            return bad("antithetic sampling needs an even sample count");
        }
        if !(self.x0 > T::zero()) || !(self.lr_fast > T::zero()) || !(self.lr_slow > T::zero()) || !(self.sigma_scale > T::zero()) {
            return bad("x0, learning rates and sigma_scale must be positive");
        }
        Ok(())
    }
}

/// Per-step networks of both players.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams<T> {
    pub alpha: Vec<Mlp<T>>,
    pub sigma: Vec<Mlp<T>>,
}

impl<T: Real> NetworkParams<T> {
    /// Hidden layers random, output layers zero with biases at the
    /// reference controls (α = 0, σ = σ₀).
    pub fn init(cfg: &TrainConfig<T>, sigma0: T, rng: &mut impl Rng) -> Result<Self, AdversarialError> {
        let mut sizes = vec![2];
        sizes.extend(std::iter::repeat_n(cfg.width, cfg.hidden_layers));
        sizes.push(1);
        let hidden = Activation::LeakyRelu(cfg.leaky_slope);
        let sig_out = Activation::LeakySigmoid { beta: cfg.beta, scale: cfg.sigma_scale };
        let bias = sig_out
            .inverse(sigma0)
            .ok_or_else(|| AdversarialError::Config(format!("reference volatility {sigma0} is not reachable by the output activation")))?;
        let mut alpha = Vec::with_capacity(cfg.steps);
        let mut sigma = Vec::with_capacity(cfg.steps);
        for _ in 0..cfg.steps {
            let mut a = Mlp::random(&sizes, hidden, Activation::Identity, rng)?;
            a.set_output_bias(&[T::zero()]);
            let mut s = Mlp::random(&sizes, hidden, sig_out, rng)?;
            s.set_output_bias(&[bias]);
            alpha.push(a);
            sigma.push(s);
        }
        Ok(Self { alpha, sigma })
    }

    pub fn is_finite(&self) -> bool {
        self.alpha.iter().chain(&self.sigma).all(|n| n.params.iter().all(|p| p.is_finite()))
    }
}

/// Samples processed per parallel work unit; gradients are summed in unit order.
const UNIT: usize = 64;

/// Training state: networks, optimizers, Brownian increments and the
/// frozen control paths.
pub struct Trainer<T> {
    pub cfg: TrainConfig<T>,
    pub params: MarketParams<T>,
    pub pen: Penalty,
    pub utility: Utility<T>,
    pub nets: NetworkParams<T>,
    adam_alpha: Vec<AdamState<T>>,
    adam_sigma: Vec<AdamState<T>>,
    /// `steps` increments per sample (sample-major)
    pub dw: Vec<T>,
    /// frozen α per (sample, step) used in phase 2
    pub alpha_paths: Vec<T>,
    /// frozen σ per (sample, step) used in phase 1
    pub sigma_paths: Vec<T>,
    rng: ChaCha8Rng,
}

/// Loss and gradients for one phase on a set of samples.
#[derive(Debug, Clone)]
pub struct PhaseGrad<T> {
    pub loss: T,
    /// one gradient per network of the trained player
    pub grads: Vec<Vec<T>>,
}

impl<T: Real> Trainer<T> {
    pub fn new(cfg: TrainConfig<T>, params: MarketParams<T>, pen: Penalty, utility: Utility<T>) -> Result<Self, AdversarialError> {
        cfg.validate()?;
        if params.dim() != 1 {
            return Err(AdversarialError::Config("adversarial training supports one asset".into()));
        }
        let sigma0 = params.sigma0();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let nets = NetworkParams::init(&cfg, sigma0, &mut rng)?;
        let (m, n) = (cfg.samples, cfg.steps);
        let sq = (params.horizon() / T::lit(n as f64)).sqrt();
        let mut dw = vec![T::zero(); m * n];
        let half = if cfg.antithetic { m / 2 } else { m };
        for v in dw[..half * n].iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v = T::lit(z) * sq;
        }
        if cfg.antithetic {
            for i in 0..half * n {
                dw[half * n + i] = -dw[i];
            }
        }
        let adam = |nets: &[Mlp<T>]| nets.iter().map(|k| AdamState::new(k.params.len(), cfg.lr_fast)).collect();
        Ok(Self {
            adam_alpha: adam(&nets.alpha),
            adam_sigma: adam(&nets.sigma),
            alpha_paths: vec![T::zero(); m * n],
            sigma_paths: vec![sigma0; m * n],
            nets,
            dw,
            cfg,
            params,
            pen,
            utility,
            rng,
        })
    }

    pub fn dt(&self) -> T {
        self.params.horizon() / T::lit(self.cfg.steps as f64)
    }

    fn set_lr(&mut self, lr: T) {
        for a in self.adam_alpha.iter_mut().chain(self.adam_sigma.iter_mut()) {
            a.lr = lr;
        }
    }

    /// Rolls one sample forward. Returns `U(X_N) + λ₀ΣF Δt` and, when
    /// `grad` is given, accumulates `∂value/∂params` of the trained player.
    /// The played controls are written to `played`.
    fn sample(&self, phase: Phase, s: usize, grad: Option<&mut [Vec<T>]>, caches: &mut [MlpCache<T>], played: &mut [T]) -> T {
        let n_steps = self.cfg.steps;
        let x0 = self.cfg.x0;
        let dt = self.dt();
        let b = self.params.excess()[0];
        let r = self.params.r();
        let half = T::lit(0.5);
        let dw = &self.dw[s * n_steps..(s + 1) * n_steps];
        // wealth, alpha, sigma per step
        let mut x = vec![x0; n_steps + 1];
        let mut al = vec![T::zero(); n_steps];
        let mut sg = vec![T::zero(); n_steps];
        let mut pen = T::zero();
        for n in 0..n_steps {
            let xin = (x[n] - x0) / x0;
            match phase {
                Phase::Alpha => {
                    sg[n] = self.sigma_paths[s * n_steps + n];
                    al[n] = self.nets.alpha[n].forward(&[xin, sg[n]], &mut caches[n])[0];
                }
                _ => {
                    al[n] = self.alpha_paths[s * n_steps + n];
                    sg[n] = self.nets.sigma[n].forward(&[xin, al[n]], &mut caches[n])[0];
                }
            }
            let g = (al[n] * b + r - half * al[n] * al[n] * sg[n] * sg[n]) * dt + al[n] * sg[n] * dw[n];
            x[n + 1] = x[n] * g.exp();
            pen = pen + self.pen.scalar(&self.params, sg[n]) * dt;
        }
        played.copy_from_slice(if phase == Phase::Alpha { &al } else { &sg });
        let value = self.utility.value(x[n_steps]) + pen;
        if let Some(grad) = grad {
            // adjoint of wealth
            let mut lam = self.utility.deriv(x[n_steps]);
            let mut din = [T::zero(); 2];
            for n in (0..n_steps).rev() {
                let (a, v) = (al[n], sg[n]);
                let ratio = x[n + 1] / x[n];
                let up = match phase {
                    Phase::Alpha => lam * x[n + 1] * ((b - a * v * v) * dt + v * dw[n]),
                    _ => lam * x[n + 1] * (-a * a * v * dt + a * dw[n]) + self.pen.scalar_deriv(&self.params, v) * dt,
                };
                let net = match phase {
                    Phase::Alpha => &self.nets.alpha[n],
                    _ => &self.nets.sigma[n],
                };
                net.backward(&mut caches[n], &[up], &mut grad[n], &mut din);
                lam = lam * ratio + din[0] / x0;
            }
        }
        value
    }

    /// Mean of `U(X_N) + λ₀ΣF Δt` over `idx`, gradients with respect to the
    /// trained player's networks, and the played controls (per `idx` entry,
    /// `steps` each).
    pub fn loss_and_grad(&self, phase: Phase, idx: &[usize], with_grad: bool) -> (PhaseGrad<T>, Vec<T>) {
        let n_steps = self.cfg.steps;
        let nets = match phase {
            Phase::Alpha => &self.nets.alpha,
            _ => &self.nets.sigma,
        };
        let zero_grads = || nets.iter().map(|k| vec![T::zero(); k.params.len()]).collect::<Vec<_>>();
        let units: Vec<(T, Option<Vec<Vec<T>>>, Vec<T>)> = idx
            .par_chunks(UNIT)
            .map(|chunk| {
                let mut caches: Vec<_> = nets.iter().map(|k| k.new_cache()).collect();
                let mut grads = if with_grad { Some(zero_grads()) } else { None };
                let mut played = vec![T::zero(); chunk.len() * n_steps];
                let mut sum = T::zero();
                for (j, &s) in chunk.iter().enumerate() {
                    sum = sum
                        + self.sample(phase, s, grads.as_deref_mut(), &mut caches, &mut played[j * n_steps..(j + 1) * n_steps]);
                }
                (sum, grads, played)
            })
            .collect();
        let mut total = T::zero();
        let mut grads = zero_grads();
        let mut played = Vec::with_capacity(idx.len() * n_steps);
        for (s, g, p) in units {
            total = total + s;
            if let Some(g) = g {
                for (acc, gi) in grads.iter_mut().zip(g) {
                    for (a, v) in acc.iter_mut().zip(gi) {
                        *a = *a + v;
                    }
                }
            }
            played.extend(p);
        }
        let count = T::lit(idx.len() as f64);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v = *v / count;
            }
        }
        (PhaseGrad { loss: total / count, grads }, played)
    }

    /// Phase-1 update on `idx`: ascend the value over the α-networks and
    /// store the played α. Returns the loss `−value`.
    pub fn step_alpha(&mut self, idx: &[usize]) -> T {
        let (pg, played) = self.loss_and_grad(Phase::Alpha, idx, true);
        for ((net, adam), g) in self.nets.alpha.iter_mut().zip(&mut self.adam_alpha).zip(&pg.grads) {
            let neg: Vec<T> = g.iter().map(|&v| -v).collect();
            adam.step(&mut net.params, &neg);
        }
        self.store(Phase::Alpha, idx, &played);
        -pg.loss
    }

    /// Phase-2 update on `idx`: descend the value over the σ-networks and
    /// store the played σ. Returns the loss `value`.
    pub fn step_sigma(&mut self, idx: &[usize]) -> T {
        let (pg, played) = self.loss_and_grad(Phase::Sigma, idx, true);
        for ((net, adam), g) in self.nets.sigma.iter_mut().zip(&mut self.adam_sigma).zip(&pg.grads) {
            adam.step(&mut net.params, g);
        }
        self.store(Phase::Sigma, idx, &played);
        pg.loss
    }

    fn store(&mut self, phase: Phase, idx: &[usize], played: &[T]) {
        let n = self.cfg.steps;
        let dst = match phase {
            Phase::Alpha => &mut self.alpha_paths,
            _ => &mut self.sigma_paths,
        };
        for (j, &s) in idx.iter().enumerate() {
            dst[s * n..(s + 1) * n].copy_from_slice(&played[j * n..(j + 1) * n]);
        }
    }

    /// Phase-2 value on the full sample with the stored α paths, and the
    /// per-step mean (α, σ).
    pub fn evaluate(&self) -> (T, Vec<(T, T)>) {
        let n = self.cfg.steps;
        let all: Vec<usize> = (0..self.cfg.samples).collect();
        let (pg, sig) = self.loss_and_grad(Phase::Sigma, &all, false);
        let m = T::lit(self.cfg.samples as f64);
        let means = (0..n)
            .map(|k| {
                let a = (0..self.cfg.samples).map(|s| self.alpha_paths[s * n + k]).sum::<T>() / m;
                let v = (0..self.cfg.samples).map(|s| sig[s * n + k]).sum::<T>() / m;
                (a, v)
            })
            .collect();
        (pg.loss, means)
    }

    /// One epoch of alternating mini-batch updates.
    pub fn epoch(&mut self, epoch: usize) -> Result<(T, T), AdversarialError> {
        let mut perm: Vec<usize> = (0..self.cfg.samples).collect();
        perm.shuffle(&mut self.rng);
        let (mut l1, mut l2) = (T::zero(), T::zero());
        let mut batches = 0;
        for idx in perm.chunks(self.cfg.batch) {
            let a = self.step_alpha(idx);
            if !a.is_finite() {
                return Err(AdversarialError::NotFinite { epoch, phase: Phase::Alpha });
            }
            let s = self.step_sigma(idx);
            if !s.is_finite() {
                return Err(AdversarialError::NotFinite { epoch, phase: Phase::Sigma });
            }
            l1 = l1 + a;
            l2 = l2 + s;
            batches += 1;
        }
        let b = T::lit(batches as f64);
        Ok((l1 / b, l2 / b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord<T> {
    pub epoch: usize,
    pub phase: Phase,
    pub loss: T,
}

#[derive(Debug, Clone)]
pub struct TrainResult<T> {
    pub nets: NetworkParams<T>,
    /// final full-sample phase-2 value
    pub value: T,
    pub history: Vec<LossRecord<T>>,
    /// per-step mean (α, σ)
    pub controls: Vec<(T, T)>,
}

/// Full training schedule.
pub fn train<T: Real>(
    cfg: &TrainConfig<T>,
    params: &MarketParams<T>,
    pen: Penalty,
    utility: &Utility<T>,
) -> Result<TrainResult<T>, AdversarialError> {
    let mut tr = Trainer::new(cfg.clone(), params.clone(), pen, utility.clone())?;
    let mut history = Vec::new();
    let total = cfg.epochs_fast + cfg.epochs_slow;
    let mut last = None;
    for e in 0..total {
        if e == cfg.epochs_fast {
            tr.set_lr(cfg.lr_slow);
        }
        let (l1, l2) = tr.epoch(e)?;
        let (value, controls) = tr.evaluate();
        if !value.is_finite() {
            return Err(AdversarialError::NotFinite { epoch: e, phase: Phase::Eval });
        }
        history.push(LossRecord { epoch: e, phase: Phase::Alpha, loss: l1 });
        history.push(LossRecord { epoch: e, phase: Phase::Sigma, loss: l2 });
        history.push(LossRecord { epoch: e, phase: Phase::Eval, loss: value });
        last = Some((value, controls));
    }
    let (value, controls) = last.expect("at least one epoch");
    Ok(TrainResult { nets: tr.nets, value, history, controls })
}

/// `epoch,phase,loss`
pub fn write_history<T: Real, W: Write>(history: &[LossRecord<T>], mut w: W) -> std::io::Result<()> {
    writeln!(w, "epoch,phase,loss")?;
    for h in history {
        writeln!(w, "{},{},{}", h.epoch, h.phase, h.loss)?;
    }
    Ok(())
}

/// `step,mean_alpha,mean_sigma`
pub fn write_controls<T: Real, W: Write>(controls: &[(T, T)], mut w: W) -> std::io::Result<()> {
    writeln!(w, "step,mean_alpha,mean_sigma")?;
    for (n, (a, s)) in controls.iter().enumerate() {
        writeln!(w, "{n},{a},{s}")?;
    }
    Ok(())
}
