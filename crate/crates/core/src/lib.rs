//! Penalized robust utility maximization.
//!
//! An investor chooses allocations while an adversarial market chooses the
//! volatility (or covariance) at a penalty. The game value is computed four
//! ways that cross-check each other:
//!
//! - [`analytic`]: closed-form saddle points for logarithmic utility;
//! - [`fdm`]: an implicit finite-difference solver for the HJBI equation;
//! - [`mc`]: regression Monte Carlo with control randomization;
//! - [`adversarial`]: alternating training of allocation and volatility networks.
//!
//! [`backtest`] compares robust and plain log-optimal portfolios on noisy
//! covariances and on price histories.
//!
//! The numerical core is generic over [`Real`] (`f32`/`f64`); the aliases below
//! fix the scalar to `f64`.

pub mod adversarial;
pub mod analytic;
pub mod backtest;
pub mod fdm;
pub mod linalg;
pub mod mc;
pub mod model;
pub mod scalar;

pub use scalar::Real;

pub type Matrix = linalg::Matrix<f64>;
pub type MarketParams = model::MarketParams<f64>;
pub type Utility = model::Utility<f64>;
pub type ControlBounds = model::ControlBounds<f64>;
pub type SaddleControls = model::SaddleControls<f64>;
pub type SigmaHat = model::SigmaHat<f64>;
pub type Grid1D = fdm::Grid1D<f64>;
pub type PdeSolution = fdm::PdeSolution<f64>;
pub use model::Penalty;
