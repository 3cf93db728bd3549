//! Arbitrage-free option surface calibration in a single vega-weighted L2
//! geometry.
//!
//! The crate is organised as a closed loop of stages, each of which emits a
//! small set of computable certificates:
//!
//! - [`grid`]: the strike/maturity mesh, vega weights and the weighted norm.
//! - [`fd`]: windowed least-squares derivative operators and the Dupire field.
//! - [`smolyak`]: anisotropic sparse-grid interpolation, a PCA head and exact
//!   compilation of piecewise-linear interpolants to ReLU networks.
//! - [`cemot`]: a martingale-constrained tri-marginal entropic transport
//!   bridge solved by log-domain Sinkhorn scaling.
//! - [`projection`]: weighted projection onto the arbitrage-free cone.
//! - [`chain_stats`]: kernel MMD statistics across maturities and the
//!   Gate-V2 tail decision.
//! - [`chain_descent`]: a path-graph Laplacian and a projected descent harness.
//! - [`risk`]: the multiplicative risk budget.
//! - [`synth`]: closed-form synthetic surfaces and density extraction.
//! - [`pipeline`]: configuration and the end-to-end run producing a summary.

pub mod cemot;
pub mod chain_descent;
pub mod chain_stats;
pub mod error;
pub mod fd;
pub mod grid;
pub mod linalg;
pub mod par;
pub mod pipeline;
pub mod projection;
pub mod risk;
pub mod smolyak;
pub mod synth;

pub use error::{Error, Result};
pub use grid::{Grid2D, Surface, WeightField};
