//! Closed-form synthetic call surfaces, Breeden–Litzenberger density
//! extraction, per-maturity sample clouds and discrete VIX² replication.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::error::{dim, input, Error, Result};
use crate::fd::{fd_derivatives, FdConfig};
use crate::grid::{trapezoid_weights, Grid2D, Surface};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VolSpec {
    Constant { sigma: f64 },
    /// `sigma(K) = a + b * ((K - spot) / spot)^2`
    Smile { a: f64, b: f64 },
}

impl VolSpec {
    pub fn sigma(&self, k: f64, spot: f64) -> f64 {
        match *self {
            VolSpec::Constant { sigma } => sigma,
            VolSpec::Smile { a, b } => {
                let m = (k - spot) / spot;
                a + b * m * m
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MarketParams {
    pub spot: f64,
    pub rate: f64,
    pub dividend: f64,
    pub vol: VolSpec,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for MarketParams {
    fn default() -> Self {
        Self {
            spot: 100.0,
            rate: 0.0,
            dividend: 0.0,
            vol: VolSpec::Constant { sigma: 0.2 },
            noise_sigma: 0.05,
            seed: 7,
        }
    }
}

pub fn norm_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

pub fn norm_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Black–Scholes call price.
pub fn bs_call(spot: f64, k: f64, tau: f64, rate: f64, div: f64, sigma: f64) -> f64 {
    let sd = sigma * tau.sqrt();
    let fwd = spot * ((rate - div) * tau).exp();
    let df = (-rate * tau).exp();
    if sd <= 0.0 {
        return df * (fwd - k).max(0.0);
    }
    let d1 = ((fwd / k).ln() + 0.5 * sd * sd) / sd;
    let d2 = d1 - sd;
    df * (fwd * norm_cdf(d1) - k * norm_cdf(d2))
}

/// Black–Scholes put price.
pub fn bs_put(spot: f64, k: f64, tau: f64, rate: f64, div: f64, sigma: f64) -> f64 {
    let call = bs_call(spot, k, tau, rate, div, sigma);
    call - spot * (-div * tau).exp() + k * (-rate * tau).exp()
}

/// Black–Scholes vega.
pub fn bs_vega(spot: f64, k: f64, tau: f64, rate: f64, div: f64, sigma: f64) -> f64 {
    let sd = sigma * tau.sqrt();
    let fwd = spot * ((rate - div) * tau).exp();
    let d1 = ((fwd / k).ln() + 0.5 * sd * sd) / sd;
    spot * (-div * tau).exp() * norm_pdf(d1) * tau.sqrt()
}

/// Clean and noisy call surfaces. Noise is i.i.d. Gaussian with standard
/// deviation `noise_sigma * vega / max(vega)`.
pub fn generate_surface(params: &MarketParams, grid: &Grid2D) -> Result<(Surface, Surface)> {
    if params.spot <= 0.0 {
        return Err(Error::Parameter("spot must be positive".into()));
    }
    for &t in &grid.maturities {
        for &k in &grid.strikes {
            let s = params.vol.sigma(k, params.spot);
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Parameter(format!("volatility {s} at K={k}, tau={t} is not positive")));
            }
        }
    }
    let p = params;
    let clean = Surface::from_fn(grid, |k, t| bs_call(p.spot, k, t, p.rate, p.dividend, p.vol.sigma(k, p.spot)))?;
    if p.noise_sigma == 0.0 {
        return Ok((clean.clone(), clean));
    }
    let vega = grid.tabulate(|k, t| bs_vega(p.spot, k, t, p.rate, p.dividend, p.vol.sigma(k, p.spot)));
    let vmax = vega.iter().cloned().fold(0.0, f64::max);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let noisy: Vec<f64> = clean
        .values
        .iter()
        .zip(&vega)
        .map(|(c, v)| {
            let z: f64 = StandardNormal.sample(&mut rng);
            c + p.noise_sigma * (v / vmax) * z
        })
        .collect();
    Ok((clean, Surface::new(grid.clone(), noisy)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Density {
    pub probs: Vec<f64>,
    /// Total mass before renormalisation.
    pub renorm: f64,
}

/// Breeden–Litzenberger density on the strike nodes of one maturity row:
/// `C_KK` times trapezoid strike weights, clipped below `1e-12`, renormalised.
pub fn extract_density(c: &Surface, grid: &Grid2D, tau_index: usize, fd: &FdConfig) -> Result<Density> {
    if tau_index >= grid.n_maturities() {
        return Err(dim(format!("tau_index {tau_index} out of range")));
    }
    let (ckk, _) = fd_derivatives(c, grid, fd)?;
    let a = trapezoid_weights(&grid.strikes);
    let nk = grid.n_strikes();
    let raw: Vec<f64> = (0..nk)
        .map(|k| {
            let m = ckk[grid.idx(tau_index, k)] * a[k];
            if m < 1e-12 {
                0.0
            } else {
                m
            }
        })
        .collect();
    let mass: f64 = raw.iter().sum();
    if mass <= 0.0 {
        return Err(Error::Degenerate("strike curvature vanishes on this row".into()));
    }
    Ok(Density { probs: raw.iter().map(|m| m / mass).collect(), renorm: mass })
}

/// Per-maturity draws of `S_tau / spot` under a lognormal law with the
/// at-the-money volatility; one scalar feature per sample.
pub fn sample_clouds(params: &MarketParams, maturities: &[f64], n: usize, seed: u64) -> Vec<Vec<Vec<f64>>> {
    let sigma = params.vol.sigma(params.spot, params.spot);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    maturities
        .iter()
        .map(|&t| {
            let drift = (params.rate - params.dividend - 0.5 * sigma * sigma) * t;
            (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    vec![(drift + sigma * t.sqrt() * z).exp()]
                })
                .collect()
        })
        .collect()
}

/// Discrete VIX² replication: `(2 e^{r tau} / tau)` times the trapezoid
/// integral of the out-of-the-money price over `K²`.
pub fn vix2_replication(
    put_prices: &[f64],
    call_prices: &[f64],
    strikes: &[f64],
    spot: f64,
    rate: f64,
    tau: f64,
) -> Result<f64> {
    let n = strikes.len();
    if put_prices.len() != n || call_prices.len() != n {
        return Err(dim("price and strike arrays differ in length"));
    }
    if strikes.iter().any(|k| *k <= 0.0) {
        return Err(input("strikes must be positive"));
    }
    if strikes.windows(2).any(|p| p[1] <= p[0]) {
        return Err(input("strikes must be increasing"));
    }
    if tau <= 0.0 {
        return Err(input("tau must be positive"));
    }
    let f: Vec<f64> = (0..n)
        .map(|i| {
            let otm = if strikes[i] < spot { put_prices[i] } else { call_prices[i] };
            otm / (strikes[i] * strikes[i])
        })
        .collect();
    let integral: f64 = (0..n.saturating_sub(1))
        .map(|i| 0.5 * (strikes[i + 1] - strikes[i]) * (f[i] + f[i + 1]))
        .sum();
    Ok((2.0 * (rate * tau).exp() / tau * integral).max(0.0))
}
