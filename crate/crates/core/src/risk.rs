//! Multiplicative risk budget.
//!
//! Every stage contributes a dimensionless factor of the form `1 + term`,
//! and the end-to-end bound is their product, so the logarithm splits into
//! one additive contribution per stage.

use serde::{Deserialize, Serialize};

use crate::error::{input, Result};
use crate::grid::{weighted_dist, Grid2D, Surface, WeightField};

/// Proximal budget `‖Π Ĉ − Ĉ‖_w / ‖Ĉ − C*‖_w`, zero when the denominator is.
pub fn eps_prox(c_pre: &Surface, c_post: &Surface, c_target: &Surface, w: &WeightField, grid: &Grid2D) -> Result<f64> {
    let num = weighted_dist(&c_post.values, &c_pre.values, w, grid)?;
    let den = weighted_dist(&c_pre.values, &c_target.values, w, grid)?;
    if den <= 0.0 || num == 0.0 {
        return Ok(0.0);
    }
    Ok(num / den)
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RiskInputs {
    /// Normalized approximation error of the constructive stage.
    pub c1_error: f64,
    pub c1_stat: f64,
    pub erm_term: f64,
    pub kkt: f64,
    pub r_geo: f64,
    /// Iteration count used as the exponent of `r_geo`.
    pub iterations: usize,
    pub mu_hat: f64,
    pub eps: f64,
    pub delta_mr: f64,
    pub chain_energy: f64,
    pub tol_band: f64,
    pub lambda2: f64,
    pub slope_plus: f64,
    pub area_minus: f64,
    pub eps_prox: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RiskConstants {
    pub c_appr: f64,
    pub c_erm: f64,
    pub c_br: f64,
    pub c3: f64,
    pub c_ch: f64,
    /// Spectral constant in the slope/area chain form `(c/λ2)(slope⁺ + area⁻)`.
    pub c: f64,
}

impl Default for RiskConstants {
    fn default() -> Self {
        Self { c_appr: 1.0, c_erm: 1.0, c_br: 1.0, c3: 1.0, c_ch: 1.0, c: 1.0 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RiskBudget {
    pub eps_prox: f64,
    pub e_c1: f64,
    pub e_erm: f64,
    pub e_bridge: f64,
    pub e_chain: f64,
    /// Chain term from the measured energy.
    pub chain_direct: f64,
    /// Chain term from the tail slope and area drop.
    pub chain_slope_area: f64,
    pub total: f64,
    /// Factors in order: prox, C1, ERM, bridge, chain.
    pub factors: [f64; 5],
    pub log_terms: [f64; 5],
}

impl RiskBudget {
    pub fn log_total(&self) -> f64 {
        self.total.ln()
    }

    pub fn log_sum(&self) -> f64 {
        self.log_terms.iter().sum()
    }
}

fn check(name: &str, v: f64) -> Result<()> {
    if !v.is_finite() || v < 0.0 {
        return Err(input(format!("{name} must be finite and nonnegative, got {v}")));
    }
    Ok(())
}

pub fn bridge_term(inp: &RiskInputs, k: &RiskConstants) -> f64 {
    k.c_br / inp.mu_hat * (inp.kkt + inp.r_geo.powf(inp.iterations as f64)) + k.c3 * (inp.eps + inp.delta_mr)
}

pub fn assemble_risk(inp: &RiskInputs, k: &RiskConstants) -> Result<RiskBudget> {
    if !(inp.mu_hat > 0.0) {
        return Err(input(format!("mu_hat must be positive, got {}", inp.mu_hat)));
    }
    if !(inp.lambda2 > 0.0) {
        return Err(input(format!("lambda2 must be positive, got {}", inp.lambda2)));
    }
    for (n, v) in [
        ("c1_error", inp.c1_error),
        ("c1_stat", inp.c1_stat),
        ("erm_term", inp.erm_term),
        ("kkt", inp.kkt),
        ("r_geo", inp.r_geo),
        ("mu_hat", inp.mu_hat),
        ("eps", inp.eps),
        ("delta_mr", inp.delta_mr),
        ("chain_energy", inp.chain_energy),
        ("tol_band", inp.tol_band),
        ("lambda2", inp.lambda2),
        ("slope_plus", inp.slope_plus),
        ("area_minus", inp.area_minus),
        ("eps_prox", inp.eps_prox),
        ("c_appr", k.c_appr),
        ("c_erm", k.c_erm),
        ("c_br", k.c_br),
        ("c3", k.c3),
        ("c_ch", k.c_ch),
        ("c", k.c),
    ] {
        check(n, v)?;
    }
    let e_c1 = 1.0 + k.c_appr * inp.c1_error + inp.c1_stat;
    let e_erm = 1.0 + k.c_erm * inp.erm_term;
    let e_bridge = 1.0 + bridge_term(inp, k);
    let chain_direct = k.c_ch * (inp.chain_energy + inp.tol_band);
    let chain_slope_area = k.c_ch * (k.c / inp.lambda2 * (inp.slope_plus + inp.area_minus) + inp.tol_band);
    let e_chain = 1.0 + chain_direct.min(chain_slope_area);
    let factors = [1.0 + inp.eps_prox, e_c1, e_erm, e_bridge, e_chain];
    let total = factors.iter().product();
    let log_terms = factors.map(f64::ln);
    Ok(RiskBudget {
        eps_prox: inp.eps_prox,
        e_c1,
        e_erm,
        e_bridge,
        e_chain,
        chain_direct,
        chain_slope_area,
        total,
        factors,
        log_terms,
    })
}
