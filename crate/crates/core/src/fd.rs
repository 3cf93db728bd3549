//! Windowed local-polynomial derivative operators, the clipped Dupire
//! local-variance field and its weighted total variation.

use serde::{Deserialize, Serialize};

use crate::error::{dim, input, Result};
use crate::grid::{quad_fit, window_start, Grid2D, Surface, WeightField};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FdConfig {
    pub window_k: usize,
    pub window_tau: usize,
    pub clip_lo: f64,
    pub clip_hi: f64,
    pub denom_floor: f64,
}

impl Default for FdConfig {
    fn default() -> Self {
        Self { window_k: 5, window_tau: 3, clip_lo: 1e-6, clip_hi: 4.0, denom_floor: 1e-8 }
    }
}

impl FdConfig {
    pub fn validate(&self, grid: &Grid2D) -> Result<()> {
        for (wname, w, n) in [
            ("window_k", self.window_k, grid.n_strikes()),
            ("window_tau", self.window_tau, grid.n_maturities()),
        ] {
            if w < 3 || w % 2 == 0 {
                return Err(input(format!("{wname} must be odd and at least 3, got {w}")));
            }
            if w > n {
                return Err(dim(format!("{wname} = {w} exceeds axis length {n}")));
            }
        }
        if !(self.clip_lo > 0.0 && self.clip_lo < self.clip_hi) {
            return Err(input("need 0 < clip_lo < clip_hi"));
        }
        if self.denom_floor <= 0.0 {
            return Err(input("denom_floor must be positive"));
        }
        Ok(())
    }
}

/// Per-node stencil: window start and the linear weights applied to the
/// window values.
#[derive(Debug, Clone)]
pub struct Stencil {
    pub start: usize,
    pub coeffs: Vec<f64>,
}

/// Stencils for derivative `order` (1 or 2) from a quadratic least-squares
/// fit over `win` consecutive nodes, shifted inward at the edges.
pub fn stencils(xs: &[f64], win: usize, order: usize) -> Vec<Stencil> {
    let n = xs.len();
    (0..n)
        .map(|i| {
            let s = window_start(i, n, win);
            let coeffs = (0..win)
                .map(|j| {
                    let mut e = vec![0.0; win];
                    e[j] = 1.0;
                    let (_, d1, d2) = quad_fit(&xs[s..s + win], &e, xs[i]);
                    if order == 1 {
                        d1
                    } else {
                        d2
                    }
                })
                .collect();
            Stencil { start: s, coeffs }
        })
        .collect()
}

/// Second strike derivative and first maturity derivative of `C`.
pub fn fd_derivatives(c: &Surface, grid: &Grid2D, cfg: &FdConfig) -> Result<(Vec<f64>, Vec<f64>)> {
    if c.values.len() != grid.len() {
        return Err(dim("surface does not match grid"));
    }
    cfg.validate(grid)?;
    let nk = grid.n_strikes();
    let nt = grid.n_maturities();
    let sk = stencils(&grid.strikes, cfg.window_k, 2);
    let st = stencils(&grid.maturities, cfg.window_tau, 1);
    let mut ckk = vec![0.0; grid.len()];
    let mut ct = vec![0.0; grid.len()];
    for t in 0..nt {
        for k in 0..nk {
            let s = &sk[k];
            ckk[grid.idx(t, k)] = s.coeffs.iter().enumerate().map(|(j, c_)| c_ * c.at(t, s.start + j)).sum();
            let s = &st[t];
            ct[grid.idx(t, k)] = s.coeffs.iter().enumerate().map(|(j, c_)| c_ * c.at(s.start + j, k)).sum();
        }
    }
    Ok((ckk, ct))
}

/// Dense matrices of the two derivative operators acting on row-major fields.
pub fn fd_operator_matrices(grid: &Grid2D, cfg: &FdConfig) -> Result<(nalgebra::DMatrix<f64>, nalgebra::DMatrix<f64>)> {
    cfg.validate(grid)?;
    let n = grid.len();
    let nk = grid.n_strikes();
    let nt = grid.n_maturities();
    let sk = stencils(&grid.strikes, cfg.window_k, 2);
    let st = stencils(&grid.maturities, cfg.window_tau, 1);
    let mut dkk = nalgebra::DMatrix::zeros(n, n);
    let mut dt = nalgebra::DMatrix::zeros(n, n);
    for t in 0..nt {
        for k in 0..nk {
            let row = grid.idx(t, k);
            for (j, c) in sk[k].coeffs.iter().enumerate() {
                dkk[(row, grid.idx(t, sk[k].start + j))] += c;
            }
            for (j, c) in st[t].coeffs.iter().enumerate() {
                dt[(row, grid.idx(st[t].start + j, k))] += c;
            }
        }
    }
    Ok((dkk, dt))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DupireField {
    pub sigma2: Vec<f64>,
    pub clipped_mask: Vec<bool>,
    pub floored_mask: Vec<bool>,
}

impl DupireField {
    pub fn to_json(&self, grid: &Grid2D) -> serde_json::Value {
        let mut v = crate::grid::grid_json(grid, None, "values", &self.sigma2);
        let nk = grid.n_strikes();
        let rows: Vec<Vec<bool>> = self.clipped_mask.chunks(nk).map(|c| c.to_vec()).collect();
        v["clipped"] = serde_json::json!(rows);
        v
    }
}

/// `sigma^2 = 2 C_tau / (K^2 C_KK)` with a floored denominator, clipped to
/// `[clip_lo, clip_hi]`.
pub fn dupire_field(c: &Surface, grid: &Grid2D, cfg: &FdConfig) -> Result<DupireField> {
    let (ckk, ct) = fd_derivatives(c, grid, cfg)?;
    let nk = grid.n_strikes();
    let n = grid.len();
    let mut sigma2 = vec![0.0; n];
    let mut clipped_mask = vec![false; n];
    let mut floored_mask = vec![false; n];
    for i in 0..n {
        let k = grid.strikes[i % nk];
        let mut den = k * k * ckk[i];
        if den < cfg.denom_floor {
            den = cfg.denom_floor;
            floored_mask[i] = true;
        }
        let raw = 2.0 * ct[i] / den;
        let v = raw.clamp(cfg.clip_lo, cfg.clip_hi);
        clipped_mask[i] = !(raw > cfg.clip_lo && raw < cfg.clip_hi) || raw.is_nan();
        sigma2[i] = if raw.is_nan() { cfg.clip_lo } else { v };
    }
    Ok(DupireField { sigma2, clipped_mask, floored_mask })
}

/// Sum over adjacent node pairs of the mean endpoint weight times the
/// absolute difference of the field.
pub fn dupire_total_variation(field: &DupireField, w: &WeightField, grid: &Grid2D) -> Result<f64> {
    if field.sigma2.len() != grid.len() || w.len() != grid.len() {
        return Err(dim("field, weight and grid sizes differ"));
    }
    Ok(weighted_tv(&field.sigma2, &w.w, grid.n_maturities(), grid.n_strikes()))
}

pub(crate) fn weighted_tv(f: &[f64], w: &[f64], nt: usize, nk: usize) -> f64 {
    let mut tv = 0.0;
    for t in 0..nt {
        for k in 0..nk {
            let i = t * nk + k;
            if k + 1 < nk {
                tv += 0.5 * (w[i] + w[i + 1]) * (f[i + 1] - f[i]).abs();
            }
            if t + 1 < nt {
                tv += 0.5 * (w[i] + w[i + nk]) * (f[i + nk] - f[i]).abs();
            }
        }
    }
    tv
}
