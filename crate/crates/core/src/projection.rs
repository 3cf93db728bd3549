//! Weighted projection onto the arbitrage-free cone and its certificates.
//!
//! The cone is the intersection of two closed convex sets in the weighted
//! norm: calendar-monotone nonnegative surfaces (handled column by column
//! with weighted PAV and a floor at zero) and strike-convex surfaces
//! (handled row by row with an exact weighted convex regression).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim, input, Result};
use crate::fd::{dupire_field, dupire_total_variation, FdConfig};
use crate::grid::{weighted_dist, weighted_norm, Grid2D, Surface, WeightField};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    NonDecreasing,
    NonIncreasing,
}

/// Weighted least-squares projection onto the monotone cone.
pub fn pav_isotonic(seq: &[f64], weights: &[f64], direction: Direction) -> Result<Vec<f64>> {
    if seq.is_empty() {
        return Err(dim("empty sequence"));
    }
    if seq.len() != weights.len() {
        return Err(dim("sequence and weights differ in length"));
    }
    if weights.iter().any(|w| !(*w > 0.0)) {
        return Err(input("weights must be positive"));
    }
    Ok(match direction {
        Direction::NonDecreasing => pav_inc(seq, weights),
        Direction::NonIncreasing => {
            let neg: Vec<f64> = seq.iter().map(|v| -v).collect();
            pav_inc(&neg, weights).into_iter().map(|v| -v).collect()
        }
    })
}

fn pav_inc(y: &[f64], w: &[f64]) -> Vec<f64> {
    // Blocks of (weighted mean, total weight, length).
    let mut mean: Vec<f64> = Vec::with_capacity(y.len());
    let mut wt: Vec<f64> = Vec::with_capacity(y.len());
    let mut len: Vec<usize> = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        mean.push(y[i]);
        wt.push(w[i]);
        len.push(1);
        while mean.len() > 1 && mean[mean.len() - 2] > mean[mean.len() - 1] {
            let (m2, w2, l2) = (mean.pop().unwrap(), wt.pop().unwrap(), len.pop().unwrap());
            let b = mean.len() - 1;
            let tw = wt[b] + w2;
            mean[b] = (mean[b] * wt[b] + m2 * w2) / tw;
            wt[b] = tw;
            len[b] += l2;
        }
    }
    let mut out = Vec::with_capacity(y.len());
    for (m, l) in mean.iter().zip(&len) {
        out.extend(std::iter::repeat_n(*m, *l));
    }
    out
}

/// Exact weighted least-squares projection of a row onto convex sequences
/// over the given strikes. Solved through the dual, a nonnegative least
/// squares problem on the slope-difference multipliers.
pub fn convex_in_strike(row: &[f64], weights: &[f64], strikes: &[f64]) -> Result<Vec<f64>> {
    let n = row.len();
    if n < 3 {
        return Err(dim("convex regression needs at least 3 points"));
    }
    if weights.len() != n || strikes.len() != n {
        return Err(dim("row, weights and strikes differ in length"));
    }
    if strikes.windows(2).any(|p| p[1] <= p[0]) {
        return Err(input("strikes must be strictly increasing"));
    }
    if weights.iter().any(|w| !(*w > 0.0)) {
        return Err(input("weights must be positive"));
    }
    Ok(convex_project(row, weights, strikes))
}

pub(crate) fn convex_project(y: &[f64], q: &[f64], k: &[f64]) -> Vec<f64> {
    let n = y.len();
    let m = n - 2;
    // D row r touches nodes r, r+1, r+2.
    let mut d = vec![[0.0f64; 3]; m];
    for r in 0..m {
        let h0 = k[r + 1] - k[r];
        let h1 = k[r + 2] - k[r + 1];
        d[r] = [1.0 / h0, -1.0 / h0 - 1.0 / h1, 1.0 / h1];
    }
    let g: Vec<f64> = (0..m).map(|r| d[r][0] * y[r] + d[r][1] * y[r + 1] + d[r][2] * y[r + 2]).collect();
    if g.iter().all(|v| *v >= 0.0) {
        return y.to_vec();
    }
    // H = D Q^{-1} D^T, banded with half-bandwidth 2.
    let mut h = vec![0.0f64; m * m];
    for r in 0..m {
        for s in r.saturating_sub(2)..(r + 3).min(m) {
            let mut acc = 0.0;
            for node in r.max(s)..=(r + 2).min(s + 2) {
                acc += d[r][node - r] * d[s][node - s] / q[node];
            }
            h[r * m + s] = acc;
        }
    }
    let lam = nnls_gram(&h, &g, m);
    let mut c = y.to_vec();
    for r in 0..m {
        if lam[r] != 0.0 {
            for j in 0..3 {
                c[r + j] += d[r][j] * lam[r] / q[r + j];
            }
        }
    }
    c
}

/// Minimise `0.5 x^T H x + g^T x` over `x >= 0` (Lawson–Hanson in Gram form).
fn nnls_gram(h: &[f64], g: &[f64], m: usize) -> Vec<f64> {
    let mut x = vec![0.0; m];
    let mut passive = vec![false; m];
    let scale = g.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(1e-300);
    let tol = 1e-13 * scale;
    let grad = |x: &[f64], i: usize| -> f64 {
        let mut s = g[i];
        for j in 0..m {
            s += h[i * m + j] * x[j];
        }
        s
    };
    for _outer in 0..(4 * m + 10) {
        let mut best = None;
        let mut bw = tol;
        for j in 0..m {
            if !passive[j] {
                let w = -grad(&x, j);
                if w > bw {
                    bw = w;
                    best = Some(j);
                }
            }
        }
        let Some(j) = best else { break };
        passive[j] = true;
        for _inner in 0..(4 * m + 10) {
            let idx: Vec<usize> = (0..m).filter(|&i| passive[i]).collect();
            let s_p = solve_spd_sub(h, g, m, &idx);
            let mut s = vec![0.0; m];
            for (a, &i) in idx.iter().enumerate() {
                s[i] = s_p[a];
            }
            if idx.iter().all(|&i| s[i] > 0.0) {
                x = s;
                break;
            }
            let mut alpha = 1.0f64;
            for &i in &idx {
                if s[i] <= 0.0 {
                    let den = x[i] - s[i];
                    if den > 0.0 {
                        alpha = alpha.min(x[i] / den);
                    }
                }
            }
            for i in 0..m {
                x[i] += alpha * (s[i] - x[i]);
            }
            for &i in &idx {
                if s[i] <= 0.0 && x[i] <= 1e-15 * (1.0 + x[i].abs()) {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
        }
    }
    x.iter_mut().for_each(|v| *v = v.max(0.0));
    x
}

/// Solve `H_PP s = -g_P` by Cholesky.
fn solve_spd_sub(h: &[f64], g: &[f64], m: usize, idx: &[usize]) -> Vec<f64> {
    let p = idx.len();
    let mut l = vec![0.0f64; p * p];
    for a in 0..p {
        for b in 0..=a {
            let mut s = h[idx[a] * m + idx[b]];
            for c in 0..b {
                s -= l[a * p + c] * l[b * p + c];
            }
            if a == b {
                l[a * p + a] = s.max(1e-300).sqrt();
            } else {
                l[a * p + b] = s / l[b * p + b];
            }
        }
    }
    let mut z = vec![0.0; p];
    for a in 0..p {
        let mut s = -g[idx[a]];
        for c in 0..a {
            s -= l[a * p + c] * z[c];
        }
        z[a] = s / l[a * p + a];
    }
    let mut x = vec![0.0; p];
    for a in (0..p).rev() {
        let mut s = z[a];
        for c in a + 1..p {
            s -= l[c * p + a] * x[c];
        }
        x[a] = s / l[a * p + a];
    }
    x
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProjectionConfig {
    pub tv2_lambda: f64,
    pub dykstra_rounds: usize,
    pub path_steps: usize,
}

impl Default for ProjectionConfig {
    fn default() -> Self {
        Self { tv2_lambda: 0.0, dykstra_rounds: 0, path_steps: 8 }
    }
}

impl ProjectionConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tv2_lambda >= 0.0) {
            return Err(input("tv2_lambda must be nonnegative"));
        }
        if self.path_steps < 1 {
            return Err(input("path_steps must be at least 1"));
        }
        Ok(())
    }
}

/// Node weights of the metric: quadrature times vega weight.
fn metric_weights(grid: &Grid2D, w: &WeightField) -> Vec<f64> {
    grid.quadrature().iter().zip(&w.w).map(|(q, w)| q * w).collect()
}

/// Calendar stage: per strike column, weighted PAV then a floor at zero.
fn project_calendar(x: &[f64], mw: &[f64], nt: usize, nk: usize) -> Vec<f64> {
    let cols = par::map_range(nk, |k| {
        let col: Vec<f64> = (0..nt).map(|t| x[t * nk + k]).collect();
        let cw: Vec<f64> = (0..nt).map(|t| mw[t * nk + k]).collect();
        pav_inc(&col, &cw).into_iter().map(|v| v.max(0.0)).collect::<Vec<f64>>()
    });
    let mut out = vec![0.0; x.len()];
    for (k, col) in cols.iter().enumerate() {
        for t in 0..nt {
            out[t * nk + k] = col[t];
        }
    }
    out
}

/// Convexity stage: per maturity row, exact weighted convex regression.
fn project_convex(x: &[f64], mw: &[f64], strikes: &[f64], nt: usize, nk: usize) -> Vec<f64> {
    let rows = par::map_range(nt, |t| convex_project(&x[t * nk..(t + 1) * nk], &mw[t * nk..(t + 1) * nk], strikes));
    rows.concat()
}

/// Largest calendar decrease `C(t,k) - C(t+1,k)` (0 when monotone).
pub fn calendar_violation(values: &[f64], grid: &Grid2D) -> f64 {
    let nk = grid.n_strikes();
    let mut v = 0.0f64;
    for t in 0..grid.n_maturities() - 1 {
        for k in 0..nk {
            v = v.max(values[t * nk + k] - values[(t + 1) * nk + k]);
        }
    }
    v
}

/// Largest excess of a node value over the chord of its neighbours.
pub fn convexity_violation(values: &[f64], grid: &Grid2D) -> f64 {
    let nk = grid.n_strikes();
    let ks = &grid.strikes;
    let mut v = 0.0f64;
    for t in 0..grid.n_maturities() {
        let r = &values[t * nk..(t + 1) * nk];
        for k in 1..nk - 1 {
            let h0 = ks[k] - ks[k - 1];
            let h1 = ks[k + 1] - ks[k];
            let chord = (h1 * r[k - 1] + h0 * r[k + 1]) / (h0 + h1);
            v = v.max(r[k] - chord);
        }
    }
    v
}

pub fn is_feasible(values: &[f64], grid: &Grid2D, tol: f64) -> bool {
    calendar_violation(values, grid) <= tol
        && convexity_violation(values, grid) <= tol
        && values.iter().all(|v| *v >= -tol)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()))
}

const FEAS_TOL: f64 = 1e-9;
const MAX_SWEEPS: usize = 20_000;

/// Projection onto the arbitrage-free cone.
///
/// With `dykstra_rounds == 0` the calendar and convexity stages are applied
/// in sequence and the composition is iterated to its fixed point, which
/// lies in the cone. With `dykstra_rounds > 0`, Dykstra's corrections are
/// carried between the stages so that the iterates approach the metric
/// projection onto the intersection; a final sequential sweep removes any
/// residual infeasibility left when the round budget runs out.
pub fn project_to_cone(c: &Surface, w: &WeightField, cfg: &ProjectionConfig) -> Result<Surface> {
    let grid = &c.grid;
    if w.len() != grid.len() {
        return Err(dim("weight field does not match surface grid"));
    }
    cfg.validate()?;
    let nt = grid.n_maturities();
    let nk = grid.n_strikes();
    let mw = metric_weights(grid, w);
    let scale = 1.0 + c.values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut x = c.values.clone();

    if cfg.dykstra_rounds > 0 {
        let mut p = vec![0.0; x.len()];
        let mut qv = vec![0.0; x.len()];
        for _ in 0..cfg.dykstra_rounds {
            let xp: Vec<f64> = x.iter().zip(&p).map(|(a, b)| a + b).collect();
            let y = project_calendar(&xp, &mw, nt, nk);
            p = xp.iter().zip(&y).map(|(a, b)| a - b).collect();
            let yq: Vec<f64> = y.iter().zip(&qv).map(|(a, b)| a + b).collect();
            let xn = project_convex(&yq, &mw, &grid.strikes, nt, nk);
            qv = yq.iter().zip(&xn).map(|(a, b)| a - b).collect();
            let change = max_abs_diff(&xn, &x);
            x = xn;
            if change <= 1e-15 * scale {
                break;
            }
        }
    }

    for _ in 0..MAX_SWEEPS {
        let y = project_calendar(&x, &mw, nt, nk);
        let xn = project_convex(&y, &mw, &grid.strikes, nt, nk);
        let change = max_abs_diff(&xn, &x);
        x = xn;
        if change <= 1e-14 * scale && is_feasible(&x, grid, FEAS_TOL * 1e-3) {
            break;
        }
    }

    if cfg.tv2_lambda > 0.0 {
        let smoothed = tv2_smooth(&x, nt, nk, cfg.tv2_lambda);
        if is_feasible(&smoothed, grid, FEAS_TOL * 1e-3) {
            x = smoothed;
        }
    }
    Surface::new(grid.clone(), x)
}

/// A few damped second-difference sweeps along strike.
fn tv2_smooth(x: &[f64], nt: usize, nk: usize, lambda: f64) -> Vec<f64> {
    let a = (lambda / (1.0 + lambda)).min(1.0) * 0.25;
    let mut y = x.to_vec();
    for _ in 0..3 {
        let prev = y.clone();
        for t in 0..nt {
            for k in 1..nk - 1 {
                let i = t * nk + k;
                y[i] = prev[i] + a * (prev[i - 1] - 2.0 * prev[i] + prev[i + 1]);
            }
        }
    }
    y
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionCertificates {
    pub lip_emp: f64,
    pub dup_ok: bool,
    pub dup_tv_path: Vec<f64>,
}

/// Gaussian field scaled to `frac` of the surface's weighted norm.
fn perturbation(c: &Surface, w: &WeightField, frac: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let z: Vec<f64> = (0..c.values.len()).map(|_| StandardNormal.sample(rng)).collect();
    let nz = weighted_norm(&z, w, &c.grid)?;
    let nc = weighted_norm(&c.values, w, &c.grid)?.max(1e-300);
    Ok(z.iter().map(|v| v * frac * nc / nz).collect())
}

/// Empirical Lipschitz ratio over perturbation pairs around `C_raw` and the
/// Dupire total variation along the straight path from `C_raw` to its
/// projection.
pub fn projection_certificates(
    c_raw: &Surface,
    w: &WeightField,
    cfg: &ProjectionConfig,
    fd: &FdConfig,
    trials: usize,
    rng_seed: u64,
) -> Result<ProjectionCertificates> {
    if trials < 1 {
        return Err(input("trials must be at least 1"));
    }
    let grid = &c_raw.grid;
    let ratios = par::map_range(trials, |i| -> Result<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
        rng.set_stream(i as u64 + 1);
        let d1 = perturbation(c_raw, w, 0.01, &mut rng)?;
        let d2 = perturbation(c_raw, w, 0.01, &mut rng)?;
        let den = weighted_dist(&d1, &d2, w, grid)?;
        if den == 0.0 {
            return Ok(0.0);
        }
        let a = Surface::new(grid.clone(), c_raw.values.iter().zip(&d1).map(|(c, d)| c + d).collect())?;
        let b = Surface::new(grid.clone(), c_raw.values.iter().zip(&d2).map(|(c, d)| c + d).collect())?;
        let pa = project_to_cone(&a, w, cfg)?;
        let pb = project_to_cone(&b, w, cfg)?;
        Ok(weighted_dist(&pa.values, &pb.values, w, grid)? / den)
    });
    let mut lip_emp = 0.0f64;
    for r in ratios {
        lip_emp = lip_emp.max(r?);
    }
    let target = project_to_cone(c_raw, w, cfg)?;
    let steps = cfg.path_steps;
    let mut dup_tv_path = Vec::with_capacity(steps + 1);
    for t in 0..=steps {
        let s = t as f64 / steps as f64;
        let v: Vec<f64> = c_raw.values.iter().zip(&target.values).map(|(a, b)| (1.0 - s) * a + s * b).collect();
        let surf = Surface::new(grid.clone(), v)?;
        let field = dupire_field(&surf, grid, fd)?;
        dup_tv_path.push(dupire_total_variation(&field, w, grid)?);
    }
    let dup_ok = dup_tv_path.windows(2).all(|p| p[1] <= p[0] + 1e-9);
    Ok(ProjectionCertificates { lip_emp, dup_ok, dup_tv_path })
}
