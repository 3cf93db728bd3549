//! Tri-marginal entropic transport with a linear martingale constraint.
//!
//! The coupling of three adjacent maturity slices has Gibbs form
//!
//! ```text
//! pi_ijk = m1_i m2_j m3_k exp(lu_i + lv_j + lw_k - (c12_ij + c23_jk + eta * g_ijk) / eps)
//! g_ijk  = x_j - (x_i + x_k) / 2 - drift
//! ```
//!
//! Because the cost is separable and `g` is affine in each coordinate, the
//! coupling is a chain `a_i K12_ij b_j K23_jk c_k` and every marginal or
//! first/second moment of `g` is an O(n^2) log-sum-exp reduction. The full
//! 3-tensor is never formed by the solver.
//!
//! `eta` is identifiable only up to a gauge: shifting `eta` by `s` and the
//! potentials by affine functions of `x` leaves the coupling unchanged. After
//! solving we fix the gauge so that the `m2` potential is orthogonal to the
//! exponential-tilt direction `m2 * (x - mean)`; in that gauge a shift of the
//! drift by `delta` (with `m2` tilted to stay feasible) moves the optimal value
//! by `-eta * delta` to first order.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{dim, input, Error, Result};
use crate::linalg;

/// PASS band for the KKT residual (4! * 1e-2).
pub const KKT_BAND: f64 = 0.24;
/// PASS band for the geometric ratio.
pub const RGEO_BAND: f64 = 1.05;
/// PASS band for the strong-convexity proxy.
pub const MU_BAND: (f64, f64) = (1e-4, 1e-1);
/// Safety floor applied to the strong-convexity proxy.
pub const MU_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Dense,
    Nystrom,
    Rff,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostKind {
    /// `c(x, y) = (x - y)^2 / 2`.
    HalfSquared,
    Custom,
}

#[derive(Debug, Clone)]
pub struct TriMarginalProblem {
    pub x: Vec<f64>,
    pub m1: Vec<f64>,
    pub m2: Vec<f64>,
    pub m3: Vec<f64>,
    pub c12: DMatrix<f64>,
    pub c23: DMatrix<f64>,
    pub cost_kind: CostKind,
    pub epsilon_schedule: Vec<f64>,
    pub rank: Option<usize>,
    pub feature_kind: FeatureKind,
    /// Right-hand side of the averaged martingale constraint.
    pub drift: f64,
    pub seed: u64,
}

pub fn half_squared_cost(x: &[f64]) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| 0.5 * (x[i] - x[j]).powi(2))
}

fn check_marginal(m: &[f64], n: usize, name: &str) -> Result<()> {
    if m.len() != n {
        return Err(dim(format!("{name} has length {}, grid has {n}", m.len())));
    }
    if m.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(input(format!("{name} must be finite and nonnegative")));
    }
    let s: f64 = m.iter().sum();
    if (s - 1.0).abs() > 1e-12 {
        return Err(input(format!("{name} sums to {s}, expected 1")));
    }
    Ok(())
}

impl TriMarginalProblem {
    /// Problem on a shared grid with half-squared-distance costs and dense kernels.
    pub fn new(x: Vec<f64>, m1: Vec<f64>, m2: Vec<f64>, m3: Vec<f64>, epsilon_schedule: Vec<f64>) -> Result<Self> {
        let c = half_squared_cost(&x);
        let p = Self {
            x,
            m1,
            m2,
            m3,
            c12: c.clone(),
            c23: c,
            cost_kind: CostKind::HalfSquared,
            epsilon_schedule,
            rank: None,
            feature_kind: FeatureKind::Dense,
            drift: 0.0,
            seed: 0,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn with_cost(mut self, c12: DMatrix<f64>, c23: DMatrix<f64>) -> Result<Self> {
        self.c12 = c12;
        self.c23 = c23;
        self.cost_kind = CostKind::Custom;
        self.validate()?;
        Ok(self)
    }

    pub fn with_features(mut self, kind: FeatureKind, rank: Option<usize>, seed: u64) -> Result<Self> {
        self.feature_kind = kind;
        self.rank = rank;
        self.seed = seed;
        self.validate()?;
        Ok(self)
    }

    pub fn with_drift(mut self, drift: f64) -> Self {
        self.drift = drift;
        self
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.len();
        if n == 0 {
            return Err(dim("empty state grid"));
        }
        if self.x.iter().any(|v| !v.is_finite()) || self.x.windows(2).any(|p| p[1] <= p[0]) {
            return Err(input("state grid must be finite and strictly increasing"));
        }
        check_marginal(&self.m1, n, "m1")?;
        check_marginal(&self.m2, n, "m2")?;
        check_marginal(&self.m3, n, "m3")?;
        for (c, name) in [(&self.c12, "c12"), (&self.c23, "c23")] {
            if c.nrows() != n || c.ncols() != n {
                return Err(dim(format!("{name} must be {n}x{n}")));
            }
            if c.iter().any(|v| !v.is_finite()) {
                return Err(input(format!("{name} contains non-finite entries")));
            }
        }
        let e = &self.epsilon_schedule;
        if e.is_empty() || e.iter().any(|v| !(v.is_finite() && *v > 0.0)) || e.windows(2).any(|p| p[1] >= p[0]) {
            return Err(input("epsilon schedule must be positive and strictly decreasing"));
        }
        if let Some(r) = self.rank {
            if r == 0 {
                return Err(input("rank must be positive"));
            }
            if r > n {
                return Err(dim(format!("rank {r} exceeds grid size {n}")));
            }
        }
        if self.feature_kind == FeatureKind::Rff && self.cost_kind != CostKind::HalfSquared {
            return Err(input("random features require the half-squared cost"));
        }
        if self.feature_kind == FeatureKind::Nystrom && !(is_symmetric(&self.c12) && is_symmetric(&self.c23)) {
            return Err(input("Nystrom factors require symmetric costs"));
        }
        Ok(())
    }
}

fn is_symmetric(c: &DMatrix<f64>) -> bool {
    (0..c.nrows()).all(|i| (0..i).all(|j| (c[(i, j)] - c[(j, i)]).abs() <= 1e-12 * (1.0 + c[(i, j)].abs())))
}

/// Kernels for one value of epsilon.
#[derive(Debug, Clone)]
pub struct KernelStage {
    pub eps: f64,
    pub log_k12: DMatrix<f64>,
    pub log_k23: DMatrix<f64>,
    /// Whitened feature matrices (identity in dense mode).
    pub feat12: DMatrix<f64>,
    pub feat23: DMatrix<f64>,
    /// Scale such that `K ~ scale * feat feat^T`.
    pub scale12: f64,
    pub scale23: f64,
    /// Spectral-norm error of the factorization.
    pub delta12: f64,
    pub delta23: f64,
}

impl KernelStage {
    pub fn delta(&self) -> f64 {
        self.delta12.max(self.delta23)
    }
}

#[derive(Debug, Clone)]
pub struct BridgeKernels {
    pub stages: Vec<KernelStage>,
}

impl BridgeKernels {
    pub fn delta(&self) -> f64 {
        self.stages.last().map(|s| s.delta()).unwrap_or(0.0)
    }
}

/// Divide a factor so that its leading Gram eigenvalue is one, dropping
/// directions below `1e-10` of the top singular value. Returns the factor and
/// the removed scale.
pub fn whiten(phi: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let svd = phi.clone().svd(true, true);
    let s = &svd.singular_values;
    let top = s.iter().cloned().fold(0.0, f64::max);
    if top == 0.0 {
        return (phi.clone(), 1.0);
    }
    let u = svd.u.as_ref().unwrap();
    let vt = svd.v_t.as_ref().unwrap();
    let mut clipped = s.clone();
    clipped.iter_mut().for_each(|v| {
        if *v < 1e-10 * top {
            *v = 0.0
        }
    });
    let out = u * DMatrix::from_diagonal(&clipped) * vt / top;
    (out, top * top)
}

fn landmarks(n: usize, r: usize) -> Vec<usize> {
    if r == 1 {
        return vec![n / 2];
    }
    (0..r).map(|i| ((i * (n - 1)) as f64 / (r - 1) as f64).round() as usize).collect()
}

/// Nystrom factor `C W^{-1/2}` from evenly spaced landmark columns.
pub fn nystrom_factor(k: &DMatrix<f64>, rank: usize) -> Result<DMatrix<f64>> {
    let n = k.nrows();
    if rank == 0 || rank > n {
        return Err(dim(format!("rank {rank} outside 1..={n}")));
    }
    let idx = landmarks(n, rank);
    let c = DMatrix::from_fn(n, rank, |i, j| k[(i, idx[j])]);
    let w = DMatrix::from_fn(rank, rank, |i, j| 0.5 * (k[(idx[i], idx[j])] + k[(idx[j], idx[i])]));
    let eig = w.symmetric_eigen();
    let top = eig.eigenvalues.iter().cloned().fold(0.0, f64::max);
    let inv_sqrt = eig.eigenvalues.map(|l| if l > 1e-10 * top && l > 0.0 { 1.0 / l.sqrt() } else { 0.0 });
    let w_is = &eig.eigenvectors * DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();
    Ok(c * w_is)
}

/// Random Fourier features for `exp(-(x - y)^2 / (2 eps))`. Frequencies are
/// drawn in orthogonalized blocks: in one dimension each block is a single
/// Gaussian draw, so the block QR reduces to a norm-preserving sign.
pub fn rff_factor(x: &[f64], eps: f64, m: usize, seed: u64, stream: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let scale = 1.0 / eps.sqrt();
    let phase = Uniform::new(0.0, std::f64::consts::TAU).unwrap();
    let mut omega = Vec::with_capacity(m);
    let mut b = Vec::with_capacity(m);
    for _ in 0..m {
        let g: f64 = StandardNormal.sample(&mut rng);
        // QR of the 1x1 block [g] is (sign g) * |g|; rows are rescaled by the chi norm |g|.
        let q = g.signum();
        omega.push(q * g.abs() * scale);
        b.push(phase.sample(&mut rng));
    }
    let norm = (2.0 / m as f64).sqrt();
    DMatrix::from_fn(x.len(), m, |i, l| norm * (omega[l] * x[i] + b[l]).cos())
}

const LOG_FLOOR: f64 = 1e-300;

fn stage_factor(
    cost: &DMatrix<f64>,
    problem: &TriMarginalProblem,
    eps: f64,
    stream: u64,
) -> Result<(DMatrix<f64>, DMatrix<f64>, f64, f64)> {
    let n = problem.n();
    let k = cost.map(|c| (-c / eps).exp());
    match problem.feature_kind {
        FeatureKind::Dense => Ok((cost.map(|c| -c / eps), DMatrix::identity(n, n), 1.0, 0.0)),
        kind => {
            let r = problem.rank.unwrap_or(n);
            let phi = if kind == FeatureKind::Nystrom {
                nystrom_factor(&k, r)?
            } else {
                rff_factor(&problem.x, eps, r, problem.seed, stream)
            };
            let (feat, scale) = whiten(&phi);
            let approx = &feat * feat.transpose() * scale;
            let delta = linalg::spectral_norm(&(&k - &approx), 200);
            let log_k = approx.map(|v| v.max(LOG_FLOOR).ln());
            Ok((log_k, feat, scale, delta))
        }
    }
}

/// Build the kernels for every epsilon in the schedule.
pub fn build_bridge(problem: &TriMarginalProblem) -> Result<BridgeKernels> {
    problem.validate()?;
    let mut stages = vec![];
    for (s, &eps) in problem.epsilon_schedule.iter().enumerate() {
        let (log_k12, feat12, scale12, delta12) = stage_factor(&problem.c12, problem, eps, 2 * s as u64 + 1)?;
        let (log_k23, feat23, scale23, delta23) = if problem.c23 == problem.c12 {
            (log_k12.clone(), feat12.clone(), scale12, delta12)
        } else {
            stage_factor(&problem.c23, problem, eps, 2 * s as u64 + 2)?
        };
        stages.push(KernelStage { eps, log_k12, log_k23, feat12, feat23, scale12, scale23, delta12, delta23 });
    }
    Ok(BridgeKernels { stages })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub tol: f64,
    pub t_max: usize,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub ridge: f64,
    pub rebalance_rounds: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { tol: 1e-10, t_max: 20_000, gamma_min: 0.1, gamma_max: 1.0, ridge: 1e-8, rebalance_rounds: 200 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) || self.t_max == 0 {
            return Err(Error::Parameter("tol must be positive and t_max nonzero".into()));
        }
        if !(self.gamma_min > 0.0 && self.gamma_min <= self.gamma_max && self.gamma_max <= 1.0) {
            return Err(Error::Parameter("damping bounds must satisfy 0 < gamma_min <= gamma_max <= 1".into()));
        }
        if !(self.ridge >= 0.0) {
            return Err(Error::Parameter("ridge must be nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TraceEntry {
    pub stage: usize,
    pub eps: f64,
    pub iteration: usize,
    /// Largest marginal sup-error.
    pub residual: f64,
    pub kkt: f64,
    pub dual: f64,
    pub damping: f64,
    pub eta: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BridgeState {
    pub log_u: Vec<f64>,
    pub log_v: Vec<f64>,
    pub log_w: Vec<f64>,
    pub eta: f64,
    pub residual_trace: Vec<TraceEntry>,
    pub damping: f64,
    /// Index of the kernel stage the potentials refer to.
    pub stage: usize,
    /// Terminal KKT of each epsilon stage.
    pub stage_kkt: Vec<f64>,
    pub fallbacks_taken: Vec<String>,
    pub converged: bool,
}

impl BridgeState {
    pub fn zeros(n: usize) -> Self {
        Self {
            log_u: vec![0.0; n],
            log_v: vec![0.0; n],
            log_w: vec![0.0; n],
            eta: 0.0,
            residual_trace: vec![],
            damping: 1.0,
            stage: 0,
            stage_kkt: vec![],
            fallbacks_taken: vec![],
            converged: false,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CertificateSet {
    pub kkt: f64,
    pub kkt_components: [f64; 4],
    pub r_geo: f64,
    /// Median ratio over the last 10 iterations only.
    pub r_geo_last10: f64,
    /// 10% and 90% quantiles of the tail ratios.
    pub r_geo_iqr: [f64; 2],
    pub mu_hat: f64,
    pub iterations: usize,
    pub epsilon_final: f64,
    pub delta: f64,
}

impl CertificateSet {
    pub fn kkt_pass(&self) -> bool {
        self.kkt <= KKT_BAND
    }
    pub fn r_geo_pass(&self) -> bool {
        self.r_geo <= RGEO_BAND
    }
    pub fn mu_pass(&self) -> bool {
        self.mu_hat >= MU_BAND.0 && self.mu_hat <= MU_BAND.1
    }
    pub fn pass(&self) -> bool {
        self.kkt_pass() && self.r_geo_pass() && self.mu_pass()
    }
}

fn lse(it: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = it.collect();
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn ln_or_ninf(v: f64) -> f64 {
    if v > 0.0 {
        v.ln()
    } else {
        f64::NEG_INFINITY
    }
}

/// Log-domain evaluator for one problem and kernel stage.
struct Chain<'a> {
    p: &'a TriMarginalProblem,
    k: &'a KernelStage,
    lm1: Vec<f64>,
    lm2: Vec<f64>,
    lm3: Vec<f64>,
}

struct Moments {
    lp2: Vec<f64>,
    /// Per-j conditional mean of g and its conditional variance.
    gbar: Vec<f64>,
    gvar: Vec<f64>,
}

impl<'a> Chain<'a> {
    fn new(p: &'a TriMarginalProblem, k: &'a KernelStage) -> Self {
        Self {
            p,
            k,
            lm1: p.m1.iter().map(|v| ln_or_ninf(*v)).collect(),
            lm2: p.m2.iter().map(|v| ln_or_ninf(*v)).collect(),
            lm3: p.m3.iter().map(|v| ln_or_ninf(*v)).collect(),
        }
    }

    fn la(&self, s: &BridgeState, eta: f64) -> Vec<f64> {
        let e = self.k.eps;
        (0..self.p.n()).map(|i| self.lm1[i] + s.log_u[i] + eta * (0.5 * self.p.x[i] + self.p.drift) / e).collect()
    }

    fn lb(&self, s: &BridgeState, eta: f64) -> Vec<f64> {
        let e = self.k.eps;
        (0..self.p.n()).map(|j| self.lm2[j] + s.log_v[j] - eta * self.p.x[j] / e).collect()
    }

    fn lc(&self, s: &BridgeState, eta: f64) -> Vec<f64> {
        let e = self.k.eps;
        (0..self.p.n()).map(|k| self.lm3[k] + s.log_w[k] + eta * 0.5 * self.p.x[k] / e).collect()
    }

    /// `alpha_j = lse_i(la_i + lk12_ij)`.
    fn alpha(&self, la: &[f64]) -> Vec<f64> {
        let n = self.p.n();
        (0..n).map(|j| lse((0..n).map(|i| la[i] + self.k.log_k12[(i, j)]))).collect()
    }

    /// `gamma_j = lse_k(lk23_jk + lc_k)`.
    fn gamma(&self, lc: &[f64]) -> Vec<f64> {
        let n = self.p.n();
        (0..n).map(|j| lse((0..n).map(|k| self.k.log_k23[(j, k)] + lc[k]))).collect()
    }

    fn log_p1(&self, s: &BridgeState) -> Vec<f64> {
        let n = self.p.n();
        let la = self.la(s, s.eta);
        let lb = self.lb(s, s.eta);
        let g = self.gamma(&self.lc(s, s.eta));
        (0..n).map(|i| la[i] + lse((0..n).map(|j| self.k.log_k12[(i, j)] + lb[j] + g[j]))).collect()
    }

    fn log_p2(&self, s: &BridgeState) -> Vec<f64> {
        let lb = self.lb(s, s.eta);
        let a = self.alpha(&self.la(s, s.eta));
        let g = self.gamma(&self.lc(s, s.eta));
        (0..self.p.n()).map(|j| lb[j] + a[j] + g[j]).collect()
    }

    fn log_p3(&self, s: &BridgeState) -> Vec<f64> {
        let n = self.p.n();
        let lc = self.lc(s, s.eta);
        let lb = self.lb(s, s.eta);
        let a = self.alpha(&self.la(s, s.eta));
        (0..n).map(|k| lc[k] + lse((0..n).map(|j| self.k.log_k23[(j, k)] + lb[j] + a[j]))).collect()
    }

    /// Conditional moments of g given the middle coordinate, at multiplier `eta`.
    fn moments(&self, s: &BridgeState, eta: f64) -> Moments {
        let n = self.p.n();
        let x = &self.p.x;
        let la = self.la(s, eta);
        let lb = self.lb(s, eta);
        let lc = self.lc(s, eta);
        let mut lp2 = vec![f64::NEG_INFINITY; n];
        let mut gbar = vec![0.0; n];
        let mut gvar = vec![0.0; n];
        for j in 0..n {
            let ti: Vec<f64> = (0..n).map(|i| la[i] + self.k.log_k12[(i, j)]).collect();
            let tk: Vec<f64> = (0..n).map(|k| self.k.log_k23[(j, k)] + lc[k]).collect();
            let ai = lse(ti.iter().cloned());
            let ck = lse(tk.iter().cloned());
            if ai == f64::NEG_INFINITY || ck == f64::NEG_INFINITY || lb[j] == f64::NEG_INFINITY {
                continue;
            }
            lp2[j] = lb[j] + ai + ck;
            let (mut ei, mut ei2, mut ek, mut ek2) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                let p = (ti[i] - ai).exp();
                ei += p * x[i];
                ei2 += p * x[i] * x[i];
            }
            for k in 0..n {
                let p = (tk[k] - ck).exp();
                ek += p * x[k];
                ek2 += p * x[k] * x[k];
            }
            gbar[j] = x[j] - 0.5 * (ei + ek) - self.p.drift;
            gvar[j] = 0.25 * ((ei2 - ei * ei).max(0.0) + (ek2 - ek * ek).max(0.0));
        }
        Moments { lp2, gbar, gvar }
    }

    /// Martingale violation `sum pi g` and its derivative in `eta`.
    fn violation(&self, s: &BridgeState, eta: f64) -> (f64, f64) {
        let m = self.moments(s, eta);
        let mut f = 0.0;
        let mut g2 = 0.0;
        for j in 0..self.p.n() {
            let p = m.lp2[j].exp();
            f += p * m.gbar[j];
            g2 += p * (m.gbar[j] * m.gbar[j] + m.gvar[j]);
        }
        (f, -g2 / self.k.eps)
    }

    /// Safeguarded Newton for the root of the violation on `[eta - 50 eps, eta + 50 eps]`.
    fn eta_step(&self, s: &BridgeState) -> f64 {
        let e = self.k.eps;
        let (mut lo, mut hi) = (s.eta - 50.0 * e, s.eta + 50.0 * e);
        let (f0, _) = self.violation(s, s.eta);
        if f0 == 0.0 {
            return s.eta;
        }
        // The violation is nonincreasing in eta.
        let (flo, _) = self.violation(s, lo);
        let (fhi, _) = self.violation(s, hi);
        if flo <= 0.0 {
            return lo;
        }
        if fhi >= 0.0 {
            return hi;
        }
        let mut eta = s.eta;
        for _ in 0..100 {
            let (f, df) = self.violation(s, eta);
            if f.abs() <= 1e-15 {
                break;
            }
            if f > 0.0 {
                lo = eta;
            } else {
                hi = eta;
            }
            let newton = if df < 0.0 { eta - f / df } else { f64::NAN };
            let next = if newton.is_finite() && newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
            if (next - eta).abs() <= 1e-15 * (1.0 + eta.abs()) {
                eta = next;
                break;
            }
            eta = next;
        }
        eta
    }

    /// Marginal errors, martingale violation and mass of the implied coupling.
    fn residuals(&self, s: &BridgeState) -> ([f64; 4], f64) {
        let sup = |lp: &[f64], m: &[f64]| lp.iter().zip(m).map(|(l, m)| (l.exp() - m).abs()).fold(0.0, f64::max);
        let lp1 = self.log_p1(s);
        let lp3 = self.log_p3(s);
        let mo = self.moments(s, s.eta);
        let mut viol = 0.0;
        let mut mass = 0.0;
        for j in 0..self.p.n() {
            let p = mo.lp2[j].exp();
            viol += p * mo.gbar[j];
            mass += p;
        }
        (
            [sup(&lp1, &self.p.m1), sup(&mo.lp2, &self.p.m2), sup(&lp3, &self.p.m3), viol.abs()],
            mass,
        )
    }

    fn dual(&self, s: &BridgeState) -> f64 {
        let e = self.k.eps;
        let lin = |m: &[f64], l: &[f64]| m.iter().zip(l).filter(|(m, _)| **m > 0.0).map(|(m, l)| m * l).sum::<f64>();
        let mass: f64 = self.log_p2(s).iter().map(|v| v.exp()).sum();
        e * (lin(&self.p.m1, &s.log_u) + lin(&self.p.m2, &s.log_v) + lin(&self.p.m3, &s.log_w)) - e * mass + e
    }

    fn primal(&self, s: &BridgeState) -> f64 {
        let e = self.k.eps;
        let lin = |lp: &[f64], l: &[f64]| lp.iter().zip(l).map(|(p, l)| if *p == f64::NEG_INFINITY { 0.0 } else { p.exp() * l }).sum::<f64>();
        let mo = self.moments(s, s.eta);
        let (mut mass, mut mg) = (0.0, 0.0);
        for j in 0..self.p.n() {
            let p = mo.lp2[j].exp();
            mass += p;
            mg += p * mo.gbar[j];
        }
        e * (lin(&self.log_p1(s), &s.log_u) + lin(&mo.lp2, &s.log_v) + lin(&self.log_p3(s), &s.log_w)) - s.eta * mg - e * mass + e
    }

    /// One damped sweep over the three scalings followed by the eta step.
    fn sweep(&self, s: &mut BridgeState, gamma: f64) {
        let upd = |l: &mut [f64], lm: &[f64], lp: &[f64]| {
            for i in 0..l.len() {
                if lm[i].is_finite() && lp[i].is_finite() {
                    l[i] += gamma * (lm[i] - lp[i]);
                }
            }
        };
        let lp = self.log_p1(s);
        upd(&mut s.log_u, &self.lm1, &lp);
        let lp = self.log_p2(s);
        upd(&mut s.log_v, &self.lm2, &lp);
        let lp = self.log_p3(s);
        upd(&mut s.log_w, &self.lm3, &lp);
        s.eta = self.eta_step(s);
    }
}

/// Rescale potentials when moving to a new epsilon so that `eps * log u` is kept.
fn rescale(s: &mut BridgeState, from: f64, to: f64) {
    let r = from / to;
    for l in [&mut s.log_u, &mut s.log_v, &mut s.log_w] {
        l.iter_mut().for_each(|v| *v *= r);
    }
}

/// Fix the eta gauge: the m2 potential becomes orthogonal to `m2 * (x - mean)`.
fn canonicalize(s: &mut BridgeState, p: &TriMarginalProblem, eps: f64) {
    let mean: f64 = p.m2.iter().zip(&p.x).map(|(m, x)| m * x).sum();
    let d: Vec<f64> = p.m2.iter().zip(&p.x).map(|(m, x)| m * (x - mean)).collect();
    let xd: f64 = d.iter().zip(&p.x).map(|(d, x)| d * x).sum();
    if xd <= 1e-300 {
        return;
    }
    let phi_d: f64 = d.iter().zip(&s.log_v).map(|(d, l)| d * eps * l).sum();
    let sh = -phi_d / xd;
    s.eta += sh;
    for i in 0..p.n() {
        s.log_v[i] += sh * p.x[i] / eps;
        s.log_u[i] -= sh * (0.5 * p.x[i] + p.drift) / eps;
        s.log_w[i] -= sh * 0.5 * p.x[i] / eps;
    }
}

struct StageOutcome {
    kkt: f64,
}

fn run_stage(
    s: &mut BridgeState,
    p: &TriMarginalProblem,
    kernels: &BridgeKernels,
    stage: usize,
    cfg: &SolverConfig,
    iters: usize,
    adapt: bool,
) -> StageOutcome {
    let k = &kernels.stages[stage];
    if s.stage != stage {
        rescale(s, kernels.stages[s.stage].eps, k.eps);
        s.stage = stage;
    }
    let chain = Chain::new(p, k);
    let mut gamma = s.damping;
    let mut increases = 0;
    let mut history: Vec<f64> = vec![];
    let mut kkt = f64::INFINITY;
    for t in 0..iters {
        chain.sweep(s, gamma);
        let (comp, _) = chain.residuals(s);
        let res = comp[0].max(comp[1]).max(comp[2]);
        kkt = res.max(comp[3]);
        s.residual_trace.push(TraceEntry {
            stage,
            eps: k.eps,
            iteration: t + 1,
            residual: res,
            kkt,
            dual: chain.dual(s),
            damping: gamma,
            eta: s.eta,
        });
        if kkt <= cfg.tol || !kkt.is_finite() {
            break;
        }
        if let Some(&prev) = history.last() {
            if res > prev {
                increases += 1;
                if adapt && increases >= 2 {
                    gamma = (gamma / 1.5).max(cfg.gamma_min);
                    increases = 0;
                }
            } else {
                increases = 0;
            }
        }
        history.push(res);
        if history.len() > 5 {
            let old = history[history.len() - 6];
            if res > (1.0 - 1e-3) * old {
                if adapt && gamma < cfg.gamma_max {
                    gamma = (gamma * 1.5).min(cfg.gamma_max);
                } else {
                    break;
                }
            }
        }
    }
    s.damping = gamma;
    StageOutcome { kkt }
}

/// Log-domain tri-Sinkhorn along the epsilon path with warm starts, adaptive
/// damping, eta rebalancing and fallbacks. A run that misses `cfg.tol` is
/// reported through `converged = false` and the full trace, not as an error.
pub fn tri_sinkhorn(
    problem: &TriMarginalProblem,
    kernels: &BridgeKernels,
    cfg: &SolverConfig,
) -> Result<(BridgeState, CertificateSet)> {
    cfg.validate()?;
    problem.validate()?;
    if kernels.stages.len() != problem.epsilon_schedule.len() {
        return Err(dim("kernel stages do not match the epsilon schedule"));
    }
    let n = problem.n();
    let mut s = BridgeState::zeros(n);
    s.damping = cfg.gamma_max;
    let last = kernels.stages.len() - 1;
    for stage in 0..=last {
        let out = run_stage(&mut s, problem, kernels, stage, cfg, cfg.t_max, true);
        s.stage_kkt.push(out.kkt);
    }
    let mut kkt = *s.stage_kkt.last().unwrap();
    if kkt > cfg.tol {
        s.fallbacks_taken.push("rebalance".into());
        kkt = run_stage(&mut s, problem, kernels, last, cfg, cfg.rebalance_rounds, false).kkt;
    }
    if kkt > cfg.tol {
        s.fallbacks_taken.push("damping".into());
        s.damping = cfg.gamma_max;
        kkt = run_stage(&mut s, problem, kernels, last, cfg, cfg.t_max, true).kkt;
    }
    if kkt > cfg.tol && last > 0 {
        s.fallbacks_taken.push("eps_backtrack".into());
        run_stage(&mut s, problem, kernels, last - 1, cfg, cfg.t_max, true);
        kkt = run_stage(&mut s, problem, kernels, last, cfg, cfg.t_max, true).kkt;
    }
    s.converged = kkt <= cfg.tol;
    canonicalize(&mut s, problem, kernels.stages[last].eps);
    let mut cert = match certify(&s, problem, kernels, cfg.ridge) {
        Ok(c) => c,
        Err(Error::InsufficientData(_)) => {
            let (kkt, comp) = kkt_residual(&s, problem, kernels)?;
            CertificateSet {
                kkt,
                kkt_components: comp,
                r_geo: 0.0,
                r_geo_last10: 0.0,
                r_geo_iqr: [0.0, 0.0],
                mu_hat: mu_hat(&kernels.stages[last], problem, cfg.ridge),
                iterations: s.residual_trace.len(),
                epsilon_final: kernels.stages[last].eps,
                delta: kernels.delta(),
            }
        }
        Err(e) => return Err(e),
    };
    cert.iterations = s.residual_trace.len();
    Ok((s, cert))
}

fn stage_of<'a>(state: &BridgeState, problem: &TriMarginalProblem, kernels: &'a BridgeKernels) -> Result<&'a KernelStage> {
    let n = problem.n();
    if state.log_u.len() != n || state.log_v.len() != n || state.log_w.len() != n {
        return Err(dim("state shape does not match problem"));
    }
    kernels.stages.get(state.stage).ok_or_else(|| dim("state refers to a missing kernel stage"))
}

/// Marginal sup-errors and martingale violation of the implied coupling.
pub fn kkt_residual(state: &BridgeState, problem: &TriMarginalProblem, kernels: &BridgeKernels) -> Result<(f64, [f64; 4])> {
    let k = stage_of(state, problem, kernels)?;
    let (comp, _) = Chain::new(problem, k).residuals(state);
    Ok((comp.iter().cloned().fold(0.0, f64::max), comp))
}

/// Marginals of the implied coupling.
pub fn marginals(state: &BridgeState, problem: &TriMarginalProblem, kernels: &BridgeKernels) -> Result<[Vec<f64>; 3]> {
    let k = stage_of(state, problem, kernels)?;
    let c = Chain::new(problem, k);
    let ex = |v: Vec<f64>| v.into_iter().map(f64::exp).collect::<Vec<_>>();
    Ok([ex(c.log_p1(state)), ex(c.log_p2(state)), ex(c.log_p3(state))])
}

/// Full coupling tensor, indexed `(i * n + j) * n + k`. Intended for small grids.
pub fn coupling(state: &BridgeState, problem: &TriMarginalProblem, kernels: &BridgeKernels) -> Result<Vec<f64>> {
    let k = stage_of(state, problem, kernels)?;
    let c = Chain::new(problem, k);
    let n = problem.n();
    let (la, lb, lc) = (c.la(state, state.eta), c.lb(state, state.eta), c.lc(state, state.eta));
    let mut out = vec![0.0; n * n * n];
    for i in 0..n {
        for j in 0..n {
            for kk in 0..n {
                out[(i * n + j) * n + kk] = (la[i] + k.log_k12[(i, j)] + lb[j] + k.log_k23[(j, kk)] + lc[kk]).exp();
            }
        }
    }
    Ok(out)
}

/// Entropic dual objective at the current potentials. The constant `eps`
/// (the mass of the reference product measure) is included so that the dual
/// and primal values coincide at the optimum.
pub fn dual_value(state: &BridgeState, problem: &TriMarginalProblem, kernels: &BridgeKernels) -> Result<f64> {
    let k = stage_of(state, problem, kernels)?;
    Ok(Chain::new(problem, k).dual(state))
}

/// Primal objective `<c, pi> + eps KL(pi | m1 x m2 x m3)` of the implied
/// coupling, using the cost implied by the kernels.
pub fn primal_value(state: &BridgeState, problem: &TriMarginalProblem, kernels: &BridgeKernels) -> Result<f64> {
    let k = stage_of(state, problem, kernels)?;
    Ok(Chain::new(problem, k).primal(state))
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Median of adjacent ratios over the last `window` ratios, with the 10%/90% quantiles.
pub fn geometric_ratio(residuals: &[f64], window: Option<usize>) -> Result<(f64, [f64; 2])> {
    if residuals.len() < 2 {
        return Err(Error::InsufficientData("residual trace needs at least two entries".into()));
    }
    let ratios: Vec<f64> = residuals
        .windows(2)
        .filter(|p| p[0] > 0.0)
        .map(|p| p[1] / p[0])
        .collect();
    if ratios.is_empty() {
        return Err(Error::InsufficientData("residual trace has no positive entries".into()));
    }
    let w = window.unwrap_or_else(|| 10usize.max((ratios.len() as f64 * 0.1).ceil() as usize)).min(ratios.len());
    let mut tail = ratios[ratios.len() - w..].to_vec();
    tail.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok((quantile(&tail, 0.5), [quantile(&tail, 0.1), quantile(&tail, 0.9)]))
}

/// Smallest eigenvalue of `feat12^T D(m1) feat12 + feat23^T D(m3) feat23 + ridge I`, floored.
pub fn mu_hat(stage: &KernelStage, problem: &TriMarginalProblem, ridge: f64) -> f64 {
    let gram = |f: &DMatrix<f64>, m: &[f64]| {
        let dm = DMatrix::from_fn(f.nrows(), f.ncols(), |i, j| m[i] * f[(i, j)]);
        f.transpose() * dm
    };
    let g12 = gram(&stage.feat12, &problem.m1);
    let g23 = gram(&stage.feat23, &problem.m3);
    let r = g12.nrows();
    let mut g = if g23.nrows() == r { g12 + g23 } else { g12 };
    for i in 0..r {
        g[(i, i)] += ridge;
    }
    linalg::power_min_sym(&g, 2000).max(MU_FLOOR)
}

/// KKT, geometric ratio and strong-convexity proxy for a solved state.
pub fn certify(state: &BridgeState, problem: &TriMarginalProblem, kernels: &BridgeKernels, ridge: f64) -> Result<CertificateSet> {
    let k = stage_of(state, problem, kernels)?;
    let res: Vec<f64> = state.residual_trace.iter().map(|t| t.residual).collect();
    let (r_geo, iqr) = geometric_ratio(&res, None)?;
    let (r10, _) = geometric_ratio(&res, Some(10))?;
    let (kkt, comp) = kkt_residual(state, problem, kernels)?;
    Ok(CertificateSet {
        kkt,
        kkt_components: comp,
        r_geo,
        r_geo_last10: r10,
        r_geo_iqr: iqr,
        mu_hat: mu_hat(k, problem, ridge),
        iterations: state.residual_trace.len(),
        epsilon_final: k.eps,
        delta: kernels.delta(),
    })
}

/// Exponentially tilt `m` so that its mean on `x` equals `target`.
pub fn tilt_to_mean(m: &[f64], x: &[f64], target: f64) -> Result<Vec<f64>> {
    let lo = x.iter().zip(m).filter(|(_, m)| **m > 0.0).map(|(x, _)| *x).fold(f64::INFINITY, f64::min);
    let hi = x.iter().zip(m).filter(|(_, m)| **m > 0.0).map(|(x, _)| *x).fold(f64::NEG_INFINITY, f64::max);
    if !(target > lo && target < hi) {
        return Err(input(format!("target mean {target} outside the support [{lo}, {hi}]")));
    }
    let xc = 0.5 * (lo + hi);
    let tilted = |t: f64| -> (Vec<f64>, f64, f64) {
        let lw: Vec<f64> = m.iter().zip(x).map(|(m, x)| ln_or_ninf(*m) + t * (x - xc)).collect();
        let z = lse(lw.iter().cloned());
        let p: Vec<f64> = lw.iter().map(|l| (l - z).exp()).collect();
        let mean: f64 = p.iter().zip(x).map(|(p, x)| p * x).sum();
        let var: f64 = p.iter().zip(x).map(|(p, x)| p * (x - mean).powi(2)).sum();
        (p, mean, var)
    };
    let mut t = 0.0;
    for _ in 0..200 {
        let (_, mean, var) = tilted(t);
        let f = mean - target;
        if f.abs() <= 1e-15 * (1.0 + target.abs()) || var <= 0.0 {
            break;
        }
        let step = (f / var).clamp(-50.0 / (hi - lo), 50.0 / (hi - lo));
        t -= step;
    }
    let (p, _, _) = tilted(t);
    Ok(p)
}

/// `mean(m2) - (mean(m1) + mean(m3)) / 2`: the averaged constraint is feasible
/// with exact marginals only when this equals the drift.
pub fn marginal_mean_gap(x: &[f64], m1: &[f64], m2: &[f64], m3: &[f64]) -> f64 {
    let mean = |m: &[f64]| m.iter().zip(x).map(|(m, x)| m * x).sum::<f64>();
    mean(m2) - 0.5 * (mean(m1) + mean(m3))
}

#[derive(Debug, Clone, Serialize)]
pub struct BridgeReport {
    pub certificates: CertificateSet,
    pub converged: bool,
    pub eta: f64,
    pub fallbacks_taken: Vec<String>,
    pub stage_kkt: Vec<f64>,
    pub trace: Vec<TraceEntry>,
    pub dual: f64,
    pub primal: f64,
}

/// Build kernels, solve and certify in one call.
pub fn solve_bridge(problem: &TriMarginalProblem, cfg: &SolverConfig) -> Result<BridgeReport> {
    let kernels = build_bridge(problem)?;
    let (state, certificates) = tri_sinkhorn(problem, &kernels, cfg)?;
    Ok(BridgeReport {
        dual: dual_value(&state, problem, &kernels)?,
        primal: primal_value(&state, problem, &kernels)?,
        certificates,
        converged: state.converged,
        eta: state.eta,
        fallbacks_taken: state.fallbacks_taken.clone(),
        stage_kkt: state.stage_kkt.clone(),
        trace: state.residual_trace.clone(),
    })
}
