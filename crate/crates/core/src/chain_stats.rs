//! Chain-consistency statistics across maturities: mixture-kernel MMD^2
//! U-statistics, chain energy on the maturity path graph, effective sample
//! size under mixing, and the Gate-V2 tail decision.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim, input, Error, Result};
use crate::grid::percentile;
use crate::linalg;
use crate::par;
use crate::projection::{pav_isotonic, Direction};

/// Slope threshold of the gate (5! * 1e-3).
pub const SLOPE_MAX: f64 = 0.12;
/// Area-drop floor of the gate.
pub const AREA_MIN: f64 = -0.02;
/// Amplification bound for the degree-5 smoother.
pub const FIR_L1_BOUND: f64 = 120.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelComponent {
    /// `exp(-r^2 / (2 scale^2))`
    Gaussian { scale: f64 },
    /// `(1 + r^2 / scale^2)^(-shape)`
    Imq { scale: f64, shape: f64 },
    /// Constant kernel, used as a degenerate test case.
    Constant { value: f64 },
}

impl KernelComponent {
    fn eval_r2(&self, r2: f64) -> f64 {
        match *self {
            Self::Gaussian { scale } => (-r2 / (2.0 * scale * scale)).exp(),
            Self::Imq { scale, shape } => (1.0 + r2 / (scale * scale)).powf(-shape),
            Self::Constant { value } => value,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelMixture {
    pub components: Vec<KernelComponent>,
    pub weights: Vec<f64>,
    /// Median cross distance used to set the scales.
    pub sigma_hat: f64,
    /// Set when the median distance was zero and the unit scale was used.
    pub unit_scale_fallback: bool,
}

impl KernelMixture {
    pub fn new(components: Vec<KernelComponent>, weights: Vec<f64>) -> Result<Self> {
        let k = Self { components, weights, sigma_hat: f64::NAN, unit_scale_fallback: false };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if self.components.is_empty() || self.components.len() != self.weights.len() {
            return Err(dim("kernel mixture needs one weight per component"));
        }
        if self.weights.iter().any(|w| !(*w >= 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(input("mixture weights must be nonnegative and sum to 1"));
        }
        for c in &self.components {
            let ok = match *c {
                KernelComponent::Gaussian { scale } => scale > 0.0,
                KernelComponent::Imq { scale, shape } => scale > 0.0 && shape > 0.0,
                KernelComponent::Constant { value } => value.abs() <= 1.0,
            };
            if !ok {
                return Err(input(format!("invalid kernel component {c:?}")));
            }
        }
        Ok(())
    }

    pub fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let r2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        self.components.iter().zip(&self.weights).map(|(c, w)| w * c.eval_r2(r2)).sum()
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Gaussian components at `sigma_hat * 2^l` for each octave plus one IMQ
/// component (shape 1/2) at `sigma_hat`, uniformly weighted.
pub fn median_bandwidth_mixture(x: &[Vec<f64>], y: &[Vec<f64>], octaves: &[i32]) -> Result<KernelMixture> {
    if x.is_empty() || y.is_empty() {
        return Err(Error::InsufficientData("both samples must be nonempty".into()));
    }
    let mut d = Vec::with_capacity(x.len() * y.len());
    for a in x {
        for b in y {
            d.push(dist(a, b));
        }
    }
    d.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let m = d.len();
    let med = if m % 2 == 1 { d[m / 2] } else { 0.5 * (d[m / 2 - 1] + d[m / 2]) };
    let fallback = !(med > 0.0);
    let s = if fallback { 1.0 } else { med };
    let mut comps: Vec<KernelComponent> = octaves.iter().map(|l| KernelComponent::Gaussian { scale: s * 2f64.powi(*l) }).collect();
    comps.push(KernelComponent::Imq { scale: s, shape: 0.5 });
    let p = comps.len();
    Ok(KernelMixture { components: comps, weights: vec![1.0 / p as f64; p], sigma_hat: s, unit_scale_fallback: fallback })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum MmdMode {
    Full,
    Incomplete { m_xx: usize, m_yy: usize, m_xy: usize, seed: u64, replacement: bool },
}

fn sample_pairs(rng: &mut ChaCha8Rng, n: usize, m: usize, count: usize, distinct: bool, replacement: bool) -> Vec<(usize, usize)> {
    if replacement {
        (0..count)
            .map(|_| loop {
                let i = rng.random_range(0..n);
                let j = rng.random_range(0..m);
                if !distinct || i != j {
                    break (i, j);
                }
            })
            .collect()
    } else {
        let mut all: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..m).map(move |j| (i, j))).filter(|(i, j)| !distinct || i != j).collect();
        all.shuffle(rng);
        all.truncate(count);
        all
    }
}

/// Unbiased MMD^2 estimate. The full mode is the order-2 U-statistic with the
/// diagonal excluded; the incomplete mode averages over sampled index pairs.
pub fn mmd2(x: &[Vec<f64>], y: &[Vec<f64>], kernel: &KernelMixture, mode: MmdMode) -> Result<f64> {
    let (n, m) = (x.len(), y.len());
    match mode {
        MmdMode::Full => {
            if n < 2 || m < 2 {
                return Err(Error::InsufficientData(format!("full U-statistic needs n, m >= 2 (got {n}, {m})")));
            }
            let mut kxx = 0.0;
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        kxx += kernel.eval(&x[i], &x[j]);
                    }
                }
            }
            let mut kyy = 0.0;
            for i in 0..m {
                for j in 0..m {
                    if i != j {
                        kyy += kernel.eval(&y[i], &y[j]);
                    }
                }
            }
            let mut kxy = 0.0;
            for a in x {
                for b in y {
                    kxy += kernel.eval(a, b);
                }
            }
            Ok(kxx / (n * (n - 1)) as f64 + kyy / (m * (m - 1)) as f64 - 2.0 * kxy / (n * m) as f64)
        }
        MmdMode::Incomplete { m_xx, m_yy, m_xy, seed, replacement } => {
            if m_xx == 0 || m_yy == 0 || m_xy == 0 {
                return Err(input("incomplete U-statistic needs positive index-set sizes"));
            }
            if n < 2 || m < 2 {
                return Err(Error::InsufficientData("incomplete U-statistic needs n, m >= 2".into()));
            }
            if !replacement && (m_xx > n * (n - 1) || m_yy > m * (m - 1) || m_xy > n * m) {
                return Err(input("index-set size exceeds the number of distinct pairs"));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ixx = sample_pairs(&mut rng, n, n, m_xx, true, replacement);
            let iyy = sample_pairs(&mut rng, m, m, m_yy, true, replacement);
            let ixy = sample_pairs(&mut rng, n, m, m_xy, false, replacement);
            let s = |idx: &[(usize, usize)], a: &[Vec<f64>], b: &[Vec<f64>]| idx.iter().map(|(i, j)| kernel.eval(&a[*i], &b[*j])).sum::<f64>() / idx.len() as f64;
            Ok(s(&ixx, x, x) + s(&iyy, y, y) - 2.0 * s(&ixy, x, y))
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainEnergy {
    pub total: f64,
    pub per_edge: Vec<f64>,
    /// Median-heuristic scale of each edge's kernel.
    pub edge_scales: Vec<f64>,
}

/// Weighted sum of per-edge MMD^2 on the maturity path graph, with the kernel
/// chosen per edge by the median heuristic.
pub fn chain_energy(slices: &[Vec<Vec<f64>>], edge_weights: &[f64], octaves: &[i32], mode: MmdMode) -> Result<ChainEnergy> {
    if slices.len() < 2 {
        return Err(Error::InsufficientData("chain energy needs at least two slices".into()));
    }
    if edge_weights.len() != slices.len() - 1 {
        return Err(dim("need one weight per adjacent pair"));
    }
    if edge_weights.iter().any(|w| !(*w > 0.0)) || (edge_weights.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
        return Err(input("edge weights must be positive and sum to 1"));
    }
    let edges = par::map_range(edge_weights.len(), |t| -> Result<(f64, f64)> {
        let k = median_bandwidth_mixture(&slices[t], &slices[t + 1], octaves)?;
        Ok((mmd2(&slices[t], &slices[t + 1], &k, mode)?, k.sigma_hat))
    });
    let mut per_edge = vec![];
    let mut edge_scales = vec![];
    for e in edges {
        let (v, s) = e?;
        per_edge.push(v);
        edge_scales.push(s);
    }
    let total = per_edge.iter().zip(edge_weights).map(|(v, w)| v * w).sum();
    Ok(ChainEnergy { total, per_edge, edge_scales })
}

/// Weighted Laplacian of the path graph with the given edge weights.
pub fn path_laplacian(edge_weights: &[f64]) -> DMatrix<f64> {
    let t = edge_weights.len() + 1;
    let mut l = DMatrix::zeros(t, t);
    for (e, w) in edge_weights.iter().enumerate() {
        l[(e, e)] += w;
        l[(e + 1, e + 1)] += w;
        l[(e, e + 1)] -= w;
        l[(e + 1, e)] -= w;
    }
    l
}

/// `<mu, L mu>` for node embeddings stacked as rows.
pub fn dirichlet_energy(embeddings: &[Vec<f64>], edge_weights: &[f64]) -> Result<f64> {
    if embeddings.len() != edge_weights.len() + 1 {
        return Err(dim("need one embedding per node"));
    }
    let d = embeddings[0].len();
    let l = path_laplacian(edge_weights);
    let mut e = 0.0;
    for c in 0..d {
        let v = DVector::from_iterator(embeddings.len(), embeddings.iter().map(|m| m[c]));
        e += v.dot(&(&l * &v));
    }
    Ok(e)
}

/// Effective sample size `n / (1 + 2 sum (1 - k/n) c alpha(k)^(gamma/(2+gamma)))`.
/// `gamma = inf` gives exponent one.
pub fn n_eff(n: usize, alpha: &[f64], gamma: f64, c_gamma: f64) -> f64 {
    if n == 0 {
        return 0.0;
    }
    let expo = if gamma.is_infinite() { 1.0 } else { gamma / (2.0 + gamma) };
    let mut s = 0.0;
    for k in 1..n {
        let a = alpha.get(k - 1).copied().unwrap_or(0.0).max(0.0);
        if a > 0.0 {
            s += (1.0 - k as f64 / n as f64) * c_gamma * a.powf(expo);
        }
    }
    n as f64 / (1.0 + 2.0 * s)
}

/// Plug-in mixing coefficients from Bartlett-weighted absolute
/// autocorrelations, truncated at the Newey-West lag `4 (n/100)^(2/9)`.
pub fn estimate_alpha(series: &[f64], max_lag: Option<usize>) -> Vec<f64> {
    let n = series.len();
    if n < 3 {
        return vec![];
    }
    let lag = max_lag.unwrap_or_else(|| (4.0 * (n as f64 / 100.0).powf(2.0 / 9.0)).floor() as usize).min(n - 1);
    let mean = series.iter().sum::<f64>() / n as f64;
    let c0: f64 = series.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    if c0 <= 0.0 {
        return vec![0.0; lag];
    }
    (1..=lag)
        .map(|k| {
            let ck: f64 = (0..n - k).map(|i| (series[i] - mean) * (series[i + k] - mean)).sum::<f64>() / n as f64;
            (1.0 - k as f64 / (lag + 1) as f64) * (ck / c0).abs()
        })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChainSeries {
    pub sizes: Vec<f64>,
    pub values: Vec<f64>,
    pub neff: Vec<f64>,
}

impl ChainSeries {
    pub fn new(sizes: Vec<f64>, values: Vec<f64>, neff: Vec<f64>) -> Result<Self> {
        if sizes.len() != values.len() || sizes.len() != neff.len() {
            return Err(dim("chain series fields differ in length"));
        }
        if sizes.windows(2).any(|p| p[1] <= p[0]) || sizes.iter().any(|s| !(*s > 0.0)) {
            return Err(input("sizes must be positive and strictly increasing"));
        }
        if values.iter().any(|v| !v.is_finite()) || neff.iter().any(|v| !(*v > 0.0)) {
            return Err(input("values must be finite and n_eff positive"));
        }
        Ok(Self { sizes, values, neff })
    }
}

/// Symmetric smoother of half-width `q` satisfying the moment conditions up
/// to degree 5, with the least Euclidean norm.
pub fn fir_coefficients(q: usize) -> Result<Vec<f64>> {
    if q < 3 {
        return Err(Error::Parameter("FIR half-width must be at least 3".into()));
    }
    let len = 2 * q + 1;
    let a = DMatrix::from_fn(6, len, |r, c| (c as f64 - q as f64).powi(r as i32));
    let mut b = DVector::zeros(6);
    b[0] = 1.0;
    let h = linalg::lstsq(&a, &b);
    Ok(h.iter().cloned().collect())
}

fn poly_fit_at(xs: &[f64], ys: &[f64], x0: f64, degree: usize) -> f64 {
    let a = DMatrix::from_fn(xs.len(), degree + 1, |r, c| (xs[r] - x0).powi(c as i32));
    let b = DVector::from_column_slice(ys);
    linalg::lstsq(&a, &b)[0]
}

/// Apply the symmetric smoother in the interior; near the ends use a local
/// degree-5 least-squares fit over the nearest `2q + 1` points, which keeps
/// exactness for polynomials of degree at most 5.
pub fn fir_smooth(u: &[f64], q: usize) -> Result<Vec<f64>> {
    let h = fir_coefficients(q)?;
    let s = u.len();
    let mut out = vec![0.0; s];
    for i in 0..s {
        if i >= q && i + q < s {
            out[i] = (0..2 * q + 1).map(|j| h[j] * u[i + j - q]).sum();
        } else {
            let w = (2 * q + 1).min(s);
            let lo = i.saturating_sub(q).min(s - w);
            let xs: Vec<f64> = (lo..lo + w).map(|j| j as f64).collect();
            let deg = 5.min(w - 1);
            out[i] = poly_fit_at(&xs, &u[lo..lo + w], i as f64, deg);
        }
    }
    Ok(out)
}

fn ols_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateConfig {
    pub slope_max: f64,
    pub area_min: f64,
    pub tail_fraction: f64,
    /// Sliding-window length; defaults to `max(2, floor(0.1 S))`.
    pub window: Option<usize>,
    pub fir_halfwidth: usize,
    pub direction: Direction,
    pub band_c: f64,
    pub delta: f64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            slope_max: SLOPE_MAX,
            area_min: AREA_MIN,
            tail_fraction: 0.1,
            window: None,
            fir_halfwidth: 6,
            direction: Direction::NonIncreasing,
            band_c: 1.0,
            delta: 0.05,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tail_fraction > 0.0 && self.tail_fraction <= 1.0) {
            return Err(Error::Parameter("tail fraction must be in (0, 1]".into()));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) || !(self.band_c > 0.0) {
            return Err(Error::Parameter("delta must be in (0, 1) and the band constant positive".into()));
        }
        if self.fir_halfwidth < 3 {
            return Err(Error::Parameter("FIR half-width must be at least 3".into()));
        }
        Ok(())
    }

    fn window_for(&self, s: usize) -> usize {
        self.window.unwrap_or_else(|| 2usize.max((0.1 * s as f64).floor() as usize))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TailDiagnostics {
    pub slope_tail: f64,
    pub area_drop: f64,
    pub envelope: Vec<f64>,
    pub smoothed: Vec<f64>,
    /// First index (inclusive) and one past the last index of the tail.
    pub tail_indices: (usize, usize),
    pub window: usize,
    pub fir_l1: f64,
}

/// Envelope, smooth, then sliding tail slopes and the relative tail area drop
/// `(A0 - integral) / A0` with `A0` the tail-entry value times the tail span.
pub fn tail_diagnostics(series: &ChainSeries, cfg: &GateConfig) -> Result<TailDiagnostics> {
    cfg.validate()?;
    let s = series.values.len();
    let window = cfg.window_for(s);
    if window < 2 {
        return Err(Error::Parameter("window must be at least 2".into()));
    }
    if s < 4.max(window) {
        return Err(Error::InsufficientData(format!("series of length {s} is shorter than max(4, {window})")));
    }
    let envelope = pav_isotonic(&series.values, &vec![1.0; s], cfg.direction)?;
    let smoothed = fir_smooth(&envelope, cfg.fir_halfwidth)?;
    let fir_l1 = fir_coefficients(cfg.fir_halfwidth)?.iter().map(|h| h.abs()).sum();
    let start = (((1.0 - cfg.tail_fraction) * s as f64).ceil() as usize).saturating_sub(1).min(s - 1);
    let tail = start..s;
    if tail.len() < window {
        return Err(Error::InsufficientData(format!("tail of length {} is shorter than the window {window}", tail.len())));
    }
    let x = &series.sizes;
    let mut slopes: Vec<f64> = (start..=s - window).map(|a| ols_slope(&x[a..a + window], &smoothed[a..a + window])).collect();
    slopes.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let slope_tail = percentile(&slopes, 0.5);
    let integral: f64 = (start + 1..s).map(|i| 0.5 * (x[i] - x[i - 1]) * (smoothed[i] + smoothed[i - 1])).sum();
    let a0 = smoothed[start] * (x[s - 1] - x[start]);
    let area_drop = if a0.abs() <= 1e-300 { 0.0 } else { (a0 - integral) / a0 };
    Ok(TailDiagnostics { slope_tail, area_drop, envelope, smoothed, tail_indices: (start, s), window, fir_l1 })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToleranceBands {
    pub per_point: Vec<f64>,
    pub slope: f64,
    /// Absolute band on the tail trapezoid functional.
    pub area: f64,
}

/// Uniform per-point band `C sqrt(log(2S/delta) / n_eff)` and its propagation
/// to the tail slope (divided by the tail x-spread) and tail area (times the
/// sum of tail spacings).
pub fn tolerance_band(s_count: usize, delta: f64, neff_tail: &[f64], tail_x: &[f64], c: f64) -> Result<ToleranceBands> {
    if neff_tail.iter().any(|n| !(*n > 0.0)) {
        return Err(input("n_eff must be positive"));
    }
    if !(delta > 0.0 && delta < 1.0) || s_count == 0 {
        return Err(Error::Parameter("delta must be in (0, 1) and S positive".into()));
    }
    let lg = (2.0 * s_count as f64 / delta).ln();
    let per_point: Vec<f64> = neff_tail.iter().map(|n| c * (lg / n).sqrt()).collect();
    let emax = per_point.iter().cloned().fold(0.0, f64::max);
    let (slope, area) = if tail_x.len() >= 2 {
        let m = tail_x.len() as f64;
        let mean = tail_x.iter().sum::<f64>() / m;
        let sx = (tail_x.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / m).sqrt();
        (emax / sx, (tail_x[tail_x.len() - 1] - tail_x[0]) * emax)
    } else {
        (f64::INFINITY, 0.0)
    };
    Ok(ToleranceBands { per_point, slope, area })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GateDecision {
    pub slope_tail: f64,
    pub area_drop: f64,
    pub band_slope: f64,
    /// Area band relative to the tail baseline area.
    pub band_area: f64,
    pub bands: ToleranceBands,
    pub pass: bool,
    pub slope_pass: bool,
    pub area_pass: bool,
    pub tail_indices: (usize, usize),
    pub direction: Direction,
    pub window: usize,
    pub fir_l1: f64,
    pub neff_tail: Vec<f64>,
    pub smoothed: Vec<f64>,
}

pub fn gate_v2(series: &ChainSeries, cfg: &GateConfig) -> Result<GateDecision> {
    let d = tail_diagnostics(series, cfg)?;
    let (a, b) = d.tail_indices;
    let neff_tail = series.neff[a..b].to_vec();
    let bands = tolerance_band(series.values.len(), cfg.delta, &neff_tail, &series.sizes[a..b], cfg.band_c)?;
    let a0 = d.smoothed[a] * (series.sizes[b - 1] - series.sizes[a]);
    let band_area = if a0.abs() > 1e-300 { bands.area / a0.abs() } else { bands.area };
    let slope_pass = d.slope_tail.abs() <= cfg.slope_max;
    let area_pass = d.area_drop >= cfg.area_min;
    Ok(GateDecision {
        slope_tail: d.slope_tail,
        area_drop: d.area_drop,
        band_slope: bands.slope,
        band_area,
        bands,
        pass: slope_pass && area_pass,
        slope_pass,
        area_pass,
        tail_indices: d.tail_indices,
        direction: cfg.direction,
        window: d.window,
        fir_l1: d.fir_l1,
        neff_tail,
        smoothed: d.smoothed,
    })
}
