//! Rectangular strike/maturity mesh, vega weights and the weighted L2 norm.
//!
//! Fields are stored row-major with maturities as rows: the value at
//! maturity index `t` and strike index `k` lives at `t * n_strikes + k`.

use serde::{Deserialize, Serialize};

use crate::error::{dim, input, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid2D {
    pub strikes: Vec<f64>,
    pub maturities: Vec<f64>,
    pub h_k: f64,
    pub h_tau: f64,
}

fn max_gap(xs: &[f64]) -> f64 {
    xs.windows(2).map(|p| p[1] - p[0]).fold(0.0, f64::max)
}

fn check_increasing(xs: &[f64], what: &str) -> Result<()> {
    if xs.len() < 3 {
        return Err(dim(format!("{what} needs at least 3 nodes, got {}", xs.len())));
    }
    if xs.iter().any(|x| !x.is_finite()) {
        return Err(input(format!("{what} contains non-finite values")));
    }
    if xs.windows(2).any(|p| p[1] <= p[0]) {
        return Err(input(format!("{what} must be strictly increasing")));
    }
    Ok(())
}

/// 1D trapezoid weights on an increasing node set.
pub fn trapezoid_weights(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut a = vec![0.0; n];
    for i in 0..n.saturating_sub(1) {
        let h = xs[i + 1] - xs[i];
        a[i] += 0.5 * h;
        a[i + 1] += 0.5 * h;
    }
    a
}

impl Grid2D {
    pub fn new(strikes: Vec<f64>, maturities: Vec<f64>) -> Result<Self> {
        check_increasing(&strikes, "strikes")?;
        check_increasing(&maturities, "maturities")?;
        if maturities[0] <= 0.0 {
            return Err(input("maturities must be positive"));
        }
        let h_k = max_gap(&strikes);
        let h_tau = max_gap(&maturities);
        Ok(Self { strikes, maturities, h_k, h_tau })
    }

    /// Uniform grid with `nk` strikes on `[k0, k1]` and `nt` maturities on `[t0, t1]`.
    pub fn uniform(k0: f64, k1: f64, nk: usize, t0: f64, t1: f64, nt: usize) -> Result<Self> {
        let lin = |a: f64, b: f64, n: usize| -> Vec<f64> {
            if n < 2 {
                return vec![a; n];
            }
            (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
        };
        Self::new(lin(k0, k1, nk), lin(t0, t1, nt))
    }

    pub fn n_strikes(&self) -> usize {
        self.strikes.len()
    }

    pub fn n_maturities(&self) -> usize {
        self.maturities.len()
    }

    pub fn len(&self) -> usize {
        self.strikes.len() * self.maturities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, t: usize, k: usize) -> usize {
        t * self.strikes.len() + k
    }

    /// Tensor trapezoid weights normalised to total mass one, so the domain
    /// behaves as a unit-measure rectangle.
    pub fn quadrature(&self) -> Vec<f64> {
        let ak = trapezoid_weights(&self.strikes);
        let at = trapezoid_weights(&self.maturities);
        let area = (self.strikes[self.strikes.len() - 1] - self.strikes[0])
            * (self.maturities[self.maturities.len() - 1] - self.maturities[0]);
        let mut q = Vec::with_capacity(self.len());
        for wt in &at {
            for wk in &ak {
                q.push(wt * wk / area);
            }
        }
        q
    }

    /// Evaluate `f(K, tau)` at every node.
    pub fn tabulate(&self, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.len());
        for &t in &self.maturities {
            for &k in &self.strikes {
                v.push(f(k, t));
            }
        }
        v
    }
}

/// Positive per-node weight with unit node mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightField {
    pub w: Vec<f64>,
    pub w_min: f64,
    pub w_max: f64,
    pub kappa_w: f64,
}

impl WeightField {
    /// Rescale positive raw weights to unit mean.
    pub fn from_raw(raw: Vec<f64>) -> Result<Self> {
        if raw.is_empty() {
            return Err(dim("empty weight field"));
        }
        if raw.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
            return Err(input("weights must be finite and positive"));
        }
        let mean = raw.iter().sum::<f64>() / raw.len() as f64;
        let w: Vec<f64> = raw.iter().map(|x| x / mean).collect();
        let w_min = w.iter().cloned().fold(f64::INFINITY, f64::min);
        let w_max = w.iter().cloned().fold(0.0, f64::max);
        Ok(Self { kappa_w: (w_max / w_min).sqrt(), w, w_min, w_max })
    }

    pub fn uniform(grid: &Grid2D) -> Self {
        Self::from_raw(vec![1.0; grid.len()]).expect("unit weights are valid")
    }

    /// Gaussian bump in strike around the money, scaled by `sqrt(tau)`,
    /// plus a floor so the envelope ratio stays bounded.
    pub fn vega_bump(grid: &Grid2D, spot: f64, rel_width: f64, floor: f64) -> Result<Self> {
        if !(spot > 0.0 && rel_width > 0.0 && floor > 0.0) {
            return Err(input("vega bump needs positive spot, width and floor"));
        }
        let tmax = grid.maturities[grid.n_maturities() - 1];
        let raw = grid.tabulate(|k, t| {
            let z = (k - spot) / (rel_width * spot);
            floor + (t / tmax).sqrt() * (-0.5 * z * z).exp()
        });
        Self::from_raw(raw)
    }

    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Surface {
    pub grid: Grid2D,
    pub values: Vec<f64>,
}

impl Surface {
    pub fn new(grid: Grid2D, values: Vec<f64>) -> Result<Self> {
        if values.len() != grid.len() {
            return Err(dim(format!("surface has {} values, grid has {} nodes", values.len(), grid.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(input("surface values must be finite"));
        }
        Ok(Self { grid, values })
    }

    pub fn from_fn(grid: &Grid2D, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        let values = grid.tabulate(f);
        Self::new(grid.clone(), values)
    }

    #[inline]
    pub fn at(&self, t: usize, k: usize) -> f64 {
        self.values[self.grid.idx(t, k)]
    }

    pub fn row(&self, t: usize) -> &[f64] {
        let nk = self.grid.n_strikes();
        &self.values[t * nk..(t + 1) * nk]
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        (0..self.grid.n_maturities()).map(|t| self.at(t, k)).collect()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.values.iter().all(|v| *v >= 0.0)
    }

    pub fn to_json(&self, w: &WeightField) -> serde_json::Value {
        grid_json(&self.grid, Some(w), "values", &self.values)
    }
}

/// Flat JSON object `{strikes, maturities, w, <key>}` with maturities as rows.
pub fn grid_json(grid: &Grid2D, w: Option<&WeightField>, key: &str, values: &[f64]) -> serde_json::Value {
    let nk = grid.n_strikes();
    let rows = |v: &[f64]| -> Vec<Vec<f64>> { v.chunks(nk).map(|c| c.to_vec()).collect() };
    let mut obj = serde_json::Map::new();
    obj.insert("strikes".into(), serde_json::json!(grid.strikes));
    obj.insert("maturities".into(), serde_json::json!(grid.maturities));
    if let Some(w) = w {
        obj.insert("w".into(), serde_json::json!(rows(&w.w)));
    }
    obj.insert(key.into(), serde_json::json!(rows(values)));
    serde_json::Value::Object(obj)
}

/// Parse the flat surface schema back into a grid, weights and values.
pub fn surface_from_json(v: &serde_json::Value) -> Result<(Surface, Option<WeightField>)> {
    let vec1 = |key: &str| -> Result<Vec<f64>> {
        serde_json::from_value(v.get(key).cloned().ok_or_else(|| input(format!("missing key {key}")))?)
            .map_err(|e| input(format!("bad {key}: {e}")))
    };
    let mat = |key: &str| -> Result<Option<Vec<f64>>> {
        match v.get(key) {
            None => Ok(None),
            Some(x) => {
                let rows: Vec<Vec<f64>> =
                    serde_json::from_value(x.clone()).map_err(|e| input(format!("bad {key}: {e}")))?;
                Ok(Some(rows.into_iter().flatten().collect()))
            }
        }
    };
    let grid = Grid2D::new(vec1("strikes")?, vec1("maturities")?)?;
    let values = mat("values")?.ok_or_else(|| input("missing key values"))?;
    let surface = Surface::new(grid, values)?;
    let w = match mat("w")? {
        Some(raw) => {
            if raw.len() != surface.grid.len() {
                return Err(dim("weight field does not match grid"));
            }
            Some(WeightField::from_raw(raw)?)
        }
        None => None,
    };
    Ok((surface, w))
}

fn check_field(f: &[f64], w: &WeightField, grid: &Grid2D) -> Result<()> {
    if f.len() != grid.len() || w.len() != grid.len() {
        return Err(dim(format!(
            "field {} / weight {} / grid {} size mismatch",
            f.len(),
            w.len(),
            grid.len()
        )));
    }
    Ok(())
}

/// Weighted inner product `<f, g>_w` under trapezoid quadrature.
pub fn weighted_inner(f: &[f64], g: &[f64], w: &WeightField, grid: &Grid2D) -> Result<f64> {
    check_field(f, w, grid)?;
    check_field(g, w, grid)?;
    let q = grid.quadrature();
    Ok(f.iter().zip(g).zip(q.iter().zip(&w.w)).map(|((a, b), (q, w))| q * w * a * b).sum())
}

pub fn weighted_norm(f: &[f64], w: &WeightField, grid: &Grid2D) -> Result<f64> {
    Ok(weighted_inner(f, f, w, grid)?.max(0.0).sqrt())
}

/// Same quadrature with unit weights.
pub fn unweighted_norm(f: &[f64], grid: &Grid2D) -> Result<f64> {
    if f.len() != grid.len() {
        return Err(dim("field does not match grid"));
    }
    let q = grid.quadrature();
    Ok(f.iter().zip(&q).map(|(a, q)| q * a * a).sum::<f64>().sqrt())
}

/// Weighted norm of `f - g`.
pub fn weighted_dist(f: &[f64], g: &[f64], w: &WeightField, grid: &Grid2D) -> Result<f64> {
    if f.len() != g.len() {
        return Err(dim("fields differ in size"));
    }
    let d: Vec<f64> = f.iter().zip(g).map(|(a, b)| a - b).collect();
    weighted_norm(&d, w, grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdmissibilityReport {
    pub pass: bool,
    pub h_k: f64,
    pub h_tau: f64,
    pub envelope_k: f64,
    pub envelope_tau: f64,
    pub bound_k: f64,
    pub bound_tau: f64,
    pub reason: Option<String>,
}

/// Second derivative at `x0` from a quadratic least-squares fit through
/// the points `(xs, ys)`.
pub(crate) fn quad_fit_second(xs: &[f64], ys: &[f64], x0: f64) -> f64 {
    quad_fit(xs, ys, x0).2
}

/// Quadratic least-squares fit centred at `x0`; returns value, first and
/// second derivative at `x0`.
pub(crate) fn quad_fit(xs: &[f64], ys: &[f64], x0: f64) -> (f64, f64, f64) {
    // Scale offsets for conditioning.
    let s = xs.iter().map(|x| (x - x0).abs()).fold(0.0, f64::max).max(1e-300);
    let mut m = [[0.0f64; 3]; 3];
    let mut r = [0.0f64; 3];
    for (x, y) in xs.iter().zip(ys) {
        let u = (x - x0) / s;
        let p = [1.0, u, u * u];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += p[i] * p[j];
            }
            r[i] += p[i] * y;
        }
    }
    let c = solve3(m, r);
    (c[0], c[1] / s, 2.0 * c[2] / (s * s))
}

fn solve3(mut a: [[f64; 3]; 3], mut b: [f64; 3]) -> [f64; 3] {
    for col in 0..3 {
        let piv = (col..3)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for c in col..3 {
                a[row][c] -= f * a[col][c];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = [0.0; 3];
    for i in (0..3).rev() {
        let mut s = b[i];
        for j in i + 1..3 {
            s -= a[i][j] * x[j];
        }
        x[i] = s / a[i][i];
    }
    x
}

/// Start index of a length-`win` window centred at `i`, shifted inward at
/// the boundaries.
pub(crate) fn window_start(i: usize, n: usize, win: usize) -> usize {
    let half = win / 2;
    i.saturating_sub(half).min(n - win)
}

/// 10th percentile of `xs` by linear interpolation of the order statistics.
pub(crate) fn percentile(xs: &[f64], p: f64) -> f64 {
    let mut v: Vec<f64> = xs.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = p * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
}

/// Robust lower envelope of the local curvature magnitudes in strike and
/// maturity, compared against the mesh spacings.
pub fn check_mesh_admissibility(c: &Surface, grid: &Grid2D, c1: f64, c2: f64) -> Result<AdmissibilityReport> {
    const WIN: usize = 5;
    let nk = grid.n_strikes();
    let nt = grid.n_maturities();
    if nk < WIN || nt < WIN {
        return Err(dim(format!("admissibility needs at least {WIN} nodes per axis, got {nk}x{nt}")));
    }
    if c.values.len() != grid.len() {
        return Err(dim("surface does not match grid"));
    }
    let mut ckk = Vec::with_capacity(grid.len());
    let mut ctt = Vec::with_capacity(grid.len());
    for t in 0..nt {
        for k in 0..nk {
            let s = window_start(k, nk, WIN);
            let ys: Vec<f64> = (s..s + WIN).map(|j| c.at(t, j)).collect();
            ckk.push(quad_fit_second(&grid.strikes[s..s + WIN], &ys, grid.strikes[k]).abs());
            let s = window_start(t, nt, WIN);
            let ys: Vec<f64> = (s..s + WIN).map(|j| c.at(j, k)).collect();
            ctt.push(quad_fit_second(&grid.maturities[s..s + WIN], &ys, grid.maturities[t]).abs());
        }
    }
    let envelope_k = percentile(&ckk, 0.1);
    let envelope_tau = percentile(&ctt, 0.1);
    let bound_k = c1 * envelope_k;
    let bound_tau = c2 * envelope_tau;
    let mut reasons = Vec::new();
    if envelope_k <= 0.0 {
        reasons.push("strike curvature envelope is zero".to_string());
    } else if grid.h_k > bound_k {
        reasons.push(format!("h_K = {:.4e} exceeds c1*envelope = {:.4e}", grid.h_k, bound_k));
    }
    if envelope_tau <= 0.0 {
        reasons.push("maturity curvature envelope is zero".to_string());
    } else if grid.h_tau > bound_tau {
        reasons.push(format!("h_tau = {:.4e} exceeds c2*envelope = {:.4e}", grid.h_tau, bound_tau));
    }
    Ok(AdmissibilityReport {
        pass: reasons.is_empty(),
        h_k: grid.h_k,
        h_tau: grid.h_tau,
        envelope_k,
        envelope_tau,
        bound_k,
        bound_tau,
        reason: if reasons.is_empty() { None } else { Some(reasons.join("; ")) },
    })
}
