//! Anisotropic Smolyak interpolation realised as a continuous piecewise
//! linear (CPWL) function, a weighted PCA head over strike sections, exact
//! compilation of CPWL functions to ReLU networks, and the error/size
//! frontier.
//!
//! The combination-technique interpolant is assembled as nodal values on
//! the finest tensor grid spanned by the index set. Every activated sparse
//! grid node is a vertex of that grid, so the interpolation property holds
//! exactly, and a fixed-diagonal triangulation gives convex vertex stars of
//! valence at most six.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim, input, Error, Result};
use crate::par;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnisotropyConfig {
    pub beta_k: u32,
    pub beta_tau: u32,
    pub a_k: f64,
    pub a_tau: f64,
    pub level_l: u32,
}

impl AnisotropyConfig {
    /// Slopes set to `min(beta) / beta` per axis.
    pub fn new(beta_k: u32, beta_tau: u32, level_l: u32) -> Result<Self> {
        if beta_k == 0 || beta_tau == 0 {
            return Err(input("smoothness orders must be positive"));
        }
        let bbar = beta_k.min(beta_tau) as f64;
        Ok(Self { beta_k, beta_tau, a_k: bbar / beta_k as f64, a_tau: bbar / beta_tau as f64, level_l })
    }

    pub fn with_level(&self, level_l: u32) -> Self {
        Self { level_l, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.a_k > 0.0 && self.a_tau > 0.0) {
            return Err(input("index-set slopes must be positive"));
        }
        if self.beta_k.min(self.beta_tau) < 1 {
            return Err(input("smoothness orders must be at least 1"));
        }
        Ok(())
    }

    fn contains(&self, i: u32, j: u32) -> bool {
        self.a_k * i as f64 + self.a_tau * j as f64 <= self.level_l as f64 + 1e-12
    }
}

/// Lattice points `(i, j)` with `a_K i + a_tau j <= L`, in lexicographic order.
pub fn build_index_set(cfg: &AnisotropyConfig) -> BTreeSet<(u32, u32)> {
    let mut out = BTreeSet::new();
    let mut i = 0;
    while cfg.contains(i, 0) {
        let mut j = 0;
        while cfg.contains(i, j) {
            out.insert((i, j));
            j += 1;
        }
        i += 1;
    }
    out
}

/// Combination coefficients `sum_{e in {0,1}^2} (-1)^{|e|} 1[(i,j)+e in Lambda]`,
/// keeping only the nonzero ones.
pub fn combination_coefficients(set: &BTreeSet<(u32, u32)>) -> BTreeMap<(u32, u32), i32> {
    let mut out = BTreeMap::new();
    for &(i, j) in set {
        let mut c = 0;
        for (di, dj, s) in [(0, 0, 1), (1, 0, -1), (0, 1, -1), (1, 1, 1)] {
            if set.contains(&(i + di, j + dj)) {
                c += s;
            }
        }
        if c != 0 {
            out.insert((i, j), c);
        }
    }
    out
}

/// Number of distinct sparse-grid nodes activated by the index set.
pub fn sparse_node_count(cfg: &AnisotropyConfig) -> usize {
    let set = build_index_set(cfg);
    let (imax, jmax) = max_levels(&set);
    let mut nodes = BTreeSet::new();
    for &(i, j) in &set {
        let si = 1u64 << (imax - i);
        let sj = 1u64 << (jmax - j);
        for a in 0..=(1u64 << i) {
            for b in 0..=(1u64 << j) {
                nodes.insert((a * si, b * sj));
            }
        }
    }
    nodes.len()
}

fn max_levels(set: &BTreeSet<(u32, u32)>) -> (u32, u32) {
    set.iter().fold((0, 0), |(a, b), &(i, j)| (a.max(i), b.max(j)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub k0: f64,
    pub k1: f64,
    pub t0: f64,
    pub t1: f64,
}

impl Domain {
    pub fn unit() -> Self {
        Self { k0: 0.0, k1: 1.0, t0: 0.0, t1: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = [self.k0, self.k1, self.t0, self.t1].iter().all(|v| v.is_finite()) && self.k1 > self.k0 && self.t1 > self.t0;
        if ok {
            Ok(())
        } else {
            Err(input("domain bounds must be finite with positive extent"))
        }
    }
}

/// Continuous piecewise-linear function on a triangulation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CpwlFunction {
    pub vertices: Vec<[f64; 2]>,
    pub triangles: Vec<[usize; 3]>,
    pub nodal_values: Vec<f64>,
    #[serde(skip)]
    locator: Option<Locator>,
}

#[derive(Debug, Clone)]
struct Locator {
    x0: f64,
    y0: f64,
    dx: f64,
    dy: f64,
    nx: usize,
    ny: usize,
    bins: Vec<Vec<usize>>,
}

fn barycentric(p: [f64; 2], a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> [f64; 3] {
    let det = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1]);
    let l0 = ((b[1] - c[1]) * (p[0] - c[0]) + (c[0] - b[0]) * (p[1] - c[1])) / det;
    let l1 = ((c[1] - a[1]) * (p[0] - c[0]) + (a[0] - c[0]) * (p[1] - c[1])) / det;
    [l0, l1, 1.0 - l0 - l1]
}

/// Affine coefficients `(gx, gy, c)` of the barycentric coordinate of
/// vertex `a` in triangle `(a, b, c)`.
fn bary_affine(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> [f64; 3] {
    let det = (b[1] - c[1]) * (a[0] - c[0]) + (c[0] - b[0]) * (a[1] - c[1]);
    let gx = (b[1] - c[1]) / det;
    let gy = (c[0] - b[0]) / det;
    [gx, gy, -(gx * c[0] + gy * c[1])]
}

fn tri_area(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    0.5 * ((b[0] - a[0]) * (c[1] - a[1]) - (c[0] - a[0]) * (b[1] - a[1]))
}

impl CpwlFunction {
    pub fn new(vertices: Vec<[f64; 2]>, triangles: Vec<[usize; 3]>, nodal_values: Vec<f64>) -> Result<Self> {
        if vertices.len() != nodal_values.len() {
            return Err(dim("one nodal value per vertex required"));
        }
        if triangles.iter().flatten().any(|&i| i >= vertices.len()) {
            return Err(Error::Structure("triangle references a missing vertex".into()));
        }
        let mut f = Self { vertices, triangles, nodal_values, locator: None };
        f.build_locator();
        Ok(f)
    }

    fn build_locator(&mut self) {
        if self.vertices.is_empty() || self.triangles.is_empty() {
            return;
        }
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            x0 = x0.min(v[0]);
            x1 = x1.max(v[0]);
            y0 = y0.min(v[1]);
            y1 = y1.max(v[1]);
        }
        let side = ((self.triangles.len() as f64).sqrt().ceil() as usize).clamp(1, 512);
        let (nx, ny) = (side, side);
        let dx = ((x1 - x0) / nx as f64).max(1e-300);
        let dy = ((y1 - y0) / ny as f64).max(1e-300);
        let mut bins = vec![Vec::new(); nx * ny];
        let cell = |v: f64, o: f64, d: f64, n: usize| -> usize { (((v - o) / d).floor().max(0.0) as usize).min(n - 1) };
        for (t, tri) in self.triangles.iter().enumerate() {
            let ps = tri.map(|i| self.vertices[i]);
            let tx0 = ps.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min);
            let tx1 = ps.iter().map(|p| p[0]).fold(f64::NEG_INFINITY, f64::max);
            let ty0 = ps.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min);
            let ty1 = ps.iter().map(|p| p[1]).fold(f64::NEG_INFINITY, f64::max);
            let pad_x = 1e-9 * dx;
            let pad_y = 1e-9 * dy;
            for i in cell(tx0 - pad_x, x0, dx, nx)..=cell(tx1 + pad_x, x0, dx, nx) {
                for j in cell(ty0 - pad_y, y0, dy, ny)..=cell(ty1 + pad_y, y0, dy, ny) {
                    bins[j * nx + i].push(t);
                }
            }
        }
        self.locator = Some(Locator { x0, y0, dx, dy, nx, ny, bins });
    }

    /// Triangle containing `p` and its barycentric coordinates; points
    /// slightly outside the mesh snap to the least-violating triangle.
    pub fn locate(&self, p: [f64; 2]) -> Option<(usize, [f64; 3])> {
        let mut best: Option<(usize, [f64; 3], f64)> = None;
        let mut consider = |t: usize| -> bool {
            let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
            let l = barycentric(p, a, b, c);
            let worst = l.iter().cloned().fold(f64::INFINITY, f64::min);
            if worst >= -1e-12 {
                best = Some((t, l, worst));
                return true;
            }
            if best.as_ref().is_none_or(|b| worst > b.2) {
                best = Some((t, l, worst));
            }
            false
        };
        match &self.locator {
            Some(loc) => {
                let i = (((p[0] - loc.x0) / loc.dx).floor().max(0.0) as usize).min(loc.nx - 1);
                let j = (((p[1] - loc.y0) / loc.dy).floor().max(0.0) as usize).min(loc.ny - 1);
                for &t in &loc.bins[j * loc.nx + i] {
                    if consider(t) {
                        break;
                    }
                }
            }
            None => {
                for t in 0..self.triangles.len() {
                    if consider(t) {
                        break;
                    }
                }
            }
        }
        best.map(|(t, l, _)| (t, l))
    }

    pub fn eval(&self, p: [f64; 2]) -> f64 {
        match self.locate(p) {
            Some((t, l)) => {
                let tri = self.triangles[t];
                (0..3).map(|i| l[i] * self.nodal_values[tri[i]]).sum()
            }
            None => f64::NAN,
        }
    }

    /// Largest gradient norm over the triangles, after mapping coordinates
    /// by `diag(sx, sy)`.
    pub fn lipschitz(&self, sx: f64, sy: f64) -> f64 {
        self.triangles
            .iter()
            .map(|tri| {
                let [a, b, c] = tri.map(|i| self.vertices[i]);
                let mut gx = 0.0;
                let mut gy = 0.0;
                for (k, (p, q, r)) in [(a, b, c), (b, c, a), (c, a, b)].into_iter().enumerate() {
                    let g = bary_affine(p, q, r);
                    gx += g[0] * self.nodal_values[tri[k]];
                    gy += g[1] * self.nodal_values[tri[k]];
                }
                ((gx / sx).powi(2) + (gy / sy).powi(2)).sqrt()
            })
            .fold(0.0, f64::max)
    }

    /// Triangles incident to each vertex.
    pub fn stars(&self) -> Vec<Vec<usize>> {
        let mut s = vec![Vec::new(); self.vertices.len()];
        for (t, tri) in self.triangles.iter().enumerate() {
            for &v in tri {
                s[v].push(t);
            }
        }
        s
    }

    /// Nondegenerate triangles, each edge shared by at most two triangles
    /// with opposite orientation.
    pub fn check_structure(&self) -> Result<()> {
        let scale = self.vertices.iter().fold(0.0f64, |m, v| m.max(v[0].abs()).max(v[1].abs())).max(1.0);
        let mut edges: BTreeMap<(usize, usize), Vec<(usize, bool)>> = BTreeMap::new();
        for (t, tri) in self.triangles.iter().enumerate() {
            let [a, b, c] = tri.map(|i| self.vertices[i]);
            let area = tri_area(a, b, c);
            if area.abs() <= 1e-14 * scale * scale || tri[0] == tri[1] || tri[1] == tri[2] || tri[0] == tri[2] {
                return Err(Error::Structure(format!("triangle {t} is degenerate")));
            }
            let orient = area > 0.0;
            for (p, q) in [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])] {
                let fwd = if orient { p < q } else { p > q };
                edges.entry((p.min(q), p.max(q))).or_default().push((t, fwd));
            }
        }
        for (e, users) in &edges {
            if users.len() > 2 || (users.len() == 2 && users[0].1 == users[1].1) {
                return Err(Error::Structure(format!("edge {e:?} is not shared consistently")));
            }
        }
        Ok(())
    }
}

/// Structured Freudenthal triangulation of a tensor grid; each cell is cut
/// along its lower-left to upper-right diagonal.
pub fn tensor_cpwl(xs: &[f64], ys: &[f64], values: &[f64]) -> Result<CpwlFunction> {
    let nx = xs.len();
    let ny = ys.len();
    if nx < 2 || ny < 2 || values.len() != nx * ny {
        return Err(dim("tensor CPWL needs at least 2x2 nodes and matching values"));
    }
    let mut vertices = Vec::with_capacity(nx * ny);
    for &y in ys {
        for &x in xs {
            vertices.push([x, y]);
        }
    }
    let mut triangles = Vec::with_capacity(2 * (nx - 1) * (ny - 1));
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let a = j * nx + i;
            let b = a + 1;
            let c = a + nx;
            let d = c + 1;
            triangles.push([a, b, d]);
            triangles.push([a, d, c]);
        }
    }
    CpwlFunction::new(vertices, triangles, values.to_vec())
}

fn lin_nodes(a: f64, b: f64, level: u32) -> Vec<f64> {
    let n = 1usize << level;
    (0..=n).map(|i| a + (b - a) * i as f64 / n as f64).collect()
}

/// Smolyak combination-technique interpolant with its tensor realisation.
#[derive(Debug, Clone)]
pub struct SmolyakFit {
    pub cpwl: CpwlFunction,
    pub index_set: BTreeSet<(u32, u32)>,
    pub coefficients: BTreeMap<(u32, u32), i32>,
    pub sparse_nodes: Vec<[f64; 2]>,
    pub fine_shape: (usize, usize),
}

/// Fit `target` on the slanted index set of `cfg` over `domain`.
pub fn smolyak_fit(target: &(dyn Fn(f64, f64) -> f64 + Sync), cfg: &AnisotropyConfig, domain: &Domain) -> Result<SmolyakFit> {
    cfg.validate()?;
    domain.validate()?;
    let set = build_index_set(cfg);
    let coeffs = combination_coefficients(&set);
    let (imax, jmax) = max_levels(&set);
    let xs = lin_nodes(domain.k0, domain.k1, imax);
    let ys = lin_nodes(domain.t0, domain.t1, jmax);
    let nx = xs.len();
    let ny = ys.len();

    // Target values at every activated node, keyed by fine-grid position.
    let mut active = BTreeSet::new();
    for &(i, j) in coeffs.keys() {
        let si = 1usize << (imax - i);
        let sj = 1usize << (jmax - j);
        for a in 0..=(1usize << i) {
            for b in 0..=(1usize << j) {
                active.insert((a * si, b * sj));
            }
        }
    }
    let active: Vec<(usize, usize)> = active.into_iter().collect();
    let vals = par::map_range(active.len(), |n| {
        let (a, b) = active[n];
        target(xs[a], ys[b])
    });
    let mut fine_target = vec![f64::NAN; nx * ny];
    for (n, &(a, b)) in active.iter().enumerate() {
        if !vals[n].is_finite() {
            return Err(input(format!("target is not finite at ({}, {})", xs[a], ys[b])));
        }
        fine_target[b * nx + a] = vals[n];
    }

    // Sum of bilinear tensor interpolants, evaluated at every fine node.
    let mut fine = vec![0.0; nx * ny];
    for (&(i, j), &c) in &coeffs {
        let si = 1usize << (imax - i);
        let sj = 1usize << (jmax - j);
        for b in 0..ny {
            let b0 = (b / sj).min((1usize << j) - 1) * sj;
            let b1 = (b0 + sj).min(ny - 1);
            let ty = if b1 > b0 { (b - b0) as f64 / (b1 - b0) as f64 } else { 0.0 };
            for a in 0..nx {
                let ia = (a / si).min((1usize << i) - 1);
                let a0 = ia * si;
                let a1 = (a0 + si).min(nx - 1);
                let tx = if a1 > a0 { (a - a0) as f64 / (a1 - a0) as f64 } else { 0.0 };
                let g = |p: usize, q: usize| fine_target[q * nx + p];
                let v = (1.0 - tx) * (1.0 - ty) * g(a0, b0)
                    + tx * (1.0 - ty) * g(a1, b0)
                    + (1.0 - tx) * ty * g(a0, b1)
                    + tx * ty * g(a1, b1);
                fine[b * nx + a] += c as f64 * v;
            }
        }
    }
    let sparse_nodes = active.iter().map(|&(a, b)| [xs[a], ys[b]]).collect();
    let cpwl = tensor_cpwl(&xs, &ys, &fine)?;
    Ok(SmolyakFit { cpwl, index_set: set, coefficients: coeffs, sparse_nodes, fine_shape: (nx, ny) })
}

/// Weighted L2 error of `f` against `target` by midpoint quadrature on an
/// `m x m` grid of held-out points, normalised by the domain measure.
pub fn weighted_l2_error(
    f: &CpwlFunction,
    target: &(dyn Fn(f64, f64) -> f64 + Sync),
    weight: &(dyn Fn(f64, f64) -> f64 + Sync),
    domain: &Domain,
    m: usize,
) -> f64 {
    let rows = par::map_range(m, |j| {
        let y = domain.t0 + (domain.t1 - domain.t0) * (j as f64 + 0.5) / m as f64;
        (0..m)
            .map(|i| {
                let x = domain.k0 + (domain.k1 - domain.k0) * (i as f64 + 0.5) / m as f64;
                let e = f.eval([x, y]) - target(x, y);
                weight(x, y) * e * e
            })
            .sum::<f64>()
    });
    (rows.iter().sum::<f64>() / (m * m) as f64).sqrt()
}

/// Weighted PCA of strike sections.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PcaHead {
    /// `k` modes, each a strike vector, orthonormal in the weighted inner product.
    pub modes: Vec<Vec<f64>>,
    /// `k` coefficient series over maturities.
    pub coefficients: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub residual: f64,
}

impl PcaHead {
    pub fn reconstruct(&self, nt: usize, nk: usize) -> Vec<f64> {
        let mut out = vec![0.0; nt * nk];
        for (u, z) in self.modes.iter().zip(&self.coefficients) {
            for t in 0..nt {
                for k in 0..nk {
                    out[t * nk + k] += z[t] * u[k];
                }
            }
        }
        out
    }
}

/// PCA of a maturities-by-strikes matrix in the inner product
/// `<u, v> = sum_j omega_j u_j v_j`, via the strike-space Gram matrix.
pub fn pca_head(sections: &DMatrix<f64>, k: usize, strike_weights: &[f64]) -> Result<PcaHead> {
    let nt = sections.nrows();
    let nk = sections.ncols();
    if k == 0 || k > nt.min(nk) {
        return Err(dim(format!("k = {k} outside 1..={}", nt.min(nk))));
    }
    if strike_weights.len() != nk || strike_weights.iter().any(|w| !(*w > 0.0)) {
        return Err(dim("need one positive weight per strike"));
    }
    let sw: Vec<f64> = strike_weights.iter().map(|w| w.sqrt()).collect();
    let b = DMatrix::from_fn(nt, nk, |t, j| sections[(t, j)] * sw[j]);
    let gram = b.transpose() * &b;
    let eig = gram.symmetric_eigen();
    let mut order: Vec<usize> = (0..nk).collect();
    order.sort_by(|&a, &c| eig.eigenvalues[c].partial_cmp(&eig.eigenvalues[a]).unwrap().then(a.cmp(&c)));
    let mut modes = Vec::with_capacity(k);
    let mut coefficients = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    for &m in order.iter().take(k) {
        let v = eig.eigenvectors.column(m);
        let mut u: Vec<f64> = (0..nk).map(|j| v[j] / sw[j]).collect();
        let lead = (0..nk).max_by(|&a, &c| u[a].abs().partial_cmp(&u[c].abs()).unwrap().then(c.cmp(&a))).unwrap();
        if u[lead] < 0.0 {
            u.iter_mut().for_each(|x| *x = -*x);
        }
        let z: Vec<f64> = (0..nt).map(|t| (0..nk).map(|j| sections[(t, j)] * strike_weights[j] * u[j]).sum()).collect();
        modes.push(u);
        coefficients.push(z);
        eigenvalues.push(eig.eigenvalues[m].max(0.0));
    }
    let mut head = PcaHead { modes, coefficients, eigenvalues, residual: 0.0 };
    let rec = head.reconstruct(nt, nk);
    let mut r = 0.0;
    for t in 0..nt {
        for j in 0..nk {
            r += strike_weights[j] * (sections[(t, j)] - rec[t * nk + j]).powi(2);
        }
    }
    head.residual = r.sqrt();
    Ok(head)
}

/// Sparse affine layer `y = W x + b`, optionally rectified.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SparseLayer {
    pub n_in: usize,
    pub n_out: usize,
    /// Row-wise nonzeros `(column, weight)`.
    pub weights: Vec<Vec<(usize, f64)>>,
    pub biases: Vec<f64>,
    pub relu: bool,
}

impl SparseLayer {
    fn new(n_in: usize, relu: bool) -> Self {
        Self { n_in, n_out: 0, weights: Vec::new(), biases: Vec::new(), relu }
    }

    fn push(&mut self, row: Vec<(usize, f64)>, bias: f64) -> usize {
        self.weights.push(row.into_iter().filter(|(_, w)| *w != 0.0).collect());
        self.biases.push(bias);
        self.n_out += 1;
        self.n_out - 1
    }

    fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .iter()
            .zip(&self.biases)
            .map(|(row, b)| {
                let z = row.iter().fold(*b, |s, (c, w)| s + w * x[*c]);
                if self.relu {
                    z.max(0.0)
                } else {
                    z
                }
            })
            .collect()
    }

    fn params(&self) -> usize {
        self.weights.iter().map(|r| r.len()).sum::<usize>() + self.biases.iter().filter(|b| **b != 0.0).count()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReluNet {
    pub layers: Vec<SparseLayer>,
    /// Number of rectified layers.
    pub depth: usize,
    /// Nonzero weights plus nonzero biases.
    pub param_count: usize,
    pub vertex_count: usize,
    pub triangle_count: usize,
    pub max_valence: usize,
    /// Per-vertex constant `c1` and per-triangle constant `c2` of the size bound.
    pub c1: f64,
    pub c2: f64,
}

impl ReluNet {
    pub fn eval(&self, p: [f64; 2]) -> f64 {
        let mut x = vec![p[0], p[1]];
        for l in &self.layers {
            x = l.apply(&x);
        }
        x[0]
    }

    pub fn param_bound(&self) -> f64 {
        self.c1 * self.vertex_count as f64 + self.c2 * self.triangle_count as f64
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }
}

pub const D_MAX: usize = 8;
/// Size-bound constants of the comparator-tree construction: at most
/// `12 d + 13` parameters for a vertex of valence `d <= 8`, and the
/// valences sum to `3 M`.
pub const RELU_C1: f64 = 13.0;
pub const RELU_C2: f64 = 36.0;

/// Linear expression over the neurons of the previous layer (or inputs).
type Lin = (Vec<(usize, f64)>, f64);

fn lin_scale(a: &Lin, s: f64) -> Lin {
    (a.0.iter().map(|(i, w)| (*i, w * s)).collect(), a.1 * s)
}

fn lin_sub(a: &Lin, b: &Lin) -> Lin {
    let mut m: BTreeMap<usize, f64> = BTreeMap::new();
    for (i, w) in &a.0 {
        *m.entry(*i).or_default() += w;
    }
    for (i, w) in &b.0 {
        *m.entry(*i).or_default() -= w;
    }
    (m.into_iter().filter(|(_, w)| *w != 0.0).collect(), a.1 - b.1)
}

/// Compile a CPWL function to a ReLU network that reproduces it exactly.
///
/// Each vertex hat is `max(0, min_T lambda_{v,T})`; the minimum is taken by
/// a balanced comparator tree using `min(u, v) = u - relu(u - v)` with the
/// pass-through `u = relu(u) - relu(-u)`, followed by one truncation layer.
pub fn compile_to_relu(f: &CpwlFunction) -> Result<ReluNet> {
    f.check_structure()?;
    let stars = f.stars();
    let max_valence = stars.iter().map(|s| s.len()).max().unwrap_or(0);
    if max_valence > D_MAX {
        return Err(Error::Structure(format!("vertex valence {max_valence} exceeds {D_MAX}")));
    }
    // Per-vertex affine barycentric pieces.
    let mut pieces: Vec<Vec<[f64; 3]>> = Vec::with_capacity(f.vertices.len());
    for (v, star) in stars.iter().enumerate() {
        let mut ls = Vec::with_capacity(star.len());
        for &t in star {
            let tri = f.triangles[t];
            let pos = tri.iter().position(|&x| x == v).unwrap();
            let a = f.vertices[tri[pos]];
            let b = f.vertices[tri[(pos + 1) % 3]];
            let c = f.vertices[tri[(pos + 2) % 3]];
            ls.push(bary_affine(a, b, c));
        }
        // The min formula needs lambda_T <= lambda_T' on T for all T' in the star.
        for (ti, &t) in star.iter().enumerate() {
            for &vert in &f.triangles[t] {
                let p = f.vertices[vert];
                let own = ls[ti][0] * p[0] + ls[ti][1] * p[1] + ls[ti][2];
                for other in &ls {
                    let val = other[0] * p[0] + other[1] * p[1] + other[2];
                    if val < own - 1e-9 {
                        return Err(Error::Structure(format!("star of vertex {v} is not convex")));
                    }
                }
            }
        }
        pieces.push(ls);
    }
    let levels = |d: usize| -> usize {
        let mut n = d;
        let mut l = 0;
        while n > 1 {
            n = n.div_ceil(2);
            l += 1;
        }
        l
    };
    let depth = pieces.iter().filter(|p| !p.is_empty()).map(|p| levels(p.len()) + 1).max().unwrap_or(1);

    // Current linear expressions per vertex, in terms of the previous layer.
    let mut cur: Vec<Vec<Lin>> = pieces
        .iter()
        .map(|ls| ls.iter().map(|a| (vec![(0usize, a[0]), (1usize, a[1])], a[2])).collect())
        .collect();
    let mut done: Vec<Option<Lin>> = vec![None; f.vertices.len()];
    let mut layers = Vec::with_capacity(depth + 1);
    let mut n_in = 2;
    for _ in 0..depth {
        let mut layer = SparseLayer::new(n_in, true);
        let mut next: Vec<Vec<Lin>> = vec![Vec::new(); cur.len()];
        for v in 0..cur.len() {
            if let Some(h) = &done[v] {
                // Hat value is nonnegative: one rectified carry.
                let id = layer.push(h.0.clone(), h.1);
                done[v] = Some((vec![(id, 1.0)], 0.0));
                continue;
            }
            let items = &cur[v];
            if items.is_empty() {
                continue;
            }
            if items.len() == 1 {
                let id = layer.push(items[0].0.clone(), items[0].1);
                done[v] = Some((vec![(id, 1.0)], 0.0));
                continue;
            }
            let mut out = Vec::with_capacity(items.len().div_ceil(2));
            for pair in items.chunks(2) {
                let u = &pair[0];
                let p = layer.push(u.0.clone(), u.1);
                let m = {
                    let nu = lin_scale(u, -1.0);
                    layer.push(nu.0, nu.1)
                };
                if pair.len() == 2 {
                    let d = lin_sub(u, &pair[1]);
                    let r = layer.push(d.0, d.1);
                    out.push((vec![(p, 1.0), (m, -1.0), (r, -1.0)], 0.0));
                } else {
                    out.push((vec![(p, 1.0), (m, -1.0)], 0.0));
                }
            }
            next[v] = out;
        }
        n_in = layer.n_out;
        layers.push(layer);
        cur = next;
    }
    let mut out_layer = SparseLayer::new(n_in, false);
    let mut row = Vec::new();
    for (v, h) in done.iter().enumerate() {
        if let Some(h) = h {
            for (i, w) in &h.0 {
                row.push((*i, w * f.nodal_values[v]));
            }
        }
    }
    out_layer.push(row, 0.0);
    layers.push(out_layer);
    let param_count = layers.iter().map(|l| l.params()).sum();
    Ok(ReluNet {
        depth: layers.iter().filter(|l| l.relu).count(),
        layers,
        param_count,
        vertex_count: f.vertices.len(),
        triangle_count: f.triangles.len(),
        max_valence,
        c1: RELU_C1,
        c2: RELU_C2,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LipschitzAudit {
    pub lip_emp: f64,
    pub lip_g: f64,
    pub norm_a: f64,
    pub c3: f64,
}

/// Empirical Lipschitz constant of the net over random point pairs in the
/// domain, with `c3 = lip_emp / (||A|| Lip(g))` where `A` maps the domain to
/// the unit square and `g` is the CPWL function in unit coordinates.
pub fn lipschitz_audit(net: &ReluNet, f: &CpwlFunction, domain: &Domain, pairs: usize, seed: u64) -> LipschitzAudit {
    let wk = domain.k1 - domain.k0;
    let wt = domain.t1 - domain.t0;
    let norm_a = (1.0 / wk).max(1.0 / wt);
    let lip_g = f.lipschitz(1.0 / wk, 1.0 / wt);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lip_emp = 0.0f64;
    for _ in 0..pairs {
        let p = [rng.random_range(domain.k0..domain.k1), rng.random_range(domain.t0..domain.t1)];
        let r = 0.05 * wk.min(wt) * rng.random::<f64>();
        let ang = rng.random_range(0.0..std::f64::consts::TAU);
        let q = [
            (p[0] + r * ang.cos()).clamp(domain.k0, domain.k1),
            (p[1] + r * ang.sin()).clamp(domain.t0, domain.t1),
        ];
        let d = ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        if d > 1e-9 * wk.min(wt) {
            lip_emp = lip_emp.max((net.eval(p) - net.eval(q)).abs() / d);
        }
    }
    let denom = norm_a * lip_g;
    LipschitzAudit { lip_emp, lip_g, norm_a, c3: if denom > 0.0 { lip_emp / denom } else { 0.0 } }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrontierRow {
    pub level: u32,
    pub node_count: usize,
    pub sparse_nodes: usize,
    pub param_count: usize,
    pub weighted_error: f64,
    /// Running minimum of the error over the levels so far.
    pub error_envelope: f64,
    pub wall_seconds: f64,
}

/// One row per level: realised vertex count, ReLU size, held-out weighted
/// error and wall time of fit plus compile.
pub fn error_frontier(
    target: &(dyn Fn(f64, f64) -> f64 + Sync),
    weight: &(dyn Fn(f64, f64) -> f64 + Sync),
    levels: &[u32],
    cfg: &AnisotropyConfig,
    domain: &Domain,
    eval_points: usize,
) -> Result<Vec<FrontierRow>> {
    if levels.is_empty() || levels.windows(2).any(|p| p[1] <= p[0]) {
        return Err(input("levels must be nonempty and strictly ascending"));
    }
    let mut rows = Vec::with_capacity(levels.len());
    let mut env = f64::INFINITY;
    for &l in levels {
        let start = Instant::now();
        let c = cfg.with_level(l);
        let fit = smolyak_fit(target, &c, domain)?;
        let net = compile_to_relu(&fit.cpwl)?;
        let wall_seconds = start.elapsed().as_secs_f64();
        let err = weighted_l2_error(&fit.cpwl, target, weight, domain, eval_points);
        env = env.min(err);
        rows.push(FrontierRow {
            level: l,
            node_count: fit.cpwl.vertices.len(),
            sparse_nodes: fit.sparse_nodes.len(),
            param_count: net.param_count,
            weighted_error: err,
            error_envelope: env,
            wall_seconds,
        });
    }
    Ok(rows)
}

pub fn frontier_csv(rows: &[FrontierRow]) -> String {
    let mut s = String::from("level,node_count,param_count,error,wall_seconds\n");
    for r in rows {
        s.push_str(&format!("{},{},{},{:.12e},{:.6}\n", r.level, r.node_count, r.param_count, r.weighted_error, r.wall_seconds));
    }
    s
}
