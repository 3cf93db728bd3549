//! Path-graph Laplacian on the maturity axis and a projected stochastic
//! descent harness with proximal pulls.
//!
//! The chain term is the Dirichlet energy `Σ_e w_e ‖ψ(x_e) − ψ(x_{e+1})‖²`,
//! which equals `tr(Ψᵀ L Ψ)` for the weighted path Laplacian `L`. The data
//! term is a quadratic fit to fixed targets.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{dim, input, Result};
use crate::Error;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PathGraph {
    pub t: usize,
    pub edge_weights: Vec<f64>,
    #[serde(skip)]
    pub laplacian: DMatrix<f64>,
    /// Ascending eigenvalues of the Laplacian.
    pub eigenvalues: Vec<f64>,
    pub lambda2: f64,
    /// Largest eigenvalue, i.e. the spectral norm of `L`.
    pub lambda_max: f64,
    /// Unit eigenvector of `lambda2`, sign fixed so the first entry is nonnegative.
    pub fiedler: Vec<f64>,
}

pub fn path_laplacian(t: usize, edge_weights: &[f64]) -> Result<PathGraph> {
    if t < 2 {
        return Err(dim(format!("path graph needs at least 2 nodes, got {t}")));
    }
    if edge_weights.len() != t - 1 {
        return Err(dim(format!("{} edge weights for {t} nodes", edge_weights.len())));
    }
    if edge_weights.iter().any(|w| !w.is_finite() || *w <= 0.0) {
        return Err(input("edge weights must be positive"));
    }
    let mut l = DMatrix::zeros(t, t);
    for (e, w) in edge_weights.iter().enumerate() {
        l[(e, e)] += w;
        l[(e + 1, e + 1)] += w;
        l[(e, e + 1)] -= w;
        l[(e + 1, e)] -= w;
    }
    let eig: SymmetricEigen<f64, nalgebra::Dyn> = SymmetricEigen::new(l.clone());
    let mut order: Vec<usize> = (0..t).collect();
    order.sort_by(|a, b| eig.eigenvalues[*a].total_cmp(&eig.eigenvalues[*b]));
    let eigenvalues: Vec<f64> = order.iter().map(|i| eig.eigenvalues[*i]).collect();
    let mut fiedler: Vec<f64> = eig.eigenvectors.column(order[1]).iter().copied().collect();
    if fiedler[0] < 0.0 {
        fiedler.iter_mut().for_each(|v| *v = -*v);
    }
    Ok(PathGraph {
        fiedler,
        t,
        edge_weights: edge_weights.to_vec(),
        laplacian: l,
        lambda2: eigenvalues[1],
        lambda_max: eigenvalues[t - 1],
        eigenvalues,
    })
}

/// Unit-weight path scaled so that its spectral gap equals `lambda2`.
pub fn path_with_gap(t: usize, lambda2: f64) -> Result<PathGraph> {
    if !(lambda2 > 0.0) {
        return Err(input("target spectral gap must be positive"));
    }
    let unit = path_laplacian(t, &vec![1.0; t.saturating_sub(1)])?;
    path_laplacian(t, &vec![lambda2 / unit.lambda2; t - 1])
}

/// Start states `v_i · d + jitter·u_i` with `v` the Fiedler vector, `d` a
/// random unit direction and `u` uniform noise. Concentrating the initial
/// energy on the slowest mode makes the measured decay rate track `lambda2`;
/// the eigenvectors of [`path_with_gap`] graphs do not depend on the gap, so
/// one start serves a whole sweep.
pub fn fiedler_start(graph: &PathGraph, dim: usize, jitter: f64, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = d.iter().map(|v: &f64| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    graph
        .fiedler
        .iter()
        .map(|v| d.iter().map(|x| v * x / norm + jitter * rand::Rng::random_range(&mut rng, -1.0..1.0)).collect())
        .collect()
}

/// Feature map applied to each state before measuring chain energy.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureMap {
    Identity,
    /// Random Fourier features `sqrt(2/D) cos(ω·x + b)` with `ω ~ N(0, 1/scale²)`.
    RandomFourier { dim: usize, scale: f64, seed: u64 },
}

impl FeatureMap {
    pub fn embed(&self, states: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        match *self {
            FeatureMap::Identity => Ok(states.to_vec()),
            FeatureMap::RandomFourier { dim: d, scale, seed } => {
                if d == 0 || !(scale > 0.0) {
                    return Err(input("random features need dim > 0 and scale > 0"));
                }
                let p = states.first().map_or(0, Vec::len);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let omega: Vec<f64> = (0..d * p)
                    .map(|_| StandardNormal.sample(&mut rng))
                    .map(|z: f64| z / scale)
                    .collect();
                let phase: Vec<f64> = (0..d)
                    .map(|_| rand::Rng::random_range(&mut rng, 0.0..std::f64::consts::TAU))
                    .collect();
                let amp = (2.0 / d as f64).sqrt();
                Ok(states
                    .iter()
                    .map(|x| {
                        (0..d)
                            .map(|j| {
                                let dot: f64 = omega[j * p..(j + 1) * p].iter().zip(x).map(|(a, b)| a * b).sum();
                                amp * (dot + phase[j]).cos()
                            })
                            .collect()
                    })
                    .collect())
            }
        }
    }
}

fn check_states(states: &[Vec<f64>], graph: &PathGraph) -> Result<usize> {
    if states.len() != graph.t {
        return Err(dim(format!("{} states for a {}-node graph", states.len(), graph.t)));
    }
    let p = states[0].len();
    if states.iter().any(|s| s.len() != p) {
        return Err(dim("states have unequal lengths"));
    }
    Ok(p)
}

fn edge_sum(states: &[Vec<f64>], graph: &PathGraph) -> f64 {
    graph
        .edge_weights
        .iter()
        .enumerate()
        .map(|(e, w)| {
            w * states[e]
                .iter()
                .zip(&states[e + 1])
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
        })
        .sum()
}

fn trace_form(states: &[Vec<f64>], graph: &PathGraph) -> f64 {
    let (t, p) = (graph.t, states[0].len());
    let psi = DMatrix::from_fn(t, p, |i, j| states[i][j]);
    (psi.transpose() * &graph.laplacian * &psi).trace()
}

/// Dirichlet energy of the chain, computed as an edge sum and as
/// `tr(Ψᵀ L Ψ)`; the two must agree to 1e-10 relative.
pub fn chain_dirichlet_energy(states: &[Vec<f64>], graph: &PathGraph) -> Result<f64> {
    check_states(states, graph)?;
    let a = edge_sum(states, graph);
    let b = trace_form(states, graph);
    if (a - b).abs() > 1e-10 * a.abs().max(b.abs()).max(1.0) {
        return Err(Error::Structure(format!("edge-sum energy {a} and trace form {b} disagree")));
    }
    Ok(a)
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DescentConfig {
    /// Proximal mixing in `x ← (1−α)x + αΠx`.
    pub alpha: f64,
    /// Step schedule `η_t = eta0 / (t + 1)`.
    pub eta0: f64,
    pub noise_sigma: f64,
    pub lambda_chain: f64,
    /// Weight of the quadratic data-fit term.
    pub data_weight: f64,
    pub steps: usize,
    /// Reject steps whose chain energy exceeds the previous one by more
    /// than this relative tolerance. `None` disables the trust region.
    pub trust_tol: Option<f64>,
}

impl Default for DescentConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            eta0: 0.05,
            noise_sigma: 0.0,
            lambda_chain: 1.0,
            data_weight: 1.0,
            steps: 200,
            trust_tol: Some(1e-6),
        }
    }
}

impl DescentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Config(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.eta0 > 0.0) || !(self.noise_sigma >= 0.0) || !(self.lambda_chain >= 0.0) || !(self.data_weight >= 0.0) {
            return Err(Error::Config("eta0 must be positive; noise, lambda_chain and data_weight nonnegative".into()));
        }
        if let Some(t) = self.trust_tol {
            if !(t >= 0.0) {
                return Err(Error::Config("trust tolerance must be nonnegative".into()));
            }
        }
        Ok(())
    }

    pub fn step_size(&self, t: usize) -> f64 {
        self.eta0 / (t as f64 + 1.0)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub chain_energy: f64,
    pub data_fit: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    pub final_states: Vec<Vec<f64>>,
    pub rejected: usize,
}

impl Trajectory {
    pub fn energies(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.chain_energy).collect()
    }
}

/// Projector applied to the whole chain during the proximal pull.
pub type Projector<'a> = dyn Fn(&[Vec<f64>]) -> Result<Vec<Vec<f64>>> + Sync + 'a;

pub fn identity_projector(states: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    Ok(states.to_vec())
}

fn data_fit(states: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    0.5 * states
        .iter()
        .zip(targets)
        .map(|(s, y)| s.iter().zip(y).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum::<f64>()
}

/// Noisy gradient steps on `data_weight·½‖x − y‖² + λ·tr(XᵀLX)` followed by
/// the proximal pull. Point 0 of the trajectory is the initial state.
pub fn projected_descent(
    initial: &[Vec<f64>],
    targets: &[Vec<f64>],
    graph: &PathGraph,
    projector: &Projector<'_>,
    cfg: &DescentConfig,
    seed: u64,
) -> Result<Trajectory> {
    cfg.validate()?;
    let p = check_states(initial, graph)?;
    check_states(targets, graph)?;
    if targets[0].len() != p {
        return Err(dim("targets and states have different lengths"));
    }
    let t_nodes = graph.t;
    let l = &graph.laplacian;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = initial.to_vec();
    let mut energy = chain_dirichlet_energy(&x, graph)?;
    let mut points = vec![TrajectoryPoint { step: 0, chain_energy: energy, data_fit: data_fit(&x, targets), accepted: true }];
    let mut rejected = 0;
    for step in 0..cfg.steps {
        let eta = cfg.step_size(step);
        let mut trial = x.clone();
        for i in 0..t_nodes {
            for j in 0..p {
                let lx: f64 = (0..t_nodes).map(|m| l[(i, m)] * x[m][j]).sum();
                let z: f64 = StandardNormal.sample(&mut rng);
                let g = cfg.data_weight * (x[i][j] - targets[i][j]) + 2.0 * cfg.lambda_chain * lx + cfg.noise_sigma * z;
                trial[i][j] -= eta * g;
            }
        }
        let proj = projector(&trial)?;
        if proj.len() != t_nodes || proj.iter().any(|s| s.len() != p) {
            return Err(dim("projector changed the state shape"));
        }
        for (s, q) in trial.iter_mut().zip(&proj) {
            for (a, b) in s.iter_mut().zip(q) {
                *a = (1.0 - cfg.alpha) * *a + cfg.alpha * b;
            }
        }
        let e_new = chain_dirichlet_energy(&trial, graph)?;
        let accepted = match cfg.trust_tol {
            Some(tol) => e_new <= energy * (1.0 + tol),
            None => true,
        };
        if accepted {
            x = trial;
            energy = e_new;
        } else {
            rejected += 1;
        }
        points.push(TrajectoryPoint { step: step + 1, chain_energy: energy, data_fit: data_fit(&x, targets), accepted });
    }
    Ok(Trajectory { points, final_states: x, rejected })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecayFit {
    pub lambda2: f64,
    /// OLS slope of `log(mean energy)` against the step index.
    pub log_slope: f64,
    /// Fitted per-step contraction `1 − exp(log_slope)`.
    pub contraction: f64,
    pub mean_energy: Vec<f64>,
}

/// Monte-Carlo decay experiment: mean chain energy over `seeds` replicas
/// of a pure chain descent (`data_weight = 0`) from the given start.
pub fn decay_experiment(
    initial: &[Vec<f64>],
    graph: &PathGraph,
    projector: &Projector<'_>,
    cfg: &DescentConfig,
    seeds: usize,
    base_seed: u64,
) -> Result<DecayFit> {
    if seeds == 0 {
        return Err(input("need at least one replica"));
    }
    let targets = initial.to_vec();
    let cfg = DescentConfig { data_weight: 0.0, ..cfg.clone() };
    let runs = crate::par::map_range(seeds, |s| {
        projected_descent(initial, &targets, graph, projector, &cfg, base_seed.wrapping_add(s as u64))
    });
    let mut mean = vec![0.0; cfg.steps + 1];
    for r in runs {
        for (m, e) in mean.iter_mut().zip(r?.energies()) {
            *m += e / seeds as f64;
        }
    }
    let logs: Vec<(f64, f64)> = mean
        .iter()
        .enumerate()
        .filter(|(_, e)| **e > 0.0)
        .map(|(t, e)| (t as f64, e.ln()))
        .collect();
    if logs.len() < 2 {
        return Err(Error::Degenerate("chain energy vanished immediately".into()));
    }
    let n = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / n;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = logs.iter().map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = logs.iter().map(|(x, _)| (x - mx).powi(2)).sum();
    let log_slope = sxy / sxx;
    Ok(DecayFit { lambda2: graph.lambda2, log_slope, contraction: 1.0 - log_slope.exp(), mean_energy: mean })
}
