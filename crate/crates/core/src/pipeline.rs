//! Run configuration and the end-to-end pipeline.
//!
//! Stages run in a fixed order: generate, C1 fit and compile, bridge per
//! maturity triad, projection, chain statistics, descent harness and risk
//! assembly. Each stage returns a serialisable report so a front-end can
//! cache it and resume from it. The summary carries, for every threshold
//! decision, the measured value, the threshold and the verdict.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::cemot::{marginal_mean_gap, solve_bridge, tilt_to_mean, CertificateSet, FeatureKind, SolverConfig, TraceEntry, TriMarginalProblem};
use crate::chain_descent::{decay_experiment, fiedler_start, path_laplacian, path_with_gap, projected_descent, DescentConfig, DecayFit, TrajectoryPoint};
use crate::chain_stats::{chain_energy, estimate_alpha, gate_v2, n_eff, ChainSeries, GateConfig, GateDecision, MmdMode};
use crate::error::{Error, Result};
use crate::fd::FdConfig;
use crate::grid::{check_mesh_admissibility, weighted_dist, weighted_norm, AdmissibilityReport, Grid2D, Surface, WeightField};
use crate::projection::{is_feasible, project_to_cone, projection_certificates, Direction, ProjectionConfig};
use crate::risk::{assemble_risk, eps_prox, RiskBudget, RiskConstants, RiskInputs};
use crate::smolyak::{compile_to_relu, error_frontier, lipschitz_audit, smolyak_fit, tensor_cpwl, AnisotropyConfig, Domain, FrontierRow, LipschitzAudit};
use crate::synth::{bs_call, extract_density, generate_surface, sample_clouds, MarketParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub k0: f64,
    pub k1: f64,
    pub nk: usize,
    pub t0: f64,
    pub t1: f64,
    pub nt: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { k0: 80.0, k1: 120.0, nk: 31, t0: 0.25, t1: 1.25, nt: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    Uniform,
    Vega,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WeightConfig {
    pub kind: WeightKind,
    pub rel_width: f64,
    pub floor: f64,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self { kind: WeightKind::Vega, rel_width: 0.15, floor: 0.2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeshConfig {
    /// Admissibility constants: `h_K <= c1 * envelope_K`, `h_tau <= c2 * envelope_tau`.
    pub c1: f64,
    pub c2: f64,
}

impl Default for MeshConfig {
    fn default() -> Self {
        Self { c1: 500.0, c2: 10.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct C1Config {
    pub beta_k: u32,
    pub beta_tau: u32,
    pub level: u32,
    pub frontier_levels: Vec<u32>,
    pub eval_points: usize,
    pub relu_check_points: usize,
    pub lipschitz_pairs: usize,
}

impl Default for C1Config {
    fn default() -> Self {
        Self {
            beta_k: 1,
            beta_tau: 1,
            level: 5,
            frontier_levels: vec![2, 3, 4, 5],
            eval_points: 64,
            relu_check_points: 10_000,
            lipschitz_pairs: 2_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BridgeConfig {
    /// Maturity index triples `(t1, t2, t3)`.
    pub triads: Vec<[usize; 3]>,
    /// Support points are `x_scale * K`.
    pub x_scale: f64,
    pub epsilon_schedule: Vec<f64>,
    pub feature_kind: FeatureKind,
    pub rank: Option<usize>,
    pub solver: SolverConfig,
}

impl Default for BridgeConfig {
    fn default() -> Self {
        Self {
            triads: vec![[0, 1, 2], [1, 2, 3], [2, 3, 4]],
            x_scale: 0.1,
            epsilon_schedule: vec![1.0, 0.3, 0.1, 0.03],
            feature_kind: FeatureKind::Dense,
            rank: None,
            solver: SolverConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectionStageConfig {
    pub tv2_lambda: f64,
    pub dykstra_rounds: usize,
    pub path_steps: usize,
    pub lipschitz_trials: usize,
}

impl Default for ProjectionStageConfig {
    fn default() -> Self {
        let p = ProjectionConfig::default();
        Self { tv2_lambda: p.tv2_lambda, dykstra_rounds: p.dykstra_rounds, path_steps: p.path_steps, lipschitz_trials: 200 }
    }
}

impl ProjectionStageConfig {
    pub fn projection(&self) -> ProjectionConfig {
        ProjectionConfig { tv2_lambda: self.tv2_lambda, dykstra_rounds: self.dykstra_rounds, path_steps: self.path_steps }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    /// Samples drawn per maturity; the series uses prefixes of these clouds.
    pub samples: usize,
    pub size_step: usize,
    pub points: usize,
    pub octaves: Vec<i32>,
    pub mode: MmdMode,
    pub tail_fraction: f64,
    pub window: Option<usize>,
    pub fir_halfwidth: usize,
    pub band_c: f64,
    pub delta: f64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            samples: 800,
            size_step: 20,
            points: 40,
            octaves: vec![-1, 0, 1],
            mode: MmdMode::Full,
            tail_fraction: 0.1,
            window: None,
            fir_halfwidth: 6,
            band_c: 1.0,
            delta: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DescentStageConfig {
    pub alpha: f64,
    pub eta0: f64,
    pub noise_sigma: f64,
    pub lambda_chain: f64,
    pub data_weight: f64,
    pub steps: usize,
    pub trust_tol: Option<f64>,
    /// Spectral gaps of the Monte-Carlo decay sweep.
    pub sweep_lambda2: Vec<f64>,
    pub sweep_nodes: usize,
    pub sweep_dim: usize,
    /// Isotropic jitter added to the Fiedler-mode start of the sweep.
    pub sweep_jitter: f64,
    pub sweep_steps: usize,
    pub sweep_seeds: usize,
    pub sweep_noise: f64,
    pub sweep_eta0: f64,
}

impl Default for DescentStageConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            eta0: 0.05,
            noise_sigma: 0.0,
            lambda_chain: 0.1,
            data_weight: 1.0,
            steps: 50,
            trust_tol: Some(1e-6),
            sweep_lambda2: vec![0.5, 1.0, 2.0],
            sweep_nodes: 6,
            sweep_dim: 4,
            sweep_jitter: 0.05,
            sweep_steps: 500,
            sweep_seeds: 20,
            sweep_noise: 0.01,
            sweep_eta0: 0.02,
        }
    }
}

impl DescentStageConfig {
    pub fn descent(&self) -> DescentConfig {
        DescentConfig {
            alpha: self.alpha,
            eta0: self.eta0,
            noise_sigma: self.noise_sigma,
            lambda_chain: self.lambda_chain,
            data_weight: self.data_weight,
            steps: self.steps,
            trust_tol: self.trust_tol,
        }
    }

    pub fn sweep(&self) -> DescentConfig {
        DescentConfig {
            alpha: 1.0,
            eta0: self.sweep_eta0,
            noise_sigma: self.sweep_noise,
            lambda_chain: 1.0,
            data_weight: 0.0,
            steps: self.sweep_steps,
            trust_tol: self.trust_tol,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Thresholds {
    pub kkt_max: f64,
    pub r_geo_max: f64,
    pub mu_min: f64,
    pub mu_max: f64,
    pub slope_max: f64,
    pub area_min: f64,
    pub lipschitz_max: f64,
    pub relu_max_abs: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            kkt_max: 0.24,
            r_geo_max: 1.05,
            mu_min: 1e-4,
            mu_max: 1e-1,
            slope_max: 0.12,
            area_min: -0.02,
            lipschitz_max: 1.01,
            relu_max_abs: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    pub market: MarketParams,
    pub grid: GridConfig,
    pub weights: WeightConfig,
    pub mesh: MeshConfig,
    pub fd: FdConfig,
    pub c1: C1Config,
    pub bridge: BridgeConfig,
    pub projection: ProjectionStageConfig,
    pub chain: ChainConfig,
    pub descent: DescentStageConfig,
    pub risk: RiskConstants,
    pub thresholds: Thresholds,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            market: MarketParams::default(),
            grid: GridConfig::default(),
            weights: WeightConfig::default(),
            mesh: MeshConfig::default(),
            fd: FdConfig::default(),
            c1: C1Config::default(),
            bridge: BridgeConfig::default(),
            projection: ProjectionStageConfig::default(),
            chain: ChainConfig::default(),
            descent: DescentStageConfig::default(),
            risk: RiskConstants { c_erm: 2.0, ..RiskConstants::default() },
            thresholds: Thresholds::default(),
        }
    }
}

impl RunConfig {
    pub fn build_grid(&self) -> Result<Grid2D> {
        let g = &self.grid;
        Grid2D::uniform(g.k0, g.k1, g.nk, g.t0, g.t1, g.nt)
    }

    pub fn validate(&self) -> Result<()> {
        let grid = self.build_grid()?;
        self.fd.validate(&grid)?;
        self.bridge.solver.validate()?;
        self.projection.projection().validate()?;
        self.descent.descent().validate()?;
        self.gate_config().validate()?;
        let nt = grid.n_maturities();
        if self.bridge.triads.iter().any(|t| t.iter().any(|i| *i >= nt)) {
            return Err(Error::Config("bridge triad refers to a missing maturity".into()));
        }
        if self.chain.size_step * self.chain.points > self.chain.samples {
            return Err(Error::Config("chain series needs size_step * points <= samples".into()));
        }
        if !self.c1.frontier_levels.contains(&self.c1.level) {
            return Err(Error::Config("c1.level must be one of c1.frontier_levels".into()));
        }
        let t = &self.thresholds;
        if !(t.mu_min <= t.mu_max) {
            return Err(Error::Config("thresholds.mu_min exceeds mu_max".into()));
        }
        Ok(())
    }

    pub fn gate_config(&self) -> GateConfig {
        GateConfig {
            slope_max: self.thresholds.slope_max,
            area_min: self.thresholds.area_min,
            tail_fraction: self.chain.tail_fraction,
            window: self.chain.window,
            fir_halfwidth: self.chain.fir_halfwidth,
            direction: Direction::NonIncreasing,
            band_c: self.chain.band_c,
            delta: self.chain.delta,
        }
    }

    fn market(&self) -> MarketParams {
        MarketParams { seed: self.seed, ..self.market.clone() }
    }

    fn domain(&self) -> Domain {
        Domain { k0: self.grid.k0, k1: self.grid.k1, t0: self.grid.t0, t1: self.grid.t1 }
    }

    fn stream(&self, stage: u64) -> u64 {
        self.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(stage)
    }
}

/// One threshold decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub stage: String,
    pub name: String,
    pub value: f64,
    pub threshold: Value,
    pub pass: bool,
}

fn gate_le(stage: &str, name: &str, value: f64, max: f64) -> Gate {
    Gate { stage: stage.into(), name: name.into(), value, threshold: json!({ "max": max }), pass: value <= max }
}

fn gate_ge(stage: &str, name: &str, value: f64, min: f64) -> Gate {
    Gate { stage: stage.into(), name: name.into(), value, threshold: json!({ "min": min }), pass: value >= min }
}

fn gate_in(stage: &str, name: &str, value: f64, lo: f64, hi: f64) -> Gate {
    Gate { stage: stage.into(), name: name.into(), value, threshold: json!({ "min": lo, "max": hi }), pass: value >= lo && value <= hi }
}

fn gate_flag(stage: &str, name: &str, ok: bool) -> Gate {
    Gate { stage: stage.into(), name: name.into(), value: if ok { 1.0 } else { 0.0 }, threshold: json!({ "equals": 1.0 }), pass: ok }
}

// ---------------------------------------------------------------- generate

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Generated {
    pub grid: Grid2D,
    pub weights: WeightField,
    pub clean: Surface,
    pub observed: Surface,
    pub admissibility: AdmissibilityReport,
}

pub fn stage_generate(cfg: &RunConfig) -> Result<Generated> {
    let grid = cfg.build_grid()?;
    let market = cfg.market();
    let weights = match cfg.weights.kind {
        WeightKind::Uniform => WeightField::uniform(&grid),
        WeightKind::Vega => WeightField::vega_bump(&grid, market.spot, cfg.weights.rel_width, cfg.weights.floor)?,
    };
    let (clean, observed) = generate_surface(&market, &grid)?;
    let admissibility = check_mesh_admissibility(&clean, &grid, cfg.mesh.c1, cfg.mesh.c2)?;
    Ok(Generated { grid, weights, clean, observed, admissibility })
}

// ---------------------------------------------------------------- C1

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct C1Report {
    pub level: u32,
    pub frontier: Vec<FrontierRow>,
    pub vertex_count: usize,
    pub triangle_count: usize,
    pub relu_depth: usize,
    pub relu_params: usize,
    pub relu_param_bound: f64,
    pub relu_max_abs: f64,
    pub lipschitz: LipschitzAudit,
    /// `‖G − C*‖_w / Z` on the grid, with `G` the constructive approximant.
    pub c1_error: f64,
    /// Held-out weighted error of the data fit, normalised by `Z`.
    pub erm_term: f64,
    pub z: f64,
    /// Constructive approximant on the grid.
    pub approx: Surface,
    /// Data fit from the observed training nodes, on the grid.
    pub fitted: Surface,
}

pub fn stage_fit(cfg: &RunConfig, gen: &Generated) -> Result<C1Report> {
    let grid = &gen.grid;
    let w = &gen.weights;
    let m = cfg.market();
    let domain = cfg.domain();
    let ani = AnisotropyConfig::new(cfg.c1.beta_k, cfg.c1.beta_tau, cfg.c1.level)?;
    let truth = move |k: f64, t: f64| bs_call(m.spot, k, t, m.rate, m.dividend, m.vol.sigma(k, m.spot));
    let spot = m.spot;
    let weight = move |k: f64, t: f64| {
        let z = (k - spot) / (0.15 * spot);
        0.2 + t.sqrt() * (-0.5 * z * z).exp()
    };
    let frontier = error_frontier(&truth, &weight, &cfg.c1.frontier_levels, &ani, &domain, cfg.c1.eval_points)?;

    let fit = smolyak_fit(&truth, &ani, &domain)?;
    let net = compile_to_relu(&fit.cpwl)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.stream(1));
    let pts: Vec<[f64; 2]> = (0..cfg.c1.relu_check_points)
        .map(|_| [rng.random_range(domain.k0..domain.k1), rng.random_range(domain.t0..domain.t1)])
        .collect();
    let diffs = crate::par::map_range(pts.len(), |i| (net.eval(pts[i]) - fit.cpwl.eval(pts[i])).abs());
    let relu_max_abs = diffs.iter().cloned().fold(0.0, f64::max);
    let lipschitz = lipschitz_audit(&net, &fit.cpwl, &domain, cfg.c1.lipschitz_pairs, cfg.stream(2));

    let approx = Surface::from_fn(grid, |k, t| fit.cpwl.eval([k, t]))?;
    let z = weighted_norm(&gen.clean.values, w, grid)?;
    let c1_error = weighted_dist(&approx.values, &gen.clean.values, w, grid)? / z;

    // Data fit: interpolate the observed surface on even strike nodes and
    // score it on the held-out odd nodes.
    let nk = grid.n_strikes();
    let train: Vec<usize> = (0..nk).step_by(2).chain(if nk % 2 == 0 { Some(nk - 1) } else { None }).collect();
    let train_k: Vec<f64> = train.iter().map(|k| grid.strikes[*k]).collect();
    let train_v: Vec<f64> = (0..grid.n_maturities())
        .flat_map(|t| train.iter().map(move |k| (t, *k)))
        .map(|(t, k)| gen.observed.at(t, k))
        .collect();
    let data_fn = tensor_cpwl(&train_k, &grid.maturities, &train_v)?;
    let data_fit = smolyak_fit(&|k, t| data_fn.eval([k, t]), &ani, &domain)?;
    let fitted = Surface::from_fn(grid, |k, t| data_fit.cpwl.eval([k, t]))?;
    let q = grid.quadrature();
    let (mut num, mut den) = (0.0, 0.0);
    for t in 0..grid.n_maturities() {
        for k in (1..nk).step_by(2).filter(|k| !train.contains(k)) {
            let i = grid.idx(t, k);
            num += q[i] * w.w[i] * (fitted.values[i] - gen.observed.values[i]).powi(2);
            den += q[i] * w.w[i];
        }
    }
    let total_q: f64 = q.iter().zip(&w.w).map(|(a, b)| a * b).sum();
    let erm_term = if den > 0.0 { (num / den * total_q).sqrt() / z } else { 0.0 };

    Ok(C1Report {
        level: cfg.c1.level,
        frontier,
        vertex_count: net.vertex_count,
        triangle_count: net.triangle_count,
        relu_depth: net.depth,
        relu_params: net.param_count,
        relu_param_bound: net.param_bound(),
        relu_max_abs,
        lipschitz,
        c1_error,
        erm_term,
        z,
        approx,
        fitted,
    })
}

// ---------------------------------------------------------------- C2

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TriadReport {
    pub maturities: [usize; 3],
    pub certificates: CertificateSet,
    pub converged: bool,
    pub eta: f64,
    pub mean_gap_before_tilt: f64,
    pub fallbacks_taken: Vec<String>,
    pub stage_kkt: Vec<f64>,
    pub dual: f64,
    pub primal: f64,
    pub trace: Vec<TraceEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct C2Report {
    pub triads: Vec<TriadReport>,
}

/// Marginals are Breeden–Litzenberger densities of the constructive
/// approximant; the middle one is tilted to the average of the outer means
/// so the averaged martingale constraint is attainable.
pub fn stage_bridge(cfg: &RunConfig, gen: &Generated, c1: &C1Report) -> Result<C2Report> {
    let grid = &gen.grid;
    let x: Vec<f64> = grid.strikes.iter().map(|k| k * cfg.bridge.x_scale).collect();
    let mut triads = Vec::with_capacity(cfg.bridge.triads.len());
    for (n, tri) in cfg.bridge.triads.iter().enumerate() {
        let d: Vec<Vec<f64>> = tri
            .iter()
            .map(|t| extract_density(&c1.approx, grid, *t, &cfg.fd).map(|d| d.probs))
            .collect::<Result<_>>()?;
        let mean = |m: &[f64]| m.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
        let gap = marginal_mean_gap(&x, &d[0], &d[1], &d[2]);
        let m2 = tilt_to_mean(&d[1], &x, 0.5 * (mean(&d[0]) + mean(&d[2])))?;
        let problem = TriMarginalProblem::new(x.clone(), d[0].clone(), m2, d[2].clone(), cfg.bridge.epsilon_schedule.clone())?
            .with_features(cfg.bridge.feature_kind, cfg.bridge.rank, cfg.stream(100 + n as u64))?;
        let r = solve_bridge(&problem, &cfg.bridge.solver)?;
        triads.push(TriadReport {
            maturities: *tri,
            certificates: r.certificates,
            converged: r.converged,
            eta: r.eta,
            mean_gap_before_tilt: gap,
            fallbacks_taken: r.fallbacks_taken,
            stage_kkt: r.stage_kkt,
            dual: r.dual,
            primal: r.primal,
            trace: r.trace,
        });
    }
    Ok(C2Report { triads })
}

// ---------------------------------------------------------------- C3

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct C3Report {
    pub lip_emp: f64,
    pub dup_ok: bool,
    pub dup_tv_path: Vec<f64>,
    pub correction_norm: f64,
    pub feasible_after: bool,
    pub projected: Surface,
}

pub fn stage_project(cfg: &RunConfig, gen: &Generated, c1: &C1Report) -> Result<C3Report> {
    let pcfg = cfg.projection.projection();
    let projected = project_to_cone(&c1.fitted, &gen.weights, &pcfg)?;
    let certs = projection_certificates(&c1.fitted, &gen.weights, &pcfg, &cfg.fd, cfg.projection.lipschitz_trials, cfg.stream(3))?;
    Ok(C3Report {
        lip_emp: certs.lip_emp,
        dup_ok: certs.dup_ok,
        dup_tv_path: certs.dup_tv_path,
        correction_norm: weighted_dist(&projected.values, &c1.fitted.values, &gen.weights, &gen.grid)?,
        feasible_after: is_feasible(&projected.values, &gen.grid, 1e-8),
        projected,
    })
}

// ---------------------------------------------------------------- R2

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct R2Report {
    pub series: ChainSeries,
    pub decision: GateDecision,
    pub per_edge_final: Vec<f64>,
    pub alpha: Vec<f64>,
}

pub fn stage_chain(cfg: &RunConfig, gen: &Generated) -> Result<R2Report> {
    let c = &cfg.chain;
    let clouds = sample_clouds(&cfg.market(), &gen.grid.maturities, c.samples, cfg.stream(4));
    let t = clouds.len();
    let w = vec![1.0 / (t - 1) as f64; t - 1];
    let sizes: Vec<usize> = (1..=c.points).map(|s| s * c.size_step).collect();
    let energies = sizes
        .iter()
        .map(|&n| {
            let sl: Vec<Vec<Vec<f64>>> = clouds.iter().map(|cl| cl[..n].to_vec()).collect();
            chain_energy(&sl, &w, &c.octaves, c.mode)
        })
        .collect::<Result<Vec<_>>>()?;
    let first: Vec<f64> = clouds[0].iter().map(|v| v[0]).collect();
    let alpha = estimate_alpha(&first, None);
    let neff: Vec<f64> = sizes.iter().map(|n| n_eff(*n, &alpha, f64::INFINITY, 1.0)).collect();
    let series = ChainSeries::new(
        sizes.iter().map(|n| *n as f64).collect(),
        energies.iter().map(|e| e.total).collect(),
        neff,
    )?;
    let decision = gate_v2(&series, &cfg.gate_config())?;
    Ok(R2Report { per_edge_final: energies.last().map(|e| e.per_edge.clone()).unwrap_or_default(), series, decision, alpha })
}

// ---------------------------------------------------------------- C4

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct C4Report {
    pub lambda2: f64,
    pub trajectory: Vec<TrajectoryPoint>,
    pub rejected: usize,
    pub monotone: bool,
    pub energy_ratio: f64,
    pub sweep: Vec<DecayFit>,
    pub sweep_increasing: bool,
    /// Descent output before the final projection.
    pub trained: Surface,
}

pub fn stage_descend(cfg: &RunConfig, gen: &Generated, c1: &C1Report) -> Result<C4Report> {
    let grid = &gen.grid;
    let nt = grid.n_maturities();
    let spot = cfg.market.spot;
    let rows: Vec<Vec<f64>> = (0..nt).map(|t| c1.fitted.row(t).iter().map(|v| v / spot).collect()).collect();
    let graph = path_laplacian(nt, &vec![1.0; nt - 1])?;
    let pcfg = cfg.projection.projection();
    let w = &gen.weights;
    let projector = |s: &[Vec<f64>]| -> Result<Vec<Vec<f64>>> {
        let surf = Surface::new(grid.clone(), s.concat().iter().map(|v| v * spot).collect())?;
        let p = project_to_cone(&surf, w, &pcfg)?;
        Ok((0..nt).map(|t| p.row(t).iter().map(|v| v / spot).collect()).collect())
    };
    let tr = projected_descent(&rows, &rows, &graph, &projector, &cfg.descent.descent(), cfg.stream(5))?;
    let e = tr.energies();
    let tol = cfg.descent.trust_tol.unwrap_or(0.0);
    let monotone = e.windows(2).all(|p| p[1] <= p[0] * (1.0 + tol) + 1e-15);
    let energy_ratio = if e[0] > 0.0 { e[e.len() - 1] / e[0] } else { 0.0 };
    let trained = Surface::new(grid.clone(), tr.final_states.concat().iter().map(|v| v * spot).collect())?;

    let d = &cfg.descent;
    let start = fiedler_start(&path_with_gap(d.sweep_nodes, 1.0)?, d.sweep_dim, d.sweep_jitter, cfg.stream(6));
    let sweep = d
        .sweep_lambda2
        .iter()
        .map(|gap| {
            let g = path_with_gap(d.sweep_nodes, *gap)?;
            decay_experiment(&start, &g, &crate::chain_descent::identity_projector, &d.sweep(), d.sweep_seeds, cfg.stream(7))
        })
        .collect::<Result<Vec<_>>>()?;
    let sweep_increasing = sweep.iter().all(|f| f.log_slope < 0.0) && sweep.windows(2).all(|p| p[1].contraction > p[0].contraction);
    Ok(C4Report { lambda2: graph.lambda2, trajectory: tr.points, rejected: tr.rejected, monotone, energy_ratio, sweep, sweep_increasing, trained })
}

// ---------------------------------------------------------------- risk

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskReport {
    pub inputs: RiskInputs,
    pub budget: RiskBudget,
    /// `1 + ‖C_out − C*‖_w / Z`.
    pub measured: f64,
    pub bound_valid: bool,
    pub log_identity_gap: f64,
    /// Realised telescoping addends `A / Z` for C1, ERM, bridge and chain.
    pub addends: [f64; 4],
    pub output: Surface,
}

pub fn stage_risk(cfg: &RunConfig, gen: &Generated, c1: &C1Report, c2: &C2Report, r2: &R2Report, c4: &C4Report) -> Result<RiskReport> {
    let grid = &gen.grid;
    let w = &gen.weights;
    let output = project_to_cone(&c4.trained, w, &cfg.projection.projection())?;
    let prox = eps_prox(&c4.trained, &output, &gen.clean, w, grid)?;
    // Bridge inputs from the triad with the largest bridge term.
    let worst = c2
        .triads
        .iter()
        .map(|t| {
            let c = &t.certificates;
            let inp = RiskInputs {
                kkt: c.kkt,
                r_geo: c.r_geo,
                iterations: c.iterations,
                mu_hat: c.mu_hat.max(crate::cemot::MU_FLOOR),
                eps: c.epsilon_final,
                delta_mr: c.delta,
                lambda2: 1.0,
                ..RiskInputs::default()
            };
            (crate::risk::bridge_term(&inp, &cfg.risk), inp)
        })
        .fold(None::<(f64, RiskInputs)>, |acc, x| match acc {
            Some(a) if a.0 >= x.0 => Some(a),
            _ => Some(x),
        })
        .map(|x| x.1)
        .ok_or_else(|| Error::Config("no bridge triads configured".into()))?;
    let d = &r2.decision;
    let inputs = RiskInputs {
        c1_error: c1.c1_error,
        c1_stat: 0.0,
        erm_term: c1.erm_term,
        chain_energy: r2.series.values.last().copied().unwrap_or(0.0).max(0.0),
        tol_band: d.bands.per_point.iter().cloned().fold(0.0, f64::max),
        lambda2: c4.lambda2,
        slope_plus: d.slope_tail.max(0.0),
        area_minus: (-d.area_drop).max(0.0),
        eps_prox: prox,
        ..worst
    };
    let budget = assemble_risk(&inputs, &cfg.risk)?;
    let z = c1.z;
    let measured = 1.0 + weighted_dist(&output.values, &gen.clean.values, w, grid)? / z;
    let addends = [
        c1.c1_error,
        weighted_dist(&c1.fitted.values, &c1.approx.values, w, grid)? / z,
        0.0,
        weighted_dist(&c4.trained.values, &c1.fitted.values, w, grid)? / z,
    ];
    Ok(RiskReport {
        bound_valid: measured <= budget.total,
        log_identity_gap: (budget.log_total() - budget.log_sum()).abs(),
        inputs,
        budget,
        measured,
        addends,
        output,
    })
}

// ---------------------------------------------------------------- summary

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineRun {
    pub generated: Generated,
    pub c1: C1Report,
    pub c2: C2Report,
    pub c3: C3Report,
    pub r2: R2Report,
    pub c4: C4Report,
    pub risk: RiskReport,
}

pub fn gates_mesh(gen: &Generated) -> Vec<Gate> {
    vec![gate_flag("mesh", "admissible", gen.admissibility.pass)]
}

pub fn gates_c1(cfg: &RunConfig, c1: &C1Report) -> Vec<Gate> {
    let t = &cfg.thresholds;
    vec![
        gate_le("C1", "relu_max_abs", c1.relu_max_abs, t.relu_max_abs),
        gate_le("C1", "relu_depth", c1.relu_depth as f64, 4.0),
        gate_le("C1", "relu_params", c1.relu_params as f64, c1.relu_param_bound),
        gate_le("C1", "lipschitz_ratio", c1.lipschitz.c3, t.lipschitz_max),
    ]
}

pub fn gates_c2(cfg: &RunConfig, c2: &C2Report) -> Vec<Gate> {
    let t = &cfg.thresholds;
    let mut g = Vec::new();
    for tri in &c2.triads {
        let name = |s: &str| format!("{s}[{},{},{}]", tri.maturities[0], tri.maturities[1], tri.maturities[2]);
        let c = &tri.certificates;
        g.push(gate_flag("C2", &name("converged"), tri.converged));
        g.push(gate_le("C2", &name("kkt"), c.kkt, t.kkt_max));
        g.push(gate_le("C2", &name("r_geo"), c.r_geo, t.r_geo_max));
        g.push(gate_in("C2", &name("mu_hat"), c.mu_hat, t.mu_min, t.mu_max));
    }
    g
}

pub fn gates_c3(cfg: &RunConfig, c3: &C3Report) -> Vec<Gate> {
    vec![gate_le("C3", "lip_emp", c3.lip_emp, cfg.thresholds.lipschitz_max), gate_flag("C3", "dup_ok", c3.dup_ok)]
}

pub fn gates_r2(cfg: &RunConfig, r2: &R2Report) -> Vec<Gate> {
    let d = &r2.decision;
    vec![
        gate_le("R2", "slope_tail_abs", d.slope_tail.abs(), cfg.thresholds.slope_max),
        gate_ge("R2", "area_drop", d.area_drop, cfg.thresholds.area_min),
    ]
}

pub fn gates_c4(c4: &C4Report) -> Vec<Gate> {
    vec![
        gate_flag("C4", "monotone_energy", c4.monotone),
        gate_flag("C4", "decay_increasing_in_gap", c4.sweep_increasing),
    ]
}

pub fn gates_risk(risk: &RiskReport) -> Vec<Gate> {
    vec![
        gate_le("Risk", "measured_over_total", risk.measured / risk.budget.total, 1.0),
        gate_le("Risk", "log_identity_gap", risk.log_identity_gap, 1e-12),
    ]
}

pub fn gates(cfg: &RunConfig, run: &PipelineRun) -> Vec<Gate> {
    let mut g = gates_mesh(&run.generated);
    g.extend(gates_c1(cfg, &run.c1));
    g.extend(gates_c2(cfg, &run.c2));
    g.extend(gates_c3(cfg, &run.c3));
    g.extend(gates_r2(cfg, &run.r2));
    g.extend(gates_c4(&run.c4));
    g.extend(gates_risk(&run.risk));
    g
}

pub fn summary(cfg: &RunConfig, run: &PipelineRun) -> Value {
    let gen = &run.generated;
    let c1 = &run.c1;
    let gs = gates(cfg, run);
    let pass = gs.iter().all(|g| g.pass);
    json!({
        "seed": cfg.seed,
        "parallel": crate::par::is_parallel(),
        "mesh": {
            "n_strikes": gen.grid.n_strikes(),
            "n_maturities": gen.grid.n_maturities(),
            "h_k": gen.grid.h_k,
            "h_tau": gen.grid.h_tau,
            "w_min": gen.weights.w_min,
            "w_max": gen.weights.w_max,
            "kappa_w": gen.weights.kappa_w,
            "admissibility": gen.admissibility,
        },
        "C1": {
            "level": c1.level,
            "frontier": c1.frontier.iter().map(|r| json!({
                "level": r.level, "node_count": r.node_count, "param_count": r.param_count, "weighted_error": r.weighted_error,
            })).collect::<Vec<_>>(),
            "vertex_count": c1.vertex_count,
            "triangle_count": c1.triangle_count,
            "relu_depth": c1.relu_depth,
            "relu_params": c1.relu_params,
            "relu_param_bound": c1.relu_param_bound,
            "relu_max_abs": c1.relu_max_abs,
            "lipschitz": c1.lipschitz,
            "c1_error": c1.c1_error,
            "erm_term": c1.erm_term,
            "z": c1.z,
        },
        "C2": run.c2.triads.iter().map(|t| json!({
            "maturities": t.maturities,
            "kkt": t.certificates.kkt,
            "kkt_components": t.certificates.kkt_components,
            "r_geo": t.certificates.r_geo,
            "r_geo_last10": t.certificates.r_geo_last10,
            "r_geo_iqr": t.certificates.r_geo_iqr,
            "mu_hat": t.certificates.mu_hat,
            "iterations": t.certificates.iterations,
            "epsilon_final": t.certificates.epsilon_final,
            "delta": t.certificates.delta,
            "converged": t.converged,
            "eta": t.eta,
            "mean_gap_before_tilt": t.mean_gap_before_tilt,
            "fallbacks_taken": t.fallbacks_taken,
            "stage_kkt": t.stage_kkt,
            "dual": t.dual,
            "primal": t.primal,
        })).collect::<Vec<_>>(),
        "C3": {
            "lip_emp": run.c3.lip_emp,
            "dup_ok": run.c3.dup_ok,
            "dup_tv_path": run.c3.dup_tv_path,
            "correction_norm": run.c3.correction_norm,
            "feasible_after": run.c3.feasible_after,
        },
        "R2": {
            "slope_tail": run.r2.decision.slope_tail,
            "area_drop": run.r2.decision.area_drop,
            "band_slope": run.r2.decision.band_slope,
            "band_area": run.r2.decision.band_area,
            "neff_tail": run.r2.decision.neff_tail,
            "tail_indices": run.r2.decision.tail_indices,
            "window": run.r2.decision.window,
            "fir_l1": run.r2.decision.fir_l1,
            "final_energy": run.r2.series.values.last(),
            "per_edge_final": run.r2.per_edge_final,
            "pass": run.r2.decision.pass,
        },
        "C4": {
            "tau_gap": run.c4.lambda2,
            "steps": run.c4.trajectory.len() - 1,
            "rejected": run.c4.rejected,
            "monotone": run.c4.monotone,
            "energy_ratio": run.c4.energy_ratio,
            "sweep": run.c4.sweep.iter().map(|f| json!({
                "lambda2": f.lambda2, "log_slope": f.log_slope, "contraction": f.contraction,
            })).collect::<Vec<_>>(),
            "sweep_increasing": run.c4.sweep_increasing,
        },
        "Risk": {
            "total": run.risk.budget.total,
            "log_terms": run.risk.budget.log_terms,
            "factors": run.risk.budget.factors,
            "chain_direct": run.risk.budget.chain_direct,
            "chain_slope_area": run.risk.budget.chain_slope_area,
            "inputs": run.risk.inputs,
            "measured": run.risk.measured,
            "addends": run.risk.addends,
            "bound_valid": run.risk.bound_valid,
        },
        "gates": gs,
        "pass": pass,
    })
}

/// Execute every stage and return the reports.
pub fn run_all(cfg: &RunConfig) -> std::result::Result<PipelineRun, StageError> {
    cfg.validate().map_err(|e| StageError::new("config", e))?;
    let generated = stage_generate(cfg).map_err(|e| StageError::new("generate", e))?;
    let c1 = stage_fit(cfg, &generated).map_err(|e| StageError::new("fit", e))?;
    let c2 = stage_bridge(cfg, &generated, &c1).map_err(|e| StageError::new("bridge", e))?;
    let c3 = stage_project(cfg, &generated, &c1).map_err(|e| StageError::new("project", e))?;
    let r2 = stage_chain(cfg, &generated).map_err(|e| StageError::new("gate", e))?;
    let c4 = stage_descend(cfg, &generated, &c1).map_err(|e| StageError::new("descend", e))?;
    let risk = stage_risk(cfg, &generated, &c1, &c2, &r2, &c4).map_err(|e| StageError::new("risk", e))?;
    Ok(PipelineRun { generated, c1, c2, c3, r2, c4, risk })
}

/// Error tagged with the stage that raised it.
#[derive(Debug, Clone, thiserror::Error)]
#[error("stage {stage} failed: {source}")]
pub struct StageError {
    pub stage: String,
    pub source: Error,
}

impl StageError {
    pub fn new(stage: &str, source: Error) -> Self {
        Self { stage: stage.into(), source }
    }
}

pub struct PipelineOutput {
    pub summary: Value,
    pub pass: bool,
    /// `(file name, contents)` for the per-stage CSV exports.
    pub csv: Vec<(String, String)>,
}

pub fn run_pipeline(cfg: &RunConfig) -> std::result::Result<PipelineOutput, StageError> {
    let run = run_all(cfg)?;
    let summary = summary(cfg, &run);
    let pass = summary["pass"].as_bool().unwrap_or(false);
    Ok(PipelineOutput { summary, pass, csv: csv_exports(&run) })
}

pub fn csv_exports(run: &PipelineRun) -> Vec<(String, String)> {
    let mut out = vec![("frontier.csv".to_string(), crate::smolyak::frontier_csv(&run.c1.frontier))];
    let mut s = String::from("triad,stage,eps,iteration,residual,kkt,dual,damping,eta\n");
    for (n, t) in run.c2.triads.iter().enumerate() {
        for e in &t.trace {
            s.push_str(&format!(
                "{n},{},{},{},{:.12e},{:.12e},{:.12e},{},{:.12e}\n",
                e.stage, e.eps, e.iteration, e.residual, e.kkt, e.dual, e.damping, e.eta
            ));
        }
    }
    out.push(("residual_trace.csv".into(), s));
    let mut s = String::from("size,value,neff,envelope\n");
    let r2 = &run.r2;
    for i in 0..r2.series.sizes.len() {
        s.push_str(&format!("{},{:.12e},{:.6},{:.12e}\n", r2.series.sizes[i], r2.series.values[i], r2.series.neff[i], r2.decision.smoothed[i]));
    }
    out.push(("chain_series.csv".into(), s));
    out.push(("descent_trajectory.csv".into(), trajectory_csv(&run.c4.trajectory)));
    out
}

pub fn trajectory_csv(points: &[TrajectoryPoint]) -> String {
    let mut s = String::from("step,chain_energy,data_fit,accepted\n");
    for p in points {
        s.push_str(&format!("{},{:.12e},{:.12e},{}\n", p.step, p.chain_energy, p.data_fit, p.accepted));
    }
    s
}
