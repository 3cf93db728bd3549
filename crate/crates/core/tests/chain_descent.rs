use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use surfcert_core::chain_descent::*;
use surfcert_core::chain_stats::dirichlet_energy;
use surfcert_core::projection::{is_feasible, project_to_cone, ProjectionConfig};
use surfcert_core::synth::{generate_surface, MarketParams};
use surfcert_core::{Error, Grid2D, Surface, WeightField};

fn random_states(rng: &mut ChaCha8Rng, t: usize, p: usize) -> Vec<Vec<f64>> {
    (0..t).map(|_| (0..p).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

#[test]
fn laplacian_spectra() {
    let g = path_laplacian(2, &[1.0]).unwrap();
    assert!(g.eigenvalues[0].abs() < 1e-12 && (g.eigenvalues[1] - 2.0).abs() < 1e-12);
    let g = path_laplacian(3, &[1.0, 1.0]).unwrap();
    for (a, b) in g.eigenvalues.iter().zip([0.0, 1.0, 3.0]) {
        assert!((a - b).abs() < 1e-12);
    }
    assert!((g.lambda2 - 1.0).abs() < 1e-12);
    // Closed-form spectrum of the unit path: 2 − 2cos(πk/T).
    for t in [4, 7, 12] {
        let g = path_laplacian(t, &vec![1.0; t - 1]).unwrap();
        for (k, e) in g.eigenvalues.iter().enumerate() {
            let exact = 2.0 - 2.0 * (std::f64::consts::PI * k as f64 / t as f64).cos();
            assert!((e - exact).abs() < 1e-10);
        }
        for i in 0..t {
            assert!(g.laplacian.row(i).sum().abs() < 1e-14);
        }
    }
    let base = path_laplacian(5, &[0.3, 1.0, 2.0, 0.7]).unwrap();
    let scaled = path_laplacian(5, &[0.9, 3.0, 6.0, 2.1]).unwrap();
    assert!((scaled.lambda2 - 3.0 * base.lambda2).abs() < 1e-12);
    for gap in [0.5, 1.0, 2.0] {
        assert!((path_with_gap(6, gap).unwrap().lambda2 - gap).abs() < 1e-12);
    }
    // Fiedler vector of the unit path: cos(π(i + 1/2)/T), normalised.
    let g = path_laplacian(6, &[1.0; 5]).unwrap();
    let v: Vec<f64> = (0..6).map(|i| (std::f64::consts::PI * (i as f64 + 0.5) / 6.0).cos()).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for (a, b) in g.fiedler.iter().zip(&v) {
        assert!((a - b / n).abs() < 1e-10);
    }
    let l = &g.laplacian;
    let lv: Vec<f64> = (0..6).map(|i| (0..6).map(|j| l[(i, j)] * g.fiedler[j]).sum()).collect();
    assert!(lv.iter().zip(&g.fiedler).all(|(a, b)| (a - g.lambda2 * b).abs() < 1e-10));
    assert!(matches!(path_laplacian(1, &[]), Err(Error::Dimension(_))));
    assert!(path_laplacian(3, &[1.0, 0.0]).is_err());
}

#[test]
fn energy_examples() {
    let g = path_laplacian(3, &[1.0, 1.0]).unwrap();
    let same = vec![vec![0.4, -1.0]; 3];
    assert_eq!(chain_dirichlet_energy(&same, &g).unwrap(), 0.0);
    let e = chain_dirichlet_energy(&[vec![0.0], vec![1.0], vec![0.0]], &g).unwrap();
    assert!((e - 2.0).abs() < 1e-15);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = random_states(&mut rng, 3, 4);
    let shifted: Vec<Vec<f64>> = s.iter().map(|v| v.iter().map(|x| x + 3.5).collect()).collect();
    let (a, b) = (chain_dirichlet_energy(&s, &g).unwrap(), chain_dirichlet_energy(&shifted, &g).unwrap());
    assert!((a - b).abs() < 1e-12);
    assert!(matches!(chain_dirichlet_energy(&s[..2], &g), Err(Error::Dimension(_))));
}

#[test]
fn random_feature_energy_matches_stats_module() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let g = path_laplacian(5, &[0.2, 0.3, 0.1, 0.4]).unwrap();
    let s = random_states(&mut rng, 5, 3);
    let psi = FeatureMap::RandomFourier { dim: 64, scale: 1.0, seed: 9 }.embed(&s).unwrap();
    assert_eq!(psi[0].len(), 64);
    let a = chain_dirichlet_energy(&psi, &g).unwrap();
    let b = dirichlet_energy(&psi, &g.edge_weights).unwrap();
    assert!((a - b).abs() < 1e-10);
    assert_eq!(FeatureMap::Identity.embed(&s).unwrap(), s);
}

#[test]
fn stationary_without_chain_term() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let g = path_laplacian(4, &[1.0; 3]).unwrap();
    let s = random_states(&mut rng, 4, 5);
    let cfg = DescentConfig { lambda_chain: 0.0, steps: 20, ..DescentConfig::default() };
    let tr = projected_descent(&s, &s, &g, &identity_projector, &cfg, 0).unwrap();
    assert_eq!(tr.final_states, s);
    assert!(tr.points.iter().all(|p| p.data_fit == 0.0));
}

#[test]
fn noiseless_chain_descent_contracts_every_step() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for gap in [0.5, 1.0, 2.0] {
        let g = path_with_gap(6, gap).unwrap();
        let s = random_states(&mut rng, 6, 3);
        let cfg = DescentConfig { eta0: 0.02, data_weight: 0.0, steps: 300, trust_tol: None, ..DescentConfig::default() };
        let tr = projected_descent(&s, &s, &g, &identity_projector, &cfg, 0).unwrap();
        let e = tr.energies();
        for t in 0..cfg.steps {
            let q = 1.0 - 2.0 * cfg.step_size(t) * cfg.lambda_chain * g.lambda2;
            assert!(e[t + 1] < e[t], "gap {gap} step {t}");
            assert!(e[t + 1] <= q * q * e[t] * (1.0 + 1e-12), "gap {gap} step {t}");
        }
        assert_eq!(tr.rejected, 0);
    }
}

#[test]
fn trajectories_are_deterministic_under_seed() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let g = path_laplacian(4, &[1.0; 3]).unwrap();
    let s = random_states(&mut rng, 4, 3);
    let cfg = DescentConfig { noise_sigma: 0.05, steps: 50, ..DescentConfig::default() };
    let a = projected_descent(&s, &s, &g, &identity_projector, &cfg, 11).unwrap();
    let b = projected_descent(&s, &s, &g, &identity_projector, &cfg, 11).unwrap();
    let c = projected_descent(&s, &s, &g, &identity_projector, &cfg, 12).unwrap();
    assert_eq!(a.final_states, b.final_states);
    assert_ne!(a.final_states, c.final_states);
    assert!(a.energies().windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-6)));
}

#[test]
fn invalid_configs() {
    for bad in [
        DescentConfig { alpha: 0.0, ..DescentConfig::default() },
        DescentConfig { alpha: 1.5, ..DescentConfig::default() },
        DescentConfig { steps: 0, ..DescentConfig::default() },
        DescentConfig { noise_sigma: -1.0, ..DescentConfig::default() },
    ] {
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }
}

#[test]
fn monte_carlo_decay_increases_with_spectral_gap() {
    let s = fiedler_start(&path_with_gap(6, 1.0).unwrap(), 4, 0.05, 6);
    let cfg = DescentConfig { eta0: 0.02, noise_sigma: 0.01, steps: 500, ..DescentConfig::default() };
    let fits: Vec<DecayFit> = [0.5, 1.0, 2.0]
        .iter()
        .map(|gap| decay_experiment(&s, &path_with_gap(6, *gap).unwrap(), &identity_projector, &cfg, 20, 100).unwrap())
        .collect();
    for f in &fits {
        assert!(f.log_slope < 0.0, "{}", f.log_slope);
    }
    assert!(fits[0].contraction < fits[1].contraction && fits[1].contraction < fits[2].contraction);
}

#[test]
fn noise_floor_scales_with_variance() {
    let g = path_laplacian(5, &[1.0; 4]).unwrap();
    let start = vec![vec![0.0; 3]; 5];
    let floor = |sigma: f64| {
        let cfg = DescentConfig { eta0: 0.05, noise_sigma: sigma, steps: 300, trust_tol: None, ..DescentConfig::default() };
        let e: Vec<f64> = (0..20)
            .map(|s| *projected_descent(&start, &start, &g, &identity_projector, &cfg, s).unwrap().energies().last().unwrap())
            .collect();
        e.iter().sum::<f64>() / 20.0
    };
    let ratio = floor(0.03) / floor(0.01);
    assert!(ratio > 0.9 && ratio < 90.0, "{ratio}");
}

#[test]
fn cone_projector_keeps_surface_rows_feasible() {
    let grid = Grid2D::uniform(80.0, 120.0, 9, 0.25, 1.25, 4).unwrap();
    let params = MarketParams { noise_sigma: 0.05, ..MarketParams::default() };
    let (_, noisy) = generate_surface(&params, &grid).unwrap();
    let w = WeightField::uniform(&grid);
    let pcfg = ProjectionConfig::default();
    let projector = |rows: &[Vec<f64>]| -> surfcert_core::Result<Vec<Vec<f64>>> {
        let s = Surface::new(grid.clone(), rows.concat())?;
        let p = project_to_cone(&s, &w, &pcfg)?;
        Ok((0..grid.n_maturities()).map(|t| p.row(t).to_vec()).collect())
    };
    let rows: Vec<Vec<f64>> = (0..4).map(|t| noisy.row(t).to_vec()).collect();
    let g = path_laplacian(4, &[1.0; 3]).unwrap();
    let cfg = DescentConfig { eta0: 0.05, lambda_chain: 0.1, steps: 30, ..DescentConfig::default() };
    let tr = projected_descent(&rows, &rows, &g, &projector, &cfg, 0).unwrap();
    assert!(is_feasible(&tr.final_states.concat(), &grid, 1e-8));
    assert!(tr.energies().windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-6)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn edge_sum_and_trace_form_agree(
        t in 2usize..9,
        p in 1usize..6,
        seed in 0u64..10_000,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w: Vec<f64> = (0..t - 1).map(|_| rng.random_range(0.01..3.0)).collect();
        let g = path_laplacian(t, &w).unwrap();
        let s = random_states(&mut rng, t, p);
        let e = chain_dirichlet_energy(&s, &g).unwrap();
        let direct: f64 = (0..t - 1)
            .map(|i| w[i] * s[i].iter().zip(&s[i + 1]).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
            .sum();
        prop_assert!((e - direct).abs() < 1e-10);
        prop_assert!(g.eigenvalues[0].abs() < 1e-10 && g.lambda2 > 0.0);
    }
}
