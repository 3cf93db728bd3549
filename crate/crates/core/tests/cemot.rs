use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use surfcert_core::cemot::*;
use surfcert_core::Error;

fn tight() -> SolverConfig {
    SolverConfig { tol: 1e-12, t_max: 50_000, ..SolverConfig::default() }
}

/// Constraint rows for the n=2 tri-marginal polytope: mass and the first
/// entry of each marginal. The averaged martingale constraint is implied by
/// the marginals when their means are consistent.
fn constraints(m1: &[f64], m2: &[f64], m3: &[f64]) -> (DMatrix<f64>, DVector<f64>) {
    let mut a = DMatrix::zeros(4, 8);
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                let c = (i * 2 + j) * 2 + k;
                a[(0, c)] = 1.0;
                a[(1, c)] = if i == 0 { 1.0 } else { 0.0 };
                a[(2, c)] = if j == 0 { 1.0 } else { 0.0 };
                a[(3, c)] = if k == 0 { 1.0 } else { 0.0 };
            }
        }
    }
    (a, DVector::from_vec(vec![1.0, m1[0], m2[0], m3[0]]))
}

fn cell_cost(x: &[f64]) -> Vec<f64> {
    let mut c = vec![0.0; 8];
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                c[(i * 2 + j) * 2 + k] = 0.5 * (x[i] - x[j]).powi(2) + 0.5 * (x[j] - x[k]).powi(2);
            }
        }
    }
    c
}

fn product(m1: &[f64], m2: &[f64], m3: &[f64]) -> Vec<f64> {
    let mut p = vec![0.0; 8];
    for i in 0..2 {
        for j in 0..2 {
            for k in 0..2 {
                p[(i * 2 + j) * 2 + k] = m1[i] * m2[j] * m3[k];
            }
        }
    }
    p
}

/// Primal oracle: damped Newton on the null space of the constraints.
fn primal_oracle(x: &[f64], m1: &[f64], m2: &[f64], m3: &[f64], eps: f64) -> (Vec<f64>, f64) {
    let (a, _) = constraints(m1, m2, m3);
    let svd = a.clone().svd(false, true);
    let vt = svd.v_t.unwrap();
    // Rows of the full V^T beyond the rank span the null space.
    let full = {
        let mut m = DMatrix::zeros(8, 8);
        m.view_mut((0, 0), (4, 8)).copy_from(&vt);
        m.transpose().qr().q()
    };
    let null = full.columns(4, 4).into_owned();
    let c = cell_cost(x);
    let rho = product(m1, m2, m3);
    let f = |p: &[f64]| -> f64 {
        p.iter().zip(&c).zip(&rho).map(|((p, c), r)| c * p + eps * (p * (p / r).ln() - p + r)).sum()
    };
    let mut p = rho.clone();
    for _ in 0..200 {
        let g = DVector::from_iterator(8, (0..8).map(|i| c[i] + eps * (p[i] / rho[i]).ln()));
        let h = DMatrix::from_diagonal(&DVector::from_iterator(8, p.iter().map(|v| eps / v)));
        let rg = null.transpose() * &g;
        if rg.norm() < 1e-15 {
            break;
        }
        let rh = null.transpose() * h * &null;
        let dz = rh.lu().solve(&(-rg)).unwrap();
        let dp = &null * dz;
        let mut t = 1.0;
        let f0 = f(&p);
        loop {
            let q: Vec<f64> = (0..8).map(|i| p[i] + t * dp[i]).collect();
            if q.iter().all(|v| *v > 0.0) && f(&q) <= f0 + 1e-16 {
                p = q;
                break;
            }
            t *= 0.5;
            if t < 1e-12 {
                return (p.clone(), f(&p));
            }
        }
    }
    let v = f(&p);
    (p, v)
}

/// Unregularized optimum by enumerating basic feasible solutions.
fn lp_oracle(x: &[f64], m1: &[f64], m2: &[f64], m3: &[f64]) -> f64 {
    let (a, b) = constraints(m1, m2, m3);
    let c = cell_cost(x);
    let mut best = f64::INFINITY;
    for mask in 0u32..256 {
        if mask.count_ones() != 4 {
            continue;
        }
        let cols: Vec<usize> = (0..8).filter(|i| mask & (1 << i) != 0).collect();
        let sub = DMatrix::from_fn(4, 4, |r, j| a[(r, cols[j])]);
        let Some(sol) = sub.lu().solve(&b) else { continue };
        if sol.iter().any(|v| *v < -1e-12 || !v.is_finite()) {
            continue;
        }
        let mut full = vec![0.0; 8];
        for (j, &col) in cols.iter().enumerate() {
            full[col] = sol[j];
        }
        if (&a * DVector::from_vec(full.clone()) - &b).norm() > 1e-10 {
            continue;
        }
        best = best.min(full.iter().zip(&c).map(|(p, c)| p * c).sum());
    }
    best
}

const X2: [f64; 2] = [0.0, 1.0];
const M1: [f64; 2] = [0.6, 0.4];
const M2: [f64; 2] = [0.45, 0.55];
const M3: [f64; 2] = [0.3, 0.7];

fn small_problem(eps: f64) -> TriMarginalProblem {
    TriMarginalProblem::new(X2.to_vec(), M1.to_vec(), M2.to_vec(), M3.to_vec(), vec![eps]).unwrap()
}

#[test]
fn zero_cost_kernel_is_all_ones() {
    let x: Vec<f64> = (0..12).map(|i| i as f64).collect();
    let m = vec![1.0 / 12.0; 12];
    let z = DMatrix::zeros(12, 12);
    for eps in [1.0, 0.01] {
        let p = TriMarginalProblem::new(x.clone(), m.clone(), m.clone(), m.clone(), vec![eps])
            .unwrap()
            .with_cost(z.clone(), z.clone())
            .unwrap();
        let dense = build_bridge(&p).unwrap();
        assert!(dense.stages[0].log_k12.iter().all(|v| v.abs() < 1e-15));
        let p = p.with_features(FeatureKind::Nystrom, Some(3), 0).unwrap();
        let k = build_bridge(&p).unwrap();
        let st = &k.stages[0];
        let approx = &st.feat12 * st.feat12.transpose() * st.scale12;
        assert!(approx.iter().all(|v| (v - 1.0).abs() < 1e-12));
        assert!(st.delta12 < 1e-12);
    }
}

#[test]
fn full_rank_nystrom_is_exact() {
    let x: Vec<f64> = (0..16).map(|i| i as f64).collect();
    let m = vec![1.0 / 16.0; 16];
    let p = TriMarginalProblem::new(x, m.clone(), m.clone(), m, vec![1.0])
        .unwrap()
        .with_features(FeatureKind::Nystrom, Some(16), 0)
        .unwrap();
    let k = build_bridge(&p).unwrap();
    assert!(k.delta() <= 1e-10, "{}", k.delta());
}

#[test]
fn low_rank_error_tracks_svd_tail() {
    let n = 64;
    let x: Vec<f64> = (0..n).map(|i| i as f64 / (n - 1) as f64).collect();
    let m = vec![1.0 / n as f64; n];
    let eps = 0.05;
    let p = TriMarginalProblem::new(x.clone(), m.clone(), m.clone(), m, vec![eps])
        .unwrap()
        .with_features(FeatureKind::Nystrom, Some(8), 0)
        .unwrap();
    let k = build_bridge(&p).unwrap();
    let dense = DMatrix::from_fn(n, n, |i, j| (-0.5 * (x[i] - x[j]).powi(2) / eps).exp());
    let mut s: Vec<f64> = dense.svd(false, false).singular_values.iter().cloned().collect();
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let tail = s[8];
    let ratio = k.delta() / tail;
    assert!(ratio >= 1.0 / 3.0 && ratio <= 3.0, "delta {} tail {tail}", k.delta());
}

#[test]
fn rank_above_grid_is_rejected() {
    let r = TriMarginalProblem::new(X2.to_vec(), M1.to_vec(), M2.to_vec(), M3.to_vec(), vec![1.0])
        .unwrap()
        .with_features(FeatureKind::Nystrom, Some(3), 0);
    assert!(matches!(r, Err(Error::Dimension(_))));
    assert!(nystrom_factor(&DMatrix::identity(2, 2), 3).is_err());
}

#[test]
fn invalid_problems_are_rejected() {
    let bad = TriMarginalProblem::new(X2.to_vec(), vec![0.6, 0.5], M2.to_vec(), M3.to_vec(), vec![1.0]);
    assert!(matches!(bad, Err(Error::Input(_))));
    let bad = TriMarginalProblem::new(X2.to_vec(), M1.to_vec(), M2.to_vec(), M3.to_vec(), vec![0.1, 0.3]);
    assert!(matches!(bad, Err(Error::Input(_))));
    let bad = TriMarginalProblem::new(X2.to_vec(), M1.to_vec(), M2.to_vec(), M3.to_vec(), vec![1.0, 0.0]);
    assert!(matches!(bad, Err(Error::Input(_))));
}

#[test]
fn single_atom_converges_immediately() {
    let p = TriMarginalProblem::new(vec![1.0], vec![1.0], vec![1.0], vec![1.0], vec![1.0]).unwrap();
    let k = build_bridge(&p).unwrap();
    let (s, c) = tri_sinkhorn(&p, &k, &SolverConfig::default()).unwrap();
    assert_eq!(s.residual_trace.len(), 1);
    assert!(c.kkt <= 1e-15);
    let pi = coupling(&s, &p, &k).unwrap();
    assert!((pi[0] - 1.0).abs() < 1e-15);
}

#[test]
fn uniform_zero_cost_gives_product_coupling() {
    let h = vec![0.5, 0.5];
    let z = DMatrix::zeros(2, 2);
    let p = TriMarginalProblem::new(X2.to_vec(), h.clone(), h.clone(), h.clone(), vec![1.0])
        .unwrap()
        .with_cost(z.clone(), z)
        .unwrap();
    let k = build_bridge(&p).unwrap();
    let (s, c) = tri_sinkhorn(&p, &k, &tight()).unwrap();
    assert!(c.kkt <= 1e-12);
    let pi = coupling(&s, &p, &k).unwrap();
    assert!(pi.iter().all(|v| (v - 0.125).abs() < 1e-12));
    assert!(primal_value(&s, &p, &k).unwrap().abs() < 1e-12);
}

#[test]
fn small_problem_matches_primal_oracle() {
    for eps in [1.0, 0.3] {
        let p = small_problem(eps);
        let k = build_bridge(&p).unwrap();
        let (s, c) = tri_sinkhorn(&p, &k, &tight()).unwrap();
        assert!(s.converged && c.kkt <= 1e-12);
        let (oracle, value) = primal_oracle(&X2, &M1, &M2, &M3, eps);
        let pi = coupling(&s, &p, &k).unwrap();
        for (a, b) in pi.iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-4, "{pi:?} vs {oracle:?}");
        }
        let primal = primal_value(&s, &p, &k).unwrap();
        assert!((primal - value).abs() <= 1e-4, "{primal} vs {value}");
        let dual = dual_value(&s, &p, &k).unwrap();
        assert!(dual <= primal + 1e-12);
        assert!(primal - dual <= 10.0 * 1e-12 + 1e-12);
        let [p1, p2, p3] = marginals(&s, &p, &k).unwrap();
        for (got, want) in [(p1, M1), (p2, M2), (p3, M3)] {
            assert!(got.iter().zip(&want).all(|(a, b)| (a - b).abs() <= 1e-12));
        }
    }
}

#[test]
fn entropic_bias_is_linear_in_epsilon() {
    let ot0 = lp_oracle(&X2, &M1, &M2, &M3);
    let bias = |eps: f64| {
        let p = small_problem(eps);
        let k = build_bridge(&p).unwrap();
        let (s, _) = tri_sinkhorn(&p, &k, &tight()).unwrap();
        primal_value(&s, &p, &k).unwrap() - ot0
    };
    // Fit the constant once at a reference epsilon outside the checked set.
    let c1 = 1.5 * bias(0.03) / 0.03;
    for eps in [1.0, 0.3, 0.1] {
        let b = bias(eps);
        assert!(b >= -1e-12, "negative bias {b} at {eps}");
        assert!(b <= c1 * eps, "bias {b} > {c1} * {eps}");
    }
}

#[test]
fn kkt_detects_feasibility() {
    let n = 5;
    let x: Vec<f64> = (0..n).map(|i| i as f64 - 2.0).collect();
    let m = vec![0.1, 0.2, 0.4, 0.2, 0.1];
    let z = DMatrix::zeros(n, n);
    let p = TriMarginalProblem::new(x, m.clone(), m.clone(), m, vec![1.0])
        .unwrap()
        .with_cost(z.clone(), z)
        .unwrap();
    let k = build_bridge(&p).unwrap();
    let mut s = BridgeState::zeros(n);
    let (kkt, comp) = kkt_residual(&s, &p, &k).unwrap();
    assert!(kkt <= 1e-12);
    assert_eq!(kkt, comp.iter().cloned().fold(0.0, f64::max));
    s.log_u[1] += 1.0;
    let (kkt2, comp2) = kkt_residual(&s, &p, &k).unwrap();
    assert!(comp2[0] > comp[0] && kkt2 > 0.0);
}

#[test]
fn geometric_ratio_examples() {
    let trace: Vec<f64> = (0..40).map(|t| 0.5f64.powi(t)).collect();
    let (r, iqr) = geometric_ratio(&trace, None).unwrap();
    assert!((r - 0.5).abs() < 1e-15);
    assert!((iqr[0] - 0.5).abs() < 1e-15 && (iqr[1] - 0.5).abs() < 1e-15);
    assert!(matches!(geometric_ratio(&[1.0], None), Err(Error::InsufficientData(_))));
}

#[test]
fn mu_hat_identity_features() {
    let n = 6;
    let gamma = 1e-3;
    let m = vec![1.0 / n as f64; n];
    let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let p = TriMarginalProblem::new(x, m.clone(), m.clone(), m, vec![1.0]).unwrap();
    let k = build_bridge(&p).unwrap();
    let mu = mu_hat(&k.stages[0], &p, gamma);
    assert!((mu - (2.0 / n as f64 + gamma)).abs() < 1e-10);
    // Dense eigensolver cross-check on a non-uniform case.
    let m1 = vec![0.05, 0.1, 0.2, 0.3, 0.25, 0.1];
    let m3 = vec![0.3, 0.2, 0.1, 0.1, 0.1, 0.2];
    let x: Vec<f64> = (0..n).map(|i| i as f64).collect();
    let mean = |m: &[f64]| m.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>();
    let m2 = tilt_to_mean(&vec![1.0 / 6.0; 6], &x, 0.5 * (mean(&m1) + mean(&m3))).unwrap();
    let p = TriMarginalProblem::new(x, m1.clone(), m2, m3.clone(), vec![1.0])
        .unwrap()
        .with_features(FeatureKind::Nystrom, Some(4), 0)
        .unwrap();
    let k = build_bridge(&p).unwrap();
    let st = &k.stages[0];
    let g = st.feat12.transpose() * DMatrix::from_diagonal(&DVector::from_vec(m1)) * &st.feat12
        + st.feat23.transpose() * DMatrix::from_diagonal(&DVector::from_vec(m3)) * &st.feat23
        + DMatrix::identity(st.feat12.ncols(), st.feat12.ncols()) * gamma;
    let oracle = g.symmetric_eigen().eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    assert!((mu_hat(st, &p, gamma) - oracle.max(MU_FLOOR)).abs() < 1e-10);
}

#[test]
fn dual_value_hand_evaluation() {
    let h = vec![0.5, 0.5];
    let z = DMatrix::zeros(2, 2);
    let eps = 0.7;
    let p = TriMarginalProblem::new(X2.to_vec(), h.clone(), h.clone(), h, vec![eps])
        .unwrap()
        .with_cost(z.clone(), z)
        .unwrap();
    let k = build_bridge(&p).unwrap();
    let s = BridgeState::zeros(2);
    // Zero potentials: eps * (1 - mass), and the kernel mass against the product is 1.
    assert!(dual_value(&s, &p, &k).unwrap().abs() < 1e-15);
    // Arbitrary potentials: compare with the coupling summed cell by cell.
    let mut s = BridgeState::zeros(2);
    s.log_u = vec![0.3, -0.2];
    s.log_v = vec![0.1, 0.4];
    s.log_w = vec![-0.5, 0.2];
    s.eta = 0.25;
    let pi = coupling(&s, &p, &k).unwrap();
    let lin: f64 = (0..2).map(|i| 0.5 * (s.log_u[i] + s.log_v[i] + s.log_w[i])).sum();
    let hand = eps * lin - eps * pi.iter().sum::<f64>() + eps;
    assert!((dual_value(&s, &p, &k).unwrap() - hand).abs() < 1e-14);
}

#[test]
fn dual_ascends_within_each_stage() {
    let p = TriMarginalProblem::new(X2.to_vec(), M1.to_vec(), M2.to_vec(), M3.to_vec(), vec![1.0, 0.3, 0.1]).unwrap();
    let k = build_bridge(&p).unwrap();
    let (s, c) = tri_sinkhorn(&p, &k, &tight()).unwrap();
    for w in s.residual_trace.windows(2) {
        if w[0].stage == w[1].stage {
            assert!(w[1].dual >= w[0].dual - 1e-12, "{:?}", w);
        }
    }
    // Warm-started homotopy: each stage ends no worse than the previous plus tol.
    for w in s.stage_kkt.windows(2) {
        assert!(w[1] <= w[0] + 1e-12);
    }
    assert!(c.r_geo < 1.0);
}

#[test]
fn shadow_price_of_the_drift() {
    let base = small_problem(0.5);
    let k = build_bridge(&base).unwrap();
    let (s0, _) = tri_sinkhorn(&base, &k, &tight()).unwrap();
    let v0 = primal_value(&s0, &base, &k).unwrap();
    let eta = s0.eta;
    assert!(eta.abs() > 1e-6);
    let mean = |m: &[f64]| m.iter().zip(&X2).map(|(a, b)| a * b).sum::<f64>();
    for delta in [1e-3, -1e-3] {
        let m2 = tilt_to_mean(&M2, &X2, mean(&M2) + delta).unwrap();
        let p = TriMarginalProblem::new(X2.to_vec(), M1.to_vec(), m2, M3.to_vec(), vec![0.5])
            .unwrap()
            .with_drift(delta);
        let kp = build_bridge(&p).unwrap();
        let (s, c) = tri_sinkhorn(&p, &kp, &tight()).unwrap();
        assert!(c.kkt <= 1e-11);
        let dv = primal_value(&s, &p, &kp).unwrap() - v0;
        let predicted = -eta * delta;
        assert!((dv - predicted).abs() <= 0.1 * predicted.abs() + 1e-8, "dv {dv} predicted {predicted}");
    }
}

#[test]
fn low_rank_modes_solve_the_small_problem() {
    for kind in [FeatureKind::Nystrom, FeatureKind::Rff] {
        let x: Vec<f64> = (0..9).map(|i| i as f64 / 4.0 - 1.0).collect();
        let m1: Vec<f64> = x.iter().map(|v| (-v * v * 2.0).exp()).collect();
        let z1: f64 = m1.iter().sum();
        let m1: Vec<f64> = m1.iter().map(|v| v / z1).collect();
        let m3: Vec<f64> = x.iter().map(|v| (-v * v).exp()).collect();
        let z3: f64 = m3.iter().sum();
        let m3: Vec<f64> = m3.iter().map(|v| v / z3).collect();
        let m2 = tilt_to_mean(&m3, &x, 0.0).unwrap();
        let p = TriMarginalProblem::new(x, m1, m2, m3, vec![1.0, 0.3])
            .unwrap()
            .with_features(kind, Some(9), 11)
            .unwrap();
        let r = solve_bridge(&p, &SolverConfig::default()).unwrap();
        assert!(r.converged, "{kind:?}: {:?}", r.stage_kkt);
        assert!(r.certificates.kkt <= 1e-10);
    }
}

#[test]
fn tilt_hits_target_mean() {
    let x = [0.0, 1.0, 2.0, 3.0];
    let m = [0.1, 0.2, 0.3, 0.4];
    let t = tilt_to_mean(&m, &x, 1.2).unwrap();
    let mean: f64 = t.iter().zip(&x).map(|(a, b)| a * b).sum();
    assert!((mean - 1.2).abs() < 1e-12);
    assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-14);
    assert!(tilt_to_mean(&m, &x, 3.5).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn converged_runs_are_feasible_and_contracting(
        a in 0.1f64..0.9, c in 0.1f64..0.9, eps in 0.2f64..2.0,
    ) {
        let m1 = vec![a, 1.0 - a];
        let m3 = vec![c, 1.0 - c];
        let target = 0.5 * ((1.0 - a) + (1.0 - c));
        let m2 = vec![1.0 - target, target];
        let p = TriMarginalProblem::new(X2.to_vec(), m1, m2, m3, vec![eps]).unwrap();
        let k = build_bridge(&p).unwrap();
        let (s, cert) = tri_sinkhorn(&p, &k, &SolverConfig::default()).unwrap();
        prop_assert!(s.converged);
        prop_assert!(cert.kkt_components[..3].iter().all(|v| *v <= 1e-10));
        let mut best = f64::INFINITY;
        for t in &s.residual_trace {
            let next = best.min(t.residual);
            prop_assert!(next <= best);
            best = next;
        }
        if s.residual_trace.len() >= 2 {
            prop_assert!(cert.r_geo < 1.0);
        }
    }
}
