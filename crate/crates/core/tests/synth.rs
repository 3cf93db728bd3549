use surfcert_core::fd::{dupire_field, FdConfig};
use surfcert_core::projection::{is_feasible, project_to_cone, ProjectionConfig};
use surfcert_core::synth::*;
use surfcert_core::{Error, Grid2D, Surface, WeightField};

fn grid() -> Grid2D {
    Grid2D::uniform(80.0, 120.0, 31, 0.25, 1.25, 5).unwrap()
}

#[test]
fn clean_surfaces_are_feasible_fixed_points() {
    let g = grid();
    for vol in [VolSpec::Constant { sigma: 0.2 }, VolSpec::Smile { a: 0.2, b: 0.5 }] {
        let p = MarketParams { vol, ..MarketParams::default() };
        let (clean, noisy) = generate_surface(&p, &g).unwrap();
        assert!(is_feasible(&clean.values, &g, 1e-9));
        assert!(clean.is_nonnegative());
        assert_ne!(clean.values, noisy.values);
        let w = WeightField::vega_bump(&g, 100.0, 0.15, 0.2).unwrap();
        let proj = project_to_cone(&clean, &w, &ProjectionConfig::default()).unwrap();
        let diff = proj.values.iter().zip(&clean.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-9, "{diff}");
    }
}

#[test]
fn generation_is_seeded_and_noise_free_when_asked() {
    let g = grid();
    let p = MarketParams::default();
    let (_, a) = generate_surface(&p, &g).unwrap();
    let (_, b) = generate_surface(&p, &g).unwrap();
    assert_eq!(a.values, b.values);
    let (clean, noisy) = generate_surface(&MarketParams { noise_sigma: 0.0, ..p.clone() }, &g).unwrap();
    assert_eq!(clean.values, noisy.values);
    let bad = MarketParams { vol: VolSpec::Smile { a: -0.1, b: 0.0 }, ..p };
    assert!(matches!(generate_surface(&bad, &g), Err(Error::Parameter(_))));
}

#[test]
fn smile_dupire_matches_analytic_local_variance() {
    let (s, a, b) = (100.0, 0.2, 0.5);
    let g = Grid2D::uniform(80.0, 120.0, 41, 0.25, 1.25, 21).unwrap();
    let p = MarketParams { vol: VolSpec::Smile { a, b }, noise_sigma: 0.0, ..MarketParams::default() };
    let (clean, _) = generate_surface(&p, &g).unwrap();
    let f = dupire_field(&clean, &g, &FdConfig::default()).unwrap();
    // Local variance of a maturity-independent implied smile.
    let local = |k: f64, t: f64| {
        let m = (k - s) / s;
        let sig = a + b * m * m;
        let sk = 2.0 * b * m / s;
        let skk = 2.0 * b / (s * s);
        let d1 = ((s / k).ln() + 0.5 * sig * sig * t) / (sig * t.sqrt());
        let den = (1.0 + k * d1 * t.sqrt() * sk).powi(2) + k * k * t * sig * (skk - d1 * t.sqrt() * sk * sk);
        sig * sig / den
    };
    let mut worst: f64 = 0.0;
    for ti in 1..20 {
        for ki in 2..39 {
            let (k, t) = (g.strikes[ki], g.maturities[ti]);
            worst = worst.max((f.sigma2[g.idx(ti, ki)] - local(k, t)).abs());
        }
    }
    assert!(worst < 0.01, "{worst}");
}

#[test]
fn density_mean_is_the_forward() {
    let g = Grid2D::uniform(40.0, 200.0, 161, 0.25, 1.25, 5).unwrap();
    let p = MarketParams { noise_sigma: 0.0, ..MarketParams::default() };
    let (clean, _) = generate_surface(&p, &g).unwrap();
    let g5 = Grid2D::uniform(40.0, 200.0, 161, 0.5, 0.5 + 4.0 * 0.25, 5).unwrap();
    let (c5, _) = generate_surface(&p, &g5).unwrap();
    let d = extract_density(&c5, &g5, 0, &FdConfig::default()).unwrap();
    let mean: f64 = d.probs.iter().zip(&g5.strikes).map(|(p, k)| p * k).sum();
    assert!((mean / 100.0 - 1.0).abs() < 0.01, "{mean}");
    assert!((d.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert!(d.probs.iter().all(|p| *p >= 0.0));
    // Adjacent maturities share the forward.
    let means: Vec<f64> = (0..5)
        .map(|t| {
            let d = extract_density(&clean, &g, t, &FdConfig::default()).unwrap();
            d.probs.iter().zip(&g.strikes).map(|(p, k)| p * k).sum()
        })
        .collect();
    for w in means.windows(2) {
        assert!((w[1] / w[0] - 1.0).abs() < 0.01);
    }
}

#[test]
fn tent_row_gives_a_single_atom() {
    let g = Grid2D::uniform(80.0, 120.0, 9, 0.25, 1.25, 3).unwrap();
    let c = Surface::from_fn(&g, |k, t| (100.0 - k).max(0.0) + t).unwrap();
    let fd = FdConfig { window_k: 3, ..FdConfig::default() };
    let d = extract_density(&c, &g, 1, &fd).unwrap();
    let nonzero: Vec<usize> = (0..9).filter(|i| d.probs[*i] > 0.0).collect();
    assert_eq!(nonzero, vec![4]);
    assert_eq!(d.probs[4], 1.0);
    let flat = Surface::from_fn(&g, |k, _| 120.0 - k).unwrap();
    assert!(matches!(extract_density(&flat, &g, 0, &fd), Err(Error::Degenerate(_))));
}

#[test]
fn vix_replication_examples() {
    let tau = 30.0 / 365.0;
    let k = [90.0, 110.0];
    assert_eq!(vix2_replication(&[0.0; 2], &[0.0; 2], &k, 100.0, 0.0, tau).unwrap(), 0.0);
    let got = vix2_replication(&[1.0, 0.0], &[0.0, 1.0], &k, 100.0, 0.0, tau).unwrap();
    let hand = 2.0 / tau * 10.0 * (1.0 / 8100.0 + 1.0 / 12100.0);
    assert!((got - hand).abs() < 1e-10);
    let puts = [0.4, 1.1, 2.5, 4.0];
    let calls = [12.0, 6.0, 1.3, 0.2];
    let ks = [85.0, 95.0, 105.0, 115.0];
    let one = vix2_replication(&puts, &calls, &ks, 100.0, 0.01, tau).unwrap();
    let two = vix2_replication(&puts.map(|x| 2.0 * x), &calls.map(|x| 2.0 * x), &ks, 100.0, 0.01, tau).unwrap();
    assert!((two - 2.0 * one).abs() < 1e-12 * one);
    assert!(matches!(vix2_replication(&[1.0; 2], &[1.0; 2], &[0.0, 1.0], 100.0, 0.0, tau), Err(Error::Input(_))));
}

#[test]
fn sample_clouds_are_seeded_lognormal() {
    let p = MarketParams::default();
    let a = sample_clouds(&p, &[0.25, 1.0], 4000, 3);
    let b = sample_clouds(&p, &[0.25, 1.0], 4000, 3);
    assert_eq!(a, b);
    for (cloud, t) in a.iter().zip([0.25f64, 1.0]) {
        let n = cloud.len() as f64;
        let mean = cloud.iter().map(|v| v[0]).sum::<f64>() / n;
        let var_log = cloud.iter().map(|v| v[0].ln()).map(|x| (x + 0.02 * t).powi(2)).sum::<f64>() / n;
        assert!((mean - 1.0).abs() < 4.0 * 0.2 * t.sqrt() / n.sqrt());
        assert!((var_log / (0.04 * t) - 1.0).abs() < 0.1);
    }
}
