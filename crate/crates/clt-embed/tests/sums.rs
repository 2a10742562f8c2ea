use clt_embed::engine::*;
use clt_embed::measure::{isotropize, make_lattice_ball, DiscreteMeasure};
use clt_embed::psd::SymMatrix;
use clt_embed::rng::stream;
use clt_embed::sums::*;
use clt_embed::Error;
use proptest::prelude::*;
use rand::Rng;

fn two_point() -> DiscreteMeasure {
    DiscreteMeasure::uniform(1, &[vec![-1.0], vec![1.0]]).unwrap()
}

fn grid_for(m: &DiscreteMeasure, p: Policy, cfg: &EngineConfig, horizon: f64) -> TimeGrid {
    cfg.grid(p, m, horizon)
}

#[test]
fn iid_sum_examples() {
    let pm = DiscreteMeasure::point_mass(&[0.0, 0.0]);
    assert_eq!(sample_sn_iid(&pm, 17, &mut stream(0, 0)).unwrap(), vec![0.0, 0.0]);
    let m = make_lattice_ball(1, 0.5, 2).unwrap();
    for s in 0..20 {
        let x = sample_sn_iid(&m, 1, &mut stream(s, 0)).unwrap();
        assert!((0..m.len()).any(|i| m.atom(i)[0] == x[0]));
    }
    assert!(sample_sn_iid(&m, 0, &mut stream(0, 0)).is_err());
    let tp = two_point();
    let mut rng = stream(3, 0);
    let n = 100_000;
    let v: f64 = (0..n).map(|_| sample_sn_iid(&tp, 4, &mut rng).unwrap()[0].powi(2)).sum::<f64>() / n as f64;
    assert!((v - 1.0).abs() < 0.02, "{v}");
}

#[test]
fn coupled_point_mass_is_zero() {
    let m = DiscreteMeasure::point_mass(&[0.0]);
    let cfg = EngineConfig::default();
    let grid = grid_for(&m, Policy::Projection, &cfg, 1.0);
    let mg = gamma_moments(&m, Policy::Projection, &cfg, &grid, 100, &mut stream(0, 0)).unwrap();
    let p = sample_sn_coupled(&m, Policy::Projection, 5, &mg, &cfg, &mut stream(0, 1)).unwrap();
    assert_eq!(p.s_n, vec![0.0]);
    assert_eq!(p.g, vec![0.0]);
}

#[test]
fn coupled_grid_mismatch_is_rejected() {
    let m = two_point();
    let cfg = EngineConfig::default();
    let grid = grid_for(&m, Policy::Projection, &cfg, 1.0);
    let mg = gamma_moments(&m, Policy::Projection, &cfg, &grid, 100, &mut stream(0, 0)).unwrap();
    let r = CoupledSampler::new(&m, Policy::Capped, &cfg, &mg);
    assert!(matches!(r, Err(Error::GridMismatch(_))));
    let other = EngineConfig { dt: Some(2e-3), ..Default::default() };
    assert!(matches!(CoupledSampler::new(&m, Policy::Projection, &other, &mg), Err(Error::GridMismatch(_))));
}

#[test]
fn coupled_sum_is_the_embedded_sum() {
    let m = make_lattice_ball(2, 0.5, 2).unwrap();
    for p in [Policy::Projection, Policy::Capped, Policy::Foellmer] {
        let cfg = EngineConfig { du: 0.01, dt: Some(5e-3), ..Default::default() };
        let grid = grid_for(&m, p, &cfg, 1.0);
        let mg = gamma_moments(&m, p, &cfg, &grid, 100, &mut stream(1, 0)).unwrap();
        let sampler = CoupledSampler::new(&m, p, &cfg, &mg).unwrap();
        let (pair, pts) = sampler.sample_detailed(12, &mut stream(1, 1)).unwrap();
        for k in 0..2 {
            let direct: f64 = pts.iter().map(|x| x[k]).sum::<f64>() / 12f64.sqrt();
            assert!((direct - pair.s_n[k]).abs() < 1e-8);
        }
        for x in &pts {
            assert!((0..m.len()).any(|i| m.atom(i).iter().zip(x).all(|(a, b)| (a - b).abs() < 1e-12)));
        }
    }
}

#[test]
fn coupled_gaussian_has_covariance_of_x() {
    let m = two_point();
    let cfg = EngineConfig { dt: Some(2e-3), ..Default::default() };
    let grid = grid_for(&m, Policy::Projection, &cfg, 6.0);
    let mg = gamma_moments(&m, Policy::Projection, &cfg, &grid, 4000, &mut stream(2, 0)).unwrap();
    let sampler = CoupledSampler::new(&m, Policy::Projection, &cfg, &mg).unwrap();
    let pairs = sampler.sample_many(64, 1000, &mut stream(2, 1)).unwrap();
    let (v, se) = mean_se(&pairs.iter().map(|p| p.g[0] * p.g[0]).collect::<Vec<_>>());
    assert!((v - 1.0).abs() < 3.0 * se + 0.01, "{v} ± {se}");
    let (cost, cse) = coupling_cost(&pairs);
    let rhs = theorem_main_rhs(&mg, 64);
    assert!(cost <= rhs.rhs_integral + 4.0 * (cse + rhs.rhs_se), "{cost} vs {}", rhs.rhs_integral);
}

#[test]
fn coupled_marginal_matches_iid_in_distribution() {
    let m = make_lattice_ball(1, 1.0, 1).unwrap();
    let cfg = EngineConfig { dt: Some(2e-3), ..Default::default() };
    let grid = grid_for(&m, Policy::Capped, &cfg, 3.0);
    let mg = gamma_moments(&m, Policy::Capped, &cfg, &grid, 400, &mut stream(4, 0)).unwrap();
    let sampler = CoupledSampler::new(&m, Policy::Capped, &cfg, &mg).unwrap();
    let pairs = sampler.sample_many(8, 1000, &mut stream(4, 1)).unwrap();
    let xs: Vec<Vec<f64>> = pairs.iter().map(|p| p.s_n.clone()).collect();
    let mut rng = stream(4, 2);
    let ys: Vec<Vec<f64>> = (0..1000).map(|_| sample_sn_iid(&m, 8, &mut rng).unwrap()).collect();
    let (_, p) = energy_distance_test(&xs, &ys, 199, &mut stream(4, 3)).unwrap();
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn energy_test_detects_a_shift() {
    let mut rng = stream(6, 0);
    let m = two_point();
    let xs: Vec<Vec<f64>> = (0..300).map(|_| sample_sn_iid(&m, 4, &mut rng).unwrap()).collect();
    let ys: Vec<Vec<f64>> = xs.iter().map(|x| vec![x[0] + 0.5]).collect();
    let (_, p) = energy_distance_test(&xs, &ys, 199, &mut rng).unwrap();
    assert!(p < 0.01);
}

fn scalar_grid(times: &[f64], f: impl Fn(f64) -> f64, g4: impl Fn(f64) -> f64) -> MomentGrid {
    let e2: Vec<SymMatrix> = times.iter().map(|&t| SymMatrix::scalar(1, f(t))).collect();
    let e4: Vec<SymMatrix> = times.iter().map(|&t| SymMatrix::scalar(1, g4(t))).collect();
    MomentGrid::from_curves(Policy::Projection, times.to_vec(), e2.clone(), e2, e4).unwrap()
}

#[test]
fn rhs_examples() {
    let times: Vec<f64> = (0..=20_000).map(|k| k as f64 * 1e-3).collect();
    let zero = scalar_grid(&times, |_| 0.0, |_| 0.0);
    assert_eq!(theorem_main_rhs(&zero, 10).rhs_integral, 0.0);

    let mg = scalar_grid(&times, |t| (-t).exp(), |t| (-t).exp());
    let r = theorem_main_rhs(&mg, 10);
    let exact = 40f64.ln() / 10.0 + 0.1 - 4.0 * (-20f64).exp();
    assert!((r.rhs_integral - exact).abs() < 1e-3, "{}", r.rhs_integral);
    assert!((r.crossover.unwrap() - 40f64.ln()).abs() < 1e-3);
    assert!((r.half_grid_integral - r.rhs_integral).abs() < 1e-4);

    for d in [1usize, 3] {
        let t: Vec<f64> = (0..=100).map(|k| k as f64 * 0.01).collect();
        let id = vec![SymMatrix::identity(d); t.len()];
        let mg = MomentGrid::from_curves(Policy::Capped, t, id.clone(), id.clone(), id).unwrap();
        for n in [1usize, 5, 100] {
            let want = (d as f64 / n as f64).min(4.0 * d as f64);
            assert!((theorem_main_rhs(&mg, n).rhs_integral - want).abs() < 1e-12);
        }
    }
}

proptest! {
    #[test]
    fn rhs_is_nonincreasing_in_n(a in 0.1f64..3.0, b in 0.0f64..2.0, n in 1usize..200) {
        let times: Vec<f64> = (0..=200).map(|k| k as f64 * 0.02).collect();
        let mg = scalar_grid(&times, |t| a * (-t).exp(), |t| a * a * (1.0 + b) * (-2.0 * t).exp());
        let r1 = theorem_main_rhs(&mg, n).rhs_integral;
        let r2 = theorem_main_rhs(&mg, n + 1).rhs_integral;
        prop_assert!(r2 <= r1 + 1e-15);
        prop_assert!(r1 >= 0.0);
    }

    #[test]
    fn wilson_contains_estimate(k in 0usize..500, extra in 0usize..500) {
        let n = k + extra + 1;
        let (lo, hi) = wilson_interval(k, n, Z99);
        let p = k as f64 / n as f64;
        prop_assert!(lo <= p + 1e-12 && p <= hi + 1e-12);
        prop_assert!((0.0..=1.0).contains(&lo) && (0.0..=1.0).contains(&hi));
    }
}

#[test]
fn tau_stats_examples() {
    let pm = DiscreteMeasure::point_mass(&[0.0]);
    let cfg = EngineConfig::default();
    let recs = run_many(&pm, Policy::Projection, &cfg, 1000, &mut stream(0, 0)).unwrap();
    let ts = tau_statistics(&recs, 1.0).unwrap();
    assert_eq!(ts.mean_tau, 0.0);
    assert!(ts.tails.iter().skip(1).all(|r| r.freq == 0.0));

    let recs = run_many(&two_point(), Policy::Projection, &cfg, 10_000, &mut stream(0, 1)).unwrap();
    let ts = tau_statistics(&recs, 1.0).unwrap();
    assert!((0.97..=1.03).contains(&ts.mean_tau), "{}", ts.mean_tau);
    for w in ts.tails.windows(2) {
        assert!(w[1].freq <= w[0].freq);
    }

    let m = make_lattice_ball(1, 1.0, 1).unwrap();
    let recs = run_many(&m, Policy::Projection, &cfg, 10_000, &mut stream(0, 2)).unwrap();
    let ts = tau_statistics(&recs, 1.0).unwrap();
    assert!(ts.tails.iter().all(|r| r.consistent()));
    assert!(ts.tails[1].freq <= 0.5 + (ts.tails[1].ci_hi - ts.tails[1].ci_lo));
    assert!(ts.tails[2].freq <= 0.25 + (ts.tails[2].ci_hi - ts.tails[2].ci_lo));
    assert!(ts.to_csv().lines().count() == TAIL_ROWS + 1);
}

#[test]
fn tau_stats_rejects_open_or_small_inputs() {
    let cfg = EngineConfig::default();
    let mut recs = run_many(&two_point(), Policy::Projection, &cfg, 1000, &mut stream(0, 1)).unwrap();
    recs[3].collapsed = false;
    assert!(matches!(tau_statistics(&recs, 1.0), Err(Error::Uncollapsed(1))));
    assert!(tau_statistics(&recs[..10], 1.0).is_err());
}

#[test]
fn coupled_gaussian_has_no_outliers_when_few_walkers_remain() {
    let mut r = stream(9, 2);
    let atoms: Vec<Vec<f64>> = (0..12).map(|_| (0..3).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let m = isotropize(&DiscreteMeasure::uniform(3, &atoms).unwrap()).unwrap();
    let cfg = EngineConfig { dt: Some(1e-2), ..Default::default() };
    let grid = grid_for(&m, Policy::Capped, &cfg, 3.0);
    let mg = gamma_moments(&m, Policy::Capped, &cfg, &grid, 2000, &mut stream(9, 0)).unwrap();
    let sampler = CoupledSampler::new(&m, Policy::Capped, &cfg, &mg).unwrap();
    let pairs = sampler.sample_many(1, 2000, &mut stream(9, 1)).unwrap();
    let worst = pairs.iter().map(|p| p.g.iter().map(|x| x * x).sum::<f64>()).fold(0.0, f64::max);
    // P(χ²₃ > 40) < 1e-8
    assert!(worst < 40.0, "{worst}");
}
