use clt_embed::engine::*;
use clt_embed::measure::{make_lattice_ball, particle_cloud_product, DiscreteMeasure, Density1d};
use clt_embed::rng::stream;
use clt_embed::Error;
use rand::Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ChiSquared, ContinuousCDF};
use std::sync::Arc;

fn two_point(beta: f64) -> DiscreteMeasure {
    DiscreteMeasure::uniform(1, &[vec![-beta], vec![beta]]).unwrap()
}

fn five_atoms() -> DiscreteMeasure {
    make_lattice_ball(1, 0.5, 2).unwrap()
}

// P(|B| stays below 1 up to t), eigenfunction series
fn bm_survival(t: f64) -> f64 {
    let mut s = 0.0;
    for n in 0..200 {
        let k = (2 * n + 1) as f64;
        let sign = if n % 2 == 0 { 1.0 } else { -1.0 };
        s += sign / k * (-k * k * std::f64::consts::PI.powi(2) * t / 8.0).exp();
    }
    4.0 / std::f64::consts::PI * s
}

#[test]
fn point_mass_step_is_inert() {
    let m = DiscreteMeasure::point_mass(&[0.3, -1.0]);
    let cfg = EngineConfig::default();
    for p in [Policy::Projection, Policy::Capped, Policy::Foellmer] {
        let s = TrajectoryState::new(&m, p, &cfg);
        assert!(s.collapsed);
        let s2 = step(&s, &[1.0, 2.0], 0.1).unwrap();
        assert_eq!(s2.mean(), &[0.3, -1.0]);
        assert_eq!(s2.gamma().trace(), 0.0);
        assert!(s2.collapsed);
    }
}

#[test]
fn zero_increment_keeps_symmetric_mean() {
    let m = two_point(1.0);
    let s = TrajectoryState::new(&m, Policy::Projection, &EngineConfig::default());
    let s2 = step(&s, &[0.0], 1e-3).unwrap();
    assert!(s2.mean()[0].abs() < 1e-15);
    assert!((s2.weights()[0] - 0.5).abs() < 1e-15);
}

#[test]
fn projection_step_variance_matches_gamma() {
    let m = two_point(1.0);
    let cfg = EngineConfig { noise: NoiseMode::Brownian, ..Default::default() };
    let s = TrajectoryState::new(&m, Policy::Projection, &cfg);
    let dt: f64 = 1e-4;
    let mut rng = stream(11, 0);
    let n = 100_000;
    let (mut s1, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let db = dt.sqrt() * rng.sample::<f64, _>(StandardNormal);
        let x = step(&s, &[db], dt).unwrap().mean()[0];
        s1 += x;
        s2 += x * x;
    }
    let var = s2 / n as f64 - (s1 / n as f64).powi(2);
    assert!((var / dt - 1.0).abs() < 0.05, "{}", var / dt);
}

#[test]
fn point_mass_run_collapses_at_zero() {
    let m = DiscreteMeasure::point_mass(&[0.0]);
    let r = run_trajectory(&m, Policy::Projection, &EngineConfig::default(), &mut stream(1, 0)).unwrap();
    assert_eq!(r.tau, 0.0);
    assert_eq!(r.embedded_point, vec![0.0]);
}

#[test]
fn two_point_projection_mean_tau_is_beta_squared() {
    for beta in [1.0, 0.5] {
        let m = two_point(beta);
        let cfg = EngineConfig::default();
        let recs = run_many(&m, Policy::Projection, &cfg, 10_000, &mut stream(5, 0)).unwrap();
        let n = recs.len() as f64;
        let mean = recs.iter().map(|r| r.tau).sum::<f64>() / n;
        let var = recs.iter().map(|r| (r.tau - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let se = (var / n).sqrt();
        assert!((mean - beta * beta).abs() < 3.0 * se, "beta {beta}: {mean} ± {se}");
        for r in &recs {
            assert!((r.embedded_point[0].abs() - beta).abs() < 1e-12);
        }
    }
}

#[test]
fn five_atom_embedding_has_law_mu() {
    let m = five_atoms();
    for p in [Policy::Projection, Policy::Capped, Policy::Foellmer] {
        let recs = run_many(&m, p, &EngineConfig::default(), 10_000, &mut stream(21, p as u64)).unwrap();
        let mut counts = vec![0.0; m.len()];
        for r in &recs {
            let x = m.atom(r.atom_index);
            assert!((x[0] - r.embedded_point[0]).abs() < 1e-8);
            counts[r.atom_index] += 1.0;
        }
        let n = recs.len() as f64;
        let chi2: f64 = counts
            .iter()
            .zip(m.weights())
            .map(|(c, w)| (c - n * w).powi(2) / (n * w))
            .sum();
        let p_value = 1.0 - ChiSquared::new(4.0).unwrap().cdf(chi2);
        assert!(p_value > 0.01, "{p:?}: chi2 {chi2}");
    }
}

#[test]
fn tilt_point_mass_and_half_time() {
    let m = DiscreteMeasure::point_mass(&[0.0]);
    let r = run_foellmer_tilt(&m, &EngineConfig::default(), &mut stream(2, 0)).unwrap();
    assert_eq!(r.embedded_point, vec![0.0]);
    assert_eq!(foellmer_quad_coeff(0.5), 1.0);
}

fn nested_paths(dus: &[f64], t_max: f64, seed: u64) -> Vec<(TimeGrid, Vec<Vec<f64>>)> {
    let fine_du = dus.iter().cloned().fold(f64::INFINITY, f64::min);
    let fine = TimeGrid::foellmer(fine_du, t_max);
    let mut rng = stream(seed, 0);
    let fine_db: Vec<f64> = fine
        .times
        .windows(2)
        .map(|w| (w[1] - w[0]).sqrt() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let mut cum = vec![0.0];
    for x in &fine_db {
        cum.push(cum.last().unwrap() + x);
    }
    dus.iter()
        .map(|&du| {
            let g = TimeGrid::foellmer(du, t_max);
            let idx: Vec<usize> = g
                .times
                .iter()
                .map(|t| fine.times.iter().position(|s| (s - t).abs() < 1e-12).expect("nested grids"))
                .collect();
            let dbs = idx.windows(2).map(|w| vec![cum[w[1]] - cum[w[0]]]).collect();
            (g, dbs)
        })
        .collect()
}

#[test]
fn tilt_and_step_agree_pathwise_at_first_order() {
    let m = five_atoms();
    let dus = [0.02, 0.01, 0.005];
    let mut ratios = vec![];
    for seed in 0..6 {
        let paths = nested_paths(&dus, 1.0 - 1e-4, 100 + seed);
        let mut errs = vec![];
        for (k, (grid, dbs)) in paths.iter().enumerate() {
            let cfg = EngineConfig { du: dus[k], store_path: true, noise: NoiseMode::Brownian, ..Default::default() };
            let a = run_trajectory_with_increments(&m, Policy::Foellmer, &cfg, dbs).unwrap();
            let b = run_foellmer_tilt_with_increments(&m, &cfg, dbs).unwrap();
            let (pa, pb) = (a.path.unwrap(), b.path.unwrap());
            let n = pa.a.len().min(pb.a.len()).min(grid.len());
            let e = (0..n).map(|i| (pa.a[i][0] - pb.a[i][0]).abs()).fold(0.0, f64::max);
            errs.push(e);
        }
        if errs[0] > 1e-6 {
            ratios.push((errs[0] / errs[2]).log2() / 2.0);
        }
    }
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let med = ratios[ratios.len() / 2];
    assert!((0.6..1.5).contains(&med), "slopes {ratios:?}");
}

#[test]
fn moments_of_point_mass_vanish() {
    let m = DiscreteMeasure::point_mass(&[1.0, 2.0]);
    let grid = TimeGrid::uniform(0.01, 0.5);
    let mg = gamma_moments(&m, Policy::Capped, &EngineConfig::default(), &grid, 100, &mut stream(3, 0)).unwrap();
    for k in 0..grid.len() {
        assert_eq!(mg.mean_gamma[k].trace(), 0.0);
        assert_eq!(mg.mean_gamma4[k].trace(), 0.0);
        assert_eq!(mg.sigma[k], 0.0);
    }
}

#[test]
fn two_point_gamma_square_is_survival() {
    let m = two_point(1.0);
    let cfg = EngineConfig::default();
    let grid = TimeGrid::uniform(1e-3, 1.2);
    let mg = gamma_moments(&m, Policy::Projection, &cfg, &grid, 4000, &mut stream(8, 0)).unwrap();
    for t in [0.25, 0.5, 1.0] {
        let k = (t / 1e-3_f64).round() as usize;
        let est = mg.mean_gamma2[k].trace();
        let se = mg.se_tr_gamma2[k];
        let exact = bm_survival(t);
        assert!((est - exact).abs() < 3.0 * se + 0.005, "t {t}: {est} vs {exact} (se {se})");
    }
    assert!(mg.jensen_slack() >= 0.0);
}

#[test]
fn gaussian_cloud_foellmer_gamma_is_identity() {
    let f = Density1d::gauss(1.0).unwrap();
    let m = particle_cloud_product(&f, 2, 100_000, &mut stream(4, 0)).unwrap();
    let grid = TimeGrid { times: vec![0.0, 0.1, 0.5, 0.9] };
    let mg = gamma_moments(&m, Policy::Foellmer, &EngineConfig::default(), &grid, 100, &mut stream(4, 1)).unwrap();
    for k in 1..4 {
        let g = &mg.mean_gamma[k];
        for i in 0..2 {
            for j in 0..2 {
                let target = if i == j { 1.0 } else { 0.0 };
                assert!((g.get(i, j) - target).abs() < 0.05, "t {} {:?}", grid.times[k], g);
            }
        }
    }
}

#[test]
fn cov_increment_residual_point_mass_and_missing_path() {
    let m = DiscreteMeasure::point_mass(&[0.0]);
    let cfg = EngineConfig { store_path: true, ..Default::default() };
    let r = run_trajectory(&m, Policy::Projection, &cfg, &mut stream(0, 0)).unwrap();
    assert_eq!(dat_residual(&r).unwrap().mean, 0.0);
    let r2 = run_trajectory(&two_point(1.0), Policy::Projection, &EngineConfig::default(), &mut stream(0, 1)).unwrap();
    assert!(matches!(dat_residual(&r2), Err(Error::MissingPath)));
}

#[test]
fn cov_increment_residual_is_first_order() {
    let m = two_point(1.0);
    let dts = [1e-2, 5e-3, 2.5e-3];
    let mut res = vec![];
    for &dt in &dts {
        let cfg = EngineConfig { dt: Some(dt), store_path: true, noise: NoiseMode::Brownian, ..Default::default() };
        let mut total = 0.0;
        let mut steps = 0usize;
        for j in 0..200 {
            let r = run_trajectory(&m, Policy::Projection, &cfg, &mut stream(78, j)).unwrap();
            let d = dat_residual(&r).unwrap();
            total += d.mean * d.steps as f64;
            steps += d.steps;
        }
        res.push(total / steps as f64);
    }
    for w in res.windows(2) {
        let ratio = w[0] / w[1];
        assert!((ratio - 2.0).abs() < 0.6, "residuals {res:?}");
    }
}

#[test]
fn symmetric_measure_has_pure_drift_rhs() {
    let m = DiscreteMeasure::uniform(2, &[vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 0.5], vec![0.0, -0.5]]).unwrap();
    let dt = 1e-3;
    for p in [Policy::Projection, Policy::Capped, Policy::Foellmer] {
        let s = TrajectoryState::new(&m, p, &EngineConfig::default());
        let (a, c) = (s.cov(), s.drive());
        let ac = a.matmul(&c);
        let drift = &ac * &ac.transpose() * dt;
        for db in [[0.0, 0.0], [1.0, -2.0], [0.03, 0.7]] {
            let rhs = s.cov_increment_rhs(&db, dt);
            let diff = (rhs.to_dmatrix() + &drift).norm();
            assert!(diff < 1e-8, "{p:?}: {diff}");
        }
    }
}

#[test]
fn max_steps_exhaustion_is_reported() {
    let m = two_point(1.0);
    let cfg = EngineConfig { dt: Some(1e-9), max_steps: 1000, ..Default::default() };
    let r = run_trajectory(&m, Policy::Projection, &cfg, &mut stream(0, 0));
    assert!(matches!(r, Err(Error::NoCollapse { .. })));
}

#[test]
fn foellmer_tau_at_most_one() {
    let m = make_lattice_ball(2, 0.3, 3).unwrap();
    let recs = run_many(&m, Policy::Foellmer, &EngineConfig::default(), 200, &mut stream(9, 0)).unwrap();
    for r in recs {
        assert!(r.collapsed && r.tau <= 1.0);
        let x = m.atom(r.atom_index);
        assert!(x.iter().zip(&r.embedded_point).all(|(a, b)| (a - b).abs() < 1e-8));
    }
}

#[test]
fn martingale_property_of_observables() {
    let m = DiscreteMeasure::new(2, &[vec![1.0, 0.0], vec![-0.5, 0.8], vec![0.2, -1.1]], &[0.5, 0.3, 0.2]).unwrap();
    let arc = Arc::new(m.clone());
    let sq_norm = |l: usize| m.atom(l).iter().map(|x| x * x).sum::<f64>();
    let mo = clt_embed::measure::moments(&m);
    let exact = [mo.mean[0], mo.mean[1], (0..3).map(|l| m.weights()[l] * sq_norm(l)).sum::<f64>(), 0.2];
    let marks = [50usize, 150, 300];
    for p in [Policy::Projection, Policy::Capped, Policy::Foellmer] {
        let g: Vec<f64> = if p == Policy::Foellmer {
            TimeGrid::foellmer(2e-3, 1.0 - 1e-4).times
        } else {
            TimeGrid::uniform(2e-3, 0.6).times
        };
        let n = 10_000;
        let mut sums = vec![[0.0_f64; 8]; marks.len()];
        for j in 0..n {
            let mut rng = stream(31, j);
            let mut obs = |k: usize, s: &TrajectoryState| {
                if let Some(i) = marks.iter().position(|&mk| mk == k) {
                    let w = s.weights();
                    let a = s.mean();
                    let sq: f64 = (0..3).map(|l| w[l] * sq_norm(l)).sum();
                    for (q, v) in [a[0], a[1], sq, w[2]].iter().enumerate() {
                        sums[i][q] += v;
                        sums[i][4 + q] += v * v;
                    }
                }
            };
            run_on_grid(&arc, p, &EngineConfig::default(), &g, Noise::Random(&mut rng), &mut obs, true).unwrap();
        }
        let nf = n as f64;
        for row in &sums {
            for q in 0..4 {
                let mean = row[q] / nf;
                let se = ((row[4 + q] / nf - mean * mean).max(0.0) / nf).sqrt();
                assert!((mean - exact[q]).abs() <= 4.0 * se + 1e-9, "{p:?} obs {q}: {mean} vs {} (se {se})", exact[q]);
            }
        }
    }
}

#[test]
fn null_direction_stays_null_as_top_eigenvalue_shrinks() {
    // the off-line atom starts below the relative cutoff
    let m = DiscreteMeasure::new(2, &[vec![-1.0, 0.0], vec![1.0, 0.0], vec![0.0, 0.05]], &[1.0, 1.0, 4e-8]).unwrap();
    let s = TrajectoryState::new(&m, Policy::Projection, &EngineConfig::default());
    assert_eq!(s.rank, 1);
    let recs = run_many(&m, Policy::Projection, &EngineConfig::default(), 500, &mut stream(5, 0)).unwrap();
    let bad: usize = recs.iter().map(|r| r.diagnostics.rank_increases).sum();
    assert_eq!(bad, 0);
    assert!(recs.iter().all(|r| r.collapsed));
}
