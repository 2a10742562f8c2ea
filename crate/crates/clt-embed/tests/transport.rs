use clt_embed::psd::SymMatrix;
use clt_embed::rng::stream;
use clt_embed::sums::CoupledPair;
use clt_embed::transport::*;
use clt_embed::Error;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn gauss_cloud(k: usize, d: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut r = stream(seed, 0);
    (0..k).map(|_| (0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect()).collect()
}

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn brute_force(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
    fn rec(i: usize, xs: &[Vec<f64>], ys: &[Vec<f64>], used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if i == xs.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..ys.len() {
            if !used[j] {
                used[j] = true;
                rec(i + 1, xs, ys, used, acc + sq(&xs[i], &ys[j]), best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    rec(0, xs, ys, &mut vec![false; ys.len()], 0.0, &mut best);
    (best / xs.len() as f64).sqrt()
}

#[test]
fn exact_assignment_examples() {
    let xs = gauss_cloud(50, 3, 1);
    assert_eq!(w2_exact_assignment(&xs, &xs).unwrap().value, 0.0);
    let a = vec![vec![0.0], vec![2.0]];
    let b = vec![vec![3.0], vec![1.0]];
    assert!((w2_exact_assignment(&a, &b).unwrap().value - 1.0).abs() < 1e-15);
    assert!(matches!(w2_exact_assignment(&a, &b[..1]), Err(Error::SizeMismatch(2, 1))));
    let big = gauss_cloud(EXACT_ASSIGNMENT_CAP + 1, 1, 2);
    assert!(matches!(w2_exact_assignment(&big, &big), Err(Error::SizeOverCap(..))));
}

#[test]
fn exact_assignment_matches_brute_force() {
    for s in 0..100 {
        let k = 2 + (s as usize % 6);
        let xs = gauss_cloud(k, 2, 1000 + s);
        let ys = gauss_cloud(k, 2, 2000 + s);
        let want = brute_force(&xs, &ys);
        let got = w2_exact_assignment(&xs, &ys).unwrap().value;
        assert!((want - got).abs() < 1e-12, "k {k}: {want} vs {got}");
    }
}

#[test]
fn one_dimensional_assignment_is_sorted_matching() {
    let xs = gauss_cloud(300, 1, 5);
    let ys: Vec<Vec<f64>> = gauss_cloud(300, 1, 6).into_iter().map(|v| vec![2.0 * v[0] + 0.3]).collect();
    let mut a: Vec<f64> = xs.iter().map(|v| v[0]).collect();
    let mut b: Vec<f64> = ys.iter().map(|v| v[0]).collect();
    a.sort_by(|p, q| p.partial_cmp(q).unwrap());
    b.sort_by(|p, q| p.partial_cmp(q).unwrap());
    let want = (a.iter().zip(&b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / 300.0).sqrt();
    let got = w2_exact_assignment(&xs, &ys).unwrap();
    assert!((want - got.value).abs() < 1e-12);
    assert!(got.ci_halfwidth > 0.0);
}

#[test]
fn sinkhorn_examples() {
    let xs = gauss_cloud(64, 2, 7);
    assert!(w2_sinkhorn(&xs, &xs, None, 10_000).unwrap().value <= 1e-6);
    let ys: Vec<Vec<f64>> = gauss_cloud(64, 2, 8).into_iter().map(|v| vec![v[0] + 0.5, v[1] + 0.5]).collect();
    let exact = w2_exact_assignment(&xs, &ys).unwrap().value;
    let base = default_epsilon(&xs, &ys) / 0.05;
    let vals: Vec<f64> = [0.04, 0.02, 0.01]
        .iter()
        .map(|f| w2_sinkhorn(&xs, &ys, Some(f * base), 1_000_000).unwrap().value)
        .collect();
    assert!((vals[2] - exact).abs() <= 0.05 * exact, "{vals:?} vs {exact}");
    for w in vals.windows(2) {
        assert!((w[1] - w[0]).abs() <= 0.05 * w[0], "{vals:?}");
    }
    assert!(exact <= vals[2] * 1.05);
}

#[test]
fn sinkhorn_reports_non_convergence() {
    let xs = gauss_cloud(30, 2, 9);
    let ys = gauss_cloud(30, 2, 10);
    let r = w2_sinkhorn(&xs, &ys, Some(1e-3), 2);
    assert!(matches!(r, Err(Error::SinkhornNoConvergence { .. })));
    assert!(w2_sinkhorn(&xs, &ys, Some(0.0), 3).is_err());
}

#[test]
fn bures_examples() {
    let a = SymMatrix::from_rows(&[vec![2.0, 0.3], vec![0.3, 1.0]]);
    assert!(w2_gaussian_closed_form(&a, &a).unwrap() < 1e-7);
    let d4 = SymMatrix::from_diag(&[4.0, 4.0]);
    let d1 = SymMatrix::identity(2);
    assert!((w2_gaussian_closed_form(&d4, &d1).unwrap() - 2f64.sqrt()).abs() < 1e-12);
    let bad = SymMatrix::from_diag(&[1.0, -1.0]);
    assert!(matches!(w2_gaussian_closed_form(&bad, &d1), Err(Error::NotPsd { .. })));
}

#[test]
fn bures_matches_sampled_assignment() {
    // well separated pair so the sampling floor is small relative to the distance
    let s1 = SymMatrix::from_rows(&[vec![4.0, 1.2], vec![1.2, 1.0]]);
    let s2 = SymMatrix::from_rows(&[vec![0.25, -0.1], vec![-0.1, 2.5]]);
    let r1 = clt_embed::psd::psd_sqrt(&s1).unwrap();
    let r2 = clt_embed::psd::psd_sqrt(&s2).unwrap();
    let xs: Vec<Vec<f64>> = gauss_cloud(2048, 2, 11).iter().map(|z| r1.mul_vec(z)).collect();
    let ys: Vec<Vec<f64>> = gauss_cloud(2048, 2, 12).iter().map(|z| r2.mul_vec(z)).collect();
    let closed = w2_gaussian_closed_form(&s1, &s2).unwrap();
    let emp = w2_exact_assignment(&xs, &ys).unwrap().value;
    assert!((emp - closed).abs() <= 0.1 * closed, "{emp} vs {closed}");
}

fn pair(s: Vec<f64>, g: Vec<f64>) -> CoupledPair {
    CoupledPair { s_n: s, g, n: 1 }
}

#[test]
fn coupling_examples() {
    let same: Vec<CoupledPair> = (0..100).map(|i| pair(vec![i as f64, 1.0], vec![i as f64, 1.0])).collect();
    assert_eq!(w2_upper_from_coupling(&same).unwrap().value, 0.0);
    let shifted: Vec<CoupledPair> = (0..100).map(|i| pair(vec![i as f64 + 1.0, 0.0], vec![i as f64, 0.0])).collect();
    assert!((w2_upper_from_coupling(&shifted).unwrap().value - 1.0).abs() < 1e-12);
    assert!(w2_upper_from_coupling(&shifted[..50]).is_err());
}

#[test]
fn quantile_distance_examples() {
    let pm = w2_discrete_vs_normal(&[0.0], &[1.0], 1.0).unwrap().value;
    assert!((pm - 1.0).abs() < 1e-14);
    let two = w2_discrete_vs_normal(&[-1.0, 1.0], &[0.5, 0.5], 1.0).unwrap().value;
    let want = (2.0 - 2.0 * (2.0 / std::f64::consts::PI).sqrt()).sqrt();
    assert!((two - want).abs() < 1e-12);
}

fn quantile_oracle(atoms: &[f64], w: &[f64], sigma: f64) -> f64 {
    use statrs::distribution::{ContinuousCDF, Normal};
    let nd = Normal::new(0.0, sigma).unwrap();
    let mut idx: Vec<usize> = (0..atoms.len()).collect();
    idx.sort_by(|&a, &b| atoms[a].partial_cmp(&atoms[b]).unwrap());
    let total: f64 = w.iter().sum();
    let m = 400_000;
    let mut acc = 0.0;
    let (mut k, mut cum) = (0usize, w[idx[0]] / total);
    for j in 0..m {
        let p = (j as f64 + 0.5) / m as f64;
        while p > cum && k + 1 < idx.len() {
            k += 1;
            cum += w[idx[k]] / total;
        }
        let z = nd.inverse_cdf(p);
        acc += (atoms[idx[k]] - z).powi(2);
    }
    (acc / m as f64).sqrt()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn quantile_distance_matches_midpoint_oracle(
        atoms in proptest::collection::vec(-3.0f64..3.0, 1..6),
        ws in proptest::collection::vec(0.1f64..1.0, 6),
        sigma in 0.3f64..2.0,
    ) {
        let w = &ws[..atoms.len()];
        let got = w2_discrete_vs_normal(&atoms, w, sigma).unwrap().value;
        let want = quantile_oracle(&atoms, w, sigma);
        prop_assert!((got - want).abs() < 2e-3 * (1.0 + want), "{got} vs {want}");
    }

    #[test]
    fn assignment_symmetry_and_triangle(seed in 0u64..10_000, k in 2usize..40, d in 1usize..4) {
        let x = gauss_cloud(k, d, seed);
        let y: Vec<Vec<f64>> = gauss_cloud(k, d, seed + 1).into_iter().map(|v| v.iter().map(|t| 2.0 * t).collect()).collect();
        let z: Vec<Vec<f64>> = gauss_cloud(k, d, seed + 2).into_iter().map(|v| v.iter().map(|t| t + 1.0).collect()).collect();
        let xy = w2_exact_assignment(&x, &y).unwrap().value;
        let yx = w2_exact_assignment(&y, &x).unwrap().value;
        prop_assert!((xy - yx).abs() < 1e-12);
        let yz = w2_exact_assignment(&y, &z).unwrap().value;
        let xz = w2_exact_assignment(&x, &z).unwrap().value;
        prop_assert!(xz <= xy + yz + 1e-9);
    }
}
