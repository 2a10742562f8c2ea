//! Wasserstein-2 estimators: exact assignment, debiased Sinkhorn, the Bures
//! closed form, coupling upper bounds, and an exact 1-D discrete-vs-normal
//! distance.

use crate::error::{Error, Result};
use crate::psd::{psd_sqrt, SymMatrix};
use crate::rng::stream;
use crate::sums::{mean_se, CoupledPair};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

/// Largest sample size accepted by [`w2_exact_assignment`].
pub const EXACT_ASSIGNMENT_CAP: usize = 4096;
pub const BOOTSTRAP_REPLICAS: usize = 200;
const BOOTSTRAP_SEED: u64 = 0x5eed_b007;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum W2Method {
    ExactAssignment,
    Sinkhorn,
    Coupling,
    GaussianClosedForm,
    Quantile1d,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct W2Estimate {
    pub value: f64,
    pub ci_halfwidth: f64,
    pub method: W2Method,
    pub sizes: (usize, usize),
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Minimum-cost perfect matching on a dense `k × k` row-major cost matrix.
/// Returns `assignment[row] = col` and the total cost.
pub fn solve_assignment(cost: &[f64], k: usize) -> (Vec<usize>, f64) {
    if k == 0 {
        return (vec![], 0.0);
    }
    // 1-based potentials; column 0 is the virtual start
    let inf = f64::INFINITY;
    let mut u = vec![0.0; k + 1];
    let mut v = vec![0.0; k + 1];
    let mut p = vec![0usize; k + 1];
    let mut way = vec![0usize; k + 1];
    let mut minv = vec![inf; k + 1];
    let mut used = vec![false; k + 1];
    for i in 1..=k {
        p[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|x| *x = inf);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let row = &cost[(i0 - 1) * k..i0 * k];
            let ui0 = u[i0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=k {
                if !used[j] {
                    let cur = row[j - 1] - ui0 - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=k {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; k];
    for j in 1..=k {
        assignment[p[j] - 1] = j - 1;
    }
    let total = (0..k).map(|i| cost[i * k + assignment[i]]).sum();
    (assignment, total)
}

/// Bootstrap CI half-width of `√mean(costs)` at 95%.
fn bootstrap_halfwidth(costs: &[f64]) -> f64 {
    let k = costs.len();
    if k < 2 {
        return 0.0;
    }
    let mut reps: Vec<f64> = (0..BOOTSTRAP_REPLICAS)
        .into_par_iter()
        .map(|b| {
            let mut r = stream(BOOTSTRAP_SEED, b as u64);
            let s: f64 = (0..k).map(|_| costs[r.random_range(0..k)]).sum();
            (s / k as f64).max(0.0).sqrt()
        })
        .collect();
    reps.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let q = |p: f64| reps[((p * (reps.len() - 1) as f64).round() as usize).min(reps.len() - 1)];
    0.5 * (q(0.975) - q(0.025))
}

fn check_samples(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<usize> {
    if xs.len() != ys.len() {
        return Err(Error::SizeMismatch(xs.len(), ys.len()));
    }
    let d = xs.first().map_or(0, |x| x.len());
    if let Some(bad) = xs.iter().chain(ys).find(|x| x.len() != d) {
        return Err(Error::DimensionMismatch { expected: d, got: bad.len() });
    }
    Ok(d)
}

/// Exact empirical W2 between two equal-size uniform samples.
pub fn w2_exact_assignment(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Result<W2Estimate> {
    check_samples(xs, ys)?;
    let k = xs.len();
    if k > EXACT_ASSIGNMENT_CAP {
        return Err(Error::SizeOverCap(k, EXACT_ASSIGNMENT_CAP));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("empty samples".into()));
    }
    let mut cost = vec![0.0; k * k];
    cost.par_chunks_mut(k).enumerate().for_each(|(i, row)| {
        for (j, c) in row.iter_mut().enumerate() {
            *c = sq_dist(&xs[i], &ys[j]);
        }
    });
    let (asg, total) = solve_assignment(&cost, k);
    let pair_costs: Vec<f64> = (0..k).map(|i| cost[i * k + asg[i]]).collect();
    Ok(W2Estimate {
        value: (total / k as f64).max(0.0).sqrt(),
        ci_halfwidth: bootstrap_halfwidth(&pair_costs),
        method: W2Method::ExactAssignment,
        sizes: (k, k),
    })
}

fn log_sum_exp(v: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = v.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn max_cost(cost: &[f64]) -> f64 {
    cost.iter().fold(0.0_f64, |m, &c| m.max(c))
}

/// `ε` schedule halving from the cost scale down to the target.
fn eps_schedule(cost: &[f64], eps: f64) -> Vec<f64> {
    let mut out = vec![];
    let mut e = max_cost(cost).max(eps);
    while e > eps {
        out.push(e);
        e *= 0.5;
    }
    out.push(eps);
    out
}

const WARM_ITERS: usize = 20;
const CHECK_EVERY: usize = 10;
/// Over-relaxation of the final stage.
const OMEGA: f64 = 1.8;

/// Entropic OT value `⟨a,f⟩ + ⟨b,g⟩` for uniform weights, with `ε`-scaling
/// warm starts.
fn sinkhorn_value(cost: &[f64], n: usize, m: usize, eps: f64, max_iters: usize) -> Result<f64> {
    let la = -(n as f64).ln();
    let lb = -(m as f64).ln();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];
    let sched = eps_schedule(cost, eps);
    let mut err = f64::INFINITY;
    for (stage, &e) in sched.iter().enumerate() {
        let last = stage + 1 == sched.len();
        let iters = if last { max_iters } else { WARM_ITERS };
        let omega = if last { OMEGA } else { 1.0 };
        for it in 0..iters {
            for i in 0..n {
                let row = &cost[i * m..(i + 1) * m];
                let t = -e * log_sum_exp((0..m).map(|j| lb + (g[j] - row[j]) / e));
                f[i] = (1.0 - omega) * f[i] + omega * t;
            }
            for j in 0..m {
                let t = -e * log_sum_exp((0..n).map(|i| la + (f[i] - cost[i * m + j]) / e));
                g[j] = (1.0 - omega) * g[j] + omega * t;
            }
            if !last || (it % CHECK_EVERY != CHECK_EVERY - 1 && it + 1 != iters) {
                continue;
            }
            err = 0.0;
            for i in 0..n {
                let row = &cost[i * m..(i + 1) * m];
                let mass: f64 = (0..m).map(|j| (la + lb + (f[i] + g[j] - row[j]) / e).exp()).sum();
                err += (mass - 1.0 / n as f64).abs();
            }
            if err < 1e-8 {
                return Ok(f.iter().sum::<f64>() / n as f64 + g.iter().sum::<f64>() / m as f64);
            }
        }
    }
    Err(Error::SinkhornNoConvergence { iters: max_iters, err })
}

/// Self-transport value `2⟨a, f⟩` with the averaged symmetric iteration.
fn sinkhorn_symmetric(cost: &[f64], n: usize, eps: f64, max_iters: usize) -> Result<f64> {
    let la = -(n as f64).ln();
    let mut f = vec![0.0; n];
    let sched = eps_schedule(cost, eps);
    let mut err = f64::INFINITY;
    for (stage, &e) in sched.iter().enumerate() {
        let last = stage + 1 == sched.len();
        let iters = if last { max_iters } else { WARM_ITERS };
        for it in 0..iters {
            let t: Vec<f64> = (0..n)
                .map(|i| {
                    let row = &cost[i * n..(i + 1) * n];
                    -e * log_sum_exp((0..n).map(|j| la + (f[j] - row[j]) / e))
                })
                .collect();
            for i in 0..n {
                f[i] = 0.5 * (f[i] + t[i]);
            }
            if !last || (it % CHECK_EVERY != CHECK_EVERY - 1 && it + 1 != iters) {
                continue;
            }
            err = 0.0;
            for i in 0..n {
                let row = &cost[i * n..(i + 1) * n];
                let mass: f64 = (0..n).map(|j| (2.0 * la + (f[i] + f[j] - row[j]) / e).exp()).sum();
                err += (mass - 1.0 / n as f64).abs();
            }
            if err < 1e-8 {
                return Ok(2.0 * f.iter().sum::<f64>() / n as f64);
            }
        }
    }
    Err(Error::SinkhornNoConvergence { iters: max_iters, err })
}

fn cost_matrix(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> Vec<f64> {
    let m = ys.len();
    let mut c = vec![0.0; xs.len() * m];
    c.par_chunks_mut(m.max(1)).enumerate().for_each(|(i, row)| {
        for (j, v) in row.iter_mut().enumerate() {
            *v = sq_dist(&xs[i], &ys[j]);
        }
    });
    c
}

/// `0.05 ×` the median pairwise squared distance between the samples.
pub fn default_epsilon(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
    let mut c = cost_matrix(xs, ys);
    let mid = c.len() / 2;
    let (_, med, _) = c.select_nth_unstable_by(mid, |a, b| a.partial_cmp(b).unwrap());
    0.05 * *med
}

/// Debiased entropic estimate `√(OT_ε(x,y) − ½OT_ε(x,x) − ½OT_ε(y,y))`.
pub fn w2_sinkhorn(xs: &[Vec<f64>], ys: &[Vec<f64>], epsilon: Option<f64>, max_iters: usize) -> Result<W2Estimate> {
    if xs.is_empty() || ys.is_empty() {
        return Err(Error::InvalidArgument("empty samples".into()));
    }
    let eps = epsilon.unwrap_or_else(|| default_epsilon(xs, ys));
    if !(eps > 0.0) {
        return Err(Error::InvalidArgument("epsilon must be positive".into()));
    }
    let (n, m) = (xs.len(), ys.len());
    if xs == ys {
        return Ok(W2Estimate { value: 0.0, ci_halfwidth: 0.0, method: W2Method::Sinkhorn, sizes: (n, m) });
    }
    let vxy = sinkhorn_value(&cost_matrix(xs, ys), n, m, eps, max_iters)?;
    let vxx = sinkhorn_symmetric(&cost_matrix(xs, xs), n, eps, max_iters)?;
    let vyy = sinkhorn_symmetric(&cost_matrix(ys, ys), m, eps, max_iters)?;
    let div = vxy - 0.5 * (vxx + vyy);
    Ok(W2Estimate { value: div.max(0.0).sqrt(), ci_halfwidth: 0.0, method: W2Method::Sinkhorn, sizes: (n, m) })
}

/// Bures distance between centered Gaussians with covariances `s1`, `s2`.
pub fn w2_gaussian_closed_form(s1: &SymMatrix, s2: &SymMatrix) -> Result<f64> {
    if s1.dim() != s2.dim() {
        return Err(Error::DimensionMismatch { expected: s1.dim(), got: s2.dim() });
    }
    psd_sqrt(s1)?;
    let r2 = psd_sqrt(s2)?;
    let mid = SymMatrix::from_dmatrix(&(r2.to_dmatrix() * s1.to_dmatrix() * r2.to_dmatrix()));
    let cross = psd_sqrt(&mid)?.trace();
    Ok((s1.trace() + s2.trace() - 2.0 * cross).max(0.0).sqrt())
}

/// `√mean‖s_n − g‖²` with a delta-method 95% interval.
pub fn w2_upper_from_coupling(pairs: &[CoupledPair]) -> Result<W2Estimate> {
    if pairs.len() < 100 {
        return Err(Error::InvalidArgument(format!("need at least 100 pairs, got {}", pairs.len())));
    }
    let costs: Vec<f64> = pairs.iter().map(|p| p.sq_dist()).collect();
    let (mean, se) = mean_se(&costs);
    let value = mean.max(0.0).sqrt();
    let half = if value > 0.0 { 1.96 * se / (2.0 * value) } else { 0.0 };
    Ok(W2Estimate {
        value,
        ci_halfwidth: half,
        method: W2Method::Coupling,
        sizes: (pairs.len(), pairs.len()),
    })
}

fn std_normal_pdf(z: f64) -> f64 {
    if z.is_infinite() {
        0.0
    } else {
        (-0.5 * z * z).exp() / (2.0 * std::f64::consts::PI).sqrt()
    }
}

/// Exact W2 between a 1-D discrete law and `N(0, σ²)` through the quantile
/// coupling.
pub fn w2_discrete_vs_normal(atoms: &[f64], weights: &[f64], sigma: f64) -> Result<W2Estimate> {
    if atoms.len() != weights.len() || atoms.is_empty() {
        return Err(Error::SizeMismatch(atoms.len(), weights.len()));
    }
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument("sigma must be positive".into()));
    }
    let total: f64 = weights.iter().sum();
    let mut idx: Vec<usize> = (0..atoms.len()).collect();
    idx.sort_by(|&a, &b| atoms[a].partial_cmp(&atoms[b]).unwrap());
    let w: Vec<f64> = idx.iter().map(|&i| weights[i] / total).collect();
    let x: Vec<f64> = idx.iter().map(|&i| atoms[i]).collect();
    let k = x.len();
    let mut suffix = vec![0.0; k + 1];
    for i in (0..k).rev() {
        suffix[i] = suffix[i + 1] + w[i];
    }
    let normal = Normal::new(0.0, 1.0).unwrap();
    let z_at = |prefix: f64, tail: f64| -> f64 {
        if prefix <= 0.0 {
            f64::NEG_INFINITY
        } else if tail <= 0.0 {
            f64::INFINITY
        } else if prefix < 0.5 {
            normal.inverse_cdf(prefix)
        } else {
            -normal.inverse_cdf(tail)
        }
    };
    let mut prefix = 0.0;
    let mut w2 = 0.0;
    let mut za = f64::NEG_INFINITY;
    for i in 0..k {
        let next = prefix + w[i];
        let zb = if i + 1 == k { f64::INFINITY } else { z_at(next, suffix[i + 1]) };
        let (pa, pb) = (std_normal_pdf(za), std_normal_pdf(zb));
        let int_z = pa - pb;
        let zpa = if za.is_finite() { za * pa } else { 0.0 };
        let zpb = if zb.is_finite() { zb * pb } else { 0.0 };
        let int_z2 = w[i] - (zpb - zpa);
        w2 += x[i] * x[i] * w[i] - 2.0 * x[i] * sigma * int_z + sigma * sigma * int_z2;
        prefix = next;
        za = zb;
    }
    Ok(W2Estimate { value: w2.max(0.0).sqrt(), ci_halfwidth: 0.0, method: W2Method::Quantile1d, sizes: (k, 0) })
}
