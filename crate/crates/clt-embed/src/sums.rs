//! Normalized sums of embeddings and the Gaussian coupled to them.
//!
//! `n` independent localization trajectories run in lockstep on one grid.
//! Per step `Γ̃ = √((1/n)Σ Γ_i²)` and the pooled increment
//! `S = (1/√n)Σ Δa_i` give `dB̃ = Γ̃†S + (I − P̃)ξ√dt`, where `P̃` projects on
//! the range of `Γ̃` and `ξ` is fresh noise filling the complement. The sum
//! accumulates `S` itself and the Gaussian accumulates `√E[Γ_t²] dB̃`.

use crate::engine::{EngineConfig, MomentGrid, Policy, TrajectoryRecord, Walker};
use crate::error::{Error, Result};
use crate::measure::{moments, sample_indices, DiscreteMeasure};
use crate::psd::{pseudo_inverse, psd_sqrt, SymMatrix};
use crate::rng::{child_seed, stream};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Two-sided 99% normal quantile.
pub const Z99: f64 = 2.5758293035489004;

/// `(1/√n) Σ X_i` for `n` iid draws from `m`.
pub fn sample_sn_iid<R: Rng + ?Sized>(m: &DiscreteMeasure, n: usize, rng: &mut R) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(Error::InvalidArgument("n must be at least 1".into()));
    }
    let d = m.dim();
    let mut s = vec![0.0; d];
    for i in sample_indices(m, rng, n) {
        for (k, x) in m.atom(i).iter().enumerate() {
            s[k] += x;
        }
    }
    let r = (n as f64).sqrt();
    s.iter_mut().for_each(|x| *x /= r);
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoupledPair {
    pub s_n: Vec<f64>,
    pub g: Vec<f64>,
    pub n: usize,
}

impl CoupledPair {
    pub fn sq_dist(&self) -> f64 {
        self.s_n.iter().zip(&self.g).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

/// Coupled sampler with the `√E[Γ_t²]` factors precomputed.
#[derive(Debug, Clone)]
pub struct CoupledSampler {
    measure: Arc<DiscreteMeasure>,
    policy: Policy,
    cfg: EngineConfig,
    times: Vec<f64>,
    root_e2: Vec<SymMatrix>,
}

fn grids_match(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-9 * x.abs().max(1.0))
}

impl CoupledSampler {
    pub fn new(m: &DiscreteMeasure, policy: Policy, cfg: &EngineConfig, mg: &MomentGrid) -> Result<Self> {
        cfg.validate()?;
        if mg.policy != policy {
            return Err(Error::GridMismatch(format!(
                "moment grid built for {} but sampling {}",
                mg.policy.name(),
                policy.name()
            )));
        }
        if mg.dim != m.dim() {
            return Err(Error::DimensionMismatch { expected: m.dim(), got: mg.dim });
        }
        let expected = cfg.grid(policy, m, *mg.times.last().unwrap_or(&0.0));
        if !grids_match(&expected.times, &mg.times) {
            return Err(Error::GridMismatch("moment grid times differ from the config step rule".into()));
        }
        let root_e2 = mg.mean_gamma2.iter().map(psd_sqrt).collect::<Result<Vec<_>>>()?;
        Ok(Self { measure: Arc::new(m.clone()), policy, cfg: cfg.clone(), times: mg.times.clone(), root_e2 })
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<CoupledPair> {
        self.sample_detailed(n, rng).map(|r| r.0)
    }

    /// Also returns the embedded points `a_τ` of the `n` trajectories.
    pub fn sample_detailed<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<(CoupledPair, Vec<Vec<f64>>)> {
        if n == 0 {
            return Err(Error::InvalidArgument("n must be at least 1".into()));
        }
        let m = &self.measure;
        let d = m.dim();
        let seed = child_seed(rng);
        let mut xi_rng = stream(seed, n as u64);
        let mut rngs: Vec<ChaCha8Rng> = (0..n).map(|i| stream(seed, i as u64)).collect();
        let mut walkers: Vec<Walker> = rngs
            .iter_mut()
            .map(|r| Walker::planted(m, self.policy, &self.cfg, r))
            .collect();
        let rn = (n as f64).sqrt();
        let a0 = moments(m).mean;
        let mut s: Vec<f64> = a0.iter().map(|x| x * rn).collect();
        let mut g = vec![0.0; d];
        let mut g2_sum = vec![0.0; d * d];
        let mut buf = vec![0.0; d * d];
        let mut incr = vec![0.0; d];
        for k in 0..self.times.len() - 1 {
            let (t0, t1) = (self.times[k], self.times[k + 1]);
            let dt = t1 - t0;
            g2_sum.iter_mut().for_each(|x| *x = 0.0);
            incr.iter_mut().for_each(|x| *x = 0.0);
            let mut alive = 0;
            for (w, r) in walkers.iter_mut().zip(rngs.iter_mut()) {
                if w.state.collapsed {
                    continue;
                }
                alive += 1;
                w.state.gamma_power_into(2, &mut buf);
                for (a, b) in g2_sum.iter_mut().zip(&buf) {
                    *a += b;
                }
                let before = w.state.mean().to_vec();
                w.advance(t0, t1, None, Some(r), None)?;
                for j in 0..d {
                    incr[j] += w.state.mean()[j] - before[j];
                }
            }
            incr.iter_mut().for_each(|x| *x /= rn);
            for j in 0..d {
                s[j] += incr[j];
            }
            let xi: Vec<f64> = (0..d).map(|_| dt.sqrt() * xi_rng.sample::<f64, _>(StandardNormal)).collect();
            let db_tilde = if alive == 0 {
                xi
            } else {
                let e = SymMatrix::from_col_major(d, g2_sum.iter().map(|x| x / n as f64).collect()).eig();
                let c = e.cutoff;
                let p = e.rebuild(|l| if l > c { 1.0 } else { 0.0 });
                let mut v = e.rebuild(|l| if l > c { 1.0 / l.sqrt() } else { 0.0 }).mul_vec(&incr);
                let px = p.mul_vec(&xi);
                for j in 0..d {
                    v[j] += xi[j] - px[j];
                }
                v
            };
            let dg = self.root_e2[k].mul_vec(&db_tilde);
            for j in 0..d {
                g[j] += dg[j];
            }
        }
        let t_end = *self.times.last().unwrap();
        for (w, r) in walkers.iter_mut().zip(rngs.iter_mut()) {
            let before = w.state.mean().to_vec();
            if self.policy == Policy::Foellmer {
                w.state.force_collapse();
            } else {
                let dt = self.cfg.step_dt(m);
                let mut t = t_end;
                let mut steps = 0usize;
                while !w.state.collapsed {
                    if steps >= self.cfg.max_steps {
                        return Err(Error::NoCollapse { steps, t });
                    }
                    w.advance(t, t + dt, None, Some(r), None)?;
                    t += dt;
                    steps += 1;
                }
            }
            for j in 0..d {
                s[j] += (w.state.mean()[j] - before[j]) / rn;
            }
        }
        let points = walkers.iter().map(|w| w.state.mean().to_vec()).collect();
        Ok((CoupledPair { s_n: s, g, n }, points))
    }

    /// `pairs` independent coupled pairs, parallel across pairs.
    pub fn sample_many<R: Rng + ?Sized>(&self, n: usize, pairs: usize, rng: &mut R) -> Result<Vec<CoupledPair>> {
        let seed = child_seed(rng);
        (0..pairs)
            .into_par_iter()
            .map(|j| self.sample(n, &mut stream(seed, j as u64)))
            .collect()
    }
}

pub fn sample_sn_coupled<R: Rng + ?Sized>(
    m: &DiscreteMeasure,
    policy: Policy,
    n: usize,
    mg: &MomentGrid,
    cfg: &EngineConfig,
    rng: &mut R,
) -> Result<CoupledPair> {
    CoupledSampler::new(m, policy, cfg, mg)?.sample(n, rng)
}

/// Mean of `‖s_n − g‖²` and its standard error.
pub fn coupling_cost(pairs: &[CoupledPair]) -> (f64, f64) {
    mean_se(&pairs.iter().map(|p| p.sq_dist()).collect::<Vec<_>>())
}

pub fn mean_se(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    if x.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mu = x.iter().sum::<f64>() / n;
    if x.len() < 2 {
        return (mu, f64::NAN);
    }
    let var = x.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / (n - 1.0);
    (mu, (var / n).sqrt())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundReportMain {
    pub n: usize,
    pub rhs_integral: f64,
    /// Propagated standard error, treating errors at all grid points as fully correlated.
    pub rhs_se: f64,
    pub times: Vec<f64>,
    /// `Tr(E[Γ⁴]E[Γ²]†)/n`.
    pub quartic_branch: Vec<f64>,
    /// `4 Tr E[Γ²]`.
    pub trace_branch: Vec<f64>,
    pub integrand: Vec<f64>,
    /// First time the trace branch becomes the smaller one.
    pub crossover: Option<f64>,
    /// Same integral using every other grid point.
    pub half_grid_integral: f64,
}

fn trapezoid(t: &[f64], f: &[f64]) -> f64 {
    t.windows(2).zip(f.windows(2)).map(|(tt, ff)| 0.5 * (tt[1] - tt[0]) * (ff[0] + ff[1])).sum()
}

pub fn theorem_main_rhs(mg: &MomentGrid, n: usize) -> BoundReportMain {
    let k = mg.times.len();
    let nf = n.max(1) as f64;
    let mut quartic = Vec::with_capacity(k);
    let mut trace = Vec::with_capacity(k);
    let mut integrand = Vec::with_capacity(k);
    let mut se = Vec::with_capacity(k);
    for i in 0..k {
        let e2 = &mg.mean_gamma2[i];
        let pinv = pseudo_inverse(e2, None);
        let q = mg.mean_gamma4[i].matmul(&pinv).trace().max(0.0) / nf;
        let tb = 4.0 * e2.trace().max(0.0);
        let inv_top = pinv.eig().max().max(0.0);
        let q_se = (mg.se_tr_gamma4[i] + q * nf * mg.se_tr_gamma2[i]) * inv_top / nf;
        quartic.push(q);
        trace.push(tb);
        if q <= tb {
            integrand.push(q);
            se.push(q_se);
        } else {
            integrand.push(tb);
            se.push(4.0 * mg.se_tr_gamma2[i]);
        }
    }
    let crossover = (1..k)
        .find(|&i| trace[i] < quartic[i] && trace[i - 1] >= quartic[i - 1])
        .map(|i| {
            let (d0, d1) = (quartic[i - 1] - trace[i - 1], quartic[i] - trace[i]);
            let f = if d1 != d0 { d0 / (d0 - d1) } else { 0.0 };
            mg.times[i - 1] + f * (mg.times[i] - mg.times[i - 1])
        });
    let idx: Vec<usize> = (0..k).step_by(2).chain(if k % 2 == 0 { Some(k - 1) } else { None }).collect();
    let th: Vec<f64> = idx.iter().map(|&i| mg.times[i]).collect();
    let fh: Vec<f64> = idx.iter().map(|&i| integrand[i]).collect();
    BoundReportMain {
        n,
        rhs_integral: trapezoid(&mg.times, &integrand),
        rhs_se: trapezoid(&mg.times, &se),
        times: mg.times.clone(),
        quartic_branch: quartic,
        trace_branch: trace,
        integrand,
        crossover,
        half_grid_integral: trapezoid(&th, &fh),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TailRow {
    pub i: usize,
    pub threshold: f64,
    pub freq: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub bound: f64,
}

impl TailRow {
    /// The bound is rejected only when the whole interval lies above it.
    pub fn consistent(&self) -> bool {
        self.ci_lo <= self.bound
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TauStats {
    pub n: usize,
    pub mean_tau: f64,
    pub se_tau: f64,
    pub beta: f64,
    pub tails: Vec<TailRow>,
}

pub const TAIL_ROWS: usize = 6;

/// Wilson score interval for `k` successes out of `n`.
pub fn wilson_interval(k: usize, n: usize, z: f64) -> (f64, f64) {
    let nf = n as f64;
    let p = k as f64 / nf;
    let z2 = z * z;
    let denom = 1.0 + z2 / nf;
    let center = (p + z2 / (2.0 * nf)) / denom;
    let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
    ((center - half).max(0.0), (center + half).min(1.0))
}

pub fn tau_statistics(records: &[TrajectoryRecord], beta: f64) -> Result<TauStats> {
    let open = records.iter().filter(|r| !r.collapsed).count();
    if open > 0 {
        return Err(Error::Uncollapsed(open));
    }
    tau_statistics_from(&records.iter().map(|r| r.tau).collect::<Vec<_>>(), beta)
}

pub fn tau_statistics_from(taus: &[f64], beta: f64) -> Result<TauStats> {
    if taus.len() < 1000 {
        return Err(Error::InvalidArgument(format!("need at least 1000 records, got {}", taus.len())));
    }
    let (mean_tau, se_tau) = mean_se(taus);
    let n = taus.len();
    let tails = (0..TAIL_ROWS)
        .map(|i| {
            let threshold = 2.0 * i as f64 * beta * beta;
            let k = taus.iter().filter(|&&t| t >= threshold).count();
            let (ci_lo, ci_hi) = wilson_interval(k, n, Z99);
            TailRow { i, threshold, freq: k as f64 / n as f64, ci_lo, ci_hi, bound: 0.5_f64.powi(i as i32) }
        })
        .collect();
    Ok(TauStats { n, mean_tau, se_tau, beta, tails })
}

impl TauStats {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("i,threshold,freq,ci_lo,ci_hi,bound\n");
        for r in &self.tails {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                r.i, r.threshold, r.freq, r.ci_lo, r.ci_hi, r.bound
            ));
        }
        out
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Two-sample energy-distance permutation test. Returns `(statistic, p-value)`.
pub fn energy_distance_test<R: Rng + ?Sized>(
    x: &[Vec<f64>],
    y: &[Vec<f64>],
    n_perm: usize,
    rng: &mut R,
) -> Result<(f64, f64)> {
    if x.len() < 2 || y.len() < 2 {
        return Err(Error::InvalidArgument("energy test needs two samples of size >= 2".into()));
    }
    let pool: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let big_n = pool.len();
    let mut dm = vec![0.0; big_n * big_n];
    for i in 0..big_n {
        for j in 0..i {
            let v = dist(pool[i], pool[j]);
            dm[i * big_n + j] = v;
            dm[j * big_n + i] = v;
        }
    }
    let nx = x.len();
    let stat = |lab: &[bool]| {
        let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
        for i in 0..big_n {
            let row = &dm[i * big_n..(i + 1) * big_n];
            for j in 0..big_n {
                match (lab[i], lab[j]) {
                    (true, true) => sxx += row[j],
                    (false, false) => syy += row[j],
                    (true, false) => sxy += row[j],
                    _ => {}
                }
            }
        }
        let (a, b) = (nx as f64, (big_n - nx) as f64);
        let e = 2.0 * sxy / (a * b) - sxx / (a * a) - syy / (b * b);
        e * a * b / (a + b)
    };
    let mut labels: Vec<bool> = (0..big_n).map(|i| i < nx).collect();
    let obs = stat(&labels);
    let mut exceed = 0;
    for _ in 0..n_perm {
        labels.shuffle(rng);
        if stat(&labels) >= obs {
            exceed += 1;
        }
    }
    Ok((obs, (1 + exceed) as f64 / (1 + n_perm) as f64))
}
