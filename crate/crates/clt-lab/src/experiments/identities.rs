use clt_embed::engine::{
    dat_residual, run_foellmer_tilt_with_increments, run_many, run_trajectory, run_trajectory_with_increments,
    EngineConfig, FoellmerIntegrator, NoiseMode, Policy, TimeGrid,
};
use clt_embed::entropy::{
    cov_derivative_residual, estimate_entropy_variational, fraction_within, gamma_representation_residual,
    loglog_slope,
};
use clt_embed::measure::{moments, particle_cloud_product, Density1d, DiscreteMeasure};
use clt_embed::psd::{sqrt_diff_trace_pair, SymMatrix};
use clt_embed::rng::{stream, StreamRng};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{five_atoms, label, random_atoms, rng, two_point, Outcome};
use crate::config::ExperimentConfig;
use crate::report::{CriterionRecord, Table};
use crate::stats::median;
use crate::LabError;

pub(super) fn run(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), LabError> {
    structural(cfg, out)?;
    pathwise(cfg, out)?;
    dat(cfg, out)?;
    psd_lemma(cfg, out)?;
    residuals(cfg, out)?;
    Ok(())
}

/// Rank monotonicity, idempotent Γ, the capped operator norm and the
/// Gaussian-tilt form of the weights, read off per-trajectory monitors.
fn structural(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), LabError> {
    let n_traj = cfg.count(cfg.trajectories, 1000, 1000);
    let m = match cfg.measure()? {
        Some(m) => m,
        None => random_atoms(&mut rng(cfg, 30))?,
    };
    let ecfg = EngineConfig { foellmer: FoellmerIntegrator::Step, ..Default::default() };
    let mut t = Table::new(
        "identities_structural",
        &["measure", "policy", "trajectories", "rank_increases", "max_idempotency_err", "max_ac_norm", "max_tilt_form_residual"],
    );
    let mut rank_total = 0usize;
    let mut tilt = 0.0_f64;
    for p in [Policy::Projection, Policy::Capped, Policy::Foellmer] {
        let recs = run_many(&m, p, &ecfg, n_traj, &mut rng(cfg, 700 + p as u64))?;
        let ranks: usize = recs.iter().map(|r| r.diagnostics.rank_increases).sum();
        let idem = recs.iter().map(|r| r.diagnostics.max_idempotency_err).fold(0.0, f64::max);
        let ac = recs.iter().map(|r| r.diagnostics.max_ac_norm).fold(0.0, f64::max);
        let tf = recs.iter().map(|r| r.diagnostics.tilt_form_residual).fold(0.0, f64::max);
        rank_total += ranks;
        tilt = tilt.max(tf);
        match p {
            Policy::Projection => out.report.push(CriterionRecord::le("C7", "b:projection_idempotent", idem, 1e-6)),
            Policy::Capped => out.report.push(CriterionRecord::le("C7", "c:capped_ac_norm", ac, 3.0 + 1e-6)),
            Policy::Foellmer => {}
        }
        t.row(vec![label(&m).into(), p.name().into(), n_traj.into(), ranks.into(), idem.into(), ac.into(), tf.into()]);
    }
    out.report.push(CriterionRecord::le("C7", "a:rank_increases", rank_total as f64, 0.0));
    out.report.push(CriterionRecord::le("C7", "h:tilt_form_residual", tilt, 1e-8));
    out.table(t);
    Ok(())
}

/// Brownian increments on nested Föllmer grids, summed from the finest one.
fn nested_paths(dus: &[f64], t_max: f64, rng: &mut StreamRng) -> Vec<Vec<Vec<f64>>> {
    let fine_du = dus.iter().cloned().fold(f64::INFINITY, f64::min);
    let fine = TimeGrid::foellmer(fine_du, t_max);
    let mut cum = vec![0.0];
    for w in fine.times.windows(2) {
        let x = (w[1] - w[0]).sqrt() * rng.sample::<f64, _>(StandardNormal);
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
            idx.windows(2).map(|w| vec![cum[w[1]] - cum[w[0]]]).collect()
        })
        .collect()
}

/// Tilt and step integrators driven by the same path; the sup distance of
/// their means should shrink linearly in the step.
fn pathwise(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), LabError> {
    let m = five_atoms()?;
    let dus = [0.02, 0.01, 0.005];
    let t_max = EngineConfig::default().t_max;
    let paths = 9;
    let mut t = Table::new("identities_pathwise", &["path", "du", "sup_mean_gap"]);
    let mut slopes = vec![];
    for s in 0..paths {
        let all = nested_paths(&dus, t_max, &mut rng(cfg, 800 + s));
        let mut errs = vec![];
        for (k, dbs) in all.iter().enumerate() {
            let ecfg = EngineConfig { du: dus[k], store_path: true, noise: NoiseMode::Brownian, ..Default::default() };
            let a = run_trajectory_with_increments(&m, Policy::Foellmer, &ecfg, dbs)?;
            let b = run_foellmer_tilt_with_increments(&m, &ecfg, dbs)?;
            let (pa, pb) = (a.path.expect("stored"), b.path.expect("stored"));
            let n = pa.a.len().min(pb.a.len());
            let e = (0..n).map(|i| (pa.a[i][0] - pb.a[i][0]).abs()).fold(0.0, f64::max);
            t.row(vec![(s as usize).into(), dus[k].into(), e.into()]);
            errs.push(e);
        }
        // paths that collapse identically early carry no information
        if errs.iter().all(|&e| e > 1e-9) {
            slopes.push(loglog_slope(&dus, &errs));
        }
    }
    let med = if slopes.is_empty() { f64::NAN } else { median(&slopes) };
    out.report.push(CriterionRecord::range("C7", "d:tilt_vs_step_slope", med, 0.7, 1.3).tolerance(cfg.tol("C7")));
    out.report.note("pathwise_informative_paths", slopes.len() as f64);
    out.table(t);
    Ok(())
}

/// The one-step residual of the `dA_t` identity should halve with `dt`.
fn dat(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), LabError> {
    let m = two_point(1.0)?;
    let dts = [1e-2, 5e-3, 2.5e-3];
    let n_traj = 200;
    let mut t = Table::new("identities_dat", &["dt", "mean_residual", "steps"]);
    let mut res = vec![];
    for &dt in &dts {
        let ecfg = EngineConfig { dt: Some(dt), store_path: true, noise: NoiseMode::Brownian, ..Default::default() };
        let parts = (0..n_traj)
            .into_par_iter()
            .map(|j| {
                let r = run_trajectory(&m, Policy::Projection, &ecfg, &mut stream(cfg.seed ^ 0xDA7, j))?;
                let d = dat_residual(&r)?;
                Ok((d.mean * d.steps as f64, d.steps))
            })
            .collect::<Result<Vec<(f64, usize)>, clt_embed::Error>>()?;
        let total: f64 = parts.iter().map(|p| p.0).sum();
        let steps: usize = parts.iter().map(|p| p.1).sum();
        let r = total / steps as f64;
        t.row(vec![dt.into(), r.into(), steps.into()]);
        res.push(r);
    }
    for (k, w) in res.windows(2).enumerate() {
        out.report.push(
            CriterionRecord::range("C7", format!("e:dat_halving_{k}"), w[0] / w[1], 1.4, 2.6).tolerance(cfg.tol("C7")),
        );
    }
    out.table(t);
    Ok(())
}

fn gauss_matrix(rows: usize, cols: usize, rng: &mut StreamRng) -> Vec<f64> {
    (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

/// `G H Gᵀ` for `G` of shape `d × r` (row-major) and `H` symmetric `r × r`.
fn congruence(g: &[f64], h: &[f64], d: usize, r: usize) -> SymMatrix {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..d {
            let mut s = 0.0;
            for a in 0..r {
                for b in 0..r {
                    s += g[i * r + a] * h[a * r + b] * g[j * r + b];
                }
            }
            out[i + d * j] = s;
        }
    }
    // symmetrize against rounding
    for i in 0..d {
        for j in 0..i {
            let v = 0.5 * (out[i + d * j] + out[j + d * i]);
            out[i + d * j] = v;
            out[j + d * i] = v;
        }
    }
    SymMatrix::from_col_major(d, out)
}

/// Random PSD pairs with `ker A ⊆ ker B`: `A = G Gᵀ`, `B = G K Kᵀ Gᵀ`.
fn psd_lemma(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), LabError> {
    let pairs = 1000;
    let mut r = rng(cfg, 900);
    let mut worst = f64::NEG_INFINITY;
    let mut t = Table::new("identities_psd_lemma", &["pair", "d", "rank", "lhs", "rhs"]);
    for i in 0..pairs {
        let d = r.random_range(1..=5usize);
        let k = r.random_range(1..=d);
        let g = gauss_matrix(d, k, &mut r);
        let kk = gauss_matrix(k, k, &mut r);
        let mut h = vec![0.0; k * k];
        for a in 0..k {
            for b in 0..k {
                h[a * k + b] = (0..k).map(|c| kk[a * k + c] * kk[b * k + c]).sum();
            }
        }
        let ident: Vec<f64> = (0..k * k).map(|j| if j % (k + 1) == 0 { 1.0 } else { 0.0 }).collect();
        let a = congruence(&g, &ident, d, k);
        let b = congruence(&g, &h, d, k);
        let (lhs, rhs) = sqrt_diff_trace_pair(&a, &b)?;
        worst = worst.max((lhs - rhs) / (1.0 + rhs));
        t.row(vec![(i as usize).into(), d.into(), k.into(), lhs.into(), rhs.into()]);
    }
    out.report.push(CriterionRecord::le("C7", "f:sqrt_trace_lemma", worst, 1e-9));
    out.table(t);
    Ok(())
}

/// Γ-representation and `d/dt E[A_t] = −E[Γ_t²]` on a logcosh product cloud.
fn residuals(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), LabError> {
    let size = cfg.count(cfg.samples, 100_000, 100_000);
    let f = Density1d::gauss_logcosh(2.0, 1.0)?;
    let m: DiscreteMeasure = particle_cloud_product(&f, 2, size, &mut rng(cfg, 910))?.centered();
    let ecfg = EngineConfig { du: 0.1, ..Default::default() };
    let run = estimate_entropy_variational(&m, &ecfg, 200, false, &mut rng(cfg, 911))?;
    let rep = gamma_representation_residual(&run.moments, &run.drift, &moments(&m).cov)?;
    let cd = cov_derivative_residual(&run.moments)?;
    let (fr, fc) = (fraction_within(&rep, 4.0), fraction_within(&cd, 4.0));
    out.report.push(CriterionRecord::range("C7", "g:gamma_representation", fr, 0.95, 1.0));
    out.report.push(CriterionRecord::range("C7", "g:cov_derivative", fc, 0.95, 1.0));
    let mut t = Table::new("identities_residuals", &["kind", "t", "residual", "se"]);
    for p in &rep {
        t.row(vec!["gamma_representation".into(), p.t.into(), p.residual.into(), p.se.into()]);
    }
    for p in &cd {
        t.row(vec!["cov_derivative".into(), p.t.into(), p.residual.into(), p.se.into()]);
    }
    out.table(t);

    // lower-envelope constant for sigma_t >= c / (t d^2)
    let d2 = (m.dim() * m.dim()) as f64;
    let mut ts = Table::new("identities_sigma", &["t", "sigma_t", "t_sigma_d2"]);
    let mut c = f64::INFINITY;
    for (&tk, &sk) in run.moments.times.iter().zip(&run.moments.sigma) {
        if tk > 0.0 {
            c = c.min(tk * sk * d2);
            ts.row(vec![tk.into(), sk.into(), (tk * sk * d2).into()]);
        }
    }
    out.report.note("sigma_lower_constant", c);
    out.table(ts);
    Ok(())
}
