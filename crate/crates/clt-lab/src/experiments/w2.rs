use clt_embed::engine::{gamma_moments, EngineConfig, Policy};
use clt_embed::entropy::loglog_slope;
use clt_embed::measure::{make_lattice_ball, moments, DiscreteMeasure};
use clt_embed::psd::psd_sqrt;
use clt_embed::sums::{coupling_cost, sample_sn_iid, CoupledSampler};
use clt_embed::transport::{w2_discrete_vs_normal, w2_exact_assignment};

use super::{gaussian_samples, pilot_horizon, rng, Outcome};
use crate::config::{DensitySpec, ExperimentConfig, MeasureSpec};
use crate::report::{CriterionRecord, Table};
use crate::LabError;

pub(super) fn bounded(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), LabError> {
    let k = cfg.count(cfg.samples, 1024, 1024);
    let ns = cfg.ns(&[4, 16, 64, 256], &[4, 16, 64, 256]);
    let measures: Vec<DiscreteMeasure> = match cfg.measure()? {
        Some(m) => vec![m.centered()],
        None => cfg.ds(&[1, 2, 4]).iter().map(|&d| make_lattice_ball(d, 1.0, 1)).collect::<Result<_, _>>()?,
    };
    let mut t = Table::new("w2_bounded", &["d", "atoms", "n", "samples", "w2", "ci_halfwidth", "floor", "bound"]);
    for (j, m) in measures.iter().enumerate() {
        let d = m.dim();
        let mo = moments(m);
        let root = psd_sqrt(&mo.cov)?;
        let mut r = rng(cfg, 100 + j as u64);
        let g1 = gaussian_samples(&root, k, &mut r);
        let g2 = gaussian_samples(&root, k, &mut r);
        let floor = w2_exact_assignment(&g1, &g2)?.value;
        for (i, &n) in ns.iter().enumerate() {
            let mut r = rng(cfg, 1000 * (j as u64 + 1) + i as u64);
            let xs = (0..k).map(|_| sample_sn_iid(m, n, &mut r)).collect::<Result<Vec<_>, _>>()?;
            let ys = gaussian_samples(&root, k, &mut r);
            let est = w2_exact_assignment(&xs, &ys)?;
            let nf = n as f64;
            let bound = mo.radius * (d as f64).sqrt() * (32.0 + 2.0 * nf.log2()).sqrt() / nf.sqrt();
            out.report.push(
                CriterionRecord::le("C1", format!("d={d},n={n}"), est.value, bound)
                    .ci(3.0 * est.ci_halfwidth)
                    .floor(floor)
                    .tolerance(cfg.tol("C1")),
            );
            t.row(vec![
                d.into(),
                m.len().into(),
                n.into(),
                k.into(),
                est.value.into(),
                est.ci_halfwidth.into(),
                floor.into(),
                bound.into(),
            ]);
        }
    }
    out.table(t);
    Ok(())
}

/// Law of `S_n` for the uniform law on `{−r, …, r}`: offsets `−nr..=nr`.
pub(crate) fn lattice_sum_pmf(r: u32, n: usize) -> Vec<f64> {
    let base = vec![1.0 / (2 * r + 1) as f64; 2 * r as usize + 1];
    let mut p = vec![1.0];
    for _ in 0..n {
        let mut q = vec![0.0; p.len() + base.len() - 1];
        for (i, a) in p.iter().enumerate() {
            for (j, b) in base.iter().enumerate() {
                q[i + j] += a * b;
            }
        }
        p = q;
    }
    p
}

/// Exact `W2(S_n, N(0, σ²))` for the one-dimensional lattice law.
fn lattice_w2(beta: f64, r: u32, n: usize) -> Result<f64, LabError> {
    let p = lattice_sum_pmf(r, n);
    let half = (n * r as usize) as f64;
    let rn = (n as f64).sqrt();
    let (mut atoms, mut w) = (vec![], vec![]);
    for (k, &pk) in p.iter().enumerate() {
        if pk > 0.0 {
            atoms.push(beta * (k as f64 - half) / rn);
            w.push(pk);
        }
    }
    let rf = r as f64;
    let sigma = beta * (rf * (rf + 1.0) / 3.0).sqrt();
    Ok(w2_discrete_vs_normal(&atoms, &w, sigma)?.value)
}

/// Cube-cloud size and step.
const CLOUD_ATOMS: usize = 128;
const CLOUD_DT: f64 = 0.01;

pub(super) fn rate(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), LabError> {
    let (lattice, cloud) = match &cfg.measure {
        None => (
            (1.0, 1u32),
            MeasureSpec::Cloud { density: DensitySpec::Uniform, d: 4, size: CLOUD_ATOMS, isotropic: true },
        ),
        Some(MeasureSpec::Lattice { d: 1, beta, radius }) => (
            (*beta, *radius),
            MeasureSpec::Cloud { density: DensitySpec::Uniform, d: 4, size: CLOUD_ATOMS, isotropic: true },
        ),
        Some(c @ MeasureSpec::Cloud { .. }) => ((1.0, 1), c.clone()),
        Some(_) => {
            return Err(LabError::Config(
                "w2-logconcave-rate accepts a one-dimensional lattice or a cloud measure".into(),
            ))
        }
    };
    let mut t = Table::new("w2_rate", &["part", "n", "w2", "se", "pairs"]);

    let ns_a = cfg.n.clone().unwrap_or_else(|| vec![16, 32, 64, 128, 256, 512, 1024]);
    let mut w_a = vec![];
    for &n in &ns_a {
        let w = lattice_w2(lattice.0, lattice.1, n)?;
        t.row(vec!["lattice".into(), n.into(), w.into(), 0.0.into(), 0usize.into()]);
        w_a.push(w);
    }
    let xs: Vec<f64> = ns_a.iter().map(|&n| n as f64).collect();
    let slope_a = loglog_slope(&xs, &w_a);
    out.report.push(CriterionRecord::range("C2", "lattice_slope", slope_a, -0.65, -0.35).tolerance(cfg.tol("C2")));

    let m = cloud.build(cfg.seed)?;
    let policy = cfg.policy().unwrap_or(Policy::Capped);
    let ecfg = EngineConfig { dt: Some(CLOUD_DT), ..Default::default() };
    let horizon = pilot_horizon(&m, policy, &ecfg, 1000, &mut rng(cfg, 200))?;
    let grid = ecfg.grid(policy, &m, horizon);
    let n_traj = cfg.count(cfg.trajectories, 20_000, 5_000);
    let mg = gamma_moments(&m, policy, &ecfg, &grid, n_traj, &mut rng(cfg, 201))?;
    let sampler = CoupledSampler::new(&m, policy, &ecfg, &mg)?;
    let ns_b = cfg.n.clone().unwrap_or_else(|| if cfg.quick { vec![16, 64, 256] } else { vec![16, 64, 256, 1024] });
    let pairs = cfg.count(cfg.pairs, 100, 40);
    let mut w_b = vec![];
    for (i, &n) in ns_b.iter().enumerate() {
        let p = sampler.sample_many(n, pairs, &mut rng(cfg, 300 + i as u64))?;
        let (c, se) = coupling_cost(&p);
        let w = c.sqrt();
        // delta method for the square root
        let w_se = if w > 0.0 { se / (2.0 * w) } else { 0.0 };
        t.row(vec!["cloud".into(), n.into(), w.into(), w_se.into(), pairs.into()]);
        w_b.push(w);
    }
    let xs: Vec<f64> = ns_b.iter().map(|&n| n as f64).collect();
    let slope_b = loglog_slope(&xs, &w_b);
    out.report.push(CriterionRecord::range("C2", "cloud_slope", slope_b, -0.65, -0.35).tolerance(cfg.tol("C2")));
    out.report.note("cloud_moment_trajectories", n_traj as f64);
    out.report.note("cloud_grid_horizon", horizon);
    out.table(t);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pmf_sums_to_one_and_matches_small_cases() {
        let p = lattice_sum_pmf(1, 2);
        let want = [1.0, 2.0, 3.0, 2.0, 1.0].map(|x| x / 9.0);
        for (a, b) in p.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
        let s: f64 = lattice_sum_pmf(2, 50).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
