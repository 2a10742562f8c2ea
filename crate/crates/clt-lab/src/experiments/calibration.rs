use clt_embed::engine::EngineConfig;
use clt_embed::entropy::{
    entropy_oracle_product_fft, estimate_entropy_variational, gaussian_entropy_closed_form, DEFAULT_FFT_POINTS,
};
use clt_embed::measure::{particle_cloud_product, Density1d};
use clt_embed::psd::{psd_sqrt, SymMatrix};
use clt_embed::transport::{w2_exact_assignment, w2_gaussian_closed_form};

use super::{gaussian_samples, rng, Outcome};
use crate::config::ExperimentConfig;
use crate::report::{CriterionRecord, Table};
use crate::LabError;

fn sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Minimum over all `k!` matchings.
fn brute_force_w2(xs: &[Vec<f64>], ys: &[Vec<f64>]) -> f64 {
    fn rec(i: usize, xs: &[Vec<f64>], ys: &[Vec<f64>], used: &mut [bool], acc: f64, best: &mut f64) {
        if acc >= *best {
            return;
        }
        if i == xs.len() {
            *best = acc;
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

pub(super) fn run(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), LabError> {
    assignment(cfg, out)?;
    bures(cfg, out)?;
    variational(cfg, out)?;
    Ok(())
}

fn assignment(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), LabError> {
    let mut worst = 0.0_f64;
    for s in 0..100u64 {
        let k = 2 + (s % 7) as usize;
        let d = 1 + (s % 3) as usize;
        let root = SymMatrix::identity(d);
        let mut r = rng(cfg, 1100 + s);
        let xs = gaussian_samples(&root, k, &mut r);
        let ys = gaussian_samples(&root, k, &mut r);
        let lap = w2_exact_assignment(&xs, &ys)?.value;
        worst = worst.max((lap - brute_force_w2(&xs, &ys)).abs());
    }
    out.report.push(CriterionRecord::le("C10", "assignment_vs_permutations", worst, 1e-12));
    Ok(())
}

fn bures(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), LabError> {
    let k = cfg.count(cfg.samples, 2048, 2048);
    let s1 = SymMatrix::from_rows(&[vec![4.0, 1.2], vec![1.2, 1.0]]);
    let s2 = SymMatrix::from_rows(&[vec![0.25, -0.1], vec![-0.1, 2.5]]);
    let mut r = rng(cfg, 1200);
    let xs = gaussian_samples(&psd_sqrt(&s1)?, k, &mut r);
    let ys = gaussian_samples(&psd_sqrt(&s2)?, k, &mut r);
    let closed = w2_gaussian_closed_form(&s1, &s2)?;
    let emp = w2_exact_assignment(&xs, &ys)?.value;
    out.report.push(
        CriterionRecord::range("C10", format!("bures_vs_sampled_k={k}"), emp, 0.9 * closed, 1.1 * closed)
            .tolerance(cfg.tol("C10")),
    );
    out.report.note("bures_closed_form", closed);
    out.report.note("bures_sampled", emp);
    Ok(())
}

fn variational(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), LabError> {
    let size = cfg.count(cfg.samples, 100_000, 100_000);
    let n_traj = cfg.count(cfg.trajectories, 200, 200);
    let ecfg = EngineConfig { du: 0.1, ..Default::default() };
    let mut t = Table::new("calibration_entropy", &["case", "estimate", "ci", "reference", "truncation_tail"]);

    let g = Density1d::gauss(0.8)?;
    let m = particle_cloud_product(&g, 1, size, &mut rng(cfg, 1300))?.centered();
    let run = estimate_entropy_variational(&m, &ecfg, n_traj, false, &mut rng(cfg, 1301))?;
    let want = gaussian_entropy_closed_form(&SymMatrix::scalar(1, 0.64))?.value;
    let e = &run.estimate;
    out.report.push(
        CriterionRecord::range("C10", "variational_gauss_0.64", e.value, 0.75 * want, 1.25 * want)
            .ci(e.ci)
            .tolerance(cfg.tol("C10")),
    );
    t.row(vec!["gauss_0.64".into(), e.value.into(), e.ci.into(), want.into(), e.truncation_tail.into()]);

    let f = Density1d::gauss_logcosh(2.0, 1.0)?;
    let m = particle_cloud_product(&f, 1, size, &mut rng(cfg, 1310))?.centered();
    let run = estimate_entropy_variational(&m, &ecfg, n_traj, false, &mut rng(cfg, 1311))?;
    let want = entropy_oracle_product_fft(&f, 1, 1.0, DEFAULT_FFT_POINTS)?.value;
    let e = &run.estimate;
    out.report.push(
        CriterionRecord::range("C10", "variational_logcosh_2_1", e.value, 0.75 * want, 1.25 * want)
            .ci(e.ci)
            .tolerance(cfg.tol("C10")),
    );
    t.row(vec!["logcosh_2_1".into(), e.value.into(), e.ci.into(), want.into(), e.truncation_tail.into()]);
    out.table(t);
    Ok(())
}
