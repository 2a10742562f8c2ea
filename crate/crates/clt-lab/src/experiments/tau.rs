use clt_embed::engine::{run_many, EngineConfig, Policy};
use clt_embed::measure::{make_lattice_ball, moments, DiscreteMeasure};
use clt_embed::sums::tau_statistics;

use super::{five_atoms, label, rng, two_point, Outcome};
use crate::config::ExperimentConfig;
use crate::report::{CriterionRecord, Table};
use crate::LabError;

/// Step relative to `β²` for the mean experiment.
const MEAN_DT: f64 = 2.5e-4;

pub(super) fn mean(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), LabError> {
    let n_traj = cfg.count(cfg.trajectories, 10_000, 10_000);
    let policy = cfg.policy().unwrap_or(Policy::Projection);
    // (measure, equality case)
    let cases: Vec<(DiscreteMeasure, bool)> = match cfg.measure()? {
        Some(m) => vec![(m.centered(), false)],
        None => vec![(two_point(1.0)?, true), (two_point(2.0)?, true), (five_atoms()?, false)],
    };
    let mut t = Table::new("tau_mean", &["measure", "beta", "trajectories", "dt", "mean_tau", "se_tau"]);
    for (j, (m, equality)) in cases.iter().enumerate() {
        let beta = moments(m).radius;
        let ecfg = EngineConfig { dt: Some(MEAN_DT * beta * beta), ..Default::default() };
        let recs = run_many(m, policy, &ecfg, n_traj, &mut rng(cfg, 10 + j as u64))?;
        let ts = tau_statistics(&recs, beta)?;
        let b2 = beta * beta;
        let id = format!("{},beta={beta}", label(m));
        let rec = if *equality {
            CriterionRecord::range("C3", id, ts.mean_tau, b2, b2)
        } else {
            CriterionRecord::le("C3", id, ts.mean_tau, b2)
        };
        out.report.push(rec.ci(3.0 * ts.se_tau).tolerance(cfg.tol("C3")));
        t.row(vec![label(m).into(), beta.into(), n_traj.into(), (MEAN_DT * beta * beta).into(), ts.mean_tau.into(), ts.se_tau.into()]);
    }
    out.table(t);
    Ok(())
}

pub(super) fn tails(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), LabError> {
    let n_traj = cfg.count(cfg.trajectories, 10_000, 10_000);
    let policy = cfg.policy().unwrap_or(Policy::Projection);
    let measures: Vec<DiscreteMeasure> = match cfg.measure()? {
        Some(m) => vec![m.centered()],
        None => vec![make_lattice_ball(1, 1.0, 1)?, make_lattice_ball(2, 1.0, 1)?],
    };
    let ecfg = EngineConfig::default();
    let mut t = Table::new("tau_tails", &["measure", "i", "threshold", "freq", "ci_lo", "ci_hi", "bound"]);
    for (j, m) in measures.iter().enumerate() {
        let beta = moments(m).radius;
        let recs = run_many(m, policy, &ecfg, n_traj, &mut rng(cfg, 20 + j as u64))?;
        let ts = tau_statistics(&recs, beta)?;
        for row in ts.tails.iter().filter(|r| (1..=5).contains(&r.i)) {
            out.report.push(
                CriterionRecord::le("C4", format!("{},i={}", label(m), row.i), row.freq, row.bound)
                    .ci(row.freq - row.ci_lo)
                    .tolerance(cfg.tol("C4")),
            );
        }
        for row in &ts.tails {
            t.row(vec![
                label(m).into(),
                row.i.into(),
                row.threshold.into(),
                row.freq.into(),
                row.ci_lo.into(),
                row.ci_hi.into(),
                row.bound.into(),
            ]);
        }
    }
    out.table(t);
    Ok(())
}
