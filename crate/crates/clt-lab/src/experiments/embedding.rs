use clt_embed::engine::{run_many, EngineConfig, Policy};
use clt_embed::measure::DiscreteMeasure;

use super::{five_atoms, label, random_atoms, rng, Outcome};
use crate::config::ExperimentConfig;
use crate::report::{CriterionRecord, Table};
use crate::stats::chi_square_gof;
use crate::LabError;

pub(super) fn correctness(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), LabError> {
    let n_traj = cfg.count(cfg.trajectories, 10_000, 10_000);
    let measures: Vec<DiscreteMeasure> = match cfg.measure()? {
        Some(m) => vec![m],
        None => vec![five_atoms()?, random_atoms(&mut rng(cfg, 30))?],
    };
    let policies = match cfg.policy() {
        Some(p) => vec![p],
        None => vec![Policy::Projection, Policy::Capped, Policy::Foellmer],
    };
    let ecfg = EngineConfig::default();
    let mut t = Table::new(
        "embed_gof",
        &["measure", "policy", "trajectories", "chi2", "dof", "p_value", "max_atom_err", "max_tau"],
    );
    for (j, m) in measures.iter().enumerate() {
        for &p in &policies {
            let recs = run_many(m, p, &ecfg, n_traj, &mut rng(cfg, 1000 + 10 * j as u64 + p as u64))?;
            let mut counts = vec![0usize; m.len()];
            let mut atom_err = 0.0_f64;
            let mut max_tau = 0.0_f64;
            for r in &recs {
                counts[r.atom_index] += 1;
                let x = m.atom(r.atom_index);
                let e = x.iter().zip(&r.embedded_point).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                atom_err = atom_err.max(e);
                max_tau = max_tau.max(r.tau);
            }
            let (chi2, dof, pv) = chi_square_gof(&counts, m.weights());
            let id = format!("{},{}", label(m), p.name());
            out.report.push(CriterionRecord::range("C6", format!("{id},p_value"), pv, 0.01, 1.0).tolerance(cfg.tol("C6")));
            out.report.push(CriterionRecord::le("C6", format!("{id},atom_err"), atom_err, 1e-8));
            if p == Policy::Foellmer {
                out.report.push(CriterionRecord::le("C6", format!("{id},tau_le_1"), max_tau, 1.0));
            }
            t.row(vec![
                label(m).into(),
                p.name().into(),
                n_traj.into(),
                chi2.into(),
                dof.into(),
                pv.into(),
                atom_err.into(),
                max_tau.into(),
            ]);
        }
    }
    out.table(t);
    Ok(())
}
