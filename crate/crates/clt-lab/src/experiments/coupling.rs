use clt_embed::engine::{gamma_moments, EngineConfig, Policy};
use clt_embed::measure::{make_lattice_ball, DiscreteMeasure};
use clt_embed::sums::{coupling_cost, theorem_main_rhs, CoupledSampler};

use super::{label, pilot_horizon, rng, two_point, Outcome};
use crate::config::ExperimentConfig;
use crate::report::{CriterionRecord, Table};
use crate::LabError;

pub(super) fn main_inequality(cfg: &ExperimentConfig, out: &mut Outcome) -> Result<(), LabError> {
    let policy = cfg.policy().unwrap_or(Policy::Projection);
    let ns = cfg.ns(&[16, 64], &[16, 64]);
    let pairs = cfg.count(cfg.pairs, 1000, 1000);
    let n_traj = cfg.count(cfg.trajectories, 20_000, 10_000);
    let measures: Vec<DiscreteMeasure> = match cfg.measure()? {
        Some(m) => vec![m.centered()],
        None => vec![two_point(1.0)?, make_lattice_ball(2, 1.0, 1)?],
    };
    let ecfg = EngineConfig::default();
    let mut t = Table::new(
        "main_inequality",
        &["measure", "n", "pairs", "cost", "cost_se", "rhs", "rhs_se", "rhs_half_grid", "crossover"],
    );
    for (j, m) in measures.iter().enumerate() {
        let j = j as u64;
        let horizon = pilot_horizon(m, policy, &ecfg, 2000, &mut rng(cfg, 40 + j))?;
        let grid = ecfg.grid(policy, m, horizon);
        let mg = gamma_moments(m, policy, &ecfg, &grid, n_traj, &mut rng(cfg, 50 + j))?;
        let sampler = CoupledSampler::new(m, policy, &ecfg, &mg)?;
        for (i, &n) in ns.iter().enumerate() {
            let p = sampler.sample_many(n, pairs, &mut rng(cfg, 600 + 10 * j + i as u64))?;
            let (cost, se) = coupling_cost(&p);
            let rhs = theorem_main_rhs(&mg, n);
            let combined = (se * se + rhs.rhs_se * rhs.rhs_se).sqrt();
            out.report.push(
                CriterionRecord::le("C5", format!("{},n={n}", label(m)), cost, rhs.rhs_integral)
                    .ci(4.0 * combined)
                    .tolerance(cfg.tol("C5")),
            );
            t.row(vec![
                label(m).into(),
                n.into(),
                pairs.into(),
                cost.into(),
                se.into(),
                rhs.rhs_integral.into(),
                rhs.rhs_se.into(),
                rhs.half_grid_integral.into(),
                rhs.crossover.unwrap_or(f64::NAN).into(),
            ]);
        }
    }
    out.table(t);
    Ok(())
}
