//! The experiment catalog.

mod calibration;
mod coupling;
mod embedding;
mod entropy;
mod identities;
mod tau;
mod w2;

use clt_embed::engine::{run_many, EngineConfig, Policy};
use clt_embed::measure::{make_lattice_ball, DiscreteMeasure};
use clt_embed::psd::SymMatrix;
use clt_embed::rng::{stream, StreamRng};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::config::ExperimentConfig;
use crate::report::{Provenance, Report, Table};
use crate::LabError;

pub struct Outcome {
    pub report: Report,
    pub tables: Vec<Table>,
}

impl Outcome {
    fn table(&mut self, t: Table) {
        self.report.tables.push(format!("{}.csv", t.name));
        self.tables.push(t);
    }
}

type Runner = fn(&ExperimentConfig, &mut Outcome) -> Result<(), LabError>;

pub struct ExperimentInfo {
    pub id: &'static str,
    /// Acceptance criterion checked, `C1` … `C10`.
    pub criterion: &'static str,
    /// The statement under test.
    pub binding: &'static str,
    pub summary: &'static str,
    runner: Runner,
}

pub const CATALOG: [ExperimentInfo; 10] = [
    ExperimentInfo {
        id: "w2-bounded",
        criterion: "C1",
        binding: "W2(S_n, G) <= beta sqrt(d) sqrt(32 + 2 log2 n) / sqrt(n) for |X| <= beta",
        summary: "exact-assignment W2 of lattice-ball sums against the Gaussian, d in {1,2,4}",
        runner: w2::bounded,
    },
    ExperimentInfo {
        id: "w2-logconcave-rate",
        criterion: "C2",
        binding: "W2(S_n, G) = O(n^{-1/2}), rate only",
        summary: "log-log slope of W2 for an exact lattice law and an embedded cube cloud",
        runner: w2::rate,
    },
    ExperimentInfo {
        id: "tau-mean",
        criterion: "C3",
        binding: "E[tau] <= beta^2 under the projection policy",
        summary: "mean stopping time for two-point and five-atom laws",
        runner: tau::mean,
    },
    ExperimentInfo {
        id: "tau-tails",
        criterion: "C4",
        binding: "P(tau >= 2 i beta^2) <= 2^{-i}",
        summary: "empirical stopping-time tails with Wilson intervals",
        runner: tau::tails,
    },
    ExperimentInfo {
        id: "main-inequality",
        criterion: "C5",
        binding: "E|S_n - G|^2 <= int min(Tr(E[G^4] E[G^2]^+)/n, 4 Tr E[G^2]) dt for the coupled pair",
        summary: "coupling cost of the constructed pair against the moment integral",
        runner: coupling::main_inequality,
    },
    ExperimentInfo {
        id: "embed-correctness",
        criterion: "C6",
        binding: "a_tau has law mu when tau is finite",
        summary: "chi-square fit of embedded atoms under all three policies",
        runner: embedding::correctness,
    },
    ExperimentInfo {
        id: "identities",
        criterion: "C7",
        binding: "rank monotonicity, dA_t, Gamma representation, d/dt E[A_t], sqrt trace inequality, tilt form",
        summary: "structural identities of the localization process",
        runner: identities::run,
    },
    ExperimentInfo {
        id: "entropy-strong",
        criterion: "C8",
        binding: "Ent(S_n || G) <= 2(d + 2 Ent(X || gamma)) / (sigma^4 n) for 1-uniformly log-concave X",
        summary: "FFT oracle against the strongly log-concave bound",
        runner: entropy::strong,
    },
    ExperimentInfo {
        id: "entropy-rate",
        criterion: "C9",
        binding: "Ent(S_n || G) = O(1/n) for log-concave X, rate only",
        summary: "log-log slope of the FFT oracle and the implied constant",
        runner: entropy::rate,
    },
    ExperimentInfo {
        id: "estimator-calibration",
        criterion: "C10",
        binding: "estimators against brute force and closed forms",
        summary: "assignment vs permutations, Bures vs sampled OT, variational entropy vs references",
        runner: calibration::run,
    },
];

pub fn find(id: &str) -> Option<&'static ExperimentInfo> {
    CATALOG.iter().find(|e| e.id == id)
}

/// Validates `cfg` and runs its experiment.
pub fn run(cfg: &ExperimentConfig) -> Result<Outcome, LabError> {
    cfg.validate()?;
    let info = find(&cfg.experiment).ok_or_else(|| LabError::UnknownExperiment(cfg.experiment.clone()))?;
    let prov = Provenance {
        config_sha256: cfg.hash(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION").into(),
    };
    let mut out = Outcome { report: Report::new(info.id, info.binding, cfg.quick, prov), tables: vec![] };
    (info.runner)(cfg, &mut out)?;
    Ok(out)
}

fn rng(cfg: &ExperimentConfig, index: u64) -> StreamRng {
    stream(cfg.seed, index)
}

fn gaussian_samples(root: &SymMatrix, k: usize, rng: &mut StreamRng) -> Vec<Vec<f64>> {
    let d = root.dim();
    (0..k)
        .map(|_| {
            let z: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            root.mul_vec(&z)
        })
        .collect()
}

fn two_point(beta: f64) -> Result<DiscreteMeasure, LabError> {
    Ok(DiscreteMeasure::uniform(1, &[vec![-beta], vec![beta]])?)
}

/// `{−1, −½, 0, ½, 1}`.
fn five_atoms() -> Result<DiscreteMeasure, LabError> {
    Ok(make_lattice_ball(1, 0.5, 2)?)
}

/// 32 atoms in `[−1, 1]²` with uneven weights, centered.
fn random_atoms(rng: &mut StreamRng) -> Result<DiscreteMeasure, LabError> {
    let atoms: Vec<Vec<f64>> = (0..32).map(|_| (0..2).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let w: Vec<f64> = (0..32).map(|_| rng.random_range(0.5..1.5)).collect();
    Ok(DiscreteMeasure::new(2, &atoms, &w)?.centered())
}

/// Grid horizon for moment estimation: 1.5 times the largest stopping time
/// of a pilot run.
fn pilot_horizon(
    m: &DiscreteMeasure,
    policy: Policy,
    ecfg: &EngineConfig,
    pilot: usize,
    rng: &mut StreamRng,
) -> Result<f64, LabError> {
    let recs = run_many(m, policy, ecfg, pilot, rng)?;
    let tmax = recs.iter().map(|r| r.tau).fold(0.0, f64::max);
    Ok(1.5 * tmax.max(ecfg.step_dt(m)))
}

fn label(m: &DiscreteMeasure) -> String {
    format!("d{}_k{}", m.dim(), m.len())
}
