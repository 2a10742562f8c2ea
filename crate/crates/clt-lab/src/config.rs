//! Experiment configuration: a TOML document (or its JSON equivalent).

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use clt_embed::engine::Policy;
use clt_embed::measure::{
    isotropize, make_lattice_ball, particle_cloud_product, Density1d, DiscreteMeasure, MeasureDoc,
};
use clt_embed::rng::stream;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::experiments::find;
use crate::LabError;

/// Stream index reserved for generating particle clouds from the config seed.
const CLOUD_STREAM: u64 = 0xC10D;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experiment: String,
    pub seed: u64,
    #[serde(default)]
    pub quick: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    /// Replaces the experiment's default measure family.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub measure: Option<MeasureSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub policy: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trajectories: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pairs: Option<usize>,
    /// Extra slack per criterion, keyed by criterion id (`C1` … `C10`).
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub tolerance: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MeasureSpec {
    /// Uniform on `βZ^d ∩ {‖z‖ ≤ radius·β}`.
    Lattice { d: usize, beta: f64, radius: u32 },
    TwoPoint { beta: f64 },
    PointMass { d: usize },
    Atoms { dim: usize, atoms: Vec<Vec<f64>>, weights: Vec<f64> },
    /// A JSON measure document on disk.
    File { path: PathBuf },
    /// Equal-weight cloud with iid coordinates, isotropized if requested.
    Cloud {
        density: DensitySpec,
        d: usize,
        size: usize,
        #[serde(default)]
        isotropic: bool,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DensitySpec {
    Gauss { s: f64 },
    Logcosh { a: f64, b: f64 },
    Uniform,
}

impl DensitySpec {
    pub fn build(&self) -> Result<Density1d, LabError> {
        Ok(match self {
            DensitySpec::Gauss { s } => Density1d::gauss(*s)?,
            DensitySpec::Logcosh { a, b } => Density1d::gauss_logcosh(*a, *b)?,
            DensitySpec::Uniform => Density1d::uniform_isotropic()?,
        })
    }
}

impl MeasureSpec {
    pub fn build(&self, seed: u64) -> Result<DiscreteMeasure, LabError> {
        Ok(match self {
            MeasureSpec::Lattice { d, beta, radius } => make_lattice_ball(*d, *beta, *radius)?,
            MeasureSpec::TwoPoint { beta } => DiscreteMeasure::uniform(1, &[vec![-beta], vec![*beta]])?,
            MeasureSpec::PointMass { d } => {
                if *d == 0 {
                    return Err(LabError::Config("point mass needs d >= 1".into()));
                }
                DiscreteMeasure::point_mass(&vec![0.0; *d])
            }
            MeasureSpec::Atoms { dim, atoms, weights } => DiscreteMeasure::new(*dim, atoms, weights)?,
            MeasureSpec::File { path } => {
                let text = std::fs::read_to_string(path).map_err(|e| LabError::Io(path.clone(), e.to_string()))?;
                let doc: MeasureDoc =
                    serde_json::from_str(&text).map_err(|e| LabError::Config(format!("{}: {e}", path.display())))?;
                DiscreteMeasure::from_doc(&doc)?
            }
            MeasureSpec::Cloud { density, d, size, isotropic } => {
                let f = density.build()?;
                let m = particle_cloud_product(&f, *d, *size, &mut stream(seed, CLOUD_STREAM))?.centered();
                if *isotropic {
                    isotropize(&m)?
                } else {
                    m
                }
            }
        })
    }
}

fn positive(name: &str, v: Option<usize>) -> Result<(), LabError> {
    match v {
        Some(0) => Err(LabError::Config(format!("{name} must be positive"))),
        _ => Ok(()),
    }
}

fn positive_list(name: &str, v: &Option<Vec<usize>>) -> Result<(), LabError> {
    match v {
        Some(l) if l.is_empty() || l.contains(&0) => {
            Err(LabError::Config(format!("{name} must be a non-empty list of positive integers")))
        }
        _ => Ok(()),
    }
}

impl ExperimentConfig {
    pub fn new(experiment: &str, seed: u64) -> Self {
        Self {
            experiment: experiment.into(),
            seed,
            quick: false,
            out: None,
            measure: None,
            policy: None,
            d: None,
            n: None,
            trajectories: None,
            samples: None,
            pairs: None,
            tolerance: BTreeMap::new(),
        }
    }

    /// Reads `.json` files as JSON and anything else as TOML.
    pub fn load(path: &Path) -> Result<Self, LabError> {
        let text = std::fs::read_to_string(path).map_err(|e| LabError::Io(path.to_path_buf(), e.to_string()))?;
        let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
        let cfg: Self = if is_json {
            serde_json::from_str(&text).map_err(|e| LabError::Config(e.to_string()))?
        } else {
            toml::from_str(&text).map_err(|e| LabError::Config(e.to_string()))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), LabError> {
        if find(&self.experiment).is_none() {
            return Err(LabError::UnknownExperiment(self.experiment.clone()));
        }
        positive("trajectories", self.trajectories)?;
        positive("samples", self.samples)?;
        positive("pairs", self.pairs)?;
        positive_list("d", &self.d)?;
        positive_list("n", &self.n)?;
        if let Some(p) = &self.policy {
            if Policy::parse(p).is_none() {
                return Err(LabError::Config(format!("unknown policy {p:?}")));
            }
        }
        for (k, v) in &self.tolerance {
            if !v.is_finite() || *v < 0.0 {
                return Err(LabError::Config(format!("tolerance {k} must be finite and non-negative")));
            }
        }
        if let Some(m) = &self.measure {
            m.build(self.seed)?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, without the output location.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out = None;
        let bytes = serde_json::to_vec(&c).expect("config serializes");
        let digest = Sha256::digest(&bytes);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn policy(&self) -> Option<Policy> {
        self.policy.as_deref().and_then(Policy::parse)
    }

    pub fn measure(&self) -> Result<Option<DiscreteMeasure>, LabError> {
        self.measure.as_ref().map(|m| m.build(self.seed)).transpose()
    }

    pub fn tol(&self, id: &str) -> f64 {
        self.tolerance.get(id).copied().unwrap_or(0.0)
    }

    /// Picks the full or quick default unless the config sets a value.
    pub fn count(&self, set: Option<usize>, full: usize, quick: usize) -> usize {
        set.unwrap_or(if self.quick { quick } else { full })
    }

    pub fn ns(&self, full: &[usize], quick: &[usize]) -> Vec<usize> {
        self.n.clone().unwrap_or_else(|| if self.quick { quick.to_vec() } else { full.to_vec() })
    }

    pub fn ds(&self, default: &[usize]) -> Vec<usize> {
        self.d.clone().unwrap_or_else(|| default.to_vec())
    }
}
