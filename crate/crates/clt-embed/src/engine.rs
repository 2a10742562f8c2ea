//! Stochastic localization on a finitely supported measure.
//!
//! The state carries the weights of `µ_t` in log space together with the
//! barycenter `a_t`, covariance `A_t`, the driving matrix `C_t` and
//! `Γ_t = A_t C_t`. Two integrators are provided: the multiplicative step
//! `w ← w·exp(⟨C(x−a), dB⟩ − ½‖C(x−a)‖²dt)` for every policy, and for the
//! Föllmer policy the closed-form Gaussian tilt
//! `w ∝ w₀·exp(⟨θ, x⟩ − ½ q‖x‖²)` with `q = t/(1−t)`.
//!
//! Noise comes in two flavors. `Brownian` feeds independent Gaussian
//! increments. `Innovation` first draws `X* ~ µ` and sets
//! `dB = C(X* − a)dt + dW`: then every step is an exact Bayesian update, so
//! the weights are martingales in discrete time and `a_τ` has law `µ` up to
//! the collapse threshold.

use crate::error::{Error, Result};
use crate::measure::{moments, sample_indices, DiscreteMeasure};
use crate::psd::{eigh_into, spectral_apply_into, SymMatrix, DEFAULT_REL_CUTOFF};
use crate::rng::{child_seed, stream, MERGE_CHUNK};
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::sync::Arc;

/// Operator-norm threshold that ends the capped phase.
pub const CAP_NORM_THRESHOLD: f64 = 3.0;
/// Latest time at which the capped phase ends.
pub const CAP_TIME: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Policy {
    /// `C_t = A_t†`.
    Projection,
    /// `C_t = min(A_t†, I)` up to `T = 1 ∧ inf{t : ‖A_t‖ ≥ 3}`, then `A_t†`.
    Capped,
    /// `C_t = I / (1 − t)`.
    Foellmer,
}

impl Policy {
    pub fn name(&self) -> &'static str {
        match self {
            Policy::Projection => "projection",
            Policy::Capped => "capped",
            Policy::Foellmer => "foellmer",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s.to_ascii_lowercase().as_str() {
            "projection" => Some(Policy::Projection),
            "capped" => Some(Policy::Capped),
            "foellmer" | "follmer" | "föllmer" => Some(Policy::Foellmer),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum NoiseMode {
    Innovation,
    Brownian,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Renormalization {
    /// Stochastic exponential, applied in log space.
    LogSpace,
    /// Linear Euler form `w(1 + ⟨C(x−a), dB⟩)`, clamped at zero.
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FoellmerIntegrator {
    Tilt,
    Step,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EngineConfig {
    /// Step for Projection/Capped; `None` means `1e-3·β²` with `β` the radius.
    pub dt: Option<f64>,
    /// Step in `u = −ln(1 − t)` for the Föllmer policy.
    pub du: f64,
    /// Föllmer truncation time.
    pub t_max: f64,
    /// Collapse when the largest weight reaches `1 − eps_w`.
    pub eps_w: f64,
    /// Collapse when `Tr A_t` falls to this value.
    pub eps_trace: f64,
    pub max_steps: usize,
    pub seed: u64,
    pub noise: NoiseMode,
    pub renorm: Renormalization,
    pub foellmer: FoellmerIntegrator,
    /// Atoms whose normalized weight drops below this are removed.
    pub prune_floor: f64,
    pub store_path: bool,
}

impl Default for EngineConfig {
    fn default() -> Self {
        Self {
            dt: None,
            du: 1e-3,
            t_max: 1.0 - 1e-4,
            eps_w: 1e-6,
            eps_trace: 1e-10,
            max_steps: 2_000_000,
            seed: 0,
            noise: NoiseMode::Innovation,
            renorm: Renormalization::LogSpace,
            foellmer: FoellmerIntegrator::Tilt,
            prune_floor: 1e-8,
            store_path: false,
        }
    }
}

impl EngineConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.du > 0.0
            && self.t_max > 0.0
            && self.t_max < 1.0
            && self.eps_w > 0.0
            && self.eps_w < 0.5
            && self.eps_trace > 0.0
            && self.max_steps >= 1000
            && self.prune_floor >= 0.0
            && self.prune_floor < self.eps_w
            && self.dt.is_none_or(|d| d > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument("engine config out of range".into()))
        }
    }

    /// Uniform step used by Projection/Capped runs on `m`.
    pub fn step_dt(&self, m: &DiscreteMeasure) -> f64 {
        self.dt.unwrap_or_else(|| {
            let b = moments(m).radius;
            if b > 0.0 {
                1e-3 * b * b
            } else {
                1e-3
            }
        })
    }

    /// Step schedule for a policy. Projection/Capped grids run to `horizon`.
    pub fn grid(&self, policy: Policy, m: &DiscreteMeasure, horizon: f64) -> TimeGrid {
        match policy {
            Policy::Foellmer => TimeGrid::foellmer(self.du, self.t_max),
            _ => TimeGrid::uniform(self.step_dt(m), horizon),
        }
    }
}

/// Increasing time points starting at 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub times: Vec<f64>,
}

impl TimeGrid {
    pub fn uniform(dt: f64, horizon: f64) -> Self {
        let n = (horizon / dt).round().max(1.0) as usize;
        Self { times: (0..=n).map(|k| k as f64 * dt).collect() }
    }

    /// `t_k = 1 − e^{−k du}` up to `t_max`, which is always the last point.
    pub fn foellmer(du: f64, t_max: f64) -> Self {
        let u_max = -(1.0 - t_max).ln();
        let n = (u_max / du - 1e-9).floor() as usize;
        let mut times: Vec<f64> = (0..=n).map(|k| -(-(k as f64) * du).exp_m1()).collect();
        if *times.last().unwrap() < t_max - 1e-15 {
            times.push(t_max);
        }
        Self { times }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn end(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }
}

/// Per-trajectory monitors.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Diagnostics {
    pub steps: usize,
    pub pruned: usize,
    pub rank_increases: usize,
    pub max_simplex_err: f64,
    /// `max ‖Γ² − Γ‖_HS` (meaningful for Projection).
    pub max_idempotency_err: f64,
    /// `max ‖A_t C_t‖_op`.
    pub max_ac_norm: f64,
    /// `max λ_max(Γ_t)`.
    pub max_gamma_eig: f64,
    /// `max t·λ_max(Γ_t)` over Föllmer steps with `t > 0`.
    pub max_t_gamma: f64,
    /// `‖A_T‖_op − 3` at the capped-phase switch, if it was a crossing.
    pub t_hit_overshoot: Option<f64>,
    /// Spread of `ln w_t − (⟨θ, x⟩ − ½xᵀQx) − ln w_0` across surviving atoms,
    /// relative to the size of the exponents.
    pub tilt_form_residual: f64,
    /// Accumulated `∫ tr(C_s²) ds / d`.
    pub quad_coeff: f64,
}

/// Full path storage for `dAt_residual` and pathwise comparisons.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct PathRecord {
    pub times: Vec<f64>,
    pub a: Vec<Vec<f64>>,
    pub cov: Vec<SymMatrix>,
    pub gamma: Vec<SymMatrix>,
    pub rank: Vec<usize>,
    pub collapsed: Vec<bool>,
    /// Increment `dB_k` applied on `[t_k, t_{k+1}]` (empty for the tilt integrator).
    pub db: Vec<Vec<f64>>,
    /// `∫(x−a)^{⊗3}µ_t C dB − A C² A dt` at the start of step k.
    pub da_rhs: Vec<SymMatrix>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub policy: Policy,
    pub tau: f64,
    pub collapsed: bool,
    pub embedded_point: Vec<f64>,
    pub atom_index: usize,
    pub t_hit: Option<f64>,
    pub diagnostics: Diagnostics,
    pub path: Option<PathRecord>,
}

#[derive(Debug, Clone)]
pub struct TrajectoryState {
    measure: Arc<DiscreteMeasure>,
    policy: Policy,
    pub t: f64,
    weights: Vec<f64>,
    active: Vec<usize>,
    logw: Vec<f64>,
    a: Vec<f64>,
    cov: Vec<f64>,
    c: Vec<f64>,
    gamma: Vec<f64>,
    vals: Vec<f64>,
    vecs: Vec<f64>,
    gvals: Vec<f64>,
    cutoff: f64,
    /// Projector onto directions already classified as null; kept null.
    null_proj: Vec<f64>,
    pub rank: usize,
    pub t_hit: Option<f64>,
    pub collapsed: bool,
    pub tau: Option<f64>,
    atom_index: usize,
    planted: Option<usize>,
    theta: Vec<f64>,
    q_acc: Vec<f64>,
    eps_w: f64,
    eps_trace: f64,
    prune_floor: f64,
    renorm: Renormalization,
    pub diag: Diagnostics,
}

/// `(I − K) A (I − K)` for column-major `A`, `K`.
fn compress(a: &[f64], k: &[f64], d: usize) -> Vec<f64> {
    let mut p = vec![0.0; d * d];
    for j in 0..d {
        for i in 0..d {
            p[i + j * d] = if i == j { 1.0 } else { 0.0 } - k[i + j * d];
        }
    }
    let mut ap = vec![0.0; d * d];
    for j in 0..d {
        for i in 0..d {
            ap[i + j * d] = (0..d).map(|l| a[i + l * d] * p[l + j * d]).sum();
        }
    }
    let mut out = vec![0.0; d * d];
    for j in 0..d {
        for i in 0..=j {
            let v: f64 = (0..d).map(|l| p[l + i * d] * ap[l + j * d]).sum();
            out[i + j * d] = v;
            out[j + i * d] = v;
        }
    }
    out
}

fn gauss_vec<R: Rng + ?Sized>(rng: &mut R, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

impl TrajectoryState {
    pub fn new(m: &DiscreteMeasure, policy: Policy, cfg: &EngineConfig) -> Self {
        Self::from_arc(Arc::new(m.clone()), policy, cfg)
    }

    pub fn from_arc(m: Arc<DiscreteMeasure>, policy: Policy, cfg: &EngineConfig) -> Self {
        let d = m.dim();
        let n = m.len();
        let active: Vec<usize> = (0..n).collect();
        let logw: Vec<f64> = m.weights().iter().map(|w| w.ln()).collect();
        let mut s = Self {
            policy,
            t: 0.0,
            weights: m.weights().to_vec(),
            active,
            logw,
            a: vec![0.0; d],
            cov: vec![0.0; d * d],
            c: vec![0.0; d * d],
            gamma: vec![0.0; d * d],
            vals: vec![0.0; d],
            vecs: vec![0.0; d * d],
            gvals: vec![0.0; d],
            cutoff: 0.0,
            null_proj: vec![0.0; d * d],
            rank: 0,
            t_hit: None,
            collapsed: false,
            tau: None,
            atom_index: 0,
            planted: None,
            theta: vec![0.0; d],
            q_acc: vec![0.0; d * d],
            eps_w: cfg.eps_w,
            eps_trace: cfg.eps_trace,
            prune_floor: cfg.prune_floor,
            renorm: cfg.renorm,
            diag: Diagnostics::default(),
            measure: m,
        };
        s.refresh_moments();
        s.rank = s.vals.iter().filter(|&&v| v > s.cutoff).count();
        if policy == Policy::Capped && s.op_norm() >= CAP_NORM_THRESHOLD {
            s.t_hit = Some(0.0);
            s.diag.t_hit_overshoot = Some(s.op_norm() - CAP_NORM_THRESHOLD);
        }
        s.check_collapse();
        s.refresh_drive();
        s
    }

    pub fn dim(&self) -> usize {
        self.measure.dim()
    }

    pub fn measure(&self) -> &DiscreteMeasure {
        &self.measure
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn mean(&self) -> &[f64] {
        &self.a
    }

    pub fn cov(&self) -> SymMatrix {
        SymMatrix::from_col_major(self.dim(), self.cov.clone())
    }

    pub fn drive(&self) -> SymMatrix {
        SymMatrix::from_col_major(self.dim(), self.c.clone())
    }

    pub fn gamma(&self) -> SymMatrix {
        SymMatrix::from_col_major(self.dim(), self.gamma.clone())
    }

    pub(crate) fn gamma_slice(&self) -> &[f64] {
        &self.gamma
    }

    pub(crate) fn cov_slice(&self) -> &[f64] {
        &self.cov
    }

    /// Accumulated quadratic tilt `∫ C² dt` (column-major).
    pub fn quad_tilt(&self) -> &[f64] {
        &self.q_acc
    }

    /// `Σ w (x−a)^{⊗3}` into `out` (length `d³`, index `i + d j + d² l`).
    pub fn third_moment_into(&self, out: &mut [f64]) {
        let d = self.dim();
        out.iter_mut().for_each(|x| *x = 0.0);
        let mut y = vec![0.0; d];
        for &i in &self.active {
            let w = self.weights[i];
            let x = self.measure.atom(i);
            for k in 0..d {
                y[k] = x[k] - self.a[k];
            }
            for l in 0..d {
                for j in 0..d {
                    let s = w * y[l] * y[j];
                    for k in 0..d {
                        out[k + d * j + d * d * l] += s * y[k];
                    }
                }
            }
        }
    }

    /// `Γ^p` written into `out`.
    pub fn gamma_power_into(&self, p: i32, out: &mut [f64]) {
        let d = self.dim();
        let mut pv = vec![0.0; d];
        for k in 0..d {
            pv[k] = self.gvals[k].powi(p);
        }
        spectral_apply_into(&pv, &self.vecs, d, |x| x, out);
    }

    pub fn gamma_eigenvalues(&self) -> &[f64] {
        &self.gvals
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    pub fn atom_index(&self) -> usize {
        self.atom_index
    }

    /// Linear tilt coefficient `θ_t`.
    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn set_planted(&mut self, idx: usize) {
        self.planted = Some(idx);
    }

    pub fn planted(&self) -> Option<usize> {
        self.planted
    }

    fn op_norm(&self) -> f64 {
        self.vals.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    fn capped_phase(&self) -> bool {
        self.t_hit.is_none() && self.t < CAP_TIME - 1e-12
    }

    /// Recomputes `a`, `A` and its eigendecomposition from the active weights.
    fn refresh_moments(&mut self) {
        let d = self.dim();
        let m = &self.measure;
        self.a.iter_mut().for_each(|x| *x = 0.0);
        for &i in &self.active {
            let w = self.weights[i];
            for (k, x) in m.atom(i).iter().enumerate() {
                self.a[k] += w * x;
            }
        }
        self.cov.iter_mut().for_each(|x| *x = 0.0);
        let mut y = [0.0_f64; 16];
        let mut yv = vec![0.0; if d > 16 { d } else { 0 }];
        for &i in &self.active {
            let w = self.weights[i];
            let x = m.atom(i);
            let yy: &mut [f64] = if d > 16 { &mut yv } else { &mut y[..d] };
            for k in 0..d {
                yy[k] = x[k] - self.a[k];
            }
            for j in 0..d {
                let s = w * yy[j];
                for k in 0..=j {
                    self.cov[k + j * d] += s * yy[k];
                }
            }
        }
        for j in 0..d {
            for k in 0..j {
                self.cov[j + k * d] = self.cov[k + j * d];
            }
        }
        if self.null_proj.iter().all(|&x| x == 0.0) {
            eigh_into(&self.cov, d, &mut self.vals, &mut self.vecs);
        } else {
            let pa = compress(&self.cov, &self.null_proj, d);
            eigh_into(&pa, d, &mut self.vals, &mut self.vecs);
        }
        self.cutoff = DEFAULT_REL_CUTOFF * self.op_norm();
        self.null_proj.iter_mut().for_each(|x| *x = 0.0);
        for k in 0..d {
            if self.vals[k] <= self.cutoff {
                let v = &self.vecs[k * d..(k + 1) * d];
                for i in 0..d {
                    for j in 0..d {
                        self.null_proj[i + j * d] += v[i] * v[j];
                    }
                }
            }
        }
    }

    fn drive_eigen(&self, lambda: f64) -> f64 {
        let pos = lambda > self.cutoff && lambda > 0.0;
        match self.policy {
            Policy::Foellmer => 1.0 / (1.0 - self.t),
            Policy::Projection => {
                if pos {
                    1.0 / lambda
                } else {
                    0.0
                }
            }
            Policy::Capped => {
                if !pos {
                    0.0
                } else if self.capped_phase() {
                    (1.0 / lambda).min(1.0)
                } else {
                    1.0 / lambda
                }
            }
        }
    }

    /// Recomputes `C_t` and `Γ_t` for the current `t` and `A_t`.
    fn refresh_drive(&mut self) {
        let d = self.dim();
        if self.collapsed {
            self.c.iter_mut().for_each(|x| *x = 0.0);
            self.gamma.iter_mut().for_each(|x| *x = 0.0);
            self.gvals.iter_mut().for_each(|x| *x = 0.0);
            return;
        }
        let cv: Vec<f64> = self.vals.iter().map(|&l| self.drive_eigen(l)).collect();
        for k in 0..d {
            let l = self.vals[k];
            self.gvals[k] = if l > self.cutoff { l.max(0.0) * cv[k] } else { 0.0 };
        }
        if self.policy == Policy::Foellmer {
            let c = 1.0 / (1.0 - self.t);
            self.c.iter_mut().for_each(|x| *x = 0.0);
            for k in 0..d {
                self.c[k * (d + 1)] = c;
            }
        } else {
            spectral_apply_into(&cv, &self.vecs, d, |x| x, &mut self.c);
        }
        spectral_apply_into(&self.gvals, &self.vecs, d, |x| x, &mut self.gamma);
        let gmax = self.gvals.iter().fold(0.0_f64, |m, &v| m.max(v));
        self.diag.max_ac_norm = self.diag.max_ac_norm.max(gmax);
        self.diag.max_gamma_eig = self.diag.max_gamma_eig.max(gmax);
        if self.policy == Policy::Foellmer && self.t > 0.0 {
            self.diag.max_t_gamma = self.diag.max_t_gamma.max(self.t * gmax);
        }
        if self.policy == Policy::Projection {
            let mut err = 0.0;
            for &g in &self.gvals {
                err += (g * g - g) * (g * g - g);
            }
            self.diag.max_idempotency_err = self.diag.max_idempotency_err.max(err.sqrt());
        }
    }

    fn check_collapse(&mut self) {
        if self.collapsed {
            return;
        }
        let (mut best, mut wmax) = (self.active[0], -1.0);
        for &i in &self.active {
            if self.weights[i] > wmax {
                wmax = self.weights[i];
                best = i;
            }
        }
        let tr: f64 = (0..self.dim()).map(|k| self.cov[k * (self.dim() + 1)]).sum();
        if wmax >= 1.0 - self.eps_w || tr <= self.eps_trace || self.active.len() == 1 {
            self.snap(best);
        }
    }

    fn snap(&mut self, j: usize) {
        self.collapsed = true;
        self.tau = Some(self.t);
        self.atom_index = j;
        for &i in &self.active {
            self.weights[i] = 0.0;
        }
        self.weights[j] = 1.0;
        self.active = vec![j];
        self.logw = vec![0.0];
        self.a.copy_from_slice(self.measure.atom(j));
        self.cov.iter_mut().for_each(|x| *x = 0.0);
        self.vals.iter_mut().for_each(|x| *x = 0.0);
        self.rank = 0;
        self.refresh_drive();
    }

    /// Declares collapse at the current time onto the heaviest atom.
    pub fn force_collapse(&mut self) {
        if self.collapsed {
            return;
        }
        let mut best = (self.active[0], -1.0);
        for &i in &self.active {
            if self.weights[i] > best.1 {
                best = (i, self.weights[i]);
            }
        }
        self.snap(best.0);
    }

    /// Normalizes from `logw`, prunes, and refreshes moments and rank.
    fn normalize_and_refresh(&mut self) -> Result<()> {
        let mx = self.logw.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        if !mx.is_finite() {
            if mx == f64::NEG_INFINITY {
                return Err(Error::WeightUnderflow { t: self.t });
            }
            return Err(Error::NonFinite { t: self.t });
        }
        let mut sum = 0.0;
        for (k, &i) in self.active.iter().enumerate() {
            self.logw[k] -= mx;
            let w = self.logw[k].exp();
            self.weights[i] = w;
            sum += w;
        }
        if !(sum > 0.0) || !sum.is_finite() {
            return Err(Error::NonFinite { t: self.t });
        }
        let floor = self.prune_floor * sum;
        let planted = self.planted;
        let mut keep = 0;
        let mut kept_sum = 0.0;
        for k in 0..self.active.len() {
            let i = self.active[k];
            let w = self.weights[i];
            if w >= floor || Some(i) == planted {
                self.active[keep] = i;
                self.logw[keep] = self.logw[k];
                kept_sum += w;
                keep += 1;
            } else {
                self.weights[i] = 0.0;
                self.diag.pruned += 1;
            }
        }
        self.active.truncate(keep);
        self.logw.truncate(keep);
        let mut check = 0.0;
        for &i in &self.active {
            self.weights[i] /= kept_sum;
            check += self.weights[i];
        }
        self.diag.max_simplex_err = self.diag.max_simplex_err.max((check - 1.0).abs());
        let old_rank = self.rank;
        self.refresh_moments();
        self.rank = self.vals.iter().filter(|&&v| v > self.cutoff).count();
        if self.rank > old_rank {
            self.diag.rank_increases += 1;
        }
        Ok(())
    }

    /// `∫(x−a)^{⊗3}µ_t C dB − A C² A dt` at the current state.
    pub fn cov_increment_rhs(&self, db: &[f64], dt: f64) -> SymMatrix {
        let d = self.dim();
        let cdb = mat_vec(&self.c, db, d);
        let mut out = vec![0.0; d * d];
        let mut y = vec![0.0; d];
        for &i in &self.active {
            let w = self.weights[i];
            let x = self.measure.atom(i);
            for k in 0..d {
                y[k] = x[k] - self.a[k];
            }
            let s: f64 = y.iter().zip(&cdb).map(|(a, b)| a * b).sum::<f64>() * w;
            for j in 0..d {
                for k in 0..d {
                    out[k + j * d] += s * y[k] * y[j];
                }
            }
        }
        let ac = mat_mul(&self.cov, &self.c, d);
        let ca = mat_mul(&self.c, &self.cov, d);
        let drift = mat_mul(&ac, &ca, d);
        for k in 0..d * d {
            out[k] -= drift[k] * dt;
        }
        SymMatrix::from_col_major(d, out)
    }

    /// One multiplicative step with increment `db` over `dt`.
    pub fn advance(&mut self, db: &[f64], dt: f64) -> Result<()> {
        if self.collapsed {
            self.t += dt;
            return Ok(());
        }
        if !(dt > 0.0) || db.len() != self.dim() {
            return Err(Error::InvalidArgument("step needs dt > 0 and a d-vector increment".into()));
        }
        let d = self.dim();
        let m = Arc::clone(&self.measure);
        let mut y = vec![0.0; d];
        let mut z = vec![0.0; d];
        let scalar_c = if self.policy == Policy::Foellmer { Some(1.0 / (1.0 - self.t)) } else { None };
        for (k, &i) in self.active.iter().enumerate() {
            let x = m.atom(i);
            for j in 0..d {
                y[j] = x[j] - self.a[j];
            }
            match scalar_c {
                Some(c) => {
                    for j in 0..d {
                        z[j] = c * y[j];
                    }
                }
                None => {
                    for j in 0..d {
                        let mut s = 0.0;
                        for l in 0..d {
                            s += self.c[j + l * d] * y[l];
                        }
                        z[j] = s;
                    }
                }
            }
            let lin: f64 = z.iter().zip(db).map(|(a, b)| a * b).sum();
            match self.renorm {
                Renormalization::LogSpace => {
                    let quad: f64 = z.iter().map(|v| v * v).sum();
                    self.logw[k] += lin - 0.5 * quad * dt;
                }
                Renormalization::Linear => {
                    let f = 1.0 + lin;
                    self.logw[k] += if f > 0.0 { f.ln() } else { f64::NEG_INFINITY };
                }
            }
        }
        let cdb = mat_vec(&self.c, db, d);
        let c2 = mat_mul(&self.c, &self.c, d);
        let c2a = mat_vec(&c2, &self.a, d);
        for j in 0..d {
            self.theta[j] += cdb[j] + c2a[j] * dt;
        }
        for k in 0..d * d {
            self.q_acc[k] += c2[k] * dt;
        }
        self.diag.quad_coeff += (0..d).map(|k| c2[k * (d + 1)]).sum::<f64>() * dt / d as f64;
        if matches!(self.renorm, Renormalization::Linear) {
            self.logw.iter_mut().for_each(|v| {
                if v.is_nan() {
                    *v = f64::NEG_INFINITY
                }
            });
        }
        self.t += dt;
        self.diag.steps += 1;
        self.normalize_and_refresh()?;
        self.after_update();
        Ok(())
    }

    /// Sets the weights to the closed-form tilt `w₀·exp(⟨θ,x⟩ − ½q‖x‖²)` at time `t`.
    pub fn set_tilt(&mut self, theta: &[f64], q: f64, t: f64) -> Result<()> {
        self.t = t;
        self.theta.copy_from_slice(theta);
        if self.collapsed {
            return Ok(());
        }
        let m = Arc::clone(&self.measure);
        let lw0 = m.log_weights();
        for (k, &i) in self.active.iter().enumerate() {
            let x = m.atom(i);
            let mut lin = 0.0;
            let mut n2 = 0.0;
            for (xj, th) in x.iter().zip(theta) {
                lin += xj * th;
                n2 += xj * xj;
            }
            self.logw[k] = lw0[i] + lin - 0.5 * q * n2;
        }
        let d = self.dim();
        self.q_acc.iter_mut().for_each(|x| *x = 0.0);
        for k in 0..d {
            self.q_acc[k * (d + 1)] = q;
        }
        self.diag.quad_coeff = q;
        self.diag.steps += 1;
        self.normalize_and_refresh()?;
        self.after_update();
        Ok(())
    }

    fn after_update(&mut self) {
        if self.weights.iter().any(|w| !w.is_finite()) {
            return;
        }
        self.check_collapse();
        if self.policy == Policy::Capped && self.t_hit.is_none() && !self.collapsed {
            let nrm = self.op_norm();
            if nrm >= CAP_NORM_THRESHOLD {
                self.t_hit = Some(self.t);
                self.diag.t_hit_overshoot = Some(nrm - CAP_NORM_THRESHOLD);
            }
        }
        self.refresh_drive();
    }

    /// Spread of the log weights around the Gaussian-tilt closed form,
    /// relative to the size of the tilt exponents.
    pub fn tilt_form_residual(&self) -> f64 {
        if self.active.len() < 2 {
            return 0.0;
        }
        let d = self.dim();
        let m = &self.measure;
        let w0 = m.weights();
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut scale = 1.0_f64;
        for (k, &i) in self.active.iter().enumerate() {
            let x = m.atom(i);
            let lin: f64 = x.iter().zip(&self.theta).map(|(a, b)| a * b).sum();
            let qx = mat_vec(&self.q_acc, x, d);
            let quad: f64 = x.iter().zip(&qx).map(|(a, b)| a * b).sum();
            let r = self.logw[k] - w0[i].ln() - lin + 0.5 * quad;
            scale = scale.max(lin.abs() + quad.abs());
            lo = lo.min(r);
            hi = hi.max(r);
        }
        (hi - lo) / scale
    }

    pub fn record(&self, path: Option<PathRecord>) -> TrajectoryRecord {
        let mut diagnostics = self.diag.clone();
        diagnostics.tilt_form_residual = self.tilt_form_residual();
        TrajectoryRecord {
            policy: self.policy,
            tau: self.tau.unwrap_or(self.t),
            collapsed: self.collapsed,
            embedded_point: self.a.clone(),
            atom_index: if self.collapsed { self.atom_index } else { self.measure.nearest_atom(&self.a) },
            t_hit: self.t_hit,
            diagnostics,
            path,
        }
    }

    fn push_path(&self, p: &mut PathRecord) {
        p.times.push(self.t);
        p.a.push(self.a.clone());
        p.cov.push(self.cov());
        p.gamma.push(self.gamma());
        p.rank.push(self.rank);
        p.collapsed.push(self.collapsed);
    }

    /// Innovation increment `C(X* − a)dt + √dt ξ`.
    fn innovation_db<R: Rng + ?Sized>(&self, rng: &mut R, dt: f64) -> Vec<f64> {
        let d = self.dim();
        let xs = self.measure.atom(self.planted.expect("innovation noise needs a planted atom"));
        let diff: Vec<f64> = xs.iter().zip(&self.a).map(|(x, a)| x - a).collect();
        let drift = mat_vec(&self.c, &diff, d);
        let mut db = gauss_vec(rng, d, dt.sqrt());
        for j in 0..d {
            db[j] += drift[j] * dt;
        }
        db
    }
}

fn mat_vec(m: &[f64], v: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for j in 0..d {
        for i in 0..d {
            out[i] += m[i + j * d] * v[j];
        }
    }
    out
}

fn mat_mul(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for j in 0..d {
        for l in 0..d {
            let blj = b[l + j * d];
            for i in 0..d {
                out[i + j * d] += a[i + l * d] * blj;
            }
        }
    }
    out
}

/// Quadratic tilt coefficient `t/(1−t)` of the Föllmer posterior.
pub fn foellmer_quad_coeff(t: f64) -> f64 {
    t / (1.0 - t)
}

/// Pure form of a single step: returns the updated state.
pub fn step(state: &TrajectoryState, db: &[f64], dt: f64) -> Result<TrajectoryState> {
    let mut s = state.clone();
    s.advance(db, dt)?;
    Ok(s)
}

/// Where increments come from.
pub enum Noise<'a, R: Rng + ?Sized> {
    Random(&'a mut R),
    /// Pre-drawn Brownian increments, one per step.
    Given(&'a [Vec<f64>]),
}

/// Called at every grid point (including `t = 0`) with the grid index.
pub trait Observer {
    fn observe(&mut self, k: usize, state: &TrajectoryState);
}

impl Observer for () {
    fn observe(&mut self, _: usize, _: &TrajectoryState) {}
}

impl<F: FnMut(usize, &TrajectoryState)> Observer for F {
    fn observe(&mut self, k: usize, s: &TrajectoryState) {
        self(k, s)
    }
}

/// Drives one trajectory along `grid`.
///
/// With `continue_after_collapse` the loop keeps visiting grid points after
/// collapse (Föllmer drift bookkeeping needs `θ_t` to the end).
pub fn run_on_grid<R: Rng + ?Sized, O: Observer>(
    m: &Arc<DiscreteMeasure>,
    policy: Policy,
    cfg: &EngineConfig,
    grid: &[f64],
    mut noise: Noise<'_, R>,
    obs: &mut O,
    continue_after_collapse: bool,
) -> Result<TrajectoryRecord> {
    let innovation = matches!(noise, Noise::Random(_)) && cfg.noise == NoiseMode::Innovation;
    let mut w = Walker::new(m, policy, cfg, innovation);
    if innovation {
        if let Noise::Random(rng) = &mut noise {
            w.state.set_planted(sample_indices(m, *rng, 1)[0]);
        }
    }
    let mut path = cfg.store_path.then(PathRecord::default);
    if let Some(p) = path.as_mut() {
        w.state.push_path(p);
    }
    obs.observe(0, &w.state);
    for k in 0..grid.len().saturating_sub(1) {
        if w.state.collapsed && !continue_after_collapse {
            break;
        }
        match &mut noise {
            Noise::Given(v) => {
                let db = v
                    .get(k)
                    .ok_or_else(|| Error::InvalidArgument("not enough increments for the grid".into()))?;
                w.advance::<R>(grid[k], grid[k + 1], Some(db), None, path.as_mut())?;
            }
            Noise::Random(rng) => w.advance(grid[k], grid[k + 1], None, Some(&mut **rng), path.as_mut())?,
        }
        if let Some(p) = path.as_mut() {
            w.state.push_path(p);
        }
        obs.observe(k + 1, &w.state);
    }
    Ok(w.state.record(path))
}

/// One trajectory advanced interval by interval on a caller-chosen grid.
#[derive(Debug, Clone)]
pub struct Walker {
    pub state: TrajectoryState,
    tilt: bool,
    innovation: bool,
}

impl Walker {
    /// With `innovation`, call [`TrajectoryState::set_planted`] before advancing.
    pub fn new(m: &Arc<DiscreteMeasure>, policy: Policy, cfg: &EngineConfig, innovation: bool) -> Self {
        Self {
            state: TrajectoryState::from_arc(Arc::clone(m), policy, cfg),
            tilt: policy == Policy::Foellmer && cfg.foellmer == FoellmerIntegrator::Tilt,
            innovation,
        }
    }

    /// Plants `X* ~ µ` and returns an innovation-driven walker.
    pub fn planted<R: Rng + ?Sized>(m: &Arc<DiscreteMeasure>, policy: Policy, cfg: &EngineConfig, rng: &mut R) -> Self {
        let mut w = Self::new(m, policy, cfg, true);
        w.state.set_planted(sample_indices(m, rng, 1)[0]);
        w
    }

    /// Moves from `t0` to `t1`, either with the given Brownian increment or
    /// with noise drawn from `rng`.
    pub fn advance<R: Rng + ?Sized>(
        &mut self,
        t0: f64,
        t1: f64,
        given: Option<&[f64]>,
        rng: Option<&mut R>,
        path: Option<&mut PathRecord>,
    ) -> Result<()> {
        let s = &mut self.state;
        let d = s.dim();
        let dt = t1 - t0;
        let mut rng = rng;
        let db: Option<Vec<f64>> = match given {
            Some(db) => Some(db.to_vec()),
            None => {
                let r = rng.as_deref_mut().ok_or_else(|| Error::InvalidArgument("no noise source".into()))?;
                if self.innovation && self.tilt {
                    None
                } else if self.innovation && !s.collapsed {
                    Some(s.innovation_db(r, dt))
                } else {
                    Some(gauss_vec(r, d, dt.sqrt()))
                }
            }
        };
        if self.tilt {
            let (q0, q1) = (foellmer_quad_coeff(t0), foellmer_quad_coeff(t1));
            let mut theta = s.theta.clone();
            match &db {
                None => {
                    let dq = q1 - q0;
                    let xs = match s.planted {
                        Some(p) => s.measure.atom(p).to_vec(),
                        None => s.a.clone(),
                    };
                    let xi = gauss_vec(rng.expect("checked above"), d, dq.sqrt());
                    for j in 0..d {
                        theta[j] += xs[j] * dq + xi[j];
                    }
                }
                Some(db) => {
                    let c = 1.0 / (1.0 - t0);
                    for j in 0..d {
                        theta[j] += s.a[j] * c * c * dt + db[j] * c;
                    }
                }
            }
            if let (Some(p), Some(db)) = (path, db.as_ref()) {
                p.db.push(db.clone());
            }
            s.set_tilt(&theta, q1, t1)?;
        } else {
            let db = db.expect("step integrator always has an increment");
            if let Some(p) = path {
                p.db.push(db.clone());
                p.da_rhs.push(s.cov_increment_rhs(&db, dt));
            }
            if s.collapsed && s.policy == Policy::Foellmer {
                let c = 1.0 / (1.0 - t0);
                for j in 0..d {
                    s.theta[j] += s.a[j] * c * c * dt + db[j] * c;
                }
            }
            s.t = t0;
            s.advance(&db, dt)?;
            s.t = t1;
            if let Some(tau) = s.tau.as_mut() {
                if *tau > t0 {
                    *tau = t1;
                }
            }
        }
        Ok(())
    }
}

/// Runs until collapse. Projection/Capped step uniformly in `t`; Föllmer
/// follows the `u`-grid and declares `τ = 1` if still spread at `t_max`.
pub fn run_trajectory<R: Rng + ?Sized>(
    m: &DiscreteMeasure,
    policy: Policy,
    cfg: &EngineConfig,
    rng: &mut R,
) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    let arc = Arc::new(m.clone());
    match policy {
        Policy::Foellmer => {
            let mut c = cfg.clone();
            c.foellmer = FoellmerIntegrator::Step;
            foellmer_run(&arc, &c, Noise::Random(rng))
        }
        _ => run_uniform(&arc, policy, cfg, Noise::Random(rng)),
    }
}

/// Same as [`run_trajectory`] but driven by given Brownian increments.
pub fn run_trajectory_with_increments(
    m: &DiscreteMeasure,
    policy: Policy,
    cfg: &EngineConfig,
    dbs: &[Vec<f64>],
) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    let arc = Arc::new(m.clone());
    match policy {
        Policy::Foellmer => {
            let mut c = cfg.clone();
            c.foellmer = FoellmerIntegrator::Step;
            foellmer_run::<rand_chacha::ChaCha8Rng>(&arc, &c, Noise::Given(dbs))
        }
        _ => run_uniform::<rand_chacha::ChaCha8Rng>(&arc, policy, cfg, Noise::Given(dbs)),
    }
}

/// Föllmer policy with the exact Gaussian-tilt integrator.
pub fn run_foellmer_tilt<R: Rng + ?Sized>(
    m: &DiscreteMeasure,
    cfg: &EngineConfig,
    rng: &mut R,
) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    let mut c = cfg.clone();
    c.foellmer = FoellmerIntegrator::Tilt;
    foellmer_run(&Arc::new(m.clone()), &c, Noise::Random(rng))
}

/// Tilt integrator driven by given Brownian increments on the `u`-grid.
pub fn run_foellmer_tilt_with_increments(
    m: &DiscreteMeasure,
    cfg: &EngineConfig,
    dbs: &[Vec<f64>],
) -> Result<TrajectoryRecord> {
    cfg.validate()?;
    let mut c = cfg.clone();
    c.foellmer = FoellmerIntegrator::Tilt;
    foellmer_run::<rand_chacha::ChaCha8Rng>(&Arc::new(m.clone()), &c, Noise::Given(dbs))
}

fn foellmer_run<R: Rng + ?Sized>(
    m: &Arc<DiscreteMeasure>,
    cfg: &EngineConfig,
    noise: Noise<'_, R>,
) -> Result<TrajectoryRecord> {
    let grid = TimeGrid::foellmer(cfg.du, cfg.t_max);
    let mut rec = run_on_grid(m, Policy::Foellmer, cfg, &grid.times, noise, &mut (), false)?;
    if !rec.collapsed {
        let mut s = TrajectoryState::from_arc(Arc::clone(m), Policy::Foellmer, cfg);
        let j = m.nearest_atom(&rec.embedded_point);
        s.t = 1.0;
        s.snap(j);
        rec.tau = 1.0;
        rec.collapsed = true;
        rec.embedded_point = m.atom(j).to_vec();
        rec.atom_index = j;
    }
    Ok(rec)
}

fn run_uniform<R: Rng + ?Sized>(
    m: &Arc<DiscreteMeasure>,
    policy: Policy,
    cfg: &EngineConfig,
    mut noise: Noise<'_, R>,
) -> Result<TrajectoryRecord> {
    let dt = cfg.step_dt(m);
    let mut s = TrajectoryState::from_arc(Arc::clone(m), policy, cfg);
    let d = m.dim();
    let innovation = matches!(noise, Noise::Random(_)) && cfg.noise == NoiseMode::Innovation;
    if innovation {
        if let Noise::Random(rng) = &mut noise {
            s.set_planted(sample_indices(m, *rng, 1)[0]);
        }
    }
    let mut path = cfg.store_path.then(PathRecord::default);
    if let Some(p) = path.as_mut() {
        s.push_path(p);
    }
    let mut k = 0usize;
    while !s.collapsed {
        if k >= cfg.max_steps {
            return Err(Error::NoCollapse { steps: k, t: s.t });
        }
        let db = match &mut noise {
            Noise::Given(v) => match v.get(k) {
                Some(db) => db.clone(),
                None => return Err(Error::NoCollapse { steps: k, t: s.t }),
            },
            Noise::Random(rng) => {
                if innovation {
                    s.innovation_db(*rng, dt)
                } else {
                    gauss_vec(*rng, d, dt.sqrt())
                }
            }
        };
        if let Some(p) = path.as_mut() {
            p.db.push(db.clone());
            p.da_rhs.push(s.cov_increment_rhs(&db, dt));
        }
        s.t = k as f64 * dt;
        s.advance(&db, dt)?;
        s.t = (k + 1) as f64 * dt;
        if let Some(tau) = s.tau.as_mut() {
            *tau = s.t;
        }
        if let Some(p) = path.as_mut() {
            s.push_path(p);
        }
        k += 1;
    }
    Ok(s.record(path))
}

/// Mean over steps of `‖(A_{t+dt} − A_t) − (∫(x−a)^{⊗3}µ_t C dB − A C² A dt)‖_HS`,
/// skipping the collapse step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DAtResidual {
    pub mean: f64,
    pub max: f64,
    pub steps: usize,
}

pub fn dat_residual(record: &TrajectoryRecord) -> Result<DAtResidual> {
    let p = record.path.as_ref().ok_or(Error::MissingPath)?;
    if p.da_rhs.is_empty() && p.cov.len() > 1 {
        return Err(Error::MissingPath);
    }
    let (mut sum, mut mx, mut n) = (0.0, 0.0_f64, 0usize);
    for k in 0..p.da_rhs.len() {
        if p.collapsed[k] || p.collapsed[k + 1] {
            continue;
        }
        let r = p.cov[k + 1].sub(&p.cov[k]).sub(&p.da_rhs[k]).hs_norm();
        sum += r;
        mx = mx.max(r);
        n += 1;
    }
    Ok(DAtResidual { mean: if n > 0 { sum / n as f64 } else { 0.0 }, max: mx, steps: n })
}

/// Monte Carlo moments of `Γ_t` on a fixed grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MomentGrid {
    pub policy: Policy,
    pub dim: usize,
    pub times: Vec<f64>,
    pub n_traj: usize,
    pub mean_gamma: Vec<SymMatrix>,
    pub mean_gamma2: Vec<SymMatrix>,
    pub mean_gamma4: Vec<SymMatrix>,
    /// Entrywise standard errors (column-major).
    pub se_gamma: Vec<Vec<f64>>,
    pub se_gamma2: Vec<Vec<f64>>,
    pub se_gamma4: Vec<Vec<f64>>,
    /// Standard errors of the traces.
    pub se_tr_gamma: Vec<f64>,
    pub se_tr_gamma2: Vec<f64>,
    pub se_tr_gamma4: Vec<f64>,
    /// `λ_min(E[Γ_t])`.
    pub sigma: Vec<f64>,
    /// `E[A_t]`.
    pub mean_cov: Vec<SymMatrix>,
    /// Per interval `[t_k, t_{k+1}]`: mean and entrywise standard error of
    /// `(A_{k+1} − A_k − M_k)/h + ½(Γ_k² + Γ_{k+1}²)`, where `M_k` is the
    /// conditionally centered martingale part of the step.
    pub cov_drift_mean: Vec<Vec<f64>>,
    pub cov_drift_se: Vec<Vec<f64>>,
    /// Step size the grid was built from (`dt` or `du`).
    pub step: f64,
}

/// Monte Carlo `E‖v_t‖²` on a Föllmer grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftGrid {
    pub times: Vec<f64>,
    pub mean_v2: Vec<f64>,
    pub se_v2: Vec<f64>,
    pub n_traj: usize,
}

struct Acc {
    d: usize,
    w: usize,
    data: Vec<f64>,
}

// Layout per grid point: g, g2, g4, a, dk (d² each) then squares of g, g2, g4, dk
// (d² each) then 8 scalars: tr g, tr g², tr g2, tr g2², tr g4, tr g4², v2, v2².
impl Acc {
    fn new(d: usize, k: usize) -> Self {
        let w = 9 * d * d + 8;
        Self { d, w, data: vec![0.0; w * k] }
    }

    fn slot(&mut self, k: usize) -> &mut [f64] {
        &mut self.data[k * self.w..(k + 1) * self.w]
    }

    fn merge(&mut self, other: &Acc) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

struct MomentObserver<'a> {
    acc: &'a mut Acc,
    g2: Vec<f64>,
    g4: Vec<f64>,
    prev_a: Vec<f64>,
    prev_g2: Vec<f64>,
    prev_t3: Vec<f64>,
    prev_theta: Vec<f64>,
    prev_q: Vec<f64>,
    prev_mean: Vec<f64>,
    prev_t: f64,
    track_v: bool,
    done: bool,
}

impl Observer for MomentObserver<'_> {
    fn observe(&mut self, k: usize, s: &TrajectoryState) {
        let d = self.acc.d;
        let dd = d * d;
        let t = s.t;
        let alive = !s.collapsed;
        if alive {
            s.gamma_power_into(2, &mut self.g2);
            s.gamma_power_into(4, &mut self.g4);
        } else {
            self.g2.iter_mut().for_each(|x| *x = 0.0);
            self.g4.iter_mut().for_each(|x| *x = 0.0);
        }
        let g = s.gamma_slice();
        let a = s.cov_slice();
        let v2 = if self.track_v && t < 1.0 {
            s.mean()
                .iter()
                .zip(s.theta())
                .map(|(ai, th)| {
                    let v = ai / (1.0 - t) - th;
                    v * v
                })
                .sum::<f64>()
        } else {
            0.0
        };
        let (g2, g4) = (&self.g2, &self.g4);
        let prev_live = !self.done;
        let slot = self.acc.slot(k);
        if alive {
            for i in 0..dd {
                slot[i] += g[i];
                slot[dd + i] += g2[i];
                slot[2 * dd + i] += g4[i];
                slot[3 * dd + i] += a[i];
                slot[5 * dd + i] += g[i] * g[i];
                slot[6 * dd + i] += g2[i] * g2[i];
                slot[7 * dd + i] += g4[i] * g4[i];
            }
            let tr = |m: &[f64]| (0..d).map(|j| m[j * (d + 1)]).sum::<f64>();
            let (t1, t2, t4) = (tr(g), tr(g2), tr(g4));
            let b = 9 * dd;
            slot[b] += t1;
            slot[b + 1] += t1 * t1;
            slot[b + 2] += t2;
            slot[b + 3] += t2 * t2;
            slot[b + 4] += t4;
            slot[b + 5] += t4 * t4;
        }
        let b = 9 * dd;
        slot[b + 6] += v2;
        slot[b + 7] += v2 * v2;
        if k > 0 && prev_live {
            let h = t - self.prev_t;
            // martingale part of the step, ⟨T₃, C ΔB⟩ with C ΔB = Δθ − ΔQ a
            let th = s.theta();
            let q = s.quad_tilt();
            let mut u = vec![0.0; d];
            for j in 0..d {
                u[j] = th[j] - self.prev_theta[j];
                for l in 0..d {
                    u[j] -= (q[j + l * d] - self.prev_q[j + l * d]) * self.prev_mean[l];
                }
            }
            let prev = &mut self.acc.data[(k - 1) * self.acc.w..k * self.acc.w];
            for i in 0..dd {
                let mart: f64 = (0..d).map(|l| self.prev_t3[i + dd * l] * u[l]).sum();
                let ai = if alive { a[i] } else { 0.0 };
                let dk = (ai - self.prev_a[i] - mart) / h + 0.5 * (self.prev_g2[i] + g2[i]);
                prev[4 * dd + i] += dk;
                prev[8 * dd + i] += dk * dk;
            }
        }
        if alive {
            self.prev_a.copy_from_slice(a);
            self.prev_g2.copy_from_slice(g2);
            s.third_moment_into(&mut self.prev_t3);
            self.prev_theta.copy_from_slice(s.theta());
            self.prev_q.copy_from_slice(s.quad_tilt());
            self.prev_mean.copy_from_slice(s.mean());
        } else {
            self.done = true;
        }
        self.prev_t = t;
    }
}

/// Joint Monte Carlo pass producing the moment grid and, for the Föllmer
/// policy, the drift grid.
pub fn gamma_and_drift_moments<R: Rng + ?Sized>(
    m: &DiscreteMeasure,
    policy: Policy,
    cfg: &EngineConfig,
    grid: &TimeGrid,
    n_traj: usize,
    rng: &mut R,
) -> Result<(MomentGrid, Option<DriftGrid>)> {
    cfg.validate()?;
    if n_traj < 100 {
        return Err(Error::InvalidArgument("n_traj must be at least 100".into()));
    }
    if grid.len() < 2 || grid.times[0] != 0.0 || grid.times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::GridMismatch("grid must start at 0 and increase".into()));
    }
    if policy == Policy::Foellmer && grid.end() >= 1.0 {
        return Err(Error::GridMismatch("Föllmer grid must end before t = 1".into()));
    }
    let d = m.dim();
    let kpts = grid.len();
    let seed = child_seed(rng);
    let arc = Arc::new(m.clone());
    let track_v = policy == Policy::Foellmer;
    let n_chunks = n_traj.div_ceil(MERGE_CHUNK);
    let batch = rayon::current_num_threads().max(1) * 2;
    let mut total = Acc::new(d, kpts);
    let mut c0 = 0;
    while c0 < n_chunks {
        let c1 = (c0 + batch).min(n_chunks);
        let parts: Vec<Result<Acc>> = (c0..c1)
            .into_par_iter()
            .map(|c| {
                let mut acc = Acc::new(d, kpts);
                for j in (c * MERGE_CHUNK)..((c + 1) * MERGE_CHUNK).min(n_traj) {
                    let mut r = stream(seed, j as u64);
                    let mut obs = MomentObserver {
                        acc: &mut acc,
                        g2: vec![0.0; d * d],
                        g4: vec![0.0; d * d],
                        prev_a: vec![0.0; d * d],
                        prev_g2: vec![0.0; d * d],
                        prev_t3: vec![0.0; d * d * d],
                        prev_theta: vec![0.0; d],
                        prev_q: vec![0.0; d * d],
                        prev_mean: vec![0.0; d],
                        prev_t: 0.0,
                        track_v,
                        done: false,
                    };
                    run_on_grid(&arc, policy, cfg, &grid.times, Noise::Random(&mut r), &mut obs, track_v)?;
                }
                Ok(acc)
            })
            .collect();
        for p in parts {
            total.merge(&p?);
        }
        c0 = c1;
    }
    Ok(finish_moments(total, policy, grid, n_traj, cfg, track_v))
}

fn finish_moments(
    acc: Acc,
    policy: Policy,
    grid: &TimeGrid,
    n: usize,
    cfg: &EngineConfig,
    track_v: bool,
) -> (MomentGrid, Option<DriftGrid>) {
    let d = acc.d;
    let dd = d * d;
    let nf = n as f64;
    let mean_se = |s: f64, ss: f64| {
        let mu = s / nf;
        let var = (ss / nf - mu * mu).max(0.0) * nf / (nf - 1.0);
        (mu, (var / nf).sqrt())
    };
    let mut mg = MomentGrid {
        policy,
        dim: d,
        times: grid.times.clone(),
        n_traj: n,
        mean_gamma: vec![],
        mean_gamma2: vec![],
        mean_gamma4: vec![],
        se_gamma: vec![],
        se_gamma2: vec![],
        se_gamma4: vec![],
        se_tr_gamma: vec![],
        se_tr_gamma2: vec![],
        se_tr_gamma4: vec![],
        sigma: vec![],
        mean_cov: vec![],
        cov_drift_mean: vec![],
        cov_drift_se: vec![],
        step: match policy {
            Policy::Foellmer => cfg.du,
            _ => grid.times.get(1).copied().unwrap_or(0.0),
        },
    };
    let mut dg = DriftGrid { times: grid.times.clone(), mean_v2: vec![], se_v2: vec![], n_traj: n };
    for k in 0..grid.len() {
        let s = &acc.data[k * acc.w..(k + 1) * acc.w];
        let block = |off: usize, sq: Option<usize>| {
            let mut mean = vec![0.0; dd];
            let mut se = vec![0.0; dd];
            for i in 0..dd {
                let (mu, e) = mean_se(s[off + i], sq.map_or(0.0, |q| s[q + i]));
                mean[i] = mu;
                se[i] = if sq.is_some() { e } else { 0.0 };
            }
            (SymMatrix::from_col_major(d, mean), se)
        };
        let (g, seg) = block(0, Some(5 * dd));
        let (g2, seg2) = block(dd, Some(6 * dd));
        let (g4, seg4) = block(2 * dd, Some(7 * dd));
        let (a, _) = block(3 * dd, None);
        let sig = g.eig().min().max(0.0);
        mg.sigma.push(sig);
        mg.mean_gamma.push(g);
        mg.mean_gamma2.push(g2);
        mg.mean_gamma4.push(g4);
        mg.se_gamma.push(seg);
        mg.se_gamma2.push(seg2);
        mg.se_gamma4.push(seg4);
        mg.mean_cov.push(a);
        let b = 9 * dd;
        mg.se_tr_gamma.push(mean_se(s[b], s[b + 1]).1);
        mg.se_tr_gamma2.push(mean_se(s[b + 2], s[b + 3]).1);
        mg.se_tr_gamma4.push(mean_se(s[b + 4], s[b + 5]).1);
        let (v, sv) = mean_se(s[b + 6], s[b + 7]);
        dg.mean_v2.push(v);
        dg.se_v2.push(sv);
        if k + 1 < grid.len() {
            let mut mu = vec![0.0; dd];
            let mut se = vec![0.0; dd];
            for i in 0..dd {
                let (a, b) = mean_se(s[4 * dd + i], s[8 * dd + i]);
                mu[i] = a;
                se[i] = b;
            }
            mg.cov_drift_mean.push(mu);
            mg.cov_drift_se.push(se);
        }
    }
    (mg, track_v.then_some(dg))
}

/// Monte Carlo `E[Γ_t]`, `E[Γ_t²]`, `E[Γ_t⁴]` with `Γ = 0` after `τ`.
pub fn gamma_moments<R: Rng + ?Sized>(
    m: &DiscreteMeasure,
    policy: Policy,
    cfg: &EngineConfig,
    grid: &TimeGrid,
    n_traj: usize,
    rng: &mut R,
) -> Result<MomentGrid> {
    gamma_and_drift_moments(m, policy, cfg, grid, n_traj, rng).map(|r| r.0)
}

impl MomentGrid {
    /// Grid from given moment curves with zero standard errors.
    pub fn from_curves(
        policy: Policy,
        times: Vec<f64>,
        gamma: Vec<SymMatrix>,
        gamma2: Vec<SymMatrix>,
        gamma4: Vec<SymMatrix>,
    ) -> Result<Self> {
        let k = times.len();
        if gamma.len() != k || gamma2.len() != k || gamma4.len() != k || k < 2 {
            return Err(Error::SizeMismatch(k, gamma2.len()));
        }
        let d = gamma2[0].dim();
        let sigma = gamma.iter().map(|g| g.eig().min().max(0.0)).collect();
        let step = times[1] - times[0];
        Ok(Self {
            policy,
            dim: d,
            n_traj: 0,
            mean_cov: vec![SymMatrix::zeros(d); k],
            se_gamma: vec![vec![0.0; d * d]; k],
            se_gamma2: vec![vec![0.0; d * d]; k],
            se_gamma4: vec![vec![0.0; d * d]; k],
            se_tr_gamma: vec![0.0; k],
            se_tr_gamma2: vec![0.0; k],
            se_tr_gamma4: vec![0.0; k],
            cov_drift_mean: vec![vec![0.0; d * d]; k - 1],
            cov_drift_se: vec![vec![0.0; d * d]; k - 1],
            mean_gamma: gamma,
            mean_gamma2: gamma2,
            mean_gamma4: gamma4,
            sigma,
            times,
            step,
        })
    }

    /// One row per grid time.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "t,Tr_E_Gamma,Tr_E_Gamma2,Tr_E_Gamma4,sigma_t,se_Tr_Gamma,se_Tr_Gamma2,se_Tr_Gamma4,Tr_E_A\n",
        );
        for k in 0..self.times.len() {
            let row = [
                self.times[k],
                self.mean_gamma[k].trace(),
                self.mean_gamma2[k].trace(),
                self.mean_gamma4[k].trace(),
                self.sigma[k],
                self.se_tr_gamma[k],
                self.se_tr_gamma2[k],
                self.se_tr_gamma4[k],
                self.mean_cov[k].trace(),
            ];
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    /// `E Tr((Γ² − E[Γ²])²) = Tr E[Γ⁴] − Tr(E[Γ²]²)`, clamped at 0.
    pub fn gamma2_variance(&self) -> Vec<f64> {
        self.mean_gamma4
            .iter()
            .zip(&self.mean_gamma2)
            .map(|(g4, g2)| (g4.trace() - g2.square().trace()).max(0.0))
            .collect()
    }

    /// Smallest slack of the Jensen check `E[Γ²] − E[Γ]² + 3·se ⪰ 0`.
    pub fn jensen_slack(&self) -> f64 {
        let mut worst = f64::INFINITY;
        for k in 0..self.times.len() {
            let diff = self.mean_gamma2[k].sub(&self.mean_gamma[k].square());
            let tol = 3.0 * (self.se_tr_gamma2[k] + 2.0 * self.se_tr_gamma[k]);
            worst = worst.min(diff.eig().min() + tol);
        }
        worst
    }
}

/// Runs `n` trajectories in parallel with indexed streams.
pub fn run_many<R: Rng + ?Sized>(
    m: &DiscreteMeasure,
    policy: Policy,
    cfg: &EngineConfig,
    n: usize,
    rng: &mut R,
) -> Result<Vec<TrajectoryRecord>> {
    let seed = child_seed(rng);
    let tilt = policy == Policy::Foellmer && cfg.foellmer == FoellmerIntegrator::Tilt;
    (0..n)
        .into_par_iter()
        .map(|j| {
            let mut r = stream(seed, j as u64);
            if tilt {
                run_foellmer_tilt(m, cfg, &mut r)
            } else {
                run_trajectory(m, policy, cfg, &mut r)
            }
        })
        .collect()
}
