//! Relative entropy of sums to Gaussians: a Föllmer-drift estimator, an FFT
//! oracle for product laws, and evaluators for the entropic bounds.

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::engine::{gamma_and_drift_moments, DriftGrid, EngineConfig, MomentGrid, Policy, TimeGrid};
use crate::measure::{moments, DiscreteMeasure, Density1d, MeasureKind};
use crate::psd::SymMatrix;
use crate::{Error, Result};
use rand::Rng;

/// Smallest FFT grid accepted by the oracle.
pub const MIN_FFT_POINTS: usize = 1 << 14;
pub const DEFAULT_FFT_POINTS: usize = 1 << 15;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum EntropyMethod {
    Variational,
    FftOracle,
    ClosedForm,
}

/// Gaussian the entropy is taken against.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Reference {
    /// `N(0, I)`.
    Standard,
    /// `N(0, σ² I)` with σ² the per-coordinate variance passed by the caller.
    Matched { variance: f64 },
}

impl Reference {
    pub fn tag(&self) -> String {
        match self {
            Reference::Standard => "standard".into(),
            Reference::Matched { variance } => format!("matched(var={variance:.6})"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntropyEstimate {
    pub value: f64,
    /// Value before clamping at 0.
    pub raw_value: f64,
    /// Half width of the reported interval (95% for Monte Carlo, the grid
    /// doubling difference for the oracle).
    pub ci: f64,
    pub method: EntropyMethod,
    pub reference: Reference,
    /// Estimated contribution of `(t_max, 1)`; zero for the other methods.
    pub truncation_tail: f64,
}

impl EntropyEstimate {
    fn new(raw: f64, ci: f64, method: EntropyMethod, reference: Reference, tail: f64) -> Self {
        Self { value: raw.max(0.0), raw_value: raw, ci, method, reference, truncation_tail: tail }
    }

    /// Same estimate for the `d`-fold product.
    pub fn tensorized(&self, d: usize) -> Self {
        let k = d as f64;
        Self { value: k * self.value, raw_value: k * self.raw_value, ci: k * self.ci, ..self.clone() }
    }
}

/// `Ent(N(0, Σ) ‖ N(0, I))`.
pub fn gaussian_entropy_closed_form(sigma: &SymMatrix) -> Result<EntropyEstimate> {
    let e = sigma.eig();
    if e.min() <= 0.0 {
        return Err(Error::SingularCovariance { min_eig: e.min() });
    }
    let v: f64 = e.values.iter().map(|l| 0.5 * (l - 1.0 - l.ln())).sum();
    Ok(EntropyEstimate::new(v, 0.0, EntropyMethod::ClosedForm, Reference::Standard, 0.0))
}

/// Output of the variational estimator, with the moment grids it was
/// computed from.
#[derive(Debug, Clone)]
pub struct VariationalRun {
    pub estimate: EntropyEstimate,
    pub drift: DriftGrid,
    pub moments: MomentGrid,
}

/// `Ent(µ ‖ γ) = ½ ∫₀¹ E‖v_t‖² dt` along the Föllmer process of `m`.
///
/// Discrete measures have infinite entropy; they are only accepted with
/// `particle_ack`, in which case the answer depends on the grid.
pub fn estimate_entropy_variational<R: Rng + ?Sized>(
    m: &DiscreteMeasure,
    cfg: &EngineConfig,
    n_traj: usize,
    particle_ack: bool,
    rng: &mut R,
) -> Result<VariationalRun> {
    if m.kind() == MeasureKind::Discrete && !particle_ack {
        return Err(Error::DiscreteInput);
    }
    let mo = moments(m);
    if mo.mean.iter().any(|x| x.abs() > 1e-8) {
        return Err(Error::InvalidArgument("measure must be centered".into()));
    }
    let grid = TimeGrid::foellmer(cfg.du, cfg.t_max);
    let (mg, dg) = gamma_and_drift_moments(m, Policy::Foellmer, cfg, &grid, n_traj, rng)?;
    let dg = dg.expect("Föllmer runs track the drift");
    // ∫ f dt = ∫ f (1 − t) du on the u-grid
    let t = &dg.times;
    let mut integral = 0.0;
    let mut se = 0.0;
    for k in 0..t.len() - 1 {
        let du = (1.0 - t[k]).ln() - (1.0 - t[k + 1]).ln();
        integral += 0.5 * du * (dg.mean_v2[k] * (1.0 - t[k]) + dg.mean_v2[k + 1] * (1.0 - t[k + 1]));
        se += 0.5 * du * (dg.se_v2[k] * (1.0 - t[k]) + dg.se_v2[k + 1] * (1.0 - t[k + 1]));
    }
    let last = t.len() - 1;
    let tail = 0.5 * dg.mean_v2[last] * (1.0 - t[last]);
    let est = EntropyEstimate::new(0.5 * integral, 1.96 * 0.5 * se, EntropyMethod::Variational, Reference::Standard, tail);
    Ok(VariationalRun { estimate: est, drift: dg, moments: mg })
}

/// Half width of the oracle's grid for the unnormalized sum of `n` draws.
pub fn default_fft_window(f: &Density1d, n: usize) -> f64 {
    let nf = n as f64;
    16.0 * f.variance().sqrt() * nf.sqrt() + nf * f.mean().abs()
}

fn fft_entropy(f: &Density1d, n: usize, var_ref: f64, pts: usize, half: f64) -> Result<f64> {
    let nf = n as f64;
    let h = 2.0 * half / pts as f64;
    let mut buf = vec![Complex::new(0.0, 0.0); pts];
    let hp = (pts / 2) as i64;
    for k in -hp..hp {
        buf[k.rem_euclid(pts as i64) as usize] = Complex::new(f.pdf(k as f64 * h) * h, 0.0);
    }
    let mut planner = FftPlanner::<f64>::new();
    planner.plan_fft_forward(pts).process(&mut buf);
    for z in buf.iter_mut() {
        *z = z.powi(n as i32);
    }
    planner.plan_fft_inverse(pts).process(&mut buf);
    let mass: Vec<f64> = buf.iter().map(|z| z.re / pts as f64).collect();
    let total: f64 = mass.iter().filter(|&&p| p > 0.0).sum();
    let band = pts / 32;
    let edge: f64 = (0..pts)
        .filter(|&i| {
            let k = if i < pts / 2 { i } else { pts - i };
            k + band >= pts / 2
        })
        .map(|i| mass[i].abs())
        .sum();
    if edge > 1e-10 {
        return Err(Error::Aliasing { mass: edge });
    }
    let var_t = nf * var_ref;
    let ln_norm = -0.5 * (2.0 * std::f64::consts::PI * var_t).ln();
    let mut ent = 0.0;
    for (i, &p) in mass.iter().enumerate() {
        if p <= 0.0 {
            continue;
        }
        let k = if i < pts / 2 { i as f64 } else { i as f64 - pts as f64 };
        let x = k * h;
        let p = p / total;
        let ln_q = ln_norm - 0.5 * x * x / var_t;
        ent += p * ((p / h).ln() - ln_q);
    }
    Ok(ent)
}

/// `Ent(S_n ‖ N(0, σ_ref²))` for `S_n` the normalized sum of `n` iid draws
/// from `f`, by FFT self-convolution. The reported interval is the change
/// under grid doubling.
pub fn entropy_oracle_product_fft(f: &Density1d, n: usize, sigma_ref: f64, grid_size: usize) -> Result<EntropyEstimate> {
    entropy_oracle_windowed(f, n, sigma_ref, grid_size, default_fft_window(f, n.max(1)))
}

/// As [`entropy_oracle_product_fft`] on the grid `[−half, half)` for the
/// unnormalized sum.
pub fn entropy_oracle_windowed(
    f: &Density1d,
    n: usize,
    sigma_ref: f64,
    grid_size: usize,
    half: f64,
) -> Result<EntropyEstimate> {
    if n == 0 || !(sigma_ref > 0.0) {
        return Err(Error::InvalidArgument("need n >= 1 and sigma_ref > 0".into()));
    }
    if grid_size < MIN_FFT_POINTS || !grid_size.is_power_of_two() {
        return Err(Error::InvalidArgument(format!("grid size must be a power of two >= {MIN_FFT_POINTS}")));
    }
    let var_ref = sigma_ref * sigma_ref;
    let coarse = fft_entropy(f, n, var_ref, grid_size, half)?;
    let fine = fft_entropy(f, n, var_ref, 2 * grid_size, half)?;
    let err = (fine - coarse).abs();
    if err > 0.01 * fine.abs() + 1e-9 {
        return Err(Error::GridTooCoarse(format!("grid doubling moved the value by {err:e}")));
    }
    let reference = if (var_ref - 1.0).abs() < 1e-15 { Reference::Standard } else { Reference::Matched { variance: var_ref } };
    Ok(EntropyEstimate::new(fine, err, EntropyMethod::FftOracle, reference, 0.0))
}

/// The oracle over several `n` in parallel.
pub fn entropy_oracle_sweep(f: &Density1d, ns: &[usize], sigma_ref: f64, grid_size: usize) -> Vec<Result<EntropyEstimate>> {
    ns.par_iter().map(|&n| entropy_oracle_product_fft(f, n, sigma_ref, grid_size)).collect()
}

/// First entropic bound:
/// `(1/n) ∫ V_t / ((1−t)² σ_t²) (∫_t^1 σ_s^{−2} ds) dt`
/// with `V_t = E Tr((Γ_t² − E Γ_t²)²)`. Past the last grid point `σ` is
/// frozen at its final value.
pub fn quant_entropy_bound_first(mg: &MomentGrid, variance_grid: &[f64], n: usize) -> Result<f64> {
    let t = &mg.times;
    let k = t.len();
    if variance_grid.len() != k {
        return Err(Error::GridMismatch(format!("{} variance values for {k} times", variance_grid.len())));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("n must be positive".into()));
    }
    if let Some(j) = mg.sigma.iter().position(|&s| !(s > 0.0)) {
        return Err(Error::ZeroSigma { t: t[j] });
    }
    let inv2: Vec<f64> = mg.sigma.iter().map(|s| 1.0 / (s * s)).collect();
    let mut inner = vec![0.0; k];
    inner[k - 1] = (1.0 - t[k - 1]) * inv2[k - 1];
    for j in (0..k - 1).rev() {
        inner[j] = inner[j + 1] + 0.5 * (t[j + 1] - t[j]) * (inv2[j] + inv2[j + 1]);
    }
    let g: Vec<f64> = (0..k)
        .map(|j| variance_grid[j].max(0.0) * inv2[j] / (1.0 - t[j]).powi(2) * inner[j])
        .collect();
    let mut outer: f64 = (0..k - 1).map(|j| 0.5 * (t[j + 1] - t[j]) * (g[j] + g[j + 1])).sum();
    outer += (1.0 - t[k - 1]) * g[k - 1];
    Ok(outer / n as f64)
}

/// `2(d + 2 Ent(X‖γ)) / (σ⁴ n)` with `σ` a lower bound on the covariance.
pub fn strong_logconcave_bound(d: usize, sigma: f64, ent_x: f64, n: usize) -> Result<f64> {
    if !(sigma > 0.0) || n == 0 {
        return Err(Error::InvalidArgument("need sigma > 0 and n >= 1".into()));
    }
    Ok(2.0 * (d as f64 + 2.0 * ent_x) / (sigma.powi(4) * n as f64))
}

/// A residual at one time with its standard error.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ResidualPoint {
    pub t: f64,
    pub residual: f64,
    pub se: f64,
}

/// Fraction of points with `|residual| ≤ k · se`.
pub fn fraction_within(points: &[ResidualPoint], k: f64) -> f64 {
    if points.is_empty() {
        return 1.0;
    }
    points.iter().filter(|p| p.residual.abs() <= k * p.se).count() as f64 / points.len() as f64
}

/// `E Tr Γ_t − (d − (1−t)(d − Tr Σ + E‖v_t‖²))` on a Föllmer grid.
pub fn gamma_representation_residual(mg: &MomentGrid, dg: &DriftGrid, sigma: &SymMatrix) -> Result<Vec<ResidualPoint>> {
    if mg.times != dg.times {
        return Err(Error::GridMismatch("moment and drift grids differ".into()));
    }
    if sigma.dim() != mg.dim {
        return Err(Error::DimensionMismatch { expected: mg.dim, got: sigma.dim() });
    }
    let d = mg.dim as f64;
    let tr = sigma.trace();
    Ok((0..mg.times.len())
        .map(|k| {
            let t = mg.times[k];
            let rhs = d - (1.0 - t) * (d - tr + dg.mean_v2[k]);
            let se = (mg.se_tr_gamma[k].powi(2) + ((1.0 - t) * dg.se_v2[k]).powi(2)).sqrt();
            ResidualPoint { t, residual: mg.mean_gamma[k].trace() - rhs, se }
        })
        .collect())
}

/// Per interval, the Hilbert–Schmidt norm of
/// `(E A_{k+1} − E A_k)/h + ½(E Γ_k² + E Γ_{k+1}²)`, paired per path.
/// Rejects grids where, while `E[A]` is above 1% of its initial size, one
/// step moves it by more than half.
pub fn cov_derivative_residual(mg: &MomentGrid) -> Result<Vec<ResidualPoint>> {
    let t = &mg.times;
    if mg.cov_drift_mean.len() + 1 != t.len() {
        return Err(Error::GridMismatch("drift table does not match the grid".into()));
    }
    let a0 = mg.mean_cov[0].hs_norm();
    for k in 0..t.len() - 1 {
        let a = mg.mean_cov[k].hs_norm();
        let jump = mg.mean_cov[k + 1].sub(&mg.mean_cov[k]).hs_norm();
        if a > 0.01 * a0 && jump > 0.5 * a {
            return Err(Error::GridTooCoarse(format!("E[A] moves by {jump:e} over one step at t = {}", t[k])));
        }
    }
    Ok((0..t.len() - 1)
        .map(|k| {
            let r: f64 = mg.cov_drift_mean[k].iter().map(|x| x * x).sum::<f64>().sqrt();
            let se: f64 = mg.cov_drift_se[k].iter().map(|x| x * x).sum::<f64>().sqrt();
            ResidualPoint { t: t[k], residual: r, se }
        })
        .collect())
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Drift grid as CSV (`t,E_v2,se_v2`).
pub fn drift_csv(dg: &DriftGrid) -> String {
    let mut s = String::from("t,E_v2,se_v2\n");
    for k in 0..dg.times.len() {
        s.push_str(&format!("{:.16e},{:.16e},{:.16e}\n", dg.times[k], dg.mean_v2[k], dg.se_v2[k]));
    }
    s
}
