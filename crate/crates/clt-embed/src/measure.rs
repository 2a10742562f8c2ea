//! Finitely supported measures, the test-measure generators, and 1-d
//! log-concave densities used to build particle clouds.

use crate::error::{Error, Result};
use crate::psd::SymMatrix;
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashMap;

/// Default cap on the number of lattice points.
pub const DEFAULT_ATOM_CAP: usize = 200_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeasureKind {
    /// A genuinely discrete law.
    Discrete,
    /// An equal-weight particle approximation of an absolutely continuous law.
    ParticleCloud,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DiscreteMeasure {
    dim: usize,
    atoms: Vec<f64>,
    weights: Vec<f64>,
    log_weights: Vec<f64>,
    kind: MeasureKind,
    density: Option<Density1d>,
}

/// On-disk form: `{dim, atoms: [[..]], weights: [..]}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasureDoc {
    pub dim: usize,
    pub atoms: Vec<Vec<f64>>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MeasureMoments {
    pub mean: Vec<f64>,
    pub cov: SymMatrix,
    pub radius: f64,
}

fn canon_bits(x: f64) -> u64 {
    if x == 0.0 {
        0
    } else {
        x.to_bits()
    }
}

impl DiscreteMeasure {
    /// Builds a measure from rows of atoms. Duplicates are merged and the
    /// weights renormalized.
    pub fn new(dim: usize, atoms: &[Vec<f64>], weights: &[f64]) -> Result<Self> {
        if atoms.iter().any(|a| a.len() != dim) {
            return Err(Error::InvalidMeasure("atom length differs from dim".into()));
        }
        let flat: Vec<f64> = atoms.iter().flatten().copied().collect();
        Self::from_flat(dim, flat, weights.to_vec(), MeasureKind::Discrete)
    }

    pub fn uniform(dim: usize, atoms: &[Vec<f64>]) -> Result<Self> {
        let w = vec![1.0 / atoms.len().max(1) as f64; atoms.len()];
        Self::new(dim, atoms, &w)
    }

    pub fn point_mass(x: &[f64]) -> Self {
        Self::new(x.len(), &[x.to_vec()], &[1.0]).expect("finite point mass")
    }

    pub(crate) fn from_flat(
        dim: usize,
        atoms: Vec<f64>,
        weights: Vec<f64>,
        kind: MeasureKind,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidMeasure("dim must be positive".into()));
        }
        if atoms.len() != dim * weights.len() || weights.is_empty() {
            return Err(Error::InvalidMeasure("atoms and weights differ in length".into()));
        }
        if atoms.iter().chain(&weights).any(|x| !x.is_finite()) {
            return Err(Error::InvalidMeasure("non-finite entry".into()));
        }
        if weights.iter().any(|&w| w < 0.0) {
            return Err(Error::InvalidMeasure("negative weight".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidMeasure("weights sum to zero".into()));
        }
        let mut index: HashMap<Vec<u64>, usize> = HashMap::with_capacity(weights.len());
        let mut out_atoms = Vec::with_capacity(atoms.len());
        let mut out_w: Vec<f64> = Vec::with_capacity(weights.len());
        for (i, &w) in weights.iter().enumerate() {
            let x = &atoms[i * dim..(i + 1) * dim];
            let key: Vec<u64> = x.iter().map(|&v| canon_bits(v)).collect();
            match index.get(&key) {
                Some(&j) => out_w[j] += w,
                None => {
                    index.insert(key, out_w.len());
                    out_atoms.extend(x.iter().map(|&v| if v == 0.0 { 0.0 } else { v }));
                    out_w.push(w);
                }
            }
        }
        let total: f64 = out_w.iter().sum();
        out_w.iter_mut().for_each(|w| *w /= total);
        let log_weights = out_w.iter().map(|w| w.ln()).collect();
        Ok(Self { dim, atoms: out_atoms, weights: out_w, log_weights, kind, density: None })
    }

    pub fn from_doc(doc: &MeasureDoc) -> Result<Self> {
        Self::new(doc.dim, &doc.atoms, &doc.weights)
    }

    pub fn to_doc(&self) -> MeasureDoc {
        MeasureDoc {
            dim: self.dim,
            atoms: (0..self.len()).map(|i| self.atom(i).to_vec()).collect(),
            weights: self.weights.clone(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.dim..(i + 1) * self.dim]
    }

    pub fn atoms_flat(&self) -> &[f64] {
        &self.atoms
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    pub fn kind(&self) -> MeasureKind {
        self.kind
    }

    /// The 1-d density whose product generated this cloud, if any.
    pub fn density(&self) -> Option<&Density1d> {
        self.density.as_ref()
    }

    /// Translates all atoms by `-mean`.
    pub fn centered(&self) -> Self {
        let mean = moments(self).mean;
        let mut out = self.clone();
        for i in 0..self.len() {
            for k in 0..self.dim {
                out.atoms[i * self.dim + k] -= mean[k];
            }
        }
        out
    }

    /// Index of the atom nearest to `x`.
    pub fn nearest_atom(&self, x: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for i in 0..self.len() {
            let d2: f64 = self.atom(i).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum();
            if d2 < best.0 {
                best = (d2, i);
            }
        }
        best.1
    }
}

pub fn moments(m: &DiscreteMeasure) -> MeasureMoments {
    let d = m.dim();
    let mut mean = vec![0.0; d];
    for (i, &w) in m.weights().iter().enumerate() {
        for (k, x) in m.atom(i).iter().enumerate() {
            mean[k] += w * x;
        }
    }
    let mut cov = vec![0.0; d * d];
    let mut radius = 0.0_f64;
    let mut c = vec![0.0; d];
    for (i, &w) in m.weights().iter().enumerate() {
        let x = m.atom(i);
        radius = radius.max(x.iter().map(|v| v * v).sum::<f64>().sqrt());
        for k in 0..d {
            c[k] = x[k] - mean[k];
        }
        for j in 0..d {
            for k in 0..d {
                cov[k + j * d] += w * c[k] * c[j];
            }
        }
    }
    MeasureMoments { mean, cov: SymMatrix::from_col_major(d, cov), radius }
}

/// Uniform measure on the points of `βZ^d` with `‖z‖ ≤ radius_in_steps`,
/// centered.
pub fn make_lattice_ball(d: usize, beta: f64, radius_in_steps: u32) -> Result<DiscreteMeasure> {
    make_lattice_ball_capped(d, beta, radius_in_steps, DEFAULT_ATOM_CAP)
}

pub fn make_lattice_ball_capped(
    d: usize,
    beta: f64,
    radius_in_steps: u32,
    cap: usize,
) -> Result<DiscreteMeasure> {
    if d == 0 || !(beta > 0.0) {
        return Err(Error::InvalidArgument("lattice ball needs d >= 1 and beta > 0".into()));
    }
    let r = radius_in_steps as i64;
    let mut pts: Vec<i64> = Vec::new();
    let mut cur = vec![0i64; d];
    let mut count = 0usize;
    fn rec(
        k: usize,
        d: usize,
        left: i64,
        r: i64,
        cur: &mut Vec<i64>,
        pts: &mut Vec<i64>,
        count: &mut usize,
        cap: usize,
    ) -> bool {
        if k == d {
            *count += 1;
            if *count > cap {
                return false;
            }
            pts.extend_from_slice(cur);
            return true;
        }
        for z in -r..=r {
            let rem = left - z * z;
            if rem < 0 {
                continue;
            }
            cur[k] = z;
            if !rec(k + 1, d, rem, r, cur, pts, count, cap) {
                return false;
            }
        }
        true
    }
    if !rec(0, d, r * r, r, &mut cur, &mut pts, &mut count, cap) {
        return Err(Error::AtomCapExceeded { count, cap });
    }
    let n = pts.len() / d;
    let mut mean = vec![0i64; d];
    for i in 0..n {
        for k in 0..d {
            mean[k] += pts[i * d + k];
        }
    }
    let atoms: Vec<f64> = (0..n * d)
        .map(|j| beta * (pts[j] as f64 - mean[j % d] as f64 / n as f64))
        .collect();
    DiscreteMeasure::from_flat(d, atoms, vec![1.0 / n as f64; n], MeasureKind::Discrete)
}

/// Applies `x ↦ cov^{-1/2}(x − mean)`.
pub fn isotropize(m: &DiscreteMeasure) -> Result<DiscreteMeasure> {
    let mo = moments(m);
    let e = mo.cov.eig();
    if e.min() <= 1e-10 {
        return Err(Error::SingularCovariance { min_eig: e.min() });
    }
    let w = e.rebuild(|l| 1.0 / l.sqrt());
    let d = m.dim();
    let mut atoms = vec![0.0; m.len() * d];
    let mut c = vec![0.0; d];
    for i in 0..m.len() {
        let x = m.atom(i);
        for k in 0..d {
            c[k] = x[k] - mo.mean[k];
        }
        let y = w.mul_vec(&c);
        atoms[i * d..(i + 1) * d].copy_from_slice(&y);
    }
    let mut out = DiscreteMeasure::from_flat(d, atoms, m.weights().to_vec(), m.kind())?;
    out.density = m.density.clone();
    Ok(out)
}

/// Index draws with probability proportional to the weights.
pub fn sample_indices<R: Rng + ?Sized>(m: &DiscreteMeasure, rng: &mut R, k: usize) -> Vec<usize> {
    if m.len() == 1 {
        return vec![0; k];
    }
    let dist = WeightedIndex::new(m.weights()).expect("weights validated at construction");
    (0..k).map(|_| dist.sample(rng)).collect()
}

pub fn sample<R: Rng + ?Sized>(m: &DiscreteMeasure, rng: &mut R, k: usize) -> Vec<Vec<f64>> {
    sample_indices(m, rng, k).into_iter().map(|i| m.atom(i).to_vec()).collect()
}

/// Potential families. Each is `u ↦ φ(u + shift)` restricted to a support.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Potential {
    /// `u² / (2 s²)`.
    Gauss { s: f64 },
    /// `u²/2 + a ln cosh(u − b)`; 1-uniformly convex for `a ≥ 0`.
    GaussLogcosh { a: f64, b: f64 },
    /// Constant potential on the support.
    Flat,
}

impl Potential {
    fn value(&self, u: f64) -> f64 {
        match *self {
            Potential::Gauss { s } => 0.5 * u * u / (s * s),
            Potential::GaussLogcosh { a, b } => 0.5 * u * u + a * log_cosh(u - b),
            Potential::Flat => 0.0,
        }
    }

    fn second_derivative(&self, u: f64) -> f64 {
        match *self {
            Potential::Gauss { s } => 1.0 / (s * s),
            Potential::GaussLogcosh { a, b } => {
                let c = (u - b).cosh();
                1.0 + a / (c * c)
            }
            Potential::Flat => 0.0,
        }
    }
}

fn log_cosh(x: f64) -> f64 {
    let y = x.abs();
    y + (-2.0 * y).exp().ln_1p() - std::f64::consts::LN_2
}

/// Nodes in the quadrature and inverse-CDF tables.
pub const QUAD_NODES: usize = 1 << 14;

/// A normalized 1-d density `exp(−φ(u + shift)) / Z` on `[lo, hi]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Density1d {
    pub potential: Potential,
    pub modulus: f64,
    pub lo: f64,
    pub hi: f64,
    pub shift: f64,
    log_z: f64,
    mean: f64,
    variance: f64,
    cdf_x: Vec<f64>,
    cdf: Vec<f64>,
}

impl Density1d {
    /// Builds the density with its quadrature tables. When `center` is set
    /// the shift is chosen so that the mean is zero.
    pub fn new(potential: Potential, modulus: f64, lo: f64, hi: f64, center: bool) -> Result<Self> {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::InvalidDensity("support must be a finite interval".into()));
        }
        let mut f = Self {
            potential,
            modulus,
            lo,
            hi,
            shift: 0.0,
            log_z: 0.0,
            mean: 0.0,
            variance: 0.0,
            cdf_x: Vec::new(),
            cdf: Vec::new(),
        };
        let span = hi - lo;
        for k in 0..1000 {
            let u = lo + span * (k as f64 + 0.5) / 1000.0;
            if potential.second_derivative(u) < modulus - 1e-12 {
                return Err(Error::InvalidDensity(format!(
                    "potential curvature below declared modulus {modulus} at u = {u}"
                )));
            }
        }
        f.tabulate()?;
        if center {
            let m = f.mean;
            f.shift = m;
            f.lo -= m;
            f.hi -= m;
            f.tabulate()?;
        }
        Ok(f)
    }

    /// Standard form `u²/(2s²)` on `±12 s`, modulus `1/s²`.
    pub fn gauss(s: f64) -> Result<Self> {
        Self::new(Potential::Gauss { s }, 1.0 / (s * s), -12.0 * s, 12.0 * s, false)
    }

    /// `u²/2 + a ln cosh(u − b)`, centered, modulus 1.
    pub fn gauss_logcosh(a: f64, b: f64) -> Result<Self> {
        if a < 0.0 {
            return Err(Error::InvalidDensity("logcosh weight must be nonnegative".into()));
        }
        Self::new(Potential::GaussLogcosh { a, b }, 1.0, b - 14.0, b + 14.0, true)
    }

    /// Uniform law with unit variance on `[−√3, √3]`.
    pub fn uniform_isotropic() -> Result<Self> {
        let h = 3.0_f64.sqrt();
        Self::new(Potential::Flat, 0.0, -h, h, false)
    }

    /// Same potential restricted to `[lo, hi]`.
    pub fn restricted(&self, lo: f64, hi: f64) -> Result<Self> {
        let mut f = Self::new(self.potential, self.modulus, lo + self.shift, hi + self.shift, false)?;
        f.shift = self.shift;
        f.lo = lo;
        f.hi = hi;
        f.tabulate()?;
        Ok(f)
    }

    fn raw(&self, u: f64) -> f64 {
        self.potential.value(u + self.shift)
    }

    fn simpson(&self, n: usize, g: impl Fn(f64) -> f64) -> f64 {
        let h = (self.hi - self.lo) / n as f64;
        let mut s = g(self.lo) + g(self.hi);
        for k in 1..n {
            let w = if k % 2 == 1 { 4.0 } else { 2.0 };
            s += w * g(self.lo + k as f64 * h);
        }
        s * h / 3.0
    }

    fn tabulate(&mut self) -> Result<()> {
        let n = QUAD_NODES;
        let phi_min = (0..=n)
            .map(|k| self.raw(self.lo + (self.hi - self.lo) * k as f64 / n as f64))
            .fold(f64::INFINITY, f64::min);
        let unnorm = |u: f64| (-(self.raw(u) - phi_min)).exp();
        let z = self.simpson(n, unnorm);
        let z_half = self.simpson(n / 2, unnorm);
        let rel = ((z - z_half) / z).abs();
        if !(rel <= 1e-8) {
            return Err(Error::Quadrature { rel_err: rel });
        }
        let log_z = z.ln() - phi_min;
        let mean = self.simpson(n, |u| u * unnorm(u)) / z;
        let var = self.simpson(n, |u| (u - mean) * (u - mean) * unnorm(u)) / z;
        let h = (self.hi - self.lo) / n as f64;
        let xs: Vec<f64> = (0..=n).map(|k| self.lo + k as f64 * h).collect();
        let mut cdf = vec![0.0; n + 1];
        for k in 1..=n {
            cdf[k] = cdf[k - 1] + 0.5 * h * (unnorm(xs[k - 1]) + unnorm(xs[k]));
        }
        let total = cdf[n];
        cdf.iter_mut().for_each(|c| *c /= total);
        self.log_z = log_z;
        self.mean = mean;
        self.variance = var;
        self.cdf_x = xs;
        self.cdf = cdf;
        Ok(())
    }

    pub fn pdf(&self, u: f64) -> f64 {
        if u < self.lo || u > self.hi {
            0.0
        } else {
            (-(self.raw(u)) - self.log_z).exp()
        }
    }

    pub fn ln_pdf(&self, u: f64) -> f64 {
        if u < self.lo || u > self.hi {
            f64::NEG_INFINITY
        } else {
            -self.raw(u) - self.log_z
        }
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn potential_second_derivative(&self, u: f64) -> f64 {
        self.potential.second_derivative(u + self.shift)
    }

    /// Inverse CDF by linear interpolation of the tabulated CDF.
    pub fn quantile(&self, p: f64) -> f64 {
        let p = p.clamp(0.0, 1.0);
        let k = self.cdf.partition_point(|&c| c < p).clamp(1, self.cdf.len() - 1);
        let (c0, c1) = (self.cdf[k - 1], self.cdf[k]);
        let (x0, x1) = (self.cdf_x[k - 1], self.cdf_x[k]);
        if c1 > c0 {
            x0 + (x1 - x0) * (p - c0) / (c1 - c0)
        } else {
            x0
        }
    }
}

/// `N` points with iid coordinates drawn from `f` in dimension `d`.
pub fn particle_cloud_product<R: Rng + ?Sized>(
    f: &Density1d,
    d: usize,
    n: usize,
    rng: &mut R,
) -> Result<DiscreteMeasure> {
    if n < 2 || d == 0 {
        return Err(Error::InvalidArgument("cloud needs N >= 2 and d >= 1".into()));
    }
    let atoms: Vec<f64> = (0..n * d).map(|_| f.quantile(rng.random::<f64>())).collect();
    let mut m = DiscreteMeasure::from_flat(d, atoms, vec![1.0 / n as f64; n], MeasureKind::ParticleCloud)?;
    m.density = Some(f.clone());
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn moments_examples() {
        let m = DiscreteMeasure::uniform(1, &[vec![-1.0], vec![1.0]]).unwrap();
        let mo = moments(&m);
        assert_eq!(mo.mean, vec![0.0]);
        assert!((mo.cov.get(0, 0) - 1.0).abs() < 1e-15);
        assert_eq!(mo.radius, 1.0);
        let p = DiscreteMeasure::point_mass(&[3.0, 4.0]);
        let mo = moments(&p);
        assert_eq!(mo.mean, vec![3.0, 4.0]);
        assert_eq!(mo.cov.hs_norm(), 0.0);
        assert_eq!(mo.radius, 5.0);
        let m = DiscreteMeasure::new(1, &[vec![0.0], vec![1.0]], &[0.75, 0.25]).unwrap();
        let mo = moments(&m);
        assert!((mo.mean[0] - 0.25).abs() < 1e-15);
        assert!((mo.cov.get(0, 0) - 3.0 / 16.0).abs() < 1e-15);
    }

    #[test]
    fn duplicates_are_merged() {
        let m = DiscreteMeasure::new(1, &[vec![0.0], vec![-0.0], vec![1.0]], &[0.25, 0.25, 0.5]).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.weights(), &[0.5, 0.5]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(DiscreteMeasure::new(1, &[vec![f64::NAN]], &[1.0]).is_err());
        assert!(DiscreteMeasure::new(1, &[vec![0.0]], &[-1.0]).is_err());
        assert!(DiscreteMeasure::new(2, &[vec![0.0]], &[1.0]).is_err());
    }

    #[test]
    fn lattice_examples() {
        let m = make_lattice_ball(1, 1.0, 1).unwrap();
        let mut xs: Vec<f64> = (0..m.len()).map(|i| m.atom(i)[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert_eq!(xs, vec![-1.0, 0.0, 1.0]);
        assert!(m.weights().iter().all(|&w| (w - 1.0 / 3.0).abs() < 1e-15));
        let m = make_lattice_ball(2, 1.0, 1).unwrap();
        assert_eq!(m.len(), 5);
        let m = make_lattice_ball(1, 2.0, 2).unwrap();
        assert_eq!(m.len(), 5);
        assert!((moments(&m).cov.get(0, 0) - 8.0).abs() < 1e-12);
        assert!(matches!(make_lattice_ball_capped(6, 1.0, 4, 1000), Err(Error::AtomCapExceeded { .. })));
    }

    #[test]
    fn lattice_mean_and_radius() {
        for d in 1..=4 {
            for r in 0..=3u32 {
                let m = make_lattice_ball(d, 0.7, r).unwrap();
                let mo = moments(&m);
                assert!(mo.mean.iter().all(|x| x.abs() <= 1e-12));
                assert!(mo.radius <= 0.7 * (r as f64 + d as f64) + 1e-12);
            }
        }
    }

    #[test]
    fn isotropize_examples() {
        let m = DiscreteMeasure::uniform(1, &[vec![-1.0], vec![1.0]]).unwrap();
        let i = isotropize(&m).unwrap();
        assert!((i.atom(0)[0].abs() - 1.0).abs() < 1e-12);
        let m = DiscreteMeasure::uniform(1, &[vec![0.0], vec![2.0]]).unwrap();
        let i = isotropize(&m).unwrap();
        let mut xs: Vec<f64> = (0..2).map(|k| i.atom(k)[0]).collect();
        xs.sort_by(f64::total_cmp);
        assert!((xs[0] + 1.0).abs() < 1e-12 && (xs[1] - 1.0).abs() < 1e-12);
        let sing = DiscreteMeasure::uniform(2, &[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        assert!(matches!(isotropize(&sing), Err(Error::SingularCovariance { .. })));
    }

    #[test]
    fn sample_examples() {
        let p = DiscreteMeasure::point_mass(&[2.0]);
        assert!(sample(&p, &mut stream(1, 0), 10).iter().all(|x| x == &vec![2.0]));
        let m = DiscreteMeasure::new(1, &[vec![0.0], vec![1.0]], &[0.75, 0.25]).unwrap();
        let s = sample(&m, &mut stream(2, 0), 100_000);
        let f = s.iter().filter(|x| x[0] == 1.0).count() as f64 / 1e5;
        assert!((0.24..=0.26).contains(&f), "{f}");
        assert_eq!(sample(&m, &mut stream(3, 0), 50), sample(&m, &mut stream(3, 0), 50));
    }

    #[test]
    fn sample_frequencies_over_seeds() {
        let m = DiscreteMeasure::new(1, &[vec![0.0], vec![1.0], vec![2.0]], &[0.2, 0.3, 0.5]).unwrap();
        let k = 10_000;
        let mut ok = 0;
        for seed in 0..100 {
            let idx = sample_indices(&m, &mut stream(seed, 7), k);
            let good = (0..3).all(|a| {
                let w = m.weights()[a];
                let f = idx.iter().filter(|&&i| i == a).count() as f64 / k as f64;
                (f - w).abs() <= 4.0 * (w * (1.0 - w) / k as f64).sqrt()
            });
            ok += good as usize;
        }
        assert!(ok >= 99);
    }

    #[test]
    fn density_modulus_and_normalization() {
        let g = Density1d::gauss(1.0).unwrap();
        assert!((g.variance() - 1.0).abs() < 1e-9);
        assert!(g.mean().abs() < 1e-12);
        let lc = Density1d::gauss_logcosh(1.0, 1.0).unwrap();
        assert!(lc.mean().abs() < 1e-9);
        assert!(lc.variance() < 1.0);
        let bad = Density1d::new(Potential::Gauss { s: 2.0 }, 1.0, -5.0, 5.0, false);
        assert!(matches!(bad, Err(Error::InvalidDensity(_))));
        let u = Density1d::uniform_isotropic().unwrap();
        assert!((u.variance() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn cloud_examples() {
        let g = Density1d::gauss(1.0).unwrap();
        let c = particle_cloud_product(&g, 1, 100_000, &mut stream(4, 0)).unwrap();
        let mo = moments(&c);
        assert!(mo.mean[0].abs() <= 3.0 * (1.0 / 1e5_f64).sqrt());
        assert!((mo.cov.get(0, 0) - 1.0).abs() < 0.02);
        assert_eq!(c.kind(), MeasureKind::ParticleCloud);
        let r = g.restricted(-0.5, 0.5).unwrap();
        let c = particle_cloud_product(&r, 2, 5000, &mut stream(5, 0)).unwrap();
        assert!(c.atoms_flat().iter().all(|x| (-0.5..=0.5).contains(x)));
        let a = particle_cloud_product(&g, 2, 100, &mut stream(6, 0)).unwrap();
        let b = particle_cloud_product(&g, 2, 100, &mut stream(6, 0)).unwrap();
        assert_eq!(a.atoms_flat(), b.atoms_flat());
    }

    #[test]
    fn doc_roundtrip() {
        let m = make_lattice_ball(2, 1.0, 1).unwrap();
        let back = DiscreteMeasure::from_doc(&m.to_doc()).unwrap();
        assert_eq!(back.atoms_flat(), m.atoms_flat());
        assert_eq!(back.weights(), m.weights());
    }
}
