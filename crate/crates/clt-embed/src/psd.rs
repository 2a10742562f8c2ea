//! Symmetric and PSD matrix functions.
//!
//! Everything goes through one symmetric eigendecomposition. Dimensions 1
//! and 2 use closed forms because the engine calls them once per step.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

/// Relative cutoff used for pseudo-inverses and ranks.
pub const DEFAULT_REL_CUTOFF: f64 = 1e-10;
/// Relative tolerance for negative eigenvalues in `psd_sqrt`.
pub const NEAR_PSD_TOL: f64 = 1e-8;

/// Symmetric eigendecomposition of a column-major `d x d` buffer.
///
/// Eigenvalues come out ascending; `vecs[i + j * d]` is component `i` of
/// eigenvector `j`.
pub fn eigh_into(a: &[f64], d: usize, vals: &mut [f64], vecs: &mut [f64]) {
    match d {
        0 => {}
        1 => {
            vals[0] = a[0];
            vecs[0] = 1.0;
        }
        2 => {
            let (p, b, c) = (a[0], 0.5 * (a[1] + a[2]), a[3]);
            if b == 0.0 {
                if p <= c {
                    vals[0] = p;
                    vals[1] = c;
                    vecs.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
                } else {
                    vals[0] = c;
                    vals[1] = p;
                    vecs.copy_from_slice(&[0.0, 1.0, 1.0, 0.0]);
                }
                return;
            }
            let m = 0.5 * (p + c);
            let r = (0.5 * (p - c)).hypot(b);
            let theta = 0.5 * (2.0 * b).atan2(p - c);
            let (s, co) = theta.sin_cos();
            vals[0] = m - r;
            vals[1] = m + r;
            vecs.copy_from_slice(&[-s, co, co, s]);
        }
        _ => {
            let m = DMatrix::from_column_slice(d, d, a);
            let eig = SymmetricEigen::new(m);
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
            for (k, &j) in order.iter().enumerate() {
                vals[k] = eig.eigenvalues[j];
                for i in 0..d {
                    vecs[i + k * d] = eig.eigenvectors[(i, j)];
                }
            }
        }
    }
}

/// Writes `Q f(Λ) Qᵀ` into `out`.
pub fn spectral_apply_into(
    vals: &[f64],
    vecs: &[f64],
    d: usize,
    f: impl Fn(f64) -> f64,
    out: &mut [f64],
) {
    out[..d * d].iter_mut().for_each(|x| *x = 0.0);
    for k in 0..d {
        let fk = f(vals[k]);
        if fk == 0.0 {
            continue;
        }
        let v = &vecs[k * d..(k + 1) * d];
        for j in 0..d {
            let s = fk * v[j];
            for i in 0..d {
                out[i + j * d] += s * v[i];
            }
        }
    }
}

/// Dense symmetric matrix, symmetrized on construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SymMatrix {
    d: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn from_col_major(d: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), d * d, "buffer does not match dimension");
        let mut m = Self { d, data };
        m.symmetrize();
        m
    }

    pub fn from_dmatrix(m: &DMatrix<f64>) -> Self {
        assert!(m.is_square());
        Self::from_col_major(m.nrows(), m.as_slice().to_vec())
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let d = rows.len();
        let mut data = vec![0.0; d * d];
        for (i, r) in rows.iter().enumerate() {
            assert_eq!(r.len(), d);
            for j in 0..d {
                data[i + j * d] = r[j];
            }
        }
        Self::from_col_major(d, data)
    }

    pub fn zeros(d: usize) -> Self {
        Self { d, data: vec![0.0; d * d] }
    }

    pub fn identity(d: usize) -> Self {
        Self::scalar(d, 1.0)
    }

    pub fn scalar(d: usize, c: f64) -> Self {
        let mut m = Self::zeros(d);
        for i in 0..d {
            m.data[i * (d + 1)] = c;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let d = diag.len();
        let mut m = Self::zeros(d);
        for (i, &x) in diag.iter().enumerate() {
            m.data[i * (d + 1)] = x;
        }
        m
    }

    fn symmetrize(&mut self) {
        let d = self.d;
        for j in 0..d {
            for i in (j + 1)..d {
                let s = 0.5 * (self.data[i + j * d] + self.data[j + i * d]);
                self.data[i + j * d] = s;
                self.data[j + i * d] = s;
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i + j * self.d]
    }

    pub fn to_dmatrix(&self) -> DMatrix<f64> {
        DMatrix::from_column_slice(self.d, self.d, &self.data)
    }

    pub fn trace(&self) -> f64 {
        (0..self.d).map(|i| self.data[i * (self.d + 1)]).sum()
    }

    pub fn hs_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    /// Largest absolute eigenvalue.
    pub fn op_norm(&self) -> f64 {
        let e = self.eig();
        e.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn add(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Self {
        self.zip(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        Self { d: self.d, data: self.data.iter().map(|x| c * x).collect() }
    }

    fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.d, other.d, "dimension mismatch");
        Self {
            d: self.d,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// Plain matrix product (not symmetric in general).
    pub fn matmul(&self, other: &Self) -> DMatrix<f64> {
        self.to_dmatrix() * other.to_dmatrix()
    }

    /// `self * self`, which is symmetric.
    pub fn square(&self) -> Self {
        Self::from_dmatrix(&(self.to_dmatrix() * self.to_dmatrix()))
    }

    pub fn mul_vec(&self, v: &[f64]) -> Vec<f64> {
        let d = self.d;
        let mut out = vec![0.0; d];
        for j in 0..d {
            for i in 0..d {
                out[i] += self.data[i + j * d] * v[j];
            }
        }
        out
    }

    pub fn eig(&self) -> SpectralDecomp {
        let d = self.d;
        let mut values = vec![0.0; d];
        let mut vectors = vec![0.0; d * d];
        eigh_into(&self.data, d, &mut values, &mut vectors);
        let top = values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        SpectralDecomp { d, values, vectors, cutoff: DEFAULT_REL_CUTOFF * top }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).fold(0.0_f64, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Eigenvalues (ascending), orthonormal eigenvectors (column-major) and the
/// cutoff below which an eigenvalue counts as zero.
#[derive(Debug, Clone)]
pub struct SpectralDecomp {
    pub d: usize,
    pub values: Vec<f64>,
    pub vectors: Vec<f64>,
    pub cutoff: f64,
}

impl SpectralDecomp {
    pub fn with_cutoff(mut self, cutoff: f64) -> Self {
        self.cutoff = cutoff;
        self
    }

    pub fn rebuild(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let mut out = vec![0.0; self.d * self.d];
        spectral_apply_into(&self.values, &self.vectors, self.d, f, &mut out);
        SymMatrix::from_col_major(self.d, out)
    }

    pub fn rank(&self) -> usize {
        self.values.iter().filter(|&&v| v > self.cutoff).count()
    }

    pub fn min(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }

    pub fn max(&self) -> f64 {
        self.values.last().copied().unwrap_or(0.0)
    }

    pub fn eigenvector(&self, k: usize) -> &[f64] {
        &self.vectors[k * self.d..(k + 1) * self.d]
    }
}

fn check_near_psd(e: &SpectralDecomp) -> Result<()> {
    let top = e.values.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let tol = NEAR_PSD_TOL * top;
    if e.min() < -tol {
        return Err(Error::NotPsd { eig: e.min(), tol });
    }
    Ok(())
}

pub fn psd_sqrt(a: &SymMatrix) -> Result<SymMatrix> {
    let e = a.eig();
    check_near_psd(&e)?;
    Ok(e.rebuild(|l| l.max(0.0).sqrt()))
}

fn resolve_cutoff(e: &SpectralDecomp, cutoff: Option<f64>) -> f64 {
    cutoff.unwrap_or(e.cutoff)
}

/// Inverts eigenvalues above `cutoff` (default `1e-10 ‖A‖_op`), zeroes the rest.
pub fn pseudo_inverse(a: &SymMatrix, cutoff: Option<f64>) -> SymMatrix {
    let e = a.eig();
    let c = resolve_cutoff(&e, cutoff);
    e.rebuild(|l| if l > c { 1.0 / l } else { 0.0 })
}

/// `min(A†, I)` in the eigenbasis of `A`.
pub fn capped_inverse(a: &SymMatrix, cutoff: Option<f64>) -> SymMatrix {
    let e = a.eig();
    let c = resolve_cutoff(&e, cutoff);
    e.rebuild(|l| if l > c { (1.0 / l).min(1.0) } else { 0.0 })
}

/// Orthogonal projection onto the retained eigenspace of `A`.
pub fn range_projection(a: &SymMatrix, cutoff: Option<f64>) -> SymMatrix {
    let e = a.eig();
    let c = resolve_cutoff(&e, cutoff);
    e.rebuild(|l| if l > c { 1.0 } else { 0.0 })
}

/// Both sides of `Tr((√A − √B)²) ≤ Tr((A − B)² A†)`.
pub fn sqrt_diff_trace_pair(a: &SymMatrix, b: &SymMatrix) -> Result<(f64, f64)> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch { expected: a.dim(), got: b.dim() });
    }
    let ea = a.eig();
    check_near_psd(&ea)?;
    check_near_psd(&b.eig())?;
    let mut worst = 0.0_f64;
    for k in 0..ea.d {
        if ea.values[k] <= ea.cutoff {
            let bv = b.mul_vec(ea.eigenvector(k));
            worst = worst.max(bv.iter().map(|x| x * x).sum::<f64>().sqrt());
        }
    }
    if worst > 1e-6 {
        return Err(Error::KernelInclusion { residual: worst });
    }
    let diff_sqrt = psd_sqrt(a)?.sub(&psd_sqrt(b)?);
    let lhs = diff_sqrt.square().trace();
    let diff = a.sub(b).to_dmatrix();
    let a_pinv = ea.rebuild(|l| if l > ea.cutoff { 1.0 / l } else { 0.0 }).to_dmatrix();
    let rhs = (&diff * &diff * a_pinv).trace();
    Ok((lhs, rhs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psd(rng: &mut ChaCha8Rng, d: usize, rank: usize) -> SymMatrix {
        let m = DMatrix::from_fn(d, rank, |_, _| rng.random_range(-1.0..1.0));
        SymMatrix::from_dmatrix(&(&m * m.transpose()))
    }

    #[test]
    fn closed_form_2x2_matches_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let a = random_psd(&mut rng, 2, 2);
            let e = a.eig();
            let r = e.rebuild(|l| l);
            assert!(r.max_abs_diff(&a) < 1e-13);
            let n = SymmetricEigen::new(a.to_dmatrix());
            let mut nv: Vec<f64> = n.eigenvalues.iter().copied().collect();
            nv.sort_by(f64::total_cmp);
            assert!((nv[0] - e.values[0]).abs() < 1e-12);
            assert!((nv[1] - e.values[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn sqrt_examples() {
        assert_eq!(psd_sqrt(&SymMatrix::identity(3)).unwrap(), SymMatrix::identity(3));
        let s = psd_sqrt(&SymMatrix::from_diag(&[4.0, 9.0])).unwrap();
        assert!(s.max_abs_diff(&SymMatrix::from_diag(&[2.0, 3.0])) < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_psd(&mut rng, 6, 6);
        let r = psd_sqrt(&a).unwrap().square();
        assert!(r.sub(&a).hs_norm() <= 1e-8);
    }

    #[test]
    fn sqrt_rejects_negative() {
        let a = SymMatrix::from_diag(&[1.0, -0.1]);
        assert!(matches!(psd_sqrt(&a), Err(Error::NotPsd { .. })));
        let tiny = SymMatrix::from_diag(&[1.0, -1e-12]);
        assert!(psd_sqrt(&tiny).is_ok());
    }

    #[test]
    fn pinv_examples() {
        let p = pseudo_inverse(&SymMatrix::from_diag(&[2.0, 0.0]), None);
        assert!(p.max_abs_diff(&SymMatrix::from_diag(&[0.5, 0.0])) < 1e-15);
        assert!(pseudo_inverse(&SymMatrix::identity(4), None).max_abs_diff(&SymMatrix::identity(4)) < 1e-14);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_psd(&mut rng, 4, 2);
        let pa = SymMatrix::from_dmatrix(&a.matmul(&pseudo_inverse(&a, None)));
        let ev = pa.eig().values;
        let want = [0.0, 0.0, 1.0, 1.0];
        for (v, w) in ev.iter().zip(want) {
            assert!((v - w).abs() < 1e-8, "{ev:?}");
        }
    }

    #[test]
    fn capped_examples() {
        let c = capped_inverse(&SymMatrix::from_diag(&[4.0, 0.25, 0.0]), None);
        assert!(c.max_abs_diff(&SymMatrix::from_diag(&[0.25, 1.0, 0.0])) < 1e-15);
        assert!(capped_inverse(&SymMatrix::identity(2), None).max_abs_diff(&SymMatrix::identity(2)) < 1e-15);
        let c = capped_inverse(&SymMatrix::from_diag(&[0.1]), None);
        assert!((c.get(0, 0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn trace_pair_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let a = random_psd(&mut rng, 3, 3);
        let (l, r) = sqrt_diff_trace_pair(&a, &a).unwrap();
        assert!(l.abs() < 1e-12 && r.abs() < 1e-12);
        let (l, r) = sqrt_diff_trace_pair(&SymMatrix::from_diag(&[4.0]), &SymMatrix::from_diag(&[1.0])).unwrap();
        assert!((l - 1.0).abs() < 1e-14 && (r - 2.25).abs() < 1e-14);
    }

    #[test]
    fn trace_pair_kernel_violation() {
        let a = SymMatrix::from_diag(&[1.0, 0.0]);
        let b = SymMatrix::from_diag(&[1.0, 1.0]);
        assert!(matches!(sqrt_diff_trace_pair(&a, &b), Err(Error::KernelInclusion { .. })));
    }

    #[test]
    fn trace_pair_random_500() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..500 {
            let a = random_psd(&mut rng, 5, 3);
            let n = random_psd(&mut rng, 5, 5);
            let p = range_projection(&a, None).to_dmatrix();
            let b = SymMatrix::from_dmatrix(&(a.to_dmatrix() + &p * n.to_dmatrix() * &p));
            let (l, r) = sqrt_diff_trace_pair(&a, &b).unwrap();
            assert!(l <= r + 1e-8 * (1.0 + r), "{l} > {r}");
        }
    }
}
