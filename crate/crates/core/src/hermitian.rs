//! Complex Hermitian matrix utilities.
//!
//! Besides eigendecomposition and the PSD pseudoinverse, this module provides
//! [`RankOneCompletion`]: a rank-(M-1) PSD matrix `R'` completed to full rank
//! along a direction `v`,
//!
//! ```text
//! R = R' + λ v vᴴ
//! ```
//!
//! whose inverse and log-determinant have closed forms in `λ`:
//!
//! ```text
//! R⁻¹        = (E - u vᴴ) R'⁺ (E - v uᴴ) + (1/λ) u uᴴ
//! log det R  = log λ + log pdet(R') + log |qᴴ v|²
//! ```
//!
//! where `q` is the unit null vector of `R'`, `u` is the null-space vector with
//! `uᴴ v = 1` and `pdet` is the product of the non-zero eigenvalues.

use nalgebra::{DVector, SymmetricEigen};

use crate::{CMatrix, CVector, Error, Result, C64};

/// Relative eigenvalue threshold below which an eigenvalue counts as zero.
pub const RANK_RTOL: f64 = 1e-10;

const HERMITIAN_TOL: f64 = 1e-12;

/// A square complex matrix known to equal its conjugate transpose.
#[derive(Debug, Clone, PartialEq)]
pub struct HermitianMatrix(CMatrix);

impl HermitianMatrix {
    /// Validates Hermitian symmetry to `1e-12` relative to the largest entry.
    pub fn new(m: CMatrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::InvalidInput(format!(
                "expected a square matrix, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        let asym = asymmetry(&m);
        let scale = m.iter().fold(1.0f64, |a, z| a.max(z.norm()));
        if asym > HERMITIAN_TOL * scale {
            return Err(Error::NotHermitian(asym));
        }
        Ok(Self(m))
    }

    /// Replaces `m` by `(m + mᴴ)/2` without checking.
    pub fn symmetrize(m: CMatrix) -> Self {
        let h = (&m + m.adjoint()) * C64::new(0.5, 0.0);
        Self(h)
    }

    pub fn zeros(n: usize) -> Self {
        Self(CMatrix::zeros(n, n))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &CMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> CMatrix {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.diagonal().iter().map(|z| z.re).sum()
    }
}

impl AsRef<CMatrix> for HermitianMatrix {
    fn as_ref(&self) -> &CMatrix {
        &self.0
    }
}

fn asymmetry(m: &CMatrix) -> f64 {
    let mut worst = 0.0f64;
    for r in 0..m.nrows() {
        for c in r..m.ncols() {
            worst = worst.max((m[(r, c)] - m[(c, r)].conj()).norm());
        }
    }
    worst
}

/// Eigendecomposition with eigenvalues in ascending order and the matching
/// unit eigenvectors as columns.
pub fn eig_hermitian(a: &HermitianMatrix) -> (DVector<f64>, CMatrix) {
    let n = a.dim();
    if n == 0 {
        return (DVector::zeros(0), CMatrix::zeros(0, 0));
    }
    let eig = SymmetricEigen::new(a.0.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
    let values = DVector::from_iterator(n, order.iter().map(|&k| eig.eigenvalues[k]));
    let mut vectors = CMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

/// Rotates `v` so that its largest-magnitude entry is real and positive.
fn fix_phase(mut v: CVector) -> CVector {
    let lead = v
        .iter()
        .copied()
        .max_by(|a, b| a.norm().total_cmp(&b.norm()))
        .unwrap_or(C64::new(0.0, 0.0));
    if lead.norm() > 0.0 {
        let rot = lead.conj() / lead.norm();
        v *= rot;
    }
    v
}

fn count_zero_eigenvalues(values: &DVector<f64>) -> usize {
    let top = values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    values.iter().filter(|v| v.abs() <= RANK_RTOL * top).count()
}

/// Unit eigenvector of the smallest eigenvalue of a PSD matrix of numerical
/// rank `M-1`, with the largest entry made real positive.
pub fn null_vector(a: &HermitianMatrix) -> Result<CVector> {
    let (values, vectors) = eig_hermitian(a);
    let zeros = count_zero_eigenvalues(&values);
    if zeros > 1 {
        return Err(Error::RankDeficiency {
            zero_eigenvalues: zeros,
        });
    }
    Ok(fix_phase(vectors.column(0).into_owned()))
}

/// Null-space vector `u` of `a` normalised so that `uᴴ v = 1`.
pub fn dual_vector(a: &HermitianMatrix, v: &CVector) -> Result<CVector> {
    let q = null_vector(a)?;
    dual_from_null(&q, v)
}

fn dual_from_null(q: &CVector, v: &CVector) -> Result<CVector> {
    let vnorm = v.norm();
    let overlap = q.dotc(v);
    if vnorm == 0.0 || overlap.norm() <= 1e-12 * vnorm {
        return Err(Error::InvalidInput(
            "complement vector has no component along the null space".into(),
        ));
    }
    Ok(q / overlap.conj())
}

/// Moore–Penrose pseudoinverse of a PSD matrix; eigenvalues below
/// [`RANK_RTOL`] times the largest are treated as zero.
pub fn pinv_psd(a: &HermitianMatrix) -> HermitianMatrix {
    let (values, vectors) = eig_hermitian(a);
    pinv_from_eig(&values, &vectors)
}

fn pinv_from_eig(values: &DVector<f64>, vectors: &CMatrix) -> HermitianMatrix {
    let n = values.len();
    let top = values.iter().fold(0.0f64, |a, v| a.max(*v));
    let mut out = CMatrix::zeros(n, n);
    if top <= 0.0 {
        return HermitianMatrix(out);
    }
    for k in 0..n {
        if values[k] > RANK_RTOL * top {
            let col = vectors.column(k);
            out += (&col * col.adjoint()) * C64::new(1.0 / values[k], 0.0);
        }
    }
    HermitianMatrix::symmetrize(out)
}

/// Rank-(M-1) PSD base completed along `v` with weight `λ`.
#[derive(Debug, Clone)]
pub struct RankOneCompletion {
    base: HermitianMatrix,
    v: CVector,
    u: CVector,
    lambda: f64,
    base_pinv: HermitianMatrix,
    log_const: f64,
}

impl RankOneCompletion {
    /// Decomposes `base` once; later `λ` changes go through
    /// [`RankOneCompletion::with_lambda`].
    pub fn new(base: HermitianMatrix, v: CVector, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        if v.len() != base.dim() {
            return Err(Error::InvalidInput("complement vector length mismatch".into()));
        }
        let (values, vectors) = eig_hermitian(&base);
        let zeros = count_zero_eigenvalues(&values);
        if zeros > 1 {
            return Err(Error::RankDeficiency {
                zero_eigenvalues: zeros,
            });
        }
        let q = fix_phase(vectors.column(0).into_owned());
        let u = dual_from_null(&q, &v)?;
        let pdet_log: f64 = values.iter().skip(1).map(|e| e.ln()).sum();
        let log_const = pdet_log + q.dotc(&v).norm_sqr().ln();
        let base_pinv = pinv_from_eig(&values, &vectors);
        Ok(Self {
            base,
            v,
            u,
            lambda,
            base_pinv,
            log_const,
        })
    }

    /// Completion using the unit null vector of `base` as `v` (so `u = v`).
    pub fn along_null_vector(base: HermitianMatrix, lambda: f64) -> Result<Self> {
        let v = null_vector(&base)?;
        Self::new(base, v, lambda)
    }

    pub fn with_lambda(&self, lambda: f64) -> Result<Self> {
        check_lambda(lambda)?;
        Ok(Self {
            lambda,
            ..self.clone()
        })
    }

    pub fn base(&self) -> &HermitianMatrix {
        &self.base
    }

    pub fn base_pinv(&self) -> &HermitianMatrix {
        &self.base_pinv
    }

    pub fn v(&self) -> &CVector {
        &self.v
    }

    pub fn u(&self) -> &CVector {
        &self.u
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// `base + λ v vᴴ` as a dense matrix.
    pub fn dense(&self) -> HermitianMatrix {
        let vv = &self.v * self.v.adjoint();
        HermitianMatrix::symmetrize(self.base.0.clone() + vv * C64::new(self.lambda, 0.0))
    }

    /// `log det(base + λ v vᴴ)`; linear in `log λ`.
    pub fn logdet(&self) -> f64 {
        self.lambda.ln() + self.log_const
    }

    /// `(base + λ v vᴴ)⁻¹` via the pseudoinverse of `base`.
    pub fn inverse(&self) -> HermitianMatrix {
        let n = self.base.dim();
        let eye = CMatrix::identity(n, n);
        let left = &eye - &self.u * self.v.adjoint();
        let right = &eye - &self.v * self.u.adjoint();
        let uu = &self.u * self.u.adjoint();
        let inv = left * &self.base_pinv.0 * right + uu * C64::new(1.0 / self.lambda, 0.0);
        HermitianMatrix::symmetrize(inv)
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!(
            "completion weight must be positive, got {lambda}"
        )))
    }
}

/// `log det` of a completion; see [`RankOneCompletion::logdet`].
pub fn completed_logdet(c: &RankOneCompletion) -> f64 {
    c.logdet()
}

/// Inverse of a completion; see [`RankOneCompletion::inverse`].
pub fn completed_inverse(c: &RankOneCompletion) -> HermitianMatrix {
    c.inverse()
}

/// Inverse and log-determinant of a Hermitian positive definite matrix.
#[derive(Debug, Clone)]
pub struct HpdInverse {
    pub inverse: CMatrix,
    pub logdet: f64,
    /// Whether diagonal loading had to be applied.
    pub loaded: bool,
}

/// Cholesky-based inverse. If the factorisation fails or the squared ratio
/// of the smallest to largest Cholesky pivot falls below `1/max_cond`, the
/// matrix is loaded with `loading * trace / M` on its diagonal first.
pub fn hpd_inverse(a: &CMatrix, max_cond: f64, loading: f64) -> Result<HpdInverse> {
    if let Some((inverse, logdet)) = try_cholesky(a, max_cond) {
        return Ok(HpdInverse {
            inverse,
            logdet,
            loaded: false,
        });
    }
    let n = a.nrows();
    let tr: f64 = a.diagonal().iter().map(|z| z.re).sum::<f64>().abs();
    let shift = loading * tr / n as f64;
    let loaded = a + CMatrix::identity(n, n) * C64::new(shift, 0.0);
    try_cholesky(&loaded, f64::INFINITY)
        .map(|(inverse, logdet)| HpdInverse {
            inverse,
            logdet,
            loaded: true,
        })
        .ok_or_else(|| Error::Singular("covariance not positive definite after loading".into()))
}

fn try_cholesky(a: &CMatrix, max_cond: f64) -> Option<(CMatrix, f64)> {
    let chol = a.clone().cholesky()?;
    let diag = chol.l_dirty().diagonal();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    let mut logdet = 0.0;
    for d in diag.iter() {
        let p = d.re * d.re;
        lo = lo.min(p);
        hi = hi.max(p);
        logdet += p.ln();
    }
    if !(lo > 0.0) || hi / lo > max_cond {
        return None;
    }
    let inv = chol.inverse();
    Some(((&inv + inv.adjoint()) * C64::new(0.5, 0.0), logdet))
}
