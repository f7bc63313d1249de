//! Widely-linear (augmented) second-order statistics.
//!
//! A complex vector `x` is carried together with its conjugate as
//! `xᵃ = [x; x*]`, and its covariance as the pair `(Γ, C)` with
//! `Γ = E[(x−μ)(x−μ)ᴴ]` and pseudocovariance `C = E[(x−μ)(x−μ)ᵀ]`. The full
//! augmented covariance is then `[[Γ, C], [C*, Γ*]]`.

use num_complex::Complex;
use num_traits::Zero;

use crate::error::{DseError, Result};
use crate::linalg::{floor_eigenvalues, min_hermitian_eigenvalue, CMatrix, Cholesky};
use crate::scalar::Scalar;

/// Relative tolerance for the Hermitian/symmetric structure checks.
const STRUCTURE_TOL: f64 = 1e-9;
/// Relative tolerance on the smallest eigenvalue of Γ.
const PSD_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedVector<T> {
    top: Vec<Complex<T>>,
    bottom: Vec<Complex<T>>,
}

impl<T: Scalar> AugmentedVector<T> {
    pub fn top(&self) -> &[Complex<T>] {
        &self.top
    }

    pub fn bottom(&self) -> &[Complex<T>] {
        &self.bottom
    }

    pub fn len(&self) -> usize {
        self.top.len()
    }

    pub fn is_empty(&self) -> bool {
        self.top.is_empty()
    }

    /// Conjugates both halves and swaps them; the identity on valid vectors.
    pub fn conjugate_swap(&self) -> Self {
        Self {
            top: self.bottom.iter().map(|z| z.conj()).collect(),
            bottom: self.top.iter().map(|z| z.conj()).collect(),
        }
    }

    /// `[x; x*]` as one vector of length `2n`.
    pub fn stacked(&self) -> Vec<Complex<T>> {
        let mut v = self.top.clone();
        v.extend_from_slice(&self.bottom);
        v
    }
}

pub fn augment<T: Scalar>(x: &[Complex<T>]) -> AugmentedVector<T> {
    AugmentedVector {
        top: x.to_vec(),
        bottom: x.iter().map(|z| z.conj()).collect(),
    }
}

/// Covariance `Γ` and pseudocovariance `C` of a complex vector.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedCovariance<T> {
    gamma: CMatrix<T>,
    c: CMatrix<T>,
}

impl<T: Scalar> AugmentedCovariance<T> {
    /// Validated constructor: Γ Hermitian PSD, C symmetric, matching sizes.
    pub fn new(gamma: CMatrix<T>, c: CMatrix<T>) -> Result<Self> {
        let cov = Self::from_parts_unchecked(gamma, c)?;
        cov.validate()?;
        Ok(cov)
    }

    /// Checks only the dimensions.
    pub fn from_parts_unchecked(gamma: CMatrix<T>, c: CMatrix<T>) -> Result<Self> {
        if !gamma.is_square() || gamma.rows() != c.rows() || gamma.cols() != c.cols() {
            return Err(DseError::shape(
                "augmented covariance",
                format!("two {0}x{0} blocks", gamma.rows()),
                format!("{}x{} and {}x{}", gamma.rows(), gamma.cols(), c.rows(), c.cols()),
            ));
        }
        Ok(Self { gamma, c })
    }

    /// Circular (proper) covariance: `C = 0`.
    pub fn proper(gamma: CMatrix<T>) -> Result<Self> {
        let n = gamma.rows();
        Self::new(gamma, CMatrix::zeros(n, n))
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            gamma: CMatrix::zeros(n, n),
            c: CMatrix::zeros(n, n),
        }
    }

    pub fn identity(n: usize) -> Self {
        Self {
            gamma: CMatrix::identity(n),
            c: CMatrix::zeros(n, n),
        }
    }

    /// Diagonal circular covariance with the given variances.
    pub fn diagonal(variances: &[T]) -> Result<Self> {
        if let Some(v) = variances.iter().find(|v| !(**v >= T::zero()) || !v.is_finite()) {
            return Err(DseError::Argument(format!("variance must be finite and non-negative, got {v}")));
        }
        let d: Vec<Complex<T>> = variances.iter().map(|v| Complex::new(*v, T::zero())).collect();
        Ok(Self {
            gamma: CMatrix::from_diagonal(&d),
            c: CMatrix::zeros(d.len(), d.len()),
        })
    }

    pub fn dim(&self) -> usize {
        self.gamma.rows()
    }

    pub fn gamma(&self) -> &CMatrix<T> {
        &self.gamma
    }

    pub fn c(&self) -> &CMatrix<T> {
        &self.c
    }

    pub fn into_parts(self) -> (CMatrix<T>, CMatrix<T>) {
        (self.gamma, self.c)
    }

    fn scale(&self) -> T {
        self.gamma.max_abs().max(self.c.max_abs()).max(T::min_positive_value())
    }

    /// Structure checks: Γ Hermitian, C symmetric, Γ positive semidefinite.
    pub fn validate(&self) -> Result<()> {
        let scale = self.scale();
        let tol = T::lit(STRUCTURE_TOL) * scale;
        if self.gamma.hermitian_defect() > tol {
            return Err(DseError::Validation(format!(
                "covariance block is not Hermitian (defect {})",
                self.gamma.hermitian_defect()
            )));
        }
        if self.c.symmetric_defect() > tol {
            return Err(DseError::Validation(format!(
                "pseudocovariance block is not symmetric (defect {})",
                self.c.symmetric_defect()
            )));
        }
        if !self.gamma_is_psd()? {
            let lam = min_hermitian_eigenvalue(&self.gamma)?;
            return Err(DseError::Validation(format!("covariance block has negative eigenvalue {lam}")));
        }
        Ok(())
    }

    fn gamma_is_psd(&self) -> Result<bool> {
        let n = self.dim();
        if n == 0 {
            return Ok(true);
        }
        let slack = T::lit(PSD_TOL) * self.scale();
        let mut shifted = self.gamma.hermitian_part();
        shifted.add_diagonal(Complex::new(slack, T::zero()));
        if Cholesky::factor(&shifted, T::zero()).is_ok() {
            return Ok(true);
        }
        Ok(min_hermitian_eigenvalue(&self.gamma)? >= -slack)
    }

    /// `[[Γ, C], [C*, Γ*]]`, Hermitian by construction.
    pub fn assemble_block(&self) -> Result<CMatrix<T>> {
        let tol = T::lit(STRUCTURE_TOL) * self.scale();
        if self.gamma.hermitian_defect() > tol {
            return Err(DseError::Validation("covariance block is not Hermitian".into()));
        }
        if self.c.symmetric_defect() > tol {
            return Err(DseError::Validation("pseudocovariance block is not symmetric".into()));
        }
        let g = self.gamma.hermitian_part();
        let c = self.c.symmetric_part();
        Ok(CMatrix::from_blocks(&g, &c, &c.conj(), &g.conj()))
    }

    /// Reads `(Γ, C)` back out of a `2n × 2n` augmented matrix, averaging the
    /// redundant halves and projecting onto the Hermitian/symmetric structure.
    pub fn from_block(block: &CMatrix<T>) -> Result<Self> {
        if !block.is_square() || !block.rows().is_multiple_of(2) {
            return Err(DseError::shape("augmented block", "2n x 2n", format!("{}x{}", block.rows(), block.cols())));
        }
        let n = block.rows() / 2;
        let half = Complex::new(T::lit(0.5), T::zero());
        let g = (&block.block(0, 0, n, n) + &block.block(n, n, n, n).conj()).scale(half);
        let c = (&block.block(0, n, n, n) + &block.block(n, 0, n, n).conj()).scale(half);
        Ok(Self {
            gamma: g.hermitian_part(),
            c: c.symmetric_part(),
        })
    }

    /// Block-diagonal concatenation; cross terms are zero.
    pub fn block_diagonal(parts: &[&Self]) -> Self {
        let n: usize = parts.iter().map(|p| p.dim()).sum();
        let mut gamma = CMatrix::zeros(n, n);
        let mut c = CMatrix::zeros(n, n);
        let mut at = 0;
        for p in parts {
            gamma.set_block(at, at, &p.gamma);
            c.set_block(at, at, &p.c);
            at += p.dim();
        }
        Self { gamma, c }
    }

    /// Sub-covariance of the listed coordinates.
    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            gamma: self.gamma.select_rows(idx).select_columns(idx),
            c: self.c.select_rows(idx).select_columns(idx),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        Self {
            gamma: &self.gamma + &other.gamma,
            c: &self.c + &other.c,
        }
    }

    /// Multiplies row and column `i` by `sqrt(factor)`, which scales the
    /// variance of coordinate `i` by `factor` and keeps the matrix PSD.
    pub fn inflate(&mut self, i: usize, factor: T) {
        let s = factor.sqrt();
        let n = self.dim();
        for j in 0..n {
            for m in [&mut self.gamma, &mut self.c] {
                m[(i, j)] = m[(i, j)].scale(s);
                m[(j, i)] = m[(j, i)].scale(s);
            }
        }
    }

    /// Symmetrizes both blocks and floors negative eigenvalues of Γ at zero.
    pub fn repaired(&self) -> Result<Self> {
        let mut out = Self {
            gamma: self.gamma.hermitian_part(),
            c: self.c.symmetric_part(),
        };
        if !out.gamma_is_psd()? {
            out.gamma = floor_eigenvalues(&out.gamma)?;
        }
        Ok(out)
    }
}

/// Result of [`estimate_noise_covariance`].
#[derive(Clone, Debug)]
pub struct NoiseEstimate<T> {
    pub covariance: AugmentedCovariance<T>,
    /// Sample mean that was removed before estimating the second moments.
    pub mean: Vec<Complex<T>>,
    pub samples: usize,
}

/// Sample covariance and pseudocovariance of a set of complex vectors.
///
/// Both averages use the `1/N` normalization.
pub fn estimate_noise_covariance<T: Scalar>(samples: &[Vec<Complex<T>>]) -> Result<NoiseEstimate<T>> {
    if samples.len() < 2 {
        return Err(DseError::Argument(format!("need at least 2 samples, got {}", samples.len())));
    }
    let n = samples[0].len();
    if let Some((k, s)) = samples.iter().enumerate().find(|(_, s)| s.len() != n) {
        return Err(DseError::shape("noise sample", n, format!("{} (sample {k})", s.len())));
    }
    let count = T::from_usize(samples.len()).expect("sample count fits the scalar");
    let mut mean = vec![Complex::<T>::zero(); n];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m = *m + *v;
        }
    }
    for m in mean.iter_mut() {
        *m = m.unscale(count);
    }
    let mut gamma = CMatrix::zeros(n, n);
    let mut c = CMatrix::zeros(n, n);
    let mut d = vec![Complex::<T>::zero(); n];
    for s in samples {
        for ((di, v), m) in d.iter_mut().zip(s).zip(&mean) {
            *di = *v - *m;
        }
        for i in 0..n {
            let di = d[i];
            if di.is_zero() {
                continue;
            }
            let grow = gamma.row_mut(i);
            for (g, dj) in grow.iter_mut().zip(&d) {
                *g = *g + di * dj.conj();
            }
            let crow = c.row_mut(i);
            for (cc, dj) in crow.iter_mut().zip(&d) {
                *cc = *cc + di * *dj;
            }
        }
    }
    let inv = Complex::new(T::one() / count, T::zero());
    let covariance = AugmentedCovariance {
        gamma: gamma.scale(inv),
        c: c.scale(inv),
    }
    .repaired()?;
    Ok(NoiseEstimate {
        covariance,
        mean,
        samples: samples.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::c;

    #[test]
    fn augment_examples() {
        let a = augment(&[c::<f64>(1.0, 2.0)]);
        assert_eq!(a.top(), &[c(1.0, 2.0)]);
        assert_eq!(a.bottom(), &[c(1.0, -2.0)]);
        let r = augment(&[c::<f64>(3.0, 0.0), c(5.0, 0.0)]);
        assert_eq!(r.top(), r.bottom());
        let z = augment(&[c::<f64>(0.0, 0.0)]);
        assert_eq!(z.stacked(), vec![c(0.0, 0.0); 2]);
        assert_eq!(a.conjugate_swap(), a);
    }

    #[test]
    fn assemble_scalar_cases() {
        let g = CMatrix::from_diagonal(&[c::<f64>(2.0, 0.0)]);
        let proper = AugmentedCovariance::proper(g.clone()).unwrap();
        assert_eq!(proper.assemble_block().unwrap().to_rows(), vec![vec![c(2.0, 0.0), c(0.0, 0.0)], vec![c(0.0, 0.0), c(2.0, 0.0)]]);
        let improper = AugmentedCovariance::new(g, CMatrix::from_diagonal(&[c(1.0, 0.0)])).unwrap();
        assert_eq!(improper.assemble_block().unwrap().to_rows(), vec![vec![c(2.0, 0.0), c(1.0, 0.0)], vec![c(1.0, 0.0), c(2.0, 0.0)]]);
    }

    #[test]
    fn rejects_invalid_blocks() {
        let bad = CMatrix::from_rows(&[vec![c::<f64>(1.0, 0.0), c(1.0, 0.0)], vec![c(0.0, 0.0), c(1.0, 0.0)]]).unwrap();
        assert!(AugmentedCovariance::proper(bad.clone()).is_err());
        let unchecked = AugmentedCovariance::from_parts_unchecked(bad, CMatrix::zeros(2, 2)).unwrap();
        assert!(unchecked.assemble_block().is_err());
        let neg = CMatrix::from_diagonal(&[c::<f64>(1.0, 0.0), c(-0.5, 0.0)]);
        assert!(matches!(AugmentedCovariance::proper(neg), Err(DseError::Validation(_))));
        let skew_c = CMatrix::from_rows(&[vec![c::<f64>(0.0, 0.0), c(1.0, 0.0)], vec![c(-1.0, 0.0), c(0.0, 0.0)]]).unwrap();
        assert!(AugmentedCovariance::new(CMatrix::identity(2), skew_c).is_err());
    }

    #[test]
    fn estimate_constant_and_real_pair() {
        let constant = vec![vec![c::<f64>(0.3, -0.2), c(1.0, 1.0)]; 5];
        let est = estimate_noise_covariance(&constant).unwrap();
        assert_eq!(est.covariance.gamma().max_abs(), 0.0);
        assert_eq!(est.covariance.c().max_abs(), 0.0);
        assert_eq!(est.mean, constant[0]);

        let pair = vec![vec![c::<f64>(1.0, 0.0)], vec![c(-1.0, 0.0)]];
        let est = estimate_noise_covariance(&pair).unwrap();
        assert!((est.covariance.gamma()[(0, 0)] - c(1.0, 0.0)).norm() < 1e-15);
        assert!((est.covariance.c()[(0, 0)] - c(1.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn estimate_rejects_bad_input() {
        assert!(matches!(estimate_noise_covariance::<f64>(&[]), Err(DseError::Argument(_))));
        assert!(estimate_noise_covariance(&[vec![c::<f64>(1.0, 0.0)]]).is_err());
        assert!(estimate_noise_covariance(&[vec![c::<f64>(1.0, 0.0)], vec![]]).is_err());
    }

    #[test]
    fn inflate_scales_one_variance() {
        let mut cov = AugmentedCovariance::diagonal(&[1.0f64, 2.0]).unwrap();
        cov.inflate(1, 1e6);
        assert!((cov.gamma()[(1, 1)].re - 2e6).abs() < 1e-6);
        assert_eq!(cov.gamma()[(0, 0)].re, 1.0);
    }

    #[test]
    fn block_roundtrip() {
        let g = CMatrix::from_rows(&[vec![c::<f64>(2.0, 0.0), c(0.5, 0.5)], vec![c(0.5, -0.5), c(1.0, 0.0)]]).unwrap();
        let cc = CMatrix::from_rows(&[vec![c::<f64>(0.3, 0.1), c(0.2, 0.0)], vec![c(0.2, 0.0), c(-0.1, 0.2)]]).unwrap();
        let cov = AugmentedCovariance::new(g, cc).unwrap();
        let block = cov.assemble_block().unwrap();
        assert_eq!(block.hermitian_defect(), 0.0);
        let back = AugmentedCovariance::from_block(&block).unwrap();
        assert_eq!(back, cov);
    }
}
