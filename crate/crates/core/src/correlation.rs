//! Correlation matrices built from pairwise coefficients.
//!
//! Pairs are flattened lexicographically: `(0,1), (0,2), …, (0,d-1), (1,2), …`.
//! The same ordering is used by every consumer of a `rho` vector in this crate.

use ndarray::{Array1, Array2};
use ndarray_linalg::{Eigh, UPLO};
use thiserror::Error;

/// Default tolerance on the smallest eigenvalue for PSD checks.
pub const PSD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CorrelationError {
    #[error("expected {expected} pairwise coefficients for dimension {dim}, got {got}")]
    Length { dim: usize, expected: usize, got: usize },
    #[error("coefficient {value} for pair ({i}, {j}) is outside [-1, 1]")]
    OutOfRange { i: usize, j: usize, value: f64 },
    #[error("correlation matrix is indefinite (minimum eigenvalue {min_eigenvalue:e})")]
    Indefinite { min_eigenvalue: f64 },
    #[error("symmetric eigendecomposition failed: {0}")]
    Eigen(String),
}

/// Number of distinct off-diagonal pairs for `dim` assets.
pub fn pair_count(dim: usize) -> usize {
    dim * dim.saturating_sub(1) / 2
}

/// Position of pair `(i, j)`, `i < j`, in the flattened coefficient vector.
pub fn pair_index(dim: usize, i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < dim);
    i * (2 * dim - i - 1) / 2 + (j - i - 1)
}

/// Iterates `(i, j)` pairs in flattened order.
pub fn pairs(dim: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..dim).flat_map(move |i| (i + 1..dim).map(move |j| (i, j)))
}

/// Pairwise correlation coefficients, validated to lie in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrParams {
    dim: usize,
    rho: Vec<f64>,
}

impl CorrParams {
    pub fn new(dim: usize, rho: Vec<f64>) -> Result<Self, CorrelationError> {
        let expected = pair_count(dim);
        if rho.len() != expected {
            return Err(CorrelationError::Length {
                dim,
                expected,
                got: rho.len(),
            });
        }
        for ((i, j), &value) in pairs(dim).zip(&rho) {
            if !(-1.0..=1.0).contains(&value) {
                return Err(CorrelationError::OutOfRange { i, j, value });
            }
        }
        Ok(Self { dim, rho })
    }

    /// All pairs share one coefficient.
    pub fn equicorrelated(dim: usize, rho: f64) -> Result<Self, CorrelationError> {
        Self::new(dim, vec![rho; pair_count(dim)])
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.rho
    }
}

/// Symmetric, unit-diagonal matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrMatrix {
    entries: Array2<f64>,
}

pub fn build_gamma(params: &CorrParams) -> CorrMatrix {
    gamma_from_slice(params.dim, &params.rho)
}

/// Same as [`build_gamma`] for an unvalidated coefficient slice; used on hot
/// paths where the caller already enforces the bounds.
pub(crate) fn gamma_from_slice(dim: usize, rho: &[f64]) -> CorrMatrix {
    let mut m = Array2::eye(dim);
    for ((i, j), &r) in pairs(dim).zip(rho) {
        m[[i, j]] = r;
        m[[j, i]] = r;
    }
    CorrMatrix { entries: m }
}

impl CorrMatrix {
    /// Wraps a symmetric matrix whose diagonal is forced to exactly 1.
    pub fn from_symmetric(mut entries: Array2<f64>) -> Self {
        for i in 0..entries.nrows() {
            entries[[i, i]] = 1.0;
        }
        Self { entries }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn params(&self) -> CorrParams {
        let d = self.dim();
        CorrParams {
            dim: d,
            rho: pairs(d).map(|(i, j)| self.entries[[i, j]]).collect(),
        }
    }

    /// Smallest eigenvalue and a unit eigenvector for it.
    pub fn min_eigen(&self) -> Result<(f64, Array1<f64>), CorrelationError> {
        let (vals, vecs) = self
            .entries
            .eigh(UPLO::Lower)
            .map_err(|e| CorrelationError::Eigen(e.to_string()))?;
        // LAPACK returns eigenvalues in ascending order.
        Ok((vals[0], vecs.column(0).to_owned()))
    }

    /// PSD test by attempted Cholesky factorization of `Γ + tol·I`.
    pub fn is_psd(&self, tol: f64) -> bool {
        let d = self.dim();
        let mut shifted = self.entries.clone();
        for i in 0..d {
            shifted[[i, i]] += tol;
        }
        cholesky_lower(&shifted).is_some()
    }

    /// A matrix `Σ` with `Σ Σᵀ = Γ`.
    ///
    /// Lower-triangular Cholesky factor when Γ is positive definite; the
    /// spectral square root with negative eigenvalues clamped otherwise.
    pub fn sqrt(&self) -> Result<Array2<f64>, CorrelationError> {
        if let Some(l) = cholesky_lower(&self.entries) {
            return Ok(l);
        }
        let (vals, vecs) = self
            .entries
            .eigh(UPLO::Lower)
            .map_err(|e| CorrelationError::Eigen(e.to_string()))?;
        if vals[0] < -PSD_TOL {
            return Err(CorrelationError::Indefinite {
                min_eigenvalue: vals[0],
            });
        }
        let d = self.dim();
        let mut scaled = vecs.clone();
        for k in 0..d {
            let s = vals[k].max(0.0).sqrt();
            scaled.column_mut(k).mapv_inplace(|v| v * s);
        }
        Ok(scaled.dot(&vecs.t()))
    }

    /// Spectral projection onto the PSD cone followed by a diagonal rescale
    /// back to unit diagonal.
    pub fn nearest_psd(&self) -> Result<CorrMatrix, CorrelationError> {
        let (vals, vecs) = self
            .entries
            .eigh(UPLO::Lower)
            .map_err(|e| CorrelationError::Eigen(e.to_string()))?;
        if vals[0] >= 0.0 {
            return Ok(self.clone());
        }
        let d = self.dim();
        let mut scaled = vecs.clone();
        for k in 0..d {
            let s = vals[k].max(0.0);
            scaled.column_mut(k).mapv_inplace(|v| v * s);
        }
        let projected = scaled.dot(&vecs.t());
        let inv_sd: Vec<f64> = (0..d)
            .map(|i| {
                let v = projected[[i, i]];
                if v > 0.0 {
                    1.0 / v.sqrt()
                } else {
                    0.0
                }
            })
            .collect();
        let mut out = Array2::zeros((d, d));
        for i in 0..d {
            for j in 0..d {
                out[[i, j]] = if i == j {
                    1.0
                } else {
                    (projected[[i, j]] * inv_sd[i] * inv_sd[j]).clamp(-1.0, 1.0)
                };
            }
        }
        // Symmetrize against round-off from the two products above.
        let sym = (&out + &out.t()) * 0.5;
        Ok(CorrMatrix::from_symmetric(sym))
    }
}

pub fn is_psd(gamma: &CorrMatrix, tol: f64) -> bool {
    gamma.is_psd(tol)
}

pub fn sqrt_gamma(gamma: &CorrMatrix) -> Result<Array2<f64>, CorrelationError> {
    gamma.sqrt()
}

pub fn nearest_psd(gamma: &CorrMatrix) -> Result<CorrMatrix, CorrelationError> {
    gamma.nearest_psd()
}

/// Dense lower Cholesky factor; `None` unless every pivot is strictly positive.
pub(crate) fn cholesky_lower(a: &Array2<f64>) -> Option<Array2<f64>> {
    let n = a.nrows();
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut diag = a[[j, j]];
        for k in 0..j {
            diag -= l[[j, k]] * l[[j, k]];
        }
        if !(diag > 0.0) {
            return None;
        }
        let ljj = diag.sqrt();
        l[[j, j]] = ljj;
        for i in j + 1..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / ljj;
        }
    }
    Some(l)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        (a - b).iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }

    #[test]
    fn pair_ordering_is_lexicographic() {
        let d = 4;
        let all: Vec<_> = pairs(d).collect();
        assert_eq!(all, vec![(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]);
        for (k, (i, j)) in all.into_iter().enumerate() {
            assert_eq!(pair_index(d, i, j), k);
        }
    }

    #[test]
    fn build_places_coefficients() {
        let g = build_gamma(&CorrParams::new(2, vec![0.0]).unwrap());
        assert_eq!(g.entries(), &Array2::<f64>::eye(2));

        let g = build_gamma(&CorrParams::equicorrelated(3, 0.5).unwrap());
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(g.entries()[[i, j]], if i == j { 1.0 } else { 0.5 });
            }
        }

        let g = build_gamma(&CorrParams::new(2, vec![-0.5]).unwrap());
        assert_eq!(g.entries()[[0, 1]], -0.5);
        assert_eq!(g.entries()[[1, 0]], -0.5);
    }

    #[test]
    fn params_validation() {
        assert!(matches!(
            CorrParams::new(3, vec![0.1, 0.2]),
            Err(CorrelationError::Length { expected: 3, .. })
        ));
        assert!(matches!(
            CorrParams::new(3, vec![0.1, 1.2, 0.0]),
            Err(CorrelationError::OutOfRange { i: 0, j: 2, .. })
        ));
    }

    #[test]
    fn psd_checks_on_equicorrelation() {
        let identity = build_gamma(&CorrParams::equicorrelated(4, 0.0).unwrap());
        assert!(identity.is_psd(0.0));
        // Eigenvalues of the 3x3 equicorrelation matrix are 1 + 2ρ and 1 − ρ.
        let bad = build_gamma(&CorrParams::equicorrelated(3, -0.9).unwrap());
        assert!(!bad.is_psd(1e-12));
        let edge = build_gamma(&CorrParams::equicorrelated(3, -0.5).unwrap());
        assert!(edge.is_psd(1e-12));
    }

    #[test]
    fn sqrt_closed_form_two_by_two() {
        let g = build_gamma(&CorrParams::new(2, vec![0.5]).unwrap());
        let s = g.sqrt().unwrap();
        assert!((s[[0, 0]] - 1.0).abs() < 1e-15);
        assert_eq!(s[[0, 1]], 0.0);
        assert!((s[[1, 0]] - 0.5).abs() < 1e-15);
        assert!((s[[1, 1]] - 0.75f64.sqrt()).abs() < 1e-15);
        let id = build_gamma(&CorrParams::equicorrelated(3, 0.0).unwrap());
        assert_eq!(id.sqrt().unwrap(), Array2::<f64>::eye(3));
    }

    #[test]
    fn sqrt_falls_back_to_spectral_on_boundary() {
        let edge = build_gamma(&CorrParams::equicorrelated(3, -0.5).unwrap());
        let s = edge.sqrt().unwrap();
        assert!(max_abs_diff(&s.dot(&s.t()), edge.entries()) < 1e-8);
    }

    #[test]
    fn sqrt_rejects_indefinite() {
        let bad = build_gamma(&CorrParams::equicorrelated(3, -0.9).unwrap());
        match bad.sqrt() {
            Err(CorrelationError::Indefinite { min_eigenvalue }) => {
                assert!((min_eigenvalue + 0.8).abs() < 1e-12)
            }
            other => panic!("expected indefinite error, got {other:?}"),
        }
    }

    #[test]
    fn nearest_psd_repairs_equicorrelation() {
        let bad = build_gamma(&CorrParams::equicorrelated(3, -0.9).unwrap());
        let fixed = bad.nearest_psd().unwrap();
        let (lmin, _) = fixed.min_eigen().unwrap();
        assert!(lmin >= -1e-10);
        for ((i, j), r) in pairs(3).zip(fixed.params().as_slice()) {
            assert!((r + 0.5).abs() < 1e-12, "({i},{j}) = {r}");
        }
        for i in 0..3 {
            assert_eq!(fixed.entries()[[i, i]], 1.0);
        }
    }

    #[test]
    fn nearest_psd_leaves_valid_matrices_alone() {
        for r in [-1.0, -0.7, 0.0, 0.3, 1.0] {
            let g = build_gamma(&CorrParams::new(2, vec![r]).unwrap());
            let p = g.nearest_psd().unwrap();
            assert!(max_abs_diff(p.entries(), g.entries()) < 1e-10);
        }
        let g = build_gamma(&CorrParams::new(3, vec![0.2, -0.3, 0.4]).unwrap());
        assert!(max_abs_diff(g.nearest_psd().unwrap().entries(), g.entries()) < 1e-10);
    }

    #[test]
    fn min_eigen_of_equicorrelation() {
        let g = build_gamma(&CorrParams::equicorrelated(5, 0.3).unwrap());
        let (l, v) = g.min_eigen().unwrap();
        assert!((l - 0.7).abs() < 1e-12);
        assert!((v.dot(&v) - 1.0).abs() < 1e-12);
    }
}
