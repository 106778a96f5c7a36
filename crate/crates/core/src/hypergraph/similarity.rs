use nalgebra::{DMatrix, DVector};

use super::HypergraphError;

/// Covariance used to whiten embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CovarianceMode {
    /// Regularised sample covariance of the embeddings.
    Sample,
    /// Identity covariance; Mahalanobis reduces to Euclidean distance.
    Identity,
}

/// Relative ridge added to the sample covariance: `ε = RIDGE · tr(Σ) / d`.
pub const COVARIANCE_RIDGE: f64 = 1e-3;

/// Pairwise Mahalanobis distances between the rows of `q` (`N × d`).
///
/// With [`CovarianceMode::Sample`] the rows are whitened by the Cholesky
/// factor of `Σ + εI`, so `‖L⁻¹(q_i − q_j)‖ = sqrt((q_i − q_j)ᵀ (Σ + εI)⁻¹ (q_i − q_j))`.
pub fn mahalanobis_matrix(q: &DMatrix<f64>, mode: CovarianceMode) -> Result<DMatrix<f64>, HypergraphError> {
    let n = q.nrows();
    if n < 2 {
        return Err(HypergraphError::TooFewVertices(n));
    }
    let whitened = match mode {
        CovarianceMode::Identity => q.clone(),
        CovarianceMode::Sample => {
            let d = q.ncols();
            let mean: DVector<f64> = q.row_mean().transpose();
            let mut centered = q.clone();
            for mut row in centered.row_iter_mut() {
                row -= mean.transpose();
            }
            let mut cov = centered.transpose() * &centered / (n - 1) as f64;
            let trace = cov.trace();
            if trace <= 0.0 {
                // all embeddings coincide
                return Ok(DMatrix::zeros(n, n));
            }
            let eps = COVARIANCE_RIDGE * trace / d as f64;
            for i in 0..d {
                cov[(i, i)] += eps;
            }
            let chol = cov
                .cholesky()
                .ok_or_else(|| HypergraphError::Invalid("regularised covariance is not positive definite".into()))?;
            // rows of Z are L⁻¹ q_i
            let mut z = centered.transpose();
            chol.l().solve_lower_triangular_mut(&mut z);
            z.transpose()
        }
    };
    let mut dist = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let d = (whitened.row(i) - whitened.row(j)).norm();
            dist[(i, j)] = d;
            dist[(j, i)] = d;
        }
    }
    Ok(dist)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: DMatrix<f64>,
    /// Mean off-diagonal distance used as the kernel bandwidth.
    pub bandwidth: f64,
}

/// Gaussian kernel `exp(−Dis² / ϱ²)` with `ϱ` the mean pairwise distance.
/// When every distance is zero the similarity is all ones.
pub fn similarity_matrix(dist: &DMatrix<f64>) -> SimilarityMatrix {
    let n = dist.nrows();
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            total += dist[(i, j)];
        }
    }
    let pairs = (n * (n - 1) / 2).max(1) as f64;
    let bandwidth = total / pairs;
    let values = if bandwidth == 0.0 {
        DMatrix::from_element(n, n, 1.0)
    } else {
        dist.map(|d| (-(d * d) / (bandwidth * bandwidth)).exp())
    };
    SimilarityMatrix { values, bandwidth }
}
