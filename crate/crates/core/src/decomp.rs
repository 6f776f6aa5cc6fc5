//! Principal components of a score matrix.
//!
//! The matrix is read as N observations (rows) by N variables (columns).
//! Columns are mean-centered but not scaled, and all N components are kept.
//! Variances use the N - 1 denominator throughout.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;
use thiserror::Error;

use crate::matrix::ScoreMatrix;

/// Components whose variance is at most this fraction of the total are
/// treated as carrying no variance.
pub const DEGENERATE_VARIANCE_RATIO: f64 = 1e-12;

const EIGEN_EPS: f64 = 1e-15;
const EIGEN_MAX_ITER: usize = 10_000;

#[derive(Debug, Error, PartialEq)]
pub enum DecompError {
    #[error("need at least 2 subjects, got {0}")]
    TooSmall(usize),
    #[error("eigensolver did not converge")]
    NumericalFailure,
    #[error("total variance is zero")]
    DegenerateMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    subjects: Vec<String>,
    column_means: Vec<f64>,
    /// Column k is the unit direction of component k.
    components: DMatrix<f64>,
    /// Column k holds every subject's value on component k.
    scores: DMatrix<f64>,
    variances: Vec<f64>,
    total_variance: f64,
}

impl Decomposition {
    pub fn subjects(&self) -> &[String] {
        &self.subjects
    }

    pub fn len(&self) -> usize {
        self.variances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variances.is_empty()
    }

    pub fn column_means(&self) -> &[f64] {
        &self.column_means
    }

    pub fn component(&self, k: usize) -> &[f64] {
        let n = self.components.nrows();
        &self.components.as_slice()[k * n..(k + 1) * n]
    }

    /// Per-subject values on component `k`.
    pub fn scores(&self, k: usize) -> &[f64] {
        let n = self.scores.nrows();
        &self.scores.as_slice()[k * n..(k + 1) * n]
    }

    pub fn components_matrix(&self) -> &DMatrix<f64> {
        &self.components
    }

    pub fn scores_matrix(&self) -> &DMatrix<f64> {
        &self.scores
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn total_variance(&self) -> f64 {
        self.total_variance
    }

    pub fn is_degenerate(&self, k: usize) -> bool {
        self.variances[k] <= DEGENERATE_VARIANCE_RATIO * self.total_variance
    }

    /// `subject_id,pc_index,value` with 1-based component indices.
    pub fn write_values_csv<W: std::io::Write>(&self, out: W) -> std::io::Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["subject_id", "pc_index", "value"])?;
        for k in 0..self.len() {
            for (id, x) in self.subjects.iter().zip(self.scores(k)) {
                w.write_record([id.as_str(), &(k + 1).to_string(), &format!("{x}")])?;
            }
        }
        w.flush()
    }

    /// `pc_index,variance,fraction` with 1-based component indices.
    pub fn write_variance_csv<W: std::io::Write>(&self, out: W) -> std::io::Result<()> {
        let fractions = variance_fractions(self).unwrap_or_else(|_| vec![0.0; self.len()]);
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["pc_index", "variance", "fraction"])?;
        for (k, (v, f)) in self.variances.iter().zip(&fractions).enumerate() {
            w.write_record([(k + 1).to_string(), format!("{v}"), format!("{f}")])?;
        }
        w.flush()
    }
}

/// Column-centered copy of `values` and the column means.
pub fn center_columns(values: &DMatrix<f64>) -> (DMatrix<f64>, Vec<f64>) {
    let n = values.nrows() as f64;
    let means: Vec<f64> = values.column_iter().map(|c| c.sum() / n).collect();
    let mut centered = values.clone();
    for (j, mut col) in centered.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    (centered, means)
}

pub fn pca_decompose(matrix: &ScoreMatrix) -> Result<Decomposition, DecompError> {
    let n = matrix.len();
    if n < 2 {
        return Err(DecompError::TooSmall(n));
    }
    let (centered, column_means) = center_columns(matrix.values());
    let dof = (n - 1) as f64;

    let total_variance = centered.iter().map(|x| x * x).sum::<f64>() / dof;
    let mut cov = centered.tr_mul(&centered) / dof;
    // tr_mul is symmetric up to rounding; mirror the upper triangle
    for i in 0..n {
        for j in i + 1..n {
            cov[(j, i)] = cov[(i, j)];
        }
    }

    let eig = SymmetricEigen::try_new(cov, EIGEN_EPS, EIGEN_MAX_ITER)
        .ok_or(DecompError::NumericalFailure)?;
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(DecompError::NumericalFailure);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let mut components = DMatrix::zeros(n, n);
    let mut variances = Vec::with_capacity(n);
    for (k, &src) in order.iter().enumerate() {
        let v = eig.eigenvectors.column(src);
        // Orient so the entry of largest magnitude is positive. Entries within
        // rounding of the maximum count as tied and the lowest index wins.
        let max = v.amax();
        let pivot = v
            .iter()
            .position(|x| x.abs() >= max * (1.0 - 1e-9))
            .unwrap_or(0);
        let sign = if v[pivot] < 0.0 { -1.0 } else { 1.0 };
        components.column_mut(k).copy_from(&(v * sign));
        variances.push(eig.eigenvalues[src].max(0.0));
    }
    let scores = &centered * &components;

    Ok(Decomposition {
        subjects: matrix.subjects().to_vec(),
        column_means,
        components,
        scores,
        variances,
        total_variance,
    })
}

/// Share of total variance carried by each component.
pub fn variance_fractions(d: &Decomposition) -> Result<Vec<f64>, DecompError> {
    if d.total_variance <= 0.0 {
        return Err(DecompError::DegenerateMatrix);
    }
    Ok(d.variances.iter().map(|v| v / d.total_variance).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PcaCheck {
    pub reconstruction_rel_error: f64,
    pub variance_sum_rel_error: f64,
    pub max_orthonormality_error: f64,
}

/// Measures the identities a decomposition must satisfy against its input.
pub fn check_identities(matrix: &ScoreMatrix, d: &Decomposition) -> PcaCheck {
    let n = matrix.len();
    let mut recon = &d.scores * d.components.transpose();
    for (j, mut col) in recon.column_iter_mut().enumerate() {
        col.add_scalar_mut(d.column_means[j]);
    }
    let input_norm = matrix.values().norm().max(f64::MIN_POSITIVE);
    let reconstruction_rel_error = (&recon - matrix.values()).norm() / input_norm;

    let sum: f64 = d.variances.iter().sum();
    let variance_sum_rel_error = if d.total_variance > 0.0 {
        (sum - d.total_variance).abs() / d.total_variance
    } else {
        sum.abs()
    };

    let gram = d.components.tr_mul(&d.components);
    let eye = DMatrix::<f64>::identity(n, n);
    let max_orthonormality_error = (gram - eye).amax();

    PcaCheck {
        reconstruction_rel_error,
        variance_sum_rel_error,
        max_orthonormality_error,
    }
}
