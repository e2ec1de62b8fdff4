//! Fréchet distance and inception score over pluggable feature extractors,
//! plus the latent-swap disentanglement probe.

mod extractor;
mod probe;

pub use extractor::{ExtractorConfig, FeatureExtractor, ToyExtractor};
pub use probe::{
    appearance_readout, disentanglement_probe, motion_readout, ProbeConfig, ProbeStats, ReadoutScale,
};

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("invalid feature set: {0}")]
    InvalidFeatures(String),
    #[error("invalid class probabilities: {0}")]
    InvalidProbs(String),
    #[error("feature dimensions differ: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("matrix square root did not converge (condition number {condition:.3e})")]
    SqrtNotConverged { condition: f64 },
    #[error("feature extractor has not passed its accuracy gate: {0}")]
    Untrained(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Row-major `[n, f]` feature matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    n: usize,
    f: usize,
    data: Vec<f64>,
}

impl FeatureSet {
    pub fn new(n: usize, f: usize, data: Vec<f64>) -> Result<Self, MetricError> {
        if n < 2 || f == 0 {
            return Err(MetricError::InvalidFeatures(format!(
                "need n ≥ 2 and f ≥ 1, got n = {n}, f = {f}"
            )));
        }
        if data.len() != n * f {
            return Err(MetricError::InvalidFeatures(format!(
                "{} values for {n}×{f}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(MetricError::InvalidFeatures(format!(
                "non-finite entry at row {}, column {}",
                i / f,
                i % f
            )));
        }
        Ok(Self { n, f, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, MetricError> {
        let f = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != f) {
            return Err(MetricError::InvalidFeatures("ragged rows".into()));
        }
        Self::new(rows.len(), f, rows.concat())
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.f
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.f..(i + 1) * self.f]
    }

    /// Sample mean and unbiased covariance.
    pub fn moments(&self) -> (DVector<f64>, DMatrix<f64>) {
        let x = DMatrix::from_row_slice(self.n, self.f, &self.data);
        let mu = x.row_mean().transpose();
        let mut centered = x;
        for mut row in centered.row_iter_mut() {
            row -= mu.transpose();
        }
        let cov = centered.transpose() * &centered / (self.n as f64 - 1.0);
        (mu, cov)
    }
}

/// Row-stochastic `[n, k]` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassProbs {
    n: usize,
    k: usize,
    data: Vec<f64>,
}

impl ClassProbs {
    pub fn new(n: usize, k: usize, data: Vec<f64>) -> Result<Self, MetricError> {
        if n == 0 || k == 0 || data.len() != n * k {
            return Err(MetricError::InvalidProbs(format!(
                "{} values for {n}×{k}",
                data.len()
            )));
        }
        for (i, row) in data.chunks(k).enumerate() {
            if row.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(MetricError::InvalidProbs(format!("row {i} has a negative or non-finite entry")));
            }
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(MetricError::InvalidProbs(format!("row {i} sums to {s}")));
            }
        }
        Ok(Self { n, k, data })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.k..(i + 1) * self.k]
    }
}

fn symmetric(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn eigen(m: DMatrix<f64>, condition: f64) -> Result<SymmetricEigen<f64, nalgebra::Dyn>, MetricError> {
    SymmetricEigen::try_new(m, f64::EPSILON, 10_000).ok_or(MetricError::SqrtNotConverged { condition })
}

fn condition_number(eig: &DVector<f64>) -> f64 {
    let max = eig.iter().copied().fold(f64::MIN, f64::max);
    let min = eig.iter().copied().map(f64::abs).fold(f64::MAX, f64::min);
    if min == 0.0 {
        f64::INFINITY
    } else {
        max.abs() / min
    }
}

/// Eigenvalues below `1e-10 · max` (including negative round-off) become 0.
fn clamp_eigenvalues(eig: &DVector<f64>) -> DVector<f64> {
    let max = eig.iter().copied().fold(0.0, f64::max);
    eig.map(|v| if v <= 1e-10 * max { 0.0 } else { v })
}

/// Fréchet distance between Gaussian fits of two feature sets.
///
/// The cross term uses `Tr((Σa Σb)^{1/2}) = Tr((Σa^{1/2} Σb Σa^{1/2})^{1/2})`,
/// whose argument is symmetric positive semi-definite.
pub fn fid(a: &FeatureSet, b: &FeatureSet) -> Result<f64, MetricError> {
    if a.dim() != b.dim() {
        return Err(MetricError::DimensionMismatch(a.dim(), b.dim()));
    }
    let (mu_a, cov_a) = a.moments();
    let (mu_b, cov_b) = b.moments();
    let cov_a = symmetric(&cov_a);
    let cov_b = symmetric(&cov_b);

    let ea = eigen(cov_a.clone(), f64::NAN)?;
    let cond = condition_number(&ea.eigenvalues);
    let sqrt_vals = clamp_eigenvalues(&ea.eigenvalues).map(f64::sqrt);
    let sqrt_a = &ea.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * ea.eigenvectors.transpose();
    let inner = symmetric(&(&sqrt_a * &cov_b * &sqrt_a));
    let ei = eigen(inner, cond)?;
    let tr_sqrt: f64 = clamp_eigenvalues(&ei.eigenvalues).iter().map(|v| v.sqrt()).sum();

    let mean_term = (&mu_a - &mu_b).norm_squared();
    let value = mean_term + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt;
    Ok(value.max(0.0))
}

/// `exp(mean_i KL(p_i ‖ p̄))` with `0 · log 0 = 0`.
pub fn inception_score(p: &ClassProbs) -> f64 {
    let (n, k) = (p.len(), p.classes());
    let mut marginal = vec![0.0; k];
    for i in 0..n {
        for (m, v) in marginal.iter_mut().zip(p.row(i)) {
            *m += v / n as f64;
        }
    }
    let mut kl_sum = 0.0;
    for i in 0..n {
        for (&pi, &m) in p.row(i).iter().zip(&marginal) {
            if pi > 0.0 {
                kl_sum += pi * (pi / m).ln();
            }
        }
    }
    (kl_sum / n as f64).exp().clamp(1.0, k as f64)
}
