//! Full-covariance Gaussian mixtures over the 4-D pairwise feature, fitted
//! with EM. One mixture is trained per `(subject, relation, object)` triple.

mod em;
pub mod linalg;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scene_model::PairFeature;
pub use em::{effective_components, fit_em, fit_em_traced, FitTrace};
use linalg::{cholesky, forward_solve, lower_inverse, sub, Mat4, Vec4, DIM};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GmmError {
    #[error("no samples to fit or evaluate")]
    NoSamples,
    #[error("covariance is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("invalid mixture: {0}")]
    InvalidModel(String),
    #[error("invalid fit configuration: {0}")]
    InvalidConfig(String),
}

/// `d/2 * ln(2 pi)` for `d = 4`.
const HALF_LOG_2PI_D: f64 = 2.0 * 1.837_877_066_409_345_5;

/// One mixture component with its Cholesky factor cached.
#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian {
    mean: Vec4,
    covariance: Mat4,
    chol: Mat4,
    chol_inv: Mat4,
    log_norm: f64,
}

impl Gaussian {
    pub fn new(mean: Vec4, covariance: Mat4) -> Result<Self, GmmError> {
        if mean.iter().chain(covariance.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(GmmError::InvalidModel("non-finite parameter".into()));
        }
        let scale = covariance.iter().flatten().fold(1.0f64, |m, v| m.max(v.abs()));
        if !linalg::is_symmetric(&covariance, 1e-12 * scale) {
            return Err(GmmError::NotPositiveDefinite);
        }
        let chol = cholesky(&covariance).ok_or(GmmError::NotPositiveDefinite)?;
        let log_det_half: f64 = (0..DIM).map(|i| chol[i][i].ln()).sum();
        Ok(Self { mean, covariance, chol, chol_inv: lower_inverse(&chol), log_norm: -HALF_LOG_2PI_D - log_det_half })
    }

    pub fn mean(&self) -> &Vec4 {
        &self.mean
    }

    pub fn covariance(&self) -> &Mat4 {
        &self.covariance
    }

    /// Lower-triangular `L^{-1}`, so that `|L^{-1}(x - m)|^2` is the squared
    /// Mahalanobis distance.
    pub fn whitening(&self) -> &Mat4 {
        &self.chol_inv
    }

    /// `-(d/2) ln(2 pi) - (1/2) ln det M`.
    pub fn log_normalizer(&self) -> f64 {
        self.log_norm
    }

    pub fn log_pdf(&self, x: &Vec4) -> f64 {
        let z = forward_solve(&self.chol, &sub(x, &self.mean));
        self.log_norm - 0.5 * linalg::dot(&z, &z)
    }
}

/// Mixture weights and components.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    weights: Vec<f64>,
    components: Vec<Gaussian>,
}

impl GmmModel {
    pub fn new(weights: Vec<f64>, components: Vec<Gaussian>) -> Result<Self, GmmError> {
        if weights.is_empty() || weights.len() != components.len() {
            return Err(GmmError::InvalidModel(format!(
                "{} weights for {} components",
                weights.len(),
                components.len()
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0 && w <= 1.0)) {
            return Err(GmmError::InvalidModel("weights must lie in (0, 1]".into()));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(GmmError::InvalidModel(format!("weights sum to {total}")));
        }
        Ok(Self { weights, components })
    }

    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn components(&self) -> &[Gaussian] {
        &self.components
    }

    /// `ln sum_k a_k N(x | m_k, M_k)`, via log-sum-exp.
    pub fn log_density(&self, x: &PairFeature) -> f64 {
        let terms: Vec<f64> =
            self.weights.iter().zip(&self.components).map(|(w, g)| w.ln() + g.log_pdf(&x.0)).collect();
        log_sum_exp(&terms)
    }
}

pub fn log_density(model: &GmmModel, x: &PairFeature) -> f64 {
    model.log_density(x)
}

/// Arithmetic mean of `log_density` over `samples`.
pub fn mean_loglik(model: &GmmModel, samples: &[PairFeature]) -> Result<f64, GmmError> {
    if samples.is_empty() {
        return Err(GmmError::NoSamples);
    }
    Ok(samples.iter().map(|x| model.log_density(x)).sum::<f64>() / samples.len() as f64)
}

pub(crate) fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// EM hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Stop once the mean per-sample log-likelihood moves by less than this.
    pub tol: f64,
    /// Added to every covariance diagonal.
    pub reg_covar: f64,
    pub seed: u64,
    pub n_init: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        Self { k: 4, max_iter: 100, tol: 1e-3, reg_covar: 1e-6, seed: 0, n_init: 1 }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<(), GmmError> {
        let bad = |m: &str| Err(GmmError::InvalidConfig(m.into()));
        if self.k < 1 {
            return bad("k must be at least 1");
        }
        if self.max_iter < 1 {
            return bad("max_iter must be at least 1");
        }
        if !(self.tol > 0.0) {
            return bad("tol must be positive");
        }
        if !(self.reg_covar >= 0.0) {
            return bad("reg_covar must be non-negative");
        }
        if self.n_init < 1 {
            return bad("n_init must be at least 1");
        }
        Ok(())
    }
}

/// Standard normal log density at its mean in four dimensions: `-2 ln(2 pi)`.
pub fn standard_normal_peak_log_density() -> f64 {
    -2.0 * (2.0 * PI).ln()
}
