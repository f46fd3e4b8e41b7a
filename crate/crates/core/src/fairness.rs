//! Coefficient of variation and the Fairness Index over a reward matrix.
//!
//! `FI = mean_j 1 / (1 + CoV_j²)` where `CoV_j` is the population standard
//! deviation of question j's per-group rewards over their mean. FI is 1 when
//! every group receives the same reward on every question.

use serde::{Deserialize, Serialize};

use crate::aggregate::GroupRewardMatrix;
use crate::error::{Error, Result};
use crate::numeric;

/// Lower bound on |μ| used as the CoV denominator.
pub const MEAN_GUARD: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FairnessReport {
    pub fi: f64,
    pub per_question_cov: Vec<f64>,
    pub num_questions: usize,
    pub num_groups: usize,
}

/// `σ / max(|μ|, 1e-9)` with population σ.
pub fn coefficient_of_variation(rewards: &[f64]) -> Result<f64> {
    if rewards.len() < 2 {
        return Err(Error::invalid(format!(
            "coefficient of variation needs at least 2 rewards, got {}",
            rewards.len()
        )));
    }
    let mu = numeric::mean(rewards).abs().max(MEAN_GUARD);
    Ok(numeric::population_variance(rewards).sqrt() / mu)
}

/// FI over the matrix values as given. Callers that hold signed rewards
/// should pass [`GroupRewardMatrix::fairness_view`] instead.
pub fn fairness_index(matrix: &GroupRewardMatrix) -> Result<FairnessReport> {
    fairness_index_rows(matrix.rows(), matrix.num_groups())
}

pub(crate) fn fairness_index_rows(rows: &[Vec<f64>], num_groups: usize) -> Result<FairnessReport> {
    if rows.is_empty() {
        return Err(Error::invalid("fairness index of an empty matrix"));
    }
    if num_groups < 2 {
        return Err(Error::invalid(
            "fairness index needs at least 2 groups",
        ));
    }
    let per_question_cov = rows
        .iter()
        .map(|r| coefficient_of_variation(r))
        .collect::<Result<Vec<_>>>()?;
    let fi = per_question_cov
        .iter()
        .map(|c| 1.0 / (1.0 + c * c))
        .sum::<f64>()
        / rows.len() as f64;
    Ok(FairnessReport {
        fi,
        num_questions: rows.len(),
        num_groups,
        per_question_cov,
    })
}

impl FairnessReport {
    /// Recompute FI from the stored per-question CoVs.
    pub fn fi_from_covs(covs: &[f64]) -> f64 {
        covs.iter().map(|c| 1.0 / (1.0 + c * c)).sum::<f64>() / covs.len() as f64
    }
}
