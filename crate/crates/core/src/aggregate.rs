//! Server-side aggregation of per-group rewards into one reward per question.
//!
//! Strategies: min, max, average, fixed-α consensus
//! `(1/α) ln((1/l) Σ exp(α r_g))`, and the adaptive scheme that falls back to
//! the average when the batch Fairness Index clears a threshold and otherwise
//! takes `ln((1/l) Σ exp(α_g r_g))` with `α = softmax((1 - h) / T)` computed
//! from each group's alignment history `h`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fairness::{self, FairnessReport};
use crate::metrics::MetricKind;
use crate::numeric;

pub const DEFAULT_FI_THRESHOLD: f64 = 0.9;
pub const DEFAULT_TEMPERATURE: f64 = 0.1;
pub const DEFAULT_HISTORY_DECAY: f64 = 0.9;
pub const DEFAULT_HISTORY_INIT: f64 = 0.5;

/// Oriented rewards, one row per question and one column per group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupRewardMatrix {
    question_ids: Vec<String>,
    group_ids: Vec<String>,
    rows: Vec<Vec<f64>>,
    /// Metric that produced the rewards; selects the shift used for fairness.
    metric: Option<MetricKind>,
}

impl GroupRewardMatrix {
    pub fn new(question_ids: Vec<String>, group_ids: Vec<String>, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.is_empty() || rows.len() != question_ids.len() {
            return Err(Error::invalid(format!(
                "matrix needs one row per question ({} rows, {} questions)",
                rows.len(),
                question_ids.len()
            )));
        }
        if group_ids.len() < 2 {
            return Err(Error::invalid("matrix needs at least 2 groups"));
        }
        for (j, row) in rows.iter().enumerate() {
            if row.len() != group_ids.len() {
                return Err(Error::LengthMismatch {
                    expected: group_ids.len(),
                    actual: row.len(),
                });
            }
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::invalid(format!(
                    "non-finite reward for question `{}`",
                    question_ids[j]
                )));
            }
        }
        Ok(GroupRewardMatrix {
            question_ids,
            group_ids,
            rows,
            metric: None,
        })
    }

    /// Matrix with generated ids `q0..`, `g0..`.
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let l = rows.first().map_or(0, Vec::len);
        Self::new(
            (0..rows.len()).map(|j| format!("q{j}")).collect(),
            (0..l).map(|g| format!("g{g}")).collect(),
            rows,
        )
    }

    pub fn with_metric(mut self, metric: MetricKind) -> Self {
        self.metric = Some(metric);
        self
    }

    pub fn metric(&self) -> Option<MetricKind> {
        self.metric
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn question_ids(&self) -> &[String] {
        &self.question_ids
    }

    pub fn group_ids(&self) -> &[String] {
        &self.group_ids
    }

    pub fn num_questions(&self) -> usize {
        self.rows.len()
    }

    pub fn num_groups(&self) -> usize {
        self.group_ids.len()
    }

    /// Rewards mapped into [0, 1] for fairness and history purposes.
    pub fn fairness_view(&self) -> Vec<Vec<f64>> {
        match self.metric {
            Some(m) => self
                .rows
                .iter()
                .map(|r| r.iter().map(|&x| m.fairness_shift(x)).collect())
                .collect(),
            None => self.rows.clone(),
        }
    }

    /// FI on the fairness view.
    pub fn fairness(&self) -> Result<FairnessReport> {
        fairness::fairness_index_rows(&self.fairness_view(), self.num_groups())
    }

    /// Mean reward of each group over the questions.
    pub fn group_means(&self) -> Vec<f64> {
        (0..self.num_groups())
            .map(|g| {
                let col: Vec<f64> = self.rows.iter().map(|r| r[g]).collect();
                numeric::mean(&col)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentHistory {
    pub h: Vec<f64>,
    pub decay: f64,
}

impl AlignmentHistory {
    pub fn new(num_groups: usize, initial: f64, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&initial) {
            return Err(Error::invalid("history initial value must lie in [0, 1]"));
        }
        if !(decay > 0.0 && decay < 1.0) {
            return Err(Error::invalid("history decay must lie in (0, 1)"));
        }
        Ok(AlignmentHistory {
            h: vec![initial; num_groups],
            decay,
        })
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AggregationStrategy {
    Min,
    Max,
    Average,
    FixedAlpha {
        alpha: f64,
    },
    AdaptiveAlpha {
        #[serde(default = "default_fi_threshold")]
        fi_threshold: f64,
        #[serde(default = "default_temperature")]
        temperature: f64,
    },
}

fn default_fi_threshold() -> f64 {
    DEFAULT_FI_THRESHOLD
}

fn default_temperature() -> f64 {
    DEFAULT_TEMPERATURE
}

impl AggregationStrategy {
    pub fn adaptive() -> Self {
        AggregationStrategy::AdaptiveAlpha {
            fi_threshold: DEFAULT_FI_THRESHOLD,
            temperature: DEFAULT_TEMPERATURE,
        }
    }

    /// Short identifier used in file names and CSV rows.
    pub fn label(&self) -> String {
        match self {
            AggregationStrategy::Min => "min".into(),
            AggregationStrategy::Max => "max".into(),
            AggregationStrategy::Average => "average".into(),
            AggregationStrategy::FixedAlpha { alpha } => format!("fixed_alpha_{alpha}"),
            AggregationStrategy::AdaptiveAlpha { .. } => "adaptive_alpha".into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            AggregationStrategy::FixedAlpha { alpha } if !alpha.is_finite() => {
                Err(Error::invalid("alpha must be finite"))
            }
            AggregationStrategy::AdaptiveAlpha {
                fi_threshold,
                temperature,
            } => {
                if !(fi_threshold > 0.0 && fi_threshold <= 1.0) {
                    return Err(Error::invalid("fi_threshold must lie in (0, 1]"));
                }
                if !(temperature > 0.0 && temperature.is_finite()) {
                    return Err(Error::invalid("temperature must be positive"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gate {
    AverageBranch,
    WeightedBranch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedReward {
    pub per_question: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights_used: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_taken: Option<Gate>,
    /// Batch FI seen by the adaptive gate.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_fi: Option<f64>,
}

impl AggregatedReward {
    fn plain(per_question: Vec<f64>) -> Self {
        AggregatedReward {
            per_question,
            weights_used: None,
            gate_taken: None,
            gate_fi: None,
        }
    }
}

pub fn aggregate_min(matrix: &GroupRewardMatrix) -> AggregatedReward {
    AggregatedReward::plain(matrix.rows.iter().map(|r| numeric::min(r)).collect())
}

pub fn aggregate_max(matrix: &GroupRewardMatrix) -> AggregatedReward {
    AggregatedReward::plain(matrix.rows.iter().map(|r| numeric::max(r)).collect())
}

pub fn aggregate_average(matrix: &GroupRewardMatrix) -> AggregatedReward {
    AggregatedReward::plain(matrix.rows.iter().map(|r| numeric::mean(r)).collect())
}

/// Consensus aggregation of one row. Evaluated as an offset from the row's
/// extreme value so constant rows come back unchanged.
pub fn consensus(row: &[f64], alpha: f64) -> f64 {
    if alpha == 0.0 {
        return numeric::mean(row);
    }
    let anchor = if alpha > 0.0 {
        numeric::max(row)
    } else {
        numeric::min(row)
    };
    let scaled: Vec<f64> = row.iter().map(|r| alpha * (r - anchor)).collect();
    anchor + numeric::log_mean_exp(&scaled) / alpha
}

pub fn aggregate_fixed_alpha(matrix: &GroupRewardMatrix, alpha: f64) -> Result<AggregatedReward> {
    if !alpha.is_finite() {
        return Err(Error::invalid("alpha must be finite"));
    }
    Ok(AggregatedReward::plain(
        matrix.rows.iter().map(|r| consensus(r, alpha)).collect(),
    ))
}

/// `softmax((1 - h) / T)`: groups with lower history get more weight.
pub fn adaptive_weights(history: &AlignmentHistory, temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let logits: Vec<f64> = history.h.iter().map(|h| (1.0 - h) / temperature).collect();
    Ok(numeric::softmax(&logits))
}

pub fn aggregate_adaptive(
    matrix: &GroupRewardMatrix,
    history: &AlignmentHistory,
    fi_threshold: f64,
    temperature: f64,
) -> Result<AggregatedReward> {
    if history.len() != matrix.num_groups() {
        return Err(Error::LengthMismatch {
            expected: matrix.num_groups(),
            actual: history.len(),
        });
    }
    let weights = adaptive_weights(history, temperature)?;
    let fi = matrix.fairness()?.fi;
    if fi >= fi_threshold {
        let mut out = aggregate_average(matrix);
        out.gate_taken = Some(Gate::AverageBranch);
        out.gate_fi = Some(fi);
        return Ok(out);
    }
    let per_question = matrix
        .rows
        .iter()
        .map(|row| {
            let scaled: Vec<f64> = row.iter().zip(&weights).map(|(r, a)| a * r).collect();
            numeric::log_mean_exp(&scaled)
        })
        .collect();
    Ok(AggregatedReward {
        per_question,
        weights_used: Some(weights),
        gate_taken: Some(Gate::WeightedBranch),
        gate_fi: Some(fi),
    })
}

/// Dispatch on a strategy. `history` is only read by the adaptive strategy.
pub fn aggregate(
    strategy: &AggregationStrategy,
    matrix: &GroupRewardMatrix,
    history: &AlignmentHistory,
) -> Result<AggregatedReward> {
    match *strategy {
        AggregationStrategy::Min => Ok(aggregate_min(matrix)),
        AggregationStrategy::Max => Ok(aggregate_max(matrix)),
        AggregationStrategy::Average => Ok(aggregate_average(matrix)),
        AggregationStrategy::FixedAlpha { alpha } => aggregate_fixed_alpha(matrix, alpha),
        AggregationStrategy::AdaptiveAlpha {
            fi_threshold,
            temperature,
        } => aggregate_adaptive(matrix, history, fi_threshold, temperature),
    }
}

/// EMA step `h ← β h + (1 - β) mean_j(shifted reward)`, clamped to [0, 1].
pub fn update_history(
    history: &AlignmentHistory,
    matrix: &GroupRewardMatrix,
) -> Result<AlignmentHistory> {
    if history.len() != matrix.num_groups() {
        return Err(Error::LengthMismatch {
            expected: matrix.num_groups(),
            actual: history.len(),
        });
    }
    let view = matrix.fairness_view();
    let beta = history.decay;
    let h = history
        .h
        .iter()
        .enumerate()
        .map(|(g, &h)| {
            let col: Vec<f64> = view.iter().map(|r| r[g]).collect();
            (beta * h + (1.0 - beta) * numeric::mean(&col)).clamp(0.0, 1.0)
        })
        .collect();
    Ok(AlignmentHistory { h, decay: beta })
}
