//! Per-question reward metrics comparing a policy prediction with a group's
//! target distribution.
//!
//! Distance metrics (Wasserstein, cosine, KL) need a probability-vector
//! prediction. Ranking metrics (Kendall tau, Borda, binary) work on
//! permutations; probability vectors are rank-converted first with
//! [`to_ranking`]. Every metric reports its native `raw` value and an
//! `oriented` value where higher is always better.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Additive smoothing applied to the prediction before taking KL.
pub const KL_EPSILON: f64 = 1e-8;

const DIST_TOLERANCE: f64 = 1e-6;

/// A policy output for one question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Prediction {
    ProbabilityVector { probs: Vec<f64> },
    /// Option indices from most to least preferred.
    Ranking { ranking: Vec<usize> },
}

impl Prediction {
    pub fn probs(probs: Vec<f64>) -> Self {
        Prediction::ProbabilityVector { probs }
    }

    pub fn ranking(ranking: Vec<usize>) -> Self {
        Prediction::Ranking { ranking }
    }

    pub fn len(&self) -> usize {
        match self {
            Prediction::ProbabilityVector { probs } => probs.len(),
            Prediction::Ranking { ranking } => ranking.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The prediction as a ranking, converting probabilities if needed.
    pub fn as_ranking(&self) -> Vec<usize> {
        match self {
            Prediction::ProbabilityVector { probs } => to_ranking(probs),
            Prediction::Ranking { ranking } => ranking.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Wasserstein,
    Cosine,
    Kl,
    KendallTau,
    Borda,
    Binary,
}

impl MetricKind {
    pub const ALL: [MetricKind; 6] = [
        MetricKind::Wasserstein,
        MetricKind::Cosine,
        MetricKind::Kl,
        MetricKind::KendallTau,
        MetricKind::Borda,
        MetricKind::Binary,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Wasserstein => "wasserstein",
            MetricKind::Cosine => "cosine",
            MetricKind::Kl => "kl",
            MetricKind::KendallTau => "kendall_tau",
            MetricKind::Borda => "borda",
            MetricKind::Binary => "binary",
        }
    }

    /// Wasserstein, cosine and KL compare distributions directly.
    pub fn is_distance(self) -> bool {
        matches!(
            self,
            MetricKind::Wasserstein | MetricKind::Cosine | MetricKind::Kl
        )
    }

    pub fn is_ranking(self) -> bool {
        !self.is_distance()
    }

    /// Map an oriented reward into [0, 1] for fairness computations.
    /// Kendall tau and cosine use `(x + 1) / 2`; the rest already live in [0, 1].
    pub fn fairness_shift(self, oriented: f64) -> f64 {
        match self {
            MetricKind::KendallTau | MetricKind::Cosine => (oriented + 1.0) / 2.0,
            _ => oriented,
        }
    }

    /// Best attainable oriented reward.
    pub fn best_oriented(self) -> f64 {
        1.0
    }
}

impl fmt::Display for MetricKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MetricKind::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown metric `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub raw: f64,
    pub oriented: f64,
}

fn check_pair(y: &[f64], p: &[f64]) -> Result<()> {
    if y.len() != p.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            actual: y.len(),
        });
    }
    check_distribution(y)?;
    check_distribution(p)
}

pub(crate) fn check_distribution(v: &[f64]) -> Result<()> {
    if v.len() < 2 {
        return Err(Error::NotDistribution(format!(
            "need at least 2 entries, got {}",
            v.len()
        )));
    }
    if let Some(x) = v.iter().find(|x| !x.is_finite() || **x < -DIST_TOLERANCE) {
        return Err(Error::NotDistribution(format!("entry {x}")));
    }
    let sum: f64 = v.iter().sum();
    if (sum - 1.0).abs() > DIST_TOLERANCE {
        return Err(Error::NotDistribution(format!("sum {sum}")));
    }
    Ok(())
}

fn check_permutation(r: &[usize]) -> Result<()> {
    let mut seen = vec![false; r.len()];
    for &i in r {
        if i >= r.len() || std::mem::replace(&mut seen[i], true) {
            return Err(Error::InvalidPermutation {
                len: r.len(),
                detail: format!("{r:?}"),
            });
        }
    }
    Ok(())
}

fn check_rank_pair(y: &[usize], p: &[usize]) -> Result<()> {
    if y.len() != p.len() {
        return Err(Error::LengthMismatch {
            expected: p.len(),
            actual: y.len(),
        });
    }
    check_permutation(y)?;
    check_permutation(p)
}

/// W1 on unit-spaced ordinal support, divided by K - 1.
pub fn wasserstein(y: &[f64], p: &[f64]) -> Result<MetricValue> {
    check_pair(y, p)?;
    let k = y.len();
    let (mut cy, mut cp, mut total) = (0.0, 0.0, 0.0);
    for i in 0..k - 1 {
        cy += y[i];
        cp += p[i];
        total += (cy - cp).abs();
    }
    let raw = (total / (k - 1) as f64).clamp(0.0, 1.0);
    Ok(MetricValue {
        raw,
        oriented: 1.0 - raw,
    })
}

pub fn cosine(y: &[f64], p: &[f64]) -> Result<MetricValue> {
    check_pair(y, p)?;
    let dot: f64 = y.iter().zip(p).map(|(a, b)| a * b).sum();
    let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt();
    let np = p.iter().map(|a| a * a).sum::<f64>().sqrt();
    let raw = (dot / (ny * np)).clamp(-1.0, 1.0);
    Ok(MetricValue { raw, oriented: raw })
}

/// `D_KL(p || ỹ)` with `ỹ = (y + ε) / (1 + Kε)`; oriented as `exp(-raw)`.
pub fn kl_divergence(y: &[f64], p: &[f64]) -> Result<MetricValue> {
    check_pair(y, p)?;
    let norm = 1.0 + KL_EPSILON * y.len() as f64;
    let raw: f64 = p
        .iter()
        .zip(y)
        .filter(|(pk, _)| **pk > 0.0)
        .map(|(pk, yk)| pk * (pk / ((yk + KL_EPSILON) / norm)).ln())
        .sum::<f64>()
        .max(0.0);
    Ok(MetricValue {
        raw,
        oriented: (-raw).exp(),
    })
}

/// Options by descending probability, ties broken by ascending index.
pub fn to_ranking(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    // Stable sort keeps canonical order among equal probabilities.
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    idx
}

fn positions(order: &[usize]) -> Vec<usize> {
    let mut pos = vec![0; order.len()];
    for (rank, &opt) in order.iter().enumerate() {
        pos[opt] = rank;
    }
    pos
}

/// Tau-a over option pairs.
pub fn kendall_tau(y_rank: &[usize], p_rank: &[usize]) -> Result<MetricValue> {
    check_rank_pair(y_rank, p_rank)?;
    let k = y_rank.len();
    if k < 2 {
        return Err(Error::invalid("kendall tau needs K >= 2"));
    }
    let (py, pp) = (positions(y_rank), positions(p_rank));
    let mut score: i64 = 0;
    for a in 0..k {
        for b in a + 1..k {
            let sy = (py[a] as i64 - py[b] as i64).signum();
            let sp = (pp[a] as i64 - pp[b] as i64).signum();
            score += sy * sp;
        }
    }
    let raw = score as f64 / (k * (k - 1) / 2) as f64;
    Ok(MetricValue { raw, oriented: raw })
}

/// Position-weighted match count: rank k (1-based) carries weight K - k + 1.
pub fn borda(y_rank: &[usize], p_rank: &[usize]) -> Result<MetricValue> {
    check_rank_pair(y_rank, p_rank)?;
    let k = y_rank.len();
    let hits: usize = y_rank
        .iter()
        .zip(p_rank)
        .enumerate()
        .filter(|(_, (a, b))| a == b)
        .map(|(i, _)| k - i)
        .sum();
    let raw = hits as f64 / (k * (k + 1) / 2) as f64;
    Ok(MetricValue { raw, oriented: raw })
}

pub fn binary(y_rank: &[usize], p_rank: &[usize]) -> Result<MetricValue> {
    check_rank_pair(y_rank, p_rank)?;
    let raw = if y_rank == p_rank { 1.0 } else { 0.0 };
    Ok(MetricValue { raw, oriented: raw })
}

/// Score `prediction` against `target` with the given metric.
pub fn evaluate(kind: MetricKind, prediction: &Prediction, target: &[f64]) -> Result<MetricValue> {
    if kind.is_distance() {
        let Prediction::ProbabilityVector { probs } = prediction else {
            return Err(Error::IncompatiblePrediction { metric: kind.name() });
        };
        return match kind {
            MetricKind::Wasserstein => wasserstein(probs, target),
            MetricKind::Cosine => cosine(probs, target),
            _ => kl_divergence(probs, target),
        };
    }
    check_distribution(target)?;
    let y = prediction.as_ranking();
    let p = to_ranking(target);
    match kind {
        MetricKind::KendallTau => kendall_tau(&y, &p),
        MetricKind::Borda => borda(&y, &p),
        _ => binary(&y, &p),
    }
}
