//! Bandit-style categorical policy trained with a clipped-surrogate PPO step.
//!
//! Each question owns a row of logits θ. In the prediction task the policy
//! emits a probability vector `y ~ Dirichlet(κ · softmax(θ))`; in the ranking
//! task it emits a permutation drawn from a Plackett–Luce model with weights
//! `softmax(θ)`. Both families have closed-form log-densities and gradients,
//! which is what the PPO ratio needs. Episodes are single-step, so the
//! advantage of a sample is its whitened aggregated reward.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::{digamma, ln_gamma};

use crate::error::{Error, Result};
use crate::metrics::{self, Prediction};
use crate::numeric;

/// Sampled Dirichlet components are floored here so log-densities stay finite.
pub const SAMPLE_FLOOR: f64 = 1e-12;

/// Whitening leaves the scale alone below this variance.
pub const WHITEN_MIN_VARIANCE: f64 = 1e-12;

pub const DEFAULT_CONCENTRATION: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Prediction,
    Ranking,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Prediction => "prediction",
            TaskKind::Ranking => "ranking",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub question_ids: Vec<String>,
    /// One logit row per question.
    pub logits: Vec<Vec<f64>>,
    pub task: TaskKind,
    /// Dirichlet concentration κ; unused by the ranking task.
    pub concentration: f64,
}

impl PolicyParams {
    /// All-zero logits, i.e. the uniform policy.
    pub fn uniform(
        question_ids: Vec<String>,
        options: &[usize],
        task: TaskKind,
        concentration: f64,
    ) -> Result<Self> {
        if question_ids.len() != options.len() {
            return Err(Error::LengthMismatch {
                expected: question_ids.len(),
                actual: options.len(),
            });
        }
        if !(concentration > 0.0 && concentration.is_finite()) {
            return Err(Error::invalid("concentration must be positive"));
        }
        if let Some(k) = options.iter().find(|&&k| k < 2) {
            return Err(Error::invalid(format!("need at least 2 options, got {k}")));
        }
        Ok(PolicyParams {
            logits: options.iter().map(|&k| vec![0.0; k]).collect(),
            question_ids,
            task,
            concentration,
        })
    }

    pub fn question_index(&self, id: &str) -> Result<usize> {
        self.question_ids
            .iter()
            .position(|q| q == id)
            .ok_or_else(|| Error::UnknownQuestion(id.to_string()))
    }

    fn zeros_like(&self) -> Vec<Vec<f64>> {
        self.logits.iter().map(|r| vec![0.0; r.len()]).collect()
    }
}

/// One round's samples. Entries may repeat a question.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rollout {
    pub question_ids: Vec<String>,
    /// Row of each entry in the policy's logit table.
    pub question_index: Vec<usize>,
    pub predictions: Vec<Prediction>,
    pub log_prob_old: Vec<f64>,
}

impl Rollout {
    pub fn len(&self) -> usize {
        self.predictions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predictions.is_empty()
    }
}

fn sample_dirichlet<R: Rng + ?Sized>(alpha: &[f64], rng: &mut R) -> Vec<f64> {
    let mut y: Vec<f64> = alpha
        .iter()
        .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng))
        .collect();
    let s: f64 = y.iter().sum();
    y.iter_mut().for_each(|v| *v = (*v / s).max(SAMPLE_FLOOR));
    let s: f64 = y.iter().sum();
    y.iter_mut().for_each(|v| *v /= s);
    y
}

fn sample_plackett_luce<R: Rng + ?Sized>(logits: &[f64], rng: &mut R) -> Vec<usize> {
    let mut remaining: Vec<usize> = (0..logits.len()).collect();
    let mut order = Vec::with_capacity(logits.len());
    while remaining.len() > 1 {
        let sub: Vec<f64> = remaining.iter().map(|&i| logits[i]).collect();
        let probs = numeric::softmax(&sub);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        order.push(remaining.remove(pick));
    }
    order.push(remaining[0]);
    order
}

/// Draw one prediction per entry of `questions`.
pub fn sample_rollout<R: Rng + ?Sized>(
    params: &PolicyParams,
    questions: &[String],
    rng: &mut R,
) -> Result<Rollout> {
    let lookup: HashMap<&str, usize> = params
        .question_ids
        .iter()
        .enumerate()
        .map(|(i, q)| (q.as_str(), i))
        .collect();
    let mut rollout = Rollout {
        question_ids: Vec::with_capacity(questions.len()),
        question_index: Vec::with_capacity(questions.len()),
        predictions: Vec::with_capacity(questions.len()),
        log_prob_old: Vec::with_capacity(questions.len()),
    };
    for id in questions {
        let q = *lookup
            .get(id.as_str())
            .ok_or_else(|| Error::UnknownQuestion(id.clone()))?;
        let theta = &params.logits[q];
        let prediction = match params.task {
            TaskKind::Prediction => {
                let alpha: Vec<f64> = numeric::softmax(theta)
                    .into_iter()
                    .map(|s| params.concentration * s)
                    .collect();
                Prediction::probs(sample_dirichlet(&alpha, rng))
            }
            TaskKind::Ranking => Prediction::ranking(sample_plackett_luce(theta, rng)),
        };
        let lp = log_prob_row(params, q, &prediction)?;
        if !lp.is_finite() {
            return Err(Error::invalid(format!(
                "non-finite log-probability for question `{id}`"
            )));
        }
        rollout.question_ids.push(id.clone());
        rollout.question_index.push(q);
        rollout.predictions.push(prediction);
        rollout.log_prob_old.push(lp);
    }
    Ok(rollout)
}

/// Log-density of a Dirichlet(α) at `y`.
pub fn dirichlet_log_density(alpha: &[f64], y: &[f64]) -> f64 {
    let total: f64 = alpha.iter().sum();
    ln_gamma(total)
        + alpha
            .iter()
            .zip(y)
            .map(|(&a, &v)| (a - 1.0) * v.ln() - ln_gamma(a))
            .sum::<f64>()
}

/// Log-probability of `order` under Plackett–Luce with weights `softmax(logits)`.
pub fn plackett_luce_log_prob(logits: &[f64], order: &[usize]) -> f64 {
    let mut lp = 0.0;
    for i in 0..order.len().saturating_sub(1) {
        let rest: Vec<f64> = order[i..].iter().map(|&o| logits[o]).collect();
        lp += logits[order[i]] - numeric::log_sum_exp(&rest);
    }
    lp
}

fn check_shape(params: &PolicyParams, q: usize, prediction: &Prediction) -> Result<()> {
    let k = params.logits[q].len();
    let ok = match (params.task, prediction) {
        (TaskKind::Prediction, Prediction::ProbabilityVector { probs }) => {
            probs.len() == k && metrics::check_distribution(probs).is_ok()
        }
        (TaskKind::Ranking, Prediction::Ranking { ranking }) => {
            let mut seen = vec![false; k];
            ranking.len() == k
                && ranking
                    .iter()
                    .all(|&i| i < k && !std::mem::replace(&mut seen[i], true))
        }
        _ => false,
    };
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!(
            "prediction does not match a {} policy with {k} options",
            params.task.name()
        )))
    }
}

fn log_prob_row(params: &PolicyParams, q: usize, prediction: &Prediction) -> Result<f64> {
    check_shape(params, q, prediction)?;
    let theta = &params.logits[q];
    Ok(match prediction {
        Prediction::ProbabilityVector { probs } => {
            let alpha: Vec<f64> = numeric::softmax(theta)
                .into_iter()
                .map(|s| params.concentration * s)
                .collect();
            dirichlet_log_density(&alpha, probs)
        }
        Prediction::Ranking { ranking } => plackett_luce_log_prob(theta, ranking),
    })
}

/// Exact log-probability (ranking) or log-density (prediction) of `prediction`.
pub fn log_prob(params: &PolicyParams, question_id: &str, prediction: &Prediction) -> Result<f64> {
    let q = params.question_index(question_id)?;
    log_prob_row(params, q, prediction)
}

/// Gradient of the log-probability with respect to the question's logits.
pub fn log_prob_grad(theta: &[f64], concentration: f64, prediction: &Prediction) -> Vec<f64> {
    match prediction {
        Prediction::ProbabilityVector { probs } => {
            let s = numeric::softmax(theta);
            let total = concentration;
            // d/dα_k of the log-density
            let g: Vec<f64> = s
                .iter()
                .zip(probs)
                .map(|(&sk, &y)| digamma(total) - digamma(concentration * sk) + y.ln())
                .collect();
            let sg: f64 = s.iter().zip(&g).map(|(a, b)| a * b).sum();
            s.iter()
                .zip(&g)
                .map(|(&sm, &gm)| concentration * sm * (gm - sg))
                .collect()
        }
        Prediction::Ranking { ranking } => {
            let mut grad = vec![0.0; theta.len()];
            for i in 0..ranking.len().saturating_sub(1) {
                let rest = &ranking[i..];
                let sub: Vec<f64> = rest.iter().map(|&o| theta[o]).collect();
                let p = numeric::softmax(&sub);
                grad[ranking[i]] += 1.0;
                for (&o, pi) in rest.iter().zip(p) {
                    grad[o] -= pi;
                }
            }
            grad
        }
    }
}

/// Zero-mean, unit-variance (population) rewards. Near-constant input is
/// only centered.
pub fn whiten(rewards: &[f64]) -> Result<Vec<f64>> {
    if rewards.len() < 2 {
        return Err(Error::invalid("whitening needs at least 2 rewards"));
    }
    let mu = numeric::mean(rewards);
    let var = numeric::population_variance(rewards);
    if var < WHITEN_MIN_VARIANCE {
        return Ok(rewards.iter().map(|r| r - mu).collect());
    }
    let sd = var.sqrt();
    Ok(rewards.iter().map(|r| (r - mu) / sd).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PpoConfig {
    pub clip_range: f64,
    pub kl_coefficient: f64,
    pub learning_rate: f64,
    pub ppo_epochs: usize,
    pub minibatches: usize,
    /// Kept for completeness; single-step episodes make it inert.
    pub discount: f64,
    /// Questions per round; 0 means every question, capped at 256.
    pub rollout_size: usize,
    pub samples_per_question: usize,
    pub whiten: bool,
    pub optimizer: OptimizerKind,
}

impl Default for PpoConfig {
    fn default() -> Self {
        PpoConfig {
            clip_range: 0.2,
            kl_coefficient: 0.05,
            learning_rate: 0.05,
            ppo_epochs: 2,
            minibatches: 8,
            discount: 1.0,
            rollout_size: 0,
            samples_per_question: 4,
            whiten: true,
            optimizer: OptimizerKind::Sgd,
        }
    }
}

pub const MAX_DEFAULT_BATCH: usize = 256;

impl PpoConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::invalid(m.to_string()));
        if !(self.clip_range > 0.0 && self.clip_range.is_finite()) {
            return bad("clip_range must be positive");
        }
        if !(self.kl_coefficient >= 0.0 && self.kl_coefficient.is_finite()) {
            return bad("kl_coefficient must be non-negative");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.discount > 0.0 && self.discount <= 1.0) {
            return bad("discount must lie in (0, 1]");
        }
        if self.ppo_epochs == 0 || self.minibatches == 0 || self.samples_per_question == 0 {
            return bad("ppo_epochs, minibatches and samples_per_question must be >= 1");
        }
        Ok(())
    }

    /// Number of questions drawn per round for a dataset of `available` questions.
    pub fn batch_questions(&self, available: usize) -> usize {
        if self.rollout_size == 0 {
            available.min(MAX_DEFAULT_BATCH)
        } else {
            self.rollout_size.min(available)
        }
    }
}

/// Value of `min(ρA, clip(ρ)A)` and its derivative in ρ.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipTerm {
    pub value: f64,
    pub d_ratio: f64,
}

pub fn clipped_objective(ratio: f64, advantage: f64, clip_range: f64) -> ClipTerm {
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip_range, 1.0 + clip_range) * advantage;
    if unclipped <= clipped {
        ClipTerm {
            value: unclipped,
            d_ratio: advantage,
        }
    } else {
        ClipTerm {
            value: clipped,
            d_ratio: 0.0,
        }
    }
}

/// Per-entry objective pieces at the current parameters.
struct EntryEval {
    ratio: f64,
    log_ratio: f64,
    clip: ClipTerm,
}

fn eval_entry(
    params: &PolicyParams,
    rollout: &Rollout,
    advantages: &[f64],
    i: usize,
    clip_range: f64,
) -> Result<EntryEval> {
    let lp = log_prob_row(params, rollout.question_index[i], &rollout.predictions[i])?;
    let log_ratio = lp - rollout.log_prob_old[i];
    let ratio = log_ratio.exp();
    Ok(EntryEval {
        ratio,
        log_ratio,
        clip: clipped_objective(ratio, advantages[i], clip_range),
    })
}

/// Minibatch objective
/// `mean_i [min(ρ_i A_i, clip(ρ_i) A_i) - c · ½ (ln ρ_i)²]`.
///
/// The KL penalty uses the squared log-ratio estimator, which is
/// non-negative and flat at the sampling policy.
pub fn surrogate(
    params: &PolicyParams,
    rollout: &Rollout,
    advantages: &[f64],
    entries: &[usize],
    config: &PpoConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for &i in entries {
        let e = eval_entry(params, rollout, advantages, i, config.clip_range)?;
        total += e.clip.value - config.kl_coefficient * 0.5 * e.log_ratio * e.log_ratio;
    }
    Ok(total / entries.len() as f64)
}

/// Analytic gradient of [`surrogate`] with respect to every logit.
pub fn surrogate_gradient(
    params: &PolicyParams,
    rollout: &Rollout,
    advantages: &[f64],
    entries: &[usize],
    config: &PpoConfig,
) -> Result<Vec<Vec<f64>>> {
    let mut grad = params.zeros_like();
    let n = entries.len() as f64;
    for &i in entries {
        let e = eval_entry(params, rollout, advantages, i, config.clip_range)?;
        // d/dlogπ of the clipped term is A·ρ on the active branch; the
        // penalty contributes -c·ln ρ.
        let coef = (e.clip.d_ratio * e.ratio - config.kl_coefficient * e.log_ratio) / n;
        if coef == 0.0 {
            continue;
        }
        let q = rollout.question_index[i];
        let g = log_prob_grad(&params.logits[q], params.concentration, &rollout.predictions[i]);
        for (acc, gk) in grad[q].iter_mut().zip(g) {
            *acc += coef * gk;
        }
    }
    Ok(grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PpoStats {
    /// Negated surrogate on the full rollout after the update.
    pub loss: f64,
    pub mean_ratio: f64,
    pub clip_fraction: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpoOutcome {
    pub params: PolicyParams,
    pub stats: PpoStats,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Run `ppo_epochs` passes of minibatch gradient ascent on the clipped
/// surrogate. `seed` drives the minibatch shuffle. Adam moments, when
/// selected, live for the duration of this call.
pub fn ppo_update(
    params: &PolicyParams,
    rollout: &Rollout,
    advantages: &[f64],
    config: &PpoConfig,
    seed: u64,
) -> Result<PpoOutcome> {
    if advantages.len() != rollout.len() {
        return Err(Error::LengthMismatch {
            expected: rollout.len(),
            actual: advantages.len(),
        });
    }
    if rollout.is_empty() {
        return Err(Error::invalid("empty rollout"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut current = params.clone();
    let mut adam = Adam {
        m: params.zeros_like(),
        v: params.zeros_like(),
        t: 0,
    };
    let mut order: Vec<usize> = (0..rollout.len()).collect();
    let chunks = config.minibatches.min(rollout.len());
    let chunk_len = rollout.len().div_ceil(chunks);

    for _ in 0..config.ppo_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(chunk_len) {
            let grad = surrogate_gradient(&current, rollout, advantages, batch, config)?;
            if let Some((q, _)) = grad
                .iter()
                .enumerate()
                .find(|(_, row)| row.iter().any(|g| !g.is_finite()))
            {
                return Err(Error::NonFiniteGradient(format!(
                    "question `{}`",
                    current.question_ids[q]
                )));
            }
            match config.optimizer {
                OptimizerKind::Sgd => {
                    for (row, g) in current.logits.iter_mut().zip(&grad) {
                        for (t, gk) in row.iter_mut().zip(g) {
                            *t += config.learning_rate * gk;
                        }
                    }
                }
                OptimizerKind::Adam => {
                    adam.t += 1;
                    let bc1 = 1.0 - ADAM_BETA1.powi(adam.t);
                    let bc2 = 1.0 - ADAM_BETA2.powi(adam.t);
                    for (q, row) in current.logits.iter_mut().enumerate() {
                        for (k, t) in row.iter_mut().enumerate() {
                            let g = grad[q][k];
                            let m = &mut adam.m[q][k];
                            let v = &mut adam.v[q][k];
                            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                            *t += config.learning_rate * (*m / bc1) / ((*v / bc2).sqrt() + ADAM_EPS);
                        }
                    }
                }
            }
        }
    }

    let all: Vec<usize> = (0..rollout.len()).collect();
    let mut ratio_sum = 0.0;
    let mut clipped = 0usize;
    for &i in &all {
        let e = eval_entry(&current, rollout, advantages, i, config.clip_range)?;
        ratio_sum += e.ratio;
        if (e.ratio - 1.0).abs() > config.clip_range {
            clipped += 1;
        }
    }
    let loss = -surrogate(&current, rollout, advantages, &all, config)?;
    Ok(PpoOutcome {
        params: current,
        stats: PpoStats {
            loss,
            mean_ratio: ratio_sum / rollout.len() as f64,
            clip_fraction: clipped as f64 / rollout.len() as f64,
        },
    })
}

/// Deterministic evaluation head: `softmax(θ)` or the descending-logit order.
pub fn greedy_prediction(params: &PolicyParams, question_id: &str) -> Result<Prediction> {
    let q = params.question_index(question_id)?;
    Ok(greedy_row(params, q))
}

pub(crate) fn greedy_row(params: &PolicyParams, q: usize) -> Prediction {
    let theta = &params.logits[q];
    match params.task {
        TaskKind::Prediction => Prediction::probs(numeric::softmax(theta)),
        TaskKind::Ranking => Prediction::ranking(metrics::to_ranking(theta)),
    }
}
