//! The federated loop: the server samples a rollout, broadcasts the
//! predictions, each group client scores them against its private targets
//! and replies with scalars only, and the server aggregates, updates the
//! alignment history, whitens and takes a PPO step.
//!
//! Server state is an immutable snapshot; [`Federation::run_round`] returns a
//! new one, so a failed round leaves the previous state untouched.

use std::collections::HashMap;

use rand::seq::index;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{
    self, AggregatedReward, AggregationStrategy, AlignmentHistory, Gate, GroupRewardMatrix,
};
use crate::error::{Error, Result};
use crate::fairness::{self, FairnessReport};
use crate::metrics::{self, MetricKind, Prediction};
use crate::numeric;
use crate::policy::{self, PolicyParams, PpoConfig, PpoStats, TaskKind};
use crate::prefdata::{GroupPreference, PreferenceDataset};

/// One group acting as a federated client. Its targets never leave it.
#[derive(Debug, Clone)]
pub struct GroupClient {
    group_id: String,
    targets: HashMap<String, Vec<f64>>,
    metric: MetricKind,
}

impl GroupClient {
    pub fn new(group_id: impl Into<String>, rows: Vec<GroupPreference>, metric: MetricKind) -> Result<Self> {
        let group_id = group_id.into();
        let mut targets = HashMap::with_capacity(rows.len());
        for row in rows {
            if row.group_id != group_id {
                return Err(Error::invalid(format!(
                    "row for group `{}` given to client `{group_id}`",
                    row.group_id
                )));
            }
            targets.insert(row.question_id, row.probs);
        }
        Ok(GroupClient {
            group_id,
            targets,
            metric,
        })
    }

    pub fn from_dataset(dataset: &PreferenceDataset, group: usize, metric: MetricKind) -> Self {
        let rows = dataset.group_rows(group);
        GroupClient::new(dataset.groups()[group].clone(), rows, metric)
            .expect("dataset rows belong to their group")
    }

    pub fn group_id(&self) -> &str {
        &self.group_id
    }

    pub fn metric(&self) -> MetricKind {
        self.metric
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutBroadcast {
    pub round: usize,
    pub question_ids: Vec<String>,
    pub predictions: Vec<Prediction>,
}

/// A client's answer: one scalar pair per broadcast entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RewardReply {
    pub round: usize,
    pub group_id: String,
    pub oriented: Vec<f64>,
    pub raw: Vec<f64>,
}

/// Score every broadcast entry against the client's private target.
pub fn client_evaluate(client: &GroupClient, broadcast: &RolloutBroadcast) -> Result<RewardReply> {
    if broadcast.question_ids.len() != broadcast.predictions.len() {
        return Err(Error::LengthMismatch {
            expected: broadcast.question_ids.len(),
            actual: broadcast.predictions.len(),
        });
    }
    let mut oriented = Vec::with_capacity(broadcast.predictions.len());
    let mut raw = Vec::with_capacity(broadcast.predictions.len());
    for (q, pred) in broadcast.question_ids.iter().zip(&broadcast.predictions) {
        let target = client
            .targets
            .get(q)
            .ok_or_else(|| Error::UnknownQuestion(q.clone()))?;
        let v = metrics::evaluate(client.metric, pred, target)?;
        oriented.push(v.oriented);
        raw.push(v.raw);
    }
    Ok(RewardReply {
        round: broadcast.round,
        group_id: client.group_id.clone(),
        oriented,
        raw,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FederationConfig {
    pub task: TaskKind,
    pub metric: MetricKind,
    pub strategy: AggregationStrategy,
    pub ppo: PpoConfig,
    pub history_decay: f64,
    pub history_init: f64,
    pub concentration: f64,
    pub seed: u64,
}

impl FederationConfig {
    pub fn new(task: TaskKind, metric: MetricKind, strategy: AggregationStrategy, seed: u64) -> Self {
        FederationConfig {
            task,
            metric,
            strategy,
            ppo: PpoConfig::default(),
            history_decay: aggregate::DEFAULT_HISTORY_DECAY,
            history_init: aggregate::DEFAULT_HISTORY_INIT,
            concentration: policy::DEFAULT_CONCENTRATION,
            seed,
        }
    }
}

/// Everything that changes between rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServerState {
    pub round: usize,
    pub params: PolicyParams,
    pub history: AlignmentHistory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateSummary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_taken: Option<Gate>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gate_fi: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weights_used: Option<Vec<f64>>,
}

impl AggregateSummary {
    fn from_reward(r: &AggregatedReward) -> Self {
        AggregateSummary {
            mean: numeric::mean(&r.per_question),
            min: numeric::min(&r.per_question),
            max: numeric::max(&r.per_question),
            gate_taken: r.gate_taken,
            gate_fi: r.gate_fi,
            weights_used: r.weights_used.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub fairness: FairnessReport,
    pub aggregate: AggregateSummary,
    /// Aggregated reward of every rollout entry, before whitening.
    pub aggregated_rewards: Vec<f64>,
    /// Per-group mean oriented reward over the rollout, in group order.
    pub group_mean_reward: Vec<f64>,
    /// History after this round's update.
    pub history: Vec<f64>,
    pub policy: PpoStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricEvaluation {
    pub metric: MetricKind,
    pub fi: f64,
    pub avg_as: f64,
    pub min_as: f64,
    /// Per-group mean oriented reward.
    pub group_means: Vec<f64>,
    /// Per-group mean raw metric value.
    pub raw_group_means: Vec<f64>,
    pub per_question_cov: Vec<f64>,
}

impl MetricEvaluation {
    pub fn score(&self, score: ScoreKind) -> f64 {
        match score {
            ScoreKind::AvgAs => self.avg_as,
            ScoreKind::MinAs => self.min_as,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationRecord {
    /// Number of completed update rounds when the evaluation ran.
    pub round: usize,
    pub metrics: Vec<MetricEvaluation>,
}

impl EvaluationRecord {
    pub fn get(&self, metric: MetricKind) -> Option<&MetricEvaluation> {
        self.metrics.iter().find(|m| m.metric == metric)
    }
}

/// One line of the record stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogLine {
    Evaluation(EvaluationRecord),
    Round(RoundRecord),
}

/// Greedy-head evaluation of `params` on the whole dataset for each metric.
pub fn evaluate_policy(
    params: &PolicyParams,
    dataset: &PreferenceDataset,
    metric_kinds: &[MetricKind],
) -> Result<Vec<MetricEvaluation>> {
    let rows: Vec<usize> = dataset
        .questions()
        .iter()
        .map(|q| params.question_index(&q.id))
        .collect::<Result<_>>()?;
    let predictions: Vec<Prediction> = rows.iter().map(|&r| policy::greedy_row(params, r)).collect();
    let l = dataset.num_groups();
    metric_kinds
        .iter()
        .map(|&metric| {
            if params.task == TaskKind::Ranking && metric.is_distance() {
                return Err(Error::IncompatiblePrediction {
                    metric: metric.name(),
                });
            }
            let mut oriented = vec![vec![0.0; l]; predictions.len()];
            let mut raw = vec![vec![0.0; l]; predictions.len()];
            for (q, pred) in predictions.iter().enumerate() {
                for g in 0..l {
                    let v = metrics::evaluate(metric, pred, dataset.target(g, q))?;
                    oriented[q][g] = v.oriented;
                    raw[q][g] = v.raw;
                }
            }
            let column_means = |m: &[Vec<f64>]| -> Vec<f64> {
                (0..l)
                    .map(|g| numeric::mean(&m.iter().map(|r| r[g]).collect::<Vec<_>>()))
                    .collect()
            };
            let group_means = column_means(&oriented);
            let shifted: Vec<Vec<f64>> = oriented
                .iter()
                .map(|r| r.iter().map(|&x| metric.fairness_shift(x)).collect())
                .collect();
            let report = fairness::fairness_index_rows(&shifted, l)?;
            Ok(MetricEvaluation {
                metric,
                fi: report.fi,
                avg_as: numeric::mean(&group_means),
                min_as: numeric::min(&group_means),
                raw_group_means: column_means(&raw),
                group_means,
                per_question_cov: report.per_question_cov,
            })
        })
        .collect()
}

/// Static setup of a federated run: clients, question set and configuration.
#[derive(Debug, Clone)]
pub struct Federation {
    clients: Vec<GroupClient>,
    question_ids: Vec<String>,
    options: Vec<usize>,
    config: FederationConfig,
}

impl Federation {
    pub fn new(dataset: &PreferenceDataset, config: FederationConfig) -> Result<Self> {
        let clients = (0..dataset.num_groups())
            .map(|g| GroupClient::from_dataset(dataset, g, config.metric))
            .collect();
        let question_ids = dataset.questions().iter().map(|q| q.id.clone()).collect();
        let options = dataset.questions().iter().map(|q| q.num_options()).collect();
        Self::with_clients(clients, question_ids, options, config)
    }

    /// Build from explicit clients. Column order of every reward matrix
    /// follows `clients`.
    pub fn with_clients(
        clients: Vec<GroupClient>,
        question_ids: Vec<String>,
        options: Vec<usize>,
        config: FederationConfig,
    ) -> Result<Self> {
        if clients.len() < 2 {
            return Err(Error::invalid("a federation needs at least 2 group clients"));
        }
        if config.task == TaskKind::Ranking && config.metric.is_distance() {
            return Err(Error::IncompatiblePrediction {
                metric: config.metric.name(),
            });
        }
        config.strategy.validate()?;
        config.ppo.validate()?;
        let per_round = config.ppo.batch_questions(question_ids.len()) * config.ppo.samples_per_question;
        if config.ppo.whiten && per_round < 2 {
            return Err(Error::invalid(
                "whitening needs at least 2 rollout entries per round",
            ));
        }
        // validates decay/init
        AlignmentHistory::new(clients.len(), config.history_init, config.history_decay)?;
        PolicyParams::uniform(question_ids.clone(), &options, config.task, config.concentration)?;
        Ok(Federation {
            clients,
            question_ids,
            options,
            config,
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn clients(&self) -> &[GroupClient] {
        &self.clients
    }

    pub fn initial_state(&self) -> ServerState {
        ServerState {
            round: 0,
            params: PolicyParams::uniform(
                self.question_ids.clone(),
                &self.options,
                self.config.task,
                self.config.concentration,
            )
            .expect("validated in constructor"),
            history: AlignmentHistory::new(
                self.clients.len(),
                self.config.history_init,
                self.config.history_decay,
            )
            .expect("validated in constructor"),
        }
    }

    fn round_rng(&self, round: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(round as u64);
        rng
    }

    /// Collect replies from every client and assemble the reward matrix in
    /// client order.
    pub fn collect_rewards(&self, broadcast: &RolloutBroadcast) -> Result<GroupRewardMatrix> {
        let replies: Vec<RewardReply> = self
            .clients
            .par_iter()
            .map(|c| {
                client_evaluate(c, broadcast).map_err(|e| Error::Client {
                    group: c.group_id.clone(),
                    source: Box::new(e),
                })
            })
            .collect::<Result<_>>()?;
        let by_group: HashMap<&str, &RewardReply> =
            replies.iter().map(|r| (r.group_id.as_str(), r)).collect();
        let n = broadcast.question_ids.len();
        let mut rows = vec![Vec::with_capacity(self.clients.len()); n];
        for c in &self.clients {
            let reply = by_group[c.group_id.as_str()];
            if reply.round != broadcast.round || reply.oriented.len() != n {
                return Err(Error::Client {
                    group: c.group_id.clone(),
                    source: Box::new(Error::invalid("reply does not match broadcast")),
                });
            }
            for (row, v) in rows.iter_mut().zip(&reply.oriented) {
                row.push(*v);
            }
        }
        Ok(GroupRewardMatrix::new(
            broadcast.question_ids.clone(),
            self.clients.iter().map(|c| c.group_id.clone()).collect(),
            rows,
        )?
        .with_metric(self.config.metric))
    }

    /// One full round. The input state is never modified.
    pub fn run_round(&self, state: &ServerState) -> Result<(ServerState, RoundRecord)> {
        let ppo = &self.config.ppo;
        let mut rng = self.round_rng(state.round);
        let n_q = self.question_ids.len();
        let batch = ppo.batch_questions(n_q);
        let picked: Vec<usize> = if batch == n_q {
            (0..n_q).collect()
        } else {
            let mut v = index::sample(&mut rng, n_q, batch).into_vec();
            v.sort_unstable();
            v
        };
        let entries: Vec<String> = picked
            .iter()
            .flat_map(|&q| std::iter::repeat_n(self.question_ids[q].clone(), ppo.samples_per_question))
            .collect();

        let rollout = policy::sample_rollout(&state.params, &entries, &mut rng)?;
        let broadcast = RolloutBroadcast {
            round: state.round,
            question_ids: rollout.question_ids.clone(),
            predictions: rollout.predictions.clone(),
        };
        let matrix = self.collect_rewards(&broadcast)?;
        let fairness = matrix.fairness()?;
        let aggregated = aggregate::aggregate(&self.config.strategy, &matrix, &state.history)?;
        let history = aggregate::update_history(&state.history, &matrix)?;
        let advantages = if ppo.whiten {
            policy::whiten(&aggregated.per_question)?
        } else {
            aggregated.per_question.clone()
        };
        let update_seed = rng.next_u64();
        let outcome = policy::ppo_update(&state.params, &rollout, &advantages, ppo, update_seed)?;

        let record = RoundRecord {
            round: state.round,
            fairness,
            aggregate: AggregateSummary::from_reward(&aggregated),
            aggregated_rewards: aggregated.per_question,
            group_mean_reward: matrix.group_means(),
            history: history.h.clone(),
            policy: outcome.stats,
        };
        let next = ServerState {
            round: state.round + 1,
            params: outcome.params,
            history,
        };
        Ok((next, record))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    #[default]
    AvgAs,
    MinAs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub metric: MetricKind,
    pub threshold: f64,
    #[serde(default)]
    pub score: ScoreKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPlan {
    pub rounds: usize,
    /// Evaluate every this many rounds; 0 evaluates only at start and end.
    pub eval_interval: usize,
    pub eval_metrics: Vec<MetricKind>,
    pub early_stop: Option<EarlyStop>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingOutcome {
    pub rounds: Vec<RoundRecord>,
    pub evaluations: Vec<EvaluationRecord>,
    pub final_state: ServerState,
    pub stopped_early: bool,
}

impl TrainingOutcome {
    /// Interleaved record stream: each evaluation follows the round that
    /// preceded it.
    pub fn log_lines(&self) -> Vec<LogLine> {
        let mut out = Vec::with_capacity(self.rounds.len() + self.evaluations.len());
        let mut evals = self.evaluations.iter().peekable();
        let mut push_evals = |done: usize, out: &mut Vec<LogLine>| {
            while let Some(e) = evals.next_if(|e| e.round == done) {
                out.push(LogLine::Evaluation(e.clone()));
            }
        };
        push_evals(0, &mut out);
        for r in &self.rounds {
            out.push(LogLine::Round(r.clone()));
            push_evals(r.round + 1, &mut out);
        }
        out
    }

    pub fn final_evaluation(&self) -> Option<&EvaluationRecord> {
        self.evaluations.last()
    }
}

/// Run up to `plan.rounds` rounds, evaluating on the full dataset at the
/// start, every `eval_interval` rounds and at the end. Stops early when the
/// configured score reaches its threshold at an evaluation point.
pub fn run_training(
    federation: &Federation,
    dataset: &PreferenceDataset,
    plan: &TrainingPlan,
) -> Result<TrainingOutcome> {
    let mut eval_metrics = plan.eval_metrics.clone();
    if let Some(stop) = &plan.early_stop {
        if !eval_metrics.contains(&stop.metric) {
            eval_metrics.push(stop.metric);
        }
    }
    let evaluate = |state: &ServerState| -> Result<EvaluationRecord> {
        Ok(EvaluationRecord {
            round: state.round,
            metrics: evaluate_policy(&state.params, dataset, &eval_metrics)?,
        })
    };
    let should_stop = |e: &EvaluationRecord| {
        plan.early_stop.as_ref().is_some_and(|stop| {
            e.get(stop.metric)
                .is_some_and(|m| m.score(stop.score) >= stop.threshold)
        })
    };

    let mut state = federation.initial_state();
    let mut rounds = Vec::with_capacity(plan.rounds);
    let mut evaluations = vec![evaluate(&state)?];
    let mut stopped_early = should_stop(&evaluations[0]);
    while !stopped_early && state.round < plan.rounds {
        let (next, record) = federation.run_round(&state).map_err(|e| Error::Round {
            round: state.round,
            source: Box::new(e),
        })?;
        state = next;
        rounds.push(record);
        let last = state.round == plan.rounds;
        if last || (plan.eval_interval > 0 && state.round.is_multiple_of(plan.eval_interval)) {
            let e = evaluate(&state)?;
            stopped_early = !last && should_stop(&e);
            evaluations.push(e);
        }
    }
    Ok(TrainingOutcome {
        rounds,
        evaluations,
        final_state: state,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prefdata::{generate_synthetic, SyntheticSpec};

    fn dataset(eta: f64, groups: usize, questions: usize) -> PreferenceDataset {
        generate_synthetic(&SyntheticSpec {
            num_groups: groups,
            num_questions: questions,
            options_per_question: 4,
            heterogeneity: eta,
            seed: 7,
        })
        .unwrap()
    }

    fn federation(ds: &PreferenceDataset, strategy: AggregationStrategy) -> Federation {
        Federation::new(
            ds,
            FederationConfig::new(TaskKind::Prediction, MetricKind::Cosine, strategy, 42),
        )
        .unwrap()
    }

    #[test]
    fn client_reply_for_exact_prediction() {
        let ds = dataset(0.5, 2, 2);
        let client = GroupClient::from_dataset(&ds, 0, MetricKind::Cosine);
        let b = RolloutBroadcast {
            round: 3,
            question_ids: vec![ds.questions()[0].id.clone(), ds.questions()[1].id.clone()],
            predictions: vec![
                Prediction::probs(ds.target(0, 0).to_vec()),
                Prediction::probs(ds.target(0, 1).to_vec()),
            ],
        };
        let reply = client_evaluate(&client, &b).unwrap();
        assert_eq!(reply.round, 3);
        assert_eq!(reply.oriented.len(), 2);
        for v in reply.oriented {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_targets_give_identical_replies() {
        let ds = dataset(0.0, 3, 3);
        let b = RolloutBroadcast {
            round: 0,
            question_ids: ds.questions().iter().map(|q| q.id.clone()).collect(),
            predictions: vec![Prediction::probs(vec![0.1, 0.2, 0.3, 0.4]); 3],
        };
        let a = client_evaluate(&GroupClient::from_dataset(&ds, 0, MetricKind::Kl), &b).unwrap();
        let c = client_evaluate(&GroupClient::from_dataset(&ds, 2, MetricKind::Kl), &b).unwrap();
        assert_eq!(a.oriented, c.oriented);
        assert_eq!(a.raw, c.raw);
    }

    #[test]
    fn unknown_question_is_an_error() {
        let ds = dataset(0.5, 2, 1);
        let client = GroupClient::from_dataset(&ds, 0, MetricKind::Cosine);
        let b = RolloutBroadcast {
            round: 0,
            question_ids: vec!["nope".into()],
            predictions: vec![Prediction::probs(vec![0.25; 4])],
        };
        assert!(matches!(client_evaluate(&client, &b), Err(Error::UnknownQuestion(_))));
    }

    #[test]
    fn min_strategy_takes_columnwise_minimum() {
        let ds = dataset(0.7, 3, 4);
        let fed = federation(&ds, AggregationStrategy::Min);
        let state = fed.initial_state();
        let (_, record) = fed.run_round(&state).unwrap();
        // replay the sampled rollout to rebuild the matrix
        let mut rng = fed.round_rng(0);
        let entries: Vec<String> = ds
            .questions()
            .iter()
            .flat_map(|q| std::iter::repeat_n(q.id.clone(), 4))
            .collect();
        let rollout = policy::sample_rollout(&state.params, &entries, &mut rng).unwrap();
        let matrix = fed
            .collect_rewards(&RolloutBroadcast {
                round: 0,
                question_ids: rollout.question_ids,
                predictions: rollout.predictions,
            })
            .unwrap();
        let mins: Vec<f64> = matrix.rows().iter().map(|r| numeric::min(r)).collect();
        assert_eq!(record.aggregated_rewards, mins);
    }

    #[test]
    fn homogeneous_round_takes_average_branch() {
        let ds = dataset(0.0, 3, 4);
        let fed = federation(&ds, AggregationStrategy::adaptive());
        let (_, record) = fed.run_round(&fed.initial_state()).unwrap();
        assert_eq!(record.fairness.fi, 1.0);
        assert_eq!(record.aggregate.gate_taken, Some(Gate::AverageBranch));
    }

    #[test]
    fn failed_round_is_atomic() {
        let ds = dataset(0.5, 2, 3);
        let mut rows = ds.group_rows(1);
        rows.pop();
        let clients = vec![
            GroupClient::from_dataset(&ds, 0, MetricKind::Cosine),
            GroupClient::new(ds.groups()[1].clone(), rows, MetricKind::Cosine).unwrap(),
        ];
        let fed = Federation::with_clients(
            clients,
            ds.questions().iter().map(|q| q.id.clone()).collect(),
            vec![4; 3],
            FederationConfig::new(TaskKind::Prediction, MetricKind::Cosine, AggregationStrategy::Average, 1),
        )
        .unwrap();
        let state = fed.initial_state();
        let before = state.clone();
        let err = fed.run_round(&state).unwrap_err();
        assert!(matches!(err, Error::Client { .. }), "{err}");
        assert_eq!(state, before);
    }

    #[test]
    fn ranking_task_rejects_distance_metric() {
        let ds = dataset(0.5, 2, 2);
        let cfg = FederationConfig::new(
            TaskKind::Ranking,
            MetricKind::Wasserstein,
            AggregationStrategy::Average,
            0,
        );
        assert!(Federation::new(&ds, cfg).is_err());
        let params =
            PolicyParams::uniform(vec!["q0000".into(), "q0001".into()], &[4, 4], TaskKind::Ranking, 1.0)
                .unwrap();
        assert!(evaluate_policy(&params, &ds, &[MetricKind::Cosine]).is_err());
    }

    #[test]
    fn evaluation_arithmetic() {
        let ds = dataset(0.6, 2, 5);
        let params = PolicyParams::uniform(
            ds.questions().iter().map(|q| q.id.clone()).collect(),
            &[4; 5],
            TaskKind::Prediction,
            50.0,
        )
        .unwrap();
        let evals = evaluate_policy(&params, &ds, &[MetricKind::Wasserstein, MetricKind::Borda]).unwrap();
        for e in evals {
            assert!(e.min_as <= e.avg_as);
            assert!((e.avg_as - numeric::mean(&e.group_means)).abs() < 1e-15);
            assert!((e.fi - FairnessReport::fi_from_covs(&e.per_question_cov)).abs() < 1e-15);
        }
    }

    #[test]
    fn training_loop_contract() {
        let ds = dataset(0.5, 2, 3);
        let fed = federation(&ds, AggregationStrategy::Average);
        let plan = |rounds, early_stop| TrainingPlan {
            rounds,
            eval_interval: 2,
            eval_metrics: vec![MetricKind::Cosine],
            early_stop,
        };
        let out = run_training(&fed, &ds, &plan(0, None)).unwrap();
        assert!(out.rounds.is_empty());
        assert_eq!(out.evaluations.len(), 1);
        assert_eq!(out.final_state, fed.initial_state());

        let out = run_training(
            &fed,
            &ds,
            &plan(
                5,
                Some(EarlyStop {
                    metric: MetricKind::Cosine,
                    threshold: -1.0,
                    score: ScoreKind::MinAs,
                }),
            ),
        )
        .unwrap();
        assert!(out.rounds.is_empty() && out.stopped_early);
        assert_eq!(out.evaluations.len(), 1);

        let out = run_training(&fed, &ds, &plan(5, None)).unwrap();
        let idx: Vec<usize> = out.rounds.iter().map(|r| r.round).collect();
        assert_eq!(idx, vec![0, 1, 2, 3, 4]);
        let eval_rounds: Vec<usize> = out.evaluations.iter().map(|e| e.round).collect();
        assert_eq!(eval_rounds, vec![0, 2, 4, 5]);
        let lines = out.log_lines();
        assert_eq!(lines.len(), 9);
        assert!(matches!(lines[0], LogLine::Evaluation(_)));
        assert!(matches!(lines[8], LogLine::Evaluation(ref e) if e.round == 5));
    }

    #[test]
    fn reply_carries_no_distribution() {
        let reply = RewardReply {
            round: 0,
            group_id: "g".into(),
            oriented: vec![0.5],
            raw: vec![0.5],
        };
        let v = serde_json::to_value(&reply).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        assert_eq!(keys, ["group_id", "oriented", "raw", "round"]);
    }
}
