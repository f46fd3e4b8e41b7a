//! Declarative run configs, the metric × strategy grid runner and result
//! files.
//!
//! A run writes `report.json`, `rounds.jsonl` and `summary.csv` to its output
//! directory. A grid writes one run directory per cell plus
//! `grid_summary.csv` and `grid_report.json`. None of the outputs carry
//! timestamps, so identical configs give identical bytes.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{self, AggregationStrategy};
use crate::error::{Error, Result};
use crate::fedsim::{
    self, EarlyStop, EvaluationRecord, Federation, FederationConfig, LogLine, TrainingPlan,
};
use crate::metrics::MetricKind;
use crate::policy::{self, PpoConfig, TaskKind};
use crate::prefdata::{self, DatasetFormat, PreferenceDataset, SyntheticSpec};

pub const ENV_OUTPUT_DIR: &str = "FEDREWARD_OUTPUT_DIR";
pub const ENV_JOBS: &str = "FEDREWARD_JOBS";

pub const REPORT_FILE: &str = "report.json";
pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const GRID_SUMMARY_FILE: &str = "grid_summary.csv";
pub const GRID_REPORT_FILE: &str = "grid_report.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSource {
    Synthetic(SyntheticSpec),
    File {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        format: Option<DatasetFormat>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryConfig {
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default = "default_initial")]
    pub initial: f64,
}

fn default_decay() -> f64 {
    aggregate::DEFAULT_HISTORY_DECAY
}

fn default_initial() -> f64 {
    aggregate::DEFAULT_HISTORY_INIT
}

fn default_concentration() -> f64 {
    policy::DEFAULT_CONCENTRATION
}

impl Default for HistoryConfig {
    fn default() -> Self {
        HistoryConfig {
            decay: default_decay(),
            initial: default_initial(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub dataset: DatasetSource,
    pub task: TaskKind,
    /// Reward metric every client uses during training.
    pub metric: MetricKind,
    /// Metrics reported at evaluation points. Empty means every metric the
    /// task supports. The training metric is always included.
    #[serde(default)]
    pub eval_metrics: Vec<MetricKind>,
    pub strategy: AggregationStrategy,
    #[serde(default)]
    pub history: HistoryConfig,
    #[serde(default)]
    pub ppo: PpoConfig,
    #[serde(default = "default_concentration")]
    pub concentration: f64,
    pub rounds: usize,
    #[serde(default)]
    pub eval_interval: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub early_stop: Option<EarlyStop>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// Directory relative dataset paths resolve against.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

fn config_error(path: impl Into<String>, message: impl ToString) -> Error {
    Error::Config {
        path: path.into(),
        message: message.to_string(),
    }
}

/// Deserialize with the failing field path attached to the error.
fn parse_json<T: serde::de::DeserializeOwned>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        config_error(path, e.into_inner())
    })
}

impl ExperimentConfig {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = parse_json(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg = Self::from_json_str(&fs::read_to_string(path)?)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf);
        Ok(cfg)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Evaluation metrics in canonical order, training metric included.
    pub fn resolved_eval_metrics(&self) -> Vec<MetricKind> {
        let mut m: Vec<MetricKind> = if self.eval_metrics.is_empty() {
            MetricKind::ALL
                .into_iter()
                .filter(|m| metric_supported(self.task, *m))
                .collect()
        } else {
            self.eval_metrics.clone()
        };
        m.push(self.metric);
        if let Some(stop) = &self.early_stop {
            m.push(stop.metric);
        }
        m.sort();
        m.dedup();
        m
    }

    pub fn validate(&self) -> Result<()> {
        if let DatasetSource::Synthetic(spec) = &self.dataset {
            spec.validate()
                .map_err(|e| config_error("dataset.synthetic", e))?;
        }
        if !metric_supported(self.task, self.metric) {
            return Err(config_error(
                "metric",
                format!("{} needs the prediction task", self.metric),
            ));
        }
        for (i, m) in self.eval_metrics.iter().enumerate() {
            if !metric_supported(self.task, *m) {
                return Err(config_error(
                    format!("eval_metrics[{i}]"),
                    format!("{m} needs the prediction task"),
                ));
            }
        }
        self.strategy
            .validate()
            .map_err(|e| config_error("strategy", e))?;
        self.ppo.validate().map_err(|e| config_error("ppo", e))?;
        aggregate::AlignmentHistory::new(2, self.history.initial, self.history.decay)
            .map_err(|e| config_error("history", e))?;
        if !(self.concentration > 0.0 && self.concentration.is_finite()) {
            return Err(config_error("concentration", "must be positive"));
        }
        if let Some(stop) = &self.early_stop {
            if !metric_supported(self.task, stop.metric) {
                return Err(config_error(
                    "early_stop.metric",
                    format!("{} needs the prediction task", stop.metric),
                ));
            }
            if !stop.threshold.is_finite() {
                return Err(config_error("early_stop.threshold", "must be finite"));
            }
        }
        Ok(())
    }

    pub fn load_dataset(&self) -> Result<PreferenceDataset> {
        match &self.dataset {
            DatasetSource::Synthetic(spec) => prefdata::generate_synthetic(spec),
            DatasetSource::File { path, format } => {
                let full = match &self.base_dir {
                    Some(base) if path.is_relative() => base.join(path),
                    _ => path.clone(),
                };
                let format = format
                    .or_else(|| DatasetFormat::from_path(&full))
                    .ok_or_else(|| {
                        config_error("dataset.file.format", "cannot infer format from extension")
                    })?;
                prefdata::load_dataset(&full, format)
            }
        }
    }

    fn federation_config(&self) -> FederationConfig {
        FederationConfig {
            task: self.task,
            metric: self.metric,
            strategy: self.strategy,
            ppo: self.ppo.clone(),
            history_decay: self.history.decay,
            history_init: self.history.initial,
            concentration: self.concentration,
            seed: self.seed,
        }
    }
}

fn metric_supported(task: TaskKind, metric: MetricKind) -> bool {
    task == TaskKind::Prediction || metric.is_ranking()
}

/// Environment-provided overrides; the only settings not taken from files.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub output_dir: Option<PathBuf>,
    pub jobs: Option<usize>,
}

impl Overrides {
    pub fn from_env() -> Result<Self> {
        let output_dir = std::env::var_os(ENV_OUTPUT_DIR).map(PathBuf::from);
        let jobs = match std::env::var(ENV_JOBS) {
            Ok(v) => Some(v.parse::<usize>().ok().filter(|j| *j > 0).ok_or_else(|| {
                config_error(ENV_JOBS, format!("expected a positive integer, got `{v}`"))
            })?),
            Err(_) => None,
        };
        Ok(Overrides { output_dir, jobs })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricScores {
    pub metric: MetricKind,
    pub fi: f64,
    pub avg_as: f64,
    pub min_as: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub round: usize,
    pub scores: Vec<MetricScores>,
}

impl From<&EvaluationRecord> for EvalPoint {
    fn from(e: &EvaluationRecord) -> Self {
        EvalPoint {
            round: e.round,
            scores: e
                .metrics
                .iter()
                .map(|m| MetricScores {
                    metric: m.metric,
                    fi: m.fi,
                    avg_as: m.avg_as,
                    min_as: m.min_as,
                })
                .collect(),
        }
    }
}

impl EvalPoint {
    pub fn get(&self, metric: MetricKind) -> Option<&MetricScores> {
        self.scores.iter().find(|s| s.metric == metric)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub groups: usize,
    pub questions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    /// Config echo without the output location.
    pub config: ExperimentConfig,
    pub task: TaskKind,
    pub client_reward: MetricKind,
    pub strategy: String,
    pub dataset: DatasetSummary,
    pub evaluations: Vec<EvalPoint>,
    /// Last evaluation point.
    pub summary: EvalPoint,
    pub rounds_completed: usize,
    pub stopped_early: bool,
    pub records_file: String,
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Run one experiment and write its result files into `output_dir`
/// (config value unless overridden).
pub fn run(config: &ExperimentConfig, overrides: &Overrides) -> Result<RunReport> {
    config.validate()?;
    let out_dir = overrides
        .output_dir
        .clone()
        .or_else(|| config.output_dir.clone())
        .ok_or_else(|| {
            config_error(
                "output_dir",
                format!("missing (set it in the config or via {ENV_OUTPUT_DIR})"),
            )
        })?;
    let (report, lines) = execute(config)?;

    fs::create_dir_all(&out_dir)?;
    let mut jsonl = String::new();
    for line in &lines {
        jsonl.push_str(&serde_json::to_string(line)?);
        jsonl.push('\n');
    }
    write_atomic(&out_dir.join(ROUNDS_FILE), jsonl.as_bytes())?;
    write_atomic(
        &out_dir.join(SUMMARY_FILE),
        summary_csv(std::slice::from_ref(&report))?.as_bytes(),
    )?;
    let mut json = serde_json::to_string_pretty(&report)?;
    json.push('\n');
    write_atomic(&out_dir.join(REPORT_FILE), json.as_bytes())?;
    Ok(report)
}

/// Train and evaluate without touching the filesystem.
pub fn execute(config: &ExperimentConfig) -> Result<(RunReport, Vec<LogLine>)> {
    config.validate()?;
    let dataset = config.load_dataset()?;
    let federation = Federation::new(&dataset, config.federation_config())?;
    let plan = TrainingPlan {
        rounds: config.rounds,
        eval_interval: config.eval_interval,
        eval_metrics: config.resolved_eval_metrics(),
        early_stop: config.early_stop.clone(),
    };
    let outcome = fedsim::run_training(&federation, &dataset, &plan)?;
    let evaluations: Vec<EvalPoint> = outcome.evaluations.iter().map(EvalPoint::from).collect();
    let mut echo = config.clone();
    echo.output_dir = None;
    let report = RunReport {
        config: echo,
        task: config.task,
        client_reward: config.metric,
        strategy: config.strategy.label(),
        dataset: DatasetSummary {
            groups: dataset.num_groups(),
            questions: dataset.num_questions(),
        },
        summary: evaluations.last().cloned().expect("initial evaluation always runs"),
        evaluations,
        rounds_completed: outcome.rounds.len(),
        stopped_early: outcome.stopped_early,
        records_file: ROUNDS_FILE.into(),
    };
    Ok((report, outcome.log_lines()))
}

/// Summary table: `task,client_reward,strategy`, then FI, AvgAS and MinAS
/// blocks with one column per evaluation metric. Columns come from the
/// first report; every report must share them.
pub fn summary_csv(reports: &[RunReport]) -> Result<String> {
    let Some(first) = reports.first() else {
        return Err(Error::invalid("no reports to summarize"));
    };
    let metrics: Vec<MetricKind> = first.summary.scores.iter().map(|s| s.metric).collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![
        "task".to_string(),
        "client_reward".to_string(),
        "strategy".to_string(),
    ];
    for block in ["fi", "avg_as", "min_as"] {
        header.extend(metrics.iter().map(|m| format!("{block}_{m}")));
    }
    w.write_record(&header)?;
    for r in reports {
        let mut row = vec![
            r.task.name().to_string(),
            r.client_reward.name().to_string(),
            r.strategy.clone(),
        ];
        let get = |m: MetricKind| {
            r.summary.get(m).ok_or_else(|| {
                Error::invalid(format!("report for {} lacks metric {m}", r.strategy))
            })
        };
        for block in 0..3 {
            for &m in &metrics {
                let s = get(m)?;
                let v = [s.fi, s.avg_as, s.min_as][block];
                row.push(v.to_string());
            }
        }
        w.write_record(&row)?;
    }
    let bytes = w.into_inner().map_err(|e| e.into_error())?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub base: ExperimentConfig,
    pub metrics: Vec<MetricKind>,
    pub strategies: Vec<AggregationStrategy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl GridSpec {
    pub fn from_json_str(text: &str) -> Result<Self> {
        let spec: GridSpec = parse_json(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let mut spec = Self::from_json_str(&fs::read_to_string(path)?)?;
        spec.base.base_dir = path.parent().map(Path::to_path_buf);
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.metrics.is_empty() {
            return Err(config_error("metrics", "grid needs at least one metric"));
        }
        if self.strategies.is_empty() {
            return Err(config_error("strategies", "grid needs at least one strategy"));
        }
        for (i, s) in self.strategies.iter().enumerate() {
            s.validate()
                .map_err(|e| config_error(format!("strategies[{i}]"), e))?;
        }
        self.base.validate().map_err(|e| match e {
            Error::Config { path, message } => config_error(format!("base.{path}"), message),
            other => other,
        })
    }

    /// One config per (metric, strategy), metric-major. Each cell shares
    /// the base seed, dataset and evaluation metrics.
    pub fn cells(&self, grid_dir: &Path) -> Vec<ExperimentConfig> {
        let eval_metrics = if self.base.eval_metrics.is_empty() {
            MetricKind::ALL
                .into_iter()
                .filter(|m| metric_supported(self.base.task, *m))
                .collect()
        } else {
            self.base.eval_metrics.clone()
        };
        let mut out = Vec::new();
        for &metric in &self.metrics {
            for strategy in &self.strategies {
                let mut cfg = self.base.clone();
                cfg.metric = metric;
                cfg.strategy = *strategy;
                cfg.eval_metrics = eval_metrics.clone();
                cfg.output_dir = Some(grid_dir.join(cell_dir_name(metric, strategy)));
                out.push(cfg);
            }
        }
        out
    }
}

pub fn cell_dir_name(metric: MetricKind, strategy: &AggregationStrategy) -> String {
    format!("{}__{}", metric, strategy.label())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellStatus {
    pub client_reward: MetricKind,
    pub strategy: String,
    pub output_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub reports: Vec<RunReport>,
    pub cells: Vec<CellStatus>,
    pub summary_csv: String,
}

/// Run every grid cell (concurrently, `overrides.jobs` threads if set).
/// A failing cell is recorded and the rest continue.
pub fn run_grid(grid: &GridSpec, overrides: &Overrides) -> Result<GridOutcome> {
    grid.validate()?;
    let grid_dir = overrides
        .output_dir
        .clone()
        .or_else(|| grid.output_dir.clone())
        .ok_or_else(|| config_error("output_dir", "missing"))?;
    fs::create_dir_all(&grid_dir)?;
    let cells = grid.cells(&grid_dir);
    let run_cells = || -> Vec<Result<RunReport>> {
        cells
            .par_iter()
            .map(|cfg| run(cfg, &Overrides::default()))
            .collect()
    };
    let results = match overrides.jobs {
        Some(j) => rayon::ThreadPoolBuilder::new()
            .num_threads(j)
            .build()
            .map_err(|e| Error::invalid(e.to_string()))?
            .install(run_cells),
        None => run_cells(),
    };

    let mut reports = Vec::new();
    let mut status = Vec::with_capacity(cells.len());
    for (cfg, res) in cells.iter().zip(results) {
        let error = match res {
            Ok(r) => {
                reports.push(r);
                None
            }
            Err(e) => Some(e.to_string()),
        };
        status.push(CellStatus {
            client_reward: cfg.metric,
            strategy: cfg.strategy.label(),
            output_dir: cfg.output_dir.clone().expect("cells carry a directory"),
            error,
        });
    }
    let summary = if reports.is_empty() {
        String::new()
    } else {
        summary_csv(&reports)?
    };
    write_atomic(&grid_dir.join(GRID_SUMMARY_FILE), summary.as_bytes())?;
    let mut json = serde_json::to_string_pretty(&status)?;
    json.push('\n');
    write_atomic(&grid_dir.join(GRID_REPORT_FILE), json.as_bytes())?;
    Ok(GridOutcome {
        reports,
        cells: status,
        summary_csv: summary,
    })
}

pub fn read_report(path: &Path) -> Result<RunReport> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// `strategy,metric,fi,min_as` points, one per report (its client reward
/// metric, final evaluation), sorted by metric then strategy.
pub fn export_scatter(reports: &[RunReport]) -> Result<String> {
    if reports.is_empty() {
        return Err(Error::invalid("export_scatter needs at least one report"));
    }
    let mut points = reports
        .iter()
        .map(|r| {
            let s = r.summary.get(r.client_reward).ok_or_else(|| {
                Error::invalid(format!(
                    "report {}/{} lacks its own metric",
                    r.client_reward, r.strategy
                ))
            })?;
            Ok((r.client_reward.name(), r.strategy.clone(), s.fi, s.min_as))
        })
        .collect::<Result<Vec<_>>>()?;
    points.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
    let mut out = String::from("strategy,metric,fi,min_as\n");
    for (metric, strategy, fi, min_as) in points {
        writeln!(out, "{strategy},{metric},{fi},{min_as}").expect("writing to a String");
    }
    Ok(out)
}
