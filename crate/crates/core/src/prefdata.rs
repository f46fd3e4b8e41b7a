//! Preference datasets: questions with ordered options and per-group target
//! distributions over those options.
//!
//! Datasets come from a JSON or CSV file, or from [`generate_synthetic`],
//! which mixes a shared flat-Dirichlet draw with per-group draws so the
//! amount of inter-group disagreement is controlled by one knob.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row sums within this distance of 1 are renormalized, anything further is rejected.
pub const RENORMALIZE_TOLERANCE: f64 = 0.02;

/// Tolerance for the sum-to-one invariant on validated rows.
pub const SUM_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    #[serde(default)]
    pub text: String,
    pub options: Vec<String>,
}

impl Question {
    pub fn num_options(&self) -> usize {
        self.options.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupPreference {
    #[serde(rename = "group")]
    pub group_id: String,
    #[serde(rename = "question")]
    pub question_id: String,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Json,
    Csv,
}

impl DatasetFormat {
    /// Guess the format from a file extension.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "json" => Some(DatasetFormat::Json),
            "csv" => Some(DatasetFormat::Csv),
            _ => None,
        }
    }
}

/// Immutable, validated preference dataset.
///
/// The (group, question) mapping is total; targets are stored group-major so
/// `target(g, q)` is an index computation.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferenceDataset {
    questions: Vec<Question>,
    groups: Vec<String>,
    // prefs[g * questions.len() + q]
    prefs: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct RawDataset {
    groups: Vec<String>,
    questions: Vec<Question>,
    preferences: Vec<GroupPreference>,
}

impl PreferenceDataset {
    /// Validate and build a dataset. Each entry of `preferences` is paired
    /// with a human-readable row label used in error messages.
    fn build(
        groups: Vec<String>,
        questions: Vec<Question>,
        preferences: Vec<(String, GroupPreference)>,
    ) -> Result<Self> {
        let whole = |message: String| Error::Dataset {
            row: "dataset".into(),
            message,
        };
        if groups.len() < 2 {
            return Err(whole(format!("need at least 2 groups, got {}", groups.len())));
        }
        if questions.is_empty() {
            return Err(whole("need at least 1 question".into()));
        }

        let mut group_index = HashMap::new();
        for (i, g) in groups.iter().enumerate() {
            if group_index.insert(g.as_str(), i).is_some() {
                return Err(whole(format!("duplicate group id `{g}`")));
            }
        }
        let mut question_index = HashMap::new();
        for (j, q) in questions.iter().enumerate() {
            let row = || format!("question `{}`", q.id);
            if question_index.insert(q.id.as_str(), j).is_some() {
                return Err(Error::Dataset {
                    row: row(),
                    message: "duplicate question id".into(),
                });
            }
            if q.options.len() < 2 {
                return Err(Error::Dataset {
                    row: row(),
                    message: format!("need at least 2 options, got {}", q.options.len()),
                });
            }
            let mut seen = HashSet::new();
            for o in &q.options {
                if !seen.insert(o.as_str()) {
                    return Err(Error::Dataset {
                        row: row(),
                        message: format!("duplicate option label `{o}`"),
                    });
                }
            }
        }

        let nq = questions.len();
        let mut prefs: Vec<Option<Vec<f64>>> = vec![None; groups.len() * nq];
        for (row, pref) in preferences {
            let bad = |message: String| Error::Dataset {
                row: row.clone(),
                message,
            };
            let g = *group_index
                .get(pref.group_id.as_str())
                .ok_or_else(|| bad(format!("unknown group `{}`", pref.group_id)))?;
            let q = *question_index
                .get(pref.question_id.as_str())
                .ok_or_else(|| bad(format!("unknown question `{}`", pref.question_id)))?;
            let k = questions[q].num_options();
            if pref.probs.len() != k {
                return Err(bad(format!(
                    "expected {k} probabilities, got {}",
                    pref.probs.len()
                )));
            }
            let probs = normalize_row(&pref.probs).map_err(bad)?;
            let slot = &mut prefs[g * nq + q];
            if slot.is_some() {
                return Err(bad("duplicate (group, question) pair".into()));
            }
            *slot = Some(probs);
        }

        let mut out = Vec::with_capacity(prefs.len());
        for (idx, p) in prefs.into_iter().enumerate() {
            match p {
                Some(p) => out.push(p),
                None => {
                    let (g, q) = (idx / nq, idx % nq);
                    return Err(Error::Dataset {
                        row: format!("group `{}`, question `{}`", groups[g], questions[q].id),
                        message: "missing preference row".into(),
                    });
                }
            }
        }
        Ok(PreferenceDataset {
            questions,
            groups,
            prefs: out,
        })
    }

    pub fn questions(&self) -> &[Question] {
        &self.questions
    }

    pub fn groups(&self) -> &[String] {
        &self.groups
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    pub fn num_questions(&self) -> usize {
        self.questions.len()
    }

    pub fn question_index(&self, id: &str) -> Option<usize> {
        self.questions.iter().position(|q| q.id == id)
    }

    pub fn group_index(&self, id: &str) -> Option<usize> {
        self.groups.iter().position(|g| g == id)
    }

    /// Target distribution of group `group` for question `question` (both by index).
    pub fn target(&self, group: usize, question: usize) -> &[f64] {
        &self.prefs[group * self.questions.len() + question]
    }

    /// All preference rows belonging to one group, in question order.
    pub fn group_rows(&self, group: usize) -> Vec<GroupPreference> {
        self.questions
            .iter()
            .enumerate()
            .map(|(q, question)| GroupPreference {
                group_id: self.groups[group].clone(),
                question_id: question.id.clone(),
                probs: self.target(group, q).to_vec(),
            })
            .collect()
    }

    pub fn to_json_string(&self) -> Result<String> {
        let raw = RawDataset {
            groups: self.groups.clone(),
            questions: self.questions.clone(),
            preferences: (0..self.groups.len())
                .flat_map(|g| self.group_rows(g))
                .collect(),
        };
        Ok(serde_json::to_string_pretty(&raw)?)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let raw: RawDataset = serde_json::from_str(s)?;
        let prefs = raw
            .preferences
            .into_iter()
            .enumerate()
            .map(|(i, p)| {
                (
                    format!(
                        "preferences[{i}] (group `{}`, question `{}`)",
                        p.group_id, p.question_id
                    ),
                    p,
                )
            })
            .collect();
        Self::build(raw.groups, raw.questions, prefs)
    }

    /// CSV form: header `group_id,question_id,p1..pK`, one row per pair.
    /// Questions with fewer than the maximum K leave trailing cells empty.
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers()?.clone();
        if headers.len() < 4
            || headers.get(0) != Some("group_id")
            || headers.get(1) != Some("question_id")
        {
            return Err(Error::Dataset {
                row: "line 1".into(),
                message: "header must be group_id,question_id,p1..pK with K >= 2".into(),
            });
        }

        let mut groups: Vec<String> = Vec::new();
        let mut questions: Vec<Question> = Vec::new();
        let mut prefs = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let record = record?;
            let line = i + 2;
            let group = record.get(0).unwrap_or("").to_string();
            let question = record.get(1).unwrap_or("").to_string();
            let row = format!("line {line} (group `{group}`, question `{question}`)");
            let mut probs = Vec::new();
            let mut ended = false;
            for cell in record.iter().skip(2) {
                if cell.is_empty() {
                    ended = true;
                    continue;
                }
                if ended {
                    return Err(Error::Dataset {
                        row,
                        message: "gap in probability columns".into(),
                    });
                }
                let v: f64 = cell.parse().map_err(|_| Error::Dataset {
                    row: row.clone(),
                    message: format!("cannot parse probability `{cell}`"),
                })?;
                probs.push(v);
            }
            if !groups.contains(&group) {
                groups.push(group.clone());
            }
            match questions.iter().find(|q| q.id == question) {
                Some(q) if q.num_options() != probs.len() => {
                    return Err(Error::Dataset {
                        row,
                        message: format!(
                            "expected {} probabilities, got {}",
                            q.num_options(),
                            probs.len()
                        ),
                    });
                }
                Some(_) => {}
                None => questions.push(Question {
                    id: question.clone(),
                    text: String::new(),
                    options: (1..=probs.len()).map(|k| format!("option_{k}")).collect(),
                }),
            }
            prefs.push((
                row,
                GroupPreference {
                    group_id: group,
                    question_id: question,
                    probs,
                },
            ));
        }
        Self::build(groups, questions, prefs)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let max_k = self
            .questions
            .iter()
            .map(Question::num_options)
            .max()
            .unwrap_or(0);
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["group_id".to_string(), "question_id".to_string()];
        header.extend((1..=max_k).map(|k| format!("p{k}")));
        w.write_record(&header)?;
        for g in 0..self.groups.len() {
            for (q, question) in self.questions.iter().enumerate() {
                let mut rec = vec![self.groups[g].clone(), question.id.clone()];
                let probs = self.target(g, q);
                rec.extend(probs.iter().map(|p| p.to_string()));
                rec.extend(std::iter::repeat_n(String::new(), max_k - probs.len()));
                w.write_record(&rec)?;
            }
        }
        let bytes = w.into_inner().map_err(|e| e.into_error())?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn normalize_row(probs: &[f64]) -> std::result::Result<Vec<f64>, String> {
    for (k, &p) in probs.iter().enumerate() {
        if !p.is_finite() || !(0.0..=1.0).contains(&p) {
            return Err(format!("probability p{} = {p} outside [0, 1]", k + 1));
        }
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > RENORMALIZE_TOLERANCE {
        return Err(format!(
            "probabilities sum to {sum}, outside 1 ± {RENORMALIZE_TOLERANCE}"
        ));
    }
    if (sum - 1.0).abs() <= SUM_TOLERANCE {
        return Ok(probs.to_vec());
    }
    Ok(probs.iter().map(|p| p / sum).collect())
}

/// Load and validate a dataset file.
pub fn load_dataset(path: &Path, format: DatasetFormat) -> Result<PreferenceDataset> {
    let parse_err = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    match format {
        DatasetFormat::Json => {
            let text = fs::read_to_string(path)?;
            PreferenceDataset::from_json_str(&text).map_err(|e| match e {
                Error::Json(e) => parse_err(e.to_string()),
                other => other,
            })
        }
        DatasetFormat::Csv => {
            let file = fs::File::open(path)?;
            PreferenceDataset::from_csv_reader(file).map_err(|e| match e {
                Error::Csv(e) => parse_err(e.to_string()),
                other => other,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub num_groups: usize,
    pub num_questions: usize,
    pub options_per_question: usize,
    /// 0 = every group shares one distribution, 1 = independent per group.
    pub heterogeneity: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_groups < 2 {
            return Err(Error::invalid("num_groups must be >= 2"));
        }
        if self.num_questions < 1 {
            return Err(Error::invalid("num_questions must be >= 1"));
        }
        if self.options_per_question < 2 {
            return Err(Error::invalid("options_per_question must be >= 2"));
        }
        if !(0.0..=1.0).contains(&self.heterogeneity) {
            return Err(Error::invalid("heterogeneity must lie in [0, 1]"));
        }
        Ok(())
    }
}

/// Flat Dirichlet draw via normalized unit exponentials.
pub(crate) fn flat_dirichlet<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    let mut v: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(Exp1)).collect();
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= s);
    v
}

/// Deterministic synthetic dataset. Per question one shared draw is taken,
/// then one draw per group; the group target is
/// `(1 - η) * shared + η * group_specific`. The draw sequence does not depend
/// on η, so datasets that differ only in η are coupled.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<PreferenceDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let eta = spec.heterogeneity;
    let k = spec.options_per_question;
    let groups: Vec<String> = (0..spec.num_groups).map(|g| format!("g{g}")).collect();
    let questions: Vec<Question> = (0..spec.num_questions)
        .map(|j| Question {
            id: format!("q{j:04}"),
            text: format!("synthetic question {j}"),
            options: (1..=k).map(|o| format!("option_{o}")).collect(),
        })
        .collect();

    let mut per_question: Vec<Vec<Vec<f64>>> = Vec::with_capacity(spec.num_questions);
    for _ in 0..spec.num_questions {
        let shared = flat_dirichlet(k, &mut rng);
        let rows = (0..spec.num_groups)
            .map(|_| {
                let own = flat_dirichlet(k, &mut rng);
                let mut mixed: Vec<f64> = shared
                    .iter()
                    .zip(&own)
                    .map(|(s, o)| (1.0 - eta) * s + eta * o)
                    .collect();
                let sum: f64 = mixed.iter().sum();
                mixed.iter_mut().for_each(|x| *x /= sum);
                mixed
            })
            .collect();
        per_question.push(rows);
    }

    let mut prefs = Vec::with_capacity(spec.num_groups * spec.num_questions);
    for g in 0..spec.num_groups {
        for rows in &per_question {
            prefs.push(rows[g].clone());
        }
    }
    Ok(PreferenceDataset {
        questions,
        groups,
        prefs,
    })
}

/// Total-variation distance between two distributions of equal length.
pub fn total_variation(a: &[f64], b: &[f64]) -> f64 {
    0.5 * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Mean pairwise TV distance between groups, averaged over questions.
pub fn mean_pairwise_tv(ds: &PreferenceDataset) -> f64 {
    let l = ds.num_groups();
    let mut total = 0.0;
    let mut count = 0usize;
    for q in 0..ds.num_questions() {
        for a in 0..l {
            for b in a + 1..l {
                total += total_variation(ds.target(a, q), ds.target(b, q));
                count += 1;
            }
        }
    }
    total / count as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn json(prefs: &str) -> String {
        format!(
            r#"{{"groups":["a","b"],
                "questions":[{{"id":"q1","text":"?","options":["yes","no"]}}],
                "preferences":[{prefs}]}}"#
        )
    }

    #[test]
    fn minimal_json() {
        let ds = PreferenceDataset::from_json_str(&json(
            r#"{"group":"a","question":"q1","probs":[0.5,0.5]},
               {"group":"b","question":"q1","probs":[0.9,0.1]}"#,
        ))
        .unwrap();
        assert_eq!(ds.num_groups(), 2);
        assert_eq!(ds.questions()[0].num_options(), 2);
        assert_eq!(ds.target(1, 0), &[0.9, 0.1]);
    }

    #[test]
    fn small_drift_is_renormalized() {
        let ds = PreferenceDataset::from_json_str(&json(
            r#"{"group":"a","question":"q1","probs":[0.50,0.49]},
               {"group":"b","question":"q1","probs":[0.9,0.1]}"#,
        ))
        .unwrap();
        let p = ds.target(0, 0);
        assert!((p[0] - 0.505_050_505_050_505).abs() < 1e-12);
        assert!((p[1] - 0.494_949_494_949_495).abs() < 1e-12);
    }

    #[test]
    fn large_drift_names_the_row() {
        let err = PreferenceDataset::from_json_str(&json(
            r#"{"group":"a","question":"q1","probs":[0.5,0.5]},
               {"group":"b","question":"q1","probs":[0.7,0.7]}"#,
        ))
        .unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("preferences[1]"), "{msg}");
        assert!(msg.contains("group `b`"), "{msg}");
    }

    #[test]
    fn missing_pair_rejected() {
        let err = PreferenceDataset::from_json_str(&json(
            r#"{"group":"a","question":"q1","probs":[0.5,0.5]}"#,
        ))
        .unwrap_err();
        assert!(err.to_string().contains("group `b`, question `q1`"));
    }

    #[test]
    fn out_of_range_probability_rejected() {
        let err = PreferenceDataset::from_json_str(&json(
            r#"{"group":"a","question":"q1","probs":[1.2,-0.2]},
               {"group":"b","question":"q1","probs":[0.9,0.1]}"#,
        ))
        .unwrap_err();
        assert!(err.to_string().contains("outside [0, 1]"));
    }

    #[test]
    fn duplicate_pair_and_wrong_k_rejected() {
        let dup = PreferenceDataset::from_json_str(&json(
            r#"{"group":"a","question":"q1","probs":[0.5,0.5]},
               {"group":"a","question":"q1","probs":[0.5,0.5]},
               {"group":"b","question":"q1","probs":[0.9,0.1]}"#,
        ));
        assert!(dup.unwrap_err().to_string().contains("duplicate"));
        let wrong_k = PreferenceDataset::from_json_str(&json(
            r#"{"group":"a","question":"q1","probs":[0.5,0.25,0.25]},
               {"group":"b","question":"q1","probs":[0.9,0.1]}"#,
        ));
        assert!(wrong_k.unwrap_err().to_string().contains("expected 2"));
    }

    #[test]
    fn single_group_rejected() {
        let err = PreferenceDataset::from_json_str(
            r#"{"groups":["a"],"questions":[{"id":"q","options":["x","y"]}],
                "preferences":[{"group":"a","question":"q","probs":[0.5,0.5]}]}"#,
        )
        .unwrap_err();
        assert!(err.to_string().contains("at least 2 groups"));
    }

    #[test]
    fn csv_round_trip_with_mixed_k() {
        let text = "group_id,question_id,p1,p2,p3\n\
                    a,q1,0.2,0.8,\n\
                    b,q1,0.6,0.4,\n\
                    a,q2,0.1,0.2,0.7\n\
                    b,q2,0.3,0.3,0.4\n";
        let ds = PreferenceDataset::from_csv_reader(text.as_bytes()).unwrap();
        assert_eq!(ds.num_questions(), 2);
        assert_eq!(ds.questions()[0].num_options(), 2);
        assert_eq!(ds.questions()[1].num_options(), 3);
        let again = PreferenceDataset::from_csv_reader(ds.to_csv_string().unwrap().as_bytes());
        assert_eq!(again.unwrap(), ds);
    }

    #[test]
    fn csv_error_names_line() {
        let text = "group_id,question_id,p1,p2\na,q1,0.5,0.5\nb,q1,0.7,0.7\n";
        let err = PreferenceDataset::from_csv_reader(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
    }

    #[test]
    fn homogeneous_synthetic_is_identical_across_groups() {
        let ds = generate_synthetic(&SyntheticSpec {
            num_groups: 3,
            num_questions: 20,
            options_per_question: 4,
            heterogeneity: 0.0,
            seed: 99,
        })
        .unwrap();
        for q in 0..ds.num_questions() {
            assert_eq!(ds.target(0, q), ds.target(1, q));
            assert_eq!(ds.target(0, q), ds.target(2, q));
        }
    }

    #[test]
    fn synthetic_spec_validation() {
        let mut spec = SyntheticSpec {
            num_groups: 2,
            num_questions: 1,
            options_per_question: 2,
            heterogeneity: 1.5,
            seed: 0,
        };
        assert!(generate_synthetic(&spec).is_err());
        spec.heterogeneity = 0.5;
        spec.num_groups = 1;
        assert!(generate_synthetic(&spec).is_err());
    }
}
