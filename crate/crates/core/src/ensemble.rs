//! Majority Vote and Highest Sum over per-model class scores, plus the
//! prediction-file exchange format.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Label;
use crate::seed;
use crate::IdMap;

pub const PRED_HEADER: &str = "id\tscore_not_hateful\tscore_hateful";
pub const LABELS_HEADER: &str = "id\tlabel";
pub const PRED_SUFFIX: &str = ".pred.tsv";

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("degenerate scores for model {model:?}, id {id:?}")]
    DegenerateScores { model: String, id: String },
    #[error("model {model:?} id set differs from the first member ({count} ids in the symmetric difference, e.g. {sample:?})")]
    IdSetMismatch { model: String, count: usize, sample: Vec<String> },
    #[error("model name {0:?} appears more than once")]
    DuplicateModel(String),
    #[error("an ensemble needs at least one member")]
    NoMembers,
    #[error("prediction set {0:?} is empty")]
    EmptyPredictionSet(String),
    #[error("invalid model name {0:?}")]
    InvalidModelName(String),
    #[error("{path}: malformed row {row}: {reason}")]
    MalformedRow { path: String, row: usize, reason: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// Invalid score pair: both zero, negative, or non-finite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("scores must be finite, non-negative and not both zero")]
pub struct DegenerateScores;

/// One model's scores for one example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub not_hateful: f64,
    pub hateful: f64,
}

impl ScoreVector {
    pub fn new(not_hateful: f64, hateful: f64) -> Self {
        ScoreVector { not_hateful, hateful }
    }

    pub fn is_finite(&self) -> bool {
        self.not_hateful.is_finite() && self.hateful.is_finite()
    }

    /// Projects onto the probability simplex by dividing by the sum.
    pub fn normalize(&self) -> Result<ScoreVector, DegenerateScores> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.not_hateful) || !ok(self.hateful) {
            return Err(DegenerateScores);
        }
        let sum = self.not_hateful + self.hateful;
        if sum <= 0.0 {
            return Err(DegenerateScores);
        }
        Ok(ScoreVector { not_hateful: self.not_hateful / sum, hateful: self.hateful / sum })
    }

    /// Argmax label; an exact tie goes to Hateful.
    pub fn hard_label(&self) -> Label {
        if self.hateful >= self.not_hateful {
            Label::Hateful
        } else {
            Label::NotHateful
        }
    }
}

/// Model names become file and directory names, so they may not be empty or
/// contain whitespace or path separators.
pub fn validate_model_name(name: &str) -> Result<(), EnsembleError> {
    if name.is_empty() || name.chars().any(|c| c.is_whitespace() || c == '/' || c == '\\') {
        return Err(EnsembleError::InvalidModelName(name.to_string()));
    }
    Ok(())
}

/// One model's scores for every example id.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub model_name: String,
    pub scores: IdMap<ScoreVector>,
}

impl PredictionSet {
    pub fn new(model_name: impl Into<String>, scores: IdMap<ScoreVector>) -> Result<Self, EnsembleError> {
        let model_name = model_name.into();
        validate_model_name(&model_name)?;
        if scores.is_empty() {
            return Err(EnsembleError::EmptyPredictionSet(model_name));
        }
        Ok(PredictionSet { model_name, scores })
    }

    pub fn hard_labels(&self) -> IdMap<Label> {
        self.scores.iter().map(|(id, sv)| (id.clone(), sv.hard_label())).collect()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(PRED_HEADER);
        out.push('\n');
        for (id, sv) in &self.scores {
            out.push_str(&format!("{id}\t{}\t{}\n", sv.not_hateful, sv.hateful));
        }
        out
    }

    /// Parses a prediction file body. `source` is used in error messages.
    pub fn from_tsv(model_name: &str, source: &str, content: &str) -> Result<Self, EnsembleError> {
        let malformed = |row, reason: String| EnsembleError::MalformedRow { path: source.to_string(), row, reason };
        let body = content.strip_suffix('\n').unwrap_or(content);
        let mut lines = body.split('\n').enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, h)) if h == PRED_HEADER => {}
            _ => return Err(malformed(1, format!("expected header {PRED_HEADER:?}"))),
        }
        let mut scores = IdMap::new();
        for (row, line) in lines {
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(malformed(row, format!("expected 3 fields, found {}", fields.len())));
            }
            let id = fields[0];
            if id.is_empty() || id.chars().any(char::is_whitespace) {
                return Err(malformed(row, format!("invalid id {id:?}")));
            }
            let parse = |s: &str| -> Result<f64, EnsembleError> {
                s.parse::<f64>()
                    .ok()
                    .filter(|v| v.is_finite())
                    .ok_or_else(|| malformed(row, format!("invalid score {s:?}")))
            };
            let sv = ScoreVector::new(parse(fields[1])?, parse(fields[2])?);
            if scores.insert(id.to_string(), sv).is_some() {
                return Err(malformed(row, format!("duplicate id {id:?}")));
            }
        }
        PredictionSet::new(model_name, scores)
    }

    /// Loads `<model_name>.pred.tsv`, taking the model name from the file name.
    pub fn load(path: &Path) -> Result<Self, EnsembleError> {
        let file_name = path.file_name().and_then(|s| s.to_str()).unwrap_or_default();
        let name = file_name
            .strip_suffix(PRED_SUFFIX)
            .or_else(|| path.file_stem().and_then(|s| s.to_str()))
            .unwrap_or_default()
            .to_string();
        Self::load_named(&name, path)
    }

    pub fn load_named(model_name: &str, path: &Path) -> Result<Self, EnsembleError> {
        let content = fs::read_to_string(path).map_err(|source| EnsembleError::Io { path: path.to_path_buf(), source })?;
        Self::from_tsv(model_name, &path.display().to_string(), &content)
    }
}

/// Validated ensemble members sharing one id universe.
#[derive(Debug, Clone)]
pub struct EnsembleInput {
    members: Vec<PredictionSet>,
}

impl EnsembleInput {
    pub fn new(members: Vec<PredictionSet>) -> Result<Self, EnsembleError> {
        let first = members.first().ok_or(EnsembleError::NoMembers)?;
        let universe: BTreeSet<&String> = first.scores.keys().collect();
        let mut names = BTreeSet::new();
        for m in &members {
            if !names.insert(m.model_name.as_str()) {
                return Err(EnsembleError::DuplicateModel(m.model_name.clone()));
            }
            let ids: BTreeSet<&String> = m.scores.keys().collect();
            if ids != universe {
                let diff: Vec<&&String> = ids.symmetric_difference(&universe).collect();
                return Err(EnsembleError::IdSetMismatch {
                    model: m.model_name.clone(),
                    count: diff.len(),
                    sample: diff.iter().take(10).map(|s| s.to_string()).collect(),
                });
            }
        }
        Ok(EnsembleInput { members })
    }

    pub fn members(&self) -> &[PredictionSet] {
        &self.members
    }

    pub fn ids(&self) -> impl Iterator<Item = &String> {
        self.members[0].scores.keys()
    }

    pub fn len(&self) -> usize {
        self.members[0].scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How Majority Vote resolves an exact vote tie.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TiePolicy {
    /// Uniform choice drawn from `(seed, id)` only.
    SeededRandom { seed: u64 },
    FixedPositive,
}

impl TiePolicy {
    pub fn resolve(&self, id: &str) -> Label {
        match *self {
            TiePolicy::FixedPositive => Label::Hateful,
            TiePolicy::SeededRandom { seed } => {
                if seed::derive_seed(seed, id) & 1 == 1 {
                    Label::Hateful
                } else {
                    Label::NotHateful
                }
            }
        }
    }
}

/// Whether Highest Sum adds simplex-normalized scores or the raw values.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreMode {
    #[default]
    Normalized,
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleOutcome {
    pub labels: IdMap<Label>,
    /// Number of ids whose decision went through a tie rule.
    pub ties: usize,
}

fn degenerate(model: &PredictionSet, id: &str) -> EnsembleError {
    EnsembleError::DegenerateScores { model: model.model_name.clone(), id: id.to_string() }
}

pub fn majority_vote(input: &EnsembleInput, policy: TiePolicy) -> Result<EnsembleOutcome, EnsembleError> {
    let mut labels = IdMap::new();
    let mut ties = 0;
    for id in input.ids() {
        let mut hateful = 0usize;
        let mut not_hateful = 0usize;
        for m in input.members() {
            let sv = m.scores[id];
            sv.normalize().map_err(|_| degenerate(m, id))?;
            match sv.hard_label() {
                Label::Hateful => hateful += 1,
                Label::NotHateful => not_hateful += 1,
            }
        }
        let label = match hateful.cmp(&not_hateful) {
            std::cmp::Ordering::Greater => Label::Hateful,
            std::cmp::Ordering::Less => Label::NotHateful,
            std::cmp::Ordering::Equal => {
                ties += 1;
                policy.resolve(id)
            }
        };
        labels.insert(id.clone(), label);
    }
    Ok(EnsembleOutcome { labels, ties })
}

pub fn highest_sum(input: &EnsembleInput, mode: ScoreMode) -> Result<EnsembleOutcome, EnsembleError> {
    let mut labels = IdMap::new();
    let mut ties = 0;
    for id in input.ids() {
        let mut sum_hateful = 0.0;
        let mut sum_not_hateful = 0.0;
        for m in input.members() {
            let sv = m.scores[id];
            let sv = match mode {
                ScoreMode::Normalized => sv.normalize().map_err(|_| degenerate(m, id))?,
                ScoreMode::Raw if sv.is_finite() => sv,
                ScoreMode::Raw => return Err(degenerate(m, id)),
            };
            sum_hateful += sv.hateful;
            sum_not_hateful += sv.not_hateful;
        }
        if sum_hateful == sum_not_hateful {
            ties += 1;
        }
        let label = if sum_hateful >= sum_not_hateful { Label::Hateful } else { Label::NotHateful };
        labels.insert(id.clone(), label);
    }
    Ok(EnsembleOutcome { labels, ties })
}

pub fn labels_to_tsv(labels: &IdMap<Label>) -> String {
    let mut out = String::from(LABELS_HEADER);
    out.push('\n');
    for (id, label) in labels {
        out.push_str(&format!("{id}\t{label}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(name: &str, rows: &[(&str, f64, f64)]) -> PredictionSet {
        let scores = rows.iter().map(|&(id, n, h)| (id.to_string(), ScoreVector::new(n, h))).collect();
        PredictionSet::new(name, scores).unwrap()
    }

    fn voters(votes: &[Label]) -> EnsembleInput {
        let members = votes
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let h = if l.is_positive() { 0.8 } else { 0.2 };
                set(&format!("m{i}"), &[("x", 1.0 - h, h)])
            })
            .collect();
        EnsembleInput::new(members).unwrap()
    }

    #[test]
    fn normalize_cases() {
        assert_eq!(ScoreVector::new(2.0, 2.0).normalize(), Ok(ScoreVector::new(0.5, 0.5)));
        assert_eq!(ScoreVector::new(0.0, 3.0).normalize(), Ok(ScoreVector::new(0.0, 1.0)));
        assert_eq!(ScoreVector::new(0.0, 0.0).normalize(), Err(DegenerateScores));
        assert_eq!(ScoreVector::new(-1.0, 2.0).normalize(), Err(DegenerateScores));
        assert_eq!(ScoreVector::new(f64::NAN, 2.0).normalize(), Err(DegenerateScores));
    }

    #[test]
    fn hard_label_cases() {
        assert_eq!(ScoreVector::new(0.3, 0.7).hard_label(), Label::Hateful);
        assert_eq!(ScoreVector::new(0.7, 0.3).hard_label(), Label::NotHateful);
        assert_eq!(ScoreVector::new(0.5, 0.5).hard_label(), Label::Hateful);
    }

    #[test]
    fn clear_majority_wins() {
        use Label::*;
        let input = voters(&[Hateful, Hateful, Hateful, Hateful, NotHateful, NotHateful]);
        let out = majority_vote(&input, TiePolicy::SeededRandom { seed: 1 }).unwrap();
        assert_eq!(out.labels["x"], Hateful);
        assert_eq!(out.ties, 0);
    }

    #[test]
    fn three_three_tie_is_seeded() {
        use Label::*;
        let input = voters(&[Hateful, Hateful, Hateful, NotHateful, NotHateful, NotHateful]);
        let a = majority_vote(&input, TiePolicy::SeededRandom { seed: 42 }).unwrap();
        let b = majority_vote(&input, TiePolicy::SeededRandom { seed: 42 }).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.ties, 1);
        let fixed = majority_vote(&input, TiePolicy::FixedPositive).unwrap();
        assert_eq!(fixed.labels["x"], Hateful);
    }

    #[test]
    fn single_member_is_identity() {
        let m = set("only", &[("a", 0.2, 0.8), ("b", 0.9, 0.1), ("c", 0.5, 0.5)]);
        let input = EnsembleInput::new(vec![m.clone()]).unwrap();
        let out = majority_vote(&input, TiePolicy::SeededRandom { seed: 3 }).unwrap();
        assert_eq!(out.labels, m.hard_labels());
        assert_eq!(highest_sum(&input, ScoreMode::Normalized).unwrap().labels, m.hard_labels());
    }

    #[test]
    fn rules_can_disagree() {
        let input = EnsembleInput::new(vec![
            set("a", &[("x", 0.1, 0.9)]),
            set("b", &[("x", 0.6, 0.4)]),
            set("c", &[("x", 0.55, 0.45)]),
        ])
        .unwrap();
        let mv = majority_vote(&input, TiePolicy::FixedPositive).unwrap();
        let hs = highest_sum(&input, ScoreMode::Normalized).unwrap();
        assert_eq!(mv.labels["x"], Label::NotHateful);
        assert_eq!(hs.labels["x"], Label::Hateful);
    }

    #[test]
    fn highest_sum_ties_and_sums() {
        let input = EnsembleInput::new(vec![set("a", &[("x", 0.5, 0.5)]), set("b", &[("x", 1.0, 1.0)])]).unwrap();
        let out = highest_sum(&input, ScoreMode::Normalized).unwrap();
        assert_eq!(out.labels["x"], Label::Hateful);
        assert_eq!(out.ties, 1);

        let input = EnsembleInput::new(vec![
            set("a", &[("x", 0.3, 0.7)]),
            set("b", &[("x", 0.2, 0.8)]),
            set("c", &[("x", 0.4, 0.6)]),
        ])
        .unwrap();
        // hateful 2.1 vs not_hateful 0.9
        assert_eq!(highest_sum(&input, ScoreMode::Normalized).unwrap().labels["x"], Label::Hateful);
    }

    #[test]
    fn raw_mode_lets_magnitude_dominate() {
        let input = EnsembleInput::new(vec![
            set("a", &[("x", 0.0, 10.0)]),
            set("b", &[("x", 1.0, 0.0)]),
            set("c", &[("x", 1.0, 0.0)]),
        ])
        .unwrap();
        assert_eq!(highest_sum(&input, ScoreMode::Raw).unwrap().labels["x"], Label::Hateful);
        assert_eq!(highest_sum(&input, ScoreMode::Normalized).unwrap().labels["x"], Label::NotHateful);
    }

    #[test]
    fn degenerate_scores_name_model_and_id() {
        let input = EnsembleInput::new(vec![set("a", &[("x", 0.3, 0.7)]), set("bad", &[("x", 0.0, 0.0)])]).unwrap();
        for err in [
            majority_vote(&input, TiePolicy::FixedPositive).unwrap_err(),
            highest_sum(&input, ScoreMode::Normalized).unwrap_err(),
        ] {
            assert!(matches!(err, EnsembleError::DegenerateScores { ref model, ref id } if model == "bad" && id == "x"));
        }
    }

    #[test]
    fn input_validation() {
        assert!(matches!(EnsembleInput::new(vec![]), Err(EnsembleError::NoMembers)));
        let a = set("a", &[("x", 0.3, 0.7), ("y", 0.3, 0.7)]);
        let b = set("b", &[("x", 0.3, 0.7), ("z", 0.3, 0.7)]);
        assert!(matches!(
            EnsembleInput::new(vec![a.clone(), b]),
            Err(EnsembleError::IdSetMismatch { count: 2, .. })
        ));
        assert!(matches!(EnsembleInput::new(vec![a.clone(), a]), Err(EnsembleError::DuplicateModel(_))));
        assert!(PredictionSet::new("", IdMap::new()).is_err());
    }

    #[test]
    fn prediction_file_round_trip() {
        let p = set("m", &[("a", 0.1, 0.9), ("b", 0.123456789012345, 0.876543210987655)]);
        let back = PredictionSet::from_tsv("m", "mem", &p.to_tsv()).unwrap();
        assert_eq!(back, p);
        let err = PredictionSet::from_tsv("m", "mem", "id\tscore_not_hateful\tscore_hateful\na\tx\t1\n").unwrap_err();
        assert!(matches!(err, EnsembleError::MalformedRow { row: 2, .. }));
        let err = PredictionSet::from_tsv("m", "mem", "id\tscore_not_hateful\tscore_hateful\na\tinf\t1\n").unwrap_err();
        assert!(matches!(err, EnsembleError::MalformedRow { row: 2, .. }));
    }
}
