//! Labeled corpora: loading, summary statistics, stratified train/test splits
//! and stratified k-fold plans.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::IdMap;

pub const TSV_HEADER: &str = "id\tlabel\ttext";
pub const FOLDS_HEADER: &str = "id\tfold";

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("duplicate id {id:?} at row {row}")]
    DuplicateId { id: String, row: usize },
    #[error("unknown label token {token:?} at row {row}")]
    UnknownLabelToken { row: usize, token: String },
    #[error("malformed row {row}: {reason}")]
    MalformedRow { row: usize, reason: String },
    #[error("test fraction must lie strictly between 0 and 1, got {0}")]
    InvalidFraction(f64),
    #[error("k must satisfy 2 <= k <= n (k = {k}, n = {n})")]
    InvalidK { k: usize, n: usize },
    #[error("fold plan does not cover id {0:?}")]
    UnassignedId(String),
}

/// Binary label. `Hateful` is the positive class everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    NotHateful,
    Hateful,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Hateful
    }

    /// Canonical token written to label files.
    pub fn as_token(self) -> &'static str {
        match self {
            Label::Hateful => "hateful",
            Label::NotHateful => "not_hateful",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_token())
    }
}

impl FromStr for Label {
    type Err = ();

    fn from_str(token: &str) -> Result<Self, Self::Err> {
        match token.to_lowercase().as_str() {
            "1" | "hateful" | "hate" => Ok(Label::Hateful),
            "0" | "not_hateful" | "normal" => Ok(Label::NotHateful),
            _ => Err(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub id: String,
    pub text: String,
    pub label: Label,
}

/// Input file layout accepted by [`load_corpus`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorpusFormat {
    Tsv,
    Jsonl,
}

impl CorpusFormat {
    /// Guesses the format from a file extension, defaulting to TSV.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some("jsonl") | Some("json") => CorpusFormat::Jsonl,
            _ => CorpusFormat::Tsv,
        }
    }
}

/// An ordered, id-unique collection of labeled examples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Corpus {
    name: String,
    examples: Vec<LabeledExample>,
}

impl Corpus {
    pub fn new(name: impl Into<String>, examples: Vec<LabeledExample>) -> Result<Self, CorpusError> {
        let mut seen = HashSet::with_capacity(examples.len());
        for (i, ex) in examples.iter().enumerate() {
            validate_id(&ex.id, i + 1)?;
            if !seen.insert(ex.id.as_str()) {
                return Err(CorpusError::DuplicateId { id: ex.id.clone(), row: i + 1 });
            }
        }
        Ok(Corpus { name: name.into(), examples })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn examples(&self) -> &[LabeledExample] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn gold(&self) -> IdMap<Label> {
        self.examples.iter().map(|e| (e.id.clone(), e.label)).collect()
    }

    pub fn has_both_classes(&self) -> bool {
        let pos = self.examples.iter().filter(|e| e.label.is_positive()).count();
        pos > 0 && pos < self.examples.len()
    }

    /// Sub-corpus of the examples whose id satisfies `keep`, in file order.
    pub fn filter(&self, name: impl Into<String>, mut keep: impl FnMut(&str) -> bool) -> Corpus {
        Corpus {
            name: name.into(),
            examples: self.examples.iter().filter(|e| keep(&e.id)).cloned().collect(),
        }
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(TSV_HEADER);
        out.push('\n');
        for ex in &self.examples {
            let label = if ex.label.is_positive() { "1" } else { "0" };
            out.push_str(&format!("{}\t{}\t{}\n", ex.id, label, ex.text));
        }
        out
    }
}

fn validate_id(id: &str, row: usize) -> Result<(), CorpusError> {
    if id.is_empty() {
        return Err(CorpusError::MalformedRow { row, reason: "empty id".into() });
    }
    if id.chars().any(char::is_whitespace) {
        return Err(CorpusError::MalformedRow { row, reason: format!("id {id:?} contains whitespace") });
    }
    Ok(())
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<Corpus, CorpusError> {
    let content = fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    let name = path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("corpus")
        .to_string();
    parse_corpus(&name, &content, format)
}

/// Parses corpus content. Row numbers in errors are 1-based file lines.
pub fn parse_corpus(name: &str, content: &str, format: CorpusFormat) -> Result<Corpus, CorpusError> {
    let examples = match format {
        CorpusFormat::Tsv => parse_tsv(content)?,
        CorpusFormat::Jsonl => parse_jsonl(content)?,
    };
    // Duplicate detection reports file rows, so it happens here rather than in Corpus::new.
    let mut seen = HashSet::with_capacity(examples.len());
    for (row, ex) in &examples {
        if !seen.insert(ex.id.as_str()) {
            return Err(CorpusError::DuplicateId { id: ex.id.clone(), row: *row });
        }
    }
    Corpus::new(name, examples.into_iter().map(|(_, e)| e).collect())
}

fn lines(content: &str) -> impl Iterator<Item = (usize, &str)> {
    let body = content.strip_suffix('\n').unwrap_or(content);
    body.split('\n').enumerate().map(|(i, l)| (i + 1, l))
}

fn parse_label(token: &str, row: usize) -> Result<Label, CorpusError> {
    token
        .parse()
        .map_err(|_| CorpusError::UnknownLabelToken { row, token: token.to_string() })
}

fn parse_tsv(content: &str) -> Result<Vec<(usize, LabeledExample)>, CorpusError> {
    if content.is_empty() {
        return Err(CorpusError::MalformedRow { row: 1, reason: "missing header".into() });
    }
    let mut rows = lines(content);
    match rows.next() {
        Some((_, header)) if header == TSV_HEADER => {}
        Some((row, header)) => {
            return Err(CorpusError::MalformedRow {
                row,
                reason: format!("expected header {TSV_HEADER:?}, found {header:?}"),
            })
        }
        None => unreachable!(),
    }
    let mut out = Vec::new();
    for (row, line) in rows {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(CorpusError::MalformedRow {
                row,
                reason: format!("expected 3 tab-separated fields, found {}", fields.len()),
            });
        }
        validate_id(fields[0], row)?;
        let label = parse_label(fields[1], row)?;
        out.push((row, LabeledExample { id: fields[0].to_string(), text: fields[2].to_string(), label }));
    }
    Ok(out)
}

#[derive(Deserialize)]
struct JsonRow {
    id: String,
    label: serde_json::Value,
    text: String,
}

fn parse_jsonl(content: &str) -> Result<Vec<(usize, LabeledExample)>, CorpusError> {
    let mut out = Vec::new();
    if content.is_empty() {
        return Ok(out);
    }
    for (row, line) in lines(content) {
        let parsed: JsonRow = serde_json::from_str(line)
            .map_err(|e| CorpusError::MalformedRow { row, reason: e.to_string() })?;
        validate_id(&parsed.id, row)?;
        let token = match &parsed.label {
            serde_json::Value::String(s) => s.clone(),
            serde_json::Value::Number(n) => n.to_string(),
            other => return Err(CorpusError::UnknownLabelToken { row, token: other.to_string() }),
        };
        let label = parse_label(&token, row)?;
        out.push((row, LabeledExample { id: parsed.id, text: parsed.text, label }));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n: usize,
    pub n_positive: usize,
    pub prior: f64,
    pub n_empty_text: usize,
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let n = corpus.len();
    let n_positive = corpus.examples().iter().filter(|e| e.label.is_positive()).count();
    let n_empty_text = corpus.examples().iter().filter(|e| e.text.is_empty()).count();
    let prior = if n == 0 { 0.0 } else { n_positive as f64 / n as f64 };
    CorpusStats { n, n_positive, prior, n_empty_text }
}

/// Ids of each class, sorted so that shuffles depend on content rather than
/// row order.
fn strata(corpus: &Corpus) -> (Vec<&str>, Vec<&str>) {
    let (mut pos, mut neg): (Vec<&str>, Vec<&str>) = (Vec::new(), Vec::new());
    for ex in corpus.examples() {
        if ex.label.is_positive() {
            pos.push(&ex.id);
        } else {
            neg.push(&ex.id);
        }
    }
    pos.sort_unstable();
    neg.sort_unstable();
    (pos, neg)
}

#[derive(Debug, Clone)]
pub struct Split {
    pub train: Corpus,
    pub test: Corpus,
    /// False when a class had fewer than two examples and the split fell
    /// back to an unstratified shuffle.
    pub stratified: bool,
}

pub fn train_test_split(corpus: &Corpus, test_fraction: f64, seed: u64) -> Result<Split, CorpusError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CorpusError::InvalidFraction(test_fraction));
    }
    let n = corpus.len();
    let n_test = (test_fraction * n as f64).round() as usize;
    let (mut pos, mut neg) = strata(corpus);
    let mut rng = seed::rng_for(seed, "train_test_split");

    let stratified = pos.len() >= 2 && neg.len() >= 2;
    let test_ids: HashSet<&str> = if stratified {
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        let pos_test = ((test_fraction * pos.len() as f64).round() as usize).min(n_test);
        let neg_test = (n_test - pos_test).min(neg.len());
        let pos_test = n_test - neg_test;
        pos[..pos_test].iter().chain(&neg[..neg_test]).copied().collect()
    } else {
        let mut all: Vec<&str> = pos.into_iter().chain(neg).collect();
        all.sort_unstable();
        all.shuffle(&mut rng);
        all[..n_test].iter().copied().collect()
    };

    let name = corpus.name();
    Ok(Split {
        train: corpus.filter(format!("{name}.train"), |id| !test_ids.contains(id)),
        test: corpus.filter(format!("{name}.test"), |id| test_ids.contains(id)),
        stratified,
    })
}

/// Assignment of every corpus id to one of `k` folds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldPlan {
    pub k: usize,
    /// `None` when the plan was imported from a folds file.
    pub seed: Option<u64>,
    pub stratified: bool,
    pub assignment: IdMap<usize>,
}

impl FoldPlan {
    pub fn fold_of(&self, id: &str) -> Option<usize> {
        self.assignment.get(id).copied()
    }

    /// Ids of fold `fold`, sorted.
    pub fn fold_ids(&self, fold: usize) -> Vec<&str> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.as_str())
            .collect()
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for &f in self.assignment.values() {
            sizes[f] += 1;
        }
        sizes
    }

    pub fn positive_counts(&self, corpus: &Corpus) -> Vec<usize> {
        let mut counts = vec![0; self.k];
        for ex in corpus.examples() {
            if ex.label.is_positive() {
                if let Some(f) = self.fold_of(&ex.id) {
                    counts[f] += 1;
                }
            }
        }
        counts
    }

    /// Checks that the plan covers exactly the ids of `corpus`.
    pub fn check_covers(&self, corpus: &Corpus) -> Result<(), CorpusError> {
        for ex in corpus.examples() {
            if !self.assignment.contains_key(&ex.id) {
                return Err(CorpusError::UnassignedId(ex.id.clone()));
            }
        }
        Ok(())
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(FOLDS_HEADER);
        out.push('\n');
        for (id, fold) in &self.assignment {
            out.push_str(&format!("{id}\t{fold}\n"));
        }
        out
    }

    pub fn from_tsv(content: &str) -> Result<FoldPlan, CorpusError> {
        let mut rows = lines(content);
        match rows.next() {
            Some((_, h)) if h == FOLDS_HEADER => {}
            _ => return Err(CorpusError::MalformedRow { row: 1, reason: format!("expected header {FOLDS_HEADER:?}") }),
        }
        let mut assignment = IdMap::new();
        let mut k = 0;
        for (row, line) in rows {
            let (id, fold) = line
                .split_once('\t')
                .ok_or_else(|| CorpusError::MalformedRow { row, reason: "expected id<TAB>fold".into() })?;
            validate_id(id, row)?;
            let fold: usize = fold
                .parse()
                .map_err(|_| CorpusError::MalformedRow { row, reason: format!("bad fold index {fold:?}") })?;
            if assignment.insert(id.to_string(), fold).is_some() {
                return Err(CorpusError::DuplicateId { id: id.to_string(), row });
            }
            k = k.max(fold + 1);
        }
        if k < 2 {
            return Err(CorpusError::InvalidK { k, n: assignment.len() });
        }
        Ok(FoldPlan { k, seed: None, stratified: false, assignment })
    }
}

/// Builds a k-fold plan. Stratified plans shuffle each class separately and
/// deal ids round-robin, continuing the rotation from positives into
/// negatives so both fold sizes and per-fold positive counts differ by at
/// most one.
pub fn make_folds(corpus: &Corpus, k: usize, seed: u64, stratified: bool) -> Result<FoldPlan, CorpusError> {
    let n = corpus.len();
    if k < 2 || k > n {
        return Err(CorpusError::InvalidK { k, n });
    }
    let (mut pos, mut neg) = strata(corpus);
    let mut rng = seed::rng_for(seed, "make_folds");
    let order: Vec<&str> = if stratified {
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        pos.into_iter().chain(neg).collect()
    } else {
        let mut all: Vec<&str> = pos.into_iter().chain(neg).collect();
        all.sort_unstable();
        all.shuffle(&mut rng);
        all
    };
    let assignment = order
        .into_iter()
        .enumerate()
        .map(|(i, id)| (id.to_string(), i % k))
        .collect();
    Ok(FoldPlan { k, seed: Some(seed), stratified, assignment })
}

const NEUTRAL_WORDS: &[&str] = &[
    "كورونا", "لقاح", "الصحة", "اليوم", "الناس", "مستشفى", "الحكومة", "خبر", "وباء", "العالم",
    "الدواء", "الحجر", "المنزل", "الطبيب", "جديد", "حالات", "الوقاية", "كمامة", "مدرسة", "الأخبار",
    "فيروس", "الإصابات", "شكرا", "نحن", "الله", "هذا", "على", "في", "من", "مع",
];

const HOSTILE_WORDS: &[&str] = &["حقير", "أغبياء", "خونة", "قذر", "اطردوهم", "حثالة", "لعنة", "مجرمين"];

/// Generates a synthetic tweet-like corpus with exactly `n_positive`
/// Hateful examples. Hateful texts usually contain a hostile marker word and
/// a small share of NotHateful texts do too, so the task is learnable but not
/// separable.
pub fn synthesize(name: &str, n: usize, n_positive: usize, seed: u64) -> Corpus {
    assert!(n_positive <= n, "n_positive exceeds n");
    let width = n.max(1).to_string().len();
    let mut rng = seed::rng_for(seed, "synthesize");
    let mut labels: Vec<Label> = (0..n)
        .map(|i| if i < n_positive { Label::Hateful } else { Label::NotHateful })
        .collect();
    labels.shuffle(&mut rng);

    let examples = labels
        .into_iter()
        .enumerate()
        .map(|(i, label)| {
            let len = rng.gen_range(5..=14);
            let mut words: Vec<&str> = (0..len)
                .map(|_| NEUTRAL_WORDS[rng.gen_range(0..NEUTRAL_WORDS.len())])
                .collect();
            let marker_p = if label.is_positive() { 0.85 } else { 0.05 };
            if rng.gen_bool(marker_p) {
                let at = rng.gen_range(0..=words.len());
                words.insert(at, HOSTILE_WORDS[rng.gen_range(0..HOSTILE_WORDS.len())]);
            }
            let mut text = words.join(" ");
            if rng.gen_bool(0.1) {
                text.push_str(" https://t.co/x");
            }
            if rng.gen_bool(0.1) {
                text.insert_str(0, "@user ");
            }
            LabeledExample { id: format!("s{:0width$}", i + 1), text, label }
        })
        .collect();
    Corpus::new(name, examples).expect("synthetic ids are unique")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize, n_pos: usize) -> Corpus {
        let examples = (0..n)
            .map(|i| LabeledExample {
                id: format!("t{i}"),
                text: format!("text {i}"),
                label: if i < n_pos { Label::Hateful } else { Label::NotHateful },
            })
            .collect();
        Corpus::new("toy", examples).unwrap()
    }

    #[test]
    fn loads_three_row_tsv() {
        let c = parse_corpus("c", "id\tlabel\ttext\na\t1\tx\nb\t0\ty\nc\t0\t\n", CorpusFormat::Tsv).unwrap();
        assert_eq!(c.len(), 3);
        let s = corpus_stats(&c);
        assert_eq!(s.n_positive, 1);
        assert_eq!(s.n_empty_text, 1);
    }

    #[test]
    fn label_tokens_are_case_insensitive() {
        for t in ["1", "Hateful", "HATE", "hateful"] {
            assert_eq!(t.parse::<Label>(), Ok(Label::Hateful));
        }
        for t in ["0", "NOT_HATEFUL", "Normal"] {
            assert_eq!(t.parse::<Label>(), Ok(Label::NotHateful));
        }
        assert!("offensive".parse::<Label>().is_err());
    }

    #[test]
    fn duplicate_id_is_reported() {
        let err = parse_corpus("c", "id\tlabel\ttext\nt7\t1\tx\nt7\t0\ty\n", CorpusFormat::Tsv).unwrap_err();
        assert!(matches!(err, CorpusError::DuplicateId { ref id, row: 3 } if id == "t7"), "{err}");
    }

    #[test]
    fn unknown_label_and_malformed_rows() {
        let err = parse_corpus("c", "id\tlabel\ttext\na\tspam\tx\n", CorpusFormat::Tsv).unwrap_err();
        assert!(matches!(err, CorpusError::UnknownLabelToken { row: 2, .. }));
        let err = parse_corpus("c", "id\tlabel\ttext\na\t1\tx\ty\n", CorpusFormat::Tsv).unwrap_err();
        assert!(matches!(err, CorpusError::MalformedRow { row: 2, .. }));
        let err = parse_corpus("c", "id\ttext\n", CorpusFormat::Tsv).unwrap_err();
        assert!(matches!(err, CorpusError::MalformedRow { row: 1, .. }));
        let err = parse_corpus("c", "id\tlabel\ttext\na b\t1\tx\n", CorpusFormat::Tsv).unwrap_err();
        assert!(matches!(err, CorpusError::MalformedRow { row: 2, .. }));
    }

    #[test]
    fn loads_jsonl() {
        let src = "{\"id\":\"a\",\"label\":\"hate\",\"text\":\"x\"}\n{\"id\":\"b\",\"label\":\"normal\",\"text\":\"\"}\n";
        let c = parse_corpus("c", src, CorpusFormat::Jsonl).unwrap();
        assert_eq!(c.gold()["a"], Label::Hateful);
        assert_eq!(c.gold()["b"], Label::NotHateful);
        let err = parse_corpus("c", "{\"id\":\"a\"}\n", CorpusFormat::Jsonl).unwrap_err();
        assert!(matches!(err, CorpusError::MalformedRow { row: 1, .. }));
    }

    #[test]
    fn stats_of_empty_and_small_corpora() {
        let s = corpus_stats(&toy(0, 0));
        assert_eq!((s.n, s.n_positive, s.prior), (0, 0, 0.0));
        assert_eq!(corpus_stats(&toy(10, 2)).prior, 0.2);
    }

    #[test]
    fn split_sizes_on_ten_examples() {
        let c = toy(10, 2);
        for seed in 0..20 {
            let s = train_test_split(&c, 0.2, seed).unwrap();
            assert!(s.stratified);
            assert_eq!(s.test.len(), 2);
            assert_eq!(s.train.len(), 8);
            assert!(corpus_stats(&s.test).n_positive <= 1);
        }
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let c = toy(57, 9);
        let a = train_test_split(&c, 0.3, 11).unwrap();
        let b = train_test_split(&c, 0.3, 11).unwrap();
        assert_eq!(a.test, b.test);
        assert_eq!(a.train.len() + a.test.len(), 57);
        let test: HashSet<_> = a.test.examples().iter().map(|e| &e.id).collect();
        assert!(a.train.examples().iter().all(|e| !test.contains(&e.id)));
    }

    #[test]
    fn split_rejects_bad_fraction_and_falls_back() {
        let c = toy(10, 2);
        assert!(matches!(train_test_split(&c, 0.0, 1), Err(CorpusError::InvalidFraction(_))));
        assert!(matches!(train_test_split(&c, 1.0, 1), Err(CorpusError::InvalidFraction(_))));
        let s = train_test_split(&toy(10, 1), 0.2, 1).unwrap();
        assert!(!s.stratified);
        assert_eq!(s.test.len(), 2);
    }

    #[test]
    fn folds_on_ten_examples() {
        let plan = make_folds(&toy(10, 2), 5, 3, true).unwrap();
        assert_eq!(plan.fold_sizes(), vec![2; 5]);
        assert!(plan.positive_counts(&toy(10, 2)).iter().all(|&p| p <= 1));
        assert!(matches!(make_folds(&toy(10, 2), 1, 3, true), Err(CorpusError::InvalidK { .. })));
        assert!(matches!(make_folds(&toy(3, 1), 4, 3, true), Err(CorpusError::InvalidK { .. })));
    }

    #[test]
    fn folds_are_row_order_independent() {
        let c = toy(40, 7);
        let mut rev = c.examples().to_vec();
        rev.reverse();
        let r = Corpus::new("rev", rev).unwrap();
        assert_eq!(make_folds(&c, 4, 9, true).unwrap(), make_folds(&r, 4, 9, true).unwrap());
    }

    #[test]
    fn fold_plan_tsv_round_trip() {
        let plan = make_folds(&toy(12, 3), 3, 5, true).unwrap();
        let back = FoldPlan::from_tsv(&plan.to_tsv()).unwrap();
        assert_eq!(back.assignment, plan.assignment);
        assert_eq!(back.k, 3);
    }

    #[test]
    fn synthetic_corpus_has_exact_prior() {
        let c = synthesize("syn", 500, 55, 1);
        let s = corpus_stats(&c);
        assert_eq!((s.n, s.n_positive), (500, 55));
        assert_eq!(c, synthesize("syn", 500, 55, 1));
    }
}
