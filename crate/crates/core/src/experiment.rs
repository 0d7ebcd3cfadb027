//! Cross-validation protocol: per-epoch k-fold runs, best-epoch selection by
//! mean positive-class F1, out-of-fold pooling, ensemble evaluation, result
//! tables and run manifests.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::baseline::{self, FeatureConfig, ModelError, PreparedCorpus, TrainConfig};
use crate::corpus::{self, Corpus, CorpusError, CorpusFormat, FoldPlan, Label};
use crate::ensemble::{self, EnsembleError, EnsembleInput, EnsembleOutcome, PredictionSet, ScoreMode, ScoreVector, TiePolicy};
use crate::metrics::{self, ConfusionMatrix, MetricsError, MetricsRecord, MetricsReport};
use crate::seed;
use crate::IdMap;

pub const MAJORITY_VOTE: &str = "Majority Vote";
pub const HIGHEST_SUM: &str = "Highest Sum";

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Ensemble(#[from] EnsembleError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid epoch grid: {0}")]
    InvalidGrid(String),
    #[error("invalid model specification: {0}")]
    InvalidModel(String),
    #[error("fold-averaged aggregation needs a fold plan")]
    MissingFoldPlan,
    #[error("input {path} changed since the manifest was written (sha256 {expected}, found {found})")]
    DigestMismatch { path: String, expected: String, found: String },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    #[default]
    Pooled,
    FoldAveraged,
}

/// Candidate epoch counts, strictly increasing and positive.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct EpochGrid(Vec<usize>);

impl EpochGrid {
    pub fn new(epochs: Vec<usize>) -> Result<Self, ExperimentError> {
        if epochs.is_empty() {
            return Err(ExperimentError::InvalidGrid("empty".into()));
        }
        if epochs[0] == 0 {
            return Err(ExperimentError::InvalidGrid("epochs must be positive".into()));
        }
        if epochs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ExperimentError::InvalidGrid(format!("{epochs:?} is not strictly increasing")));
        }
        Ok(EpochGrid(epochs))
    }

    pub fn epochs(&self) -> &[usize] {
        &self.0
    }

    pub fn max(&self) -> usize {
        *self.0.last().unwrap()
    }
}

impl Default for EpochGrid {
    fn default() -> Self {
        EpochGrid(vec![1, 2, 3, 4, 5])
    }
}

impl TryFrom<Vec<usize>> for EpochGrid {
    type Error = ExperimentError;

    fn try_from(v: Vec<usize>) -> Result<Self, Self::Error> {
        EpochGrid::new(v)
    }
}

impl From<EpochGrid> for Vec<usize> {
    fn from(g: EpochGrid) -> Self {
        g.0
    }
}

/// A named baseline configuration. `train.epochs` and `train.seed` are
/// overridden by the grid and by derived seeds during cross-validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub train: TrainConfig,
    pub features: FeatureConfig,
}

impl ModelSpec {
    pub fn named(name: impl Into<String>) -> Self {
        ModelSpec { name: name.into(), train: TrainConfig::default(), features: FeatureConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub k: usize,
    pub grid: EpochGrid,
    pub seed: u64,
    pub stratified: bool,
    pub mode: AggregationMode,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig { k: 5, grid: EpochGrid::default(), seed: 0, stratified: true, mode: AggregationMode::Pooled }
    }
}

/// Seed used to train `model` on every fold but `fold`.
pub fn train_seed(master: u64, model: &str, fold: usize) -> u64 {
    seed::derive_seed(master, &format!("train/{model}/fold{fold}"))
}

pub fn fold_seed(master: u64) -> u64 {
    seed::derive_seed(master, "folds")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub fold_confusions: Vec<ConfusionMatrix>,
    pub fold_reports: Vec<MetricsReport>,
    pub mean_f1: f64,
    pub pooled: MetricsReport,
    pub fold_averaged: MetricsReport,
}

impl EpochRecord {
    pub fn report(&self, mode: AggregationMode) -> MetricsReport {
        match mode {
            AggregationMode::Pooled => self.pooled,
            AggregationMode::FoldAveraged => self.fold_averaged,
        }
    }

    pub fn pooled_counts(&self) -> ConfusionMatrix {
        self.fold_confusions.iter().copied().sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub model_name: String,
    pub per_epoch: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub aggregation_mode: AggregationMode,
}

impl CvResult {
    pub fn record(&self, epoch: usize) -> Option<&EpochRecord> {
        self.per_epoch.iter().find(|r| r.epoch == epoch)
    }

    pub fn best(&self) -> &EpochRecord {
        self.record(self.best_epoch).expect("best epoch is in the grid")
    }
}

/// Epoch with the highest mean F1; the smallest epoch wins ties.
pub fn select_best_epoch(mean_f1: &[(usize, f64)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(epoch, f1) in mean_f1 {
        best = match best {
            Some((be, bf)) if bf > f1 || (bf == f1 && be < epoch) => Some((be, bf)),
            _ => Some((epoch, f1)),
        };
    }
    best.map(|(e, _)| e)
}

/// One model's cross-validation outcome with its out-of-fold predictions per
/// grid epoch.
#[derive(Debug, Clone)]
pub struct ModelCv {
    pub result: CvResult,
    pub oof: BTreeMap<usize, PredictionSet>,
}

impl ModelCv {
    pub fn best_predictions(&self) -> &PredictionSet {
        &self.oof[&self.result.best_epoch]
    }
}

#[derive(Debug, Clone)]
pub struct CvRun {
    pub plan: FoldPlan,
    pub models: Vec<ModelCv>,
}

type FoldScores = BTreeMap<usize, Vec<(String, ScoreVector)>>;

fn run_fold(
    corpus: &Corpus,
    plan: &FoldPlan,
    spec: &ModelSpec,
    fold: usize,
    grid: &EpochGrid,
    master: u64,
) -> Result<FoldScores, ExperimentError> {
    let train = corpus.filter("train", |id| plan.fold_of(id) != Some(fold));
    let held_out = corpus.filter("held_out", |id| plan.fold_of(id) == Some(fold));
    let prepared = PreparedCorpus::new(&train, spec.features)?;
    let config = TrainConfig { epochs: grid.max(), seed: train_seed(master, &spec.name, fold), ..spec.train };
    let features: Vec<(String, baseline::SparseVector)> = held_out
        .examples()
        .iter()
        .map(|e| (e.id.clone(), prepared.space.featurize(&baseline::normalize_text(&e.text))))
        .collect();
    let mut out = FoldScores::new();
    baseline::train_with_snapshots(&prepared, &config, |epoch, model| {
        if grid.epochs().contains(&epoch) {
            let scores = features.iter().map(|(id, x)| (id.clone(), model.predict_features(x))).collect();
            out.insert(epoch, scores);
        }
    })?;
    Ok(out)
}

/// Runs `jobs` closures over `n` task indices on up to `jobs` threads and
/// returns results in task order.
fn run_tasks<T: Send>(n: usize, jobs: usize, task: impl Fn(usize) -> T + Sync) -> Vec<T> {
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(task).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<T>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let r = task(i);
                slots.lock().unwrap()[i] = Some(r);
            });
        }
    });
    slots.into_inner().unwrap().into_iter().map(|r| r.expect("task ran")).collect()
}

/// Cross-validates every model spec over the epoch grid. Fold×model jobs run
/// on up to `jobs` threads; results do not depend on the schedule.
pub fn run_cv(corpus: &Corpus, models: &[ModelSpec], config: &CvConfig, jobs: usize) -> Result<CvRun, ExperimentError> {
    if models.is_empty() {
        return Err(ExperimentError::InvalidModel("no model specifications".into()));
    }
    let mut names = std::collections::BTreeSet::new();
    for m in models {
        if !names.insert(m.name.as_str()) {
            return Err(ExperimentError::InvalidModel(format!("duplicate model name {:?}", m.name)));
        }
        ensemble::validate_model_name(&m.name)?;
        m.train.validate()?;
        m.features.validate()?;
    }
    let plan = corpus::make_folds(corpus, config.k, fold_seed(config.seed), config.stratified)?;
    let k = plan.k;
    let outputs = run_tasks(models.len() * k, jobs, |i| run_fold(corpus, &plan, &models[i / k], i % k, &config.grid, config.seed));

    let gold = corpus.gold();
    let mut outputs = outputs.into_iter();
    let mut results = Vec::with_capacity(models.len());
    for spec in models {
        let per_fold: Vec<FoldScores> = outputs.by_ref().take(k).collect::<Result<_, _>>()?;
        let mut per_epoch = Vec::new();
        let mut oof = BTreeMap::new();
        for &epoch in config.grid.epochs() {
            let mut scores = IdMap::new();
            let mut fold_confusions = Vec::with_capacity(k);
            for fold_scores in &per_fold {
                let mut cm = ConfusionMatrix::default();
                for (id, sv) in &fold_scores[&epoch] {
                    cm.record(gold[id], sv.hard_label());
                    scores.insert(id.clone(), *sv);
                }
                fold_confusions.push(cm);
            }
            let fold_reports = fold_confusions.iter().map(metrics::compute_metrics).collect::<Result<Vec<_>, _>>()?;
            let fold_averaged = MetricsReport::mean(&fold_reports)?;
            let pooled = metrics::compute_metrics(&fold_confusions.iter().copied().sum())?;
            per_epoch.push(EpochRecord {
                epoch,
                mean_f1: fold_averaged.f1,
                fold_confusions,
                fold_reports,
                pooled,
                fold_averaged,
            });
            oof.insert(epoch, PredictionSet::new(spec.name.clone(), scores)?);
        }
        let means: Vec<(usize, f64)> = per_epoch.iter().map(|r| (r.epoch, r.mean_f1)).collect();
        let best_epoch = select_best_epoch(&means).expect("grid is nonempty");
        results.push(ModelCv {
            result: CvResult { model_name: spec.name.clone(), per_epoch, best_epoch, aggregation_mode: config.mode },
            oof,
        });
    }
    Ok(CvRun { plan, models: results })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowGroup {
    Ensembles,
    Models,
}

impl RowGroup {
    pub fn title(self) -> &'static str {
        match self {
            RowGroup::Ensembles => "Ensembles",
            RowGroup::Models => "Models",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub group: RowGroup,
    pub name: String,
    pub metrics: MetricsReport,
    /// Pooled counts over every evaluated example.
    pub counts: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsTable {
    pub aggregation_mode: AggregationMode,
    rows: Vec<ResultRow>,
}

impl ResultsTable {
    /// Orders rows by group (ensembles first), then F1 descending, then name.
    pub fn new(aggregation_mode: AggregationMode, mut rows: Vec<ResultRow>) -> Self {
        rows.sort_by(|a, b| {
            a.group
                .cmp(&b.group)
                .then_with(|| b.metrics.f1.total_cmp(&a.metrics.f1))
                .then_with(|| a.name.cmp(&b.name))
        });
        ResultsTable { aggregation_mode, rows }
    }

    pub fn rows(&self) -> &[ResultRow] {
        &self.rows
    }

    pub fn row(&self, name: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

/// Scores `labels` against `gold` under `mode`. Fold-averaged mode averages
/// per-fold metrics over the folds of `plan`.
pub fn evaluate_labels(
    gold: &IdMap<Label>,
    labels: &IdMap<Label>,
    mode: AggregationMode,
    plan: Option<&FoldPlan>,
) -> Result<(MetricsReport, ConfusionMatrix), ExperimentError> {
    let counts = metrics::confusion(gold, labels)?;
    let report = match mode {
        AggregationMode::Pooled => metrics::compute_metrics(&counts)?,
        AggregationMode::FoldAveraged => {
            let plan = plan.ok_or(ExperimentError::MissingFoldPlan)?;
            let mut folds = vec![ConfusionMatrix::default(); plan.k];
            for (id, &g) in gold {
                let f = plan.fold_of(id).ok_or_else(|| CorpusError::UnassignedId(id.clone()))?;
                folds[f].record(g, labels[id]);
            }
            let reports = folds
                .iter()
                .filter(|cm| cm.total() > 0)
                .map(metrics::compute_metrics)
                .collect::<Result<Vec<_>, _>>()?;
            MetricsReport::mean(&reports)?
        }
    };
    Ok((report, counts))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Methods {
    pub majority_vote: bool,
    pub highest_sum: bool,
}

impl Methods {
    pub const BOTH: Methods = Methods { majority_vote: true, highest_sum: true };
    pub const NONE: Methods = Methods { majority_vote: false, highest_sum: false };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleSettings {
    pub methods: Methods,
    pub tie_policy: TiePolicy,
    pub score_mode: ScoreMode,
    pub mode: AggregationMode,
}

#[derive(Debug, Clone)]
pub struct EnsembleEvaluation {
    pub table: ResultsTable,
    pub majority_vote: Option<EnsembleOutcome>,
    pub highest_sum: Option<EnsembleOutcome>,
}

impl EnsembleEvaluation {
    pub fn tie_counts(&self) -> TieCounts {
        TieCounts {
            majority_vote: self.majority_vote.as_ref().map(|o| o.ties),
            highest_sum: self.highest_sum.as_ref().map(|o| o.ties),
        }
    }
}

/// Builds the results table: one row per requested ensemble plus one per
/// member model.
pub fn evaluate_ensembles(
    input: &EnsembleInput,
    gold: &Corpus,
    settings: &EnsembleSettings,
    plan: Option<&FoldPlan>,
) -> Result<EnsembleEvaluation, ExperimentError> {
    let gold_map = gold.gold();
    let gold_ids = gold_map.keys();
    metrics::check_same_ids(gold_ids, input.ids())?;
    if settings.mode == AggregationMode::FoldAveraged && plan.is_none() {
        return Err(ExperimentError::MissingFoldPlan);
    }

    let mut rows = Vec::new();
    let mut push = |group, name: &str, labels: &IdMap<Label>| -> Result<(), ExperimentError> {
        let (metrics, counts) = evaluate_labels(&gold_map, labels, settings.mode, plan)?;
        rows.push(ResultRow { group, name: name.to_string(), metrics, counts });
        Ok(())
    };

    let majority = if settings.methods.majority_vote {
        let out = ensemble::majority_vote(input, settings.tie_policy)?;
        push(RowGroup::Ensembles, MAJORITY_VOTE, &out.labels)?;
        Some(out)
    } else {
        None
    };
    let highest = if settings.methods.highest_sum {
        let out = ensemble::highest_sum(input, settings.score_mode)?;
        push(RowGroup::Ensembles, HIGHEST_SUM, &out.labels)?;
        Some(out)
    } else {
        None
    };
    for member in input.members() {
        push(RowGroup::Models, &member.model_name, &member.hard_labels())?;
    }
    Ok(EnsembleEvaluation { table: ResultsTable::new(settings.mode, rows), majority_vote: majority, highest_sum: highest })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableFormat {
    Text,
    Tsv,
    Json,
}

impl TableFormat {
    pub fn extension(self) -> &'static str {
        match self {
            TableFormat::Text => "txt",
            TableFormat::Tsv => "tsv",
            TableFormat::Json => "json",
        }
    }
}

fn text_grid(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let line = |cells: &mut dyn Iterator<Item = &str>| -> String {
        let mut s = String::new();
        for (i, cell) in cells.enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            s.push_str(cell);
            if i + 1 < widths.len() {
                s.extend(std::iter::repeat_n(' ', widths[i] - cell.chars().count()));
            }
        }
        s.push('\n');
        s
    };
    let mut out = line(&mut header.iter().copied());
    for row in rows {
        out.push_str(&line(&mut row.iter().map(String::as_str)));
    }
    out
}

#[derive(Serialize)]
struct JsonRow<'a> {
    group: RowGroup,
    model: &'a str,
    #[serde(flatten)]
    metrics: MetricsRecord,
}

#[derive(Serialize)]
struct JsonTable<'a> {
    aggregation_mode: AggregationMode,
    zero_division: &'static str,
    rows: Vec<JsonRow<'a>>,
}

/// Renders the table. Text shows metrics rounded half-up to two decimals;
/// TSV and JSON carry full precision.
pub fn render_table(table: &ResultsTable, format: TableFormat) -> String {
    match format {
        TableFormat::Text => {
            let header = ["Group", "Model", "F1-score", "Acc.", "Precision", "Recall"];
            let mut rows = Vec::new();
            let mut last_group = None;
            for r in table.rows() {
                let group = if last_group == Some(r.group) { String::new() } else { r.group.title().to_string() };
                last_group = Some(r.group);
                let m = &r.metrics;
                rows.push(vec![
                    group,
                    r.name.clone(),
                    metrics::fmt2(m.f1),
                    metrics::fmt2(m.accuracy),
                    metrics::fmt2(m.precision),
                    metrics::fmt2(m.recall),
                ]);
            }
            let mut out = text_grid(&header, &rows);
            if !rows.is_empty() {
                let mode = match table.aggregation_mode {
                    AggregationMode::Pooled => "pooled over all examples",
                    AggregationMode::FoldAveraged => "averaged over folds",
                };
                out.push_str(&format!("\nmetrics {mode}; positive class = hateful; {}\n", metrics::ZERO_DIVISION_NOTE));
            }
            out
        }
        TableFormat::Tsv => {
            let mut out = String::from("group\tmodel\tf1\taccuracy\tprecision\trecall\ttp\tfp\tfn\ttn\n");
            for r in table.rows() {
                let (m, c) = (&r.metrics, &r.counts);
                out.push_str(&format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                    r.group.title(),
                    r.name,
                    m.f1,
                    m.accuracy,
                    m.precision,
                    m.recall,
                    c.tp,
                    c.fp,
                    c.fn_,
                    c.tn
                ));
            }
            out
        }
        TableFormat::Json => {
            let doc = JsonTable {
                aggregation_mode: table.aggregation_mode,
                zero_division: metrics::ZERO_DIVISION_NOTE,
                rows: table
                    .rows()
                    .iter()
                    .map(|r| JsonRow { group: r.group, model: &r.name, metrics: MetricsRecord::new(r.metrics, r.counts) })
                    .collect(),
            };
            let mut s = serde_json::to_string_pretty(&doc).expect("table serializes");
            s.push('\n');
            s
        }
    }
}

/// Two-column best-epoch report, one row per model configuration.
pub fn render_epochs(results: &[&CvResult], format: TableFormat) -> String {
    match format {
        TableFormat::Text => {
            let rows: Vec<Vec<String>> =
                results.iter().map(|r| vec![r.model_name.clone(), r.best_epoch.to_string()]).collect();
            text_grid(&["Model", "Epochs"], &rows)
        }
        TableFormat::Tsv => {
            let mut out = String::from("model\tbest_epoch\tepoch\tmean_f1\n");
            for r in results {
                for rec in &r.per_epoch {
                    out.push_str(&format!("{}\t{}\t{}\t{}\n", r.model_name, r.best_epoch, rec.epoch, rec.mean_f1));
                }
            }
            out
        }
        TableFormat::Json => {
            let doc: Vec<serde_json::Value> = results
                .iter()
                .map(|r| {
                    serde_json::json!({
                        "model": r.model_name,
                        "best_epoch": r.best_epoch,
                        "mean_f1": r.per_epoch.iter().map(|e| (e.epoch.to_string(), e.mean_f1)).collect::<BTreeMap<_, _>>(),
                    })
                })
                .collect();
            let mut s = serde_json::to_string_pretty(&doc).expect("epochs serialize");
            s.push('\n');
            s
        }
    }
}

/// A published (F1, accuracy, precision, recall) row to audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportedRow {
    pub name: String,
    pub f1: f64,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AuditFinding {
    pub name: String,
    pub reported_f1: f64,
    pub recomputed_f1: f64,
    pub consistent: bool,
    pub note: Option<String>,
}

/// Checks each row's F1 against the harmonic mean of its precision and
/// recall. A row outside `tolerance` cannot come from pooled counts, since
/// pooled F1 is exactly that harmonic mean; it is flagged as explainable
/// only by averaging F1 over folds.
pub fn audit_f1_consistency(rows: &[ReportedRow], tolerance: f64) -> Vec<AuditFinding> {
    rows.iter()
        .map(|r| {
            let recomputed = metrics::f1_from(r.precision, r.recall);
            let consistent = (recomputed - r.f1).abs() <= tolerance;
            let note = (!consistent).then(|| {
                format!(
                    "reported F1 {:.2} differs from 2PR/(P+R) = {:.3}; consistent only with fold-averaged aggregation",
                    r.f1, recomputed
                )
            });
            AuditFinding { name: r.name.clone(), reported_f1: r.f1, recomputed_f1: recomputed, consistent, note }
        })
        .collect()
}

/// Fine-tuning settings exported by an external transformer runner, echoed
/// verbatim into manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub checkpoint: String,
    pub learning_rate: f64,
    pub dropout: f64,
    pub max_length: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub nondeterminism_caveats: Vec<String>,
}

impl AdapterSpec {
    pub const LEARNING_RATE: f64 = 0.00001;
    pub const DROPOUT: f64 = 0.3;
    pub const MAX_LENGTH: usize = 128;
    pub const BATCH_SIZE: usize = 18;

    /// Default fine-tuning epochs per checkpoint.
    pub const DEFAULT_EPOCHS: [(&'static str, usize); 6] = [
        ("AraBERT", 4),
        ("AraELECTRA", 3),
        ("Albert-Arabic", 4),
        ("AraGPT2", 4),
        ("mBERT", 3),
        ("XLM-RoBERTa", 1),
    ];

    pub fn with_defaults(checkpoint: &str, seed: u64) -> Option<Self> {
        let epochs = Self::DEFAULT_EPOCHS.iter().find(|(c, _)| *c == checkpoint)?.1;
        Some(AdapterSpec {
            checkpoint: checkpoint.to_string(),
            learning_rate: Self::LEARNING_RATE,
            dropout: Self::DROPOUT,
            max_length: Self::MAX_LENGTH,
            batch_size: Self::BATCH_SIZE,
            epochs,
            seed,
            nondeterminism_caveats: Vec::new(),
        })
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let s = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&s).map_err(|source| ExperimentError::Json { path: path.to_path_buf(), source })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TieCounts {
    pub majority_vote: Option<usize>,
    pub highest_sum: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

impl InputDigest {
    pub fn of(path: &Path) -> Result<Self, ExperimentError> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Ok(InputDigest { path: path.display().to_string(), sha256: seed::sha256_hex(&bytes) })
    }
}

/// Everything needed to reproduce a run. Output paths are relative to the run
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub master_seed: u64,
    pub seed_derivation: String,
    pub derived_seeds: BTreeMap<String, u64>,
    pub config: serde_json::Value,
    pub inputs: Vec<InputDigest>,
    pub aggregation_mode: AggregationMode,
    pub tie_counts: TieCounts,
    pub best_epochs: BTreeMap<String, usize>,
    pub warnings: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub transformer_adapter: Vec<AdapterSpec>,
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn new(command: &str, master_seed: u64, config: serde_json::Value, aggregation_mode: AggregationMode) -> Self {
        RunManifest {
            tool: env!("CARGO_PKG_NAME").to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            command: command.to_string(),
            master_seed,
            seed_derivation: seed::DERIVATION.to_string(),
            derived_seeds: BTreeMap::new(),
            config,
            inputs: Vec::new(),
            aggregation_mode,
            tie_counts: TieCounts::default(),
            best_epochs: BTreeMap::new(),
            warnings: Vec::new(),
            transformer_adapter: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let s = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&s).map_err(|source| ExperimentError::Json { path: path.to_path_buf(), source })
    }
}

pub fn write_manifest(path: &Path, manifest: &RunManifest) -> Result<(), ExperimentError> {
    let mut s = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    s.push('\n');
    write_file(path, &s)
}

/// Writes `content`, creating parent directories.
pub fn write_file(path: &Path, content: &str) -> Result<(), ExperimentError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io_err(parent))?;
    }
    fs::write(path, content).map_err(io_err(path))
}

/// Full cross-validation request, as stored in the manifest `config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRequest {
    pub input: PathBuf,
    pub format: CorpusFormat,
    pub cv: CvConfig,
    pub models: Vec<ModelSpec>,
    pub ensembles: EnsembleSettings,
}

#[derive(Debug)]
pub struct CvOutcome {
    pub run: CvRun,
    pub evaluation: EnsembleEvaluation,
    pub manifest: RunManifest,
}

/// Runs cross-validation and writes the run directory:
/// `manifest.json`, `folds.tsv`, `cv.json`, `preds/<model>/<epoch>.pred.tsv`,
/// `tables/{results,epochs}.{txt,tsv,json}` and, with two or more models,
/// `labels/<ensemble>.tsv`.
pub fn execute_cv(request: &CvRequest, run_dir: &Path, jobs: usize) -> Result<CvOutcome, ExperimentError> {
    let corpus = corpus::load_corpus(&request.input, request.format)?;
    let digest = InputDigest::of(&request.input)?;
    let run = run_cv(&corpus, &request.models, &request.cv, jobs)?;

    let members: Vec<PredictionSet> = run.models.iter().map(|m| m.best_predictions().clone()).collect();
    let input = EnsembleInput::new(members)?;
    let mut settings = request.ensembles;
    settings.mode = request.cv.mode;
    if run.models.len() < 2 {
        settings.methods = Methods::NONE;
    }
    let evaluation = evaluate_ensembles(&input, &corpus, &settings, Some(&run.plan))?;

    let config = serde_json::to_value(request).expect("request serializes");
    let mut manifest = RunManifest::new("cv", request.cv.seed, config, request.cv.mode);
    manifest.inputs.push(digest);
    manifest.derived_seeds.insert("folds".into(), fold_seed(request.cv.seed));
    if let TiePolicy::SeededRandom { seed } = settings.tie_policy {
        manifest.derived_seeds.insert("ties".into(), seed);
    }
    for spec in &request.models {
        for fold in 0..run.plan.k {
            manifest
                .derived_seeds
                .insert(format!("train/{}/fold{fold}", spec.name), train_seed(request.cv.seed, &spec.name, fold));
        }
    }
    manifest.tie_counts = evaluation.tie_counts();
    for m in &run.models {
        manifest.best_epochs.insert(m.result.model_name.clone(), m.result.best_epoch);
    }
    if !request.cv.stratified {
        manifest.warnings.push("folds are not stratified".into());
    }

    let mut files: Vec<(String, String)> = vec![("folds.tsv".into(), run.plan.to_tsv())];
    for m in &run.models {
        for (epoch, preds) in &m.oof {
            files.push((format!("preds/{}/{epoch}.pred.tsv", m.result.model_name), preds.to_tsv()));
        }
    }
    let results: Vec<&CvResult> = run.models.iter().map(|m| &m.result).collect();
    let mut cv_json = serde_json::to_string_pretty(&results).expect("cv results serialize");
    cv_json.push('\n');
    files.push(("cv.json".into(), cv_json));
    for format in [TableFormat::Text, TableFormat::Tsv, TableFormat::Json] {
        let ext = format.extension();
        files.push((format!("tables/results.{ext}"), render_table(&evaluation.table, format)));
        files.push((format!("tables/epochs.{ext}"), render_epochs(&results, format)));
    }
    if let Some(o) = &evaluation.majority_vote {
        files.push(("labels/majority_vote.tsv".into(), ensemble::labels_to_tsv(&o.labels)));
    }
    if let Some(o) = &evaluation.highest_sum {
        files.push(("labels/highest_sum.tsv".into(), ensemble::labels_to_tsv(&o.labels)));
    }
    files.sort();
    manifest.outputs = files.iter().map(|(p, _)| p.clone()).collect();
    manifest.outputs.insert(0, "manifest.json".into());

    for (rel, content) in &files {
        write_file(&run_dir.join(rel), content)?;
    }
    write_manifest(&run_dir.join("manifest.json"), &manifest)?;
    Ok(CvOutcome { run, evaluation, manifest })
}

/// Re-executes the cross-validation recorded in a manifest after checking
/// that the input file is unchanged.
pub fn rerun_from_manifest(manifest: &RunManifest, run_dir: &Path, jobs: usize) -> Result<CvOutcome, ExperimentError> {
    let request: CvRequest = serde_json::from_value(manifest.config.clone())
        .map_err(|source| ExperimentError::Json { path: PathBuf::from("manifest.json#config"), source })?;
    for recorded in &manifest.inputs {
        let now = InputDigest::of(Path::new(&recorded.path))?;
        if now.sha256 != recorded.sha256 {
            return Err(ExperimentError::DigestMismatch {
                path: recorded.path.clone(),
                expected: recorded.sha256.clone(),
                found: now.sha256,
            });
        }
    }
    execute_cv(&request, run_dir, jobs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::LabeledExample;

    #[test]
    fn best_epoch_is_argmax_with_smallest_tie() {
        assert_eq!(select_best_epoch(&[(1, 0.50), (2, 0.62), (3, 0.60)]), Some(2));
        assert_eq!(select_best_epoch(&[(2, 0.60), (4, 0.60)]), Some(2));
        assert_eq!(select_best_epoch(&[]), None);
    }

    #[test]
    fn grid_validation() {
        assert!(EpochGrid::new(vec![]).is_err());
        assert!(EpochGrid::new(vec![0, 1]).is_err());
        assert!(EpochGrid::new(vec![2, 2]).is_err());
        assert!(EpochGrid::new(vec![3, 1]).is_err());
        assert_eq!(EpochGrid::new(vec![1, 3, 4]).unwrap().max(), 4);
        assert!(serde_json::from_str::<EpochGrid>("[2,1]").is_err());
    }

    fn row(name: &str, group: RowGroup, f1: f64) -> ResultRow {
        ResultRow {
            group,
            name: name.into(),
            metrics: MetricsReport { precision: f1, recall: f1, f1, accuracy: f1 },
            counts: ConfusionMatrix::default(),
        }
    }

    #[test]
    fn table_orders_groups_then_f1() {
        let t = ResultsTable::new(
            AggregationMode::Pooled,
            vec![
                row("b", RowGroup::Models, 0.5),
                row(HIGHEST_SUM, RowGroup::Ensembles, 0.62),
                row("a", RowGroup::Models, 0.7),
                row(MAJORITY_VOTE, RowGroup::Ensembles, 0.76),
            ],
        );
        let names: Vec<&str> = t.rows().iter().map(|r| r.name.as_str()).collect();
        assert_eq!(names, [MAJORITY_VOTE, HIGHEST_SUM, "a", "b"]);
    }

    #[test]
    fn empty_table_renders_header_only() {
        let t = ResultsTable::new(AggregationMode::Pooled, vec![]);
        assert_eq!(render_table(&t, TableFormat::Text).lines().count(), 1);
        assert_eq!(render_table(&t, TableFormat::Tsv).lines().count(), 1);
    }

    #[test]
    fn text_cells_round_half_up() {
        let t = ResultsTable::new(AggregationMode::Pooled, vec![row("m", RowGroup::Models, 0.615)]);
        let text = render_table(&t, TableFormat::Text);
        let line = text.lines().nth(1).unwrap();
        assert!(line.contains("0.62"), "{line}");
        let tsv = render_table(&t, TableFormat::Tsv);
        assert!(tsv.contains("\t0.615\t"), "{tsv}");
    }

    #[test]
    fn fold_averaged_needs_plan() {
        let gold: IdMap<Label> = [("a".to_string(), Label::Hateful)].into();
        assert!(matches!(
            evaluate_labels(&gold, &gold, AggregationMode::FoldAveraged, None),
            Err(ExperimentError::MissingFoldPlan)
        ));
    }

    #[test]
    fn pooled_and_fold_averaged_differ_on_uneven_folds() {
        use Label::*;
        let gold: IdMap<Label> =
            [("a", Hateful), ("b", Hateful), ("c", NotHateful), ("d", Hateful)].map(|(i, l)| (i.to_string(), l)).into();
        let pred: IdMap<Label> =
            [("a", Hateful), ("b", NotHateful), ("c", Hateful), ("d", Hateful)].map(|(i, l)| (i.to_string(), l)).into();
        let plan = FoldPlan {
            k: 2,
            seed: None,
            stratified: false,
            assignment: [("a", 0), ("b", 0), ("c", 1), ("d", 1)].map(|(i, f)| (i.to_string(), f)).into(),
        };
        // fold 0: tp1 fn1 -> f1 2/3; fold 1: tp1 fp1 -> f1 2/3; pooled tp2 fp1 fn1 -> f1 2/3
        let (avg, counts) = evaluate_labels(&gold, &pred, AggregationMode::FoldAveraged, Some(&plan)).unwrap();
        let (pooled, _) = evaluate_labels(&gold, &pred, AggregationMode::Pooled, Some(&plan)).unwrap();
        assert!((avg.f1 - 2.0 / 3.0).abs() < 1e-12);
        assert!((pooled.f1 - 2.0 / 3.0).abs() < 1e-12);
        // precision: fold 0 = 1, fold 1 = 0.5 -> mean 0.75; pooled 2/3
        assert!((avg.precision - 0.75).abs() < 1e-12);
        assert!((pooled.precision - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(counts, ConfusionMatrix { tp: 2, fp: 1, fn_: 1, tn: 0 });
    }

    #[test]
    fn audit_flags_inconsistent_rows() {
        let rows = vec![
            ReportedRow { name: "x".into(), f1: 0.76, accuracy: 0.95, precision: 0.88, recall: 0.69 },
            ReportedRow { name: "y".into(), f1: 0.62, accuracy: 0.87, precision: 0.45, recall: 0.96 },
        ];
        let findings = audit_f1_consistency(&rows, 0.01);
        assert!(!findings[0].consistent);
        assert!(findings[0].note.as_ref().unwrap().contains("fold-averaged"));
        assert!(findings[1].consistent);
    }

    #[test]
    fn adapter_defaults() {
        let spec = AdapterSpec::with_defaults("AraBERT", 1).unwrap();
        assert_eq!((spec.learning_rate, spec.dropout, spec.max_length, spec.batch_size, spec.epochs), (1e-5, 0.3, 128, 18, 4));
        assert!(AdapterSpec::with_defaults("GPT-9", 1).is_none());
    }

    #[test]
    fn run_tasks_preserves_order() {
        let seq = run_tasks(17, 1, |i| i * i);
        let par = run_tasks(17, 4, |i| i * i);
        assert_eq!(seq, par);
    }

    #[test]
    fn run_cv_rejects_bad_models() {
        let examples = (0..10)
            .map(|i| LabeledExample {
                id: format!("e{i}"),
                text: "x y".into(),
                label: if i < 3 { Label::Hateful } else { Label::NotHateful },
            })
            .collect();
        let c = Corpus::new("c", examples).unwrap();
        let cfg = CvConfig { k: 2, ..CvConfig::default() };
        assert!(run_cv(&c, &[], &cfg, 1).is_err());
        let dup = [ModelSpec::named("a"), ModelSpec::named("a")];
        assert!(matches!(run_cv(&c, &dup, &cfg, 1), Err(ExperimentError::InvalidModel(_))));
        let bad = CvConfig { k: 11, ..cfg };
        assert!(matches!(run_cv(&c, &[ModelSpec::named("a")], &bad, 1), Err(ExperimentError::Corpus(CorpusError::InvalidK { .. }))));
    }
}
