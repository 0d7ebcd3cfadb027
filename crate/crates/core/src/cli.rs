//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 internal error (for example an unwritable output path).

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::baseline::{self, BaselineModel, FeatureConfig, ModelError, TrainConfig};
use crate::corpus::{self, Corpus, CorpusError, CorpusFormat, FoldPlan};
use crate::ensemble::{self, EnsembleError, EnsembleInput, PredictionSet, ScoreMode, TiePolicy};
use crate::experiment::{
    self, AdapterSpec, AggregationMode, CvConfig, CvRequest, EnsembleSettings, EpochGrid, ExperimentError,
    InputDigest, Methods, ModelSpec, RunManifest, TableFormat,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_INTERNAL: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
    Internal(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Internal(_) => EXIT_INTERNAL,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Internal(m) => m,
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::InvalidFraction(_) => CliError::Usage(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<EnsembleError> for CliError {
    fn from(e: EnsembleError) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => CliError::Usage(e.to_string()),
            ModelError::Io { .. } => CliError::Data(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<ExperimentError> for CliError {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Corpus(c) => c.into(),
            ExperimentError::Model(m) => m.into(),
            ExperimentError::InvalidGrid(_) | ExperimentError::InvalidModel(_) | ExperimentError::MissingFoldPlan => {
                CliError::Usage(e.to_string())
            }
            ExperimentError::Io { .. } => CliError::Internal(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

type CliResult = Result<(), CliError>;

#[derive(Parser, Debug)]
#[command(name = "ensemble-cv", version, about = "Cross-validated evaluation and ensembling of binary text classifiers")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print corpus statistics as JSON.
    Stats(StatsArgs),
    /// Stratified train/test split.
    Split(SplitArgs),
    /// Write a k-fold plan as `id<TAB>fold`.
    Folds(FoldsArgs),
    /// Generate a synthetic labeled corpus.
    Synth(SynthArgs),
    /// Train the baseline classifier.
    Train(TrainArgs),
    /// Score a corpus with a trained baseline model.
    Predict(PredictArgs),
    /// Cross-validate baseline configurations over an epoch grid.
    Cv(CvArgs),
    /// Combine prediction files by Majority Vote and/or Highest Sum.
    Ensemble(EnsembleArgs),
    /// Evaluate prediction files without ensembling.
    Report(ReportArgs),
    /// Re-run a cross-validation from its manifest.
    Rerun(RerunArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum FormatArg {
    Tsv,
    Jsonl,
}

impl From<FormatArg> for CorpusFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Tsv => CorpusFormat::Tsv,
            FormatArg::Jsonl => CorpusFormat::Jsonl,
        }
    }
}

#[derive(Args, Debug)]
pub struct InputArgs {
    /// Labeled corpus file.
    #[arg(long)]
    pub input: PathBuf,
    /// Corpus format; inferred from the extension when omitted.
    #[arg(long, value_enum)]
    pub format: Option<FormatArg>,
}

impl InputArgs {
    fn format(&self) -> CorpusFormat {
        self.format.map(Into::into).unwrap_or_else(|| CorpusFormat::from_path(&self.input))
    }

    fn load(&self) -> Result<Corpus, CliError> {
        Ok(corpus::load_corpus(&self.input, self.format())?)
    }
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[command(flatten)]
    pub input: InputArgs,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value_t = 0.2)]
    pub test_fraction: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Directory receiving `train.tsv` and `test.tsv`.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Args, Debug)]
pub struct FoldsArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(2..))]
    pub k: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Assign folds without preserving the class ratio.
    #[arg(long)]
    pub unstratified: bool,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub positives: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug, Clone)]
pub struct HyperArgs {
    #[arg(long, default_value_t = 0.1)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub l2: f64,
    #[arg(long, default_value_t = 18)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 2)]
    pub n_min: usize,
    #[arg(long, default_value_t = 4)]
    pub n_max: usize,
    #[arg(long, default_value_t = 1 << 18)]
    pub max_features: usize,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value_t = 5)]
    pub epochs: usize,
    #[command(flatten)]
    pub hyper: HyperArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Model JSON file to write.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub input: InputArgs,
    /// Prediction file to write, conventionally `<model>.pred.tsv`.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum ModeArg {
    Pooled,
    FoldAveraged,
}

impl From<ModeArg> for AggregationMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Pooled => AggregationMode::Pooled,
            ModeArg::FoldAveraged => AggregationMode::FoldAveraged,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum TieArg {
    Random,
    Positive,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum ScoreModeArg {
    Normalized,
    Raw,
}

impl From<ScoreModeArg> for ScoreMode {
    fn from(m: ScoreModeArg) -> Self {
        match m {
            ScoreModeArg::Normalized => ScoreMode::Normalized,
            ScoreModeArg::Raw => ScoreMode::Raw,
        }
    }
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum MethodArg {
    Majority,
    HighestSum,
    Both,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
pub enum TableFormatArg {
    Text,
    Tsv,
    Json,
}

impl From<TableFormatArg> for TableFormat {
    fn from(f: TableFormatArg) -> Self {
        match f {
            TableFormatArg::Text => TableFormat::Text,
            TableFormatArg::Tsv => TableFormat::Tsv,
            TableFormatArg::Json => TableFormat::Json,
        }
    }
}

fn tie_policy(tie: TieArg, seed: u64) -> TiePolicy {
    match tie {
        TieArg::Random => TiePolicy::SeededRandom { seed: crate::seed::derive_seed(seed, "ties") },
        TieArg::Positive => TiePolicy::FixedPositive,
    }
}

#[derive(Args, Debug)]
pub struct CvArgs {
    #[command(flatten)]
    pub input: InputArgs,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(2..))]
    pub k: u64,
    /// Candidate epoch counts, comma separated and strictly increasing.
    #[arg(long, default_value = "1,2,3,4,5", value_delimiter = ',')]
    pub epochs: Vec<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Root directory; the run is written to `<out-dir>/<run-id>/`.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Defaults to `cv-s<seed>`.
    #[arg(long)]
    pub run_id: Option<String>,
    /// Baseline configuration `name[:key=value,...]` with keys lr, l2, batch,
    /// nmin, nmax, vocab. Repeatable; defaults to a single `baseline`.
    #[arg(long = "model")]
    pub models: Vec<String>,
    #[arg(long)]
    pub unstratified: bool,
    #[arg(long, value_enum, default_value = "pooled")]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value = "random")]
    pub tie: TieArg,
    #[arg(long, value_enum, default_value = "normalized")]
    pub score_mode: ScoreModeArg,
    /// Parallel fold×model jobs; outputs do not depend on it.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: u64,
}

#[derive(Args, Debug)]
pub struct EnsembleArgs {
    /// Prediction files, `path` (model named after `<model>.pred.tsv`) or `name=path`.
    #[arg(long, num_args = 1.., required = true)]
    pub preds: Vec<String>,
    /// Gold corpus.
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long, value_enum)]
    pub gold_format: Option<FormatArg>,
    #[arg(long, value_enum, default_value = "both")]
    pub method: MethodArg,
    #[arg(long, value_enum, default_value = "random")]
    pub tie: TieArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "pooled")]
    pub mode: ModeArg,
    /// Fold plan (`id<TAB>fold`); required by `--mode fold-averaged`.
    #[arg(long)]
    pub folds: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "normalized")]
    pub score_mode: ScoreModeArg,
    #[arg(long, value_enum, default_value = "text")]
    pub table_format: TableFormatArg,
    /// Directory for label files, tables and the manifest.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    /// Fine-tuning manifest exported by a transformer runner; repeatable.
    #[arg(long)]
    pub adapter_manifest: Vec<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    pub preds: Vec<String>,
    #[arg(long)]
    pub gold: PathBuf,
    #[arg(long, value_enum)]
    pub gold_format: Option<FormatArg>,
    #[arg(long, value_enum, default_value = "pooled")]
    pub mode: ModeArg,
    #[arg(long)]
    pub folds: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    pub table_format: TableFormatArg,
}

#[derive(Args, Debug)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory receiving the reproduced run.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub jobs: u64,
}

/// Parses `name[:key=value,...]` into a model spec.
pub fn parse_model_spec(s: &str) -> Result<ModelSpec, CliError> {
    let (name, opts) = s.split_once(':').unwrap_or((s, ""));
    ensemble::validate_model_name(name).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut spec = ModelSpec::named(name);
    for kv in opts.split(',').filter(|p| !p.is_empty()) {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("model option {kv:?} is not key=value")))?;
        let bad = || CliError::Usage(format!("invalid value {v:?} for model option {k:?}"));
        match k {
            "lr" => spec.train.learning_rate = v.parse().map_err(|_| bad())?,
            "l2" => spec.train.l2 = v.parse().map_err(|_| bad())?,
            "batch" => spec.train.batch_size = v.parse().map_err(|_| bad())?,
            "nmin" => spec.features.n_min = v.parse().map_err(|_| bad())?,
            "nmax" => spec.features.n_max = v.parse().map_err(|_| bad())?,
            "vocab" => spec.features.max_features = v.parse().map_err(|_| bad())?,
            _ => return Err(CliError::Usage(format!("unknown model option {k:?}"))),
        }
    }
    spec.train.validate()?;
    spec.features.validate()?;
    Ok(spec)
}

fn write_out(path: &Path, content: &str) -> CliResult {
    experiment::write_file(path, content).map_err(|e| CliError::Internal(e.to_string()))
}

fn emit(out: &mut dyn Write, s: &str) -> CliResult {
    out.write_all(s.as_bytes()).map_err(|e| CliError::Internal(format!("stdout: {e}")))
}

fn json_line(v: &impl serde::Serialize) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn cmd_stats(args: &StatsArgs, out: &mut dyn Write) -> CliResult {
    let corpus = args.input.load()?;
    let stats = corpus::corpus_stats(&corpus);
    emit(out, &json_line(&stats))
}

fn cmd_split(args: &SplitArgs, out: &mut dyn Write, err: &mut dyn Write) -> CliResult {
    let corpus = args.input.load()?;
    let split = corpus::train_test_split(&corpus, args.test_fraction, args.seed)?;
    if !split.stratified {
        let _ = writeln!(err, "warning: a class has fewer than 2 examples; split is not stratified");
    }
    write_out(&args.out_dir.join("train.tsv"), &split.train.to_tsv())?;
    write_out(&args.out_dir.join("test.tsv"), &split.test.to_tsv())?;
    let doc = json!({
        "stratified": split.stratified,
        "seed": args.seed,
        "train": corpus::corpus_stats(&split.train),
        "test": corpus::corpus_stats(&split.test),
    });
    emit(out, &json_line(&doc))
}

fn cmd_folds(args: &FoldsArgs, out: &mut dyn Write) -> CliResult {
    let corpus = args.input.load()?;
    let plan = corpus::make_folds(&corpus, args.k as usize, args.seed, !args.unstratified)?;
    write_out(&args.output, &plan.to_tsv())?;
    let doc = json!({
        "k": plan.k,
        "seed": args.seed,
        "stratified": plan.stratified,
        "fold_sizes": plan.fold_sizes(),
        "fold_positives": plan.positive_counts(&corpus),
    });
    emit(out, &json_line(&doc))
}

fn cmd_synth(args: &SynthArgs, out: &mut dyn Write) -> CliResult {
    if args.positives > args.n {
        return Err(CliError::Usage("--positives exceeds --n".into()));
    }
    let name = args.output.file_stem().and_then(|s| s.to_str()).unwrap_or("synthetic");
    let corpus = corpus::synthesize(name, args.n, args.positives, args.seed);
    write_out(&args.output, &corpus.to_tsv())?;
    emit(out, &json_line(&corpus::corpus_stats(&corpus)))
}

fn hyper_configs(h: &HyperArgs, epochs: usize, seed: u64) -> Result<(TrainConfig, FeatureConfig), CliError> {
    let train = TrainConfig { learning_rate: h.learning_rate, epochs, l2: h.l2, seed, batch_size: h.batch_size };
    let features = FeatureConfig { n_min: h.n_min, n_max: h.n_max, max_features: h.max_features };
    train.validate()?;
    features.validate()?;
    Ok((train, features))
}

fn cmd_train(args: &TrainArgs, out: &mut dyn Write) -> CliResult {
    let (train, features) = hyper_configs(&args.hyper, args.epochs, args.seed)?;
    let corpus = args.input.load()?;
    let model = baseline::train(&corpus, &train, features)?;
    write_out(&args.output, &model.to_json())?;
    let doc = json!({ "vocabulary": model.feature_space.len(), "train_config": train, "features": features });
    emit(out, &json_line(&doc))
}

fn cmd_predict(args: &PredictArgs, out: &mut dyn Write) -> CliResult {
    let model = BaselineModel::load(&args.model)?;
    let corpus = args.input.load()?;
    let file_name = args.output.file_name().and_then(|s| s.to_str()).unwrap_or("model");
    let name = file_name.strip_suffix(ensemble::PRED_SUFFIX).unwrap_or(file_name);
    let scores = corpus.examples().iter().map(|e| (e.id.clone(), model.predict_scores(&e.text))).collect();
    let preds = PredictionSet::new(name, scores)?;
    write_out(&args.output, &preds.to_tsv())?;
    emit(out, &json_line(&json!({ "model": name, "predictions": preds.scores.len() })))
}

fn cmd_cv(args: &CvArgs, out: &mut dyn Write) -> CliResult {
    let grid = EpochGrid::new(args.epochs.clone())?;
    let models = if args.models.is_empty() {
        vec![ModelSpec::named("baseline")]
    } else {
        args.models.iter().map(|s| parse_model_spec(s)).collect::<Result<Vec<_>, _>>()?
    };
    let run_id = args.run_id.clone().unwrap_or_else(|| format!("cv-s{}", args.seed));
    if run_id.is_empty() || run_id.contains(['/', '\\']) {
        return Err(CliError::Usage(format!("invalid run id {run_id:?}")));
    }
    let mode: AggregationMode = args.mode.into();
    let request = CvRequest {
        input: args.input.input.clone(),
        format: args.input.format(),
        cv: CvConfig { k: args.k as usize, grid, seed: args.seed, stratified: !args.unstratified, mode },
        models,
        ensembles: EnsembleSettings {
            methods: Methods::BOTH,
            tie_policy: tie_policy(args.tie, args.seed),
            score_mode: args.score_mode.into(),
            mode,
        },
    };
    let run_dir = args.out_dir.join(&run_id);
    let outcome = experiment::execute_cv(&request, &run_dir, args.jobs as usize)?;
    print_cv_summary(&outcome, &run_dir, out)
}

fn print_cv_summary(outcome: &experiment::CvOutcome, run_dir: &Path, out: &mut dyn Write) -> CliResult {
    let mut s = String::new();
    for m in &outcome.run.models {
        s.push_str(&format!("best epoch {}: {}\n", m.result.model_name, m.result.best_epoch));
    }
    s.push('\n');
    let results: Vec<_> = outcome.run.models.iter().map(|m| &m.result).collect();
    s.push_str(&experiment::render_epochs(&results, TableFormat::Text));
    s.push('\n');
    s.push_str(&experiment::render_table(&outcome.evaluation.table, TableFormat::Text));
    s.push_str(&format!("\nrun directory: {}\n", run_dir.display()));
    emit(out, &s)
}

fn load_preds(specs: &[String]) -> Result<Vec<(PredictionSet, PathBuf)>, CliError> {
    specs
        .iter()
        .map(|s| {
            let loaded = match s.split_once('=') {
                Some((name, path)) => (PredictionSet::load_named(name, Path::new(path))?, PathBuf::from(path)),
                None => (PredictionSet::load(Path::new(s))?, PathBuf::from(s)),
            };
            Ok(loaded)
        })
        .collect()
}

fn load_gold(path: &Path, format: Option<FormatArg>) -> Result<Corpus, CliError> {
    let format = format.map(Into::into).unwrap_or_else(|| CorpusFormat::from_path(path));
    Ok(corpus::load_corpus(path, format)?)
}

fn load_plan(folds: Option<&PathBuf>, mode: AggregationMode, gold: &Corpus) -> Result<Option<FoldPlan>, CliError> {
    match folds {
        Some(path) => {
            let content = std::fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
            let plan = FoldPlan::from_tsv(&content)?;
            plan.check_covers(gold)?;
            Ok(Some(plan))
        }
        None if mode == AggregationMode::FoldAveraged => {
            Err(CliError::Usage("--mode fold-averaged requires --folds".into()))
        }
        None => Ok(None),
    }
}

fn cmd_ensemble(args: &EnsembleArgs, out: &mut dyn Write) -> CliResult {
    let mode: AggregationMode = args.mode.into();
    let adapters = args
        .adapter_manifest
        .iter()
        .map(|p| AdapterSpec::load(p))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Data(e.to_string()))?;
    let gold = load_gold(&args.gold, args.gold_format)?;
    let plan = load_plan(args.folds.as_ref(), mode, &gold)?;
    let loaded = load_preds(&args.preds)?;
    let pred_paths: Vec<PathBuf> = loaded.iter().map(|(_, p)| p.clone()).collect();
    let input = EnsembleInput::new(loaded.into_iter().map(|(p, _)| p).collect())?;
    let methods = match args.method {
        MethodArg::Majority => Methods { majority_vote: true, highest_sum: false },
        MethodArg::HighestSum => Methods { majority_vote: false, highest_sum: true },
        MethodArg::Both => Methods::BOTH,
    };
    let settings = EnsembleSettings { methods, tie_policy: tie_policy(args.tie, args.seed), score_mode: args.score_mode.into(), mode };
    let eval = experiment::evaluate_ensembles(&input, &gold, &settings, plan.as_ref())?;
    emit(out, &experiment::render_table(&eval.table, args.table_format.into()))?;

    if let Some(dir) = &args.out_dir {
        let mut files: Vec<(String, String)> = Vec::new();
        if let Some(o) = &eval.majority_vote {
            files.push(("labels/majority_vote.tsv".into(), ensemble::labels_to_tsv(&o.labels)));
        }
        if let Some(o) = &eval.highest_sum {
            files.push(("labels/highest_sum.tsv".into(), ensemble::labels_to_tsv(&o.labels)));
        }
        for format in [TableFormat::Text, TableFormat::Tsv, TableFormat::Json] {
            files.push((format!("tables/results.{}", format.extension()), experiment::render_table(&eval.table, format)));
        }
        let config = json!({
            "preds": args.preds,
            "gold": args.gold,
            "folds": args.folds,
            "settings": settings,
        });
        let mut manifest = RunManifest::new("ensemble", args.seed, config, mode);
        let mut digests = vec![InputDigest::of(&args.gold)?];
        for p in &pred_paths {
            digests.push(InputDigest::of(p)?);
        }
        if let Some(f) = &args.folds {
            digests.push(InputDigest::of(f)?);
        }
        manifest.inputs = digests;
        if let TiePolicy::SeededRandom { seed } = settings.tie_policy {
            manifest.derived_seeds.insert("ties".into(), seed);
        }
        manifest.tie_counts = eval.tie_counts();
        manifest.transformer_adapter = adapters;
        manifest.outputs = std::iter::once("manifest.json".to_string()).chain(files.iter().map(|(p, _)| p.clone())).collect();
        for (rel, content) in &files {
            write_out(&dir.join(rel), content)?;
        }
        experiment::write_manifest(&dir.join("manifest.json"), &manifest)?;
    }
    Ok(())
}

fn cmd_report(args: &ReportArgs, out: &mut dyn Write) -> CliResult {
    let mode: AggregationMode = args.mode.into();
    let gold = load_gold(&args.gold, args.gold_format)?;
    let plan = load_plan(args.folds.as_ref(), mode, &gold)?;
    let input = EnsembleInput::new(load_preds(&args.preds)?.into_iter().map(|(p, _)| p).collect())?;
    let settings = EnsembleSettings { methods: Methods::NONE, tie_policy: TiePolicy::FixedPositive, score_mode: ScoreMode::Normalized, mode };
    let eval = experiment::evaluate_ensembles(&input, &gold, &settings, plan.as_ref())?;
    emit(out, &experiment::render_table(&eval.table, args.table_format.into()))
}

fn cmd_rerun(args: &RerunArgs, out: &mut dyn Write) -> CliResult {
    let manifest = RunManifest::load(&args.manifest).map_err(|e| CliError::Data(e.to_string()))?;
    if manifest.command != "cv" {
        return Err(CliError::Data(format!("cannot rerun a {:?} manifest", manifest.command)));
    }
    let outcome = experiment::rerun_from_manifest(&manifest, &args.out_dir, args.jobs as usize)?;
    print_cv_summary(&outcome, &args.out_dir, out)
}

/// Runs the CLI and returns the process exit code.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{}", e.render());
                    EXIT_OK
                }
                _ => {
                    let _ = write!(err, "{}", e.render());
                    EXIT_USAGE
                }
            };
        }
    };
    let result = match &cli.command {
        Command::Stats(a) => cmd_stats(a, out),
        Command::Split(a) => cmd_split(a, out, err),
        Command::Folds(a) => cmd_folds(a, out),
        Command::Synth(a) => cmd_synth(a, out),
        Command::Train(a) => cmd_train(a, out),
        Command::Predict(a) => cmd_predict(a, out),
        Command::Cv(a) => cmd_cv(a, out),
        Command::Ensemble(a) => cmd_ensemble(a, out),
        Command::Report(a) => cmd_report(a, out),
        Command::Rerun(a) => cmd_rerun(a, out),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let kind = match e {
                CliError::Usage(_) => "usage error",
                CliError::Data(_) => "error",
                CliError::Internal(_) => "internal error",
            };
            let _ = writeln!(err, "{kind}: {}", e.message());
            e.exit_code()
        }
    }
}
