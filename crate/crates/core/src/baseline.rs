//! Character n-gram logistic regression trained by mini-batch SGD.
//!
//! Used as a self-contained producer of prediction files so the evaluation
//! protocol can run without external models.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::corpus::{Corpus, LabeledExample};
use crate::ensemble::ScoreVector;
use crate::seed;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("training corpus must contain both classes")]
    SingleClassCorpus,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid model file: {0}")]
    Format(#[from] serde_json::Error),
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),
}

fn url_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)\b(?:https?://|www\.)\S+").unwrap())
}

fn mention_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"@\w+").unwrap())
}

fn is_arabic_diacritic(c: char) -> bool {
    matches!(c, '\u{0610}'..='\u{061A}' | '\u{064B}'..='\u{065F}' | '\u{0670}' | '\u{06D6}'..='\u{06ED}')
}

/// NFC, tashkeel and tatweel removal, alef folding, `<url>` / `<user>`
/// placeholders and whitespace collapsing.
pub fn normalize_text(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    let cleaned: String = nfc
        .chars()
        .filter(|&c| !is_arabic_diacritic(c) && c != '\u{0640}')
        .map(|c| match c {
            '\u{0622}' | '\u{0623}' | '\u{0625}' => '\u{0627}',
            c => c,
        })
        .collect();
    let cleaned = url_re().replace_all(&cleaned, "<url>");
    let cleaned = mention_re().replace_all(&cleaned, "<user>");
    cleaned.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Sparse feature vector: `(index, value)` pairs sorted by index.
pub type SparseVector = Vec<(usize, f64)>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureConfig {
    pub n_min: usize,
    pub n_max: usize,
    pub max_features: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig { n_min: 2, n_max: 4, max_features: 1 << 18 }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.n_min == 0 || self.n_min > self.n_max {
            return Err(ModelError::InvalidConfig(format!(
                "n-gram range must satisfy 1 <= n_min <= n_max (got {}..{})",
                self.n_min, self.n_max
            )));
        }
        if self.max_features == 0 {
            return Err(ModelError::InvalidConfig("max_features must be positive".into()));
        }
        Ok(())
    }
}

/// Vocabulary of character n-grams, most frequent first.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSpace {
    pub config: FeatureConfig,
    /// Index `i` holds the n-gram of feature `i`.
    pub vocabulary: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl PartialEq for FeatureSpace {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.vocabulary == other.vocabulary
    }
}

fn for_each_ngram(text: &str, n_min: usize, n_max: usize, mut f: impl FnMut(&str)) {
    let bounds: Vec<usize> = text.char_indices().map(|(i, _)| i).chain(std::iter::once(text.len())).collect();
    let n_chars = bounds.len() - 1;
    for n in n_min..=n_max {
        if n > n_chars {
            break;
        }
        for start in 0..=(n_chars - n) {
            f(&text[bounds[start]..bounds[start + n]]);
        }
    }
}

impl FeatureSpace {
    /// Builds the vocabulary from already-normalized texts. Ties in frequency
    /// are broken by n-gram order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, config: FeatureConfig) -> Self {
        let mut counts: HashMap<String, u64> = HashMap::new();
        for text in texts {
            for_each_ngram(text, config.n_min, config.n_max, |g| {
                if let Some(c) = counts.get_mut(g) {
                    *c += 1;
                } else {
                    counts.insert(g.to_string(), 1);
                }
            });
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_unstable_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(config.max_features);
        Self::from_vocabulary(config, ranked.into_iter().map(|(g, _)| g).collect())
    }

    pub fn from_vocabulary(config: FeatureConfig, vocabulary: Vec<String>) -> Self {
        let index = vocabulary.iter().enumerate().map(|(i, g)| (g.clone(), i)).collect();
        FeatureSpace { config, vocabulary, index }
    }

    pub fn len(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocabulary.is_empty()
    }

    pub fn index_of(&self, ngram: &str) -> Option<usize> {
        self.index.get(ngram).copied()
    }

    /// Counts of in-vocabulary n-grams of `text` (expected normalized).
    pub fn featurize(&self, text: &str) -> SparseVector {
        let mut counts: HashMap<usize, f64> = HashMap::new();
        for_each_ngram(text, self.config.n_min, self.config.n_max, |g| {
            if let Some(&i) = self.index.get(g) {
                *counts.entry(i).or_insert(0.0) += 1.0;
            }
        });
        let mut v: SparseVector = counts.into_iter().collect();
        v.sort_unstable_by_key(|&(i, _)| i);
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub l2: f64,
    pub seed: u64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { learning_rate: 0.1, epochs: 5, l2: 1e-6, seed: 0, batch_size: 18 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(ModelError::InvalidConfig(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(ModelError::InvalidConfig(format!("l2 must be >= 0, got {}", self.l2)));
        }
        if self.epochs == 0 {
            return Err(ModelError::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn dot(weights: &[f64], x: &SparseVector) -> f64 {
    x.iter().map(|&(i, v)| weights[i] * v).sum()
}

/// A training example: features and target in {0, 1}.
pub type Sample = (SparseVector, f64);

/// Mean logistic loss over `batch` plus `l2 / 2 * ||w||^2` (bias unpenalized).
pub fn regularized_loss(weights: &[f64], bias: f64, batch: &[&Sample], l2: f64) -> f64 {
    let data: f64 = batch
        .iter()
        .map(|(x, y)| {
            let z = dot(weights, x) + bias;
            softplus(z) - y * z
        })
        .sum::<f64>()
        / batch.len() as f64;
    data + 0.5 * l2 * weights.iter().map(|w| w * w).sum::<f64>()
}

/// Gradient of the mean logistic loss alone, as sparse `(index, value)`
/// contributions (indices may repeat), plus the bias gradient. `margin_scale`
/// multiplies `weights` when computing margins.
fn data_gradient(weights: &[f64], margin_scale: f64, bias: f64, batch: &[&Sample], out: &mut Vec<(usize, f64)>) -> f64 {
    out.clear();
    let scale = 1.0 / batch.len() as f64;
    let mut grad_bias = 0.0;
    for (x, y) in batch {
        let residual = (sigmoid(margin_scale * dot(weights, x) + bias) - y) * scale;
        out.extend(x.iter().map(|&(i, v)| (i, residual * v)));
        grad_bias += residual;
    }
    grad_bias
}

/// Writes the gradient of [`regularized_loss`] into `grad` and returns the
/// bias gradient.
pub fn regularized_gradient(weights: &[f64], bias: f64, batch: &[&Sample], l2: f64, grad: &mut [f64]) -> f64 {
    for (g, w) in grad.iter_mut().zip(weights) {
        *g = l2 * w;
    }
    let mut sparse = Vec::new();
    let grad_bias = data_gradient(weights, 1.0, bias, batch, &mut sparse);
    for (i, g) in sparse {
        grad[i] += g;
    }
    grad_bias
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub format_version: u32,
    pub train_config: TrainConfig,
    pub feature_space: FeatureSpace,
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl BaselineModel {
    /// All-zero model over `space`; scores every text (0.5, 0.5).
    pub fn zero(space: FeatureSpace, train_config: TrainConfig) -> Self {
        let weights = vec![0.0; space.len()];
        BaselineModel { format_version: FORMAT_VERSION, train_config, feature_space: space, weights, bias: 0.0 }
    }

    pub fn margin(&self, normalized_text: &str) -> f64 {
        dot(&self.weights, &self.feature_space.featurize(normalized_text)) + self.bias
    }

    pub fn predict_scores(&self, text: &str) -> ScoreVector {
        self.predict_features(&self.feature_space.featurize(&normalize_text(text)))
    }

    /// Scores an already featurized text.
    pub fn predict_features(&self, x: &SparseVector) -> ScoreVector {
        let p = sigmoid(dot(&self.weights, x) + self.bias);
        ScoreVector::new(1.0 - p, p)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, ModelError> {
        let model: BaselineModel = serde_json::from_str(s)?;
        if model.format_version != FORMAT_VERSION {
            return Err(ModelError::UnsupportedVersion(model.format_version));
        }
        if model.weights.len() != model.feature_space.vocabulary.len() {
            return Err(ModelError::InvalidConfig("weights length differs from vocabulary size".into()));
        }
        let space = FeatureSpace::from_vocabulary(model.feature_space.config, model.feature_space.vocabulary);
        Ok(BaselineModel { feature_space: space, ..model })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        fs::write(path, self.to_json()).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let s = fs::read_to_string(path).map_err(|source| ModelError::Io { path: path.to_path_buf(), source })?;
        Self::from_json(&s)
    }
}

/// Featurized training set in id order, with its feature space.
pub struct PreparedCorpus {
    pub space: FeatureSpace,
    pub samples: Vec<Sample>,
}

impl PreparedCorpus {
    pub fn new(corpus: &Corpus, features: FeatureConfig) -> Result<Self, ModelError> {
        features.validate()?;
        if !corpus.has_both_classes() {
            return Err(ModelError::SingleClassCorpus);
        }
        let mut examples: Vec<&LabeledExample> = corpus.examples().iter().collect();
        examples.sort_by(|a, b| a.id.cmp(&b.id));
        let texts: Vec<String> = examples.iter().map(|e| normalize_text(&e.text)).collect();
        let space = FeatureSpace::build(texts.iter().map(String::as_str), features);
        let samples = texts
            .iter()
            .zip(&examples)
            .map(|(t, e)| (space.featurize(t), if e.label.is_positive() { 1.0 } else { 0.0 }))
            .collect();
        Ok(PreparedCorpus { space, samples })
    }
}

/// Trains for `config.epochs` epochs, calling `on_epoch(epoch, &model)` after
/// each one. A snapshot after epoch `e` is identical to a model trained with
/// `epochs = e`, because epoch `e` consumes the same shuffle stream either way.
pub fn train_with_snapshots(
    prepared: &PreparedCorpus,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, &BaselineModel),
) -> Result<BaselineModel, ModelError> {
    config.validate()?;
    let mut model = BaselineModel::zero(prepared.space.clone(), *config);
    let mut rng = seed::rng_for(config.seed, "baseline/shuffle");
    let mut order: Vec<usize> = (0..prepared.samples.len()).collect();
    let mut sparse = Vec::new();
    let mut batch: Vec<&Sample> = Vec::with_capacity(config.batch_size);
    // Weights are stored as `scale * model.weights` within an epoch so the L2
    // shrink step costs O(1) instead of O(|vocabulary|) per batch.
    let decay = 1.0 - config.learning_rate * config.l2;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut scale = 1.0;
        for chunk in order.chunks(config.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| &prepared.samples[i]));
            let grad_bias = data_gradient(&model.weights, scale, model.bias, &batch, &mut sparse);
            scale *= decay;
            if scale < 1e-6 {
                model.weights.iter_mut().for_each(|w| *w *= scale);
                scale = 1.0;
            }
            let step = config.learning_rate / scale;
            for &(i, g) in &sparse {
                model.weights[i] -= step * g;
            }
            model.bias -= config.learning_rate * grad_bias;
        }
        if scale != 1.0 {
            model.weights.iter_mut().for_each(|w| *w *= scale);
        }
        on_epoch(epoch, &model);
    }
    Ok(model)
}

pub fn train(corpus: &Corpus, config: &TrainConfig, features: FeatureConfig) -> Result<BaselineModel, ModelError> {
    config.validate()?;
    let prepared = PreparedCorpus::new(corpus, features)?;
    train_with_snapshots(&prepared, config, |_, _| {})
}
