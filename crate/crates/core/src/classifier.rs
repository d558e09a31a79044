//! Softmax linear classifier over hashed n-gram features.
//!
//! Training is mini-batch gradient descent from zero-initialized
//! parameters with decoupled weight decay:
//! `param <- param - lr_t * (grad + weight_decay * param)`.
//! The linear schedule decays `lr_t` from the configured value to zero
//! over all steps. Shuffling uses ChaCha8 seeded from `TrainConfig::seed`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{DatasetSplit, LabelSchema, TaskId};
use crate::featurizer::{featurize, featurize_split, FeatureVector, FeaturizerConfig, FeaturizerError};
use crate::losses::{loss, softmax_unchecked, LossError, LossSpec};

pub const MODEL_MAGIC: &[u8; 8] = b"DVCLFMDL";
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("training split is empty")]
    EmptySplit,
    #[error("training example {index} has no label")]
    Unlabeled { index: usize },
    #[error("schema mismatch: model is for task {found}, expected task {expected}")]
    SchemaMismatch { expected: TaskId, found: TaskId },
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Featurizer(#[from] FeaturizerError),
    #[error("non-finite loss {value} at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize, value: f64 },
    #[error("{}: {source}", .path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt model file: {0}")]
    Corrupt(String),
    #[error("model format version {found} not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    Constant,
    #[default]
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_schedule: LrSchedule,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.5,
            epochs: 5,
            batch_size: 32,
            lr_schedule: LrSchedule::Linear,
            weight_decay: 0.0,
            seed: 42,
            loss: LossSpec::Ce,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |m: &str| Err(ClassifierError::InvalidConfig(m.to_string()));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad("learning_rate must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        Ok(())
    }

    /// Learning rate for 0-based `step` out of `total_steps`.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::Linear => self.learning_rate * (1.0 - step as f64 / total_steps as f64),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub label: u32,
    pub probabilities: Vec<f64>,
}

/// Argmax with ties going to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PredictError {
    #[error("member {index}: {source}")]
    Member {
        index: usize,
        #[source]
        source: Box<PredictError>,
    },
    #[error("{0}")]
    Failed(String),
}

/// Anything that maps a text to a label code under a schema.
pub trait Predictor: Send + Sync {
    fn schema(&self) -> &LabelSchema;
    fn predict_label(&self, text: &str) -> Result<u32, PredictError>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxClassifier {
    schema: LabelSchema,
    featurizer: FeaturizerConfig,
    /// Row-major `[num_classes x dimension]`.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: SoftmaxClassifier,
    /// Mean loss over the full split after each epoch.
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    pub clamped: usize,
}

impl SoftmaxClassifier {
    pub fn zeros(schema: LabelSchema, featurizer: FeaturizerConfig) -> Self {
        let c = schema.len();
        let d = featurizer.dimension;
        SoftmaxClassifier {
            schema,
            featurizer,
            weights: vec![0.0; c * d],
            bias: vec![0.0; c],
        }
    }

    pub fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    pub fn featurizer(&self) -> &FeaturizerConfig {
        &self.featurizer
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn dimension(&self) -> usize {
        self.featurizer.dimension
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [f64] {
        &mut self.bias
    }

    pub fn weight(&self, class: usize, index: usize) -> f64 {
        self.weights[class * self.dimension() + index]
    }

    pub fn ensure_schema(&self, expected: &LabelSchema) -> Result<(), ClassifierError> {
        if &self.schema != expected {
            return Err(ClassifierError::SchemaMismatch {
                expected: expected.task(),
                found: self.schema.task(),
            });
        }
        Ok(())
    }

    pub fn logits(&self, x: &FeatureVector) -> Vec<f64> {
        let d = self.dimension();
        (0..self.num_classes())
            .map(|c| {
                let row = &self.weights[c * d..(c + 1) * d];
                self.bias[c] + x.entries().iter().map(|&(j, v)| row[j as usize] * v).sum::<f64>()
            })
            .collect()
    }

    pub fn predict_features(&self, x: &FeatureVector) -> Prediction {
        let probabilities = softmax_unchecked(&self.logits(x));
        Prediction {
            label: argmax(&probabilities) as u32,
            probabilities,
        }
    }

    pub fn predict(&self, text: &str) -> Prediction {
        self.predict_features(&featurize(text, &self.featurizer))
    }

    pub fn predict_split(&self, split: &DatasetSplit) -> Vec<Prediction> {
        featurize_split(split, &self.featurizer)
            .iter()
            .map(|x| self.predict_features(x))
            .collect()
    }

    fn is_finite(&self) -> bool {
        self.weights.iter().chain(&self.bias).all(|v| v.is_finite())
    }
}

impl Predictor for SoftmaxClassifier {
    fn schema(&self) -> &LabelSchema {
        &self.schema
    }

    fn predict_label(&self, text: &str) -> Result<u32, PredictError> {
        Ok(self.predict(text).label)
    }
}

fn mean_loss(
    model: &SoftmaxClassifier,
    features: &[FeatureVector],
    targets: &[u32],
    spec: &LossSpec,
) -> Result<f64, LossError> {
    let mut total = 0.0;
    for (x, &t) in features.iter().zip(targets) {
        total += loss(spec, &model.logits(x), t)?.value;
    }
    Ok(total / features.len() as f64)
}

pub fn train(
    split: &DatasetSplit,
    featurizer: &FeaturizerConfig,
    config: &TrainConfig,
) -> Result<SoftmaxClassifier, ClassifierError> {
    train_with_history(split, featurizer, config).map(|o| o.model)
}

pub fn train_with_history(
    split: &DatasetSplit,
    featurizer: &FeaturizerConfig,
    config: &TrainConfig,
) -> Result<TrainOutcome, ClassifierError> {
    config.validate()?;
    featurizer.validate()?;
    if split.is_empty() {
        return Err(ClassifierError::EmptySplit);
    }
    let targets: Vec<u32> = split
        .examples
        .iter()
        .enumerate()
        .map(|(index, e)| e.label.ok_or(ClassifierError::Unlabeled { index }))
        .collect::<Result<_, _>>()?;
    let num_classes = split.schema.len();
    config.loss.validate(num_classes)?;

    let features = featurize_split(split, featurizer);
    let mut model = SoftmaxClassifier::zeros(split.schema.clone(), featurizer.clone());
    let d = featurizer.dimension;
    let n = features.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = steps_per_epoch * config.epochs;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut grad_w = vec![0.0; num_classes * d];
    let mut grad_b = vec![0.0; num_classes];
    let mut touched: Vec<u32> = Vec::new();
    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut clamped = 0;
    let mut step = 0;

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let scale = 1.0 / batch.len() as f64;
            let mut batch_value = 0.0;
            for &i in batch {
                let x = &features[i];
                let lv = match loss(&config.loss, &model.logits(x), targets[i]) {
                    Err(LossError::NonFinite(_)) => {
                        return Err(ClassifierError::NonFiniteLoss {
                            epoch,
                            step,
                            value: f64::NAN,
                        })
                    }
                    other => other?,
                };
                batch_value += lv.value;
                clamped += lv.clamped as usize;
                for (c, g) in lv.grad_logits.iter().enumerate() {
                    let g = g * scale;
                    grad_b[c] += g;
                    let row = &mut grad_w[c * d..(c + 1) * d];
                    for &(j, v) in x.entries() {
                        row[j as usize] += g * v;
                    }
                }
                touched.extend(x.entries().iter().map(|&(j, _)| j));
            }
            if !batch_value.is_finite() {
                return Err(ClassifierError::NonFiniteLoss {
                    epoch,
                    step,
                    value: batch_value,
                });
            }

            let lr = config.lr_at(step, total_steps);
            let wd = config.weight_decay;
            if wd == 0.0 {
                touched.sort_unstable();
                touched.dedup();
                for c in 0..num_classes {
                    for &j in &touched {
                        let k = c * d + j as usize;
                        model.weights[k] -= lr * grad_w[k];
                        grad_w[k] = 0.0;
                    }
                }
            } else {
                for (w, g) in model.weights.iter_mut().zip(grad_w.iter_mut()) {
                    *w -= lr * (*g + wd * *w);
                    *g = 0.0;
                }
            }
            for (b, g) in model.bias.iter_mut().zip(grad_b.iter_mut()) {
                *b -= lr * (*g + wd * *b);
                *g = 0.0;
            }
            touched.clear();
            step += 1;
        }

        let epoch_loss = match mean_loss(&model, &features, &targets, &config.loss) {
            Err(LossError::NonFinite(_)) => f64::NAN,
            other => other?,
        };
        if !epoch_loss.is_finite() || !model.is_finite() {
            return Err(ClassifierError::NonFiniteLoss {
                epoch,
                step,
                value: epoch_loss,
            });
        }
        log::debug!("epoch {} loss {:.6}", epoch + 1, epoch_loss);
        epoch_losses.push(epoch_loss);
    }

    Ok(TrainOutcome {
        model,
        epoch_losses,
        steps: step,
        clamped,
    })
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    schema: LabelSchema,
    featurizer: FeaturizerConfig,
}

/// Serializes a model.
///
/// Layout (little-endian):
/// `magic[8] | version u32 | header_len u32 | header JSON | bias f64 x C |
/// nnz u64 | (flat_index u64, value f64) x nnz | sha256[32]`.
/// The digest covers every preceding byte. Weights equal to `+0.0` are omitted.
pub fn encode_model(model: &SoftmaxClassifier) -> Vec<u8> {
    let header = serde_json::to_vec(&ModelHeader {
        schema: model.schema.clone(),
        featurizer: model.featurizer.clone(),
    })
    .expect("header serializes");
    let nonzero: Vec<(usize, f64)> = model
        .weights
        .iter()
        .enumerate()
        .filter(|(_, w)| w.to_bits() != 0)
        .map(|(i, &w)| (i, w))
        .collect();

    let mut buf = Vec::with_capacity(64 + header.len() + 8 * model.bias.len() + 16 * nonzero.len());
    buf.extend_from_slice(MODEL_MAGIC);
    buf.extend_from_slice(&MODEL_FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for b in &model.bias {
        buf.extend_from_slice(&b.to_le_bytes());
    }
    buf.extend_from_slice(&(nonzero.len() as u64).to_le_bytes());
    for (i, w) in nonzero {
        buf.extend_from_slice(&(i as u64).to_le_bytes());
        buf.extend_from_slice(&w.to_le_bytes());
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);
    buf
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ClassifierError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| ClassifierError::Corrupt("truncated".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ClassifierError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ClassifierError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, ClassifierError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<SoftmaxClassifier, ClassifierError> {
    let corrupt = |m: &str| ClassifierError::Corrupt(m.to_string());
    if bytes.len() < MODEL_MAGIC.len() + 8 + 32 || &bytes[..8] != MODEL_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != MODEL_FORMAT_VERSION {
        return Err(ClassifierError::VersionMismatch {
            found: version,
            expected: MODEL_FORMAT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(corrupt("checksum mismatch"));
    }

    let mut cur = Cursor { buf: body, pos: 12 };
    let header_len = cur.u32()? as usize;
    let header: ModelHeader =
        serde_json::from_slice(cur.take(header_len)?).map_err(|e| corrupt(&format!("header: {e}")))?;
    if header.schema != LabelSchema::for_task(header.schema.task()) {
        return Err(corrupt("unrecognized label schema"));
    }
    header.featurizer.validate()?;

    let mut model = SoftmaxClassifier::zeros(header.schema, header.featurizer);
    for c in 0..model.num_classes() {
        model.bias[c] = cur.f64()?;
    }
    let nnz = cur.u64()?;
    for _ in 0..nnz {
        let i = cur.u64()? as usize;
        let w = cur.f64()?;
        let slot = model
            .weights
            .get_mut(i)
            .ok_or_else(|| corrupt("weight index out of range"))?;
        *slot = w;
    }
    if cur.pos != body.len() {
        return Err(corrupt("trailing bytes"));
    }
    if !model.is_finite() {
        return Err(corrupt("non-finite parameters"));
    }
    Ok(model)
}

pub fn save_model(model: &SoftmaxClassifier, path: &Path) -> Result<(), ClassifierError> {
    fs::write(path, encode_model(model)).map_err(|source| ClassifierError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_model(path: &Path) -> Result<SoftmaxClassifier, ClassifierError> {
    let bytes = fs::read(path).map_err(|source| ClassifierError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_model(&bytes)
}

/// Loads a model and checks it was trained under `schema`.
pub fn load_model_for(path: &Path, schema: &LabelSchema) -> Result<SoftmaxClassifier, ClassifierError> {
    let model = load_model(path)?;
    model.ensure_schema(schema)?;
    Ok(model)
}
