//! Devanagari text classification toolkit.
//!
//! Hashed character n-gram features feed a softmax linear classifier trained
//! with cross-entropy, weighted cross-entropy or focal loss. Candidate models
//! are ranked on a dev split, retrained on train+dev and combined by
//! majority vote with a fallback member. The [`pipeline`] module drives the
//! whole workflow from a TOML config.

pub mod classifier;
pub mod corpus;
pub mod ensemble;
pub mod featurizer;
pub mod fixtures;
pub mod losses;
pub mod metrics;
pub mod pipeline;
pub mod prompts;

pub use classifier::{
    load_model, load_model_for, save_model, train, train_with_history, ClassifierError, PredictError, Prediction,
    Predictor, SoftmaxClassifier, TrainConfig,
};
pub use corpus::{
    class_distribution, class_weights, load_dataset, merge_splits, ClassDistribution, ClassWeights, CorpusError,
    DataFormat, DatasetSplit, LabelSchema, LabeledExample, SplitName, TaskId,
};
pub use ensemble::{vote, DecidedBy, EnsembleError, EnsembleSpec, VoteOutcome};
pub use featurizer::{featurize, featurize_split, FeatureVector, FeaturizerConfig, Normalize};
pub use losses::{batch_loss, loss, softmax, Alpha, LossSpec, LossValue};
pub use metrics::{confusion, evaluate, rank_models, report, ConfusionMatrix, MetricsReport, RankKey};
pub use pipeline::{gridsearch_with, GridCell, GridResult, Phase, Pipeline, PipelineConfig, PipelineError, PromptMode};
pub use prompts::{FewShotExample, PromptTemplate};
