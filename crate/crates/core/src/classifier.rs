//! Four-class PSS classifier: reference micro-CNN, class-weighted
//! cross-entropy training, external prediction loading, model container.

mod container;
mod external;
mod loss;
mod network;
mod optim;
mod prediction;
mod train;

pub use container::{load_model, read_model, save_model, write_model, MODEL_MAGIC, MODEL_VERSION};
pub use external::{load_external_predictions, read_predictions_jsonl, write_predictions_jsonl, PredictionRow};
pub use loss::{inverse_frequency_weights, weighted_cross_entropy, ClassWeights, PROB_FLOOR};
pub use network::{Architecture, MicroCnn, MicroCnnModel, Real, TensorSpec};
pub use optim::{AdamW, PlateauScheduler};
pub use prediction::Prediction;
pub use train::{
    backward_and_step, evaluate_loss, load_manifest, train, train_with_progress, write_manifest, write_training_log, EpochLog, LabeledCore, ManifestEntry,
    Split, TrainConfig, TrainOutcome,
};
