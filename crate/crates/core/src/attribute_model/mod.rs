//! Attribute probabilities from paired text anchors, simplex-weighted
//! distortion probabilities, the distortion loss and its training loop.

mod extract;
mod model;
mod probs;
mod registry;
mod train;

pub use extract::{extract_attribute_probs, ProbabilityTable, PROBABILITIES_FORMAT, PROBABILITIES_VERSION};
pub use model::{DistortionModel, Forward, ModelConfig, Prediction, GROUP_WEIGHTS, MODEL_KIND, THETA};
pub use probs::{
    attribute_prob, check_simplex, distortion_loss, distortion_prob, infer_best_caption, simplex_weights,
    SIMPLEX_TOLERANCE,
};
pub use registry::{
    anchor_id, attribute_core, negative_sentence, positive_sentence, AttributeFile, AttributeProvenance,
    AttributeRegistry, AttributeText, DistortionAttributes, EmbeddingSource, ATTRIBUTES_FORMAT,
    DEFAULT_ATTRS_PER_DISTORTION, REGISTRY_FORMAT, REGISTRY_VERSION, SHIPPED_ATTRIBUTES,
};
pub use train::{augmented_view, evaluate_loss, load_at, train_distortion_model, TrainReport, TrainSchedule, TrainingSet};
