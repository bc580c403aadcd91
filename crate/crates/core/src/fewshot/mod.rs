//! Few-shot classification with latent class weights.
//!
//! A feature extractor `f_θ` maps inputs to `R^d`. Per class, an inference
//! network turns the prototype (mean support feature) into a diagonal
//! Gaussian over that class's classifier weights. The same network, fed
//! prototypes over support ∪ query, serves as the variational posterior
//! unless a separate posterior network is configured. Training maximizes a
//! β-weighted ELBO or, for comparison, a Monte-Carlo estimate of the
//! predictive likelihood under prior samples.

mod checkpoint;
mod loss;
mod model;
mod predict;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_HEADER};
pub use loss::{aux_loss, aux_task_probability, draw_noise, elbo_loss, mc_loss, ElboTerms};
pub use model::{
    class_prototypes, classify, extract_features, infer_class_distribution, ten_condition,
    ClassifierMode, FewShotModel, Film, InferenceNet, ModelConfig,
};
pub use predict::{accuracy, evaluate, predict, track_max_variance, PredictMode};
pub use train::{train_fewshot, Beta, TrainConfig, TrainObjective, TrainRecord, TrainRun};
