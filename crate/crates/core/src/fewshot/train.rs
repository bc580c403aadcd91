use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::loss::{aux_loss, aux_task_probability, draw_noise, elbo_loss, mc_loss};
use super::model::{ClassifierMode, FewShotModel, ModelConfig};
use super::predict::{evaluate, track_max_variance, PredictMode};
use crate::autodiff::{clip_grad_norm, sgd_step_with, Tape, Velocity};
use crate::blobs::{sample_episode, sample_train_batch, BlobDataset, EpisodeSpec, QueryMode, Split};
use crate::error::{contract, Error, Result};
use crate::rng::{keyed_rng, stream_key};
use crate::sandbox::decayed_lr;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TrainObjective {
    #[default]
    Elbo,
    /// Monte-Carlo likelihood with prior samples.
    Mc,
}

impl TrainObjective {
    pub fn as_str(self) -> &'static str {
        match self {
            TrainObjective::Elbo => "elbo",
            TrainObjective::Mc => "mc",
        }
    }
}

impl fmt::Display for TrainObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainObjective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elbo" => Ok(TrainObjective::Elbo),
            "mc" => Ok(TrainObjective::Mc),
            _ => Err(contract(format!("unknown training objective `{s}`"))),
        }
    }
}

/// KL weight; `Auto` is the total query count over `N·d`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub enum Beta {
    #[default]
    Auto,
    Value(f64),
}

impl fmt::Display for Beta {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Beta::Auto => f.write_str("auto"),
            Beta::Value(b) => write!(f, "{b}"),
        }
    }
}

impl FromStr for Beta {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "auto" {
            return Ok(Beta::Auto);
        }
        match s.parse::<f64>() {
            Ok(b) if b >= 0.0 && b.is_finite() => Ok(Beta::Value(b)),
            Ok(b) => Err(Error::Domain(format!("beta must be non-negative, got {b}"))),
            Err(_) => Err(contract(format!("expected `auto` or a number, got `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub episodes: usize,
    pub way: usize,
    pub shot: usize,
    pub queries: usize,
    /// Weight samples per episode.
    pub samples: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Apply weight decay to bias vectors as well as weight matrices.
    pub decay_biases: bool,
    /// Joint gradient norm cap; 0 disables clipping.
    pub clip_norm: f64,
    pub beta: Beta,
    pub objective: TrainObjective,
    pub shared: bool,
    pub ten: bool,
    pub aux: bool,
    pub aux_batch: usize,
    pub classifier: ClassifierMode,
    pub alpha: f64,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub inference_width: usize,
    pub query_mode: QueryMode,
    /// Spacing of history rows (and variance tracking).
    pub log_every: usize,
    /// Spacing of validation checkpoints; 0 disables them.
    pub val_every: usize,
    pub val_episodes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 3000,
            way: 5,
            shot: 5,
            queries: 15,
            samples: 1,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_biases: false,
            clip_norm: 1.0,
            beta: Beta::Auto,
            objective: TrainObjective::Elbo,
            shared: true,
            ten: false,
            aux: false,
            aux_batch: 64,
            classifier: ClassifierMode::Cosine,
            alpha: 25.0,
            hidden: vec![64, 64],
            feature_dim: 32,
            inference_width: 32,
            query_mode: QueryMode::Stratified,
            log_every: 50,
            val_every: 500,
            val_episodes: 100,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("episodes", self.episodes),
            ("way", self.way),
            ("shot", self.shot),
            ("queries", self.queries),
            ("samples", self.samples),
            ("aux_batch", self.aux_batch),
            ("log_every", self.log_every),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(contract(format!("{name} must be at least 1")));
        }
        if self.val_every > 0 && self.val_episodes < 2 {
            return Err(contract("val_episodes must be at least 2"));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0)
            || !(self.clip_norm >= 0.0)
        {
            return Err(Error::Domain("lr must be positive, momentum in [0, 1), weight_decay and clip_norm ≥ 0".into()));
        }
        self.model_config(1)?.validate()
    }

    pub fn resolved_beta(&self) -> f64 {
        match self.beta {
            Beta::Value(b) => b,
            Beta::Auto => (self.way * self.queries) as f64 / (self.way * self.feature_dim) as f64,
        }
    }

    /// Architecture for a dataset with `input_dim` features.
    pub fn model_config(&self, input_dim: usize) -> Result<ModelConfig> {
        Ok(ModelConfig {
            input_dim,
            hidden: self.hidden.clone(),
            feature_dim: self.feature_dim,
            inference_width: self.inference_width,
            classifier: self.classifier,
            alpha: self.alpha,
            beta: self.resolved_beta(),
            shared: self.shared,
            ten: self.ten,
            aux_classes: None,
        })
    }

    pub fn episode_spec(&self, split: Split) -> EpisodeSpec {
        EpisodeSpec {
            query_mode: self.query_mode,
            ..EpisodeSpec::new(self.way, self.shot, self.queries, split)
        }
    }
}

/// One row of the training trace.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainRecord {
    pub episode: usize,
    /// Loss of the episode, per query.
    pub loss: f64,
    /// `Σ_n KL` for the ELBO; zero for the Monte-Carlo objective.
    pub kl: f64,
    /// Mean query log-likelihood.
    pub recon: f64,
    pub max_prior_variance: f64,
    /// Mean-classifier accuracy on validation episodes, at checkpoints.
    pub val_accuracy: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub model: FewShotModel,
    pub history: Vec<TrainRecord>,
}

/// Episodic SGD. Each step uses one meta-train episode; with probability
/// `0.9^⌊12t/T⌋` the auxiliary cross-entropy on a random meta-train batch is
/// added to that step's loss. The episode loss is divided by the query count.
pub fn train_fewshot(config: &TrainConfig, dataset: &BlobDataset) -> Result<TrainRun> {
    config.validate()?;
    let mut arch = config.model_config(dataset.input_dim())?;
    if config.aux {
        arch.aux_classes = Some(dataset.classes(Split::Train).len());
    }
    let beta = arch.beta;
    let mut model = FewShotModel::new(arch, &mut keyed_rng(config.seed, stream_key("fewshot-init", 0)))?;
    let mut noise_rng = keyed_rng(config.seed, stream_key("fewshot-noise", 0));
    let mut aux_rng = keyed_rng(config.seed, stream_key("fewshot-aux", 0));
    let mut velocity = Velocity::new();
    let mut history = Vec::new();
    let template = config.episode_spec(Split::Train);
    let train_stream = format!("fewshot-train-{}", config.seed);
    let last = config.episodes - 1;

    for t in 0..config.episodes {
        let spec = template.with_id(stream_key(&train_stream, t as u64));
        let episode = sample_episode(dataset, &spec)?;
        let q = episode.query_y.len() as f64;
        let noise = draw_noise(&model, config.way, config.samples, &mut noise_rng);

        let mut tape = Tape::new();
        let diverged = |e: Error| match e {
            Error::Domain(m) | Error::Degenerate(m) => {
                Error::Numerical(format!("episode {t}: {m}"))
            }
            other => other,
        };
        let (loss, kl, recon) = match config.objective {
            TrainObjective::Elbo => {
                let terms = elbo_loss(&mut tape, &model, &episode, beta, &noise).map_err(diverged)?;
                (tape.scale(terms.loss, 1.0 / q), terms.kl, terms.recon / q)
            }
            TrainObjective::Mc => {
                let l = mc_loss(&mut tape, &model, &episode, &noise).map_err(diverged)?;
                (l, 0.0, -tape.value(l).item())
            }
        };
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "training loss became {value} at episode {t}"
            )));
        }
        let mut total = loss;
        if config.aux && aux_rng.random::<f64>() < aux_task_probability(t, config.episodes)? {
            let (x, y) = sample_train_batch(dataset, config.aux_batch, &mut aux_rng)?;
            let a = aux_loss(&mut tape, &model, &x, &y)?;
            total = tape.add(total, a)?;
        }
        let mut grads = tape.backward(total, &model.params)?;
        if config.clip_norm > 0.0 {
            clip_grad_norm(&mut grads, config.clip_norm);
        }
        drop(tape);

        let log_now = t % config.log_every == 0 || t == last;
        let val_now = config.val_every > 0 && ((t + 1) % config.val_every == 0 || t == last);
        if log_now || val_now {
            let max_prior_variance = track_max_variance(&model, &episode)?;
            let val_accuracy = if val_now {
                let summary = evaluate(
                    &model,
                    dataset,
                    &EpisodeSpec::new(config.way, config.shot, config.queries, Split::Val),
                    config.val_episodes,
                    PredictMode::Mean,
                    config.seed,
                )?;
                Some(summary.mean)
            } else {
                None
            };
            history.push(TrainRecord {
                episode: t,
                loss: value,
                kl,
                recon,
                max_prior_variance,
                val_accuracy,
            });
        }

        let lr = decayed_lr(config.lr, t, config.episodes);
        let decay = |name: &str| {
            if config.decay_biases || name.ends_with(".weight") {
                config.weight_decay
            } else {
                0.0
            }
        };
        sgd_step_with(&mut model.params, &grads, lr, config.momentum, decay, &mut velocity)?;
    }
    Ok(TrainRun { model, history })
}
