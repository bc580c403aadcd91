use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::loss::{draw_noise, episode_forward, sample_weights, sampled_log_probs};
use super::model::{logits, FewShotModel};
use crate::autodiff::{Tape, Tensor};
use crate::blobs::{evaluate_episodes, AccuracySummary, BlobDataset, Episode, EpisodeSpec};
use crate::error::{contract, Error, Result};

/// How class weights are chosen at test time.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictMode {
    /// The prior mean, used directly.
    Mean,
    /// Average of the class probabilities under `L` prior draws.
    Samples(usize),
}

impl fmt::Display for PredictMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PredictMode::Mean => f.write_str("mean"),
            PredictMode::Samples(l) => write!(f, "{l}"),
        }
    }
}

impl FromStr for PredictMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "mean" {
            return Ok(PredictMode::Mean);
        }
        match s.parse::<usize>() {
            Ok(l) if l >= 1 => Ok(PredictMode::Samples(l)),
            _ => Err(contract(format!("expected `mean` or a positive sample count, got `{s}`"))),
        }
    }
}

/// Class probabilities `[Q, N]` for the queries of `episode`, conditioned
/// on its support set only.
pub fn predict(
    model: &FewShotModel,
    episode: &Episode,
    mode: PredictMode,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let way = episode.way;
    let q = episode.query_x.rows();
    let mut tape = Tape::new();
    let vars = episode_forward(&mut tape, model, episode, false)?;
    match mode {
        PredictMode::Mean => {
            let z = logits(&mut tape, model, vars.query_inputs, vars.prior.mean)?;
            let lp = tape.log_softmax(z)?;
            Ok(tape.value(lp).map(f64::exp))
        }
        PredictMode::Samples(0) => Err(contract("at least one sample is needed")),
        PredictMode::Samples(samples) => {
            let noise = draw_noise(model, way, samples, rng);
            let w = sample_weights(&mut tape, &vars.prior, &noise)?;
            let lp = sampled_log_probs(&mut tape, model, vars.query_inputs, w, way)?;
            let lp = tape.value(lp).data();
            let mut probs = vec![0.0; q * way];
            for (i, row) in probs.chunks_mut(way).enumerate() {
                for l in 0..samples {
                    let src = &lp[(i * samples + l) * way..(i * samples + l + 1) * way];
                    for (p, v) in row.iter_mut().zip(src) {
                        *p += v.exp();
                    }
                }
                row.iter_mut().for_each(|p| *p /= samples as f64);
            }
            Tensor::matrix(q, way, probs)
        }
    }
}

/// Fraction of queries whose most probable class is the true one.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> f64 {
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = probs.row(i);
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &p)| if p > row[b] { j } else { b });
            best == y
        })
        .count();
    hits as f64 / labels.len() as f64
}

/// Largest variance of the support-conditioned prior over classes and
/// weight dimensions.
pub fn track_max_variance(model: &FewShotModel, episode: &Episode) -> Result<f64> {
    let mut tape = Tape::new();
    let vars = episode_forward(&mut tape, model, episode, false)?;
    let max_lv = tape
        .value(vars.prior.log_var)
        .data()
        .iter()
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    Ok(max_lv.exp())
}

/// Mean accuracy over `episodes` episodes drawn with `template`, with each
/// episode's sampling noise keyed by `(seed, episode_id)`.
pub fn evaluate(
    model: &FewShotModel,
    dataset: &BlobDataset,
    template: &EpisodeSpec,
    episodes: usize,
    mode: PredictMode,
    seed: u64,
) -> Result<AccuracySummary> {
    evaluate_episodes(dataset, template, episodes, seed, |ep, rng| {
        Ok(accuracy(&predict(model, ep, mode, rng)?, &ep.query_y))
    })
}
