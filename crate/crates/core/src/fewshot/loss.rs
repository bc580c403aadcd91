use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::model::{
    classifier_inputs, features, infer, linear, logits, prototypes, ten, FewShotModel, FilmVars,
    InferenceNet,
};
use crate::autodiff::{Tape, Tensor, Var};
use crate::blobs::Episode;
use crate::error::{contract, Result};
use crate::gaussian::GaussianVars;

/// Tape nodes shared by the episode objectives.
pub(crate) struct EpisodeVars {
    /// Conditional prior, from support prototypes.
    pub prior: GaussianVars,
    /// Posterior, from prototypes over support ∪ query.
    pub posterior: Option<GaussianVars>,
    /// Unconditioned query features as seen by the classifier.
    pub query_inputs: Var,
}

/// Runs the feature extractor and inference network(s) on an episode.
/// Task conditioning (when enabled) uses the grand prototype of the
/// unconditioned support features and only affects what the inference
/// networks see.
pub(crate) fn episode_forward(
    tape: &mut Tape,
    model: &FewShotModel,
    episode: &Episode,
    with_posterior: bool,
) -> Result<EpisodeVars> {
    let n = episode.way;
    let xs = tape.constant(episode.support_x.clone());
    let xq = tape.constant(episode.query_x.clone());
    let fs = features(tape, model, xs, None)?;
    let fq = features(tape, model, xq, None)?;
    let (fs_inf, fq_inf) = if model.config.ten {
        let protos = prototypes(tape, fs, &episode.support_y, n)?;
        let grand = tape.mean_axis(protos, 0)?;
        let film: FilmVars = ten(tape, model, grand)?;
        let a = features(tape, model, xs, Some(&film))?;
        let b = if with_posterior {
            features(tape, model, xq, Some(&film))?
        } else {
            fq
        };
        (a, b)
    } else {
        (fs, fq)
    };
    let support_protos = prototypes(tape, fs_inf, &episode.support_y, n)?;
    let prior = infer(tape, model, InferenceNet::Prior, support_protos)?;
    let posterior = if with_posterior {
        let union = tape.concat(&[fs_inf, fq_inf], 0)?;
        let labels: Vec<usize> = episode.support_y.iter().chain(&episode.query_y).copied().collect();
        let union_protos = prototypes(tape, union, &labels, n)?;
        Some(infer(tape, model, InferenceNet::Posterior, union_protos)?)
    } else {
        None
    };
    let query_inputs = classifier_inputs(tape, model, fq)?;
    Ok(EpisodeVars {
        prior,
        posterior,
        query_inputs,
    })
}

/// Standard normal noise for `samples` draws of an `way`-row weight matrix,
/// stacked as `[samples·way, weight_dim]`.
pub fn draw_noise(model: &FewShotModel, way: usize, samples: usize, rng: &mut impl Rng) -> Tensor {
    let wd = model.config.weight_dim();
    let data = (0..samples * way * wd).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(samples * way, wd, data).expect("positive dims")
}

/// `L` stacked reparameterized draws of the `[N, w]` weight matrix.
pub(crate) fn sample_weights(tape: &mut Tape, dist: &GaussianVars, noise: &Tensor) -> Result<Var> {
    let way = tape.shape(dist.mean)[0];
    if noise.rank() != 2 || noise.rows() % way != 0 || noise.cols() != tape.shape(dist.mean)[1] {
        return Err(contract(format!(
            "noise of shape {:?} for {way} classes",
            noise.shape()
        )));
    }
    let samples = noise.rows() / way;
    let index: Vec<usize> = (0..samples).flat_map(|_| 0..way).collect();
    let mean = tape.rows(dist.mean, &index)?;
    let log_var = tape.rows(dist.log_var, &index)?;
    GaussianVars { mean, log_var }.sample(tape, noise.clone())
}

/// Log-probabilities of every class, `[Q·L, N]`, for stacked weights
/// `[L·N, w]`; row `q·L + l` pairs query `q` with draw `l`.
pub(crate) fn sampled_log_probs(
    tape: &mut Tape,
    model: &FewShotModel,
    inputs: Var,
    weights: Var,
    way: usize,
) -> Result<Var> {
    let q = tape.shape(inputs)[0];
    let samples = tape.shape(weights)[0] / way;
    let z = logits(tape, model, inputs, weights)?;
    let z = tape.reshape(z, vec![q * samples, way])?;
    tape.log_softmax(z)
}

/// `[Q, L]` log-likelihoods of the query labels.
fn query_log_likelihoods(
    tape: &mut Tape,
    model: &FewShotModel,
    inputs: Var,
    weights: Var,
    labels: &[usize],
    way: usize,
) -> Result<Var> {
    let q = labels.len();
    let samples = tape.shape(weights)[0] / way;
    let lp = sampled_log_probs(tape, model, inputs, weights, way)?;
    let index: Vec<usize> = labels
        .iter()
        .flat_map(|&y| std::iter::repeat_n(y, samples))
        .collect();
    let ll = tape.pick(lp, &index)?;
    tape.reshape(ll, vec![q, samples])
}

/// Value and parts of the negative β-weighted ELBO of one episode.
#[derive(Clone, Copy, Debug)]
pub struct ElboTerms {
    /// `−(Σ_q mean_l log p(y_q | x_q, w_l) − β Σ_n KL_n)`.
    pub loss: Var,
    /// `Σ_q mean_l log p(y_q | x_q, w_l)`.
    pub recon: f64,
    /// `Σ_n KL(q_n || p_n)`.
    pub kl: f64,
}

/// Negative ELBO: query log-likelihood summed over queries and averaged
/// over `L` posterior draws, minus `β` times the closed-form KL between the
/// posterior (support ∪ query) and the prior (support). `noise` is
/// `[L·N, weight_dim]`, see [`draw_noise`].
pub fn elbo_loss(
    tape: &mut Tape,
    model: &FewShotModel,
    episode: &Episode,
    beta: f64,
    noise: &Tensor,
) -> Result<ElboTerms> {
    let vars = episode_forward(tape, model, episode, true)?;
    let post = vars.posterior.expect("requested");
    let w = sample_weights(tape, &post, noise)?;
    let ll = query_log_likelihoods(tape, model, vars.query_inputs, w, &episode.query_y, episode.way)?;
    let per_query = tape.mean_axis(ll, 1)?;
    let recon = tape.sum(per_query);
    let kl = GaussianVars::kl(tape, &post, &vars.prior)?;
    let weighted = tape.scale(kl, beta);
    let loss = tape.sub(weighted, recon)?;
    Ok(ElboTerms {
        loss,
        recon: tape.value(recon).item(),
        kl: tape.value(kl).item(),
    })
}

/// Negative mean over queries of `log (1/L) Σ_l p(y_q | x_q, w_l)` with
/// `w_l` drawn from the support-conditioned prior.
pub fn mc_loss(tape: &mut Tape, model: &FewShotModel, episode: &Episode, noise: &Tensor) -> Result<Var> {
    let vars = episode_forward(tape, model, episode, false)?;
    let w = sample_weights(tape, &vars.prior, noise)?;
    let ll = query_log_likelihoods(tape, model, vars.query_inputs, w, &episode.query_y, episode.way)?;
    let lme = tape.log_mean_exp(ll, 1)?;
    let m = tape.mean(lme);
    Ok(tape.neg(m))
}

/// Mean cross-entropy of the auxiliary linear head over unconditioned
/// features; labels index the meta-train classes.
pub fn aux_loss(tape: &mut Tape, model: &FewShotModel, x: &Tensor, labels: &[usize]) -> Result<Var> {
    let classes = model
        .config
        .aux_classes
        .ok_or_else(|| contract("model has no auxiliary head"))?;
    if labels.len() != x.rows() || labels.iter().any(|&y| y >= classes) {
        return Err(contract("auxiliary labels must match the batch and the head"));
    }
    let xv = tape.constant(x.clone());
    let f = features(tape, model, xv, None)?;
    let z = linear(tape, model, "aux", f)?;
    let lp = tape.log_softmax(z)?;
    let ll = tape.pick(lp, labels)?;
    let m = tape.mean(ll);
    Ok(tape.neg(m))
}

/// Probability of drawing an auxiliary batch at episode `t` of `total`:
/// `0.9^⌊12t/T⌋`.
pub fn aux_task_probability(t: usize, total: usize) -> Result<f64> {
    if t >= total {
        return Err(contract(format!("episode {t} outside 0..{total}")));
    }
    Ok(0.9f64.powi((12 * t / total) as i32))
}
