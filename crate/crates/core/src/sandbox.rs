//! Conjugate Gaussian tasks with a linear amortized inference network.
//!
//! Each task draws `ψ ~ N(0, 1)` and then `K + M` observations
//! `y ~ N(ψ, σ_y²)`. The posterior over ψ is available in closed form, so
//! the variance predicted by a trained network can be compared with the
//! truth. The network maps the sum of a task's observations to
//! `[μ_q, log σ_q²] = W Σy + b`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::autodiff::{Adam, ParamSet, Tape, Tensor, Var};
use crate::error::{contract, Error, Result};
use crate::gaussian::{reparam_log_marginal, DiagGaussian, GaussianVars};
use crate::rng::{keyed_rng, stream_key};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticTask {
    pub support: Vec<f64>,
    pub query: Vec<f64>,
    /// Latent value used at generation; diagnostics only.
    pub latent_psi: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Objective {
    Exact,
    MonteCarlo,
    Variational,
}

impl Objective {
    pub fn as_str(self) -> &'static str {
        match self {
            Objective::Exact => "exact",
            Objective::MonteCarlo => "mc",
            Objective::Variational => "variational",
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Objective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exact" => Ok(Objective::Exact),
            "mc" => Ok(Objective::MonteCarlo),
            "variational" | "vi" => Ok(Objective::Variational),
            other => Err(contract(format!("unknown objective `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SandboxConfig {
    pub sigma_y: f64,
    pub num_tasks: usize,
    pub support_size: usize,
    pub query_size: usize,
    pub objective: Objective,
    pub num_samples: usize,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            sigma_y: 1.0,
            num_tasks: 250,
            support_size: 5,
            query_size: 15,
            objective: Objective::Exact,
            num_samples: 1,
            steps: 10_000,
            lr: 0.05,
            seed: 0,
        }
    }
}

impl SandboxConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_y > 0.0) || !self.sigma_y.is_finite() {
            return Err(Error::Domain(format!(
                "sigma_y must be positive, got {}",
                self.sigma_y
            )));
        }
        if self.num_tasks == 0 || self.support_size == 0 || self.query_size == 0 {
            return Err(contract(
                "num_tasks, support_size and query_size must be at least 1",
            ));
        }
        if self.num_samples == 0 || self.steps == 0 {
            return Err(contract("num_samples and steps must be at least 1"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Domain(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// `[μ_q, log σ_q²] = w ⊙ Σy + b`, with `w[0]`, `b[0]` for the mean.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearInferenceParams {
    pub w: [f64; 2],
    pub b: [f64; 2],
}

impl LinearInferenceParams {
    pub fn new(w: [f64; 2], b: [f64; 2]) -> Self {
        Self { w, b }
    }

    /// `W ~ N(0, 0.01²)`, `b = 0`.
    pub fn init(rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        Self {
            w: [normal.sample(rng), normal.sample(rng)],
            b: [0.0, 0.0],
        }
    }

    /// Coefficients reproducing [`exact_posterior`] for supports of size `k`.
    pub fn conjugate_optimum(sigma_y: f64, k: usize) -> Self {
        let denom = sigma_y * sigma_y + k as f64;
        Self {
            w: [1.0 / denom, 0.0],
            b: [0.0, (sigma_y * sigma_y / denom).ln()],
        }
    }

    pub fn to_params(&self, prefix: &str) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(format!("{prefix}.w"), Tensor::vector(self.w.to_vec()))
            .expect("fresh set");
        p.insert(format!("{prefix}.b"), Tensor::vector(self.b.to_vec()))
            .expect("fresh set");
        p
    }

    pub fn from_params(params: &ParamSet, prefix: &str) -> Result<Self> {
        let read = |suffix: &str| -> Result<[f64; 2]> {
            let name = format!("{prefix}.{suffix}");
            let t = params
                .get(&name)
                .ok_or_else(|| contract(format!("missing `{name}`")))?;
            match t.data() {
                &[a, b] => Ok([a, b]),
                _ => Err(contract(format!("`{name}` must hold two values"))),
            }
        };
        Ok(Self {
            w: read("w")?,
            b: read("b")?,
        })
    }

    pub fn is_finite(&self) -> bool {
        self.w.iter().chain(&self.b).all(|v| v.is_finite())
    }
}

/// Generates `config.num_tasks` tasks from the conjugate process.
pub fn generate_tasks(config: &SandboxConfig, seed: u64) -> Vec<SyntheticTask> {
    let mut rng = keyed_rng(seed, stream_key("sandbox-tasks", 0));
    draw_tasks(
        &mut rng,
        config.num_tasks,
        config.support_size,
        config.query_size,
        config.sigma_y,
    )
}

/// Held-out tasks for evaluation, on a stream never used for training data.
pub fn fresh_tasks(config: &SandboxConfig, count: usize) -> Vec<SyntheticTask> {
    let mut rng = keyed_rng(config.seed, stream_key("sandbox-fresh", 0));
    draw_tasks(
        &mut rng,
        count,
        config.support_size,
        config.query_size,
        config.sigma_y,
    )
}

fn draw_tasks(
    rng: &mut impl Rng,
    count: usize,
    k: usize,
    m: usize,
    sigma_y: f64,
) -> Vec<SyntheticTask> {
    (0..count)
        .map(|_| {
            let psi: f64 = StandardNormal.sample(rng);
            let mut obs = || -> f64 {
                let e: f64 = StandardNormal.sample(rng);
                psi + sigma_y * e
            };
            let support = (0..k).map(|_| obs()).collect();
            let query = (0..m).map(|_| obs()).collect();
            SyntheticTask {
                support,
                query,
                latent_psi: psi,
            }
        })
        .collect()
}

/// Closed-form posterior over ψ given a support set, under the `N(0, 1)` prior.
pub fn exact_posterior(support: &[f64], sigma_y: f64) -> Result<DiagGaussian> {
    if support.is_empty() {
        return Err(contract("exact posterior of an empty support"));
    }
    if !(sigma_y > 0.0) {
        return Err(Error::Domain(format!(
            "sigma_y must be positive, got {sigma_y}"
        )));
    }
    let s2 = sigma_y * sigma_y;
    let denom = s2 + support.len() as f64;
    DiagGaussian::from_variance(vec![support.iter().sum::<f64>() / denom], vec![s2 / denom])
}

/// Applies the network to a set of observations.
pub fn infer(params: &LinearInferenceParams, observations: &[f64]) -> Result<DiagGaussian> {
    if observations.is_empty() {
        return Err(contract("inference on an empty observation set"));
    }
    let s: f64 = observations.iter().sum();
    DiagGaussian::new(
        vec![params.w[0] * s + params.b[0]],
        vec![params.w[1] * s + params.b[1]],
    )
}

/// Network weights recorded on a tape; both are `[2]` vectors.
#[derive(Clone, Copy, Debug)]
pub struct NetVars {
    pub w: Var,
    pub b: Var,
}

impl NetVars {
    pub fn load(tape: &mut Tape, params: &ParamSet, prefix: &str) -> Result<Self> {
        Ok(Self {
            w: tape.param(params, &format!("{prefix}.w"))?,
            b: tape.param(params, &format!("{prefix}.b"))?,
        })
    }

    /// Distributions for a batch of observation sums; mean and log-variance
    /// are `[T]` vectors.
    pub fn apply(&self, tape: &mut Tape, sums: &[f64]) -> Result<GaussianVars> {
        let t = sums.len();
        let s = tape.constant(Tensor::matrix(t, 1, sums.to_vec())?);
        let w = tape.reshape(self.w, vec![1, 2])?;
        let lin = tape.matmul(s, w)?;
        let b = tape.broadcast_rows(self.b, t)?;
        let out = tape.add(lin, b)?;
        let mean = tape.cols(out, &[0])?;
        let mean = tape.reshape(mean, vec![t])?;
        let log_var = tape.cols(out, &[1])?;
        let log_var = tape.reshape(log_var, vec![t])?;
        GaussianVars::new(tape, mean, log_var)
    }
}

/// Per-task sufficient statistics; the likelihood terms depend on the
/// query set only through its mean and spread.
struct Batch {
    support_sums: Vec<f64>,
    union_sums: Vec<f64>,
    query_size: usize,
    query_means: Vec<f64>,
    /// Mean squared deviation of the queries from their mean.
    query_spread: Vec<f64>,
}

fn batch(tasks: &[SyntheticTask]) -> Result<Batch> {
    let first = tasks.first().ok_or_else(|| contract("empty task list"))?;
    let m = first.query.len();
    if m == 0 || tasks.iter().any(|t| t.query.len() != m || t.support.is_empty()) {
        return Err(contract("tasks need non-empty supports and equal, non-empty query sets"));
    }
    let support_sums: Vec<f64> = tasks.iter().map(|t| t.support.iter().sum()).collect();
    let query_means: Vec<f64> =
        tasks.iter().map(|t| t.query.iter().sum::<f64>() / m as f64).collect();
    let query_spread = tasks
        .iter()
        .zip(&query_means)
        .map(|(t, ybar)| t.query.iter().map(|y| (y - ybar).powi(2)).sum::<f64>() / m as f64)
        .collect();
    let union_sums = support_sums
        .iter()
        .zip(&query_means)
        .map(|(s, ybar)| s + ybar * m as f64)
        .collect();
    Ok(Batch { support_sums, union_sums, query_size: m, query_means, query_spread })
}

fn query_matrix(tasks: &[SyntheticTask]) -> Result<Tensor> {
    let m = tasks.first().map_or(0, |t| t.query.len());
    Tensor::matrix(tasks.len(), m, tasks.iter().flat_map(|t| t.query.iter().copied()).collect())
}

fn check_sigma(sigma_y: f64) -> Result<()> {
    if sigma_y > 0.0 && sigma_y.is_finite() {
        Ok(())
    } else {
        Err(Error::Domain(format!(
            "sigma_y must be positive, got {sigma_y}"
        )))
    }
}

/// Negative exact marginal log-likelihood of the query points, averaged
/// over all `M·T` of them.
pub fn loss_exact(
    tape: &mut Tape,
    net: NetVars,
    tasks: &[SyntheticTask],
    sigma_y: f64,
) -> Result<Var> {
    check_sigma(sigma_y)?;
    exact_on(tape, net, &batch(tasks)?, sigma_y)
}

fn exact_on(tape: &mut Tape, net: NetVars, data: &Batch, sigma_y: f64) -> Result<Var> {
    let q = net.apply(tape, &data.support_sums)?;
    let var_q = tape.exp(q.log_var);
    let var = tape.shift(var_q, sigma_y * sigma_y);
    // (1/M) Σ_m (y_m − μ)² = (ȳ − μ)² + spread
    let ybar = tape.constant(Tensor::vector(data.query_means.clone()));
    let diff = tape.sub(ybar, q.mean)?;
    let sq = tape.square(diff);
    let spread = tape.constant(Tensor::vector(data.query_spread.clone()));
    let sq = tape.add(sq, spread)?;
    let maha = tape.div(sq, var)?;
    let logv = tape.log(var)?;
    let terms = tape.add(maha, logv)?;
    let mean = tape.mean(terms);
    let half = tape.scale(mean, 0.5);
    Ok(tape.shift(half, 0.5 * LN_2PI))
}

/// Per-row mean of `ε` and of `ε²` for a `[T, L]` noise matrix.
fn noise_moments(noise: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let l = noise.cols() as f64;
    (0..noise.rows())
        .map(|t| {
            let row = noise.row(t);
            (row.iter().sum::<f64>() / l, row.iter().map(|e| e * e).sum::<f64>() / l)
        })
        .unzip()
}

/// Monte-Carlo estimate of [`loss_exact`]: the inner marginal is replaced by
/// the mean likelihood over `L` reparameterized samples, one row of `noise`
/// (`[T, L]`) per task.
pub fn loss_mc(
    tape: &mut Tape,
    net: NetVars,
    tasks: &[SyntheticTask],
    sigma_y: f64,
    noise: &Tensor,
) -> Result<Var> {
    check_sigma(sigma_y)?;
    check_noise(noise, tasks.len())?;
    let data = batch(tasks)?;
    mc_on(tape, net, &data, &query_matrix(tasks)?, sigma_y, noise)
}

fn mc_on(
    tape: &mut Tape,
    net: NetVars,
    data: &Batch,
    query: &Tensor,
    sigma_y: f64,
    noise: &Tensor,
) -> Result<Var> {
    let q = net.apply(tape, &data.support_sums)?;
    let lme = reparam_log_marginal(tape, &q, noise, query, sigma_y * sigma_y)?;
    Ok(tape.neg(lme))
}

/// Negative ELBO averaged over tasks. Samples come from the posterior
/// network applied to support ∪ query; the KL is taken against the prior
/// network applied to the support alone.
pub fn loss_variational(
    tape: &mut Tape,
    prior: NetVars,
    posterior: NetVars,
    tasks: &[SyntheticTask],
    sigma_y: f64,
    noise: &Tensor,
) -> Result<Var> {
    check_sigma(sigma_y)?;
    check_noise(noise, tasks.len())?;
    variational_on(tape, prior, posterior, &batch(tasks)?, sigma_y, noise)
}

fn variational_on(
    tape: &mut Tape,
    prior: NetVars,
    posterior: NetVars,
    data: &Batch,
    sigma_y: f64,
    noise: &Tensor,
) -> Result<Var> {
    let m = data.query_size as f64;
    let p = prior.apply(tape, &data.support_sums)?;
    let q = posterior.apply(tape, &data.union_sums)?;

    // with ψ_l = μ + σ ε_l and d = μ − ȳ,
    // mean_l (ψ_l − ȳ)² = d² + 2 d σ mean(ε) + σ² mean(ε²)
    let (e1, e2) = noise_moments(noise);
    let ybar = tape.constant(Tensor::vector(data.query_means.clone()));
    let d = tape.sub(q.mean, ybar)?;
    let half = tape.scale(q.log_var, 0.5);
    let sd = tape.exp(half);
    let var = tape.exp(q.log_var);
    let d2 = tape.square(d);
    let cross = tape.mul(d, sd)?;
    let e1 = tape.constant(Tensor::vector(e1));
    let cross = tape.mul(cross, e1)?;
    let cross = tape.scale(cross, 2.0);
    let e2 = tape.constant(Tensor::vector(e2));
    let spread_eps = tape.mul(var, e2)?;
    let dev = tape.add(d2, cross)?;
    let dev = tape.add(dev, spread_eps)?;
    let spread = tape.constant(Tensor::vector(data.query_spread.clone()));
    let sq = tape.add(dev, spread)?;
    let s2 = sigma_y * sigma_y;
    let neg_recon = tape.scale(sq, m / (2.0 * s2));
    let neg_recon = tape.shift(neg_recon, 0.5 * m * (LN_2PI + s2.ln()));

    let kl = GaussianVars::kl_terms(tape, &q, &p)?;
    let per_task = tape.add(neg_recon, kl)?;
    Ok(tape.mean(per_task))
}

fn check_noise(noise: &Tensor, tasks: usize) -> Result<()> {
    if noise.rank() != 2 || noise.rows() != tasks {
        return Err(contract(format!(
            "noise must be [{tasks}, L], got {:?}",
            noise.shape()
        )));
    }
    Ok(())
}

/// Outcome of [`train_sandbox`].
#[derive(Clone, Debug)]
pub struct SandboxRun {
    /// The network applied to supports at test time.
    pub prior: LinearInferenceParams,
    /// The separate posterior network, for the variational objective.
    pub posterior: Option<LinearInferenceParams>,
    /// Training loss at every step.
    pub history: Vec<f64>,
}

/// Learning rate after step-decays by 10× at 50%, 75% and 90% of training.
pub fn decayed_lr(base: f64, step: usize, total: usize) -> f64 {
    let drops = [0.5, 0.75, 0.9]
        .iter()
        .filter(|&&f| step as f64 >= f * total as f64)
        .count();
    base * 0.1f64.powi(drops as i32)
}

/// Full-batch training of the selected objective on freshly generated tasks.
pub fn train_sandbox(config: &SandboxConfig) -> Result<SandboxRun> {
    config.validate()?;
    let tasks = generate_tasks(config, config.seed);
    let mut init_rng = keyed_rng(config.seed, stream_key("sandbox-init", 0));
    let mut noise_rng = keyed_rng(config.seed, stream_key("sandbox-noise", 0));

    let mut params = LinearInferenceParams::init(&mut init_rng).to_params("prior");
    if config.objective == Objective::Variational {
        params.merge(&LinearInferenceParams::init(&mut init_rng).to_params("posterior"))?;
    }
    let mut opt = Adam::new(config.lr);
    let mut history = Vec::with_capacity(config.steps);
    let (t, l) = (config.num_tasks, config.num_samples);
    let data = batch(&tasks)?;
    let query = match config.objective {
        Objective::MonteCarlo => Some(query_matrix(&tasks)?),
        _ => None,
    };

    for step in 0..config.steps {
        let mut tape = Tape::new();
        let prior = NetVars::load(&mut tape, &params, "prior")?;
        let loss = match config.objective {
            Objective::Exact => exact_on(&mut tape, prior, &data, config.sigma_y)?,
            Objective::MonteCarlo => {
                let noise = normal_matrix(&mut noise_rng, t, l);
                let query = query.as_ref().expect("built for the mc objective");
                mc_on(&mut tape, prior, &data, query, config.sigma_y, &noise)?
            }
            Objective::Variational => {
                let noise = normal_matrix(&mut noise_rng, t, l);
                let posterior = NetVars::load(&mut tape, &params, "posterior")?;
                variational_on(&mut tape, prior, posterior, &data, config.sigma_y, &noise)?
            }
        };
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(Error::Numerical(format!(
                "sandbox loss became {value} at step {step} ({} objective)",
                config.objective
            )));
        }
        history.push(value);
        let grads = tape.backward(loss, &params)?;
        opt.lr = decayed_lr(config.lr, step, config.steps);
        opt.step(&mut params, &grads)?;
    }

    let prior = LinearInferenceParams::from_params(&params, "prior")?;
    let posterior = match config.objective {
        Objective::Variational => Some(LinearInferenceParams::from_params(&params, "posterior")?),
        _ => None,
    };
    if !prior.is_finite() {
        return Err(Error::Numerical("sandbox parameters are not finite".into()));
    }
    Ok(SandboxRun {
        prior,
        posterior,
        history,
    })
}

pub(crate) fn normal_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::matrix(rows, cols, data).expect("positive dims")
}

/// Per-task ratio of predicted to true posterior variance, and their mean.
pub fn variance_ratio(
    params: &LinearInferenceParams,
    fresh_tasks: &[SyntheticTask],
    sigma_y: f64,
) -> Result<(Vec<f64>, f64)> {
    if fresh_tasks.is_empty() {
        return Err(contract("variance ratio over no tasks"));
    }
    let ratios = fresh_tasks
        .iter()
        .map(|t| {
            let q = infer(params, &t.support)?;
            let p = exact_posterior(&t.support, sigma_y)?;
            Ok(q.variance()[0] / p.variance()[0])
        })
        .collect::<Result<Vec<f64>>>()?;
    let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
    Ok((ratios, mean))
}
