//! Diagonal-Gaussian variational machinery.
//!
//! Plain-value routines ([`DiagGaussian`], [`log_mean_exp`],
//! [`convolved_gaussian_logpdf`]) sit next to their tape counterparts
//! ([`GaussianVars`], [`reparam_log_marginal`]) used inside training
//! objectives. Log-variances are always clamped to
//! [`LOG_VAR_MIN`]`..=`[`LOG_VAR_MAX`] before use.

use std::f64::consts::PI;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{contract, Error, Result};

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Gaussian with diagonal covariance, parameterized by log-variance.
#[derive(Clone, Debug, PartialEq)]
pub struct DiagGaussian {
    mean: Vec<f64>,
    log_var: Vec<f64>,
}

impl DiagGaussian {
    /// Builds the distribution, clamping each log-variance component.
    pub fn new(mean: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        if mean.len() != log_var.len() {
            return Err(contract(format!(
                "mean has {} components, log_var {}",
                mean.len(),
                log_var.len()
            )));
        }
        let log_var = log_var
            .into_iter()
            .map(|v| v.clamp(LOG_VAR_MIN, LOG_VAR_MAX))
            .collect();
        Ok(Self { mean, log_var })
    }

    pub fn from_variance(mean: Vec<f64>, var: Vec<f64>) -> Result<Self> {
        if let Some(bad) = var.iter().find(|&&v| !(v > 0.0)) {
            return Err(Error::Domain(format!("non-positive variance {bad}")));
        }
        Self::new(mean, var.into_iter().map(f64::ln).collect())
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn log_var(&self) -> &[f64] {
        &self.log_var
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_var.iter().map(|v| v.exp()).collect()
    }

    pub fn log_prob(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(contract(format!(
                "point of dim {} for dist of dim {}",
                x.len(),
                self.dim()
            )));
        }
        Ok(x.iter()
            .zip(&self.mean)
            .zip(&self.log_var)
            .map(|((x, m), lv)| -HALF_LN_2PI - 0.5 * lv - (x - m).powi(2) / (2.0 * lv.exp()))
            .sum())
    }

    /// `μ + exp(½ log_var) ⊙ noise`.
    pub fn sample_with(&self, noise: &[f64]) -> Result<Vec<f64>> {
        if noise.len() != self.dim() {
            return Err(contract(format!(
                "noise of dim {} for dist of dim {}",
                noise.len(),
                self.dim()
            )));
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.log_var)
            .zip(noise)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect())
    }
}

/// Closed-form `KL(q || p)` between diagonal Gaussians.
pub fn kl_divergence(q: &DiagGaussian, p: &DiagGaussian) -> Result<f64> {
    if q.dim() != p.dim() {
        return Err(contract(format!(
            "KL between dims {} and {}",
            q.dim(),
            p.dim()
        )));
    }
    let mut kl = 0.0;
    for i in 0..q.dim() {
        let (lq, lp) = (q.log_var[i], p.log_var[i]);
        let dm = p.mean[i] - q.mean[i];
        kl += 0.5 * ((lq - lp).exp() + dm * dm / lp.exp() - 1.0 + lp - lq);
    }
    Ok(kl)
}

/// Numerically stable `ln((1/L) Σ exp(v_l))`.
pub fn log_mean_exp(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(contract("log_mean_exp of an empty list"));
    }
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = values.iter().map(|v| (v - max).exp()).sum();
    Ok(max + (s / values.len() as f64).ln())
}

/// Log-density of `N(mu_q, var_q + var_y)` at `y`: the marginal of a
/// Gaussian observation with noise variance `var_y` under a Gaussian latent.
pub fn convolved_gaussian_logpdf(y: f64, mu_q: f64, var_q: f64, var_y: f64) -> Result<f64> {
    if !(var_y > 0.0) {
        return Err(Error::Domain(format!(
            "observation variance {var_y} must be positive"
        )));
    }
    if !(var_q >= 0.0) {
        return Err(Error::Domain(format!(
            "latent variance {var_q} must be non-negative"
        )));
    }
    let v = var_q + var_y;
    Ok(-0.5 * (2.0 * PI * v).ln() - (y - mu_q).powi(2) / (2.0 * v))
}

/// A diagonal Gaussian whose parameters live on a tape.
///
/// `mean` and `log_var` share one shape; any rank is allowed so that a
/// batch of distributions (one per row) can be handled at once.
#[derive(Clone, Copy, Debug)]
pub struct GaussianVars {
    pub mean: Var,
    pub log_var: Var,
}

impl GaussianVars {
    /// Clamps `raw_log_var` into the admissible range.
    pub fn new(tape: &mut Tape, mean: Var, raw_log_var: Var) -> Result<Self> {
        if tape.shape(mean) != tape.shape(raw_log_var) {
            return Err(contract(format!(
                "mean shape {:?} differs from log_var shape {:?}",
                tape.shape(mean),
                tape.shape(raw_log_var)
            )));
        }
        let log_var = tape.clamp(raw_log_var, LOG_VAR_MIN, LOG_VAR_MAX)?;
        Ok(Self { mean, log_var })
    }

    /// Reparameterized draw `μ + exp(½ log_var) ⊙ noise`; gradients reach
    /// both the mean and the log-variance.
    pub fn sample(&self, tape: &mut Tape, noise: Tensor) -> Result<Var> {
        if noise.shape() != tape.shape(self.mean) {
            return Err(contract(format!(
                "noise shape {:?} for dist shape {:?}",
                noise.shape(),
                tape.shape(self.mean)
            )));
        }
        let half = tape.scale(self.log_var, 0.5);
        let sigma = tape.exp(half);
        let eps = tape.constant(noise);
        let spread = tape.mul(sigma, eps)?;
        tape.add(self.mean, spread)
    }

    /// Elementwise `KL(q || p)` terms, same shape as the parameters.
    pub fn kl_terms(tape: &mut Tape, q: &Self, p: &Self) -> Result<Var> {
        // ½ [exp(lq − lp) + (μp − μq)² / exp(lp) − 1 + lp − lq]
        let dlv = tape.sub(q.log_var, p.log_var)?;
        let ratio = tape.exp(dlv);
        let dm = tape.sub(p.mean, q.mean)?;
        let dm2 = tape.square(dm);
        let var_p = tape.exp(p.log_var);
        let maha = tape.div(dm2, var_p)?;
        let a = tape.add(ratio, maha)?;
        let b = tape.sub(a, dlv)?;
        let c = tape.shift(b, -1.0);
        Ok(tape.scale(c, 0.5))
    }

    /// Summed closed-form `KL(q || p)`.
    pub fn kl(tape: &mut Tape, q: &Self, p: &Self) -> Result<Var> {
        let terms = Self::kl_terms(tape, q, p)?;
        Ok(tape.sum(terms))
    }

    pub fn to_dists(&self, tape: &Tape) -> Result<Vec<DiagGaussian>> {
        let (m, lv) = (tape.value(self.mean), tape.value(self.log_var));
        if m.rank() <= 1 {
            return Ok(vec![DiagGaussian::new(
                m.data().to_vec(),
                lv.data().to_vec(),
            )?]);
        }
        let rows = m.rows();
        (0..rows)
            .map(|i| DiagGaussian::new(m.row(i).to_vec(), lv.row(i).to_vec()))
            .collect()
    }
}

/// Monte-Carlo marginal log-likelihood with reparameterized samples.
///
/// For per-task Gaussians `q` (mean and log-variance of shape `[T]`), noise
/// `[T, L]` and observations `y: [T, M]`, draws `ψ_tl = μ_t + σ_t ε_tl` and
/// returns the average over all `T·M` pairs of
/// `ln (1/L) Σ_l N(y_tm; ψ_tl, var_y)`.
///
/// The computation is fused: no `[T, L]` or `[T, M, L]` nodes are recorded
/// and the gradient is accumulated during the forward pass.
pub fn reparam_log_marginal(
    tape: &mut Tape,
    q: &GaussianVars,
    noise: &Tensor,
    y: &Tensor,
    var_y: f64,
) -> Result<Var> {
    if !(var_y > 0.0) {
        return Err(Error::Domain(format!(
            "observation variance {var_y} must be positive"
        )));
    }
    let (mu, lv) = (tape.value(q.mean), tape.value(q.log_var));
    let t_count = mu.len();
    if mu.rank() != 1
        || noise.rank() != 2
        || y.rank() != 2
        || noise.rows() != t_count
        || y.rows() != t_count
    {
        return Err(contract(format!(
            "mean {:?}, noise {:?} and y {:?} must be [T], [T, L] and [T, M]",
            mu.shape(),
            noise.shape(),
            y.shape()
        )));
    }
    let inv2v = 1.0 / (2.0 * var_y);
    let (total, dmu, dlv) = fused_marginal(mu.data(), lv.data(), noise, y, inv2v);
    let pairs = (t_count * y.cols()) as f64;
    let norm = -0.5 * (2.0 * PI * var_y).ln() - (noise.cols() as f64).ln();
    let value = Tensor::scalar(total / pairs + norm);
    Ok(tape.custom(&[q.mean, q.log_var], value, move |g| {
        vec![
            dmu.iter().map(|d| g[0] * d).collect(),
            dlv.iter().map(|d| g[0] * d).collect(),
        ]
    }))
}

type FusedOut = (f64, Vec<f64>, Vec<f64>);

fn fused_marginal(mu: &[f64], lv: &[f64], noise: &Tensor, y: &Tensor, inv2v: f64) -> FusedOut {
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx512f") {
            // SAFETY: the required CPU feature was detected at runtime.
            return unsafe { fused_marginal_avx512(mu, lv, noise, y, inv2v) };
        }
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            return unsafe { fused_marginal_avx2(mu, lv, noise, y, inv2v) };
        }
    }
    fused_marginal_body(mu, lv, noise, y, inv2v)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn fused_marginal_avx512(
    mu: &[f64],
    lv: &[f64],
    noise: &Tensor,
    y: &Tensor,
    inv2v: f64,
) -> FusedOut {
    fused_marginal_body(mu, lv, noise, y, inv2v)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn fused_marginal_avx2(
    mu: &[f64],
    lv: &[f64],
    noise: &Tensor,
    y: &Tensor,
    inv2v: f64,
) -> FusedOut {
    fused_marginal_body(mu, lv, noise, y, inv2v)
}

/// Returns the sum of the unnormalized log-mean-exp terms and the gradient
/// of their average with respect to each task's mean and log-variance.
/// Only IEEE operations without contraction are used, so every instruction
/// set gives bit-identical results.
#[inline(always)]
fn fused_marginal_body(
    mu: &[f64],
    lv: &[f64],
    noise: &Tensor,
    y: &Tensor,
    inv2v: f64,
) -> FusedOut {
    let (t_count, l_count) = (mu.len(), noise.cols());
    let pairs = (t_count * y.cols()) as f64;
    let mut total = 0.0;
    let mut dmu = vec![0.0; t_count];
    let mut dlv = vec![0.0; t_count];
    let mut psi = vec![0.0; l_count];
    let mut e = vec![0.0; l_count];
    let mut d = vec![0.0; l_count];
    for t in 0..t_count {
        let sigma = (0.5 * lv[t]).exp();
        let eps = noise.row(t);
        for (p, &n) in psi.iter_mut().zip(eps) {
            *p = mu[t] + sigma * n;
        }
        d.iter_mut().for_each(|v| *v = 0.0);
        for &yv in y.row(t) {
            let (shift, sum) = exp_terms(&psi, yv, inv2v, &mut e);
            total += shift + sum.ln();
            // ∂/∂ψ_l = softmax_l · (y − ψ_l) / var_y, averaged over pairs
            let c = 2.0 * inv2v / (sum * pairs);
            for ((dl, &el), &p) in d.iter_mut().zip(&e).zip(&psi) {
                *dl += c * el * (yv - p);
            }
        }
        // ψ = μ + exp(½ lv) ε
        dmu[t] = lane_sum(&d);
        for (dl, &n) in d.iter_mut().zip(eps) {
            *dl *= n;
        }
        dlv[t] = 0.5 * sigma * lane_sum(&d);
    }
    (total, dmu, dlv)
}

/// Fills `e[l] = exp(a_l − shift)` for `a_l = −(y − ψ_l)² / (2v)` and returns
/// `(shift, Σ e)`. The shift is zero unless every term would underflow.
#[inline(always)]
fn exp_terms(psi: &[f64], y: f64, inv2v: f64, e: &mut [f64]) -> (f64, f64) {
    for (el, &p) in e.iter_mut().zip(psi) {
        let d = y - p;
        *el = exp_nonpositive(-d * d * inv2v);
    }
    let sum = lane_sum(e);
    if sum > 1e-280 {
        return (0.0, sum);
    }
    let max = psi
        .iter()
        .map(|&p| -(y - p) * (y - p) * inv2v)
        .fold(f64::NEG_INFINITY, f64::max);
    for (el, &p) in e.iter_mut().zip(psi) {
        let d = y - p;
        *el = (-d * d * inv2v - max).exp();
    }
    (max, lane_sum(e))
}

/// Sum with eight independent accumulators so the loop vectorizes; the
/// association order is fixed, so results are reproducible.
#[inline(always)]
fn lane_sum(v: &[f64]) -> f64 {
    let mut acc = [0.0; 8];
    let chunks = v.chunks_exact(8);
    let tail: f64 = chunks.remainder().iter().sum();
    for c in chunks {
        for i in 0..8 {
            acc[i] += c[i];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// Branch-free `exp` for `x ≤ 0`, accurate to a few ulp; inputs below
/// −708 return `exp(−708)`.
#[inline(always)]
fn exp_nonpositive(x: f64) -> f64 {
    const ROUND: f64 = 6_755_399_441_055_744.0; // 1.5 · 2^52
    const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
    let x = if x < -708.0 { -708.0 } else { x };
    let kr = x * std::f64::consts::LOG2_E + ROUND;
    let k = kr - ROUND;
    let r = (x - k * LN2_HI) - k * LN2_LO;
    // rational approximation exp(r) = 1 + 2 r P(r²) / (Q(r²) − r P(r²))
    let rr = r * r;
    let pr = r
        * ((1.261_771_930_748_105_908_78e-4 * rr + 3.029_944_077_074_419_613_00e-2) * rr
            + 9.999_999_999_999_999_999_10e-1);
    let qr = ((3.001_985_051_386_644_550_42e-6 * rr + 2.524_483_403_496_841_041_92e-3) * rr
        + 2.272_655_482_081_550_287_66e-1)
        * rr
        + 2.0;
    let p = 1.0 + 2.0 * pr / (qr - pr);
    let ki = kr.to_bits().wrapping_sub(ROUND.to_bits());
    p * f64::from_bits(ki.wrapping_add(1023) << 52)
}
