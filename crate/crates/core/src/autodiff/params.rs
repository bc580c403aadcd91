use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;
use crate::error::{contract, Result};

/// Named trainable tensors. Iteration order is the lexical order of names,
/// which keeps checkpoints and optimizer updates deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: BTreeMap<String, Tensor>,
}

/// Gradient table keyed by parameter name.
pub type Grads = BTreeMap<String, Tensor>;

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter; names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.contains_key(&name) {
            return Err(contract(format!("duplicate parameter `{name}`")));
        }
        self.entries.insert(name, value);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::len).sum()
    }

    /// Dense layer `[fan_in, fan_out]` weight with N(0, std²) entries and a
    /// zero `[fan_out]` offset, registered as `{prefix}.weight` and `{prefix}.bias`.
    pub fn add_linear(
        &mut self,
        prefix: &str,
        fan_in: usize,
        fan_out: usize,
        std: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        let weight = if std > 0.0 {
            let normal = Normal::new(0.0, std).map_err(|e| contract(e.to_string()))?;
            (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect()
        } else {
            vec![0.0; fan_in * fan_out]
        };
        self.insert(
            format!("{prefix}.weight"),
            Tensor::matrix(fan_in, fan_out, weight)?,
        )?;
        self.insert(format!("{prefix}.bias"), Tensor::zeros(&[fan_out]))
    }

    /// Copies every entry of `other` into `self`, rejecting name clashes.
    pub fn merge(&mut self, other: &ParamSet) -> Result<()> {
        for (k, v) in other.iter() {
            self.insert(k.clone(), v.clone())?;
        }
        Ok(())
    }
}

impl<'a> IntoIterator for &'a ParamSet {
    type Item = (&'a String, &'a Tensor);
    type IntoIter = std::collections::btree_map::Iter<'a, String, Tensor>;

    fn into_iter(self) -> Self::IntoIter {
        self.entries.iter()
    }
}

/// Per-parameter momentum buffers for [`sgd_step`].
pub type Velocity = BTreeMap<String, Vec<f64>>;

/// One heavy-ball SGD update with coupled weight decay:
/// `v ← momentum·v + grad + weight_decay·p`, `p ← p − lr·v`.
pub fn sgd_step(
    params: &mut ParamSet,
    grads: &Grads,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    state: &mut Velocity,
) -> Result<()> {
    sgd_step_with(params, grads, lr, momentum, |_| weight_decay, state)
}

/// [`sgd_step`] with a per-parameter weight decay chosen by name.
pub fn sgd_step_with(
    params: &mut ParamSet,
    grads: &Grads,
    lr: f64,
    momentum: f64,
    weight_decay: impl Fn(&str) -> f64,
    state: &mut Velocity,
) -> Result<()> {
    if !(lr > 0.0) || !(0.0..1.0).contains(&momentum) {
        return Err(contract(format!(
            "invalid SGD settings lr={lr} momentum={momentum}"
        )));
    }
    for (name, p) in params.entries.iter_mut() {
        let wd = weight_decay(name);
        if !(wd >= 0.0) {
            return Err(contract(format!("invalid weight decay {wd} for `{name}`")));
        }
        let g = grads
            .get(name)
            .ok_or_else(|| contract(format!("no gradient for `{name}`")))?;
        if g.shape() != p.shape() {
            return Err(contract(format!("gradient shape mismatch for `{name}`")));
        }
        let v = state
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; p.len()]);
        for ((pi, vi), gi) in p.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
            *vi = momentum * *vi + gi + wd * *pi;
            *pi -= lr * *vi;
        }
    }
    Ok(())
}

/// Rescales `grads` so their joint Euclidean norm is at most `max_norm`;
/// returns the norm before rescaling.
pub fn clip_grad_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = grads
        .values()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.values_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &Grads) -> Result<()> {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.entries.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| contract(format!("no gradient for `{name}`")))?;
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for (i, (pi, gi)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                *pi -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}
