//! Text checkpoints.
//!
//! ```text
//! samovar-ckpt v1
//! config input_dim=16
//! config hidden=64,64
//! ...
//! param theta.l0.bias 64 0.0000000000000000e0 ...
//! ```
//!
//! Values are written with 17 significant digits, so a save/load round trip
//! is exact.

use std::io::{BufRead, Write};

use super::model::{FewShotModel, ModelConfig};
use crate::autodiff::{ParamSet, Tensor};
use crate::error::{Error, Result};
use crate::rng::keyed_rng;

pub const CHECKPOINT_HEADER: &str = "samovar-ckpt v1";

fn ckpt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn save_checkpoint(model: &FewShotModel, mut out: impl Write) -> Result<()> {
    let c = &model.config;
    writeln!(out, "{CHECKPOINT_HEADER}")?;
    let fields = [
        ("input_dim", c.input_dim.to_string()),
        ("hidden", join(&c.hidden)),
        ("feature_dim", c.feature_dim.to_string()),
        ("inference_width", c.inference_width.to_string()),
        ("classifier", c.classifier.to_string()),
        ("alpha", format!("{:.16e}", c.alpha)),
        ("beta", format!("{:.16e}", c.beta)),
        ("shared", c.shared.to_string()),
        ("ten", c.ten.to_string()),
        ("aux_classes", c.aux_classes.map_or("none".into(), |n| n.to_string())),
    ];
    for (k, v) in fields {
        writeln!(out, "config {k}={v}")?;
    }
    for (name, t) in &model.params {
        let values: Vec<String> = t.data().iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(out, "param {name} {} {}", join(t.shape()), values.join(" "))?;
    }
    Ok(())
}

pub fn load_checkpoint(input: impl BufRead) -> Result<FewShotModel> {
    let mut lines = input.lines();
    let header = lines.next().ok_or_else(|| ckpt("empty file"))??;
    if header.trim_end() != CHECKPOINT_HEADER {
        return Err(ckpt(format!(
            "unsupported header `{header}`, expected `{CHECKPOINT_HEADER}`"
        )));
    }
    let mut config = ModelConfig::default();
    let mut seen = Vec::new();
    let mut params = ParamSet::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        let at = |msg: &str| ckpt(format!("line {}: {msg}", n + 2));
        if line.is_empty() {
            continue;
        }
        let (kind, rest) = line.split_once(' ').ok_or_else(|| at("malformed record"))?;
        match kind {
            "config" => {
                let (k, v) = rest.split_once('=').ok_or_else(|| at("malformed config"))?;
                let num = |v: &str| v.parse::<usize>().map_err(|_| at(&format!("bad `{k}`")));
                let real = |v: &str| v.parse::<f64>().map_err(|_| at(&format!("bad `{k}`")));
                let flag = |v: &str| v.parse::<bool>().map_err(|_| at(&format!("bad `{k}`")));
                match k {
                    "input_dim" => config.input_dim = num(v)?,
                    "hidden" => {
                        config.hidden = if v.is_empty() {
                            Vec::new()
                        } else {
                            v.split(',').map(num).collect::<Result<_>>()?
                        }
                    }
                    "feature_dim" => config.feature_dim = num(v)?,
                    "inference_width" => config.inference_width = num(v)?,
                    "classifier" => config.classifier = v.parse().map_err(|_| at("bad classifier"))?,
                    "alpha" => config.alpha = real(v)?,
                    "beta" => config.beta = real(v)?,
                    "shared" => config.shared = flag(v)?,
                    "ten" => config.ten = flag(v)?,
                    "aux_classes" => {
                        config.aux_classes = if v == "none" { None } else { Some(num(v)?) }
                    }
                    _ => return Err(at(&format!("unknown config key `{k}`"))),
                }
                seen.push(k.to_string());
            }
            "param" => {
                let mut parts = rest.split(' ');
                let name = parts.next().ok_or_else(|| at("missing name"))?;
                let shape = parts
                    .next()
                    .ok_or_else(|| at("missing shape"))?
                    .split(',')
                    .filter(|s| !s.is_empty())
                    .map(|d| d.parse::<usize>().map_err(|_| at("bad shape")))
                    .collect::<Result<Vec<usize>>>()?;
                let values = parts
                    .map(|v| v.parse::<f64>().map_err(|_| at("bad value")))
                    .collect::<Result<Vec<f64>>>()?;
                let t = Tensor::new(shape, values).map_err(|e| at(&e.to_string()))?;
                params.insert(name, t).map_err(|e| at(&e.to_string()))?;
            }
            _ => return Err(at(&format!("unknown record `{kind}`"))),
        }
    }
    if seen.len() != 10 {
        return Err(ckpt("incomplete model configuration"));
    }
    config.validate().map_err(|e| ckpt(e.to_string()))?;
    let model = FewShotModel { config, params };
    check_layout(&model)?;
    Ok(model)
}

/// Every parameter the architecture expects is present with the right shape.
fn check_layout(model: &FewShotModel) -> Result<()> {
    let reference = FewShotModel::new(model.config.clone(), &mut keyed_rng(0, 0))
        .map_err(|e| ckpt(e.to_string()))?;
    let names: Vec<_> = reference.params.names().collect();
    let loaded: Vec<_> = model.params.names().collect();
    if names != loaded {
        return Err(ckpt("parameter names do not match the configuration"));
    }
    for (name, t) in &reference.params {
        if model.params.get(name).map(Tensor::shape) != Some(t.shape()) {
            return Err(ckpt(format!("parameter `{name}` has the wrong shape")));
        }
    }
    Ok(())
}
