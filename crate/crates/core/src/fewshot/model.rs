use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::autodiff::{ParamSet, Tape, Tensor, Var};
use crate::error::{contract, Error, Result};
use crate::gaussian::{DiagGaussian, GaussianVars};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ClassifierMode {
    /// Dot-product logits; features carry a trailing constant 1 so the last
    /// weight component acts as a bias.
    Linear,
    /// `α · cos(f, w_n)`.
    #[default]
    Cosine,
}

impl ClassifierMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ClassifierMode::Linear => "linear",
            ClassifierMode::Cosine => "cosine",
        }
    }
}

impl fmt::Display for ClassifierMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ClassifierMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ClassifierMode::Linear),
            "cosine" => Ok(ClassifierMode::Cosine),
            _ => Err(contract(format!("unknown classifier mode `{s}`"))),
        }
    }
}

/// Architecture of a [`FewShotModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    /// Hidden widths of the feature extractor.
    pub hidden: Vec<usize>,
    /// Feature dimension `d`.
    pub feature_dim: usize,
    /// Trunk width of each inference network.
    pub inference_width: usize,
    pub classifier: ClassifierMode,
    pub alpha: f64,
    pub beta: f64,
    /// One inference network for prior and posterior.
    pub shared: bool,
    pub ten: bool,
    /// Meta-train class count for the auxiliary head, if any.
    pub aux_classes: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: 16,
            hidden: vec![64, 64],
            feature_dim: 32,
            inference_width: 32,
            classifier: ClassifierMode::Cosine,
            alpha: 25.0,
            beta: 1.0,
            shared: true,
            ten: false,
            aux_classes: None,
        }
    }
}

impl ModelConfig {
    /// Dimension of each latent class weight vector.
    pub fn weight_dim(&self) -> usize {
        match self.classifier {
            ClassifierMode::Linear => self.feature_dim + 1,
            ClassifierMode::Cosine => self.feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0
            || self.feature_dim == 0
            || self.inference_width == 0
            || self.hidden.contains(&0)
        {
            return Err(contract("layer widths must be positive"));
        }
        if !(self.alpha > 0.0) || !self.alpha.is_finite() {
            return Err(Error::Domain(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(Error::Domain(format!("beta must be non-negative, got {}", self.beta)));
        }
        if self.aux_classes == Some(0) {
            return Err(contract("auxiliary head needs at least one class"));
        }
        Ok(())
    }

    /// Parameters of one inference network with trunk width `h`.
    fn inference_params(&self, h: usize) -> usize {
        let (d, w) = (self.feature_dim, self.weight_dim());
        d * h + h + 2 * (h * w + w)
    }

    /// Trunk width for which two separate inference networks come closest to
    /// the parameter count of one shared network of width `inference_width`.
    pub fn matched_separate_width(&self) -> usize {
        let target = self.inference_params(self.inference_width);
        (1..=self.inference_width)
            .min_by_key(|&h| (2 * self.inference_params(h)).abs_diff(target))
            .expect("non-empty range")
    }
}

/// Which inference network to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InferenceNet {
    /// Conditional prior network (also the posterior in shared mode).
    Prior,
    Posterior,
}

/// Feature extractor, inference network(s), optional task conditioning and
/// auxiliary head, held as one named parameter set.
///
/// Parameter names: `theta.l{i}`, `phi.{trunk,mean,logvar}`,
/// `psi.{trunk,mean,logvar}` (separate mode), `ten.{fc0,out}` and `aux`,
/// each with `.weight` and `.bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct FewShotModel {
    pub config: ModelConfig,
    pub params: ParamSet,
}

impl FewShotModel {
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let mut fan_in = config.input_dim;
        let widths: Vec<usize> = config.hidden.iter().copied().chain([config.feature_dim]).collect();
        for (i, &w) in widths.iter().enumerate() {
            params.add_linear(&format!("theta.l{i}"), fan_in, w, lecun(fan_in), rng)?;
            fan_in = w;
        }
        let (d, wd) = (config.feature_dim, config.weight_dim());
        let nets: &[(&str, usize)] = if config.shared {
            &[("phi", config.inference_width)]
        } else {
            &[("phi", config.matched_separate_width()), ("psi", config.matched_separate_width())]
        };
        for &(net, h) in nets {
            params.add_linear(&format!("{net}.trunk"), d, h, lecun(d), rng)?;
            params.add_linear(&format!("{net}.mean"), h, wd, lecun(h), rng)?;
            params.add_linear(&format!("{net}.logvar"), h, wd, 0.0, rng)?;
        }
        if config.ten {
            let film: usize = config.hidden.iter().sum();
            params.add_linear("ten.fc0", d, d, lecun(d), rng)?;
            params.add_linear("ten.out", d, 2 * film, 0.0, rng)?;
        }
        if let Some(c) = config.aux_classes {
            params.add_linear("aux", d, c, lecun(d), rng)?;
        }
        Ok(Self { config, params })
    }

    pub fn num_layers(&self) -> usize {
        self.config.hidden.len() + 1
    }

    fn net_prefix(&self, net: InferenceNet) -> &'static str {
        match (net, self.config.shared) {
            (InferenceNet::Posterior, false) => "psi",
            _ => "phi",
        }
    }

    /// Scalar parameter count of the inference network(s).
    pub fn inference_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| k.starts_with("phi.") || k.starts_with("psi."))
            .map(|(_, v)| v.len())
            .sum()
    }
}

fn lecun(fan_in: usize) -> f64 {
    (1.0 / fan_in as f64).sqrt()
}

/// Per-hidden-layer scale and shift applied before the nonlinearity.
#[derive(Clone, Debug, PartialEq)]
pub struct Film {
    pub gamma: Vec<Vec<f64>>,
    pub delta: Vec<Vec<f64>>,
}

impl Film {
    pub fn identity(hidden: &[usize]) -> Self {
        Self {
            gamma: hidden.iter().map(|&h| vec![1.0; h]).collect(),
            delta: hidden.iter().map(|&h| vec![0.0; h]).collect(),
        }
    }
}

/// [`Film`] recorded on a tape.
#[derive(Clone, Debug)]
pub(crate) struct FilmVars {
    gamma: Vec<Var>,
    delta: Vec<Var>,
}

impl FilmVars {
    fn constant(tape: &mut Tape, film: &Film) -> Self {
        Self {
            gamma: film.gamma.iter().map(|g| tape.constant(Tensor::vector(g.clone()))).collect(),
            delta: film.delta.iter().map(|d| tape.constant(Tensor::vector(d.clone()))).collect(),
        }
    }

    pub(crate) fn values(&self, tape: &Tape) -> Film {
        Film {
            gamma: self.gamma.iter().map(|&g| tape.value(g).data().to_vec()).collect(),
            delta: self.delta.iter().map(|&d| tape.value(d).data().to_vec()).collect(),
        }
    }
}

/// `x · W + b` for the layer registered under `prefix`.
pub(crate) fn linear(tape: &mut Tape, model: &FewShotModel, prefix: &str, x: Var) -> Result<Var> {
    let w = tape.param(&model.params, &format!("{prefix}.weight"))?;
    let b = tape.param(&model.params, &format!("{prefix}.bias"))?;
    let n = tape.shape(x)[0];
    let xw = tape.matmul(x, w)?;
    let bb = tape.broadcast_rows(b, n)?;
    tape.add(xw, bb)
}

/// Features of the rows of `x` (`[n, D_in]` → `[n, d]`).
pub(crate) fn features(
    tape: &mut Tape,
    model: &FewShotModel,
    x: Var,
    film: Option<&FilmVars>,
) -> Result<Var> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != model.config.input_dim {
        return Err(contract(format!(
            "inputs of shape {shape:?}, expected [n, {}]",
            model.config.input_dim
        )));
    }
    let n = shape[0];
    let mut h = x;
    let last = model.num_layers() - 1;
    for layer in 0..=last {
        h = linear(tape, model, &format!("theta.l{layer}"), h)?;
        if layer == last {
            break;
        }
        if let Some(f) = film {
            let g = tape.broadcast_rows(f.gamma[layer], n)?;
            let d = tape.broadcast_rows(f.delta[layer], n)?;
            let scaled = tape.mul(h, g)?;
            h = tape.add(scaled, d)?;
        }
        h = tape.elu(h);
    }
    Ok(h)
}

/// `[N, n]` matrix that averages the rows of each class.
pub(crate) fn averaging_matrix(labels: &[usize], way: usize) -> Result<Tensor> {
    let mut counts = vec![0usize; way];
    for &y in labels {
        if y >= way {
            return Err(contract(format!("label {y} outside {way}-way episode")));
        }
        counts[y] += 1;
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(contract(format!("class {empty} has no samples")));
    }
    let n = labels.len();
    let mut data = vec![0.0; way * n];
    for (i, &y) in labels.iter().enumerate() {
        data[y * n + i] = 1.0 / counts[y] as f64;
    }
    Tensor::matrix(way, n, data)
}

/// Per-class mean features `[N, d]`.
pub(crate) fn prototypes(tape: &mut Tape, feats: Var, labels: &[usize], way: usize) -> Result<Var> {
    if tape.shape(feats)[0] != labels.len() {
        return Err(contract("one label per feature row required"));
    }
    let avg = tape.constant(averaging_matrix(labels, way)?);
    tape.matmul(avg, feats)
}

/// Task conditioning from the grand prototype `c` (`[d]`).
pub(crate) fn ten(tape: &mut Tape, model: &FewShotModel, grand: Var) -> Result<FilmVars> {
    let d = model.config.feature_dim;
    let c = tape.reshape(grand, vec![1, d])?;
    let h = linear(tape, model, "ten.fc0", c)?;
    let h = tape.elu(h);
    let out = linear(tape, model, "ten.out", h)?;
    let mut gamma = Vec::new();
    let mut delta = Vec::new();
    let total: usize = model.config.hidden.iter().sum();
    let mut offset = 0;
    for &width in &model.config.hidden {
        let g_idx: Vec<usize> = (offset..offset + width).collect();
        let d_idx: Vec<usize> = (total + offset..total + offset + width).collect();
        let r = tape.cols(out, &g_idx)?;
        let r = tape.reshape(r, vec![width])?;
        gamma.push(tape.shift(r, 1.0));
        let dl = tape.cols(out, &d_idx)?;
        delta.push(tape.reshape(dl, vec![width])?);
        offset += width;
    }
    Ok(FilmVars { gamma, delta })
}

/// Distributions over the class weights, one row per prototype.
pub(crate) fn infer(
    tape: &mut Tape,
    model: &FewShotModel,
    net: InferenceNet,
    protos: Var,
) -> Result<GaussianVars> {
    let prefix = model.net_prefix(net);
    let h = linear(tape, model, &format!("{prefix}.trunk"), protos)?;
    let h = tape.elu(h);
    let mean = linear(tape, model, &format!("{prefix}.mean"), h)?;
    let raw = linear(tape, model, &format!("{prefix}.logvar"), h)?;
    GaussianVars::new(tape, mean, raw)
}

/// Features entering the classifier: unconditioned, with a trailing 1 in
/// linear mode.
pub(crate) fn classifier_inputs(tape: &mut Tape, model: &FewShotModel, feats: Var) -> Result<Var> {
    match model.config.classifier {
        ClassifierMode::Cosine => Ok(feats),
        ClassifierMode::Linear => {
            let n = tape.shape(feats)[0];
            let ones = tape.constant(Tensor::ones(&[n, 1]));
            tape.concat(&[feats, ones], 1)
        }
    }
}

/// Rows scaled to unit Euclidean norm.
fn normalize_rows(tape: &mut Tape, x: Var, what: &str) -> Result<Var> {
    let cols = tape.shape(x)[1];
    let sq = tape.square(x);
    let ss = tape.sum_axis(sq, 1)?;
    if tape.value(ss).data().iter().any(|&v| !(v > 0.0)) {
        return Err(Error::Degenerate(format!("zero-norm {what} in cosine classifier")));
    }
    let norm = tape.sqrt(ss)?;
    let norm = tape.broadcast_cols(norm, cols)?;
    tape.div(x, norm)
}

/// Logits `[n, R]` of classifier inputs `f` (`[n, w]`) against weight rows
/// `w` (`[R, w]`).
pub(crate) fn logits(tape: &mut Tape, model: &FewShotModel, f: Var, w: Var) -> Result<Var> {
    match model.config.classifier {
        ClassifierMode::Linear => {
            let wt = tape.transpose(w)?;
            tape.matmul(f, wt)
        }
        ClassifierMode::Cosine => {
            let fnorm = normalize_rows(tape, f, "feature")?;
            let wnorm = normalize_rows(tape, w, "class weight")?;
            let wt = tape.transpose(wnorm)?;
            let cos = tape.matmul(fnorm, wt)?;
            Ok(tape.scale(cos, model.config.alpha))
        }
    }
}

/// Feature vectors for the rows of `x`, optionally conditioned.
pub fn extract_features(model: &FewShotModel, x: &Tensor, film: Option<&Film>) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    if let Some(f) = film {
        if f.gamma.len() != model.config.hidden.len()
            || f.gamma.iter().zip(&model.config.hidden).any(|(g, &h)| g.len() != h)
            || f.delta.iter().map(Vec::len).ne(model.config.hidden.iter().copied())
        {
            return Err(contract("film does not match the hidden layer widths"));
        }
    }
    let film = film.map(|f| FilmVars::constant(&mut tape, f));
    let out = features(&mut tape, model, xv, film.as_ref())?;
    Ok(tape.value(out).clone())
}

/// Per-class mean of `features` (`[n, d]`) and the mean of those means.
pub fn class_prototypes(features: &Tensor, labels: &[usize], way: usize) -> Result<(Tensor, Vec<f64>)> {
    if features.rank() != 2 || features.rows() != labels.len() {
        return Err(contract("one label per feature row required"));
    }
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let p = prototypes(&mut tape, f, labels, way)?;
    let grand = tape.mean_axis(p, 0)?;
    Ok((tape.value(p).clone(), tape.value(grand).data().to_vec()))
}

/// Class-weight distributions for each row of `prototypes` (`[N, d]`).
pub fn infer_class_distribution(
    model: &FewShotModel,
    net: InferenceNet,
    prototypes: &Tensor,
) -> Result<Vec<DiagGaussian>> {
    if prototypes.rank() != 2 || prototypes.cols() != model.config.feature_dim {
        return Err(contract(format!(
            "prototypes must be [N, {}]",
            model.config.feature_dim
        )));
    }
    let mut tape = Tape::new();
    let p = tape.constant(prototypes.clone());
    infer(&mut tape, model, net, p)?.to_dists(&tape)
}

/// Task conditioning for a grand prototype.
pub fn ten_condition(model: &FewShotModel, grand: &[f64]) -> Result<Film> {
    if !model.config.ten {
        return Err(contract("task conditioning is disabled"));
    }
    if grand.len() != model.config.feature_dim {
        return Err(contract("grand prototype has the wrong dimension"));
    }
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::vector(grand.to_vec()));
    Ok(ten(&mut tape, model, c)?.values(&tape))
}

/// Log-probabilities over classes for each row of `f` (`[n, d]` features)
/// under the class weights `w` (`[N, weight_dim]`). Linear mode appends the
/// constant feature itself.
pub fn classify(model: &FewShotModel, w: &Tensor, f: &Tensor) -> Result<Tensor> {
    let wd = model.config.weight_dim();
    if w.rank() != 2 || w.cols() != wd || f.rank() != 2 || f.cols() != model.config.feature_dim {
        return Err(contract(format!(
            "classify needs w: [N, {wd}] and f: [n, {}]",
            model.config.feature_dim
        )));
    }
    let mut tape = Tape::new();
    let fv = tape.constant(f.clone());
    let fv = classifier_inputs(&mut tape, model, fv)?;
    let wv = tape.constant(w.clone());
    let z = logits(&mut tape, model, fv, wv)?;
    let lp = tape.log_softmax(z)?;
    Ok(tape.value(lp).clone())
}
