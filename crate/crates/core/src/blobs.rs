//! Gaussian class clusters and the episodic sampler.
//!
//! Each class has a center drawn from `N(0, scale²·I)` and samples drawn
//! around it with a fixed within-class standard deviation. Classes are split
//! into disjoint meta-train, validation and test sets.

use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::seq::index::sample as sample_indices;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::error::{contract, Error, Result};
use crate::rng::{keyed_rng, stream_key};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(contract(format!("unknown split `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobDatasetConfig {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub input_dim: usize,
    pub class_center_scale: f64,
    pub within_class_std: f64,
    /// Class counts for (train, val, test).
    pub split_counts: (usize, usize, usize),
    pub seed: u64,
}

impl Default for BlobDatasetConfig {
    fn default() -> Self {
        Self {
            num_classes: 50,
            samples_per_class: 200,
            input_dim: 16,
            class_center_scale: 4.0,
            within_class_std: 1.0,
            split_counts: (40, 5, 5),
            seed: 0,
        }
    }
}

impl BlobDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.samples_per_class == 0 || self.input_dim == 0 {
            return Err(contract("num_classes, samples_per_class and input_dim must be positive"));
        }
        let (a, b, c) = self.split_counts;
        if a == 0 || b == 0 || c == 0 || a + b + c != self.num_classes {
            return Err(contract(format!(
                "split counts {:?} must be positive and sum to {} classes",
                self.split_counts, self.num_classes
            )));
        }
        if !(self.class_center_scale > 0.0) || !self.class_center_scale.is_finite() {
            return Err(Error::Domain(format!(
                "class_center_scale must be positive, got {}",
                self.class_center_scale
            )));
        }
        if !(self.within_class_std >= 0.0) || !self.within_class_std.is_finite() {
            return Err(Error::Domain(format!(
                "within_class_std must be non-negative, got {}",
                self.within_class_std
            )));
        }
        Ok(())
    }

    /// Center scale over within-class spread; infinite for noiseless classes.
    pub fn separation_ratio(&self) -> f64 {
        self.class_center_scale / self.within_class_std
    }
}

/// Immutable sample store. Class ids are contiguous per split: train classes
/// come first, then validation, then test.
#[derive(Clone, Debug, PartialEq)]
pub struct BlobDataset {
    config: BlobDatasetConfig,
    /// Class-major: sample `i` of class `c` starts at `(c·S + i)·D`.
    samples: Vec<f64>,
    splits: [Vec<usize>; 3],
}

pub fn make_dataset(config: &BlobDatasetConfig) -> Result<BlobDataset> {
    config.validate()?;
    let (c, s, d) = (config.num_classes, config.samples_per_class, config.input_dim);
    let mut samples = Vec::with_capacity(c * s * d);
    for class in 0..c {
        let mut rng = keyed_rng(config.seed, stream_key("blob-class", class as u64));
        let center: Vec<f64> = (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                config.class_center_scale * z
            })
            .collect();
        for _ in 0..s {
            for &m in &center {
                let e: f64 = StandardNormal.sample(&mut rng);
                samples.push(m + config.within_class_std * e);
            }
        }
    }
    let (a, b, _) = config.split_counts;
    let splits = [(0..a).collect(), (a..a + b).collect(), (a + b..c).collect()];
    Ok(BlobDataset {
        config: config.clone(),
        samples,
        splits,
    })
}

impl BlobDataset {
    pub fn config(&self) -> &BlobDatasetConfig {
        &self.config
    }

    pub fn input_dim(&self) -> usize {
        self.config.input_dim
    }

    pub fn classes(&self, split: Split) -> &[usize] {
        &self.splits[split.index()]
    }

    pub fn sample(&self, class: usize, index: usize) -> &[f64] {
        let d = self.config.input_dim;
        let start = (class * self.config.samples_per_class + index) * d;
        &self.samples[start..start + d]
    }

    fn split_of(&self, class: usize) -> Split {
        Split::ALL
            .into_iter()
            .find(|s| self.classes(*s).contains(&class))
            .expect("every class belongs to a split")
    }

    /// One row per sample: `class_id,split,x_1,…,x_D`, preceded by a comment
    /// line carrying the generation settings.
    pub fn write_csv(&self, mut out: impl Write) -> Result<()> {
        let c = &self.config;
        writeln!(
            out,
            "# blobs seed={} class_center_scale={:e} within_class_std={:e}",
            c.seed, c.class_center_scale, c.within_class_std
        )?;
        let cols: Vec<String> = (0..c.input_dim).map(|j| format!("x{j}")).collect();
        writeln!(out, "class_id,split,{}", cols.join(","))?;
        for class in 0..c.num_classes {
            let split = self.split_of(class);
            for i in 0..c.samples_per_class {
                let row: Vec<String> = self.sample(class, i).iter().map(|v| format!("{v:e}")).collect();
                writeln!(out, "{class},{split},{}", row.join(","))?;
            }
        }
        Ok(())
    }

    pub fn read_csv(input: impl BufRead) -> Result<BlobDataset> {
        let bad = |line: usize, msg: &str| contract(format!("dataset csv line {line}: {msg}"));
        let mut lines = input.lines().enumerate();
        let mut meta: [Option<String>; 3] = Default::default();
        let (_, first) = lines.next().ok_or_else(|| bad(1, "empty file"))?;
        let first = first?;
        let comment = first
            .strip_prefix("# blobs ")
            .ok_or_else(|| bad(1, "missing `# blobs` header"))?;
        for field in comment.split_whitespace() {
            let (k, v) = field.split_once('=').ok_or_else(|| bad(1, "malformed header"))?;
            let slot = match k {
                "seed" => 0,
                "class_center_scale" => 1,
                "within_class_std" => 2,
                _ => return Err(bad(1, &format!("unknown header field `{k}`"))),
            };
            meta[slot] = Some(v.to_string());
        }
        let get = |i: usize| meta[i].clone().ok_or_else(|| bad(1, "incomplete header"));
        let num = |s: String| s.parse::<f64>().map_err(|_| bad(1, "bad number"));
        let seed = get(0)?.parse::<u64>().map_err(|_| bad(1, "bad seed"))?;
        let scale = num(get(1)?)?;
        let std = num(get(2)?)?;

        let (_, header) = lines.next().ok_or_else(|| bad(2, "missing column header"))?;
        let dim = header?.split(',').count().saturating_sub(2);
        if dim == 0 {
            return Err(bad(2, "no feature columns"));
        }

        let mut rows: Vec<(usize, Split, Vec<f64>)> = Vec::new();
        for (n, line) in lines {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split(',');
            let class = parts
                .next()
                .and_then(|v| v.parse::<usize>().ok())
                .ok_or_else(|| bad(n + 1, "bad class id"))?;
            let split: Split = parts
                .next()
                .ok_or_else(|| bad(n + 1, "missing split"))?
                .parse()?;
            let x = parts
                .map(|v| v.parse::<f64>().map_err(|_| bad(n + 1, "bad value")))
                .collect::<Result<Vec<f64>>>()?;
            if x.len() != dim {
                return Err(bad(n + 1, "wrong number of values"));
            }
            rows.push((class, split, x));
        }
        let num_classes = rows.iter().map(|r| r.0 + 1).max().ok_or_else(|| bad(3, "no samples"))?;
        let mut per_class = vec![0usize; num_classes];
        let mut split_of = vec![None; num_classes];
        for (class, split, _) in &rows {
            per_class[*class] += 1;
            if split_of[*class].replace(*split).is_some_and(|s| s != *split) {
                return Err(contract(format!("class {class} appears in two splits")));
            }
        }
        let spc = per_class[0];
        if per_class.iter().any(|&n| n != spc) {
            return Err(contract("classes have unequal sample counts"));
        }
        let counts = Split::ALL.map(|s| split_of.iter().filter(|v| **v == Some(s)).count());
        let config = BlobDatasetConfig {
            num_classes,
            samples_per_class: spc,
            input_dim: dim,
            class_center_scale: scale,
            within_class_std: std,
            split_counts: (counts[0], counts[1], counts[2]),
            seed,
        };
        config.validate()?;
        // contiguous split layout is part of the format
        let (a, b, _) = config.split_counts;
        for (class, split) in split_of.iter().enumerate() {
            let expected = if class < a {
                Split::Train
            } else if class < a + b {
                Split::Val
            } else {
                Split::Test
            };
            if *split != Some(expected) {
                return Err(contract(format!("class {class} is out of split order")));
            }
        }
        rows.sort_by_key(|r| r.0);
        let samples = rows.into_iter().flat_map(|r| r.2).collect();
        let splits = [(0..a).collect(), (a..a + b).collect(), (a + b..num_classes).collect()];
        Ok(BlobDataset {
            config,
            samples,
            splits,
        })
    }
}

/// How query samples are spread over the classes of an episode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum QueryMode {
    /// Exactly `M` queries per class.
    #[default]
    Stratified,
    /// `N·M` queries, each from a uniformly drawn class.
    Uniform,
}

impl FromStr for QueryMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "stratified" => Ok(QueryMode::Stratified),
            "uniform" => Ok(QueryMode::Uniform),
            _ => Err(contract(format!("unknown query mode `{s}`"))),
        }
    }
}

impl fmt::Display for QueryMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QueryMode::Stratified => "stratified",
            QueryMode::Uniform => "uniform",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
    pub split: Split,
    pub episode_id: u64,
    pub query_mode: QueryMode,
}

impl EpisodeSpec {
    pub fn new(way: usize, shot: usize, queries_per_class: usize, split: Split) -> Self {
        Self {
            way,
            shot,
            queries_per_class,
            split,
            episode_id: 0,
            query_mode: QueryMode::Stratified,
        }
    }

    pub fn with_id(self, episode_id: u64) -> Self {
        Self { episode_id, ..self }
    }
}

/// One N-way K-shot task. Rows of `support_x` are grouped by class: the
/// first `K` belong to class 0, and so on. Labels index into `classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode {
    pub support_x: Tensor,
    pub support_y: Vec<usize>,
    pub query_x: Tensor,
    pub query_y: Vec<usize>,
    pub way: usize,
    pub shot: usize,
    /// Dataset class id behind each episode label.
    pub classes: Vec<usize>,
    /// `(class id, sample index)` of each support row.
    pub support_index: Vec<(usize, usize)>,
    /// `(class id, sample index)` of each query row.
    pub query_index: Vec<(usize, usize)>,
}

/// Draws an episode; identical `(dataset seed, split, episode_id)` give
/// identical episodes.
pub fn sample_episode(dataset: &BlobDataset, spec: &EpisodeSpec) -> Result<Episode> {
    let pool = dataset.classes(spec.split);
    let (n, k, m) = (spec.way, spec.shot, spec.queries_per_class);
    if n == 0 || k == 0 || m == 0 {
        return Err(contract("way, shot and queries_per_class must be positive"));
    }
    if n > pool.len() {
        return Err(contract(format!(
            "{n}-way episode from a split with {} classes",
            pool.len()
        )));
    }
    let spc = dataset.config.samples_per_class;
    if k + m > spc {
        return Err(contract(format!(
            "shot {k} + queries {m} exceed {spc} samples per class"
        )));
    }
    let key = stream_key(&format!("episode-{}", spec.split), spec.episode_id);
    let mut rng = keyed_rng(dataset.config.seed, key);

    let classes: Vec<usize> = sample_indices(&mut rng, pool.len(), n)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    let query_counts = match spec.query_mode {
        QueryMode::Stratified => vec![m; n],
        QueryMode::Uniform => {
            let mut counts = vec![0usize; n];
            for _ in 0..n * m {
                let open: Vec<usize> = (0..n).filter(|&c| k + counts[c] < spc).collect();
                counts[open[rng.random_range(0..open.len())]] += 1;
            }
            counts
        }
    };

    let mut support_index = Vec::with_capacity(n * k);
    let mut query_index = Vec::with_capacity(n * m);
    let mut support_y = Vec::with_capacity(n * k);
    let mut query_y = Vec::with_capacity(n * m);
    for (label, (&class, &q)) in classes.iter().zip(&query_counts).enumerate() {
        let picks = sample_indices(&mut rng, spc, k + q).into_vec();
        for &i in &picks[..k] {
            support_index.push((class, i));
            support_y.push(label);
        }
        for &i in &picks[k..] {
            query_index.push((class, i));
            query_y.push(label);
        }
    }
    let gather = |index: &[(usize, usize)]| -> Result<Tensor> {
        let data = index
            .iter()
            .flat_map(|&(c, i)| dataset.sample(c, i).iter().copied())
            .collect();
        Tensor::matrix(index.len(), dataset.input_dim(), data)
    };
    Ok(Episode {
        support_x: gather(&support_index)?,
        support_y,
        query_x: gather(&query_index)?,
        query_y,
        way: n,
        shot: k,
        classes,
        support_index,
        query_index,
    })
}

/// A batch for the global classification task over meta-train classes;
/// labels are positions in [`BlobDataset::classes`]`(Split::Train)`.
pub fn sample_train_batch(
    dataset: &BlobDataset,
    size: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor, Vec<usize>)> {
    let pool = dataset.classes(Split::Train);
    if size == 0 {
        return Err(contract("empty batch"));
    }
    let spc = dataset.config.samples_per_class;
    let mut data = Vec::with_capacity(size * dataset.input_dim());
    let mut labels = Vec::with_capacity(size);
    for _ in 0..size {
        let label = rng.random_range(0..pool.len());
        let i = rng.random_range(0..spc);
        data.extend_from_slice(dataset.sample(pool[label], i));
        labels.push(label);
    }
    Ok((Tensor::matrix(size, dataset.input_dim(), data)?, labels))
}

/// Mean accuracy over evaluation episodes with a normal-approximation
/// 95% interval, `1.96·sd/√E`.
#[derive(Clone, Debug, PartialEq)]
pub struct AccuracySummary {
    pub mean: f64,
    pub ci95: f64,
    pub per_episode: Vec<f64>,
}

impl AccuracySummary {
    pub fn from_accuracies(per_episode: Vec<f64>) -> Result<Self> {
        let e = per_episode.len();
        if e < 2 {
            return Err(contract(format!("need at least 2 episodes, got {e}")));
        }
        let mean = per_episode.iter().sum::<f64>() / e as f64;
        let var = per_episode.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (e - 1) as f64;
        Ok(Self {
            mean,
            ci95: 1.96 * var.sqrt() / (e as f64).sqrt(),
            per_episode,
        })
    }
}

/// Scores `episodes` episodes (ids `0..episodes`) in parallel. `score`
/// gets each episode and a generator keyed by `(seed, episode_id)`, so the
/// result does not depend on the number of worker threads.
pub fn evaluate_episodes<F>(
    dataset: &BlobDataset,
    template: &EpisodeSpec,
    episodes: usize,
    seed: u64,
    score: F,
) -> Result<AccuracySummary>
where
    F: Fn(&Episode, &mut rand_chacha::ChaCha8Rng) -> Result<f64> + Sync,
{
    if episodes < 2 {
        return Err(contract(format!("need at least 2 episodes, got {episodes}")));
    }
    let accs = (0..episodes as u64)
        .into_par_iter()
        .map(|id| {
            let episode = sample_episode(dataset, &template.with_id(id))?;
            let mut rng = keyed_rng(seed, stream_key("eval-episode", id));
            score(&episode, &mut rng)
        })
        .collect::<Result<Vec<f64>>>()?;
    AccuracySummary::from_accuracies(accs)
}
