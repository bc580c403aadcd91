use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use samovar_core::blobs::{make_dataset, BlobDataset, BlobDatasetConfig, EpisodeSpec, QueryMode, Split};
use samovar_core::fewshot::{
    evaluate, load_checkpoint, save_checkpoint, train_fewshot, Beta, ClassifierMode, PredictMode,
    TrainConfig, TrainObjective, TrainRecord,
};

use crate::config::{Config, KeySpec};
use crate::output::{ensure_dir, now, write_csv, write_text, Manifest, COLLAPSE_CSV, EVAL_CSV, TRAIN_CSV};
use crate::svg::LineChart;
use crate::CliError;

fn data_keys() -> Vec<KeySpec> {
    vec![
        ("num_classes", Some("50"), "blob classes C"),
        ("samples_per_class", Some("200"), "samples drawn per class"),
        ("input_dim", Some("16"), "input dimension"),
        ("class_center_scale", Some("4"), "class centers ~ N(0, scale²·I)"),
        ("within_class_std", Some("1"), "spread of samples around their center"),
        ("splits", Some("40,5,5"), "train,val,test class counts"),
        ("data_seed", Some("0"), "dataset seed"),
    ]
}

fn training_keys() -> Vec<KeySpec> {
    vec![
        ("episodes", Some("3000"), "training episodes T"),
        ("way", Some("5"), "classes per episode N"),
        ("shot", Some("5"), "support samples per class K"),
        ("queries", Some("15"), "query samples per class M"),
        ("samples", Some("1"), "weight samples L per training episode"),
        ("lr", Some("0.05"), "initial learning rate, ×0.1 at 50/75/90%"),
        ("momentum", Some("0.9"), "SGD momentum"),
        ("weight_decay", Some("5e-4"), "L2 coefficient on weight matrices"),
        ("decay_biases", Some("false"), "also decay bias vectors"),
        ("clip_norm", Some("1"), "joint gradient norm cap; 0 disables"),
        ("beta", Some("auto"), "KL weight; `auto` is M/d"),
        ("shared", Some("true"), "one inference network for prior and posterior"),
        ("ten", Some("false"), "task conditioning of inference-side features"),
        ("aux", Some("false"), "auxiliary classification over meta-train classes"),
        ("aux_batch", Some("64"), "auxiliary batch size"),
        ("classifier", Some("cosine"), "cosine or linear"),
        ("alpha", Some("25"), "cosine temperature"),
        ("hidden", Some("64,64"), "feature extractor hidden widths"),
        ("feature_dim", Some("32"), "feature dimension d"),
        ("inference_width", Some("32"), "inference trunk width (shared mode)"),
        ("query_mode", Some("stratified"), "stratified or uniform queries"),
        ("log_every", Some("50"), "history spacing in episodes"),
        ("val_every", Some("500"), "validation spacing; 0 disables"),
        ("val_episodes", Some("100"), "validation episodes per checkpoint"),
        ("seed", Some("0"), "run seed"),
    ]
}

fn with_defaults(mut keys: Vec<KeySpec>, overrides: &[(&'static str, &'static str)]) -> Vec<KeySpec> {
    for (k, v) in overrides {
        let slot = keys.iter_mut().find(|(name, _, _)| name == k).expect("known key");
        slot.1 = Some(v);
    }
    keys
}

pub fn train_keys() -> Vec<KeySpec> {
    let mut keys = training_keys();
    keys.push(("objective", Some("elbo"), "elbo or mc"));
    keys.push(("out_dir", Some("samovar-out/train"), "output directory"));
    keys.iter_mut().find(|k| k.0 == "beta").expect("beta").2 = "KL weight or list of weights; `auto` is M/d";
    keys.extend(data_keys());
    keys
}

pub fn collapse_keys() -> Vec<KeySpec> {
    let mut keys = with_defaults(
        training_keys(),
        &[("episodes", "5000"), ("weight_decay", "0"), ("val_every", "0")],
    );
    keys.push(("collapse_below", Some("1e-3"), "the mc trace must fall below this"));
    keys.push(("healthy_above", Some("1e-2"), "the elbo trace must stay at or above this"));
    keys.push(("out_dir", Some("samovar-out/collapse"), "output directory"));
    keys.extend(with_defaults(data_keys(), &[("within_class_std", "4")]));
    keys
}

pub fn eval_keys() -> Vec<KeySpec> {
    let mut keys = vec![
        ("checkpoint", None, "model checkpoint to evaluate"),
        ("split", Some("test"), "train, val or test classes"),
        ("episodes", Some("500"), "evaluation episodes E"),
        ("way", Some("5"), "classes per episode N"),
        ("shot", Some("5"), "support samples per class K"),
        ("queries", Some("15"), "query samples per class M"),
        ("query_mode", Some("stratified"), "stratified or uniform queries"),
        ("samples", Some("mean,1,10,100,1000"), "prediction modes: `mean` or a sample count L"),
        ("repeats", Some("1"), "evaluations per sampled mode, with fresh noise each"),
        ("seed", Some("0"), "noise seed"),
        ("out_dir", Some("samovar-out/eval"), "output directory"),
    ];
    keys.extend(data_keys());
    keys
}

fn dataset(config: &Config) -> Result<BlobDataset, CliError> {
    let splits: Vec<usize> = config.list("splits")?;
    let [train, val, test] = splits[..] else {
        return Err(CliError::Usage("`splits` needs three counts".into()));
    };
    let cfg = BlobDatasetConfig {
        num_classes: config.get("num_classes")?,
        samples_per_class: config.get("samples_per_class")?,
        input_dim: config.get("input_dim")?,
        class_center_scale: config.get("class_center_scale")?,
        within_class_std: config.get("within_class_std")?,
        split_counts: (train, val, test),
        seed: config.get("data_seed")?,
    };
    Ok(make_dataset(&cfg)?)
}

fn training(config: &Config, objective: TrainObjective, beta: Beta) -> Result<TrainConfig, CliError> {
    let hidden = match config.raw("hidden") {
        "" => Vec::new(),
        _ => config.list("hidden")?,
    };
    let cfg = TrainConfig {
        episodes: config.get("episodes")?,
        way: config.get("way")?,
        shot: config.get("shot")?,
        queries: config.get("queries")?,
        samples: config.get("samples")?,
        lr: config.get("lr")?,
        momentum: config.get("momentum")?,
        weight_decay: config.get("weight_decay")?,
        decay_biases: config.get("decay_biases")?,
        clip_norm: config.get("clip_norm")?,
        beta,
        objective,
        shared: config.get("shared")?,
        ten: config.get("ten")?,
        aux: config.get("aux")?,
        aux_batch: config.get("aux_batch")?,
        classifier: config.get::<ClassifierMode>("classifier")?,
        alpha: config.get("alpha")?,
        hidden,
        feature_dim: config.get("feature_dim")?,
        inference_width: config.get("inference_width")?,
        query_mode: config.get::<QueryMode>("query_mode")?,
        log_every: config.get("log_every")?,
        val_every: config.get("val_every")?,
        val_episodes: config.get("val_episodes")?,
        seed: config.get("seed")?,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| v.to_string())
}

fn history_rows(beta: &str, history: &[TrainRecord]) -> Vec<Vec<String>> {
    history
        .iter()
        .map(|r| {
            vec![
                beta.to_string(),
                r.episode.to_string(),
                r.loss.to_string(),
                r.kl.to_string(),
                r.recon.to_string(),
                r.max_prior_variance.to_string(),
                opt(r.val_accuracy),
            ]
        })
        .collect()
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn train(config: &Config) -> Result<(), CliError> {
    let started = now();
    let objective: TrainObjective = config.get("objective")?;
    let betas: Vec<Beta> = config.list("beta")?;
    let runs: Vec<TrainConfig> = betas
        .iter()
        .map(|&b| training(config, objective, b))
        .collect::<Result<_, _>>()?;
    let data = dataset(config)?;
    let dir = PathBuf::from(config.raw("out_dir"));
    ensure_dir(&dir)?;

    let mut rows = Vec::new();
    let mut outputs = Vec::new();
    for cfg in &runs {
        let t0 = std::time::Instant::now();
        let run = train_fewshot(cfg, &data)?;
        rows.extend(history_rows(&cfg.beta.to_string(), &run.history));
        let name = if runs.len() == 1 {
            "model.ckpt".to_string()
        } else {
            format!("model-beta-{}.ckpt", cfg.beta)
        };
        let path = dir.join(name);
        save_checkpoint(&run.model, create(&path)?)?;
        outputs.push(path);
        let last = run.history.last().expect("non-empty history");
        let val = run.history.iter().rev().find_map(|r| r.val_accuracy);
        println!(
            "beta={} ({:.4}) loss={:.4} max_prior_variance={:.3e} val_accuracy={} ({:.1}s)",
            cfg.beta,
            cfg.resolved_beta(),
            last.loss,
            last.max_prior_variance,
            val.map_or("-".into(), |v| format!("{v:.4}")),
            t0.elapsed().as_secs_f64()
        );
    }
    outputs.insert(0, write_csv(&dir, &TRAIN_CSV, &rows)?);
    Manifest { command: "train", config, started, outputs }.write(&dir)?;
    Ok(())
}

pub fn eval(config: &Config) -> Result<(), CliError> {
    let started = now();
    let path = PathBuf::from(config.raw("checkpoint"));
    let file = File::open(&path).map_err(|e| CliError::Usage(format!("cannot open checkpoint {}: {e}", path.display())))?;
    let model = load_checkpoint(BufReader::new(file))?;
    let data = dataset(config)?;
    if model.config.input_dim != data.input_dim() {
        return Err(CliError::Usage(format!(
            "checkpoint expects {}-dimensional inputs, dataset has {}",
            model.config.input_dim,
            data.input_dim()
        )));
    }
    let split: Split = config.get("split")?;
    let episodes: usize = config.get("episodes")?;
    let repeats: usize = config.get("repeats")?;
    if episodes < 2 || repeats == 0 {
        return Err(CliError::Usage("episodes must be at least 2 and repeats at least 1".into()));
    }
    let spec = EpisodeSpec {
        query_mode: config.get("query_mode")?,
        ..EpisodeSpec::new(config.get("way")?, config.get("shot")?, config.get("queries")?, split)
    };
    let modes: Vec<PredictMode> = config.list("samples")?;
    let seed: u64 = config.get("seed")?;
    let dir = PathBuf::from(config.raw("out_dir"));
    ensure_dir(&dir)?;

    let mut rows = Vec::new();
    let mut curve = Vec::new();
    let mut mean_level = None;
    for mode in modes {
        let r = if mode == PredictMode::Mean { 1 } else { repeats };
        let summaries = (0..r as u64)
            .map(|k| evaluate(&model, &data, &spec, episodes, mode, seed + k))
            .collect::<Result<Vec<_>, _>>()?;
        let means: Vec<f64> = summaries.iter().map(|s| s.mean).collect();
        let acc = means.iter().sum::<f64>() / r as f64;
        let ci = summaries.iter().map(|s| s.ci95).sum::<f64>() / r as f64;
        let se = if r > 1 {
            (means.iter().map(|m| (m - acc).powi(2)).sum::<f64>() / (r - 1) as f64 / r as f64).sqrt()
        } else {
            0.0
        };
        println!("L={mode:<5} accuracy={acc:.4} ci95={ci:.4} repeat_se={se:.5}");
        rows.push(vec![
            split.to_string(),
            episodes.to_string(),
            spec.way.to_string(),
            spec.shot.to_string(),
            mode.to_string(),
            r.to_string(),
            acc.to_string(),
            ci.to_string(),
            se.to_string(),
        ]);
        match mode {
            PredictMode::Mean => mean_level = Some(acc),
            PredictMode::Samples(l) => curve.push((l as f64, acc)),
        }
    }
    let mut outputs = vec![write_csv(&dir, &EVAL_CSV, &rows)?];
    let chart = LineChart {
        title: "Accuracy against prediction samples",
        x_label: "samples L",
        y_label: "mean accuracy",
        log_x: true,
        log_y: false,
        series: vec![("sampled".into(), curve)],
        levels: mean_level.map(|m| ("mean classifier".to_string(), m)).into_iter().collect(),
    };
    outputs.push(write_text(&dir, "eval.svg", &chart.render())?);
    Manifest { command: "eval", config, started, outputs }.write(&dir)?;
    Ok(())
}

pub fn collapse(config: &Config) -> Result<(), CliError> {
    let started = now();
    let beta: Beta = config.get("beta")?;
    let below: f64 = config.get("collapse_below")?;
    let above: f64 = config.get("healthy_above")?;
    let runs = [
        training(config, TrainObjective::Mc, beta)?,
        training(config, TrainObjective::Elbo, beta)?,
    ];
    let every = runs[0].log_every;
    let data = dataset(config)?;
    let dir = PathBuf::from(config.raw("out_dir"));
    ensure_dir(&dir)?;

    let mut rows = Vec::new();
    let mut traces = Vec::new();
    for cfg in &runs {
        let run = train_fewshot(cfg, &data)?;
        let trace: Vec<(f64, f64)> = run
            .history
            .iter()
            .filter(|r| r.episode % every == 0)
            .map(|r| (r.episode as f64, r.max_prior_variance))
            .collect();
        for &(e, v) in &trace {
            rows.push(vec![cfg.objective.to_string(), e.to_string(), v.to_string()]);
        }
        traces.push((cfg.objective.to_string(), trace));
    }
    let lowest = |t: &[(f64, f64)]| t.iter().map(|p| p.1).fold(f64::INFINITY, f64::min);
    let mc_min = lowest(&traces[0].1);
    let elbo_min = lowest(&traces[1].1);
    let first_cross = traces[0].1.iter().find(|p| p.1 < below).map(|p| p.0);

    let mut outputs = vec![write_csv(&dir, &COLLAPSE_CSV, &rows)?];
    let chart = LineChart {
        title: "Largest prior variance during training",
        x_label: "episode",
        y_label: "max prior variance",
        log_x: false,
        log_y: true,
        series: traces,
        levels: vec![("collapsed".into(), below), ("healthy".into(), above)],
    };
    outputs.push(write_text(&dir, "collapse.svg", &chart.render())?);
    Manifest { command: "collapse", config, started, outputs }.write(&dir)?;

    println!(
        "mc: min {mc_min:.3e}, first below {below:e} at episode {}",
        first_cross.map_or("-".into(), |e| e.to_string())
    );
    println!("elbo: min {elbo_min:.3e}");
    let collapsed = mc_min < below;
    let healthy = elbo_min >= above;
    if collapsed && healthy {
        Ok(())
    } else {
        Err(CliError::Gate(format!(
            "mc min {mc_min:.3e} (needs < {below:e}), elbo min {elbo_min:.3e} (needs ≥ {above:e})"
        )))
    }
}
