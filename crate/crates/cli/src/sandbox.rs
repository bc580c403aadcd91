use std::path::PathBuf;

use samovar_core::sandbox::{fresh_tasks, train_sandbox, variance_ratio, Objective, SandboxConfig};
use samovar_core::Error;

use crate::config::{Config, KeySpec};
use crate::output::{ensure_dir, now, write_csv, write_text, Manifest, SANDBOX_CSV};
use crate::svg::bar_chart;
use crate::CliError;

pub fn keys() -> Vec<KeySpec> {
    vec![
        ("sigma_y", Some("0.1,0.5,1.0"), "observation noise; a list runs a sweep"),
        ("objective", Some("exact,variational,mc"), "training objectives to sweep"),
        ("samples", Some("1,10,100,1000"), "sample counts L for mc and variational; exact runs once"),
        ("num_tasks", Some("250"), "training tasks T"),
        ("support_size", Some("5"), "support observations K"),
        ("query_size", Some("15"), "query observations M"),
        ("steps", Some("10000"), "full-batch optimizer steps"),
        ("lr", Some("0.05"), "initial learning rate"),
        ("eval_tasks", Some("200"), "fresh tasks for the variance ratio"),
        ("seed", Some("0"), "run seed"),
        ("out_dir", Some("samovar-out/sandbox"), "output directory"),
    ]
}

/// One cell of the sweep.
fn cells(config: &Config) -> Result<Vec<SandboxConfig>, CliError> {
    let base = SandboxConfig {
        num_tasks: config.get("num_tasks")?,
        support_size: config.get("support_size")?,
        query_size: config.get("query_size")?,
        steps: config.get("steps")?,
        lr: config.get("lr")?,
        seed: config.get("seed")?,
        ..Default::default()
    };
    let samples: Vec<usize> = config.list("samples")?;
    let mut out = Vec::new();
    for sigma_y in config.list::<f64>("sigma_y")? {
        for objective in config.list::<Objective>("objective")? {
            let ls: &[usize] = if objective == Objective::Exact { &[1] } else { &samples };
            for &num_samples in ls {
                let cell = SandboxConfig { sigma_y, objective, num_samples, ..base.clone() };
                cell.validate()?;
                if !out.contains(&cell) {
                    out.push(cell);
                }
            }
        }
    }
    Ok(out)
}

fn label(c: &SandboxConfig) -> String {
    match c.objective {
        Objective::Exact => "exact".into(),
        o => format!("{o} L={}", c.num_samples),
    }
}

pub fn run(config: &Config) -> Result<(), CliError> {
    let started = now();
    let cells = cells(config)?;
    let eval_tasks: usize = config.get("eval_tasks")?;
    if eval_tasks < 2 {
        return Err(CliError::Usage("eval_tasks must be at least 2".into()));
    }
    let dir = PathBuf::from(config.raw("out_dir"));
    ensure_dir(&dir)?;

    let mut rows = Vec::new();
    let mut results: Vec<(SandboxConfig, f64)> = Vec::new();
    let mut failures = Vec::new();
    for cell in &cells {
        let t0 = std::time::Instant::now();
        let mut row = vec![
            cell.sigma_y.to_string(),
            cell.objective.to_string(),
            cell.num_samples.to_string(),
            cell.seed.to_string(),
        ];
        match train_sandbox(cell) {
            Ok(run) => {
                let (ratios, mean) = variance_ratio(&run.prior, &fresh_tasks(cell, eval_tasks), cell.sigma_y)?;
                let var = ratios.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (ratios.len() - 1) as f64;
                let last = *run.history.last().expect("at least one step");
                row.extend([run.history.len().to_string(), last.to_string(), mean.to_string(), var.sqrt().to_string()]);
                println!(
                    "sigma_y={} {:<18} mean_ratio={mean:.4} sd={:.4} ({:.1}s)",
                    cell.sigma_y,
                    label(cell),
                    var.sqrt(),
                    t0.elapsed().as_secs_f64()
                );
                results.push((cell.clone(), mean));
            }
            Err(Error::Numerical(msg)) => {
                eprintln!("sigma_y={} {}: {msg}", cell.sigma_y, label(cell));
                row.extend(["0".into(), "NaN".into(), "NaN".into(), "NaN".into()]);
                failures.push(msg);
            }
            Err(e) => return Err(e.into()),
        }
        rows.push(row);
    }

    let mut outputs = vec![write_csv(&dir, &SANDBOX_CSV, &rows)?];
    let mut groups: Vec<f64> = Vec::new();
    let mut series: Vec<String> = Vec::new();
    for c in &cells {
        if !groups.contains(&c.sigma_y) {
            groups.push(c.sigma_y);
        }
        if !series.contains(&label(c)) {
            series.push(label(c));
        }
    }
    let bars: Vec<(String, Vec<f64>)> = series
        .iter()
        .map(|s| {
            let vals = groups
                .iter()
                .map(|g| {
                    results
                        .iter()
                        .find(|(c, _)| c.sigma_y == *g && label(c) == *s)
                        .map_or(f64::NAN, |r| r.1)
                })
                .collect();
            (s.clone(), vals)
        })
        .collect();
    let names: Vec<String> = groups.iter().map(|g| format!("σ_y = {g}")).collect();
    let figure = bar_chart("Predicted / true posterior variance", "mean variance ratio", &names, &bars, Some(1.0));
    outputs.push(write_text(&dir, "sandbox.svg", &figure)?);
    Manifest { command: "sandbox", config, started, outputs }.write(&dir)?;

    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("{} cell(s) diverged: {}", failures.len(), failures.join("; "))))
    }
}
