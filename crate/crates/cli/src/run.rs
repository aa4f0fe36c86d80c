use std::fs;
use std::path::{Path, PathBuf};

use dln::eval::{evaluate_report, EvalReport, Split};
use dln::lm::{LanguageModel, LedgerReport};
use dln::{dln1, dln2, BackwardTemplates, Hyper, SplitDataset, TrainError, TrainState};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::config::RunConfig;
use crate::error::CliError;

/// Mean with a two-sided 95% t-interval over seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub std_dev: f64,
    /// Absent with a single seed.
    pub ci95: Option<f64>,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Self> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        if n == 1 {
            return Some(Self { n, mean, std_dev: 0.0, ci95: None });
        }
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let std_dev = var.sqrt();
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64)
            .expect("positive degrees of freedom")
            .inverse_cdf(0.975);
        Some(Self {
            n,
            mean,
            std_dev,
            ci95: Some(t * std_dev / (n as f64).sqrt()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub seed: u64,
    pub best_val_accuracy: f64,
    pub prompts: Vec<String>,
    /// Absent when the test split is empty.
    pub test: Option<EvalReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: String,
    pub depth: usize,
    pub seeds: Vec<SeedReport>,
    pub valid: Summary,
    pub test: Option<Summary>,
    pub ledger: LedgerReport,
}

pub fn write_json(path: &Path, value: &impl Serialize) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("report serializes");
    fs::write(path, text + "\n").map_err(|e| CliError::io(path, e))
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

pub fn seed_dir(run: &Path, seed: u64) -> PathBuf {
    run.join(format!("seed-{seed}"))
}

fn train_once(
    cfg: &RunConfig,
    data: &SplitDataset,
    lm: &dyn LanguageModel,
    seed: u64,
    dir: &Path,
) -> Result<SeedReport, CliError> {
    create_dir(dir)?;
    let hyper = &cfg.hyper;
    let templates = BackwardTemplates::shipped(hyper).map_err(|e| CliError::Config(e.to_string()))?;
    let mut stack = cfg.stack(&cfg.initial_prompts())?;
    let mut save_error = None;
    let mut observer = |s: &TrainState| {
        let path = dir.join(format!("checkpoint-{:03}.json", s.iteration));
        if let Err(e) = s.save(&path) {
            save_error.get_or_insert(CliError::io(&path, e));
        }
        if let Some(last) = s.history.last() {
            info!("seed {seed} iteration {}: val {:.4} (best {:.4})", s.iteration, last.val_accuracy, last.best_val_accuracy);
        }
    };
    let result = match cfg.architecture.depth {
        1 => dln1::train(data, &mut stack, hyper, &templates, lm, seed, &mut observer),
        2 => dln2::train(data, &mut stack, hyper, &templates, lm, seed, &mut observer),
        _ => dln2::train_multi(data, &mut stack, hyper, &templates, lm, seed, &mut observer),
    };
    let state = match result {
        Ok(s) => s,
        Err(TrainError::Aborted { state, source }) => {
            let path = dir.join("aborted.json");
            state.save(&path).map_err(|e| CliError::io(&path, e))?;
            warn!("seed {seed} stopped; state written to {}", path.display());
            return Err(TrainError::Aborted { state, source }.into());
        }
        Err(e) => return Err(e.into()),
    };
    if let Some(e) = save_error {
        return Err(e);
    }
    let path = dir.join("final.json");
    state.save(&path).map_err(|e| CliError::io(&path, e))?;

    stack.set_prompts(&state.best_prompts);
    let test = if data.test.is_empty() {
        None
    } else {
        Some(evaluate_report(&stack, data, Split::Test, lm, &hyper.limits, seed)?)
    };
    let report = SeedReport {
        seed,
        best_val_accuracy: state.best_val_accuracy.unwrap_or(0.0),
        prompts: stack.prompt_texts(),
        test,
    };
    write_json(&dir.join("report.json"), &report)?;
    Ok(report)
}

/// Trains once per configured seed into `out` and writes the aggregate.
pub fn train(cfg: &RunConfig, out: &Path) -> Result<RunReport, CliError> {
    let data = cfg.load_data()?;
    let lm = cfg.backend()?;
    train_with(cfg, &data, lm.as_ref(), out)
}

fn train_with(cfg: &RunConfig, data: &SplitDataset, lm: &dyn LanguageModel, out: &Path) -> Result<RunReport, CliError> {
    create_dir(out)?;
    let stored = RunConfig { sweep: None, ..cfg.clone() };
    let path = out.join("config.toml");
    fs::write(&path, stored.to_toml()).map_err(|e| CliError::io(&path, e))?;
    let before = lm.ledger();
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        info!("training seed {seed} into {}", out.display());
        seeds.push(train_once(cfg, data, lm, seed, &seed_dir(out, seed))?);
    }
    let ledger = lm.ledger().since(&before).report(cfg.price_per_1k);
    write_json(&out.join("ledger.json"), &ledger)?;
    let vals: Vec<f64> = seeds.iter().map(|s| s.best_val_accuracy).collect();
    let tests: Vec<f64> = seeds.iter().filter_map(|s| s.test.as_ref().map(|t| t.accuracy)).collect();
    let report = RunReport {
        task: data.task_name.clone(),
        depth: cfg.architecture.depth,
        valid: Summary::of(&vals).expect("at least one seed"),
        test: Summary::of(&tests),
        seeds,
        ledger,
    };
    write_json(&out.join("report.json"), &report)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SettingReport {
    pub label: String,
    pub dir: String,
    pub hyper: Hyper,
    pub valid: Summary,
    pub test: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub settings: Vec<SettingReport>,
    /// Index of the setting with the highest mean validation accuracy.
    pub selected: usize,
    pub selected_label: String,
    pub test: Option<Summary>,
    pub ledger: LedgerReport,
}

/// Runs every grid setting and picks one by mean validation accuracy.
pub fn sweep(cfg: &RunConfig, out: &Path) -> Result<SweepReport, CliError> {
    let grid = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| CliError::Config("sweep: the config has no [sweep] grid".into()))?;
    let settings = grid.expand(&cfg.hyper).map_err(|e| CliError::Config(format!("sweep: {e}")))?;
    let data = cfg.load_data()?;
    let lm = cfg.backend()?;
    create_dir(out)?;
    let path = out.join("config.toml");
    fs::write(&path, cfg.to_toml()).map_err(|e| CliError::io(&path, e))?;
    let before = lm.ledger();
    let mut reports = Vec::with_capacity(settings.len());
    for (i, setting) in settings.into_iter().enumerate() {
        let label = setting.label();
        let dir = format!("setting-{i:02}");
        info!("setting {i}: {label}");
        let run_cfg = RunConfig {
            hyper: setting.hyper.clone(),
            sweep: None,
            ..cfg.clone()
        };
        let r = train_with(&run_cfg, &data, lm.as_ref(), &out.join(&dir))?;
        reports.push(SettingReport {
            label,
            dir,
            hyper: setting.hyper,
            valid: r.valid,
            test: r.test,
        });
    }
    // First setting wins ties.
    let selected = reports
        .iter()
        .enumerate()
        .fold(0, |best, (i, r)| if r.valid.mean > reports[best].valid.mean { i } else { best });
    let report = SweepReport {
        selected,
        selected_label: reports[selected].label.clone(),
        test: reports[selected].test,
        settings: reports,
        ledger: lm.ledger().since(&before).report(cfg.price_per_1k),
    };
    write_json(&out.join("sweep.json"), &report)?;
    Ok(report)
}
