use std::fs;
use std::path::{Path, PathBuf};

use dln::lm::{LedgerReport, TokenLedger};
use dln::train::EvalRecord;
use dln::TrainState;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliError;
use crate::run::seed_dir;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedStatus {
    Finished,
    Aborted,
    /// Only intermediate checkpoints exist.
    Partial,
    Missing,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedCurve {
    pub seed: u64,
    pub status: SeedStatus,
    pub iterations: usize,
    pub best_val_accuracy: Option<f64>,
    pub best_prompts: Vec<String>,
    pub curve: Vec<EvalRecord>,
    pub ledger: LedgerReport,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub dir: String,
    pub price_per_1k: f64,
    /// Every backend call of the run, test evaluation included when the
    /// run finished.
    pub total: LedgerReport,
    pub seeds: Vec<SeedCurve>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub settings: Vec<CostReport>,
}

fn latest_checkpoint(dir: &Path) -> Option<PathBuf> {
    let mut found: Vec<PathBuf> = fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("checkpoint-") && n.ends_with(".json"))
        })
        .collect();
    found.sort();
    found.pop()
}

fn seed_state(dir: &Path) -> Result<(SeedStatus, Option<TrainState>), CliError> {
    let candidates = [
        (SeedStatus::Finished, Some(dir.join("final.json"))),
        (SeedStatus::Aborted, Some(dir.join("aborted.json"))),
        (SeedStatus::Partial, latest_checkpoint(dir)),
    ];
    for (status, path) in candidates {
        if let Some(path) = path.filter(|p| p.exists()) {
            let state = TrainState::load(&path).map_err(|e| CliError::io(&path, e))?;
            return Ok((status, Some(state)));
        }
    }
    Ok((SeedStatus::Missing, None))
}

fn read_ledger(path: &Path) -> Result<Option<LedgerReport>, CliError> {
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn to_ledger(r: &LedgerReport) -> TokenLedger {
    TokenLedger {
        prompt_units: r.prompt_units,
        completion_units: r.completion_units,
        call_count: r.call_count,
    }
}

/// Cost and validation curves of a run or sweep directory. `price`
/// overrides the configured unit price.
pub fn report(dir: &Path, price: Option<f64>) -> Result<CostReport, CliError> {
    let cfg = RunConfig::load(&dir.join("config.toml"))?;
    let price = price.unwrap_or(cfg.price_per_1k);
    if cfg.sweep.is_some() {
        let mut settings = Vec::new();
        let mut sub: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| CliError::io(dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir() && p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("setting-")))
            .collect();
        sub.sort();
        let mut total = TokenLedger::default();
        for s in sub {
            let r = report(&s, Some(price))?;
            total = add(&total, &to_ledger(&r.total));
            settings.push(r);
        }
        return Ok(CostReport {
            dir: dir.display().to_string(),
            price_per_1k: price,
            total: total.report(price),
            seeds: Vec::new(),
            settings,
        });
    }
    let mut seeds = Vec::with_capacity(cfg.seeds.len());
    let mut sum = TokenLedger::default();
    for &seed in &cfg.seeds {
        let (status, state) = seed_state(&seed_dir(dir, seed))?;
        let curve = match state {
            Some(s) => {
                sum = add(&sum, &s.ledger);
                SeedCurve {
                    seed,
                    status,
                    iterations: s.iteration,
                    best_val_accuracy: s.best_val_accuracy,
                    best_prompts: s.best_prompts.iter().map(|p| p.text.clone()).collect(),
                    curve: s.history,
                    ledger: s.ledger.report(price),
                }
            }
            None => SeedCurve {
                seed,
                status,
                iterations: 0,
                best_val_accuracy: None,
                best_prompts: Vec::new(),
                curve: Vec::new(),
                ledger: TokenLedger::default().report(price),
            },
        };
        seeds.push(curve);
    }
    let total = match read_ledger(&dir.join("ledger.json"))? {
        Some(r) => to_ledger(&r),
        None => sum,
    };
    Ok(CostReport {
        dir: dir.display().to_string(),
        price_per_1k: price,
        total: total.report(price),
        seeds,
        settings: Vec::new(),
    })
}

fn add(a: &TokenLedger, b: &TokenLedger) -> TokenLedger {
    TokenLedger {
        prompt_units: a.prompt_units + b.prompt_units,
        completion_units: a.completion_units + b.completion_units,
        call_count: a.call_count + b.call_count,
    }
}
