use std::path::{Path, PathBuf};

use dln::layer::Layer;
use dln::lm::{CompletionsClient, HttpConfig, LanguageModel};
use dln::sweep::Grid;
use dln::{init, Hyper, LayerStack, Prompt, ShippedTemplate, SplitDataset, SplitSpec, ToyLm, ToyLmConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    /// Currency units per thousand prompt plus completion units.
    #[serde(default = "default_price")]
    pub price_per_1k: f64,
    pub task: TaskConfig,
    pub backend: BackendConfig,
    #[serde(default)]
    pub architecture: ArchitectureConfig,
    #[serde(default)]
    pub hyper: Hyper,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<Grid>,
}

fn default_seeds() -> Vec<u64> {
    vec![1, 2, 3]
}

fn default_price() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// Looked up in the task table for initial prompts and split sizes.
    pub name: String,
    /// JSONL file of `{id?, input, target}` records. Relative paths resolve
    /// against the config file's directory.
    pub path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
    /// Seed of the train/valid/test shuffle, shared by every run seed.
    #[serde(default)]
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum BackendConfig {
    Toy(ToyLmConfig),
    Http(HttpConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub depth: usize,
    /// Initial prompts, first layer first. Empty means the task defaults.
    pub prompts: Vec<String>,
    /// Template of every layer below the output layer.
    pub hidden_template: ShippedTemplate,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        Self {
            depth: 1,
            prompts: Vec::new(),
            hidden_template: ShippedTemplate::HiddenStepByStep,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if cfg.task.path.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.task.path = dir.join(&cfg.task.path);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes to TOML")
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.seeds.is_empty() {
            return bad("seeds: need at least one seed".into());
        }
        if !(self.price_per_1k.is_finite() && self.price_per_1k >= 0.0) {
            return bad("price_per_1k: must be finite and non-negative".into());
        }
        let a = &self.architecture;
        if a.depth == 0 {
            return bad("architecture.depth: must be at least 1".into());
        }
        if !a.prompts.is_empty() && a.prompts.len() != a.depth {
            return bad(format!(
                "architecture.prompts: {} prompts for {} layers",
                a.prompts.len(),
                a.depth
            ));
        }
        if !matches!(
            a.hidden_template,
            ShippedTemplate::HiddenStepByStep | ShippedTemplate::HiddenBriefAnalysis
        ) {
            return bad("architecture.hidden_template: use hidden_step_by_step or hidden_brief_analysis".into());
        }
        self.hyper
            .validate(a.depth)
            .map_err(|e| CliError::Config(format!("hyper: {e}")))?;
        if let Some(grid) = &self.sweep {
            for setting in grid.expand(&self.hyper).map_err(|e| CliError::Config(format!("sweep: {e}")))? {
                setting
                    .hyper
                    .validate(a.depth)
                    .map_err(|e| CliError::Config(format!("sweep setting {}: {e}", setting.label())))?;
            }
        }
        Ok(())
    }

    pub fn split_spec(&self) -> Result<SplitSpec, CliError> {
        self.task
            .split
            .or_else(|| init::task(&self.task.name).map(|t| t.split))
            .ok_or_else(|| {
                CliError::Config(format!(
                    "task.split: required for {:?}, which is not in the task table",
                    self.task.name
                ))
            })
    }

    pub fn load_data(&self) -> Result<SplitDataset, CliError> {
        let mut data = SplitDataset::load(&self.task.path, self.split_spec()?, self.task.split_seed)?;
        data.task_name = self.task.name.clone();
        Ok(data)
    }

    pub fn backend(&self) -> Result<Box<dyn LanguageModel>, CliError> {
        match &self.backend {
            BackendConfig::Toy(c) => Ok(Box::new(ToyLm::new(c.clone()).map_err(|e| CliError::Config(e.to_string()))?)),
            BackendConfig::Http(c) => Ok(Box::new(
                CompletionsClient::new(c.clone()).map_err(|e| CliError::Backend(e.to_string()))?,
            )),
        }
    }

    pub fn initial_prompts(&self) -> Vec<String> {
        let a = &self.architecture;
        if !a.prompts.is_empty() {
            return a.prompts.clone();
        }
        let info = init::task(&self.task.name);
        let hidden = info.and_then(|t| t.hidden_init).unwrap_or("");
        let output = info.map(|t| t.init_prompt).unwrap_or("");
        let mut prompts = vec![hidden.to_string(); a.depth - 1];
        prompts.push(output.to_string());
        prompts
    }

    /// Stack with the given prompts, one per layer.
    pub fn stack(&self, prompts: &[String]) -> Result<LayerStack, CliError> {
        let depth = self.architecture.depth;
        if prompts.len() != depth {
            return Err(CliError::Config(format!("{} prompts for {depth} layers", prompts.len())));
        }
        if depth == 1 {
            return Ok(LayerStack::single(prompts[0].clone()));
        }
        let mut layers: Vec<Layer> = prompts[..depth - 1]
            .iter()
            .map(|p| Layer::new(Prompt::init(p.clone()), self.architecture.hidden_template.load(), false))
            .collect();
        layers.push(Layer::new(
            Prompt::init(prompts[depth - 1].clone()),
            ShippedTemplate::Residual.load(),
            true,
        ));
        LayerStack::new(layers).map_err(|e| CliError::Config(e.to_string()))
    }
}
