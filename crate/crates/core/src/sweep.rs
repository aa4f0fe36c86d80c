//! Hyperparameter grids: named value lists over [`Hyper`] fields, expanded
//! into their Cartesian product.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::hyper::Hyper;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("grid is empty")]
    Empty,
    #[error("grid field `{0}` has no values")]
    NoValues(String),
    #[error("setting {overrides}: {source}")]
    Invalid {
        overrides: String,
        #[source]
        source: serde_json::Error,
    },
}

/// Field name to candidate values. Values use the serialized form of
/// [`Hyper`] (`bh_tpl = "q_action_prompt:v3.0"`, `held_out_prompt_ranking =
/// true`, ...).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Grid(pub BTreeMap<String, Vec<Value>>);

impl Grid {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, field: &str, values: impl IntoIterator<Item = impl Into<Value>>) -> Self {
        self.0.insert(field.to_string(), values.into_iter().map(Into::into).collect());
        self
    }

    /// Number of settings in the product.
    pub fn size(&self) -> usize {
        if self.0.is_empty() {
            0
        } else {
            self.0.values().map(Vec::len).product()
        }
    }

    /// Every combination applied on top of `base`, last field varying
    /// fastest.
    pub fn expand(&self, base: &Hyper) -> Result<Vec<Setting>, SweepError> {
        if self.0.is_empty() {
            return Err(SweepError::Empty);
        }
        if let Some((k, _)) = self.0.iter().find(|(_, v)| v.is_empty()) {
            return Err(SweepError::NoValues(k.clone()));
        }
        let base_value = serde_json::to_value(base).expect("hyperparameters serialize");
        let mut combos: Vec<BTreeMap<String, Value>> = vec![BTreeMap::new()];
        for (field, values) in &self.0 {
            combos = combos
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.insert(field.clone(), v.clone());
                        c
                    })
                })
                .collect();
        }
        combos
            .into_iter()
            .map(|overrides| {
                let mut merged = base_value.clone();
                for (k, v) in &overrides {
                    merged[k.as_str()] = v.clone();
                }
                let hyper = serde_json::from_value(merged).map_err(|source| SweepError::Invalid {
                    overrides: Value::from(serde_json::Map::from_iter(overrides.clone())).to_string(),
                    source,
                })?;
                Ok(Setting { overrides, hyper })
            })
            .collect()
    }
}

/// One point of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Setting {
    pub overrides: BTreeMap<String, Value>,
    pub hyper: Hyper,
}

impl Setting {
    /// `field=value` pairs joined by commas, e.g. `bh_tpl=q_action_prompt:v3.0,tolerance=-1`.
    pub fn label(&self) -> String {
        self.overrides
            .iter()
            .map(|(k, v)| match v {
                Value::String(s) => format!("{k}={s}"),
                other => format!("{k}={other}"),
            })
            .collect::<Vec<_>>()
            .join(",")
    }
}

/// Grids used for the published one- and two-layer experiments, with the base
/// settings each one starts from.
pub mod presets {
    use super::*;

    const TEMPLATES: [&str; 2] = ["q_action_prompt:v3.0", "q_action_prompt:v3.5"];

    pub fn one_layer() -> Grid {
        Grid::new()
            .with("bh_tpl", TEMPLATES)
            .with("tolerance", [-1, 0, 2])
            .with("use_memory", [0, 2])
            .with("held_out_prompt_ranking", [true, false])
    }

    /// Two layers with the output prompt held at its initial value.
    pub fn two_layer_fixed_output() -> (Hyper, Grid) {
        let base = Hyper {
            fixed_layers: vec![1],
            ..Hyper::default()
        };
        (base, Grid::new().with("bh_tpl", TEMPLATES).with("logp_penalty", [0.0, 0.5, 2.0]))
    }

    /// Two layers, both prompts trained.
    pub fn two_layer_fine_tune() -> (Hyper, Grid) {
        (Hyper::default(), Grid::new().with("bh_tpl", TEMPLATES).with("logp_penalty", [0.0, 0.5, 2.0]))
    }

    pub fn two_layer_end_to_end() -> (Hyper, Grid) {
        (Hyper::default(), Grid::new().with("num_h_samples", [5, 10]))
    }
}
