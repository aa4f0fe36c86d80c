//! Stacks of language layers and the temperature-0 forward pass.

use crate::lm::{GenerationRequest, LanguageModel, LmError};
use crate::prompt::Prompt;
use crate::template::{Binding, ShippedTemplate, Template, TemplateError};

#[derive(Debug, thiserror::Error)]
pub enum LayerError {
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error("a layer stack needs at least one layer")]
    Empty,
}

/// One language layer: a prompt and the template that combines it with the
/// layer's input.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub prompt: Prompt,
    pub template: Template,
    /// Residual layers see the network input `x` next to the previous
    /// layer's output, bound as `{{ input }}` and `{{ h }}`. Other layers see
    /// only the previous output, bound as `{{ input }}`.
    pub residual: bool,
}

impl Layer {
    pub fn new(prompt: Prompt, template: Template, residual: bool) -> Self {
        Self {
            prompt,
            template,
            residual,
        }
    }

    /// Context for this layer under `prompt`, given the network input and
    /// the previous layer's output (`x` itself for the first layer).
    pub fn context(&self, prompt: &str, x: &str, prev: &str) -> Result<String, TemplateError> {
        let binding = if self.residual {
            Binding::new().set("prompt", prompt).set("input", x).set("h", prev)
        } else {
            Binding::new().set("prompt", prompt).set("input", prev)
        };
        self.template.render_fixed(&binding)
    }
}

/// Output lengths and stop sequences used by the forward pass and proposals.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct GenerationLimits {
    pub max_output_units: usize,
    pub max_hidden_units: usize,
    pub max_prompt_units: usize,
    pub output_stop: Vec<String>,
    pub prompt_stop: Vec<String>,
}

impl Default for GenerationLimits {
    fn default() -> Self {
        Self {
            max_output_units: 32,
            max_hidden_units: 256,
            max_prompt_units: 256,
            output_stop: vec!["\n\n".into()],
            prompt_stop: vec!["[END]".into(), "\n#".into()],
        }
    }
}

impl GenerationLimits {
    fn request(&self, context: String, last: bool) -> GenerationRequest {
        if last {
            GenerationRequest::greedy(context, self.max_output_units).with_stop(&self.output_stop)
        } else {
            GenerationRequest::greedy(context, self.max_hidden_units)
        }
    }
}

/// Ordered layers; the last one produces the answer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerStack {
    layers: Vec<Layer>,
}

/// Per-example result of a forward pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForwardPass {
    /// Outputs of every layer but the last.
    pub hiddens: Vec<String>,
    pub y_hat: String,
}

impl LayerStack {
    pub fn new(layers: Vec<Layer>) -> Result<Self, LayerError> {
        if layers.is_empty() {
            return Err(LayerError::Empty);
        }
        Ok(Self { layers })
    }

    /// One classification layer.
    pub fn single(prompt: impl Into<String>) -> Self {
        Self {
            layers: vec![Layer::new(
                Prompt::init(prompt),
                ShippedTemplate::Classify.load(),
                false,
            )],
        }
    }

    /// Hidden step-by-step layer followed by the residual output layer.
    pub fn two_layer(hidden_prompt: impl Into<String>, output_prompt: impl Into<String>) -> Self {
        Self {
            layers: vec![
                Layer::new(
                    Prompt::init(hidden_prompt),
                    ShippedTemplate::HiddenStepByStep.load(),
                    false,
                ),
                Layer::new(Prompt::init(output_prompt), ShippedTemplate::Residual.load(), true),
            ],
        }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer(&self, l: usize) -> &Layer {
        &self.layers[l]
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn prompts(&self) -> Vec<Prompt> {
        self.layers.iter().map(|l| l.prompt.clone()).collect()
    }

    pub fn prompt_texts(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.prompt.text.clone()).collect()
    }

    pub fn set_prompt(&mut self, l: usize, prompt: Prompt) {
        self.layers[l].prompt = prompt;
    }

    /// Replaces every layer's prompt. `prompts` must have one entry per layer.
    pub fn set_prompts(&mut self, prompts: &[Prompt]) {
        assert_eq!(prompts.len(), self.layers.len(), "one prompt per layer");
        for (layer, p) in self.layers.iter_mut().zip(prompts) {
            layer.prompt = p.clone();
        }
    }

    /// Context for layer `l` under its current prompt.
    pub fn context(&self, l: usize, x: &str, prev: &str) -> Result<String, TemplateError> {
        self.layers[l].context(&self.layers[l].prompt.text, x, prev)
    }

    /// Temperature-0 pass over a batch of inputs, one layer at a time.
    pub fn forward_batch<L: LanguageModel + ?Sized>(
        &self,
        xs: &[&str],
        lm: &L,
        limits: &GenerationLimits,
    ) -> Result<Vec<ForwardPass>, LayerError> {
        if xs.is_empty() {
            return Ok(Vec::new());
        }
        let mut prev: Vec<String> = xs.iter().map(|x| x.to_string()).collect();
        let mut hiddens: Vec<Vec<String>> = vec![Vec::new(); xs.len()];
        for l in 0..self.depth() {
            let last = l + 1 == self.depth();
            let requests = xs
                .iter()
                .zip(&prev)
                .map(|(x, p)| Ok(limits.request(self.context(l, x, p)?, last)))
                .collect::<Result<Vec<_>, TemplateError>>()?;
            let outs = lm.batch_generate(&requests)?;
            prev = outs
                .into_iter()
                .map(|mut o| o.swap_remove(0).trim().to_string())
                .collect();
            if !last {
                for (h, p) in hiddens.iter_mut().zip(&prev) {
                    h.push(p.clone());
                }
            }
        }
        Ok(hiddens
            .into_iter()
            .zip(prev)
            .map(|(hiddens, y_hat)| ForwardPass { hiddens, y_hat })
            .collect())
    }

    pub fn forward<L: LanguageModel + ?Sized>(
        &self,
        x: &str,
        lm: &L,
        limits: &GenerationLimits,
    ) -> Result<ForwardPass, LayerError> {
        Ok(self.forward_batch(&[x], lm, limits)?.remove(0))
    }
}
