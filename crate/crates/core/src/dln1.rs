//! One-layer networks: inference, prompt proposals, selection and training.

use rand::seq::index::sample;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::{is_match, Example, SplitDataset};
use crate::hyper::{BackwardTemplates, Hyper};
use crate::layer::{GenerationLimits, LayerStack};
use crate::lm::{GenerationRequest, LanguageModel};
use crate::math::derive_seed;
use crate::prompt::Prompt;
use crate::scoring::weighted_logprob_sum;
use crate::template::{BackwardInfo, Binding, MessageSelector, Template};
use crate::train::{
    self, candidate_pool, fixed_update, layer_update, select_best, split_halves, stream, Selection, StepError,
    StepInput, StepRecord, TrainError, TrainState,
};

/// Temperature-0 answer for `x` under `prompt` with the classification
/// template.
pub fn infer<L: LanguageModel + ?Sized>(
    x: &str,
    prompt: &Prompt,
    lm: &L,
    limits: &GenerationLimits,
) -> Result<String, StepError> {
    let mut stack = LayerStack::single("");
    stack.set_prompt(0, prompt.clone());
    Ok(stack.forward(x, lm, limits)?.y_hat)
}

/// Settings for sampling prompt proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct ProposalSettings {
    pub n: usize,
    pub temperature: f64,
    pub max_units: usize,
    pub stop: Vec<String>,
    pub iteration: usize,
}

impl ProposalSettings {
    pub fn from_hyper(hyper: &Hyper, iteration: usize) -> Self {
        Self {
            n: hyper.num_prompts,
            temperature: hyper.proposal_temperature,
            max_units: hyper.limits.max_prompt_units,
            stop: hyper.limits.prompt_stop.clone(),
            iteration,
        }
    }
}

/// Renders the proposal context for one sample: a random message
/// alternative and a random half of the examples, in batch order.
pub fn proposal_context(
    current: &str,
    batch: &[BackwardInfo],
    template: &Template,
    rng: &mut dyn RngCore,
) -> Result<String, StepError> {
    let message = if template.uses_message() {
        rng.gen_range(0..template.message_alternatives().len())
    } else {
        0
    };
    let k = batch.len().div_ceil(2).max(1).min(batch.len());
    let mut picked = sample(rng, batch.len(), k).into_vec();
    picked.sort_unstable();
    let subset: Vec<BackwardInfo> = picked.iter().map(|&i| batch[i].clone()).collect();
    let binding = Binding::new()
        .set("prompt", current)
        .list("backward_infos", subset);
    Ok(template.render(&binding, MessageSelector::Fixed(message))?.text)
}

/// Samples `settings.n` candidate prompts and appends the current one.
/// Empty proposals are dropped.
pub fn propose<L: LanguageModel + ?Sized>(
    current: &Prompt,
    batch: &[BackwardInfo],
    lm: &L,
    template: &Template,
    settings: &ProposalSettings,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Prompt>, StepError> {
    if batch.is_empty() {
        return Err(StepError::Invalid("cannot propose prompts from an empty batch".into()));
    }
    if settings.n == 0 {
        return Err(StepError::Invalid("need at least one proposal".into()));
    }
    let mut requests = Vec::with_capacity(settings.n);
    for _ in 0..settings.n {
        let ctx = proposal_context(&current.text, batch, template, rng)?;
        let seed = rng.next_u64();
        requests.push(
            GenerationRequest::sampled(ctx, settings.temperature, 1, settings.max_units, seed)
                .with_stop(&settings.stop),
        );
    }
    let outputs = lm.batch_generate(&requests)?;
    let mut out: Vec<Prompt> = outputs
        .into_iter()
        .filter_map(|mut o| {
            let text = o.swap_remove(0).trim().to_string();
            (!text.is_empty()).then(|| Prompt::proposed(text, settings.iteration))
        })
        .collect();
    out.push(current.clone());
    Ok(out)
}

/// `Σ normalized log p(y | T(x, prompt))` over the batch.
pub fn batch_score<L: LanguageModel + ?Sized>(
    prompt: &str,
    batch: &[Example],
    lm: &L,
    forward_template: &Template,
) -> Result<f64, StepError> {
    let terms = batch
        .iter()
        .map(|e| {
            let ctx = forward_template.render_fixed(&Binding::new().set("prompt", prompt).set("input", &e.input))?;
            Ok((ctx, e.target.clone(), 1.0))
        })
        .collect::<Result<Vec<_>, StepError>>()?;
    Ok(weighted_logprob_sum(lm, &terms)?)
}

/// Picks the candidate with the best batch score. `incumbent` indexes the
/// current prompt in `candidates` and wins ties.
pub fn select<L: LanguageModel + ?Sized>(
    candidates: &[Prompt],
    incumbent: usize,
    batch: &[Example],
    lm: &L,
    forward_template: &Template,
) -> Result<Selection, StepError> {
    select_best(candidates, incumbent, |p| batch_score(p, batch, lm, forward_template))
}

/// One step of prompt search on a single-layer stack.
pub fn train_step<L: LanguageModel + ?Sized>(
    stack: &LayerStack,
    input: &StepInput<'_>,
    hyper: &Hyper,
    templates: &BackwardTemplates,
    lm: &L,
) -> Result<(Vec<Prompt>, StepRecord), StepError> {
    if input.batch.is_empty() {
        return Err(StepError::Invalid("empty minibatch".into()));
    }
    let i = input.iteration;
    let (proposal_half, scoring_half) = if hyper.held_out_prompt_ranking && input.batch.len() >= 2 {
        split_halves(input.batch, derive_seed(input.seed, &[i as u64, stream::SPLIT]))
    } else {
        (input.batch.to_vec(), input.batch.to_vec())
    };
    let xs: Vec<&str> = proposal_half.iter().map(|e| e.input.as_str()).collect();
    let passes = stack.forward_batch(&xs, lm, &hyper.limits)?;
    let infos: Vec<BackwardInfo> = proposal_half
        .iter()
        .zip(&passes)
        .map(|(e, p)| BackwardInfo::new(e.input.clone(), p.y_hat.clone(), e.target.clone()))
        .collect();
    let hits = infos.iter().filter(|b| is_match(&b.output, &b.target)).count();

    let current = &stack.layer(0).prompt;
    if hyper.is_fixed(0) {
        let record = StepRecord {
            iteration: i + 1,
            lambda: input.lambda,
            batch_accuracy: hits as f64 / infos.len() as f64,
            layers: vec![fixed_update(current)],
        };
        return Ok((vec![current.clone()], record));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(input.seed, &[i as u64, stream::PROPOSE, 0]));
    let mut proposals = propose(
        current,
        &infos,
        lm,
        &templates.prompt_proposal,
        &ProposalSettings::from_hyper(hyper, i + 1),
        &mut rng,
    )?;
    proposals.pop();
    let (pool, incumbent) = candidate_pool(proposals, input.memory, 0, hyper.use_memory, current);
    let sel = select(&pool, incumbent, &scoring_half, lm, &stack.layer(0).template)?;
    let record = StepRecord {
        iteration: i + 1,
        lambda: input.lambda,
        batch_accuracy: hits as f64 / infos.len() as f64,
        layers: vec![layer_update(&pool, &sel)],
    };
    Ok((vec![pool[sel.index].clone()], record))
}

/// Trains a single-layer stack in place.
pub fn train<L: LanguageModel + ?Sized>(
    data: &SplitDataset,
    stack: &mut LayerStack,
    hyper: &Hyper,
    templates: &BackwardTemplates,
    lm: &L,
    seed: u64,
    observer: &mut dyn FnMut(&TrainState),
) -> Result<TrainState, TrainError> {
    if stack.depth() != 1 {
        return Err(TrainError::Config(crate::hyper::HyperError {
            field: "layers",
            message: format!("one-layer training needs one layer, got {}", stack.depth()),
        }));
    }
    let mut step = |s: &LayerStack, input: &StepInput<'_>| train_step(s, input, hyper, templates, lm);
    train::run(data, stack, hyper, lm, seed, &mut step, observer)
}
