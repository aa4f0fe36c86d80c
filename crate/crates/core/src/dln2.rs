//! Multi-layer networks trained by variational inference over the hidden
//! strings between layers.
//!
//! [`train_step`] is the dedicated two-layer update. [`train_multi_step`]
//! handles any depth with a backward sweep over the layers; at depth 2 both
//! make the same selections when given the same seed.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::{is_match, Example, SplitDataset};
use crate::hyper::{BackwardTemplates, Hyper, HyperError, PosteriorConfig};
use crate::layer::{GenerationLimits, LayerStack};
use crate::lm::{GenerationRequest, LanguageModel};
use crate::math::derive_seed;
use crate::prompt::Prompt;
use crate::scoring::{
    exploration_reward, exploration_reward_contexts, prompt_score_first_layer,
    prompt_score_second_layer, weighted_logprob_sum, PosteriorSample, WeightedSampleSet,
};
use crate::template::{BackwardInfo, Binding, MessageSelector};
use crate::train::{
    self, candidate_pool, fixed_update, layer_update, select_best, split_halves, stream, StepError, StepInput,
    StepRecord, TrainError, TrainState,
};

pub use crate::layer::{ForwardPass, Layer};

/// Hidden proposal family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Pri,
    PriPlus,
    Edit,
}

const COMPONENTS: [Component; 3] = [Component::Pri, Component::PriPlus, Component::Edit];

/// What the posterior over layer `l`'s output is conditioned on.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorQuery<'a> {
    /// The network input.
    pub x: &'a str,
    /// Input to layer `l - 1`: `x` when `l = 1`.
    pub prev: &'a str,
    /// Forward-pass output of layer `l - 1`.
    pub h_hat: &'a str,
    /// What layer `l` should produce: `y` for the last layer, else the best
    /// posterior sample of the layer above.
    pub target: &'a str,
}

/// Samples `cfg.k` candidates for the output of layer `layer - 1` (the input
/// of `layer`) and weights them by `sharpen(alpha + beta)`, where `alpha` is
/// the log-prob under layer `layer - 1` and `beta` the log-prob of the
/// target under `layer`.
///
/// A component is drawn per slot; then each component runs in fixed order
/// (prior, label-conditioned prior, edit). Duplicates are kept.
#[allow(clippy::too_many_arguments)]
pub fn sample_layer_posterior<L: LanguageModel + ?Sized>(
    stack: &LayerStack,
    layer: usize,
    query: PosteriorQuery<'_>,
    cfg: &PosteriorConfig,
    templates: &BackwardTemplates,
    lm: &L,
    limits: &GenerationLimits,
    seed: u64,
) -> Result<WeightedSampleSet, StepError> {
    assert!(layer >= 1 && layer < stack.depth(), "posterior layer out of range");
    cfg.validate()
        .map_err(|e| StepError::Invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = cfg.mixture.as_array();
    let dist = WeightedIndex::new(weights).map_err(|e| StepError::Invalid(e.to_string()))?;
    let mut counts = [0usize; 3];
    for _ in 0..cfg.k {
        counts[dist.sample(&mut rng)] += 1;
    }
    let below = stack.layer(layer - 1);
    let above = stack.layer(layer);
    let prior_ctx = below.context(&below.prompt.text, query.x, query.prev)?;
    let max_units = limits.max_hidden_units;

    let mut hiddens: Vec<String> = Vec::with_capacity(cfg.k);
    for (c, &count) in COMPONENTS.iter().zip(&counts) {
        if count == 0 {
            continue;
        }
        match c {
            Component::Pri | Component::PriPlus => {
                let ctx = if *c == Component::Pri {
                    prior_ctx.clone()
                } else {
                    templates.given_answer.render_fixed(
                        &Binding::new()
                            .set("input", query.prev)
                            .set("y", query.target)
                            .set("prompt", &below.prompt.text),
                    )?
                };
                let req = GenerationRequest::sampled(ctx, cfg.temperature, count, max_units, rng.next_u64());
                hiddens.extend(lm.generate(&req)?);
            }
            Component::Edit => {
                let mut reqs = Vec::with_capacity(count);
                for _ in 0..count {
                    let binding = Binding::new()
                        .set("next_prompt", &above.prompt.text)
                        .set("input", query.prev)
                        .set("h", query.h_hat)
                        .set("y", query.target);
                    let ctx = templates
                        .edit
                        .render(&binding, MessageSelector::Random(&mut rng as &mut dyn RngCore))?
                        .text;
                    reqs.push(GenerationRequest::sampled(ctx, cfg.temperature, 1, max_units, rng.gen()));
                }
                for mut out in lm.batch_generate(&reqs)? {
                    hiddens.push(out.swap_remove(0));
                }
            }
        }
    }
    let mut hiddens: Vec<String> = hiddens
        .into_iter()
        .map(|h| h.trim().to_string())
        .filter(|h| !h.is_empty())
        .collect();
    if hiddens.is_empty() {
        if query.h_hat.trim().is_empty() {
            return Err(StepError::Invalid("every hidden sample was empty".into()));
        }
        hiddens.push(query.h_hat.trim().to_string());
    }
    let alpha_pairs: Vec<(String, String)> = hiddens.iter().map(|h| (prior_ctx.clone(), h.clone())).collect();
    let beta_pairs = hiddens
        .iter()
        .map(|h| Ok((above.context(&above.prompt.text, query.x, h)?, query.target.to_string())))
        .collect::<Result<Vec<_>, StepError>>()?;
    let alphas = lm.batch_logprob(&alpha_pairs)?;
    let betas = lm.batch_logprob(&beta_pairs)?;
    let samples = hiddens
        .into_iter()
        .zip(alphas.iter().zip(&betas))
        .map(|(hidden, (a, b))| PosteriorSample {
            hidden,
            alpha: a.normalized_logprob,
            beta: b.normalized_logprob,
        })
        .collect();
    Ok(WeightedSampleSet::new(samples, cfg.alpha_sharp)?)
}

/// Posterior over the hidden string of a two-layer stack.
#[allow(clippy::too_many_arguments)]
pub fn sample_posterior<L: LanguageModel + ?Sized>(
    x: &str,
    y: &str,
    h_hat: &str,
    stack: &LayerStack,
    cfg: &PosteriorConfig,
    templates: &BackwardTemplates,
    lm: &L,
    limits: &GenerationLimits,
    seed: u64,
) -> Result<WeightedSampleSet, StepError> {
    let query = PosteriorQuery {
        x,
        prev: x,
        h_hat,
        target: y,
    };
    sample_layer_posterior(stack, 1, query, cfg, templates, lm, limits, seed)
}

fn posterior_seed(seed: u64, iteration: usize, layer: usize, example: usize) -> u64 {
    derive_seed(seed, &[iteration as u64, stream::POSTERIOR, layer as u64, example as u64])
}

fn proposal_rng(seed: u64, iteration: usize, layer: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, &[iteration as u64, stream::PROPOSE, layer as u64]))
}

/// Indices of the proposal and scoring examples within the batch.
fn halves(batch: &[Example], hyper: &Hyper, seed: u64, iteration: usize) -> (Vec<usize>, Vec<usize>) {
    let all: Vec<usize> = (0..batch.len()).collect();
    if !(hyper.held_out_prompt_ranking && batch.len() >= 2) {
        return (all.clone(), all);
    }
    let tagged: Vec<Example> = batch
        .iter()
        .enumerate()
        .map(|(i, e)| Example {
            id: i.to_string(),
            ..e.clone()
        })
        .collect();
    let (p, s) = split_halves(&tagged, derive_seed(seed, &[iteration as u64, stream::SPLIT]));
    let ids = |v: Vec<Example>| v.into_iter().map(|e| e.id.parse().expect("tagged id")).collect();
    (ids(p), ids(s))
}

fn nonempty<'a>(s: &'a str, fallback: &'a str) -> &'a str {
    if s.trim().is_empty() {
        fallback
    } else {
        s
    }
}

fn check_two_layer(stack: &LayerStack) -> Result<(), StepError> {
    if stack.depth() != 2 || stack.layer(0).residual || !stack.layer(1).residual {
        return Err(StepError::Invalid(
            "two-layer training needs a plain hidden layer followed by a residual output layer".into(),
        ));
    }
    Ok(())
}

/// One variational update of a two-layer stack.
pub fn train_step<L: LanguageModel + ?Sized>(
    stack: &LayerStack,
    input: &StepInput<'_>,
    hyper: &Hyper,
    templates: &BackwardTemplates,
    lm: &L,
) -> Result<(Vec<Prompt>, StepRecord), StepError> {
    check_two_layer(stack)?;
    let batch = input.batch;
    if batch.is_empty() {
        return Err(StepError::Invalid("empty minibatch".into()));
    }
    let i = input.iteration;
    let cfg = hyper.posterior();
    let xs: Vec<&str> = batch.iter().map(|e| e.input.as_str()).collect();
    let passes = stack.forward_batch(&xs, lm, &hyper.limits)?;
    let h_hat: Vec<&str> = passes.iter().map(|p| p.hiddens[0].as_str()).collect();

    let mut posts = Vec::with_capacity(batch.len());
    for (j, e) in batch.iter().enumerate() {
        posts.push(sample_posterior(
            &e.input,
            &e.target,
            h_hat[j],
            stack,
            &cfg,
            templates,
            lm,
            &hyper.limits,
            posterior_seed(input.seed, i, 1, j),
        )?);
    }
    let (prop, score) = halves(batch, hyper, input.seed, i);

    let infos0: Vec<BackwardInfo> = prop
        .iter()
        .map(|&j| BackwardInfo::new(batch[j].input.clone(), h_hat[j], posts[j].best().hidden.clone()))
        .collect();
    let infos1: Vec<BackwardInfo> = prop
        .iter()
        .map(|&j| {
            BackwardInfo::new(
                nonempty(h_hat[j], &batch[j].input),
                passes[j].y_hat.clone(),
                batch[j].target.clone(),
            )
        })
        .collect();
    let hits = prop.iter().filter(|&&j| is_match(&passes[j].y_hat, &batch[j].target)).count();

    let settings = crate::dln1::ProposalSettings::from_hyper(hyper, i + 1);
    let pi0 = &stack.layer(0).prompt;
    let pi1 = &stack.layer(1).prompt;
    let t0 = &stack.layer(0).template;
    let t1 = &stack.layer(1).template;

    let (new0, up0) = if hyper.is_fixed(0) {
        (pi0.clone(), fixed_update(pi0))
    } else {
        let mut p0 =
            crate::dln1::propose(pi0, &infos0, lm, &templates.prompt_proposal, &settings, &mut proposal_rng(input.seed, i, 0))?;
        p0.pop();
        let (pool0, inc0) = candidate_pool(p0, input.memory, 0, hyper.use_memory, pi0);
        let score_x: Vec<&str> = score.iter().map(|&j| batch[j].input.as_str()).collect();
        let score_sets: Vec<WeightedSampleSet> = score.iter().map(|&j| posts[j].clone()).collect();
        let wrong: Vec<(&str, &str)> = score
            .iter()
            .filter(|&&j| !is_match(&passes[j].y_hat, &batch[j].target))
            .map(|&j| (batch[j].input.as_str(), h_hat[j]))
            .collect();
        let sel0 = select_best(&pool0, inc0, |c| {
            let elbo = prompt_score_first_layer(c, &score_x, &score_sets, lm, t0)?;
            Ok(elbo + exploration_reward(c, &wrong, lm, t0, input.lambda)?)
        })?;
        (pool0[sel0.index].clone(), layer_update(&pool0, &sel0))
    };
    let (new1, up1) = if hyper.is_fixed(1) {
        (pi1.clone(), fixed_update(pi1))
    } else {
        let mut p1 =
            crate::dln1::propose(pi1, &infos1, lm, &templates.prompt_proposal, &settings, &mut proposal_rng(input.seed, i, 1))?;
        p1.pop();
        let (pool1, inc1) = candidate_pool(p1, input.memory, 1, hyper.use_memory, pi1);
        let triples: Vec<(&str, &WeightedSampleSet, &str)> = score
            .iter()
            .map(|&j| (batch[j].input.as_str(), &posts[j], batch[j].target.as_str()))
            .collect();
        let sel1 = select_best(&pool1, inc1, |c| Ok(prompt_score_second_layer(c, &triples, lm, t1)?))?;
        (pool1[sel1.index].clone(), layer_update(&pool1, &sel1))
    };

    let record = StepRecord {
        iteration: i + 1,
        lambda: input.lambda,
        batch_accuracy: hits as f64 / prop.len() as f64,
        layers: vec![up0, up1],
    };
    Ok((vec![new0, new1], record))
}

/// One update of a stack of any depth: a backward sweep picks weighted
/// posterior samples for every hidden layer, then each prompt is chosen by
/// `Σ_k Σ_k' q_l^k q_(l+1)^k' log p(h_(l+1)^k' | T(h_l^k, π))`, with the
/// exploration reward added below the last layer.
pub fn train_multi_step<L: LanguageModel + ?Sized>(
    stack: &LayerStack,
    input: &StepInput<'_>,
    hyper: &Hyper,
    templates: &BackwardTemplates,
    lm: &L,
) -> Result<(Vec<Prompt>, StepRecord), StepError> {
    let batch = input.batch;
    if batch.is_empty() {
        return Err(StepError::Invalid("empty minibatch".into()));
    }
    let depth = stack.depth();
    let i = input.iteration;
    let cfg = hyper.posterior();
    let xs: Vec<&str> = batch.iter().map(|e| e.input.as_str()).collect();
    let passes = stack.forward_batch(&xs, lm, &hyper.limits)?;
    // hats[j][l]: input of layer l for l < depth, network output at `depth`.
    let hats: Vec<Vec<String>> = batch
        .iter()
        .zip(&passes)
        .map(|(e, p)| {
            let mut v = Vec::with_capacity(depth + 1);
            v.push(e.input.clone());
            v.extend(p.hiddens.iter().cloned());
            v.push(p.y_hat.clone());
            v
        })
        .collect();

    // sets[j][l]: weighted samples for the input of layer l (l = 0 is x) and,
    // at l = depth, the label.
    let mut sets: Vec<Vec<WeightedSampleSet>> = batch
        .iter()
        .map(|e| {
            let mut v = vec![WeightedSampleSet::point(e.input.clone()); depth + 1];
            v[depth] = WeightedSampleSet::point(e.target.clone());
            v
        })
        .collect();
    for l in (1..depth).rev() {
        for (j, e) in batch.iter().enumerate() {
            let target = sets[j][l + 1].best().hidden.clone();
            let query = PosteriorQuery {
                x: &e.input,
                prev: &hats[j][l - 1],
                h_hat: &hats[j][l],
                target: &target,
            };
            sets[j][l] = sample_layer_posterior(
                stack,
                l,
                query,
                &cfg,
                templates,
                lm,
                &hyper.limits,
                posterior_seed(input.seed, i, l, j),
            )?;
        }
    }
    let (prop, score) = halves(batch, hyper, input.seed, i);
    let hits = prop.iter().filter(|&&j| is_match(&passes[j].y_hat, &batch[j].target)).count();
    let settings = crate::dln1::ProposalSettings::from_hyper(hyper, i + 1);

    let mut selected = vec![None; depth];
    let mut updates = vec![None; depth];
    for l in (0..depth).rev() {
        let layer = stack.layer(l);
        if hyper.is_fixed(l) {
            updates[l] = Some(fixed_update(&layer.prompt));
            selected[l] = Some(layer.prompt.clone());
            continue;
        }
        let infos: Vec<BackwardInfo> = prop
            .iter()
            .map(|&j| {
                BackwardInfo::new(
                    nonempty(&hats[j][l], &batch[j].input),
                    hats[j][l + 1].clone(),
                    sets[j][l + 1].best().hidden.clone(),
                )
            })
            .collect();
        let mut proposals = crate::dln1::propose(
            &layer.prompt,
            &infos,
            lm,
            &templates.prompt_proposal,
            &settings,
            &mut proposal_rng(input.seed, i, l),
        )?;
        proposals.pop();
        let (pool, inc) = candidate_pool(proposals, input.memory, l, hyper.use_memory, &layer.prompt);
        let last = l + 1 == depth;
        let sel = select_best(&pool, inc, |c| {
            let mut terms = Vec::new();
            for &j in &score {
                let x = batch[j].input.as_str();
                for (h, q) in sets[j][l].iter() {
                    let ctx = layer.context(c, x, h)?;
                    for (h_next, q_next) in sets[j][l + 1].iter() {
                        terms.push((ctx.clone(), h_next.to_string(), q * q_next));
                    }
                }
            }
            let mut s = weighted_logprob_sum(lm, &terms)?;
            if !last {
                let wrong = score
                    .iter()
                    .filter(|&&j| !is_match(&passes[j].y_hat, &batch[j].target))
                    .map(|&j| Ok((layer.context(c, &batch[j].input, &hats[j][l])?, hats[j][l + 1].clone())))
                    .collect::<Result<Vec<_>, StepError>>()?;
                s += exploration_reward_contexts(lm, &wrong, input.lambda)?;
            }
            Ok(s)
        })?;
        updates[l] = Some(layer_update(&pool, &sel));
        selected[l] = Some(pool[sel.index].clone());
    }
    let record = StepRecord {
        iteration: i + 1,
        lambda: input.lambda,
        batch_accuracy: hits as f64 / prop.len() as f64,
        layers: updates.into_iter().map(|u| u.expect("every layer updated")).collect(),
    };
    Ok((selected.into_iter().map(|p| p.expect("every layer selected")).collect(), record))
}

fn depth_error(expected: &str, got: usize) -> TrainError {
    TrainError::Config(HyperError {
        field: "layers",
        message: format!("{expected}, got {got} layers"),
    })
}

/// Trains a two-layer stack in place with [`train_step`].
pub fn train<L: LanguageModel + ?Sized>(
    data: &SplitDataset,
    stack: &mut LayerStack,
    hyper: &Hyper,
    templates: &BackwardTemplates,
    lm: &L,
    seed: u64,
    observer: &mut dyn FnMut(&TrainState),
) -> Result<TrainState, TrainError> {
    if check_two_layer(stack).is_err() {
        return Err(depth_error(
            "two-layer training needs a hidden layer and a residual output layer",
            stack.depth(),
        ));
    }
    let mut step = |s: &LayerStack, input: &StepInput<'_>| train_step(s, input, hyper, templates, lm);
    train::run(data, stack, hyper, lm, seed, &mut step, observer)
}

/// Trains a stack of any depth in place with [`train_multi_step`].
pub fn train_multi<L: LanguageModel + ?Sized>(
    data: &SplitDataset,
    stack: &mut LayerStack,
    hyper: &Hyper,
    templates: &BackwardTemplates,
    lm: &L,
    seed: u64,
    observer: &mut dyn FnMut(&TrainState),
) -> Result<TrainState, TrainError> {
    let mut step =
        |s: &LayerStack, input: &StepInput<'_>| train_multi_step(s, input, hyper, templates, lm);
    train::run(data, stack, hyper, lm, seed, &mut step, observer)
}
