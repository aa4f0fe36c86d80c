//! Synthetic tasks whose labels come from the toy model itself, so the best
//! prompts are known in advance.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::{Example, SplitDataset, SplitSpec};
use crate::layer::{GenerationLimits, LayerError, LayerStack};
use crate::lm::{ToyLm, ToyLmConfig};

/// A toy model with single-word outputs over eight words.
pub fn small_toy_config(seed: u64) -> ToyLmConfig {
    ToyLmConfig {
        vocab: ["amber", "birch", "cedar", "delta", "ember", "fjord", "grove", "heron"]
            .map(String::from)
            .to_vec(),
        seed,
        order: 1,
        sharpness: 3.0,
        min_len: 1,
        max_len: 1,
        ..ToyLmConfig::default()
    }
}

fn inputs(n: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| format!("case {i}: signal {:08x}", rng.gen::<u32>()))
        .collect()
}

/// Labels every input with `stack`'s temperature-0 answer, so `stack`'s
/// prompts reach accuracy 1 on every split.
pub fn label_with(
    name: &str,
    stack: &LayerStack,
    lm: &ToyLm,
    spec: SplitSpec,
    seed: u64,
) -> Result<SplitDataset, LayerError> {
    let xs = inputs(spec.total(), seed);
    let refs: Vec<&str> = xs.iter().map(String::as_str).collect();
    let passes = stack.forward_batch(&refs, lm, &GenerationLimits::default())?;
    let examples = xs
        .into_iter()
        .zip(passes)
        .map(|(x, p)| Example::new(x, p.y_hat))
        .collect();
    Ok(SplitDataset::from_examples(name, examples, spec, seed).expect("sizes match by construction"))
}

/// One-layer task whose answers are produced by `target_prompt`.
pub fn one_layer_task(
    lm: &ToyLm,
    target_prompt: &str,
    spec: SplitSpec,
    seed: u64,
) -> Result<SplitDataset, LayerError> {
    label_with("synthetic-1", &LayerStack::single(target_prompt), lm, spec, seed)
}

/// Two-stage task: the hidden layer runs under `hidden_prompt`, the output
/// layer under `output_prompt`.
pub fn two_layer_task(
    lm: &ToyLm,
    hidden_prompt: &str,
    output_prompt: &str,
    spec: SplitSpec,
    seed: u64,
) -> Result<SplitDataset, LayerError> {
    label_with(
        "synthetic-2",
        &LayerStack::two_layer(hidden_prompt, output_prompt),
        lm,
        spec,
        seed,
    )
}
