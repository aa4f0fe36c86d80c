//! Exact reference computations over enumerable hidden spaces of the toy
//! model.
//!
//! Everything here uses total log-probs: these are statements about the
//! model's actual distribution, not the length-normalized scores used for
//! ranking prompts.

use std::collections::HashSet;

use thiserror::Error;

use crate::layer::LayerStack;
use crate::lm::{LanguageModel, LmError, ToyLm};
use crate::math::log_sum_exp;
use crate::template::TemplateError;

/// Largest space the oracle will enumerate.
pub const GUARD: usize = 100_000;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("space of {size} strings exceeds the limit of {limit}")]
    SpaceTooLarge { size: usize, limit: usize },
    #[error("space is empty")]
    EmptySpace,
    #[error("duplicate string {0:?} in space")]
    Duplicate(String),
    #[error("{text:?} has {units} units, above the bound of {max_len}")]
    TooLong { text: String, units: usize, max_len: usize },
    #[error("oracle needs a two-layer stack, got depth {0}")]
    Depth(usize),
    #[error("distribution has {got} entries for a space of {expected}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("q is not a normalized distribution (sum {0})")]
    NotNormalized(f64),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// An explicit finite list of distinct strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnumerableSpace {
    strings: Vec<String>,
    max_len: usize,
}

impl EnumerableSpace {
    pub fn new(strings: Vec<String>, max_len: usize) -> Result<Self, OracleError> {
        if strings.is_empty() {
            return Err(OracleError::EmptySpace);
        }
        if strings.len() > GUARD {
            return Err(OracleError::SpaceTooLarge {
                size: strings.len(),
                limit: GUARD,
            });
        }
        let mut seen = HashSet::new();
        for s in &strings {
            if !seen.insert(s.as_str()) {
                return Err(OracleError::Duplicate(s.clone()));
            }
            let units = s.split_whitespace().count();
            if units > max_len {
                return Err(OracleError::TooLong {
                    text: s.clone(),
                    units,
                    max_len,
                });
            }
        }
        Ok(Self { strings, max_len })
    }

    /// Every output the toy model can produce.
    pub fn toy_support(lm: &ToyLm) -> Result<Self, OracleError> {
        let strings = lm.enumerate_outputs(GUARD).map_err(|e| match e {
            LmError::InvalidRequest(_) => OracleError::SpaceTooLarge {
                size: usize::MAX,
                limit: GUARD,
            },
            other => other.into(),
        })?;
        Self::new(strings, lm.config().max_len)
    }

    pub fn strings(&self) -> &[String] {
        &self.strings
    }

    pub fn max_len(&self) -> usize {
        self.max_len
    }

    pub fn len(&self) -> usize {
        self.strings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strings.is_empty()
    }
}

fn check_depth(stack: &LayerStack) -> Result<(), OracleError> {
    if stack.depth() != 2 {
        return Err(OracleError::Depth(stack.depth()));
    }
    Ok(())
}

/// `log p(h | T(x, π0))` for every `h` in the space.
pub fn log_priors(x: &str, stack: &LayerStack, lm: &ToyLm, space: &EnumerableSpace) -> Result<Vec<f64>, OracleError> {
    check_depth(stack)?;
    let ctx = stack.context(0, x, x)?;
    space
        .strings()
        .iter()
        .map(|h| Ok(lm.logprob(&ctx, h)?.total_logprob))
        .collect()
}

/// `log p(y | T_r(h, x, π1)) + log p(h | T(x, π0))` for every `h`.
pub fn log_joints(
    x: &str,
    y: &str,
    stack: &LayerStack,
    lm: &ToyLm,
    space: &EnumerableSpace,
) -> Result<Vec<f64>, OracleError> {
    let priors = log_priors(x, stack, lm, space)?;
    space
        .strings()
        .iter()
        .zip(priors)
        .map(|(h, prior)| {
            let ctx = stack.context(1, x, h)?;
            Ok(lm.logprob(&ctx, y)?.total_logprob + prior)
        })
        .collect()
}

/// `log Σ_h p(y | h, x) p(h | x)` over the space.
pub fn exact_marginal(
    x: &str,
    y: &str,
    stack: &LayerStack,
    lm: &ToyLm,
    space: &EnumerableSpace,
) -> Result<f64, OracleError> {
    Ok(log_sum_exp(&log_joints(x, y, stack, lm, space)?))
}

/// `p(h | x, y)` over the space.
pub fn exact_posterior(
    x: &str,
    y: &str,
    stack: &LayerStack,
    lm: &ToyLm,
    space: &EnumerableSpace,
) -> Result<Vec<f64>, OracleError> {
    Ok(normalize_log(&log_joints(x, y, stack, lm, space)?))
}

/// Normalizes log-weights into a distribution.
pub fn normalize_log(logw: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logw);
    logw.iter().map(|l| (l - lse).exp()).collect()
}

/// `KL(q ‖ p)`. Terms with `q = 0` contribute nothing; `q > 0` where `p = 0`
/// gives infinity.
pub fn kl(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(qi, _)| **qi > 0.0)
        .map(|(qi, pi)| if *pi > 0.0 { qi * (qi.ln() - pi.ln()) } else { f64::INFINITY })
        .sum()
}

/// `Σ q(h) log p(y, h | x) + H[q]` given the log-joints.
pub fn elbo(q: &[f64], log_joints: &[f64]) -> Result<f64, OracleError> {
    if q.len() != log_joints.len() {
        return Err(OracleError::LengthMismatch {
            expected: log_joints.len(),
            got: q.len(),
        });
    }
    let sum: f64 = q.iter().sum();
    if (sum - 1.0).abs() > 1e-9 || q.iter().any(|v| *v < 0.0) {
        return Err(OracleError::NotNormalized(sum));
    }
    Ok(q.iter()
        .zip(log_joints)
        .filter(|(qi, _)| **qi > 0.0)
        .map(|(qi, lj)| qi * (lj - qi.ln()))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::ToyLmConfig;

    fn toy(vocab: &[&str], seed: u64) -> ToyLm {
        ToyLm::new(ToyLmConfig {
            vocab: vocab.iter().map(|s| s.to_string()).collect(),
            seed,
            min_len: 1,
            max_len: 1,
            ..ToyLmConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn space_validation() {
        assert!(matches!(EnumerableSpace::new(vec![], 2), Err(OracleError::EmptySpace)));
        assert!(matches!(
            EnumerableSpace::new(vec!["a".into(), "a".into()], 2),
            Err(OracleError::Duplicate(_))
        ));
        assert!(matches!(
            EnumerableSpace::new(vec!["a b c".into()], 2),
            Err(OracleError::TooLong { units: 3, .. })
        ));
    }

    #[test]
    fn single_hidden_marginal_is_its_joint() {
        let lm = toy(&["a", "b", "c"], 2);
        let stack = LayerStack::two_layer("p0", "p1");
        let space = EnumerableSpace::new(vec!["b".into()], 1).unwrap();
        let m = exact_marginal("x", "c", &stack, &lm, &space).unwrap();
        let joint = lm.logprob(&stack.context(0, "x", "x").unwrap(), "b").unwrap().total_logprob
            + lm.logprob(&stack.context(1, "x", "b").unwrap(), "c").unwrap().total_logprob;
        assert!((m - joint).abs() < 1e-12);
    }

    #[test]
    fn marginals_over_outputs_sum_to_one() {
        let lm = toy(&["a", "b", "c", "d"], 5);
        let stack = LayerStack::two_layer("p0", "p1");
        let space = EnumerableSpace::toy_support(&lm).unwrap();
        let total: f64 = space
            .strings()
            .iter()
            .map(|y| exact_marginal("x", y, &stack, &lm, &space).unwrap().exp())
            .sum();
        assert!((total - 1.0).abs() < 1e-9);
        let post = exact_posterior("x", "a", &stack, &lm, &space).unwrap();
        assert!((post.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn kl_basics() {
        assert_eq!(kl(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
        assert!(kl(&[0.9, 0.1], &[0.5, 0.5]) > 0.0);
        assert_eq!(kl(&[1.0, 0.0], &[0.0, 1.0]), f64::INFINITY);
        assert!(matches!(elbo(&[0.5], &[0.0, 0.0]), Err(OracleError::LengthMismatch { .. })));
        assert!(matches!(elbo(&[0.5, 0.4], &[0.0, 0.0]), Err(OracleError::NotNormalized(_))));
    }
}
