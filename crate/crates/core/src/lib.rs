//! Deep language networks: stacks of prompt-parameterized language model
//! calls, trained by discrete prompt search and variational inference over
//! the strings passed between layers.
//!
//! The [`lm::ToyLm`] backend has exact, enumerable probabilities, so every
//! probabilistic step can be checked against the brute-force [`oracle`].

pub mod dln1;
pub mod dln2;
pub mod eval;
pub mod hyper;
pub mod init;
pub mod layer;
pub mod lm;
pub mod math;
pub mod oracle;
pub mod prompt;
pub mod scoring;
pub mod sweep;
pub mod synthetic;
pub mod template;
pub mod train;

pub use eval::{Example, SplitDataset, SplitSpec};
pub use hyper::{BackwardTemplates, Hyper, PosteriorConfig, PosteriorMixture};
pub use layer::{Layer, LayerStack};
pub use lm::{LanguageModel, ToyLm, ToyLmConfig};
pub use prompt::{Prompt, PromptMemory};
pub use template::{BackwardInfo, Binding, ShippedTemplate, Template};
pub use train::{TrainError, TrainState};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/language-models.md")]
    mod language_models {}
    #[doc = include_str!("../../../book/src/templates.md")]
    mod templates {}
    #[doc = include_str!("../../../book/src/one-layer.md")]
    mod one_layer {}
    #[doc = include_str!("../../../book/src/two-layers.md")]
    mod two_layers {}
    #[doc = include_str!("../../../book/src/oracle.md")]
    mod oracle {}
    #[doc = include_str!("../../../book/src/sweeps.md")]
    mod sweeps {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
