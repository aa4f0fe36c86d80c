//! Benchmark task metadata and initial prompts.

use serde::Serialize;

use crate::eval::SplitSpec;

/// Initial hidden-layer prompt for tasks that start from a decomposition hint.
pub const HIDDEN_DECOMPOSE: &str = "Decompose the problem to make it simpler:";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TaskInfo {
    pub name: &'static str,
    pub split: SplitSpec,
    pub classes: usize,
    pub description: &'static str,
    /// Initial prompt of the classification layer.
    pub init_prompt: &'static str,
    /// Initial prompt of the hidden layer of a two-layer network, when one
    /// is known for the task.
    pub hidden_init: Option<&'static str>,
}

pub const TASKS: [TaskInfo; 9] = [
    TaskInfo {
        name: "mpqa",
        split: SplitSpec::new(400, 256, 250),
        classes: 2,
        description: "Sentiment analysis.",
        init_prompt: "Read the following review, then choose whether it is negative or positive.",
        hidden_init: None,
    },
    TaskInfo {
        name: "trec",
        split: SplitSpec::new(400, 256, 250),
        classes: 6,
        description: "Question type classification.",
        init_prompt: "Read the following question, then choose whether it is about a description, entity, expression, human, location or number.",
        hidden_init: None,
    },
    TaskInfo {
        name: "subj",
        split: SplitSpec::new(400, 256, 250),
        classes: 2,
        description: "Determine whether a sentence is subjective or objective.",
        init_prompt: "Read the following sentence, then choose whether it is subjective or objective",
        hidden_init: Some(HIDDEN_DECOMPOSE),
    },
    TaskInfo {
        name: "disaster",
        split: SplitSpec::new(400, 250, 250),
        classes: 2,
        description: "Determine whether a sentence is relevant to a disaster.",
        init_prompt: "Read the following sentence, then choose whether it is relevant to a disaster.",
        hidden_init: None,
    },
    TaskInfo {
        name: "airline",
        split: SplitSpec::new(400, 250, 250),
        classes: 3,
        description: "Airline tweet sentiment analysis.",
        init_prompt: "Read the following sentence, then choose whether it is positive, negative, or neutral.",
        hidden_init: None,
    },
    TaskInfo {
        name: "hyperbaton",
        split: SplitSpec::new(400, 1000, 250),
        classes: 2,
        description: "Order adjectives correctly in English sentences.",
        init_prompt: "Which sentence has the correct adjective order.",
        hidden_init: None,
    },
    TaskInfo {
        name: "navigate",
        split: SplitSpec::new(375, 375, 250),
        classes: 2,
        description: "Spatial reasoning given navigation instructions.",
        init_prompt: "Read the following sentence, then determine whether you return to the starting point.",
        hidden_init: Some(HIDDEN_DECOMPOSE),
    },
    TaskInfo {
        name: "date",
        split: SplitSpec::new(59, 60, 250),
        classes: 6,
        description: "Infer a date from context.",
        init_prompt: "Infer the date from context.",
        hidden_init: Some(""),
    },
    TaskInfo {
        name: "logic7",
        split: SplitSpec::new(225, 225, 250),
        classes: 7,
        description: "Deduce the order of seven objects given instruction.",
        init_prompt: "The following paragraphs each describe a set of seven objects arranged in a fixed order. The statements are logically consistent within each paragraph.",
        hidden_init: Some(""),
    },
];

/// Looks a task up by name, ignoring case and punctuation (`Logic.7`,
/// `logic7` and `LOGIC-7` all match).
pub fn task(name: &str) -> Option<&'static TaskInfo> {
    let key: String = name
        .chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect();
    let alias = match key.as_str() {
        "hyper" => "hyperbaton",
        "nav" => "navigate",
        other => other,
    };
    TASKS.iter().find(|t| t.name == alias)
}
