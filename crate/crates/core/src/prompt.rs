//! Prompts and the memory of best validated prompts.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptOrigin {
    Initialization,
    Proposed,
    Memory,
}

/// A layer's learnable weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prompt {
    pub text: String,
    pub origin: PromptOrigin,
    pub created_at_iteration: usize,
    #[serde(default)]
    pub val_score: Option<f64>,
}

impl Prompt {
    pub fn init(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            origin: PromptOrigin::Initialization,
            created_at_iteration: 0,
            val_score: None,
        }
    }

    pub fn proposed(text: impl Into<String>, iteration: usize) -> Self {
        Self {
            text: text.into(),
            origin: PromptOrigin::Proposed,
            created_at_iteration: iteration,
            val_score: None,
        }
    }
}

/// One memory slot: the prompts of every layer, stored together.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub prompts: Vec<Prompt>,
    pub val_accuracy: f64,
    pub iteration: usize,
}

impl MemoryEntry {
    pub fn texts(&self) -> Vec<&str> {
        self.prompts.iter().map(|p| p.text.as_str()).collect()
    }
}

/// Keeps the `capacity` best prompt tuples by validation accuracy, best
/// first. Equal scores keep insertion order, so older entries win ties.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptMemory {
    capacity: usize,
    entries: Vec<MemoryEntry>,
}

impl PromptMemory {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity >= 1, "memory capacity must be positive");
        Self {
            capacity,
            entries: Vec::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn best(&self) -> Option<&MemoryEntry> {
        self.entries.first()
    }

    /// Records a validated prompt tuple. A tuple already present keeps the
    /// higher of its two scores.
    pub fn insert(&mut self, prompts: &[Prompt], val_accuracy: f64, iteration: usize) {
        let texts: Vec<&str> = prompts.iter().map(|p| p.text.as_str()).collect();
        if let Some(pos) = self.entries.iter().position(|e| e.texts() == texts) {
            if self.entries[pos].val_accuracy >= val_accuracy {
                return;
            }
            self.entries.remove(pos);
        }
        let mut stored: Vec<Prompt> = prompts.to_vec();
        for p in &mut stored {
            p.val_score = Some(val_accuracy);
        }
        let at = self
            .entries
            .iter()
            .position(|e| e.val_accuracy < val_accuracy)
            .unwrap_or(self.entries.len());
        self.entries.insert(
            at,
            MemoryEntry {
                prompts: stored,
                val_accuracy,
                iteration,
            },
        );
        self.entries.truncate(self.capacity);
    }

    /// The prompts of layer `layer` from the `k` best entries, as memory
    /// candidates.
    pub fn top_prompts(&self, layer: usize, k: usize) -> Vec<Prompt> {
        self.entries
            .iter()
            .take(k)
            .filter_map(|e| e.prompts.get(layer))
            .map(|p| Prompt {
                origin: PromptOrigin::Memory,
                ..p.clone()
            })
            .collect()
    }
}
