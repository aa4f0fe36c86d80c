//! Datasets, splits, answer normalization and exact-match accuracy.
//!
//! Dataset files hold one JSON object per line: `{"id": ..., "input": ...,
//! "target": ...}`. The `id` is optional; when absent it is derived from a
//! hash of input and target.

use std::collections::HashSet;
use std::io::BufRead;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::layer::{GenerationLimits, LayerStack};
use crate::lm::{LanguageModel, LmError, TokenLedger};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("duplicate example id {0:?}")]
    DuplicateId(String),
    #[error("split sizes {requested} exceed the {available} available examples")]
    SplitTooLarge { requested: usize, available: usize },
    #[error("predictions and targets differ in length ({preds} vs {golds})")]
    LengthMismatch { preds: usize, golds: usize },
    #[error("nothing to evaluate")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub input: String,
    pub target: String,
}

impl Example {
    /// Builds an example with a content-derived id.
    pub fn new(input: impl Into<String>, target: impl Into<String>) -> Self {
        let input = input.into();
        let target = target.into();
        let id = content_id(&input, &target);
        Self { id, input, target }
    }
}

fn content_id(input: &str, target: &str) -> String {
    let mut h = Sha256::new();
    h.update(input.as_bytes());
    h.update([0x1f]);
    h.update(target.as_bytes());
    h.finalize()[..8].iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Deserialize)]
struct Record {
    id: Option<String>,
    input: String,
    target: String,
}

/// Number of examples per split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl SplitSpec {
    pub const fn new(train: usize, valid: usize, test: usize) -> Self {
        Self { train, valid, test }
    }

    /// 400 / 250 / 250.
    pub const LEOPARD: SplitSpec = SplitSpec::new(400, 250, 250);

    pub fn total(&self) -> usize {
        self.train + self.valid + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitDataset {
    pub task_name: String,
    pub train: Vec<Example>,
    pub valid: Vec<Example>,
    pub test: Vec<Example>,
    /// Distinct normalized targets, sorted.
    pub class_labels: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl SplitDataset {
    pub fn split(&self, which: Split) -> &[Example] {
        match which {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    /// Splits `examples` by a seeded shuffle.
    pub fn from_examples(
        task_name: &str,
        mut examples: Vec<Example>,
        spec: SplitSpec,
        seed: u64,
    ) -> Result<Self, DataError> {
        let mut seen = HashSet::new();
        for e in &examples {
            if !seen.insert(e.id.clone()) {
                return Err(DataError::DuplicateId(e.id.clone()));
            }
        }
        if spec.total() > examples.len() {
            return Err(DataError::SplitTooLarge {
                requested: spec.total(),
                available: examples.len(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        examples.shuffle(&mut rng);
        let mut rest = examples.into_iter();
        let train: Vec<_> = rest.by_ref().take(spec.train).collect();
        let valid: Vec<_> = rest.by_ref().take(spec.valid).collect();
        let test: Vec<_> = rest.take(spec.test).collect();
        let mut class_labels: Vec<String> = train
            .iter()
            .chain(&valid)
            .chain(&test)
            .map(|e| normalize(&e.target))
            .collect();
        class_labels.sort();
        class_labels.dedup();
        Ok(Self {
            task_name: task_name.to_string(),
            train,
            valid,
            test,
            class_labels,
        })
    }

    /// Reads a JSONL file and splits it.
    pub fn load(path: impl AsRef<Path>, spec: SplitSpec, seed: u64) -> Result<Self, DataError> {
        let path = path.as_ref();
        let examples = read_jsonl(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::from_examples(&name, examples, spec, seed)
    }
}

/// Parses JSONL records. Blank lines are skipped.
pub fn read_jsonl(path: &Path) -> Result<Vec<Example>, DataError> {
    let file = std::fs::File::open(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_jsonl(std::io::BufReader::new(file)).map_err(|e| match e {
        DataError::Io { source, .. } => DataError::Io {
            path: path.display().to_string(),
            source,
        },
        other => other,
    })
}

pub fn parse_jsonl(reader: impl BufRead) -> Result<Vec<Example>, DataError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DataError::Io {
            path: String::new(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let lineno = i + 1;
        let rec: Record = serde_json::from_str(&line).map_err(|e| DataError::Malformed {
            line: lineno,
            message: e.to_string(),
        })?;
        if rec.input.trim().is_empty() || rec.target.trim().is_empty() {
            return Err(DataError::Malformed {
                line: lineno,
                message: "input and target must be non-empty".into(),
            });
        }
        let id = rec.id.unwrap_or_else(|| content_id(&rec.input, &rec.target));
        out.push(Example {
            id,
            input: rec.input,
            target: rec.target,
        });
    }
    Ok(out)
}

/// Writes examples as JSONL.
pub fn write_jsonl(path: &Path, examples: &[Example]) -> std::io::Result<()> {
    let mut s = String::new();
    for e in examples {
        s.push_str(&serde_json::to_string(e).expect("examples serialize"));
        s.push('\n');
    }
    std::fs::write(path, s)
}

const TRAILING_PUNCT: &[char] = &['.', '!', '?', ';', ':', ','];

/// Canonical form used for answer matching: lowercase, whitespace runs
/// collapsed, trimmed, trailing sentence punctuation and leading `- ` option
/// markers removed.
///
/// ```
/// use dln::eval::normalize;
/// assert_eq!(normalize(" Yes."), "yes");
/// assert_eq!(normalize("- No"), "no");
/// ```
pub fn normalize(s: &str) -> String {
    let mut out = s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ");
    loop {
        let before = out.len();
        let trimmed = out.trim_end_matches(TRAILING_PUNCT).trim_end();
        let trimmed = match trimmed.strip_prefix('-') {
            Some(rest) if rest.starts_with(' ') || rest.is_empty() => rest.trim_start(),
            _ => trimmed,
        };
        out = trimmed.to_string();
        if out.len() == before {
            return out;
        }
    }
}

pub fn is_match(pred: &str, gold: &str) -> bool {
    normalize(pred) == normalize(gold)
}

/// Fraction of exact matches after normalization.
pub fn accuracy(preds: &[String], golds: &[String]) -> Result<f64, DataError> {
    if preds.len() != golds.len() {
        return Err(DataError::LengthMismatch {
            preds: preds.len(),
            golds: golds.len(),
        });
    }
    if preds.is_empty() {
        return Err(DataError::Empty);
    }
    let hits = preds.iter().zip(golds).filter(|(p, g)| is_match(p, g)).count();
    Ok(hits as f64 / preds.len() as f64)
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Data(#[from] DataError),
    /// Carries the predictions made before the failure.
    #[error("backend failed after {} of {total} predictions: {source}", partial.len())]
    Backend {
        partial: Vec<String>,
        total: usize,
        #[source]
        source: LmError,
    },
}

/// Outcome of evaluating on one split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub split: Split,
    pub accuracy: f64,
    pub n: usize,
    pub seed: u64,
    pub token_ledger: TokenLedger,
}

/// Runs `predict` over every example and scores the predictions.
pub fn evaluate_with<F>(examples: &[Example], mut predict: F) -> Result<(f64, Vec<String>), EvalError>
where
    F: FnMut(&[Example]) -> Result<Vec<String>, LmError>,
{
    if examples.is_empty() {
        return Err(DataError::Empty.into());
    }
    let preds = predict(examples).map_err(|source| EvalError::Backend {
        partial: Vec::new(),
        total: examples.len(),
        source,
    })?;
    let golds: Vec<String> = examples.iter().map(|e| e.target.clone()).collect();
    Ok((accuracy(&preds, &golds)?, preds))
}

/// Temperature-0 accuracy of `stack` on `examples`.
pub fn evaluate<L: LanguageModel + ?Sized>(
    stack: &LayerStack,
    examples: &[Example],
    lm: &L,
    limits: &GenerationLimits,
) -> Result<f64, EvalError> {
    Ok(evaluate_predictions(stack, examples, lm, limits)?.0)
}

/// Like [`evaluate`], also returning the predictions.
pub fn evaluate_predictions<L: LanguageModel + ?Sized>(
    stack: &LayerStack,
    examples: &[Example],
    lm: &L,
    limits: &GenerationLimits,
) -> Result<(f64, Vec<String>), EvalError> {
    evaluate_with(examples, |exs| {
        let xs: Vec<&str> = exs.iter().map(|e| e.input.as_str()).collect();
        let passes = stack.forward_batch(&xs, lm, limits).map_err(|e| match e {
            crate::layer::LayerError::Lm(e) => e,
            other => LmError::InvalidRequest(other.to_string()),
        })?;
        Ok(passes.into_iter().map(|p| p.y_hat).collect())
    })
}

/// Evaluates one split and reports the tokens it used.
pub fn evaluate_report<L: LanguageModel + ?Sized>(
    stack: &LayerStack,
    data: &SplitDataset,
    split: Split,
    lm: &L,
    limits: &GenerationLimits,
    seed: u64,
) -> Result<EvalReport, EvalError> {
    let before = lm.ledger();
    let examples = data.split(split);
    let accuracy = evaluate(stack, examples, lm, limits)?;
    Ok(EvalReport {
        task: data.task_name.clone(),
        split,
        accuracy,
        n: examples.len(),
        seed,
        token_ledger: lm.ledger().since(&before),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn examples(n: usize) -> Vec<Example> {
        (0..n).map(|i| Example::new(format!("x{i}"), format!("y{}", i % 3))).collect()
    }

    #[test]
    fn normalization_cases() {
        assert_eq!(normalize(" Yes."), "yes");
        assert_eq!(normalize("POSITIVE"), "positive");
        assert_eq!(normalize("yes"), "yes");
        assert_eq!(normalize("  a \t b  c?! "), "a b c");
        assert_eq!(normalize("- Yes ."), "yes");
        assert_eq!(normalize("-1"), "-1");
        assert_eq!(normalize(""), "");
    }

    #[test]
    fn accuracy_cases() {
        let s = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();
        assert_eq!(accuracy(&s(&["a", "b"]), &s(&["a", "b"])).unwrap(), 1.0);
        assert_eq!(accuracy(&s(&["a", "b"]), &s(&["c", "d"])).unwrap(), 0.0);
        assert_eq!(accuracy(&s(&["a", "b", "c", "x"]), &s(&["A", "b.", "c", "d"])).unwrap(), 0.75);
        assert_eq!(accuracy(&s(&["", "b"]), &s(&["a", "b"])).unwrap(), 0.5);
        assert!(matches!(accuracy(&s(&["a"]), &s(&[])), Err(DataError::LengthMismatch { .. })));
        assert!(matches!(accuracy(&[], &[]), Err(DataError::Empty)));
    }

    #[test]
    fn splits_are_seeded_and_disjoint() {
        let a = SplitDataset::from_examples("t", examples(30), SplitSpec::new(10, 5, 5), 1).unwrap();
        let b = SplitDataset::from_examples("t", examples(30), SplitSpec::new(10, 5, 5), 1).unwrap();
        assert_eq!(a, b);
        let mut ids: Vec<_> = a.train.iter().chain(&a.valid).chain(&a.test).map(|e| &e.id).collect();
        let n = ids.len();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), n);
        assert_eq!(a.class_labels, vec!["y0", "y1", "y2"]);
        let err = SplitDataset::from_examples("t", examples(10), SplitSpec::new(10, 5, 5), 1).unwrap_err();
        assert!(matches!(err, DataError::SplitTooLarge { requested: 20, available: 10 }));
    }

    #[test]
    fn malformed_lines_report_line_number() {
        let src = "{\"input\":\"a\",\"target\":\"b\"}\n\n{\"input\": 3}\n";
        match parse_jsonl(src.as_bytes()) {
            Err(DataError::Malformed { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        let dup = "{\"id\":\"1\",\"input\":\"a\",\"target\":\"b\"}\n{\"id\":\"1\",\"input\":\"c\",\"target\":\"d\"}\n";
        let ex = parse_jsonl(dup.as_bytes()).unwrap();
        assert!(matches!(
            SplitDataset::from_examples("t", ex, SplitSpec::new(1, 0, 0), 0),
            Err(DataError::DuplicateId(_))
        ));
    }
}
