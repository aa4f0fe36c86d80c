//! Templates that assemble prompts, inputs and hidden strings into LM contexts.
//!
//! # File format
//!
//! A template document has a `template:` key followed by the body, every body
//! line indented by exactly two spaces, and an optional
//! `message_alternatives:` key followed by `  - item` lines:
//!
//! ```text
//! template:
//!   {{ prompt }}
//!
//!   {{ input }}
//!
//!   Answer:
//! ```
//!
//! The two-space indent is removed and everything else on a body line is kept
//! byte for byte. Lines holding only whitespace become empty lines, and
//! trailing empty lines at the end of the body are dropped. Lines starting
//! with `#` at column 0 outside the body are comments; an optional
//! `name: <name>` line overrides the file name.
//!
//! Placeholders are `{{ name }}`. The one control structure is a loop over a
//! list of [`BackwardInfo`] entries, written on lines of their own:
//!
//! ```text
//! {% for backward_info in backward_infos if correct %}
//! > {{ backward_info.input }}
//! {% endfor %}
//! ```
//!
//! The optional filter is `if correct` (prediction matches target after
//! answer normalization) or `if wrong`. Directive lines are removed from the
//! output together with their line break, and the loop body is emitted once
//! per matching entry. Inside a loop the fields `input`, `output` and
//! `target` are available.
//!
//! `{{ message }}` is special: it is filled with one of the document's
//! `message_alternatives`, picked by a [`MessageSelector`].

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::normalize;

#[derive(Debug, Error, PartialEq)]
pub enum TemplateError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("line {line}: unknown placeholder syntax {text:?}")]
    UnknownPlaceholderSyntax { line: usize, text: String },
    #[error("template body is empty")]
    EmptyBody,
    #[error("template references {{{{ message }}}} but has no message_alternatives")]
    MessageWithoutAlternatives,
    #[error("message alternative #{0} is blank or spans several lines")]
    InvalidAlternative(usize),
    #[error("missing binding for {0:?}")]
    MissingBinding(String),
    #[error("message index {index} out of range ({count} alternatives)")]
    MessageIndexOutOfRange { index: usize, count: usize },
    #[error("backward info #{0} has an empty input or target")]
    InvalidBackwardInfo(usize),
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

/// One example as seen by a proposal template: what went into the layer, what
/// the layer produced, and what it should have produced.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackwardInfo {
    pub input: String,
    pub output: String,
    pub target: String,
}

impl BackwardInfo {
    pub fn new(input: impl Into<String>, output: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            input: input.into(),
            output: output.into(),
            target: target.into(),
        }
    }

    /// Prediction equals target after answer normalization.
    pub fn is_success(&self) -> bool {
        normalize(&self.output) == normalize(&self.target)
    }

    fn is_valid(&self) -> bool {
        !self.input.is_empty() && !self.target.is_empty()
    }
}

/// Values for a template's placeholders.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Binding {
    values: BTreeMap<String, String>,
    lists: BTreeMap<String, Vec<BackwardInfo>>,
}

impl Binding {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(mut self, name: &str, value: impl Into<String>) -> Self {
        self.values.insert(name.to_string(), value.into());
        self
    }

    pub fn list(mut self, name: &str, infos: Vec<BackwardInfo>) -> Self {
        self.lists.insert(name.to_string(), infos);
        self
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.values.get(name).map(String::as_str)
    }
}

/// How `{{ message }}` is chosen.
pub enum MessageSelector<'a> {
    Fixed(usize),
    Random(&'a mut dyn RngCore),
}

/// A rendered context plus the message alternative that went into it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub text: String,
    pub message_index: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum LoopFilter {
    All,
    Correct,
    Wrong,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Field {
    Input,
    Output,
    Target,
}

#[derive(Debug, Clone, PartialEq)]
enum Segment {
    Lit(String),
    Var(String),
    Field(Field),
}

#[derive(Debug, Clone, PartialEq)]
enum Line {
    Text(Vec<Segment>),
    Loop {
        collection: String,
        filter: LoopFilter,
        body: Vec<Line>,
    },
}

const MESSAGE: &str = "message";

#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    name: String,
    body: String,
    message_alternatives: Vec<String>,
    required_vars: BTreeSet<String>,
    lines: Vec<Line>,
}

impl Template {
    /// Parses a template document.
    pub fn parse(name: &str, source: &str) -> Result<Self, TemplateError> {
        let doc = parse_document(source)?;
        let name = doc.name.unwrap_or_else(|| name.to_string());
        let (body, body_line) = doc.body.ok_or(TemplateError::Syntax {
            line: 1,
            message: "missing `template:` key".into(),
        })?;
        Self::from_parts_at(&name, &body, doc.alternatives, body_line)
    }

    /// Builds a template from an already-dedented body. Whitespace-only lines
    /// become empty and trailing empty lines are dropped, as when parsing a
    /// document.
    pub fn from_parts(name: &str, body: &str, message_alternatives: Vec<String>) -> Result<Self, TemplateError> {
        Self::from_parts_at(name, body, message_alternatives, 1)
    }

    fn from_parts_at(
        name: &str,
        body: &str,
        message_alternatives: Vec<String>,
        first_line: usize,
    ) -> Result<Self, TemplateError> {
        if body.trim().is_empty() {
            return Err(TemplateError::EmptyBody);
        }
        if let Some(i) = message_alternatives
            .iter()
            .position(|a| a.trim().is_empty() || a.contains('\n'))
        {
            return Err(TemplateError::InvalidAlternative(i));
        }
        let mut canonical: Vec<&str> = body
            .split('\n')
            .map(|l| if l.trim().is_empty() { "" } else { l })
            .collect();
        while canonical.last() == Some(&"") {
            canonical.pop();
        }
        let body = canonical.join("\n");
        let raw: Vec<&str> = body.split('\n').collect();
        let mut pos = 0;
        let lines = parse_lines(&raw, &mut pos, first_line, None)?;
        let mut required_vars = BTreeSet::new();
        collect_vars(&lines, &mut required_vars);
        if required_vars.contains(MESSAGE) && message_alternatives.is_empty() {
            return Err(TemplateError::MessageWithoutAlternatives);
        }
        Ok(Self {
            name: name.to_string(),
            body,
            message_alternatives,
            required_vars,
            lines,
        })
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self, TemplateError> {
        let path = path.as_ref();
        let source = std::fs::read_to_string(path).map_err(|e| TemplateError::Io {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let stem = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::parse(&stem, &source)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    pub fn message_alternatives(&self) -> &[String] {
        &self.message_alternatives
    }

    pub fn required_vars(&self) -> &BTreeSet<String> {
        &self.required_vars
    }

    pub fn uses_message(&self) -> bool {
        self.required_vars.contains(MESSAGE)
    }

    /// Writes the template back out in the document format.
    pub fn serialize(&self) -> String {
        let mut out = format!("name: {}\ntemplate:\n", self.name);
        for line in self.body.split('\n') {
            if line.is_empty() {
                out.push('\n');
            } else {
                let _ = writeln!(out, "  {line}");
            }
        }
        if !self.message_alternatives.is_empty() {
            out.push_str("\nmessage_alternatives:\n");
            for alt in &self.message_alternatives {
                let _ = writeln!(out, "  - {alt}");
            }
        }
        out
    }

    /// Substitutes every placeholder. The message alternative is drawn from
    /// `selector` only when the template actually uses `{{ message }}`.
    pub fn render(&self, binding: &Binding, selector: MessageSelector<'_>) -> Result<Rendered, TemplateError> {
        let message_index = if self.uses_message() {
            let count = self.message_alternatives.len();
            let index = match selector {
                MessageSelector::Fixed(i) => i,
                MessageSelector::Random(rng) => rng.gen_range(0..count),
            };
            if index >= count {
                return Err(TemplateError::MessageIndexOutOfRange { index, count });
            }
            Some(index)
        } else {
            None
        };
        let message = message_index.map(|i| self.message_alternatives[i].as_str());
        let mut out = Vec::new();
        render_lines(&self.lines, binding, message, None, &mut out)?;
        Ok(Rendered {
            text: out.join("\n"),
            message_index,
        })
    }

    /// Shorthand for templates without `{{ message }}`.
    pub fn render_fixed(&self, binding: &Binding) -> Result<String, TemplateError> {
        self.render(binding, MessageSelector::Fixed(0)).map(|r| r.text)
    }
}

struct Document {
    name: Option<String>,
    body: Option<(String, usize)>,
    alternatives: Vec<String>,
}

fn parse_document(source: &str) -> Result<Document, TemplateError> {
    enum Section {
        None,
        Body,
        Alternatives,
    }
    let mut doc = Document {
        name: None,
        body: None,
        alternatives: Vec::new(),
    };
    let mut section = Section::None;
    let mut body_lines: Vec<String> = Vec::new();
    let mut body_start = 0;
    for (i, raw) in source.lines().enumerate() {
        let lineno = i + 1;
        let is_top = !raw.starts_with(' ') && !raw.trim().is_empty();
        if is_top {
            if raw.starts_with('#') {
                continue;
            }
            if raw == "template:" {
                if doc.body.is_some() || !body_lines.is_empty() || body_start != 0 {
                    return Err(TemplateError::Syntax {
                        line: lineno,
                        message: "more than one `template:` key".into(),
                    });
                }
                section = Section::Body;
                body_start = lineno + 1;
            } else if raw == "message_alternatives:" {
                section = Section::Alternatives;
            } else if let Some(rest) = raw.strip_prefix("name:") {
                doc.name = Some(rest.trim().to_string());
                section = Section::None;
            } else {
                return Err(TemplateError::Syntax {
                    line: lineno,
                    message: format!("unknown key in {raw:?}"),
                });
            }
            continue;
        }
        match section {
            Section::None => {
                if !raw.trim().is_empty() {
                    return Err(TemplateError::Syntax {
                        line: lineno,
                        message: "indented text outside a section".into(),
                    });
                }
            }
            Section::Body => {
                if raw.trim().is_empty() {
                    body_lines.push(String::new());
                } else if let Some(rest) = raw.strip_prefix("  ") {
                    body_lines.push(rest.to_string());
                } else {
                    return Err(TemplateError::Syntax {
                        line: lineno,
                        message: "body lines must be indented by two spaces".into(),
                    });
                }
            }
            Section::Alternatives => {
                if raw.trim().is_empty() {
                    continue;
                }
                match raw.strip_prefix("  - ") {
                    Some(item) if !item.trim().is_empty() => doc.alternatives.push(item.to_string()),
                    _ => {
                        return Err(TemplateError::Syntax {
                            line: lineno,
                            message: "alternatives must be `  - text` items".into(),
                        })
                    }
                }
            }
        }
    }
    if body_start != 0 {
        while body_lines.last().is_some_and(|l| l.is_empty()) {
            body_lines.pop();
        }
        doc.body = Some((body_lines.join("\n"), body_start));
    }
    Ok(doc)
}

fn parse_lines(
    raw: &[&str],
    pos: &mut usize,
    first_line: usize,
    loop_var: Option<&str>,
) -> Result<Vec<Line>, TemplateError> {
    let mut lines = Vec::new();
    while *pos < raw.len() {
        let lineno = first_line + *pos;
        let text = raw[*pos];
        let trimmed = text.trim();
        if trimmed.starts_with("{%") {
            let directive = trimmed
                .strip_prefix("{%")
                .and_then(|t| t.strip_suffix("%}"))
                .map(str::trim)
                .ok_or_else(|| TemplateError::UnknownPlaceholderSyntax {
                    line: lineno,
                    text: trimmed.to_string(),
                })?;
            let words: Vec<&str> = directive.split_whitespace().collect();
            *pos += 1;
            match words.as_slice() {
                ["endfor"] => {
                    if loop_var.is_none() {
                        return Err(TemplateError::Syntax {
                            line: lineno,
                            message: "`endfor` without a loop".into(),
                        });
                    }
                    return Ok(lines);
                }
                ["for", var, "in", collection, rest @ ..] => {
                    if loop_var.is_some() {
                        return Err(TemplateError::Syntax {
                            line: lineno,
                            message: "nested loops are not supported".into(),
                        });
                    }
                    let filter = match rest {
                        [] => LoopFilter::All,
                        ["if", "correct"] => LoopFilter::Correct,
                        ["if", "wrong"] => LoopFilter::Wrong,
                        _ => {
                            return Err(TemplateError::UnknownPlaceholderSyntax {
                                line: lineno,
                                text: trimmed.to_string(),
                            })
                        }
                    };
                    if !is_ident(var) || !is_ident(collection) {
                        return Err(TemplateError::UnknownPlaceholderSyntax {
                            line: lineno,
                            text: trimmed.to_string(),
                        });
                    }
                    let start = *pos;
                    let body = parse_lines(raw, pos, first_line, Some(var))?;
                    if *pos > raw.len() || (*pos == raw.len() && !ends_with_endfor(raw, start)) {
                        return Err(TemplateError::Syntax {
                            line: lineno,
                            message: "loop is never closed with `{% endfor %}`".into(),
                        });
                    }
                    lines.push(Line::Loop {
                        collection: collection.to_string(),
                        filter,
                        body,
                    });
                }
                _ => {
                    return Err(TemplateError::UnknownPlaceholderSyntax {
                        line: lineno,
                        text: trimmed.to_string(),
                    })
                }
            }
            continue;
        }
        lines.push(Line::Text(parse_segments(text, lineno, loop_var)?));
        *pos += 1;
    }
    if loop_var.is_some() {
        return Err(TemplateError::Syntax {
            line: first_line + raw.len(),
            message: "loop is never closed with `{% endfor %}`".into(),
        });
    }
    Ok(lines)
}

fn ends_with_endfor(raw: &[&str], start: usize) -> bool {
    raw[start..]
        .iter()
        .rev()
        .map(|l| l.trim())
        .find(|l| l.starts_with("{%"))
        .is_some_and(|l| l.contains("endfor"))
}

fn parse_segments(text: &str, lineno: usize, loop_var: Option<&str>) -> Result<Vec<Segment>, TemplateError> {
    let mut segments = Vec::new();
    let mut rest = text;
    loop {
        let open_var = rest.find("{{");
        let open_block = rest.find("{%");
        if let Some(b) = open_block {
            if open_var.is_none_or(|v| b < v) {
                return Err(TemplateError::UnknownPlaceholderSyntax {
                    line: lineno,
                    text: rest[b..].to_string(),
                });
            }
        }
        let Some(start) = open_var else {
            if !rest.is_empty() {
                segments.push(Segment::Lit(rest.to_string()));
            }
            return Ok(segments);
        };
        if start > 0 {
            segments.push(Segment::Lit(rest[..start].to_string()));
        }
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .ok_or_else(|| TemplateError::UnknownPlaceholderSyntax {
                line: lineno,
                text: rest[start..].to_string(),
            })?;
        let inner = after[..end].trim();
        let bad = || TemplateError::UnknownPlaceholderSyntax {
            line: lineno,
            text: format!("{{{{{}}}}}", &after[..end]),
        };
        match inner.split_once('.') {
            None if is_ident(inner) => segments.push(Segment::Var(inner.to_string())),
            Some((var, field)) if Some(var) == loop_var => {
                let field = match field {
                    "input" => Field::Input,
                    "output" => Field::Output,
                    "target" => Field::Target,
                    _ => return Err(bad()),
                };
                segments.push(Segment::Field(field));
            }
            _ => return Err(bad()),
        }
        rest = &after[end + 2..];
    }
}

fn is_ident(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

fn collect_vars(lines: &[Line], out: &mut BTreeSet<String>) {
    for line in lines {
        match line {
            Line::Text(segs) => {
                for s in segs {
                    if let Segment::Var(v) = s {
                        out.insert(v.clone());
                    }
                }
            }
            Line::Loop { collection, body, .. } => {
                out.insert(collection.clone());
                collect_vars(body, out);
            }
        }
    }
}

fn render_lines(
    lines: &[Line],
    binding: &Binding,
    message: Option<&str>,
    current: Option<&BackwardInfo>,
    out: &mut Vec<String>,
) -> Result<(), TemplateError> {
    for line in lines {
        match line {
            Line::Text(segs) => {
                let mut s = String::new();
                for seg in segs {
                    match seg {
                        Segment::Lit(t) => s.push_str(t),
                        Segment::Var(v) if v == MESSAGE => {
                            s.push_str(message.ok_or(TemplateError::MissingBinding(MESSAGE.into()))?)
                        }
                        Segment::Var(v) => s.push_str(
                            binding
                                .get(v)
                                .ok_or_else(|| TemplateError::MissingBinding(v.clone()))?,
                        ),
                        Segment::Field(f) => {
                            let info = current.expect("fields only parse inside loops");
                            s.push_str(match f {
                                Field::Input => &info.input,
                                Field::Output => &info.output,
                                Field::Target => &info.target,
                            });
                        }
                    }
                }
                out.push(s);
            }
            Line::Loop {
                collection,
                filter,
                body,
            } => {
                let infos = binding
                    .lists
                    .get(collection)
                    .ok_or_else(|| TemplateError::MissingBinding(collection.clone()))?;
                for (i, info) in infos.iter().enumerate() {
                    if !info.is_valid() {
                        return Err(TemplateError::InvalidBackwardInfo(i));
                    }
                    let keep = match filter {
                        LoopFilter::All => true,
                        LoopFilter::Correct => info.is_success(),
                        LoopFilter::Wrong => !info.is_success(),
                    };
                    if keep {
                        render_lines(body, binding, message, Some(info), out)?;
                    }
                }
            }
        }
    }
    Ok(())
}

/// The template documents that ship with the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShippedTemplate {
    /// Prompt, input, then `Answer:`.
    Classify,
    /// Output layer of a two-layer network: the input plus the hidden string
    /// under `Your thoughts were:`.
    Residual,
    /// Hidden layer ending in the step-by-step trigger.
    HiddenStepByStep,
    /// Hidden layer ending in `Brief Analysis:`.
    HiddenBriefAnalysis,
    /// Prompt proposal with "Be concise." meta-instructions.
    PromptProposal,
    /// Prompt proposal without the "Be concise." suffixes.
    PromptProposalVerbose,
    /// Hidden proposal conditioned on the answer.
    HiddenGivenAnswer,
    /// Hidden proposal that edits the forward hidden state.
    HiddenEdit,
}

impl ShippedTemplate {
    pub const ALL: [ShippedTemplate; 8] = [
        ShippedTemplate::Classify,
        ShippedTemplate::Residual,
        ShippedTemplate::HiddenStepByStep,
        ShippedTemplate::HiddenBriefAnalysis,
        ShippedTemplate::PromptProposal,
        ShippedTemplate::PromptProposalVerbose,
        ShippedTemplate::HiddenGivenAnswer,
        ShippedTemplate::HiddenEdit,
    ];

    pub fn file_name(self) -> &'static str {
        match self {
            ShippedTemplate::Classify => "classify.tpl",
            ShippedTemplate::Residual => "residual.tpl",
            ShippedTemplate::HiddenStepByStep => "hidden_step_by_step.tpl",
            ShippedTemplate::HiddenBriefAnalysis => "hidden_brief_analysis.tpl",
            ShippedTemplate::PromptProposal => "prompt_proposal_v3_5.tpl",
            ShippedTemplate::PromptProposalVerbose => "prompt_proposal_v3_0.tpl",
            ShippedTemplate::HiddenGivenAnswer => "hidden_given_answer.tpl",
            ShippedTemplate::HiddenEdit => "hidden_edit.tpl",
        }
    }

    pub fn source(self) -> &'static str {
        match self {
            ShippedTemplate::Classify => include_str!("../templates/classify.tpl"),
            ShippedTemplate::Residual => include_str!("../templates/residual.tpl"),
            ShippedTemplate::HiddenStepByStep => include_str!("../templates/hidden_step_by_step.tpl"),
            ShippedTemplate::HiddenBriefAnalysis => include_str!("../templates/hidden_brief_analysis.tpl"),
            ShippedTemplate::PromptProposal => include_str!("../templates/prompt_proposal_v3_5.tpl"),
            ShippedTemplate::PromptProposalVerbose => include_str!("../templates/prompt_proposal_v3_0.tpl"),
            ShippedTemplate::HiddenGivenAnswer => include_str!("../templates/hidden_given_answer.tpl"),
            ShippedTemplate::HiddenEdit => include_str!("../templates/hidden_edit.tpl"),
        }
    }

    pub fn load(self) -> Template {
        let stem = self.file_name().trim_end_matches(".tpl");
        Template::parse(stem, self.source()).expect("shipped templates parse")
    }

    /// Proposal template named by the `bh_tpl` hyperparameter.
    pub fn proposal_by_version(name: &str) -> Option<ShippedTemplate> {
        match name {
            "q_action_prompt:v3.5" | "v3.5" => Some(ShippedTemplate::PromptProposal),
            "q_action_prompt:v3.0" | "v3.0" => Some(ShippedTemplate::PromptProposalVerbose),
            _ => None,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_template_renders_itself() {
        let t = Template::from_parts("c", "no placeholders here", vec![]).unwrap();
        assert!(t.required_vars().is_empty());
        assert_eq!(t.render_fixed(&Binding::new()).unwrap(), "no placeholders here");
    }

    #[test]
    fn load_errors() {
        assert_eq!(
            Template::parse("x", "template:\n\n").unwrap_err(),
            TemplateError::EmptyBody
        );
        assert_eq!(
            Template::parse("x", "template:\n  {{ message }}\n").unwrap_err(),
            TemplateError::MessageWithoutAlternatives
        );
        assert!(matches!(
            Template::parse("x", "template:\n  {{ pro mpt }}\n"),
            Err(TemplateError::UnknownPlaceholderSyntax { line: 2, .. })
        ));
        assert!(matches!(
            Template::parse("x", "template:\n  ok\n  {{ open\n"),
            Err(TemplateError::UnknownPlaceholderSyntax { line: 3, .. })
        ));
        assert!(matches!(
            Template::parse("x", "template:\n  {% if x %}\n"),
            Err(TemplateError::UnknownPlaceholderSyntax { .. })
        ));
        assert!(matches!(
            Template::parse("x", "template:\n  {% for b in bs %}\n  {{ b.input }}\n"),
            Err(TemplateError::Syntax { .. })
        ));
        assert!(matches!(
            Template::parse("x", "template:\n  {{ b.input }}\n"),
            Err(TemplateError::UnknownPlaceholderSyntax { .. })
        ));
        assert!(matches!(
            Template::parse("x", "template:\n x\n"),
            Err(TemplateError::Syntax { line: 2, .. })
        ));
        assert!(matches!(Template::parse("x", "nothing: here\n"), Err(TemplateError::Syntax { .. })));
    }

    #[test]
    fn missing_binding_names_placeholder() {
        let t = ShippedTemplate::Classify.load();
        let err = t.render_fixed(&Binding::new().set("prompt", "P")).unwrap_err();
        assert_eq!(err, TemplateError::MissingBinding("input".into()));
    }

    #[test]
    fn loops_partition_successes_and_errors() {
        let src = "template:\n  S:\n  {% for b in infos if correct %}\n  + {{ b.input }}\n  {% endfor %}\n  E:\n  {% for b in infos if wrong %}\n  - {{ b.input }} ({{ b.output }} vs {{ b.target }})\n  {% endfor %}\n  end\n";
        let t = Template::parse("l", src).unwrap();
        assert_eq!(t.required_vars().iter().collect::<Vec<_>>(), vec!["infos"]);
        let infos = vec![
            BackwardInfo::new("x1", "Yes.", "yes"),
            BackwardInfo::new("x2", "no", "yes"),
            BackwardInfo::new("x3", "", "no"),
        ];
        let out = t.render_fixed(&Binding::new().list("infos", infos)).unwrap();
        assert_eq!(out, "S:\n+ x1\nE:\n- x2 (no vs yes)\n- x3 ( vs no)\nend");
        let bad = Binding::new().list("infos", vec![BackwardInfo::new("", "a", "b")]);
        assert_eq!(t.render_fixed(&bad).unwrap_err(), TemplateError::InvalidBackwardInfo(0));
    }

    #[test]
    fn message_selection() {
        let t = ShippedTemplate::PromptProposal.load();
        let b = Binding::new()
            .set("prompt", "p")
            .list("backward_infos", vec![BackwardInfo::new("x", "a", "b")]);
        let a = t.render(&b, MessageSelector::Fixed(0)).unwrap();
        let again = t.render(&b, MessageSelector::Fixed(0)).unwrap();
        assert_eq!(a, again);
        assert_eq!(a.message_index, Some(0));
        assert!(matches!(
            t.render(&b, MessageSelector::Fixed(9)),
            Err(TemplateError::MessageIndexOutOfRange { index: 9, count: 4 })
        ));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut seen = [false; 4];
        for _ in 0..100 {
            let r = t.render(&b, MessageSelector::Random(&mut rng)).unwrap();
            seen[r.message_index.unwrap()] = true;
        }
        assert!(seen.iter().all(|&s| s), "{seen:?}");
    }

    #[test]
    fn templates_without_message_leave_rng_untouched() {
        let t = ShippedTemplate::Classify.load();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut reference = rng.clone();
        let b = Binding::new().set("prompt", "p").set("input", "x");
        t.render(&b, MessageSelector::Random(&mut rng)).unwrap();
        assert_eq!(rng.next_u64(), reference.next_u64());
    }

    #[test]
    fn every_shipped_template_loads() {
        for s in ShippedTemplate::ALL {
            let t = s.load();
            assert!(!t.body().is_empty(), "{s:?}");
        }
    }
}
