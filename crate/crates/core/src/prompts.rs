//! Instruction prompts for decoder-only models, one template per task.
//!
//! Templates live in `templates/` and are embedded at compile time. Named
//! placeholders are `{text}`, `{label}`, `{example_textN}` and
//! `{example_textN_label}`; bare `{}` placeholders bind positionally to
//! text, then label. Rendering substitutes slots in a single pass, so braces
//! inside substituted values are never re-expanded.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TaskId;

pub const TASK_A_TEMPLATE: &str = include_str!("../templates/task_a.txt");
pub const TASK_B_TEMPLATE: &str = include_str!("../templates/task_b.txt");
pub const TASK_C_TEMPLATE: &str = include_str!("../templates/task_c.txt");

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PromptError {
    #[error("template expects {expected} few-shot examples, got {got}")]
    WrongExampleCount { expected: usize, got: usize },
    #[error("unresolved placeholder {{{0}}}")]
    UnresolvedPlaceholder(String),
    #[error("template for task {task} is missing placeholder {{{name}}}")]
    MissingPlaceholder { task: TaskId, name: String },
    #[error("few-shot example {0} has an empty text or label")]
    EmptyExample(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Text,
    Label,
    ExampleText(usize),
    ExampleLabel(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Literal(String),
    Slot(Slot),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotExample {
    pub text: String,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    task: TaskId,
    body: String,
    segments: Vec<Segment>,
    num_examples: usize,
}

fn parse_slot(name: &str, positional: &mut usize) -> Result<Slot, PromptError> {
    if name.is_empty() {
        let slot = match *positional {
            0 => Slot::Text,
            1 => Slot::Label,
            _ => return Err(PromptError::UnresolvedPlaceholder(String::new())),
        };
        *positional += 1;
        return Ok(slot);
    }
    match name {
        "text" => return Ok(Slot::Text),
        "label" => return Ok(Slot::Label),
        _ => {}
    }
    if let Some(rest) = name.strip_prefix("example_text") {
        let (num, is_label) = match rest.strip_suffix("_label") {
            Some(n) => (n, true),
            None => (rest, false),
        };
        if let Ok(i) = num.parse::<usize>() {
            if i >= 1 {
                return Ok(if is_label {
                    Slot::ExampleLabel(i - 1)
                } else {
                    Slot::ExampleText(i - 1)
                });
            }
        }
    }
    Err(PromptError::UnresolvedPlaceholder(name.to_string()))
}

fn is_placeholder_name(s: &str) -> bool {
    s.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl PromptTemplate {
    pub fn for_task(task: TaskId) -> Self {
        let body = match task {
            TaskId::A => TASK_A_TEMPLATE,
            TaskId::B => TASK_B_TEMPLATE,
            TaskId::C => TASK_C_TEMPLATE,
        };
        Self::parse(task, body).expect("bundled templates are well-formed")
    }

    pub fn parse(task: TaskId, body: &str) -> Result<Self, PromptError> {
        let mut segments = Vec::new();
        let mut literal = String::new();
        let mut positional = 0;
        let mut rest = body;
        while let Some(open) = rest.find('{') {
            let after = &rest[open + 1..];
            match after.find('}') {
                Some(close) if is_placeholder_name(&after[..close]) => {
                    literal.push_str(&rest[..open]);
                    if !literal.is_empty() {
                        segments.push(Segment::Literal(std::mem::take(&mut literal)));
                    }
                    segments.push(Segment::Slot(parse_slot(&after[..close], &mut positional)?));
                    rest = &after[close + 1..];
                }
                _ => {
                    literal.push_str(&rest[..=open]);
                    rest = after;
                }
            }
        }
        literal.push_str(rest);
        if !literal.is_empty() {
            segments.push(Segment::Literal(literal));
        }

        let has = |s: Slot| segments.contains(&Segment::Slot(s));
        for (slot, name) in [(Slot::Text, "text"), (Slot::Label, "label")] {
            if !has(slot) {
                return Err(PromptError::MissingPlaceholder {
                    task,
                    name: name.to_string(),
                });
            }
        }
        let num_examples = segments
            .iter()
            .filter_map(|s| match s {
                Segment::Slot(Slot::ExampleText(i) | Slot::ExampleLabel(i)) => Some(i + 1),
                _ => None,
            })
            .max()
            .unwrap_or(0);
        for i in 0..num_examples {
            if !has(Slot::ExampleText(i)) {
                return Err(PromptError::MissingPlaceholder {
                    task,
                    name: format!("example_text{}", i + 1),
                });
            }
            if !has(Slot::ExampleLabel(i)) {
                return Err(PromptError::MissingPlaceholder {
                    task,
                    name: format!("example_text{}_label", i + 1),
                });
            }
        }
        Ok(PromptTemplate {
            task,
            body: body.to_string(),
            segments,
            num_examples,
        })
    }

    pub fn task(&self) -> TaskId {
        self.task
    }

    pub fn body(&self) -> &str {
        &self.body
    }

    /// Number of few-shot slots; zero for templates without examples.
    pub fn num_examples(&self) -> usize {
        self.num_examples
    }

    /// Renders the prompt. With `label = None` the response slot stays empty.
    pub fn render(
        &self,
        text: &str,
        label: Option<&str>,
        examples: Option<&[FewShotExample]>,
    ) -> Result<String, PromptError> {
        let examples = examples.unwrap_or(&[]);
        if examples.len() != self.num_examples {
            return Err(PromptError::WrongExampleCount {
                expected: self.num_examples,
                got: examples.len(),
            });
        }
        if let Some(i) = examples.iter().position(|e| e.text.is_empty() || e.label.is_empty()) {
            return Err(PromptError::EmptyExample(i));
        }
        let mut out = String::with_capacity(self.body.len() + text.len());
        for seg in &self.segments {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Slot(Slot::Text) => out.push_str(text),
                Segment::Slot(Slot::Label) => out.push_str(label.unwrap_or("")),
                Segment::Slot(Slot::ExampleText(i)) => out.push_str(&examples[*i].text),
                Segment::Slot(Slot::ExampleLabel(i)) => out.push_str(&examples[*i].label),
            }
        }
        Ok(out)
    }
}

/// Renders the bundled template for `task`.
pub fn render(
    task: TaskId,
    text: &str,
    label: Option<&str>,
    examples: Option<&[FewShotExample]>,
) -> Result<String, PromptError> {
    PromptTemplate::for_task(task).render(text, label, examples)
}
