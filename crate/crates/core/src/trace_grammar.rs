//! Structured reasoning trace format.
//!
//! A trace is three line-anchored steps followed by exactly one boxed answer:
//!
//! ```text
//! trace     = [preamble] step1 step2 step3 box [trailer]
//! step1     = line-start "Step 1:" text
//! step2     = line-start "Step 2:" text
//! step3     = line-start "Step 3:" text
//! box       = "\boxed{" answer "}"
//! answer    = 1*(any char except "{" / "}" / newline)
//! ```
//!
//! Step markers are matched case-insensitively, may be preceded by spaces or
//! tabs on their line, and must each occur exactly once and in order. The box
//! must occur exactly once and after the Step 3 marker. All four fields are
//! whitespace-trimmed and must be non-empty.

use std::fmt;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STAGE_TRIGGER: &str = "Emotional Trigger Identification";
pub const STAGE_REFLECTION: &str = "Human Emotional Reflection";
pub const STAGE_CONCLUSION: &str = "Emotional Conclusion";

const BOX_OPEN: &str = "\\boxed{";

/// The parsed form of a structured reasoning output.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StructuredTrace {
    /// Emotional trigger identification.
    pub step1: String,
    /// Human emotional reflection.
    pub step2: String,
    /// Emotional conclusion (valence and arousal).
    pub step3: String,
    /// Raw boxed answer text.
    pub answer: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParseFailureKind {
    MissingStep,
    OutOfOrderSteps,
    MissingBox,
    EmptyField,
    MultipleBoxes,
}

impl ParseFailureKind {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::MissingStep => "missing-step",
            Self::OutOfOrderSteps => "out-of-order-steps",
            Self::MissingBox => "missing-box",
            Self::EmptyField => "empty-field",
            Self::MultipleBoxes => "multiple-boxes",
        }
    }
}

impl fmt::Display for ParseFailureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed trace ({kind}): {detail}")]
pub struct ParseFailure {
    pub kind: ParseFailureKind,
    pub detail: String,
}

impl ParseFailure {
    fn new(kind: ParseFailureKind, detail: impl Into<String>) -> Self {
        Self {
            kind,
            detail: detail.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("invalid taxonomy: {0}")]
    InvalidTaxonomy(String),
    #[error("invalid trace: {0}")]
    InvalidTrace(String),
}

/// Instruction prompt asking for the three-stage reasoning format.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SetPrompt {
    pub instruction_text: String,
    pub task_text: String,
    pub taxonomy: Vec<String>,
}

impl SetPrompt {
    /// Full prompt as sent to a model.
    pub fn render(&self) -> String {
        format!(
            "{}\n\n{}\nOptions: {}",
            self.instruction_text,
            self.task_text,
            self.taxonomy.join(", ")
        )
    }
}

pub fn build_set_prompt(taxonomy: &[String], task_text: &str) -> Result<SetPrompt, TraceError> {
    if taxonomy.is_empty() {
        return Err(TraceError::InvalidTaxonomy("taxonomy is empty".into()));
    }
    for (i, label) in taxonomy.iter().enumerate() {
        if label.trim().is_empty() {
            return Err(TraceError::InvalidTaxonomy(format!("label {i} is blank")));
        }
        if taxonomy[..i].contains(label) {
            return Err(TraceError::InvalidTaxonomy(format!(
                "duplicate label {label:?}"
            )));
        }
    }
    let instruction_text = format!(
        "Structured Emotional Thinking. Reason in three steps, then give the answer.\n\
         Step 1: {STAGE_TRIGGER}: detect which elements in the scene (objects, actions, \
         environments, or facial cues) may trigger emotional responses.\n\
         Step 2: {STAGE_REFLECTION}: describe how a human observer would emotionally \
         respond to these elements.\n\
         Step 3: {STAGE_CONCLUSION}: determine whether the overall emotion is positive or \
         negative, and assess its arousal level (e.g., calm vs. excited).\n\
         Write each step on its own line starting with \"Step 1:\", \"Step 2:\" and \
         \"Step 3:\", then enclose the final emotion label in \\boxed{{}}."
    );
    Ok(SetPrompt {
        instruction_text,
        task_text: task_text.to_string(),
        taxonomy: taxonomy.to_vec(),
    })
}

fn step_marker_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?im)^[ \t]*step[ \t]*([123])[ \t]*:").unwrap())
}

/// Parses a raw model output. Never partially succeeds.
pub fn parse_trace(text: &str) -> Result<StructuredTrace, ParseFailure> {
    use ParseFailureKind::*;

    // (step number, marker start, marker end)
    let markers: Vec<(usize, usize, usize)> = step_marker_re()
        .captures_iter(text)
        .map(|c| {
            let m = c.get(0).unwrap();
            let n = c[1].parse::<usize>().unwrap();
            (n, m.start(), m.end())
        })
        .collect();

    for n in 1..=3 {
        if !markers.iter().any(|&(k, _, _)| k == n) {
            return Err(ParseFailure::new(
                MissingStep,
                format!("no Step {n} marker"),
            ));
        }
    }
    if markers.len() != 3 {
        return Err(ParseFailure::new(OutOfOrderSteps, "repeated step marker"));
    }
    if markers.iter().map(|m| m.0).ne(1..=3) {
        return Err(ParseFailure::new(
            OutOfOrderSteps,
            "step markers are not in the order 1, 2, 3",
        ));
    }

    let boxes: Vec<usize> = text.match_indices(BOX_OPEN).map(|(i, _)| i).collect();
    let box_start = match boxes.as_slice() {
        [] => return Err(ParseFailure::new(MissingBox, "no \\boxed{} answer")),
        [one] => *one,
        _ => {
            return Err(ParseFailure::new(
                MultipleBoxes,
                format!("{} \\boxed{{}} answers", boxes.len()),
            ))
        }
    };
    let step3_end = markers[2].2;
    if box_start < step3_end {
        return Err(ParseFailure::new(
            OutOfOrderSteps,
            "boxed answer appears before Step 3",
        ));
    }

    let content_start = box_start + BOX_OPEN.len();
    let close = text[content_start..]
        .find('}')
        .ok_or_else(|| ParseFailure::new(MissingBox, "unterminated \\boxed{"))?;
    let raw_answer = &text[content_start..content_start + close];
    if raw_answer.contains('{') || raw_answer.contains('\n') {
        return Err(ParseFailure::new(MissingBox, "malformed \\boxed{} content"));
    }

    let step1 = text[markers[0].2..markers[1].1].trim();
    let step2 = text[markers[1].2..markers[2].1].trim();
    let step3 = text[step3_end..box_start].trim();
    let answer = raw_answer.trim();
    for (name, field) in [
        ("step1", step1),
        ("step2", step2),
        ("step3", step3),
        ("answer", answer),
    ] {
        if field.is_empty() {
            return Err(ParseFailure::new(EmptyField, format!("{name} is empty")));
        }
    }

    Ok(StructuredTrace {
        step1: step1.to_string(),
        step2: step2.to_string(),
        step3: step3.to_string(),
        answer: answer.to_string(),
    })
}

/// Canonical rendering. Fails if the trace could not be parsed back unchanged.
pub fn render_trace(trace: &StructuredTrace) -> Result<String, TraceError> {
    let fields = [
        ("step1", &trace.step1),
        ("step2", &trace.step2),
        ("step3", &trace.step3),
        ("answer", &trace.answer),
    ];
    for (name, field) in fields {
        if field.trim().is_empty() {
            return Err(TraceError::InvalidTrace(format!("{name} is empty")));
        }
        if field.trim() != field.as_str() {
            return Err(TraceError::InvalidTrace(format!(
                "{name} has surrounding whitespace"
            )));
        }
        if step_marker_re().is_match(field) || field.contains(BOX_OPEN) {
            return Err(TraceError::InvalidTrace(format!(
                "{name} contains a structural marker"
            )));
        }
    }
    if trace.answer.contains(['{', '}', '\n']) {
        return Err(TraceError::InvalidTrace(
            "answer contains a box delimiter or newline".into(),
        ));
    }
    Ok(format!(
        "Step 1: {}\nStep 2: {}\nStep 3: {}\n\\boxed{{{}}}",
        trace.step1, trace.step2, trace.step3, trace.answer
    ))
}

pub fn extract_answer(trace: &StructuredTrace) -> &str {
    &trace.answer
}

pub fn extract_step1(trace: &StructuredTrace) -> &str {
    &trace.step1
}

/// Step 1 and step 2 joined by a single newline.
pub fn extract_steps12(trace: &StructuredTrace) -> String {
    format!("{}\n{}", trace.step1, trace.step2)
}

pub fn check_format(text: &str) -> bool {
    parse_trace(text).is_ok()
}
