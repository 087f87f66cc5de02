//! Learner and optimizer prompt construction and strict reply parsing.
//!
//! Template files are plain text split into named sections by marker lines
//! of the form `=== section_name ===`. The rendered prompts use fixed
//! `## Heading` lines so replies and transcripts stay easy to inspect.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::digest_hex;

pub const DEFAULT_QUESTION_BUDGET: usize = 500;

pub const LEARNER_PRESET: &str = include_str!("../presets/learner.txt");
pub const OPTIMIZER_PRESET: &str = include_str!("../presets/optimizer.txt");
/// Hand-written initial questions.
pub const INITIAL_QUESTIONS_PRESET: &str = include_str!("../presets/q0.json");
/// Questions learned on UCF-Crime with an InternVL2-8B backbone.
pub const LEARNED_QUESTIONS_PRESET: &str = include_str!("../presets/qstar_ucf.json");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("no recognizable verdict in reply")]
    NoVerdict,
    #[error("no numbered question list in reply")]
    NoQuestions,
    #[error("expected {expected} questions, got {got}")]
    WrongCount { expected: usize, got: usize },
    #[error("invalid question set: {0}")]
    InvalidQuestions(String),
    #[error("template: {0}")]
    Template(String),
    #[error("{preds} predictions but {targets} targets")]
    LengthMismatch { preds: usize, targets: usize },
}

impl PromptError {
    /// Failures a fresh model call may fix.
    pub fn is_reply_failure(&self) -> bool {
        matches!(
            self,
            Self::NoVerdict | Self::NoQuestions | Self::WrongCount { .. } | Self::InvalidQuestions(_)
        )
    }
}

/// The learnable guiding questions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "StoredQuestions", into = "StoredQuestions")]
pub struct QuestionSet {
    questions: Vec<String>,
    pub iteration: u64,
    pub val_accuracy: Option<f64>,
}

impl QuestionSet {
    pub fn new(questions: Vec<String>) -> Result<Self, PromptError> {
        Self::with_budget(questions, DEFAULT_QUESTION_BUDGET)
    }

    /// Trims every question and rejects empty, over-budget, multi-line or
    /// repeated ones.
    pub fn with_budget(questions: Vec<String>, budget: usize) -> Result<Self, PromptError> {
        if questions.is_empty() {
            return Err(PromptError::InvalidQuestions("at least one question is required".into()));
        }
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(questions.len());
        for (i, q) in questions.into_iter().enumerate() {
            let q = q.trim().to_string();
            let bad = |why: &str| PromptError::InvalidQuestions(format!("question {}: {why}", i + 1));
            if q.is_empty() {
                return Err(bad("empty"));
            }
            if q.contains(['\n', '\r']) {
                return Err(bad("contains a line break"));
            }
            if q.chars().count() > budget {
                return Err(bad(&format!("longer than {budget} characters")));
            }
            if !seen.insert(q.clone()) {
                return Err(bad("duplicate"));
            }
            out.push(q);
        }
        Ok(Self {
            questions: out,
            iteration: 0,
            val_accuracy: None,
        })
    }

    pub fn questions(&self) -> &[String] {
        &self.questions
    }

    pub fn len(&self) -> usize {
        self.questions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    /// Identity of the question texts, ignoring provenance.
    pub fn digest(&self) -> String {
        let parts: Vec<&[u8]> = self.questions.iter().map(|q| q.as_bytes()).collect();
        digest_hex(&parts)
    }

    pub fn numbered(&self) -> String {
        let mut s = String::new();
        for (i, q) in self.questions.iter().enumerate() {
            let _ = writeln!(s, "{}. {}", i + 1, q);
        }
        s
    }

    pub fn same_questions(&self, other: &QuestionSet) -> bool {
        self.questions == other.questions
    }
}

#[derive(Serialize, Deserialize)]
struct StoredQuestions {
    questions: Vec<String>,
    #[serde(default)]
    iteration: u64,
    #[serde(default)]
    val_accuracy: Option<f64>,
}

impl TryFrom<StoredQuestions> for QuestionSet {
    type Error = PromptError;

    fn try_from(raw: StoredQuestions) -> Result<Self, Self::Error> {
        let mut q = QuestionSet::new(raw.questions)?;
        q.iteration = raw.iteration;
        q.val_accuracy = raw.val_accuracy;
        Ok(q)
    }
}

impl From<QuestionSet> for StoredQuestions {
    fn from(q: QuestionSet) -> Self {
        Self {
            questions: q.questions,
            iteration: q.iteration,
            val_accuracy: q.val_accuracy,
        }
    }
}

fn parse_sections(text: &str) -> Result<BTreeMap<String, String>, PromptError> {
    static MARKER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^===\s*([A-Za-z0-9_]+)\s*===\s*$").unwrap());
    let mut sections = BTreeMap::new();
    let mut current: Option<(String, Vec<&str>)> = None;
    for line in text.lines() {
        if let Some(cap) = MARKER.captures(line.trim_end()) {
            if let Some((name, body)) = current.take() {
                sections.insert(name, body.join("\n").trim().to_string());
            }
            let name = cap[1].to_string();
            if sections.contains_key(&name) {
                return Err(PromptError::Template(format!("section {name} appears twice")));
            }
            current = Some((name, Vec::new()));
        } else if let Some((_, body)) = current.as_mut() {
            body.push(line);
        } else if !line.trim().is_empty() {
            return Err(PromptError::Template("text before the first section marker".into()));
        }
    }
    if let Some((name, body)) = current {
        sections.insert(name, body.join("\n").trim().to_string());
    }
    Ok(sections)
}

fn take_section(sections: &mut BTreeMap<String, String>, name: &str) -> Result<String, PromptError> {
    match sections.remove(name) {
        Some(body) if !body.is_empty() => Ok(body),
        Some(_) => Err(PromptError::Template(format!("section {name} is empty"))),
        None => Err(PromptError::Template(format!("missing section {name}"))),
    }
}

fn reject_unknown(sections: BTreeMap<String, String>) -> Result<(), PromptError> {
    match sections.keys().next() {
        Some(name) => Err(PromptError::Template(format!("unknown section {name}"))),
        None => Ok(()),
    }
}

/// Learner template: the task description, the header placed above the
/// guiding questions, and the output format instructions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LearnerTemplate {
    pub model_description: String,
    pub prompt_questions_header: String,
    pub output_formatting: String,
    /// Appended when a one-sentence justification is wanted.
    pub explanation_request: String,
}

impl LearnerTemplate {
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut s = parse_sections(text)?;
        let t = Self {
            model_description: take_section(&mut s, "model_description")?,
            prompt_questions_header: take_section(&mut s, "prompt_questions_header")?,
            output_formatting: take_section(&mut s, "output_formatting")?,
            explanation_request: match s.remove("explanation_request") {
                Some(body) if !body.is_empty() => body,
                _ => default_explanation_request(),
            },
        };
        reject_unknown(s)?;
        t.validate()?;
        Ok(t)
    }

    pub fn preset() -> Self {
        Self::parse(LEARNER_PRESET).expect("shipped learner preset is valid")
    }

    pub fn validate(&self) -> Result<(), PromptError> {
        if !self.output_formatting.to_ascii_lowercase().contains("answer:") {
            return Err(PromptError::Template(
                "output_formatting must ask for an `Answer: <0|1>` verdict line".into(),
            ));
        }
        Ok(())
    }
}

fn default_explanation_request() -> String {
    parse_sections(LEARNER_PRESET)
        .ok()
        .and_then(|mut s| s.remove("explanation_request"))
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OptimizerTemplate {
    pub instruction: String,
    pub model_description: String,
    /// May reference the question count as `{m}`.
    pub optimization_instruction: String,
}

impl OptimizerTemplate {
    pub fn parse(text: &str) -> Result<Self, PromptError> {
        let mut s = parse_sections(text)?;
        let t = Self {
            instruction: take_section(&mut s, "instruction")?,
            model_description: take_section(&mut s, "model_description")?,
            optimization_instruction: take_section(&mut s, "optimization_instruction")?,
        };
        reject_unknown(s)?;
        Ok(t)
    }

    pub fn preset() -> Self {
        Self::parse(OPTIMIZER_PRESET).expect("shipped optimizer preset is valid")
    }
}

/// Placeholder marking where one image attaches in the message.
pub const IMAGE_PLACEHOLDER: &str = "<image>";

pub const PREDICTIONS_HEADING: &str = "## Model Predictions & Targets";
pub const CURRENT_QUESTIONS_HEADING: &str = "## Current Prompt Questions";

pub fn render_learner_prompt(template: &LearnerTemplate, q: &QuestionSet, image_count: usize) -> String {
    let mut p = String::new();
    let _ = writeln!(p, "## Model Description\n{}\n", template.model_description);
    let _ = writeln!(p, "## Prompt Questions\n{}", template.prompt_questions_header);
    p.push_str(&q.numbered());
    p.push_str("\n## Input\n");
    for i in 0..image_count {
        let _ = writeln!(p, "Frame {}: {IMAGE_PLACEHOLDER}", i + 1);
    }
    let _ = write!(p, "\n## Output Formatting\n{}\n", template.output_formatting);
    p
}

/// Learner prompt plus the request for a one-sentence justification.
pub fn render_scoring_prompt(template: &LearnerTemplate, q: &QuestionSet, image_count: usize) -> String {
    let mut p = render_learner_prompt(template, q, image_count);
    let _ = writeln!(p, "{}", template.explanation_request);
    p
}

pub fn render_optimizer_prompt(
    template: &OptimizerTemplate,
    q: &QuestionSet,
    preds: &[u8],
    targets: &[u8],
    frames_per_video: &[usize],
    expected_m: usize,
) -> Result<String, PromptError> {
    if preds.len() != targets.len() {
        return Err(PromptError::LengthMismatch {
            preds: preds.len(),
            targets: targets.len(),
        });
    }
    let mut p = String::new();
    let _ = writeln!(p, "## Instruction\n{}\n", template.instruction);
    p.push_str("## Inputs\n");
    for (v, &count) in frames_per_video.iter().enumerate() {
        let _ = write!(p, "Video {}:", v + 1);
        for _ in 0..count {
            let _ = write!(p, " {IMAGE_PLACEHOLDER}");
        }
        p.push('\n');
    }
    let _ = writeln!(p, "\n## Model Description\n{}\n", template.model_description);
    let _ = writeln!(p, "{CURRENT_QUESTIONS_HEADING}");
    p.push_str(&q.numbered());
    let _ = writeln!(p, "\n{PREDICTIONS_HEADING}");
    for (v, (pred, target)) in preds.iter().zip(targets).enumerate() {
        let _ = writeln!(p, "- video {}: prediction = {pred}, target = {target}", v + 1);
    }
    let instruction = template.optimization_instruction.replace("{m}", &expected_m.to_string());
    let _ = writeln!(p, "\n## Optimization Instruction\n{instruction}");
    let _ = writeln!(p, "Return exactly {expected_m} questions, numbered 1. to {expected_m}.");
    Ok(p)
}

static ANSWER_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"(?i)\banswer\s*[:=]\s*[*"'\[(]*\s*([01])\b"#).unwrap());
static ANOMALY_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"(?i)\banomaly\s*[:=]\s*[*"'\[(]*\s*(yes|no)\b"#).unwrap());
static BARE_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"(?m)^[ \t]*[*"'\[(]*([01])[*"'\])]*[ \t]*\.?[ \t]*$"#).unwrap());

/// Extracts the model's 0/1 verdict; the last recognizable token wins.
pub fn parse_binary_verdict(reply: &str) -> Result<u8, PromptError> {
    let mut best: Option<(usize, u8)> = None;
    let mut consider = |pos: usize, v: u8| {
        if best.is_none_or(|(p, _)| pos >= p) {
            best = Some((pos, v));
        }
    };
    for cap in ANSWER_RE.captures_iter(reply) {
        let m = cap.get(1).unwrap();
        consider(m.start(), u8::from(m.as_str() == "1"));
    }
    for cap in ANOMALY_RE.captures_iter(reply) {
        let m = cap.get(1).unwrap();
        consider(m.start(), u8::from(m.as_str().eq_ignore_ascii_case("yes")));
    }
    for cap in BARE_RE.captures_iter(reply) {
        let m = cap.get(1).unwrap();
        consider(m.start(), u8::from(m.as_str() == "1"));
    }
    best.map(|(_, v)| v).ok_or(PromptError::NoVerdict)
}

/// The `Explanation:` sentence of a reply, if present.
pub fn parse_explanation(reply: &str) -> Option<String> {
    static RE: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?im)^[ \t*]*explanation\s*[:=]\s*(.+)$").unwrap());
    RE.captures_iter(reply)
        .last()
        .map(|c| c[1].trim().trim_matches('*').trim().to_string())
        .filter(|s| !s.is_empty())
}

static NUMBERED_RE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^\s*(?:\*\*)?(\d{1,3})[.)](?:\*\*)?\s+(.*\S)\s*$").unwrap());

/// Consecutive runs of lines numbered `1.`, `2.`, ... in reading order.
pub(crate) fn numbered_runs(text: &str) -> Vec<Vec<String>> {
    let mut runs: Vec<Vec<String>> = Vec::new();
    let mut current: Vec<String> = Vec::new();
    for line in text.lines() {
        let Some(cap) = NUMBERED_RE.captures(line) else {
            continue;
        };
        let n: usize = cap[1].parse().unwrap_or(0);
        let body = cap[2].trim().trim_matches('*').trim().to_string();
        if n == 1 {
            if !current.is_empty() {
                runs.push(std::mem::take(&mut current));
            }
            current.push(body);
        } else if n == current.len() + 1 && !current.is_empty() {
            current.push(body);
        } else if !current.is_empty() {
            runs.push(std::mem::take(&mut current));
        }
    }
    if !current.is_empty() {
        runs.push(current);
    }
    runs
}

/// Extracts a numbered list of exactly `expected_m` questions. When several
/// lists appear, the last one of the right length is taken.
pub fn parse_question_set(reply: &str, expected_m: usize) -> Result<QuestionSet, PromptError> {
    let runs = numbered_runs(reply);
    let Some(last) = runs.last() else {
        return Err(PromptError::NoQuestions);
    };
    match runs.iter().rev().find(|r| r.len() == expected_m) {
        Some(run) => QuestionSet::new(run.clone()),
        None => Err(PromptError::WrongCount {
            expected: expected_m,
            got: last.len(),
        }),
    }
}
