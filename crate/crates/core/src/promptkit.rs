//! Prompt rendering from line-oriented template files.
//!
//! Template syntax, one construct per line:
//!
//! - `<name>` placeholders, substituted in a single pass (values are never
//!   re-scanned, so MCQ text containing `<...>` is safe);
//! - `{{?answer}}`, `{{?explanation}}`, `{{?feedback}}` line guards, kept only
//!   when the [`PromptContentMode`] includes that part;
//! - `{{#examples}}` ... `{{/examples}}` repeated once per in-context example;
//! - `{{! ... }}` comment lines.
//!
//! Rendered lines are right-trimmed and joined with `\n`, no trailing newline.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{same_text, Mcq, DISTRACTOR_COUNT};
use crate::generation::ErrorExplanation;

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("template {template}, line {line}: {message}")]
    Syntax {
        template: String,
        line: usize,
        message: String,
    },
    #[error("template {template}: placeholder <{name}> has no value")]
    Unbound { template: String, name: String },
    #[error("at least one in-context example is required")]
    NoExamples,
    #[error("example {0} does not have exactly 3 distractors")]
    MalformedExample(String),
    #[error("expected 4 options, got {0}")]
    OptionCount(usize),
    #[error("the key is not among the options")]
    KeyNotAmongOptions,
    #[error("both options are the same text")]
    IdenticalOptions,
    #[error("cannot read template {path}: {message}")]
    Io { path: String, message: String },
}

/// How much of an MCQ is shown to the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptContentMode {
    /// Key, explanation, and feedback.
    #[default]
    All,
    /// Key only.
    Key,
    /// Neither key nor explanation nor feedback.
    None,
}

impl PromptContentMode {
    fn allows(self, guard: Guard) -> bool {
        matches!((self, guard), (PromptContentMode::All, _) | (PromptContentMode::Key, Guard::Answer))
    }

    pub fn includes_feedback(self) -> bool {
        self == PromptContentMode::All
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemplateId {
    Knn,
    Cot,
    Rb,
    Answer,
    Rank,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedPrompt {
    pub system: Option<String>,
    pub user: String,
    pub template_id: TemplateId,
    pub content_mode: PromptContentMode,
    /// Rendering irregularities worth recording in provenance, such as an
    /// example with no feedback text.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Guard {
    Answer,
    Explanation,
    Feedback,
}

#[derive(Debug, Clone, PartialEq)]
enum Segment {
    Text(String),
    Slot(String),
}

#[derive(Debug, Clone, PartialEq)]
struct Line {
    guards: Vec<Guard>,
    segments: Vec<Segment>,
}

#[derive(Debug, Clone, PartialEq)]
enum Block {
    Line(Line),
    Examples(Vec<Line>),
}

type Bindings = BTreeMap<&'static str, String>;

/// A parsed template file.
#[derive(Debug, Clone, PartialEq)]
pub struct Template {
    name: String,
    blocks: Vec<Block>,
}

impl Template {
    pub fn parse(name: &str, source: &str) -> Result<Self, PromptError> {
        let syntax = |line: usize, message: &str| PromptError::Syntax {
            template: name.to_string(),
            line,
            message: message.to_string(),
        };
        let mut blocks = Vec::new();
        let mut section: Option<Vec<Line>> = None;
        for (i, raw) in source.lines().enumerate() {
            let line_no = i + 1;
            let trimmed = raw.trim();
            if trimmed.starts_with("{{!") {
                continue;
            }
            match trimmed {
                "{{#examples}}" => {
                    if section.is_some() {
                        return Err(syntax(line_no, "nested examples section"));
                    }
                    section = Some(Vec::new());
                    continue;
                }
                "{{/examples}}" => {
                    let lines = section
                        .take()
                        .ok_or_else(|| syntax(line_no, "unopened examples section"))?;
                    blocks.push(Block::Examples(lines));
                    continue;
                }
                _ => {}
            }
            let line = parse_line(raw).map_err(|m| syntax(line_no, &m))?;
            match section.as_mut() {
                Some(lines) => lines.push(line),
                None => blocks.push(Block::Line(line)),
            }
        }
        if section.is_some() {
            return Err(syntax(source.lines().count(), "unclosed examples section"));
        }
        Ok(Self {
            name: name.to_string(),
            blocks,
        })
    }

    fn render(
        &self,
        mode: PromptContentMode,
        bindings: &Bindings,
        examples: &[Bindings],
    ) -> Result<String, PromptError> {
        let mut out: Vec<String> = Vec::new();
        for block in &self.blocks {
            match block {
                Block::Line(line) => self.push_line(&mut out, line, mode, bindings)?,
                Block::Examples(lines) => {
                    for example in examples {
                        for line in lines {
                            self.push_line(&mut out, line, mode, example)?;
                        }
                    }
                }
            }
        }
        let text = out.join("\n");
        Ok(text
            .split('\n')
            .map(str::trim_end)
            .collect::<Vec<_>>()
            .join("\n"))
    }

    fn push_line(
        &self,
        out: &mut Vec<String>,
        line: &Line,
        mode: PromptContentMode,
        bindings: &Bindings,
    ) -> Result<(), PromptError> {
        if !line.guards.iter().all(|g| mode.allows(*g)) {
            return Ok(());
        }
        let mut text = String::new();
        for seg in &line.segments {
            match seg {
                Segment::Text(t) => text.push_str(t),
                Segment::Slot(name) => {
                    let value = bindings.get(name.as_str()).ok_or_else(|| PromptError::Unbound {
                        template: self.name.clone(),
                        name: name.clone(),
                    })?;
                    text.push_str(value);
                }
            }
        }
        out.push(text);
        Ok(())
    }
}

fn parse_line(raw: &str) -> Result<Line, String> {
    let mut rest = raw;
    let mut guards = Vec::new();
    while let Some(after) = rest.strip_prefix("{{?") {
        let end = after.find("}}").ok_or("unterminated guard")?;
        let guard = match &after[..end] {
            "answer" => Guard::Answer,
            "explanation" => Guard::Explanation,
            "feedback" => Guard::Feedback,
            other => return Err(format!("unknown guard {other}")),
        };
        guards.push(guard);
        rest = &after[end + 2..];
    }
    let mut segments = Vec::new();
    let mut text = String::new();
    let mut chars = rest.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        if c == '<' {
            if let Some(len) = placeholder_len(&rest[i + 1..]) {
                if !text.is_empty() {
                    segments.push(Segment::Text(std::mem::take(&mut text)));
                }
                segments.push(Segment::Slot(rest[i + 1..i + 1 + len].to_string()));
                // skip the name and the closing '>'
                while let Some(&(j, _)) = chars.peek() {
                    if j > i + len + 1 {
                        break;
                    }
                    chars.next();
                }
                continue;
            }
        }
        text.push(c);
    }
    if !text.is_empty() {
        segments.push(Segment::Text(text));
    }
    Ok(Line { guards, segments })
}

/// Length of a placeholder name starting right after `<`, if the text
/// forms `<lowercase words>`.
fn placeholder_len(s: &str) -> Option<usize> {
    let end = s.find('>')?;
    let name = &s[..end];
    let valid = !name.is_empty()
        && name.starts_with(|c: char| c.is_ascii_lowercase())
        && name
            .chars()
            .all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == ' ' || c == '-');
    valid.then_some(end)
}

const BUILTIN: [(&str, &str); 7] = [
    ("knn", include_str!("../templates/knn.txt")),
    ("cot", include_str!("../templates/cot.txt")),
    ("rb", include_str!("../templates/rb.txt")),
    ("rank", include_str!("../templates/rank.txt")),
    ("answer", include_str!("../templates/answer.txt")),
    ("open_answer", include_str!("../templates/open_answer.txt")),
    ("distractors", include_str!("../templates/distractors.txt")),
];

/// The full set of templates used by every approach.
#[derive(Debug, Clone)]
pub struct PromptKit {
    knn: Template,
    cot: Template,
    rb: Template,
    rank: Template,
    answer: Template,
    open_answer: Template,
    distractors: Template,
    system: Option<String>,
}

impl PromptKit {
    pub fn builtin() -> Self {
        Self::assemble(|name| {
            let src = BUILTIN
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, s)| *s)
                .expect("builtin template");
            Ok(src.to_string())
        })
        .expect("builtin templates parse")
    }

    /// Loads `<name>.txt` files from `dir`, falling back to the built-in copy
    /// for any file that is absent.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        Self::assemble(|name| {
            let path = dir.join(format!("{name}.txt"));
            if path.exists() {
                fs::read_to_string(&path).map_err(|e| PromptError::Io {
                    path: path.display().to_string(),
                    message: e.to_string(),
                })
            } else {
                Ok(BUILTIN
                    .iter()
                    .find(|(n, _)| *n == name)
                    .map(|(_, s)| s.to_string())
                    .expect("builtin template"))
            }
        })
    }

    fn assemble(load: impl Fn(&str) -> Result<String, PromptError>) -> Result<Self, PromptError> {
        let get = |name: &str| -> Result<Template, PromptError> { Template::parse(name, &load(name)?) };
        Ok(Self {
            knn: get("knn")?,
            cot: get("cot")?,
            rb: get("rb")?,
            rank: get("rank")?,
            answer: get("answer")?,
            open_answer: get("open_answer")?,
            distractors: get("distractors")?,
            system: None,
        })
    }

    /// Optional system message attached to every rendered prompt.
    pub fn with_system(mut self, system: Option<String>) -> Self {
        self.system = system;
        self
    }

    fn finish(
        &self,
        user: String,
        template_id: TemplateId,
        content_mode: PromptContentMode,
        notes: Vec<String>,
    ) -> RenderedPrompt {
        RenderedPrompt {
            system: self.system.clone(),
            user,
            template_id,
            content_mode,
            notes,
        }
    }

    pub fn render_cot(&self, target: &Mcq, mode: PromptContentMode) -> Result<RenderedPrompt, PromptError> {
        let mut notes = Vec::new();
        let b = mcq_bindings(target, "", mode, &mut notes);
        let user = self.cot.render(mode, &b, &[])?;
        Ok(self.finish(user, TemplateId::Cot, mode, notes))
    }

    pub fn render_knn(
        &self,
        target: &Mcq,
        examples: &[&Mcq],
        mode: PromptContentMode,
    ) -> Result<RenderedPrompt, PromptError> {
        if examples.is_empty() {
            return Err(PromptError::NoExamples);
        }
        let mut notes = Vec::new();
        let mut example_bindings = Vec::with_capacity(examples.len());
        for ex in examples {
            if ex.distractors.len() != DISTRACTOR_COUNT {
                return Err(PromptError::MalformedExample(ex.id.clone()));
            }
            let mut b = mcq_bindings(ex, "in-context ", mode, &mut notes);
            distractor_bindings(&mut b, ex, "in-context ", mode, &mut notes);
            example_bindings.push(b);
        }
        let b = mcq_bindings(target, "target ", mode, &mut notes);
        let user = self.knn.render(mode, &b, &example_bindings)?;
        Ok(self.finish(user, TemplateId::Knn, mode, notes))
    }

    /// Target block of the kNN format with no examples; the input format for
    /// fine-tuned generators.
    pub fn render_ft(&self, target: &Mcq, mode: PromptContentMode) -> Result<RenderedPrompt, PromptError> {
        let mut notes = Vec::new();
        let b = mcq_bindings(target, "target ", mode, &mut notes);
        let user = self.knn.render(mode, &b, &[])?;
        Ok(self.finish(user, TemplateId::Knn, mode, notes))
    }

    pub fn render_rb(
        &self,
        target: &Mcq,
        error_pool: &[ErrorExplanation],
        mode: PromptContentMode,
    ) -> Result<RenderedPrompt, PromptError> {
        let mut notes = Vec::new();
        let mut b = mcq_bindings(target, "", mode, &mut notes);
        let list: String = error_pool.iter().map(|e| format!("\n- {}", e.text)).collect();
        if error_pool.is_empty() {
            notes.push("error pool empty; model asked to propose its own errors".into());
        }
        b.insert("error list", list);
        let user = self.rb.render(mode, &b, &[])?;
        Ok(self.finish(user, TemplateId::Rb, mode, notes))
    }

    /// Lettered multiple-choice prompt; `options` are shown as A-D in order.
    pub fn render_answer(&self, mcq: &Mcq, options: &[String]) -> Result<RenderedPrompt, PromptError> {
        if options.len() != 4 {
            return Err(PromptError::OptionCount(options.len()));
        }
        if !options.iter().any(|o| same_text(o, &mcq.key)) {
            return Err(PromptError::KeyNotAmongOptions);
        }
        let mut b = Bindings::new();
        b.insert("question", mcq.stem.clone());
        for (slot, opt) in ["option a", "option b", "option c", "option d"].into_iter().zip(options) {
            b.insert(slot, opt.clone());
        }
        let user = self.answer.render(PromptContentMode::All, &b, &[])?;
        Ok(self.finish(user, TemplateId::Answer, PromptContentMode::None, Vec::new()))
    }

    /// Stem-only question for an answering model.
    pub fn render_open_answer(&self, mcq: &Mcq) -> Result<RenderedPrompt, PromptError> {
        let mut b = Bindings::new();
        b.insert("question", mcq.stem.clone());
        let user = self.open_answer.render(PromptContentMode::None, &b, &[])?;
        Ok(self.finish(user, TemplateId::Answer, PromptContentMode::None, Vec::new()))
    }

    pub fn render_rank(
        &self,
        stem: &str,
        key: &str,
        explanation: Option<&str>,
        option_a: &str,
        option_b: &str,
        mode: PromptContentMode,
    ) -> Result<RenderedPrompt, PromptError> {
        if same_text(option_a, option_b) {
            return Err(PromptError::IdenticalOptions);
        }
        let mut b = Bindings::new();
        b.insert("question", stem.to_string());
        b.insert("answer", key.to_string());
        b.insert("explanation", explanation.unwrap_or_default().to_string());
        b.insert("option a", option_a.to_string());
        b.insert("option b", option_b.to_string());
        let user = self.rank.render(mode, &b, &[])?;
        Ok(self.finish(user, TemplateId::Rank, mode, Vec::new()))
    }

    /// Labeled feedback/distractor block, the output format every generator
    /// is asked for. Entries are `(feedback, text)`.
    pub fn render_distractor_block(
        &self,
        entries: &[(Option<&str>, &str); 3],
        mode: PromptContentMode,
    ) -> Result<String, PromptError> {
        let mut b = Bindings::new();
        for (i, (feedback, text)) in entries.iter().enumerate() {
            b.insert(DISTRACTOR_SLOTS[i], text.to_string());
            b.insert(FEEDBACK_SLOTS[i], feedback.unwrap_or_default().to_string());
        }
        self.distractors.render(mode, &b, &[])
    }
}

const DISTRACTOR_SLOTS: [&str; 3] = ["distractor1", "distractor2", "distractor3"];
const FEEDBACK_SLOTS: [&str; 3] = ["distractor1 feedback", "distractor2 feedback", "distractor3 feedback"];
const IN_CONTEXT_DISTRACTOR_SLOTS: [&str; 3] = [
    "in-context distractor1",
    "in-context distractor2",
    "in-context distractor3",
];
const IN_CONTEXT_FEEDBACK_SLOTS: [&str; 3] = [
    "in-context distractor1 feedback",
    "in-context distractor2 feedback",
    "in-context distractor3 feedback",
];

fn slot(prefix: &str, name: &str) -> &'static str {
    match (prefix, name) {
        ("", "question") => "question",
        ("", "explanation") => "explanation",
        ("", "answer") => "answer",
        ("target ", "question") => "target question",
        ("target ", "explanation") => "target explanation",
        ("target ", "answer") => "target answer",
        ("in-context ", "question") => "in-context question",
        ("in-context ", "explanation") => "in-context explanation",
        ("in-context ", "answer") => "in-context answer",
        _ => unreachable!("unknown slot {prefix}{name}"),
    }
}

fn mcq_bindings(mcq: &Mcq, prefix: &str, mode: PromptContentMode, notes: &mut Vec<String>) -> Bindings {
    let mut b = Bindings::new();
    b.insert(slot(prefix, "question"), mcq.stem.clone());
    b.insert(slot(prefix, "answer"), mcq.key.clone());
    if mcq.key_explanation.is_none() && mode == PromptContentMode::All {
        notes.push(format!("mcq {} has no key explanation", mcq.id));
    }
    b.insert(
        slot(prefix, "explanation"),
        mcq.key_explanation.clone().unwrap_or_default(),
    );
    b
}

fn distractor_bindings(
    b: &mut Bindings,
    mcq: &Mcq,
    prefix: &str,
    mode: PromptContentMode,
    notes: &mut Vec<String>,
) {
    debug_assert_eq!(prefix, "in-context ");
    for (i, d) in mcq.distractors.iter().enumerate() {
        b.insert(IN_CONTEXT_DISTRACTOR_SLOTS[i], d.text.clone());
        if d.feedback.is_none() && mode.includes_feedback() {
            notes.push(format!("example {} distractor {} has no feedback", mcq.id, i + 1));
        }
        b.insert(
            IN_CONTEXT_FEEDBACK_SLOTS[i],
            d.feedback.clone().unwrap_or_default(),
        );
    }
}
