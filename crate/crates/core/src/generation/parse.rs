use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::DistractorCandidate;
use crate::corpus::normalize_text;

/// What the parser had to throw away or could not find.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParseReport {
    /// 1-based slots with no distractor text.
    pub missing_slots: Vec<usize>,
    /// Labels seen more than once; later copies are ignored.
    pub repeated_labels: Vec<String>,
    /// Non-empty lines that belonged to no label.
    pub dropped_lines: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedOutput {
    pub candidates: [DistractorCandidate; 3],
    pub report: ParseReport,
}

fn label_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        Regex::new(r"(?i)^[\s>*#_\-]*distractor\s*([123])\s*(feedback)?\s*[*_]*\s*[:：]\s*[*_]*\s*(.*?)\s*$")
            .expect("label regex")
    })
}

fn block_end_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)^\s*(\[stop\]|question\s*:|error\s*\d\s*:|error list\s*:)").expect("end regex"))
}

#[derive(Clone, Copy, PartialEq)]
enum Field {
    Text,
    Feedback,
}

/// Extracts up to three (feedback, distractor) pairs from model output.
///
/// Labels are `DistractorK Feedback:` and `DistractorK:` for K in 1..=3,
/// matched case-insensitively with optional spaces and markdown emphasis.
/// Feedback may continue over following lines until a blank line or the
/// next label; a distractor is a single line (the label's own line, or the
/// next non-empty line when the label line is bare). Never fails: anything
/// unrecognized is dropped and counted.
pub fn parse_distractor_output(raw: &str) -> ParsedOutput {
    let mut texts: [Option<String>; 3] = Default::default();
    let mut feedbacks: [Option<String>; 3] = Default::default();
    let mut report = ParseReport::default();
    // (slot, field) currently accepting continuation lines
    let mut open: Option<(usize, Field)> = None;
    let mut ignoring = false;

    for line in raw.lines() {
        if let Some(caps) = label_re().captures(line) {
            let slot = caps[1].parse::<usize>().expect("digit") - 1;
            let field = if caps.get(2).is_some() { Field::Feedback } else { Field::Text };
            let value = clean(&caps[3]);
            let target = match field {
                Field::Text => &mut texts[slot],
                Field::Feedback => &mut feedbacks[slot],
            };
            if target.is_some() {
                report.repeated_labels.push(line.trim().to_string());
                open = None;
                ignoring = true;
                continue;
            }
            ignoring = false;
            *target = Some(value.clone());
            open = match field {
                Field::Text if value.is_empty() => Some((slot, Field::Text)),
                Field::Text => None,
                Field::Feedback => Some((slot, Field::Feedback)),
            };
            continue;
        }
        let trimmed = line.trim();
        if trimmed.is_empty() {
            open = open.filter(|(slot, field)| *field == Field::Text && texts[*slot].as_deref() == Some(""));
            continue;
        }
        if block_end_re().is_match(line) {
            open = None;
            report.dropped_lines += 1;
            continue;
        }
        match open {
            Some((slot, Field::Feedback)) => {
                let fb = feedbacks[slot].get_or_insert_with(String::new);
                if !fb.is_empty() {
                    fb.push('\n');
                }
                fb.push_str(trimmed);
            }
            Some((slot, Field::Text)) => {
                texts[slot] = Some(clean(trimmed));
                open = None;
            }
            None => {
                if !ignoring {
                    report.dropped_lines += 1;
                }
            }
        }
    }

    let candidates: [DistractorCandidate; 3] = std::array::from_fn(|i| {
        let text = texts[i].take().filter(|t| !normalize_text(t).is_empty());
        if text.is_none() {
            report.missing_slots.push(i + 1);
            return DistractorCandidate::null();
        }
        DistractorCandidate {
            feedback: feedbacks[i].take().filter(|f| !f.trim().is_empty()),
            text,
        }
    });
    ParsedOutput { candidates, report }
}

fn clean(value: &str) -> String {
    value
        .trim()
        .trim_matches(|c| c == '*' || c == '_')
        .trim()
        .to_string()
}
