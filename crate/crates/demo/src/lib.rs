//! Browser bindings for three pipeline operations: prompt rendering, scoring
//! a model reply against human distractors, and rater agreement.
//!
//! Each operation is a plain Rust function returning JSON (or prompt text),
//! with a thin `#[wasm_bindgen]` wrapper on top.

use distractor_core::analysis::{qwk, students_t_test, SCALE};
use distractor_core::corpus::{DistractorEntry, Mcq};
use distractor_core::generation::{finalize_candidates, parse_distractor_output, DistractorCandidate};
use distractor_core::metrics::match_distractors;
use distractor_core::promptkit::{PromptContentMode, PromptKit};
use serde::Serialize;
use wasm_bindgen::prelude::*;

fn mode(name: &str) -> Result<PromptContentMode, String> {
    match name.trim() {
        "all" => Ok(PromptContentMode::All),
        "key" => Ok(PromptContentMode::Key),
        "none" => Ok(PromptContentMode::None),
        other => Err(format!("unknown mode {other:?}; expected all, key or none")),
    }
}

/// One distractor per non-empty line, optionally `text | feedback`.
fn distractor_lines(lines: &str) -> Vec<DistractorEntry> {
    lines
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| match l.split_once('|') {
            Some((text, feedback)) => DistractorEntry {
                text: text.trim().to_string(),
                feedback: Some(feedback.trim().to_string()).filter(|f| !f.is_empty()),
            },
            None => DistractorEntry {
                text: l.trim().to_string(),
                feedback: None,
            },
        })
        .collect()
}

fn demo_mcq(stem: &str, key: &str, explanation: &str, distractors: &str) -> Result<Mcq, String> {
    let mcq = Mcq {
        id: "demo".into(),
        stem: stem.trim().to_string(),
        key: key.trim().to_string(),
        key_explanation: Some(explanation.trim().to_string()).filter(|e| !e.is_empty()),
        distractors: distractor_lines(distractors),
        topics: vec!["Demo".into(), "Demo".into(), "Demo".into()],
        selection: None,
        n_responses: None,
    };
    mcq.validate().map_err(|e| e.to_string())?;
    Ok(mcq)
}

/// Renders the `cot`, `ft` or `rank` prompt for a question typed into the
/// page. `rank` compares the first two distractors.
pub fn render_prompt_text(
    template: &str,
    mode_name: &str,
    stem: &str,
    key: &str,
    explanation: &str,
    distractors: &str,
) -> Result<String, String> {
    let mode = mode(mode_name)?;
    let mcq = demo_mcq(stem, key, explanation, distractors)?;
    let kit = PromptKit::builtin();
    let rendered = match template.trim() {
        "cot" => kit.render_cot(&mcq, mode),
        "ft" => kit.render_ft(&mcq, mode),
        "rank" => kit.render_rank(
            &mcq.stem,
            &mcq.key,
            mcq.key_explanation.as_deref(),
            &mcq.distractors[0].text,
            &mcq.distractors[1].text,
            mode,
        ),
        other => return Err(format!("unknown template {other:?}; expected cot, ft or rank")),
    }
    .map_err(|e| e.to_string())?;
    Ok(rendered.user)
}

#[derive(Serialize)]
struct Slot {
    text: Option<String>,
    feedback: Option<String>,
    /// 1-based human distractor this slot matched.
    matched: Option<usize>,
}

#[derive(Serialize)]
struct ScoreReport {
    slots: Vec<Slot>,
    exact: u8,
    partial: u8,
    proportional: f64,
    missing_slots: Vec<usize>,
    dropped_lines: usize,
}

/// Parses a model reply, voids slots that repeat or equal the key, and
/// matches the rest against the human distractors (one per line).
pub fn score_reply_json(reply: &str, key: &str, human: &str) -> Result<String, String> {
    let human: Vec<String> = distractor_lines(human).into_iter().map(|d| d.text).collect();
    if human.len() != 3 {
        return Err(format!("expected 3 human distractors, found {}", human.len()));
    }
    let parsed = parse_distractor_output(reply);
    let candidates: [DistractorCandidate; 3] = finalize_candidates(parsed.candidates, key);
    let alignment = match_distractors(&human, &candidates);
    let slots = candidates
        .into_iter()
        .enumerate()
        .map(|(g, c)| Slot {
            matched: alignment.matched_pairs.iter().find(|(mg, _)| *mg == g).map(|(_, h)| h + 1),
            text: c.text,
            feedback: c.feedback,
        })
        .collect();
    let report = ScoreReport {
        slots,
        exact: alignment.exact,
        partial: alignment.partial,
        proportional: alignment.proportional,
        missing_slots: parsed.report.missing_slots,
        dropped_lines: parsed.report.dropped_lines,
    };
    Ok(serde_json::to_string(&report).expect("report serializes"))
}

fn ratings(list: &str) -> Result<Vec<u8>, String> {
    list.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<u8>()
                .ok()
                .filter(|r| (1..=SCALE as u8).contains(r))
                .ok_or_else(|| format!("{s:?} is not a rating from 1 to {SCALE}"))
        })
        .collect()
}

#[derive(Serialize)]
struct AgreementSummary {
    n: usize,
    mean_a: f64,
    mean_b: f64,
    qwk: Option<f64>,
    t: Option<f64>,
    df: Option<f64>,
    p: Option<f64>,
}

/// Agreement between two raters' ratings of the same items, plus a pooled
/// two-sample t-test of their means. Undefined statistics come back null.
pub fn agreement_json(a: &str, b: &str) -> Result<String, String> {
    let (a, b) = (ratings(a)?, ratings(b)?);
    if a.len() != b.len() {
        return Err(format!("rater A has {} ratings, rater B has {}", a.len(), b.len()));
    }
    if a.is_empty() {
        return Err("no ratings".into());
    }
    let as_f64 = |v: &[u8]| v.iter().map(|&r| f64::from(r)).collect::<Vec<_>>();
    let (fa, fb) = (as_f64(&a), as_f64(&b));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let test = students_t_test(&fa, &fb).ok();
    let summary = AgreementSummary {
        n: a.len(),
        mean_a: mean(&fa),
        mean_b: mean(&fb),
        qwk: qwk(&a, &b).ok(),
        t: test.map(|t| t.t),
        df: test.map(|t| t.df),
        p: test.map(|t| t.p),
    };
    Ok(serde_json::to_string(&summary).expect("summary serializes"))
}

#[wasm_bindgen]
pub fn render_prompt(
    template: &str,
    mode: &str,
    stem: &str,
    key: &str,
    explanation: &str,
    distractors: &str,
) -> Result<String, JsValue> {
    render_prompt_text(template, mode, stem, key, explanation, distractors).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn score_reply(reply: &str, key: &str, human: &str) -> Result<String, JsValue> {
    score_reply_json(reply, key, human).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn agreement(a: &str, b: &str) -> Result<String, JsValue> {
    agreement_json(a, b).map_err(|e| JsValue::from_str(&e))
}
