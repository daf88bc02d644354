//! Alignment between generated and human-authored distractors, plus the
//! solve-rate probe.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::sync::OnceLock;

use rand::seq::SliceRandom;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_text, Mcq};
use crate::generation::{Approach, DistractorCandidate, GenerationResult};
use crate::llmclient::{ChatRequest, DecodingConfig, LlmClient, LlmError};
use crate::promptkit::{PromptError, PromptKit, RenderedPrompt};
use crate::{par, seed};

/// Denominator of the proportional score; null slots count as misses.
pub const SLOTS: usize = 3;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no reports to aggregate")]
    Empty,
    #[error("no generation result for mcq {mcq_id} ({approach})")]
    MissingResult { mcq_id: String, approach: Approach },
    #[error("no MCQs eligible for solve-rate ({excluded} excluded for null slots)")]
    NothingToSolve { excluded: usize },
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    /// (generated slot, human slot) pairs, both 0-based.
    pub matched_pairs: Vec<(usize, usize)>,
    pub exact: u8,
    pub partial: u8,
    pub proportional: f64,
}

/// Greedy injective exact-string matching. Each generated slot, in order,
/// takes the first unused human distractor it equals after normalization.
/// Equality classes are disjoint, so greedy reaches the maximum matching.
pub fn match_distractors<H: AsRef<str>>(human: &[H], generated: &[DistractorCandidate]) -> Alignment {
    let human_norm: Vec<String> = human.iter().map(|h| normalize_text(h.as_ref())).collect();
    let mut used = vec![false; human_norm.len()];
    let mut matched_pairs = Vec::new();
    for (g, cand) in generated.iter().enumerate() {
        let Some(text) = &cand.text else { continue };
        let norm = normalize_text(text);
        if let Some(h) = (0..human_norm.len()).find(|&h| !used[h] && human_norm[h] == norm) {
            used[h] = true;
            matched_pairs.push((g, h));
        }
    }
    let n = matched_pairs.len();
    Alignment {
        exact: u8::from(n == SLOTS),
        partial: u8::from(n > 0),
        proportional: n as f64 / SLOTS as f64,
        matched_pairs,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub mcq_id: String,
    pub approach: Approach,
    #[serde(flatten)]
    pub alignment: Alignment,
}

/// Scores each test MCQ's result for `approach`; a missing result is an
/// error naming the MCQ.
pub fn match_results(test: &[Mcq], results: &[GenerationResult], approach: Approach) -> Result<Vec<MatchReport>, MetricsError> {
    let by_id: HashMap<&str, &GenerationResult> = results
        .iter()
        .filter(|r| r.approach == approach)
        .map(|r| (r.mcq_id.as_str(), r))
        .collect();
    test.iter()
        .map(|mcq| {
            let result = by_id.get(mcq.id.as_str()).ok_or_else(|| MetricsError::MissingResult {
                mcq_id: mcq.id.clone(),
                approach,
            })?;
            Ok(MatchReport {
                mcq_id: mcq.id.clone(),
                approach,
                alignment: match_distractors(&mcq.distractor_texts(), &result.candidates),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApproachScores {
    pub count: usize,
    pub exact: f64,
    pub partial: f64,
    pub proportional: f64,
}

/// Percentages per approach, rounded to two decimals.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricSummary {
    pub approaches: BTreeMap<Approach, ApproachScores>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub solve_rates: BTreeMap<String, f64>,
}

fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

pub fn aggregate(reports: &[MatchReport]) -> Result<MetricSummary, MetricsError> {
    if reports.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut sums: BTreeMap<Approach, (usize, f64, f64, f64)> = BTreeMap::new();
    for r in reports {
        let e = sums.entry(r.approach).or_default();
        e.0 += 1;
        e.1 += f64::from(r.alignment.exact);
        e.2 += f64::from(r.alignment.partial);
        e.3 += r.alignment.proportional;
    }
    let approaches = sums
        .into_iter()
        .map(|(a, (n, e, p, h))| {
            let pct = |s: f64| round2(100.0 * s / n as f64);
            (
                a,
                ApproachScores {
                    count: n,
                    exact: pct(e),
                    partial: pct(p),
                    proportional: pct(h),
                },
            )
        })
        .collect();
    Ok(MetricSummary {
        approaches,
        solve_rates: BTreeMap::new(),
    })
}

/// Plain-text table with Exact / Partial / Proportional columns.
pub fn render_table(summary: &MetricSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:<10} {:>8} {:>8} {:>13} {:>6}", "Approach", "Exact", "Partial", "Proportional", "N");
    for (approach, s) in &summary.approaches {
        let _ = writeln!(
            out,
            "{:<10} {:>8.2} {:>8.2} {:>13.2} {:>6}",
            approach.as_str(),
            s.exact,
            s.partial,
            s.proportional,
            s.count
        );
    }
    for (source, rate) in &summary.solve_rates {
        let _ = writeln!(out, "solve rate [{source}]: {:.2}%", rate * 100.0);
    }
    out
}

/// Answers a lettered multiple-choice prompt.
pub trait Solver: Sync {
    fn answer(&self, prompt: &RenderedPrompt) -> Result<String, LlmError>;
}

impl<F> Solver for F
where
    F: Fn(&RenderedPrompt) -> Result<String, LlmError> + Sync,
{
    fn answer(&self, prompt: &RenderedPrompt) -> Result<String, LlmError> {
        self(prompt)
    }
}

/// Solver backed by a chat model under greedy decoding.
pub struct LlmSolver<'a> {
    pub client: &'a LlmClient,
    pub model: String,
}

impl Solver for LlmSolver<'_> {
    fn answer(&self, prompt: &RenderedPrompt) -> Result<String, LlmError> {
        let request = ChatRequest::from_prompt(&self.model, prompt, DecodingConfig::greedy());
        Ok(self.client.complete(&request)?.swap_remove(0))
    }
}

const LETTERS: [char; 4] = ['A', 'B', 'C', 'D'];

fn letter_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\b([A-D])\b").expect("letter regex"))
}

/// First standalone capital A-D in a reply, plus whether other distinct
/// letters also appeared.
pub fn parse_letter(reply: &str) -> (Option<char>, bool) {
    let letters: Vec<char> = letter_re()
        .captures_iter(reply)
        .filter_map(|c| c[1].chars().next())
        .collect();
    let first = letters.first().copied();
    let ambiguous = letters.iter().any(|l| Some(*l) != first);
    (first, ambiguous)
}

/// Key plus three distractors in a seeded order; returns the options and
/// the key's position.
pub fn shuffled_options(mcq: &Mcq, distractors: &[String; 3], seed_value: u64) -> (Vec<String>, usize) {
    let mut order: Vec<usize> = (0..4).collect();
    order.shuffle(&mut seed::rng(seed::derive(seed_value, &mcq.id)));
    let options = order
        .iter()
        .map(|&i| if i == 0 { mcq.key.clone() } else { distractors[i - 1].clone() })
        .collect();
    let key_pos = order.iter().position(|&i| i == 0).expect("key present");
    (options, key_pos)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveOutcome {
    pub mcq_id: String,
    pub key_letter: char,
    pub reply_letter: Option<char>,
    pub correct: bool,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub ambiguous: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveRateReport {
    pub source: String,
    pub total: usize,
    pub correct: usize,
    pub rate: f64,
    /// MCQs skipped because a distractor slot was null.
    pub excluded: Vec<String>,
    pub unparseable: usize,
    pub outcomes: Vec<SolveOutcome>,
}

/// Fraction of MCQs the solver answers correctly when shown the key and the
/// given distractors in a seeded order. MCQs whose distractor set has a
/// null slot are excluded and listed.
pub fn solve_rate(
    source: &str,
    items: &[(&Mcq, [Option<String>; 3])],
    prompts: &PromptKit,
    solver: &dyn Solver,
    seed_value: u64,
    workers: usize,
) -> Result<SolveRateReport, MetricsError> {
    let mut excluded = Vec::new();
    let mut eligible = Vec::new();
    for (mcq, ds) in items {
        match ds {
            [Some(a), Some(b), Some(c)] => eligible.push((*mcq, [a.clone(), b.clone(), c.clone()])),
            _ => excluded.push(mcq.id.clone()),
        }
    }
    if eligible.is_empty() {
        return Err(MetricsError::NothingToSolve {
            excluded: excluded.len(),
        });
    }
    let outcomes = par::try_map(&eligible, workers, |(mcq, ds)| -> Result<SolveOutcome, MetricsError> {
        let (options, key_pos) = shuffled_options(mcq, ds, seed_value);
        let prompt = prompts.render_answer(mcq, &options)?;
        let reply = solver.answer(&prompt)?;
        let (letter, ambiguous) = parse_letter(&reply);
        if letter.is_none() {
            tracing::warn!(stage = "solve-rate", mcq_id = %mcq.id, event = "unparseable reply");
        } else if ambiguous {
            tracing::warn!(stage = "solve-rate", mcq_id = %mcq.id, event = "several letters in reply");
        }
        Ok(SolveOutcome {
            mcq_id: mcq.id.clone(),
            key_letter: LETTERS[key_pos],
            reply_letter: letter,
            correct: letter == Some(LETTERS[key_pos]),
            ambiguous,
        })
    })?;
    let correct = outcomes.iter().filter(|o| o.correct).count();
    let unparseable = outcomes.iter().filter(|o| o.reply_letter.is_none()).count();
    Ok(SolveRateReport {
        source: source.to_string(),
        total: outcomes.len(),
        correct,
        rate: correct as f64 / outcomes.len() as f64,
        excluded,
        unparseable,
        outcomes,
    })
}

/// Human-authored distractors in the shape [`solve_rate`] expects.
pub fn human_distractors(mcq: &Mcq) -> [Option<String>; 3] {
    std::array::from_fn(|i| Some(mcq.distractors[i].text.clone()))
}

/// Generated distractors in the shape [`solve_rate`] expects.
pub fn generated_distractors(result: &GenerationResult) -> [Option<String>; 3] {
    std::array::from_fn(|i| result.candidates[i].text.clone())
}
