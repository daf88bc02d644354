//! Pairwise distractor preference: pair datasets built from student
//! selection rates, ranker oracles, and the generated-vs-human preference
//! score.

use std::collections::{HashMap, HashSet};
use std::sync::{Mutex, OnceLock};

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{normalize_text, same_text, Mcq};
use crate::generation::{Approach, DistractorCandidate, GenerationResult};
use crate::llmclient::{ChatMessage, ChatRequest, DecodingConfig, LlmClient, LlmError};
use crate::promptkit::{PromptContentMode, PromptError, PromptKit};
use crate::{par, seed};

#[derive(Debug, Error)]
pub enum RankingError {
    #[error("no pairs left to evaluate")]
    NoPairs,
    #[error("mcq {0} appears in the generated results but not in the corpus")]
    UnknownMcq(String),
    #[error("no generated result for mcq {0}")]
    MissingResult(String),
    #[error("malformed ranker training record: {0}")]
    BadRecord(String),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Llm(#[from] LlmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairLabel {
    D1,
    D2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub mcq_id: String,
    pub d1: String,
    pub d2: String,
    /// The distractor chosen by more students.
    pub label: PairLabel,
    /// Absolute difference in selection fraction.
    pub margin: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PairDataset {
    pub pairs: Vec<PreferencePair>,
    /// MCQs without selection data.
    pub skipped_no_selection: Vec<String>,
    /// Unordered pairs dropped for equal selection fractions.
    pub skipped_ties: usize,
    /// Unordered pairs dropped because both texts normalize the same.
    pub skipped_identical: usize,
}

const UNORDERED: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Every unordered pair of human distractors per MCQ, emitted in both
/// orders, labeled by which one students picked more often.
pub fn build_pair_dataset(corpus: &[Mcq]) -> PairDataset {
    let mut out = PairDataset::default();
    for mcq in corpus {
        let Some(sel) = mcq.selection else {
            out.skipped_no_selection.push(mcq.id.clone());
            continue;
        };
        for (a, b) in UNORDERED {
            let (fa, fb) = (sel.distractor(a), sel.distractor(b));
            let (ta, tb) = (&mcq.distractors[a].text, &mcq.distractors[b].text);
            if same_text(ta, tb) {
                out.skipped_identical += 1;
                continue;
            }
            if fa == fb {
                out.skipped_ties += 1;
                continue;
            }
            let margin = (fa - fb).abs();
            let a_wins = fa > fb;
            out.pairs.push(PreferencePair {
                mcq_id: mcq.id.clone(),
                d1: ta.clone(),
                d2: tb.clone(),
                label: if a_wins { PairLabel::D1 } else { PairLabel::D2 },
                margin,
            });
            out.pairs.push(PreferencePair {
                mcq_id: mcq.id.clone(),
                d1: tb.clone(),
                d2: ta.clone(),
                label: if a_wins { PairLabel::D2 } else { PairLabel::D1 },
                margin,
            });
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankerVerdict {
    First,
    Second,
}

/// Decides which of two incorrect options students are more likely to pick.
pub trait Ranker: Sync {
    fn compare(&self, mcq: &Mcq, first: &str, second: &str) -> Result<RankerVerdict, RankingError>;
}

/// Always returns the same verdict.
pub struct ConstantRanker(pub RankerVerdict);

impl Ranker for ConstantRanker {
    fn compare(&self, _: &Mcq, _: &str, _: &str) -> Result<RankerVerdict, RankingError> {
        Ok(self.0)
    }
}

/// Coin flip per (mcq, first, second), reproducible for a given seed.
pub struct RandomRanker {
    pub seed: u64,
}

impl Ranker for RandomRanker {
    fn compare(&self, mcq: &Mcq, first: &str, second: &str) -> Result<RankerVerdict, RankingError> {
        let h = seed::derive(self.seed, &format!("{}\u{0}{first}\u{0}{second}", mcq.id));
        Ok(if h & 1 == 0 { RankerVerdict::First } else { RankerVerdict::Second })
    }
}

/// Ranks by recorded student selection fraction. Texts that are not one of
/// the MCQ's human distractors count as never selected; exact ties fall
/// back to normalized text order so the oracle stays antisymmetric.
pub struct SelectionOracle;

impl SelectionOracle {
    fn fraction(mcq: &Mcq, text: &str) -> f64 {
        let Some(sel) = mcq.selection else { return 0.0 };
        mcq.distractors
            .iter()
            .position(|d| same_text(&d.text, text))
            .map_or(0.0, |i| sel.distractor(i))
    }
}

impl Ranker for SelectionOracle {
    fn compare(&self, mcq: &Mcq, first: &str, second: &str) -> Result<RankerVerdict, RankingError> {
        let (f1, f2) = (Self::fraction(mcq, first), Self::fraction(mcq, second));
        let first_wins = if f1 != f2 {
            f1 > f2
        } else {
            normalize_text(first) <= normalize_text(second)
        };
        Ok(if first_wins { RankerVerdict::First } else { RankerVerdict::Second })
    }
}

fn preferred_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?i)preferred\s+answer\s*:\s*\(?([AB])\b").expect("preferred regex"))
}

/// Reads `Preferred Answer: A|B` from a ranking model's reply, falling back
/// to the first standalone A or B.
pub fn parse_preferred(reply: &str) -> Option<RankerVerdict> {
    let letter = preferred_re()
        .captures(reply)
        .map(|c| c[1].to_ascii_uppercase())
        .or_else(|| {
            static RE: OnceLock<Regex> = OnceLock::new();
            RE.get_or_init(|| Regex::new(r"\b([AB])\b").expect("ab regex"))
                .captures(reply)
                .map(|c| c[1].to_string())
        })?;
    Some(if letter == "A" { RankerVerdict::First } else { RankerVerdict::Second })
}

/// Ranking model served over the chat API, prompted with the ranking
/// template. Verdicts are memoized per (mcq id, first, second).
pub struct LlmRanker<'a> {
    pub client: &'a LlmClient,
    pub prompts: &'a PromptKit,
    pub model: String,
    pub mode: PromptContentMode,
    verdicts: Mutex<HashMap<(String, String, String), RankerVerdict>>,
}

impl<'a> LlmRanker<'a> {
    pub fn new(client: &'a LlmClient, prompts: &'a PromptKit, model: impl Into<String>) -> Self {
        Self {
            client,
            prompts,
            model: model.into(),
            mode: PromptContentMode::All,
            verdicts: Mutex::new(HashMap::new()),
        }
    }
}

impl Ranker for LlmRanker<'_> {
    fn compare(&self, mcq: &Mcq, first: &str, second: &str) -> Result<RankerVerdict, RankingError> {
        let memo_key = (mcq.id.clone(), first.to_string(), second.to_string());
        if let Some(v) = self.verdicts.lock().expect("verdict lock").get(&memo_key) {
            return Ok(*v);
        }
        let prompt = self.prompts.render_rank(
            &mcq.stem,
            &mcq.key,
            mcq.key_explanation.as_deref(),
            first,
            second,
            self.mode,
        )?;
        let request = ChatRequest::from_prompt(&self.model, &prompt, DecodingConfig::greedy());
        let reply = self.client.complete(&request)?.swap_remove(0);
        let verdict = parse_preferred(&reply).unwrap_or_else(|| {
            tracing::warn!(stage = "rank", mcq_id = %mcq.id, event = "unparseable verdict, defaulting to second");
            RankerVerdict::Second
        });
        self.verdicts
            .lock()
            .expect("verdict lock")
            .insert(memo_key, verdict);
        Ok(verdict)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub evaluated: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub margin_threshold: Option<f64>,
}

/// Share of pairs where the ranker's verdict matches the label, optionally
/// restricted to pairs whose margin exceeds `margin_threshold`.
pub fn ranker_accuracy(
    pairs: &[PreferencePair],
    corpus: &[Mcq],
    ranker: &dyn Ranker,
    margin_threshold: Option<f64>,
) -> Result<AccuracyReport, RankingError> {
    let by_id: HashMap<&str, &Mcq> = corpus.iter().map(|m| (m.id.as_str(), m)).collect();
    let mut evaluated = 0;
    let mut correct = 0;
    for pair in pairs {
        if margin_threshold.is_some_and(|t| pair.margin <= t) {
            continue;
        }
        let mcq = by_id
            .get(pair.mcq_id.as_str())
            .ok_or_else(|| RankingError::UnknownMcq(pair.mcq_id.clone()))?;
        let verdict = ranker.compare(mcq, &pair.d1, &pair.d2)?;
        evaluated += 1;
        let hit = matches!(
            (verdict, pair.label),
            (RankerVerdict::First, PairLabel::D1) | (RankerVerdict::Second, PairLabel::D2)
        );
        correct += usize::from(hit);
    }
    if evaluated == 0 {
        return Err(RankingError::NoPairs);
    }
    Ok(AccuracyReport {
        evaluated,
        correct,
        accuracy: correct as f64 / evaluated as f64,
        margin_threshold,
    })
}

/// Head-to-head term: 0.5 for equal texts, 1 when `y` is null, 0 when `x`
/// is null, otherwise 1 iff the ranker prefers `x`.
fn head_to_head(ranker: &dyn Ranker, mcq: &Mcq, x: Option<&str>, y: Option<&str>) -> Result<f64, RankingError> {
    match (x, y) {
        (Some(a), Some(b)) if same_text(a, b) => Ok(0.5),
        (_, None) => Ok(1.0),
        (None, _) => Ok(0.0),
        (Some(a), Some(b)) => Ok(match ranker.compare(mcq, a, b)? {
            RankerVerdict::First => 1.0,
            RankerVerdict::Second => 0.0,
        }),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqContribution {
    pub mcq_id: String,
    /// This MCQ's 9 bracketed terms summed and divided by 18, in [0,1].
    pub score: f64,
    pub ties: usize,
    pub null_slots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceScoreReport {
    pub score: f64,
    pub n: usize,
    pub ties: usize,
    pub null_slots: usize,
    pub per_mcq: Vec<McqContribution>,
}

/// Score for one MCQ: for every generated `a` and human `b`,
/// `r(a, b) + (1 - r(b, a))`, summed and divided by 18.
pub fn mcq_preference(mcq: &Mcq, generated: &[DistractorCandidate; 3], ranker: &dyn Ranker) -> Result<McqContribution, RankingError> {
    let mut total = 0.0;
    let mut ties = 0;
    for g in generated {
        let gen = g.text.as_deref();
        for h in &mcq.distractors {
            let human = Some(h.text.as_str());
            if gen.is_some_and(|t| same_text(t, &h.text)) {
                ties += 1;
            }
            total += head_to_head(ranker, mcq, gen, human)? + (1.0 - head_to_head(ranker, mcq, human, gen)?);
        }
    }
    Ok(McqContribution {
        mcq_id: mcq.id.clone(),
        score: total / 18.0,
        ties,
        null_slots: generated.iter().filter(|c| c.is_null()).count(),
    })
}

/// Preference score over `test` for one approach's results. Every test MCQ
/// needs a result, and every result must belong to a test MCQ.
pub fn preference_score(
    test: &[Mcq],
    results: &[GenerationResult],
    approach: Approach,
    ranker: &dyn Ranker,
    workers: usize,
) -> Result<PreferenceScoreReport, RankingError> {
    let ids: HashSet<&str> = test.iter().map(|m| m.id.as_str()).collect();
    let mut by_id: HashMap<&str, &GenerationResult> = HashMap::new();
    for r in results.iter().filter(|r| r.approach == approach) {
        if !ids.contains(r.mcq_id.as_str()) {
            return Err(RankingError::UnknownMcq(r.mcq_id.clone()));
        }
        by_id.insert(r.mcq_id.as_str(), r);
    }
    let items: Vec<(&Mcq, &GenerationResult)> = test
        .iter()
        .map(|m| {
            by_id
                .get(m.id.as_str())
                .map(|r| (m, *r))
                .ok_or_else(|| RankingError::MissingResult(m.id.clone()))
        })
        .collect::<Result<_, _>>()?;
    let per_mcq = par::try_map(&items, workers, |(m, r)| mcq_preference(m, &r.candidates, ranker))?;
    Ok(summarize(per_mcq))
}

pub fn summarize(per_mcq: Vec<McqContribution>) -> PreferenceScoreReport {
    let n = per_mcq.len();
    let score = if n == 0 {
        0.0
    } else {
        per_mcq.iter().map(|c| c.score).sum::<f64>() / n as f64
    };
    PreferenceScoreReport {
        score,
        n,
        ties: per_mcq.iter().map(|c| c.ties).sum(),
        null_slots: per_mcq.iter().map(|c| c.null_slots).sum(),
        per_mcq,
    }
}

pub const PREFERRED_PREFIX: &str = "Preferred Answer: ";

/// Chat-format training records: the ranking prompt with `d1` as option A
/// and `d2` as option B, answered by `Preferred Answer: A|B`.
pub fn export_ranker_training(
    pairs: &[PreferencePair],
    corpus: &[Mcq],
    prompts: &PromptKit,
    mode: PromptContentMode,
) -> Result<String, RankingError> {
    let by_id: HashMap<&str, &Mcq> = corpus.iter().map(|m| (m.id.as_str(), m)).collect();
    let mut out = String::new();
    for pair in pairs {
        let mcq = by_id
            .get(pair.mcq_id.as_str())
            .ok_or_else(|| RankingError::UnknownMcq(pair.mcq_id.clone()))?;
        let prompt = prompts.render_rank(&mcq.stem, &mcq.key, mcq.key_explanation.as_deref(), &pair.d1, &pair.d2, mode)?;
        let letter = match pair.label {
            PairLabel::D1 => "A",
            PairLabel::D2 => "B",
        };
        let mut messages = Vec::new();
        if let Some(system) = &prompt.system {
            messages.push(ChatMessage::system(system.clone()));
        }
        messages.push(ChatMessage::user(prompt.user));
        messages.push(ChatMessage::assistant(format!("{PREFERRED_PREFIX}{letter}")));
        out.push_str(&serde_json::to_string(&serde_json::json!({ "messages": messages })).expect("record serializes"));
        out.push('\n');
    }
    Ok(out)
}

/// Recovers `(d1, d2, label)` from one exported training record.
pub fn parse_ranker_record(line: &str) -> Result<(String, String, PairLabel), RankingError> {
    let bad = |m: &str| RankingError::BadRecord(m.to_string());
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| RankingError::BadRecord(e.to_string()))?;
    let messages = value["messages"].as_array().ok_or_else(|| bad("no messages"))?;
    let user = messages
        .iter()
        .find(|m| m["role"] == "user")
        .and_then(|m| m["content"].as_str())
        .ok_or_else(|| bad("no user message"))?;
    let target = messages
        .iter()
        .find(|m| m["role"] == "assistant")
        .and_then(|m| m["content"].as_str())
        .ok_or_else(|| bad("no assistant message"))?;
    let option = |prefix: &str| {
        user.lines()
            .find_map(|l| l.strip_prefix(prefix))
            .map(str::to_string)
            .ok_or_else(|| bad(prefix))
    };
    let label = match target.strip_prefix(PREFERRED_PREFIX) {
        Some("A") => PairLabel::D1,
        Some("B") => PairLabel::D2,
        _ => return Err(bad("target")),
    };
    Ok((option("Option A: ")?, option("Option B: ")?, label))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::sample_mcq;
    use crate::corpus::SelectionDistribution;

    fn with_fractions(id: &str, d: [f64; 3]) -> Mcq {
        let mut m = sample_mcq(id);
        m.selection = Some(SelectionDistribution {
            key: 0.4,
            d1: d[0],
            d2: d[1],
            d3: d[2],
        });
        m
    }

    #[test]
    fn six_pairs_with_antisymmetric_labels() {
        let ds = build_pair_dataset(&[with_fractions("q", [0.30, 0.20, 0.05])]);
        assert_eq!(ds.pairs.len(), 6);
        for chunk in ds.pairs.chunks(2) {
            assert_eq!(chunk[0].d1, chunk[1].d2);
            assert_ne!(chunk[0].label, chunk[1].label);
            assert_eq!(chunk[0].margin, chunk[1].margin);
        }
        assert_eq!(ds.pairs[0].label, PairLabel::D1);
        assert!((ds.pairs[0].margin - 0.10).abs() < 1e-12);
    }

    #[test]
    fn tied_fractions_drop_a_pair() {
        let ds = build_pair_dataset(&[with_fractions("q", [0.2, 0.2, 0.05])]);
        assert_eq!(ds.pairs.len(), 4);
        assert_eq!(ds.skipped_ties, 1);
    }

    #[test]
    fn hundred_mcqs_six_hundred_pairs() {
        let mut corpus: Vec<Mcq> = (0..100).map(|i| with_fractions(&format!("q{i}"), [0.3, 0.2, 0.1])).collect();
        let mut missing = sample_mcq("nosel");
        missing.selection = None;
        corpus.push(missing);
        let ds = build_pair_dataset(&corpus);
        assert_eq!(ds.pairs.len(), 600);
        assert_eq!(ds.skipped_no_selection, vec!["nosel"]);
    }

    #[test]
    fn accuracy_of_reference_rankers() {
        let corpus = vec![with_fractions("q", [0.30, 0.20, 0.05]), with_fractions("r", [0.01, 0.3, 0.02])];
        let ds = build_pair_dataset(&corpus);
        let oracle = ranker_accuracy(&ds.pairs, &corpus, &SelectionOracle, None).unwrap();
        assert_eq!(oracle.accuracy, 1.0);
        let first = ranker_accuracy(&ds.pairs, &corpus, &ConstantRanker(RankerVerdict::First), None).unwrap();
        assert_eq!(first.accuracy, 0.5);
        let wide = ranker_accuracy(&ds.pairs, &corpus, &SelectionOracle, Some(0.2)).unwrap();
        assert_eq!(wide.evaluated, 6);
        assert!(matches!(
            ranker_accuracy(&ds.pairs, &corpus, &SelectionOracle, Some(0.9)),
            Err(RankingError::NoPairs)
        ));
    }

    fn human_triple(m: &Mcq) -> [DistractorCandidate; 3] {
        std::array::from_fn(|i| DistractorCandidate::text(m.distractors[i].text.clone()))
    }

    #[test]
    fn identical_sets_score_half() {
        let m = with_fractions("q", [0.3, 0.2, 0.1]);
        let c = mcq_preference(&m, &human_triple(&m), &SelectionOracle).unwrap();
        assert_eq!(c.score, 0.5);
        assert_eq!(c.ties, 3);
    }

    #[test]
    fn all_null_scores_zero() {
        let m = sample_mcq("q");
        let nulls = [(); 3].map(|_| DistractorCandidate::null());
        let c = mcq_preference(&m, &nulls, &ConstantRanker(RankerVerdict::First)).unwrap();
        assert_eq!(c.score, 0.0);
        assert_eq!(c.null_slots, 3);
    }

    #[test]
    fn preference_score_checks_ids() {
        let test = vec![sample_mcq("q")];
        let stray = GenerationResult {
            mcq_id: "other".into(),
            approach: Approach::Knn,
            config_hash: "h".into(),
            candidates: human_triple(&test[0]),
            raw_output: String::new(),
            provenance: Default::default(),
        };
        assert!(matches!(
            preference_score(&test, std::slice::from_ref(&stray), Approach::Knn, &SelectionOracle, 1),
            Err(RankingError::UnknownMcq(_))
        ));
        assert!(matches!(
            preference_score(&test, &[], Approach::Knn, &SelectionOracle, 1),
            Err(RankingError::MissingResult(_))
        ));
        let mut ok = stray;
        ok.mcq_id = "q".into();
        let report = preference_score(&test, &[ok], Approach::Knn, &SelectionOracle, 2).unwrap();
        assert_eq!(report.score, 0.5);
    }

    #[test]
    fn ranker_export_round_trip() {
        let corpus = vec![with_fractions("q", [0.30, 0.20, 0.05])];
        let ds = build_pair_dataset(&corpus);
        let out = export_ranker_training(&ds.pairs, &corpus, &PromptKit::builtin(), PromptContentMode::All).unwrap();
        let lines: Vec<&str> = out.lines().collect();
        assert_eq!(lines.len(), 6);
        assert!(out.contains("Preferred Answer: A") && out.contains("Preferred Answer: B"));
        for (line, pair) in lines.iter().zip(&ds.pairs) {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            assert!(v["messages"][0]["content"]
                .as_str()
                .unwrap()
                .ends_with("Which incorrect option are the students more likely to pick?"));
            assert_eq!(parse_ranker_record(line).unwrap(), (pair.d1.clone(), pair.d2.clone(), pair.label));
        }
    }

    #[test]
    fn verdict_parsing() {
        assert_eq!(parse_preferred("Preferred Answer: A"), Some(RankerVerdict::First));
        assert_eq!(parse_preferred("preferred answer:(b)"), Some(RankerVerdict::Second));
        assert_eq!(parse_preferred("I'd say B."), Some(RankerVerdict::Second));
        assert_eq!(parse_preferred("neither"), None);
    }
}
