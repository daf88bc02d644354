//! MCQ records: loading, validation, canonical text normalization, and
//! seeded train/test splitting.
//!
//! A corpus file holds one JSON record per line:
//!
//! ```text
//! {"id":"q1","stem":"...","key":"...","key_explanation":"...",
//!  "distractors":[{"text":"...","feedback":"..."}, x3],
//!  "topics":["Number","Fractions","Fractions of an amount"],
//!  "selection":{"key":0.6,"d1":0.2,"d2":0.1,"d3":0.05},"n_responses":1200}
//! ```

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

use crate::seed;

/// Number of distractors every MCQ carries.
pub const DISTRACTOR_COUNT: usize = 3;
/// Number of topic granularity levels, coarse to fine.
pub const TOPIC_LEVELS: usize = 3;

const SELECTION_SUM_SLACK: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("mcq {id}: {rule}")]
    Invalid { id: String, rule: String },
    #[error("line {line}: duplicate mcq id {id}")]
    DuplicateId { id: String, line: usize },
    #[error("corpus is empty")]
    Empty,
    #[error("split ratio must lie strictly between 0 and 1, got {0}")]
    BadRatio(f64),
    #[error("split manifest references unknown mcq id {0}")]
    UnknownId(String),
}

/// Canonical form used for every distractor/key string comparison.
///
/// NFC, case-folded, trimmed, internal whitespace runs collapsed to one
/// space. Math markup is left as-is.
pub fn normalize_text(raw: &str) -> String {
    let folded: String = raw.nfc().collect::<String>().to_lowercase().nfc().collect();
    let mut out = String::with_capacity(folded.len());
    for word in folded.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(word);
    }
    out
}

/// True when two strings are equal after [`normalize_text`].
pub fn same_text(a: &str, b: &str) -> bool {
    normalize_text(a) == normalize_text(b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistractorEntry {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feedback: Option<String>,
}

/// Fraction of students that picked each option.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SelectionDistribution {
    pub key: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
}

impl SelectionDistribution {
    /// Fraction for the distractor at `index` (0-based).
    pub fn distractor(&self, index: usize) -> f64 {
        match index {
            0 => self.d1,
            1 => self.d2,
            2 => self.d3,
            _ => panic!("distractor index {index} out of range"),
        }
    }

    fn values(&self) -> [f64; 4] {
        [self.key, self.d1, self.d2, self.d3]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Mcq {
    pub id: String,
    pub stem: String,
    pub key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key_explanation: Option<String>,
    pub distractors: Vec<DistractorEntry>,
    pub topics: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<SelectionDistribution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_responses: Option<u64>,
}

impl Mcq {
    /// Checks every record-level invariant, naming the first one violated.
    pub fn validate(&self) -> Result<(), CorpusError> {
        let invalid = |rule: String| CorpusError::Invalid {
            id: self.id.clone(),
            rule,
        };
        if self.id.trim().is_empty() {
            return Err(invalid("id is empty".into()));
        }
        if normalize_text(&self.stem).is_empty() {
            return Err(invalid("stem is empty".into()));
        }
        if normalize_text(&self.key).is_empty() {
            return Err(invalid("key is empty".into()));
        }
        if self.distractors.len() != DISTRACTOR_COUNT {
            return Err(invalid(format!(
                "distractor count ≠ 3 (found {})",
                self.distractors.len()
            )));
        }
        let key = normalize_text(&self.key);
        for (i, d) in self.distractors.iter().enumerate() {
            let text = normalize_text(&d.text);
            if text.is_empty() {
                return Err(invalid(format!("distractor {} is empty", i + 1)));
            }
            if text == key {
                return Err(invalid(format!("distractor {} equals the key", i + 1)));
            }
        }
        if self.topics.len() != TOPIC_LEVELS {
            return Err(invalid(format!(
                "topic count ≠ 3 (found {})",
                self.topics.len()
            )));
        }
        if let Some(level) = self.topics.iter().position(|t| t.trim().is_empty()) {
            return Err(invalid(format!("topic level {} is empty", level + 1)));
        }
        if let Some(sel) = &self.selection {
            for v in sel.values() {
                if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                    return Err(invalid(format!("selection fraction {v} outside [0,1]")));
                }
            }
            let total: f64 = sel.values().iter().sum();
            if total > 1.0 + SELECTION_SUM_SLACK {
                return Err(invalid(format!("selection fractions sum to {total} > 1")));
            }
        }
        Ok(())
    }

    /// Human-authored distractor texts in slot order.
    pub fn distractor_texts(&self) -> Vec<&str> {
        self.distractors.iter().map(|d| d.text.as_str()).collect()
    }

    /// Topic label at `level` (1 = coarsest, 3 = finest).
    pub fn topic(&self, level: TopicLevel) -> &str {
        &self.topics[level.index()]
    }
}

/// One of the three topic granularity levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct TopicLevel(u8);

impl TopicLevel {
    pub const COARSE: TopicLevel = TopicLevel(1);
    pub const MIDDLE: TopicLevel = TopicLevel(2);
    pub const FINEST: TopicLevel = TopicLevel(3);

    pub fn new(level: u8) -> Option<Self> {
        (1..=TOPIC_LEVELS as u8).contains(&level).then_some(Self(level))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    fn index(self) -> usize {
        usize::from(self.0 - 1)
    }

    /// Finest level first, then progressively coarser.
    pub fn finest_to_coarsest() -> [TopicLevel; 3] {
        [Self::FINEST, Self::MIDDLE, Self::COARSE]
    }
}

impl TryFrom<u8> for TopicLevel {
    type Error = String;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        TopicLevel::new(value).ok_or_else(|| format!("topic level must be 1..=3, got {value}"))
    }
}

impl From<TopicLevel> for u8 {
    fn from(level: TopicLevel) -> u8 {
        level.0
    }
}

/// Parses line-delimited MCQ records, validating each one. Blank lines are
/// skipped; line numbers in errors are 1-based.
pub fn parse_corpus(content: &str) -> Result<Vec<Mcq>, CorpusError> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let mcq: Mcq = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        mcq.validate()?;
        if !seen.insert(mcq.id.clone()) {
            return Err(CorpusError::DuplicateId {
                id: mcq.id,
                line: line_no,
            });
        }
        out.push(mcq);
    }
    Ok(out)
}

pub fn load_corpus(path: &Path) -> Result<Vec<Mcq>, CorpusError> {
    let content = fs::read_to_string(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_corpus(&content)
}

/// Serializes records one per line, in order, with a trailing newline.
pub fn serialize_corpus(mcqs: &[Mcq]) -> String {
    let mut out = String::new();
    for mcq in mcqs {
        let line = serde_json::to_string(mcq).expect("mcq serializes");
        let _ = writeln!(out, "{line}");
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub train: Vec<Mcq>,
    pub test: Vec<Mcq>,
    pub seed: u64,
}

/// Seeded shuffle followed by a prefix cut; `round(ratio * n)` records go to
/// the train side.
pub fn split_corpus(corpus: &[Mcq], ratio: f64, seed: u64) -> Result<CorpusSplit, CorpusError> {
    if corpus.is_empty() {
        return Err(CorpusError::Empty);
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(CorpusError::BadRatio(ratio));
    }
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    order.shuffle(&mut seed::rng(seed));
    let n_train = (ratio * corpus.len() as f64).round() as usize;
    let (train, test) = order.split_at(n_train);
    Ok(CorpusSplit {
        train: train.iter().map(|&i| corpus[i].clone()).collect(),
        test: test.iter().map(|&i| corpus[i].clone()).collect(),
        seed,
    })
}

/// On-disk record of a split: ids per side plus the seed and ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub ratio: f64,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn from_split(split: &CorpusSplit, ratio: f64) -> Self {
        Self {
            seed: split.seed,
            ratio,
            train: split.train.iter().map(|m| m.id.clone()).collect(),
            test: split.test.iter().map(|m| m.id.clone()).collect(),
        }
    }

    /// Rebuilds the split against a loaded corpus.
    pub fn apply(&self, corpus: &[Mcq]) -> Result<CorpusSplit, CorpusError> {
        let by_id: HashMap<&str, &Mcq> = corpus.iter().map(|m| (m.id.as_str(), m)).collect();
        let pick = |ids: &[String]| -> Result<Vec<Mcq>, CorpusError> {
            ids.iter()
                .map(|id| {
                    by_id
                        .get(id.as_str())
                        .map(|m| (*m).clone())
                        .ok_or_else(|| CorpusError::UnknownId(id.clone()))
                })
                .collect()
        };
        Ok(CorpusSplit {
            train: pick(&self.train)?,
            test: pick(&self.test)?,
            seed: self.seed,
        })
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    pub(crate) fn sample_mcq(id: &str) -> Mcq {
        Mcq {
            id: id.to_string(),
            stem: format!("What is 3/5 of 50? ({id})"),
            key: "30".into(),
            key_explanation: Some("50 / 5 = 10, 10 x 3 = 30".into()),
            distractors: vec![
                DistractorEntry {
                    text: "10".into(),
                    feedback: Some("Divided but did not multiply".into()),
                },
                DistractorEntry {
                    text: "18".into(),
                    feedback: Some("Used 3/5 of 30".into()),
                },
                DistractorEntry {
                    text: "83 1/3".into(),
                    feedback: None,
                },
            ],
            topics: vec!["Number".into(), "Fractions".into(), "Fractions of an amount".into()],
            selection: Some(SelectionDistribution {
                key: 0.5,
                d1: 0.3,
                d2: 0.15,
                d3: 0.05,
            }),
            n_responses: Some(1000),
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_text("  3 : 1 "), "3 : 1");
        assert_eq!(normalize_text("X"), normalize_text("x"));
        assert_eq!(normalize_text("\\frac{3}{5}"), "\\frac{3}{5}");
        assert_eq!(normalize_text("a\t\n  b"), "a b");
        // decomposed é vs precomposed é
        assert_eq!(normalize_text("caf\u{0065}\u{0301}"), normalize_text("caf\u{00e9}"));
    }

    #[test]
    fn loads_two_lines() {
        let content = serialize_corpus(&[sample_mcq("a"), sample_mcq("b")]);
        let mcqs = parse_corpus(&content).unwrap();
        assert_eq!(mcqs.len(), 2);
        assert_eq!(mcqs[0].id, "a");
        assert_eq!(mcqs[1].id, "b");
    }

    #[test]
    fn rejects_two_distractors() {
        let mut m = sample_mcq("a");
        m.distractors.pop();
        let line = serde_json::to_string(&m).unwrap();
        let err = parse_corpus(&line).unwrap_err();
        assert!(err.to_string().contains("distractor count ≠ 3"), "{err}");
    }

    #[test]
    fn rejects_key_equal_to_distractor_after_normalization() {
        let mut m = sample_mcq("a");
        m.distractors[1].text = "  30 ".into();
        let err = parse_corpus(&serde_json::to_string(&m).unwrap()).unwrap_err();
        assert!(matches!(err, CorpusError::Invalid { ref id, .. } if id == "a"), "{err}");
    }

    #[test]
    fn parse_error_carries_line_number() {
        let content = format!(
            "{}\n{{not json\n",
            serde_json::to_string(&sample_mcq("a")).unwrap()
        );
        match parse_corpus(&content).unwrap_err() {
            CorpusError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn duplicate_ids_rejected() {
        let content = serialize_corpus(&[sample_mcq("a"), sample_mcq("a")]);
        assert!(matches!(
            parse_corpus(&content).unwrap_err(),
            CorpusError::DuplicateId { line: 2, .. }
        ));
    }

    #[test]
    fn selection_and_topics_checked() {
        let mut m = sample_mcq("a");
        m.selection.as_mut().unwrap().d1 = 0.9;
        assert!(m.validate().unwrap_err().to_string().contains("sum"));
        let mut m = sample_mcq("a");
        m.topics[2] = " ".into();
        assert!(m.validate().is_err());
        let mut m = sample_mcq("a");
        m.topics.pop();
        assert!(m.validate().is_err());
        let mut m = sample_mcq("a");
        m.selection = None;
        assert!(m.validate().is_ok());
    }

    #[test]
    fn unknown_selection_option_rejected() {
        let line = serde_json::to_string(&sample_mcq("a"))
            .unwrap()
            .replace("\"d3\":0.05", "\"d4\":0.05");
        assert!(matches!(parse_corpus(&line).unwrap_err(), CorpusError::Parse { .. }));
    }

    fn corpus(n: usize) -> Vec<Mcq> {
        (0..n).map(|i| sample_mcq(&format!("q{i}"))).collect()
    }

    #[test]
    fn split_sizes() {
        let s = split_corpus(&corpus(10), 0.8, 7).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (8, 2));
        let s = split_corpus(&corpus(1400), 0.8, 7).unwrap();
        assert_eq!((s.train.len(), s.test.len()), (1120, 280));
    }

    #[test]
    fn split_is_deterministic_and_partitions() {
        let c = corpus(37);
        let a = split_corpus(&c, 0.8, 7).unwrap();
        let b = split_corpus(&c, 0.8, 7).unwrap();
        assert_eq!(a, b);
        let mut ids: Vec<_> = a.train.iter().chain(&a.test).map(|m| m.id.clone()).collect();
        ids.sort();
        let mut expected: Vec<_> = c.iter().map(|m| m.id.clone()).collect();
        expected.sort();
        assert_eq!(ids, expected);
    }

    #[test]
    fn split_errors() {
        assert!(matches!(split_corpus(&[], 0.8, 1), Err(CorpusError::Empty)));
        assert!(matches!(split_corpus(&corpus(3), 1.0, 1), Err(CorpusError::BadRatio(_))));
    }

    #[test]
    fn manifest_round_trip() {
        let c = corpus(12);
        let split = split_corpus(&c, 0.75, 3).unwrap();
        let manifest = SplitManifest::from_split(&split, 0.75);
        let json = serde_json::to_string(&manifest).unwrap();
        let back: SplitManifest = serde_json::from_str(&json).unwrap();
        assert_eq!(back.apply(&c).unwrap(), split);
    }
}
