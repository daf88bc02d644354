//! Human-evaluation support: blinded rating sheets, rater agreement and
//! significance testing.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Read;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Mcq;
use crate::generation::{Approach, GenerationResult};
use crate::seed;

/// Points on the rating scale.
pub const SCALE: usize = 5;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("mcq {mcq_id}: {generated} generated vs {human} human distractors")]
    CountMismatch {
        mcq_id: String,
        generated: usize,
        human: usize,
    },
    #[error("rating vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("need at least {needed} values, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("rating {0} outside 1..=5")]
    OutOfScale(i64),
    #[error("agreement undefined: no expected disagreement")]
    QwkUndefined,
    #[error("t-test undefined: both samples have zero variance")]
    ZeroVariance,
    #[error("row {0} is not in the key file")]
    UnknownRow(u32),
    #[error("no generated result for mcq {0}")]
    MissingResult(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Llm,
    Human,
}

/// One question's distractors for the rating sheet.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalItem {
    pub mcq_id: String,
    pub stem: String,
    pub generated: Vec<String>,
    pub human: Vec<String>,
}

/// Pairs each test MCQ's human distractors with one approach's generations.
/// Null generations are skipped, so the sheet export will reject the item
/// unless the caller trims the human side to match.
pub fn eval_items(test: &[Mcq], results: &[GenerationResult], approach: Approach) -> Result<Vec<EvalItem>, AnalysisError> {
    let by_id: HashMap<&str, &GenerationResult> = results
        .iter()
        .filter(|r| r.approach == approach)
        .map(|r| (r.mcq_id.as_str(), r))
        .collect();
    test.iter()
        .map(|m| {
            let r = by_id
                .get(m.id.as_str())
                .ok_or_else(|| AnalysisError::MissingResult(m.id.clone()))?;
            Ok(EvalItem {
                mcq_id: m.id.clone(),
                stem: m.stem.clone(),
                generated: r.texts().into_iter().map(str::to_string).collect(),
                human: m.distractors.iter().map(|d| d.text.clone()).collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SheetRow {
    pub row_id: u32,
    pub mcq_id: String,
    pub question_stem: String,
    pub distractor: String,
    pub origin: Origin,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSheet {
    pub rows: Vec<SheetRow>,
}

impl EvalSheet {
    /// Rater-facing CSV: `row_id,question_stem,distractor`.
    pub fn rater_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["row_id", "question_stem", "distractor"]).expect("in-memory write");
        for r in &self.rows {
            w.write_record([r.row_id.to_string().as_str(), &r.question_stem, &r.distractor])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }

    /// Key CSV: `row_id,mcq_id,origin`.
    pub fn key_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["row_id", "mcq_id", "origin"]).expect("in-memory write");
        for r in &self.rows {
            let origin = match r.origin {
                Origin::Llm => "llm",
                Origin::Human => "human",
            };
            w.write_record([r.row_id.to_string().as_str(), &r.mcq_id, origin])
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf8")
    }
}

/// Builds the blinded sheet. Questions keep their input order; each
/// question's distractors are shuffled with a seed derived from its id.
pub fn export_eval_sheet(items: &[EvalItem], seed: u64) -> Result<EvalSheet, AnalysisError> {
    let mut rows = Vec::new();
    for item in items {
        if item.generated.len() != item.human.len() {
            return Err(AnalysisError::CountMismatch {
                mcq_id: item.mcq_id.clone(),
                generated: item.generated.len(),
                human: item.human.len(),
            });
        }
        let mut entries: Vec<(&str, Origin)> = item
            .generated
            .iter()
            .map(|t| (t.as_str(), Origin::Llm))
            .chain(item.human.iter().map(|t| (t.as_str(), Origin::Human)))
            .collect();
        entries.shuffle(&mut seed::rng(seed::derive(seed, &format!("sheet:{}", item.mcq_id))));
        for (text, origin) in entries {
            rows.push(SheetRow {
                row_id: rows.len() as u32 + 1,
                mcq_id: item.mcq_id.clone(),
                question_stem: item.stem.clone(),
                distractor: text.to_string(),
                origin,
            });
        }
    }
    Ok(EvalSheet { rows })
}

#[derive(Debug, Clone, Deserialize)]
struct KeyLine {
    row_id: u32,
    mcq_id: String,
    origin: Origin,
}

#[derive(Debug, Clone, Deserialize)]
struct RatingLine {
    row_id: u32,
    rater_id: String,
    validity: i64,
    plausibility: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub row_id: u32,
    pub mcq_id: String,
    pub distractor: Option<String>,
    pub origin: Origin,
    pub rater_id: String,
    pub validity: u8,
    pub plausibility: u8,
}

fn check_scale(v: i64) -> Result<u8, AnalysisError> {
    if (1..=SCALE as i64).contains(&v) {
        Ok(v as u8)
    } else {
        Err(AnalysisError::OutOfScale(v))
    }
}

/// Joins a ratings CSV (`row_id,rater_id,validity,plausibility`) with the
/// key CSV. Distractor text is left empty; the key file does not carry it.
pub fn read_ratings(key: impl Read, ratings: impl Read) -> Result<Vec<RatingRecord>, AnalysisError> {
    let mut keys = HashMap::new();
    for line in csv::Reader::from_reader(key).deserialize::<KeyLine>() {
        let k = line?;
        keys.insert(k.row_id, k);
    }
    let mut out = Vec::new();
    for line in csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(ratings).deserialize::<RatingLine>() {
        let r = line?;
        let k = keys.get(&r.row_id).ok_or(AnalysisError::UnknownRow(r.row_id))?;
        out.push(RatingRecord {
            row_id: r.row_id,
            mcq_id: k.mcq_id.clone(),
            distractor: None,
            origin: k.origin,
            rater_id: r.rater_id,
            validity: check_scale(r.validity)?,
            plausibility: check_scale(r.plausibility)?,
        });
    }
    Ok(out)
}

/// Quadratic weighted kappa over the fixed 1..=5 scale.
pub fn qwk(a: &[u8], b: &[u8]) -> Result<f64, AnalysisError> {
    if a.len() != b.len() {
        return Err(AnalysisError::LengthMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(AnalysisError::TooFew { needed: 2, got: a.len() });
    }
    let mut observed = [[0.0f64; SCALE]; SCALE];
    for (&x, &y) in a.iter().zip(b) {
        let (i, j) = (check_scale(x.into())? as usize - 1, check_scale(y.into())? as usize - 1);
        observed[i][j] += 1.0;
    }
    let n = a.len() as f64;
    let row: Vec<f64> = observed.iter().map(|r| r.iter().sum()).collect();
    let col: Vec<f64> = (0..SCALE).map(|j| observed.iter().map(|r| r[j]).sum()).collect();
    let denom_w = ((SCALE - 1) * (SCALE - 1)) as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..SCALE {
        for j in 0..SCALE {
            let w = ((i as f64) - (j as f64)).powi(2) / denom_w;
            num += w * observed[i][j];
            den += w * row[i] * col[j] / n;
        }
    }
    if den == 0.0 {
        return Err(AnalysisError::QwkUndefined);
    }
    Ok(1.0 - num / den)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TTestKind {
    Pooled,
    Welch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub kind: TTestKind,
}

fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-tailed p-value of a t statistic with `df` degrees of freedom.
pub fn t_two_tailed_p(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    statrs::function::beta::beta_reg(df / 2.0, 0.5, df / (df + t * t))
}

/// Classic pooled-variance two-sample Student's t-test.
pub fn students_t_test(x: &[f64], y: &[f64]) -> Result<TTest, AnalysisError> {
    t_test(x, y, TTestKind::Pooled)
}

pub fn t_test(x: &[f64], y: &[f64], kind: TTestKind) -> Result<TTest, AnalysisError> {
    for s in [x, y] {
        if s.len() < 2 {
            return Err(AnalysisError::TooFew { needed: 2, got: s.len() });
        }
    }
    let (nx, ny) = (x.len() as f64, y.len() as f64);
    let (mx, vx) = mean_var(x);
    let (my, vy) = mean_var(y);
    if vx == 0.0 && vy == 0.0 {
        return Err(AnalysisError::ZeroVariance);
    }
    let (se, df) = match kind {
        TTestKind::Pooled => {
            let df = nx + ny - 2.0;
            let pooled = ((nx - 1.0) * vx + (ny - 1.0) * vy) / df;
            ((pooled * (1.0 / nx + 1.0 / ny)).sqrt(), df)
        }
        TTestKind::Welch => {
            let (a, b) = (vx / nx, vy / ny);
            let df = (a + b).powi(2) / (a * a / (nx - 1.0) + b * b / (ny - 1.0));
            ((a + b).sqrt(), df)
        }
    };
    let t = (mx - my) / se;
    Ok(TTest {
        t,
        df,
        p: t_two_tailed_p(t, df),
        kind,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AspectSummary {
    /// Agreement between the first two raters; `None` when undefined.
    pub qwk: Option<f64>,
    pub shared_rows: usize,
    pub mean: BTreeMap<Origin, f64>,
    /// LLM ratings against human ratings; `None` when undefined.
    pub t_test: Option<TTest>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementReport {
    pub raters: Vec<String>,
    pub ratings: usize,
    pub validity: AspectSummary,
    pub plausibility: AspectSummary,
    pub t_test_kind: TTestKind,
}

pub fn analyze_ratings(records: &[RatingRecord], kind: TTestKind) -> AgreementReport {
    let raters: Vec<String> = records
        .iter()
        .map(|r| r.rater_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let aspect = |score: fn(&RatingRecord) -> u8| {
        let (qwk_value, shared_rows) = match raters.as_slice() {
            [a, b, ..] => {
                let first: BTreeMap<u32, u8> = records.iter().filter(|r| &r.rater_id == a).map(|r| (r.row_id, score(r))).collect();
                let mut xs = Vec::new();
                let mut ys = Vec::new();
                for r in records.iter().filter(|r| &r.rater_id == b) {
                    if let Some(&s) = first.get(&r.row_id) {
                        xs.push(s);
                        ys.push(score(r));
                    }
                }
                (qwk(&xs, &ys).ok(), xs.len())
            }
            _ => (None, 0),
        };
        let by_origin = |o: Origin| -> Vec<f64> {
            records.iter().filter(|r| r.origin == o).map(|r| f64::from(score(r))).collect()
        };
        let (llm, human) = (by_origin(Origin::Llm), by_origin(Origin::Human));
        let mut mean = BTreeMap::new();
        for (o, xs) in [(Origin::Llm, &llm), (Origin::Human, &human)] {
            if !xs.is_empty() {
                mean.insert(o, xs.iter().sum::<f64>() / xs.len() as f64);
            }
        }
        AspectSummary {
            qwk: qwk_value,
            shared_rows,
            mean,
            t_test: t_test(&llm, &human, kind).ok(),
        }
    };
    AgreementReport {
        ratings: records.len(),
        validity: aspect(|r| r.validity),
        plausibility: aspect(|r| r.plausibility),
        raters,
        t_test_kind: kind,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn item(id: &str) -> EvalItem {
        EvalItem {
            mcq_id: id.into(),
            stem: format!("stem {id}, with comma"),
            generated: vec!["g1".into(), "g2".into(), "g3".into()],
            human: vec!["h1".into(), "h2".into(), "h3".into()],
        }
    }

    #[test]
    fn sheet_shape_and_blinding() {
        let items: Vec<EvalItem> = (0..20).map(|i| item(&format!("q{i}"))).collect();
        let sheet = export_eval_sheet(&items, 7).unwrap();
        assert_eq!(sheet.rows.len(), 120);
        let rater = sheet.rater_csv();
        assert!(rater.starts_with("row_id,question_stem,distractor\n"));
        assert!(!rater.contains("origin") && !rater.contains("llm"));
        assert_eq!(rater.lines().count(), 121);
        assert!(sheet.key_csv().starts_with("row_id,mcq_id,origin\n"));
        assert_eq!(export_eval_sheet(&items, 7).unwrap(), sheet);
        assert_ne!(export_eval_sheet(&items, 8).unwrap(), sheet);
    }

    #[test]
    fn sheet_rejects_unbalanced() {
        let mut it = item("q");
        it.generated.pop();
        assert!(matches!(export_eval_sheet(&[it], 0), Err(AnalysisError::CountMismatch { .. })));
    }

    #[test]
    fn qwk_values() {
        assert_eq!(qwk(&[1, 2, 3, 4, 5], &[1, 2, 3, 4, 5]).unwrap(), 1.0);
        // anti-diagonal: Σw·O = 40/16, Σw·E = 100/80
        assert_abs_diff_eq!(qwk(&[1, 2, 3, 4, 5], &[5, 4, 3, 2, 1]).unwrap(), -1.0, epsilon = 1e-12);
        assert!(matches!(qwk(&[3, 3, 3], &[3, 3, 3]), Err(AnalysisError::QwkUndefined)));
        assert!(matches!(qwk(&[1], &[1]), Err(AnalysisError::TooFew { .. })));
        assert!(matches!(qwk(&[1, 6], &[1, 1]), Err(AnalysisError::OutOfScale(6))));
        let (a, b) = ([1, 2, 2, 4, 5, 3], [2, 2, 3, 4, 4, 1]);
        assert_eq!(qwk(&a, &b).unwrap(), qwk(&b, &a).unwrap());
    }

    #[test]
    fn t_test_reference() {
        let r = students_t_test(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]).unwrap();
        assert_abs_diff_eq!(r.t, -3.674_234_614_174_767, epsilon = 1e-12);
        assert_abs_diff_eq!(r.p, 0.021_311_641_128_756_4, epsilon = 1e-9);
        let same = students_t_test(&[1.0, 2.0, 4.0], &[1.0, 2.0, 4.0]).unwrap();
        assert_eq!((same.t, same.p), (0.0, 1.0));
        let swapped = students_t_test(&[4.0, 5.0, 6.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(swapped.t, -r.t);
        assert_eq!(swapped.p, r.p);
        assert!(matches!(students_t_test(&[2.0, 2.0], &[3.0, 3.0]), Err(AnalysisError::ZeroVariance)));
        let w = t_test(&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], TTestKind::Welch).unwrap();
        assert_abs_diff_eq!(w.df, 4.0, epsilon = 1e-12);
    }

    #[test]
    fn ratings_round_trip() {
        let sheet = export_eval_sheet(&[item("a"), item("b")], 1).unwrap();
        let mut ratings = String::from("row_id,rater_id,validity,plausibility\n");
        for r in &sheet.rows {
            let v = if r.origin == Origin::Human { 5 } else { 3 };
            ratings.push_str(&format!("{},ann,{v},{v}\n{},bob,{v},{}\n", r.row_id, r.row_id, v - 1));
        }
        let records = read_ratings(sheet.key_csv().as_bytes(), ratings.as_bytes()).unwrap();
        assert_eq!(records.len(), 24);
        let report = analyze_ratings(&records, TTestKind::Pooled);
        assert_eq!(report.raters, vec!["ann", "bob"]);
        assert_eq!(report.validity.qwk, Some(1.0));
        assert_eq!(report.validity.shared_rows, 12);
        assert_eq!(report.validity.mean[&Origin::Human], 5.0);
        assert!(report.validity.t_test.is_none());
        assert!(report.plausibility.qwk.unwrap() < 1.0);
        assert!(report.plausibility.t_test.unwrap().p < 0.05);
        let bad = "row_id,rater_id,validity,plausibility\n999,ann,1,1\n";
        assert!(matches!(read_ratings(sheet.key_csv().as_bytes(), bad.as_bytes()), Err(AnalysisError::UnknownRow(999))));
    }
}
