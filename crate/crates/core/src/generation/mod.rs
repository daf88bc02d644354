//! The five distractor-generation approaches and their shared output path:
//! render a prompt, complete it, parse labeled output, then null out
//! duplicates and key copies.

pub mod parse;

use std::collections::HashSet;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use parse::{parse_distractor_output, ParseReport, ParsedOutput};

use crate::corpus::{normalize_text, Mcq, TopicLevel};
use crate::llmclient::{ChatMessage, ChatRequest, DecodingConfig, LlmClient, LlmError};
use crate::promptkit::{PromptContentMode, PromptError, PromptKit, RenderedPrompt};
use crate::retrieval::{knn_select, random_select, EmbeddingStore, EncodingMode, RetrievalError};
use crate::seed;

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("missing dependency for {approach}: {what}")]
    MissingDependency { approach: Approach, what: &'static str },
    #[error(transparent)]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error("{path}: {message}")]
    File { path: String, message: String },
}

impl GenerationError {
    fn file(path: &Path, message: impl ToString) -> Self {
        Self::File {
            path: path.display().to_string(),
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Approach {
    Knn,
    Cot,
    Rb,
    Ft,
    Sb,
}

impl Approach {
    pub const ALL: [Approach; 5] = [Approach::Knn, Approach::Cot, Approach::Rb, Approach::Ft, Approach::Sb];

    pub fn as_str(self) -> &'static str {
        match self {
            Approach::Knn => "knn",
            Approach::Cot => "cot",
            Approach::Rb => "rb",
            Approach::Ft => "ft",
            Approach::Sb => "sb",
        }
    }
}

impl std::fmt::Display for Approach {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Approach {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Approach::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown approach {s}; expected one of knn, cot, rb, ft, sb"))
    }
}

/// A student error or misconception, tagged with the topic it belongs to.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorExplanation {
    pub text: String,
    pub topic: String,
}

/// Reads an error pool: one `topic<TAB>explanation` pair per line. Blank
/// lines and lines starting with `#` are skipped.
pub fn parse_error_pool(content: &str) -> Result<Vec<ErrorExplanation>, String> {
    let mut pool = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let (topic, text) = line
            .split_once('\t')
            .ok_or_else(|| format!("line {}: expected topic<TAB>explanation", i + 1))?;
        if text.trim().is_empty() || topic.trim().is_empty() {
            return Err(format!("line {}: empty topic or explanation", i + 1));
        }
        pool.push(ErrorExplanation {
            text: text.trim().to_string(),
            topic: topic.trim().to_string(),
        });
    }
    Ok(pool)
}

pub fn load_error_pool(path: &Path) -> Result<Vec<ErrorExplanation>, GenerationError> {
    let content = fs::read_to_string(path).map_err(|e| GenerationError::file(path, e))?;
    parse_error_pool(&content).map_err(|e| GenerationError::file(path, e))
}

/// Pool entries under the target's finest topic, widening one level at a
/// time until something matches. Returns the level that matched.
pub fn errors_for_topic<'a>(
    target: &Mcq,
    pool: &'a [ErrorExplanation],
) -> (Vec<&'a ErrorExplanation>, Option<TopicLevel>) {
    for level in TopicLevel::finest_to_coarsest() {
        let label = target.topic(level);
        let hits: Vec<_> = pool.iter().filter(|e| e.topic == label).collect();
        if !hits.is_empty() {
            return (hits, Some(level));
        }
    }
    (Vec::new(), None)
}

/// One generated distractor slot; `text == None` is a null slot.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DistractorCandidate {
    pub feedback: Option<String>,
    pub text: Option<String>,
}

impl DistractorCandidate {
    pub fn null() -> Self {
        Self::default()
    }

    pub fn text(text: impl Into<String>) -> Self {
        Self {
            feedback: None,
            text: Some(text.into()),
        }
    }

    pub fn is_null(&self) -> bool {
        self.text.is_none()
    }
}

/// Nulls every candidate equal to the key or to an earlier surviving
/// candidate (after normalization). Survivors keep their slots.
pub fn finalize_candidates(parsed: [DistractorCandidate; 3], key: &str) -> [DistractorCandidate; 3] {
    let key = normalize_text(key);
    let mut seen = HashSet::new();
    parsed.map(|c| match &c.text {
        Some(t) => {
            let norm = normalize_text(t);
            if norm.is_empty() || norm == key || !seen.insert(norm) {
                DistractorCandidate::null()
            } else {
                c
            }
        }
        None => DistractorCandidate::null(),
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    /// Cache keys of every LLM exchange that produced this result.
    pub cache_keys: Vec<String>,
    /// In-context example ids, in prompt order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub examples: Vec<String>,
    /// Error explanations shown to the model.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub errors: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
    #[serde(default)]
    pub parse: ParseReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub mcq_id: String,
    pub approach: Approach,
    pub config_hash: String,
    pub candidates: [DistractorCandidate; 3],
    pub raw_output: String,
    pub provenance: Provenance,
}

impl GenerationResult {
    /// Non-null candidate texts in slot order.
    pub fn texts(&self) -> Vec<&str> {
        self.candidates.iter().filter_map(|c| c.text.as_deref()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExampleSelector {
    #[default]
    Knn,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorSelector {
    /// The model picks three from the topic's full list.
    #[default]
    Llm,
    /// Three drawn at random from the topic's list.
    Random,
}

/// Every knob that changes what a generator produces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub approach: Approach,
    pub model: String,
    pub prompt_mode: PromptContentMode,
    pub k: usize,
    pub example_selector: ExampleSelector,
    pub exclude_topic: Option<TopicLevel>,
    /// Encoding the example store was built with.
    pub encoding: EncodingMode,
    /// Embedding provider id; part of the hash so a new embedder reruns kNN.
    pub embedder: String,
    pub error_selector: ErrorSelector,
    pub seed: u64,
    pub decoding: DecodingConfig,
    pub sb_samples: u32,
    pub sb_temperature: f64,
}

impl GeneratorConfig {
    pub fn new(approach: Approach, model: impl Into<String>) -> Self {
        Self {
            approach,
            model: model.into(),
            prompt_mode: PromptContentMode::All,
            k: 3,
            example_selector: ExampleSelector::Knn,
            exclude_topic: None,
            encoding: EncodingMode::default(),
            embedder: String::new(),
            error_selector: ErrorSelector::Llm,
            seed: 0,
            decoding: DecodingConfig::greedy(),
            sb_samples: 20,
            sb_temperature: 1.0,
        }
    }

    /// Short digest identifying this configuration in result records.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        seed::sha256_hex(&json)[..16].to_string()
    }
}

pub struct Generator<'a> {
    pub config: GeneratorConfig,
    pub client: &'a LlmClient,
    pub prompts: &'a PromptKit,
    /// Example pool for kNN/random selection (the train split).
    pub pool: &'a [Mcq],
    pub embeddings: Option<&'a EmbeddingStore>,
    pub errors: Option<&'a [ErrorExplanation]>,
}

impl Generator<'_> {
    pub fn generate(&self, target: &Mcq) -> Result<GenerationResult, GenerationError> {
        let mut provenance = Provenance::default();
        let raw = match self.config.approach {
            Approach::Knn => match self.knn_prompt(target, &mut provenance)? {
                Some(prompt) => self.complete_one(&prompt, &mut provenance)?,
                None => {
                    return Ok(self.result(target, [(); 3].map(|_| DistractorCandidate::null()), String::new(), provenance));
                }
            },
            Approach::Cot => {
                let prompt = self.prompts.render_cot(target, self.config.prompt_mode)?;
                self.complete_one(&prompt, &mut provenance)?
            }
            Approach::Rb => {
                let prompt = self.rb_prompt(target, &mut provenance)?;
                self.complete_one(&prompt, &mut provenance)?
            }
            Approach::Ft => {
                let prompt = self.prompts.render_ft(target, self.config.prompt_mode)?;
                self.complete_one(&prompt, &mut provenance)?
            }
            Approach::Sb => return self.sample_based(target, provenance),
        };
        let parsed = parse_distractor_output(&raw);
        provenance.parse = parsed.report;
        let candidates = finalize_candidates(parsed.candidates, &target.key);
        Ok(self.result(target, candidates, raw, provenance))
    }

    fn result(
        &self,
        target: &Mcq,
        candidates: [DistractorCandidate; 3],
        raw_output: String,
        provenance: Provenance,
    ) -> GenerationResult {
        GenerationResult {
            mcq_id: target.id.clone(),
            approach: self.config.approach,
            config_hash: self.config.config_hash(),
            candidates,
            raw_output,
            provenance,
        }
    }

    fn complete_one(&self, prompt: &RenderedPrompt, provenance: &mut Provenance) -> Result<String, GenerationError> {
        let request = ChatRequest::from_prompt(&self.config.model, prompt, self.config.decoding);
        provenance.cache_keys.push(request.cache_key().to_hex());
        provenance.notes.extend(prompt.notes.iter().cloned());
        let mut texts = self.client.complete(&request)?;
        Ok(texts.swap_remove(0))
    }

    fn knn_prompt(&self, target: &Mcq, provenance: &mut Provenance) -> Result<Option<RenderedPrompt>, GenerationError> {
        let examples: Vec<&Mcq> = match self.config.example_selector {
            ExampleSelector::Knn => {
                let store = self.embeddings.ok_or(GenerationError::MissingDependency {
                    approach: Approach::Knn,
                    what: "embeddings",
                })?;
                if store.mode != self.config.encoding {
                    return Err(GenerationError::MissingDependency {
                        approach: Approach::Knn,
                        what: "embeddings in the configured encoding mode",
                    });
                }
                let selection = knn_select(target, self.pool, self.config.k, store, self.config.exclude_topic)?;
                selection
                    .neighbors
                    .iter()
                    .map(|n| self.pool.iter().find(|m| m.id == n.id).expect("neighbor from pool"))
                    .collect()
            }
            ExampleSelector::Random => {
                let eligible: Vec<&Mcq> = self
                    .pool
                    .iter()
                    .filter(|m| m.id != target.id)
                    .filter(|m| match self.config.exclude_topic {
                        Some(level) => m.topic(level) != target.topic(level),
                        None => true,
                    })
                    .collect();
                let k = self.config.k.min(eligible.len());
                random_select(&eligible, k, seed::derive(self.config.seed, &target.id))?
            }
        };
        if examples.is_empty() {
            provenance.notes.push("no eligible in-context examples".into());
            return Ok(None);
        }
        provenance.examples = examples.iter().map(|m| m.id.clone()).collect();
        Ok(Some(self.prompts.render_knn(target, &examples, self.config.prompt_mode)?))
    }

    fn rb_prompt(&self, target: &Mcq, provenance: &mut Provenance) -> Result<RenderedPrompt, GenerationError> {
        let pool = self.errors.ok_or(GenerationError::MissingDependency {
            approach: Approach::Rb,
            what: "error pool",
        })?;
        let (matching, level) = errors_for_topic(target, pool);
        if let Some(level) = level {
            if level != TopicLevel::FINEST {
                provenance
                    .notes
                    .push(format!("error pool matched at topic level {}", level.get()));
            }
        }
        let shown: Vec<ErrorExplanation> = match self.config.error_selector {
            ErrorSelector::Llm => matching.into_iter().cloned().collect(),
            ErrorSelector::Random => {
                let k = 3.min(matching.len());
                random_select(&matching, k, seed::derive(self.config.seed, &target.id))?
                    .into_iter()
                    .cloned()
                    .collect()
            }
        };
        provenance.errors = shown.iter().map(|e| e.text.clone()).collect();
        Ok(self.prompts.render_rb(target, &shown, self.config.prompt_mode)?)
    }

    fn sample_based(&self, target: &Mcq, mut provenance: Provenance) -> Result<GenerationResult, GenerationError> {
        let prompt = self.prompts.render_open_answer(target)?;
        let mut config = DecodingConfig::sampling(self.config.sb_samples, self.config.sb_temperature);
        config.max_tokens = self.config.decoding.max_tokens;
        let request = ChatRequest::from_prompt(&self.config.model, &prompt, config);
        provenance.cache_keys.push(request.cache_key().to_hex());
        let samples = self.client.complete(&request)?;
        let answers: Vec<String> = samples.iter().filter_map(|s| extract_answer(s)).collect();
        let candidates = pick_incorrect(&answers, &target.key);
        let raw_output = samples.join("\n---\n");
        Ok(self.result(target, candidates, raw_output, provenance))
    }
}

/// First non-empty line of an answering model's reply, minus any leading
/// `Answer:` label.
pub fn extract_answer(sample: &str) -> Option<String> {
    let line = sample.lines().map(str::trim).find(|l| !l.is_empty())?;
    let stripped = line
        .strip_prefix("Answer:")
        .or_else(|| line.strip_prefix("answer:"))
        .unwrap_or(line)
        .trim();
    (!normalize_text(stripped).is_empty()).then(|| stripped.to_string())
}

/// First three distinct answers that differ from the key, null-padded.
pub fn pick_incorrect(answers: &[String], key: &str) -> [DistractorCandidate; 3] {
    let key = normalize_text(key);
    let mut seen = HashSet::new();
    let mut picked = answers
        .iter()
        .filter(|a| {
            let n = normalize_text(a);
            !n.is_empty() && n != key && seen.insert(n)
        })
        .take(3)
        .map(|a| DistractorCandidate::text(a.clone()));
    std::array::from_fn(|_| picked.next().unwrap_or_default())
}

/// Runs `generator` over `targets` on up to `workers` threads. Targets whose
/// (id, approach, config hash) already appear in `store` are skipped. Returns
/// one result per target in target order, including previously stored ones.
pub fn run_generation(
    generator: &Generator<'_>,
    targets: &[Mcq],
    workers: usize,
    store: &ResultsStore,
) -> Result<Vec<GenerationResult>, GenerationError> {
    let hash = generator.config.config_hash();
    let approach = generator.config.approach;
    let slots: Vec<Mutex<Option<GenerationResult>>> = targets
        .iter()
        .map(|t| Mutex::new(store.find(&t.id, approach, &hash)))
        .collect();
    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<GenerationError>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..workers.max(1) {
            s.spawn(|| loop {
                if failure.lock().expect("failure lock").is_some() {
                    return;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(target) = targets.get(i) else { return };
                if slots[i].lock().expect("slot lock").is_some() {
                    continue;
                }
                let outcome = generator.generate(target).and_then(|r| {
                    store.append(&r)?;
                    Ok(r)
                });
                match outcome {
                    Ok(result) => {
                        tracing::info!(stage = "generate", mcq_id = %target.id, approach = %approach, event = "done");
                        *slots[i].lock().expect("slot lock") = Some(result);
                    }
                    Err(e) => {
                        tracing::error!(stage = "generate", mcq_id = %target.id, event = "failed", error = %e);
                        failure.lock().expect("failure lock").get_or_insert(e);
                        return;
                    }
                }
            });
        }
    });
    if let Some(e) = failure.into_inner().expect("failure lock") {
        return Err(e);
    }
    store.compact()?;
    Ok(slots
        .into_iter()
        .map(|m| m.into_inner().expect("slot lock").expect("every slot filled"))
        .collect())
}

/// Append-only line-delimited store of generation results.
pub struct ResultsStore {
    path: Option<PathBuf>,
    records: Mutex<Vec<GenerationResult>>,
}

impl ResultsStore {
    pub fn in_memory() -> Self {
        Self {
            path: None,
            records: Mutex::new(Vec::new()),
        }
    }

    pub fn open(path: &Path) -> Result<Self, GenerationError> {
        let records = if path.exists() { load_results(path)? } else { Vec::new() };
        Ok(Self {
            path: Some(path.to_path_buf()),
            records: Mutex::new(records),
        })
    }

    pub fn find(&self, mcq_id: &str, approach: Approach, config_hash: &str) -> Option<GenerationResult> {
        self.records
            .lock()
            .expect("store lock")
            .iter()
            .find(|r| r.mcq_id == mcq_id && r.approach == approach && r.config_hash == config_hash)
            .cloned()
    }

    /// Writes one record as a single line under the store lock.
    pub fn append(&self, result: &GenerationResult) -> Result<(), GenerationError> {
        let mut records = self.records.lock().expect("store lock");
        if let Some(path) = &self.path {
            let mut line = serde_json::to_string(result).expect("result serializes");
            line.push('\n');
            let mut file = OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| GenerationError::file(path, e))?;
            file.write_all(line.as_bytes())
                .map_err(|e| GenerationError::file(path, e))?;
        }
        records.push(result.clone());
        Ok(())
    }

    pub fn records(&self) -> Vec<GenerationResult> {
        self.records.lock().expect("store lock").clone()
    }

    /// Rewrites the file sorted by (approach, config hash, MCQ id), so its
    /// bytes do not depend on which worker finished first.
    pub fn compact(&self) -> Result<(), GenerationError> {
        let mut records = self.records.lock().expect("store lock");
        records.sort_by(|a, b| {
            (a.approach, &a.config_hash, &a.mcq_id).cmp(&(b.approach, &b.config_hash, &b.mcq_id))
        });
        let Some(path) = &self.path else { return Ok(()) };
        let mut content = String::new();
        for r in records.iter() {
            content.push_str(&serde_json::to_string(r).expect("result serializes"));
            content.push('\n');
        }
        let tmp = path.with_extension("jsonl.tmp");
        fs::write(&tmp, content).map_err(|e| GenerationError::file(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| GenerationError::file(path, e))
    }
}

pub fn load_results(path: &Path) -> Result<Vec<GenerationResult>, GenerationError> {
    let content = fs::read_to_string(path).map_err(|e| GenerationError::file(path, e))?;
    content
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| GenerationError::file(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

#[derive(Serialize)]
struct TrainingRecord {
    messages: Vec<ChatMessage>,
}

fn training_line(prompt: &RenderedPrompt, target: String) -> String {
    let mut messages = Vec::with_capacity(3);
    if let Some(system) = &prompt.system {
        messages.push(ChatMessage::system(system.clone()));
    }
    messages.push(ChatMessage::user(prompt.user.clone()));
    messages.push(ChatMessage::assistant(target));
    serde_json::to_string(&TrainingRecord { messages }).expect("record serializes")
}

/// Chat-format fine-tuning records teaching a model to emit all three
/// distractors (feedback first when `mode` is `All`) from the target block.
pub fn export_ft_dataset(train: &[Mcq], prompts: &PromptKit, mode: PromptContentMode) -> Result<String, GenerationError> {
    let mut out = String::new();
    for mcq in train {
        let prompt = prompts.render_ft(mcq, mode)?;
        let entries: [(Option<&str>, &str); 3] = std::array::from_fn(|i| {
            let d = &mcq.distractors[i];
            (d.feedback.as_deref(), d.text.as_str())
        });
        let target = prompts.render_distractor_block(&entries, mode)?;
        out.push_str(&training_line(&prompt, target));
        out.push('\n');
    }
    Ok(out)
}

/// Question-answering records (stem in, key out) for the model the
/// sampling approach draws answers from.
pub fn export_answer_dataset(train: &[Mcq], prompts: &PromptKit) -> Result<String, GenerationError> {
    let mut out = String::new();
    for mcq in train {
        let prompt = prompts.render_open_answer(mcq)?;
        out.push_str(&training_line(&prompt, mcq.key.clone()));
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::sample_mcq;
    use crate::llmclient::{BackendReply, ChatBackend, FnBackend, ResponseCache};
    use std::sync::Arc;

    fn cands(texts: [Option<&str>; 3]) -> [DistractorCandidate; 3] {
        texts.map(|t| DistractorCandidate {
            feedback: None,
            text: t.map(String::from),
        })
    }

    #[test]
    fn finalize_rules() {
        let out = finalize_candidates(cands([Some("3:1"), Some(" 3:1"), Some("4:1")]), "2:1");
        assert_eq!(out, cands([Some("3:1"), None, Some("4:1")]));
        let out = finalize_candidates(cands([Some("30"), Some("1"), Some("2")]), "30");
        assert_eq!(out, cands([None, Some("1"), Some("2")]));
        let same = cands([Some("a"), Some("b"), Some("c")]);
        assert_eq!(finalize_candidates(same.clone(), "d"), same);
    }

    #[test]
    fn sb_selection() {
        let all_key: Vec<String> = vec!["30".into(); 20];
        assert!(pick_incorrect(&all_key, "30").iter().all(|c| c.is_null()));
        let mixed: Vec<String> = ["30", "10", "10 ", "18", "30", "5", "6"].map(String::from).to_vec();
        let got = pick_incorrect(&mixed, "30");
        let texts: Vec<_> = got.iter().map(|c| c.text.as_deref()).collect();
        assert_eq!(texts, vec![Some("10"), Some("18"), Some("5")]);
        assert_eq!(extract_answer("\n Answer: 12 \nbecause"), Some("12".into()));
        assert_eq!(extract_answer("  \n"), None);
    }

    #[test]
    fn error_pool_topic_fallback() {
        let pool = parse_error_pool("# comment\nFractions\tadds denominators\nNumber\tconfuses factor and multiples\n").unwrap();
        let m = sample_mcq("a");
        let (hits, level) = errors_for_topic(&m, &pool);
        assert_eq!(level, Some(TopicLevel::MIDDLE));
        assert_eq!(hits.len(), 1);
        let mut other = m.clone();
        other.topics = vec!["Geometry".into(), "Angles".into(), "Angles on a line".into()];
        assert_eq!(errors_for_topic(&other, &pool), (vec![], None));
        assert!(parse_error_pool("no tab here").is_err());
    }

    fn scripted(reply: &'static str) -> LlmClient {
        let backend: Arc<dyn ChatBackend> = Arc::new(FnBackend(move |r: &ChatRequest| {
            Ok(BackendReply::texts(vec![reply.to_string(); r.config.n_samples as usize]))
        }));
        LlmClient::with_backend(ResponseCache::in_memory(), backend)
    }

    const REPLY: &str = "Distractor1 Feedback: f1\nDistractor1: 10\nDistractor2 Feedback: f2\nDistractor2: 30\nDistractor3 Feedback: f3\nDistractor3: 10";

    #[test]
    fn cot_generation_finalizes() {
        let client = scripted(REPLY);
        let prompts = PromptKit::builtin();
        let g = Generator {
            config: GeneratorConfig::new(Approach::Cot, "gpt-4"),
            client: &client,
            prompts: &prompts,
            pool: &[],
            embeddings: None,
            errors: None,
        };
        let r = g.generate(&sample_mcq("t")).unwrap();
        // "30" is the key, second "10" is a duplicate
        assert_eq!(r.texts(), vec!["10"]);
        assert_eq!(r.candidates[0].feedback.as_deref(), Some("f1"));
        assert_eq!(r.provenance.cache_keys.len(), 1);
    }

    #[test]
    fn missing_dependencies_reported() {
        let client = scripted(REPLY);
        let prompts = PromptKit::builtin();
        let mut g = Generator {
            config: GeneratorConfig::new(Approach::Knn, "m"),
            client: &client,
            prompts: &prompts,
            pool: &[],
            embeddings: None,
            errors: None,
        };
        assert!(matches!(
            g.generate(&sample_mcq("t")),
            Err(GenerationError::MissingDependency { what: "embeddings", .. })
        ));
        g.config.approach = Approach::Rb;
        assert!(matches!(
            g.generate(&sample_mcq("t")),
            Err(GenerationError::MissingDependency { what: "error pool", .. })
        ));
    }

    #[test]
    fn rb_with_empty_topic_pool_uses_fallback() {
        let client = scripted(REPLY);
        let prompts = PromptKit::builtin();
        let pool = vec![ErrorExplanation {
            text: "misreads angle".into(),
            topic: "Geometry".into(),
        }];
        let g = Generator {
            config: GeneratorConfig::new(Approach::Rb, "gpt-4"),
            client: &client,
            prompts: &prompts,
            pool: &[],
            embeddings: None,
            errors: Some(&pool),
        };
        let r = g.generate(&sample_mcq("t")).unwrap();
        assert!(r.provenance.errors.is_empty());
        assert_eq!(r.candidates.len(), 3);
        let key = &r.provenance.cache_keys[0];
        let stored = client
            .cache()
            .get(&crate::llmclient::CacheKey::from_hex(key).unwrap())
            .unwrap()
            .unwrap();
        assert!(stored.request.messages[0].content.ends_with("Error list:"));
    }

    #[test]
    fn random_examples_exclude_topic() {
        let client = scripted(REPLY);
        let prompts = PromptKit::builtin();
        let mut pool: Vec<Mcq> = (0..4).map(|i| sample_mcq(&format!("p{i}"))).collect();
        pool[3].topics[2] = "Something else".into();
        let mut config = GeneratorConfig::new(Approach::Knn, "m");
        config.example_selector = ExampleSelector::Random;
        config.exclude_topic = Some(TopicLevel::FINEST);
        let g = Generator {
            config,
            client: &client,
            prompts: &prompts,
            pool: &pool,
            embeddings: None,
            errors: None,
        };
        let r = g.generate(&sample_mcq("t")).unwrap();
        assert_eq!(r.provenance.examples, vec!["p3"]);
    }

    #[test]
    fn ft_export_round_trips_through_parser() {
        let prompts = PromptKit::builtin();
        let train: Vec<Mcq> = (0..200).map(|i| sample_mcq(&format!("q{i}"))).collect();
        let out = export_ft_dataset(&train, &prompts, PromptContentMode::All).unwrap();
        assert_eq!(out.lines().count(), 200);
        for (line, mcq) in out.lines().zip(&train) {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let parsed = parse_distractor_output(v["messages"][1]["content"].as_str().unwrap());
            for (c, d) in parsed.candidates.iter().zip(&mcq.distractors) {
                assert_eq!(c.text.as_deref(), Some(d.text.as_str()));
                assert_eq!(c.feedback, d.feedback);
            }
        }
        let none = export_ft_dataset(&train[..1], &prompts, PromptContentMode::None).unwrap();
        let v: serde_json::Value = serde_json::from_str(none.trim()).unwrap();
        assert_eq!(
            v["messages"][0]["content"],
            format!("Question: {}", train[0].stem)
        );
        assert!(!v["messages"][1]["content"].as_str().unwrap().contains("Feedback"));
    }

    #[test]
    fn results_store_resumes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("results.jsonl");
        let client = scripted(REPLY);
        let prompts = PromptKit::builtin();
        let g = Generator {
            config: GeneratorConfig::new(Approach::Cot, "gpt-4"),
            client: &client,
            prompts: &prompts,
            pool: &[],
            embeddings: None,
            errors: None,
        };
        let targets: Vec<Mcq> = (0..6).map(|i| sample_mcq(&format!("t{i}"))).collect();
        let store = ResultsStore::open(&path).unwrap();
        let first = run_generation(&g, &targets, 3, &store).unwrap();
        let calls = client.network_calls();
        let reopened = ResultsStore::open(&path).unwrap();
        let second = run_generation(&g, &targets, 3, &reopened).unwrap();
        assert_eq!(first, second);
        assert_eq!(client.network_calls(), calls);
        assert_eq!(load_results(&path).unwrap().len(), 6);
        assert_eq!(
            first.iter().map(|r| r.mcq_id.as_str()).collect::<Vec<_>>(),
            vec!["t0", "t1", "t2", "t3", "t4", "t5"]
        );
    }
}
