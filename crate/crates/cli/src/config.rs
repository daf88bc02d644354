//! Run configuration: a TOML file plus command-line overrides.

use std::path::{Path, PathBuf};

use distractor_core::corpus::TopicLevel;
use distractor_core::generation::{Approach, ErrorSelector, ExampleSelector, GeneratorConfig};
use distractor_core::llmclient::DecodingConfig;
use distractor_core::promptkit::PromptContentMode;
use distractor_core::retrieval::EncodingMode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub corpus: PathBuf,
    pub output_dir: PathBuf,
    pub workers: usize,
    pub split: SplitConfig,
    pub generation: GenerationConfig,
    pub models: ModelConfig,
    pub embedding: EmbeddingConfig,
    pub ranking: RankingConfig,
    pub backend: BackendConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            corpus: PathBuf::from("corpus.jsonl"),
            output_dir: PathBuf::from("out"),
            workers: 4,
            split: SplitConfig::default(),
            generation: GenerationConfig::default(),
            models: ModelConfig::default(),
            embedding: EmbeddingConfig::default(),
            ranking: RankingConfig::default(),
            backend: BackendConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub seed: u64,
    pub ratio: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self { seed: 0, ratio: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub k: usize,
    pub encoding: EncodingMode,
    pub prompt_mode: PromptContentMode,
    /// Topic level (1 coarsest .. 3 finest) whose matches are excluded from
    /// the example pool; 0 disables exclusion.
    pub exclude_topic: u8,
    pub example_selector: ExampleSelector,
    pub error_selector: ErrorSelector,
    pub error_pool: Option<PathBuf>,
    pub seed: u64,
    pub temperature: f64,
    pub max_tokens: u32,
    pub top_p: f64,
    pub sb_samples: u32,
    pub sb_temperature: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        let greedy = DecodingConfig::greedy();
        Self {
            k: 3,
            encoding: EncodingMode::default(),
            prompt_mode: PromptContentMode::All,
            exclude_topic: 3,
            example_selector: ExampleSelector::Knn,
            error_selector: ErrorSelector::Llm,
            error_pool: None,
            seed: 0,
            temperature: greedy.temperature,
            max_tokens: greedy.max_tokens,
            top_p: greedy.top_p,
            sb_samples: 20,
            sb_temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub generator: String,
    pub fine_tuned: String,
    pub solver: String,
    pub ranker: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            generator: "gpt-4".into(),
            fine_tuned: "ft:gpt-3.5-turbo:distractors".into(),
            solver: "gpt-4".into(),
            ranker: "ft:gpt-3.5-turbo:ranker".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingProviderKind {
    Lexical,
    Precomputed,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub provider: EmbeddingProviderKind,
    /// Dimension of the lexical embedder.
    pub dim: usize,
    /// Vector file for the precomputed provider.
    pub vectors: Option<PathBuf>,
    /// Model name for the remote provider.
    pub model: String,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        Self {
            provider: EmbeddingProviderKind::Lexical,
            dim: 256,
            vectors: None,
            model: "text-embedding-3-small".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum RankerKind {
    /// The ranking model over the chat API.
    Llm,
    /// Student selection fractions.
    Oracle,
    /// Always prefers the first option.
    First,
    /// Seeded coin flip.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankingConfig {
    pub ranker: RankerKind,
    pub prompt_mode: PromptContentMode,
    /// Accuracy only counts pairs whose selection margin exceeds this.
    pub margin: Option<f64>,
}

impl Default for RankingConfig {
    fn default() -> Self {
        Self {
            ranker: RankerKind::Llm,
            prompt_mode: PromptContentMode::All,
            margin: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    /// Cache and fixtures only; a miss is an error.
    Replay,
    /// OpenAI-compatible endpoint from the environment, cached write-through.
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    /// Response cache directory; in-memory when unset.
    pub cache_dir: Option<PathBuf>,
    /// Recorded exchanges imported into the cache at startup.
    pub fixtures: Vec<PathBuf>,
    pub concurrency: usize,
    pub timeout_secs: u64,
}

impl Default for BackendConfig {
    fn default() -> Self {
        Self {
            kind: BackendKind::Replay,
            cache_dir: None,
            fixtures: Vec::new(),
            concurrency: 4,
            timeout_secs: 60,
        }
    }
}

impl RunConfig {
    /// Reads a config file. Relative paths inside it are taken relative to
    /// the file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.output_dir);
        if let Some(p) = &mut self.generation.error_pool {
            fix(p);
        }
        if let Some(p) = &mut self.embedding.vectors {
            fix(p);
        }
        if let Some(p) = &mut self.backend.cache_dir {
            fix(p);
        }
        for p in &mut self.backend.fixtures {
            fix(p);
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        if !(self.split.ratio > 0.0 && self.split.ratio < 1.0) {
            return Err(CliError::config(format!("split.ratio must lie in (0, 1), got {}", self.split.ratio)));
        }
        if self.generation.k == 0 {
            return Err(CliError::config("generation.k must be at least 1"));
        }
        if self.generation.exclude_topic > 3 {
            return Err(CliError::config("generation.exclude_topic must be 0..=3"));
        }
        if self.workers == 0 || self.backend.concurrency == 0 {
            return Err(CliError::config("workers and backend.concurrency must be at least 1"));
        }
        if self.generation.sb_samples < 3 {
            return Err(CliError::config("generation.sb_samples must be at least 3"));
        }
        self.decoding()
            .validate()
            .map_err(|e| CliError::config(e.to_string()))?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Digest of everything that can change an output. Paths, worker counts
    /// and backend wiring are left out so the same experiment hashes the same
    /// from any checkout and at any parallelism.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.corpus = PathBuf::new();
        c.output_dir = PathBuf::new();
        c.workers = 0;
        c.generation.error_pool = c.generation.error_pool.map(|_| PathBuf::from("<set>"));
        c.embedding.vectors = c.embedding.vectors.map(|_| PathBuf::from("<set>"));
        c.backend = BackendConfig::default();
        let digest = Sha256::digest(c.to_toml().as_bytes());
        hex::encode(digest)[..16].to_string()
    }

    pub fn decoding(&self) -> DecodingConfig {
        DecodingConfig {
            temperature: self.generation.temperature,
            max_tokens: self.generation.max_tokens,
            top_p: self.generation.top_p,
            n_samples: 1,
        }
    }

    pub fn generator_config(&self, approach: Approach) -> GeneratorConfig {
        let g = &self.generation;
        let model = match approach {
            Approach::Ft => self.models.fine_tuned.clone(),
            _ => self.models.generator.clone(),
        };
        let mut cfg = GeneratorConfig::new(approach, model);
        cfg.prompt_mode = g.prompt_mode;
        cfg.k = g.k;
        cfg.example_selector = g.example_selector;
        cfg.exclude_topic = TopicLevel::new(g.exclude_topic);
        cfg.error_selector = g.error_selector;
        cfg.seed = g.seed;
        cfg.decoding = self.decoding();
        cfg.sb_samples = g.sb_samples;
        cfg.sb_temperature = g.sb_temperature;
        cfg
    }
}
