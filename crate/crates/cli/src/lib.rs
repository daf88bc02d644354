//! Command-line front end for the distractor pipeline.

pub mod commands;
pub mod config;
pub mod error;

use std::path::PathBuf;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use distractor_core::generation::{Approach, ErrorSelector, ExampleSelector};
use distractor_core::llmclient::ChatBackend;
use distractor_core::promptkit::PromptContentMode;
use distractor_core::retrieval::EncodingMode;
use serde::de::DeserializeOwned;

use config::{BackendKind, EmbeddingProviderKind, RankerKind, RunConfig};
pub use error::{Category, CliError};

/// Parses a snake_case value through the type's serde representation.
fn serde_value<T: DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

/// `all` or one approach name.
#[derive(Debug, Clone, PartialEq)]
pub struct ApproachSet(pub Vec<Approach>);

impl std::str::FromStr for ApproachSet {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Self(Approach::ALL.to_vec()));
        }
        s.split(',').map(|p| p.trim().parse()).collect::<Result<_, _>>().map(Self)
    }
}

#[derive(Debug, Parser)]
#[command(name = "distractors", version, about = "Generate and evaluate distractors for math multiple-choice questions")]
pub struct Cli {
    /// Run configuration file (TOML).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub corpus: Option<PathBuf>,
    #[arg(long, global = true)]
    pub output_dir: Option<PathBuf>,
    /// Worker threads for per-MCQ work.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    #[arg(long, global = true, value_enum)]
    pub backend: Option<BackendKind>,
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Recorded exchanges to load into the cache; repeatable.
    #[arg(long = "fixture", global = true)]
    pub fixtures: Vec<PathBuf>,
    #[arg(long, global = true)]
    pub split_seed: Option<u64>,
    #[arg(long, global = true)]
    pub split_ratio: Option<f64>,
    /// error, warn, info, debug or trace.
    #[arg(long, global = true, default_value = "info")]
    pub log_level: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate the corpus and summarize it.
    Ingest,
    /// Write the train/test split manifest.
    Split,
    /// Embed every MCQ into the embedding cache.
    Embed(EmbedArgs),
    /// Generate distractors for the test split.
    Generate(GenerateArgs),
    /// Exact/partial/proportional alignment against human distractors.
    Evaluate {
        #[arg(long, default_value = "all")]
        approach: ApproachSet,
        #[command(flatten)]
        knobs: GenerationKnobs,
    },
    /// Solve rate of the solver model with human or generated distractors.
    SolveRate {
        /// `human`, an approach name, or `all`.
        #[arg(long, default_value = "human")]
        source: String,
        #[command(flatten)]
        knobs: GenerationKnobs,
    },
    /// Pairwise preference datasets from student selection rates.
    PairsBuild {
        /// Also write chat-format ranker training records for the train split.
        #[arg(long)]
        training_export: bool,
    },
    /// Preference score of generated against human distractors.
    RankScore {
        #[arg(long, default_value = "all")]
        approach: ApproachSet,
        #[arg(long, value_enum)]
        ranker: Option<RankerKind>,
        /// Also report ranker accuracy on test-split pairs.
        #[arg(long)]
        accuracy: bool,
        #[arg(long)]
        margin: Option<f64>,
        #[command(flatten)]
        knobs: GenerationKnobs,
    },
    /// Chat-format fine-tuning data from the train split.
    FtExport {
        /// Also export the question-answering dataset.
        #[arg(long)]
        answers: bool,
        #[arg(long, value_parser = serde_value::<PromptContentMode>)]
        mode: Option<PromptContentMode>,
    },
    /// Blinded rating sheet and origin key for human evaluation.
    HumanevalExport {
        #[arg(long)]
        approach: Approach,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Drop trailing human distractors to match the generated count.
        #[arg(long)]
        balance: bool,
        #[command(flatten)]
        knobs: GenerationKnobs,
    },
    /// Agreement, mean ratings and t-tests from collected ratings.
    HumanevalAnalyze {
        #[arg(long)]
        key: PathBuf,
        #[arg(long)]
        ratings: PathBuf,
        /// Welch's unequal-variance test instead of the pooled one.
        #[arg(long)]
        welch: bool,
    },
    /// Move recorded exchanges in and out of the response cache.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

#[derive(Debug, Subcommand)]
pub enum CacheAction {
    Export {
        #[arg(long)]
        out: PathBuf,
        /// Only exchanges for this model.
        #[arg(long)]
        model: Option<String>,
    },
    Import {
        #[arg(long)]
        file: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct EmbedArgs {
    #[arg(long, value_enum)]
    pub provider: Option<EmbeddingProviderKind>,
    #[arg(long, value_parser = serde_value::<EncodingMode>)]
    pub encoding: Option<EncodingMode>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, default_value = "all")]
    pub approach: ApproachSet,
    #[command(flatten)]
    pub knobs: GenerationKnobs,
}

/// Overrides for the `[generation]` table. Commands that look up earlier
/// results accept them too, so the lookup hash matches the generate run.
#[derive(Debug, Args, Default)]
pub struct GenerationKnobs {
    #[arg(long)]
    pub k: Option<usize>,
    /// all, key or none.
    #[arg(long, value_parser = serde_value::<PromptContentMode>)]
    pub mode: Option<PromptContentMode>,
    #[arg(long, value_parser = serde_value::<EncodingMode>)]
    pub encoding: Option<EncodingMode>,
    /// Topic level to exclude from the example pool (0 disables).
    #[arg(long)]
    pub exclude_topic: Option<u8>,
    #[arg(long, value_parser = serde_value::<ExampleSelector>)]
    pub example_selector: Option<ExampleSelector>,
    #[arg(long, value_parser = serde_value::<ErrorSelector>)]
    pub error_selector: Option<ErrorSelector>,
    #[arg(long)]
    pub error_pool: Option<PathBuf>,
    #[arg(long)]
    pub generation_seed: Option<u64>,
}

impl GenerationKnobs {
    fn apply(&self, cfg: &mut RunConfig) {
        let g = &mut cfg.generation;
        if let Some(v) = self.k {
            g.k = v;
        }
        if let Some(v) = self.mode {
            g.prompt_mode = v;
        }
        if let Some(v) = self.encoding {
            g.encoding = v;
        }
        if let Some(v) = self.exclude_topic {
            g.exclude_topic = v;
        }
        if let Some(v) = self.example_selector {
            g.example_selector = v;
        }
        if let Some(v) = self.error_selector {
            g.error_selector = v;
        }
        if let Some(v) = &self.error_pool {
            g.error_pool = Some(v.clone());
        }
        if let Some(v) = self.generation_seed {
            g.seed = v;
        }
    }
}

impl Cli {
    /// Config file (or defaults) with every flag override applied.
    pub fn effective_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.corpus {
            cfg.corpus = v.clone();
        }
        if let Some(v) = &self.output_dir {
            cfg.output_dir = v.clone();
        }
        if let Some(v) = self.workers {
            cfg.workers = v;
        }
        if let Some(v) = self.backend {
            cfg.backend.kind = v;
        }
        if let Some(v) = &self.cache_dir {
            cfg.backend.cache_dir = Some(v.clone());
        }
        cfg.backend.fixtures.extend(self.fixtures.iter().cloned());
        if let Some(v) = self.split_seed {
            cfg.split.seed = v;
        }
        if let Some(v) = self.split_ratio {
            cfg.split.ratio = v;
        }
        match &self.command {
            Command::Embed(a) => {
                if let Some(v) = a.provider {
                    cfg.embedding.provider = v;
                }
                if let Some(v) = a.encoding {
                    cfg.generation.encoding = v;
                }
            }
            Command::Generate(a) => a.knobs.apply(&mut cfg),
            Command::Evaluate { knobs, .. }
            | Command::SolveRate { knobs, .. }
            | Command::HumanevalExport { knobs, .. } => knobs.apply(&mut cfg),
            Command::RankScore { ranker, margin, knobs, .. } => {
                knobs.apply(&mut cfg);
                if let Some(v) = ranker {
                    cfg.ranking.ranker = *v;
                }
                if margin.is_some() {
                    cfg.ranking.margin = *margin;
                }
            }
            Command::FtExport { mode: Some(m), .. } => cfg.generation.prompt_mode = *m,
            _ => {}
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Runs one command. `backend` replaces the configured chat backend; the
/// fixture recorder uses it to script model replies.
pub fn run(cli: &Cli, backend: Option<Arc<dyn ChatBackend>>) -> Result<(), CliError> {
    let cfg = cli.effective_config()?;
    commands::dispatch(cli, &cfg, backend)
}
