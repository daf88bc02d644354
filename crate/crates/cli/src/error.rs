use std::fmt;

use distractor_core::analysis::AnalysisError;
use distractor_core::corpus::CorpusError;
use distractor_core::generation::GenerationError;
use distractor_core::llmclient::{CacheError, LlmError};
use distractor_core::metrics::MetricsError;
use distractor_core::promptkit::PromptError;
use distractor_core::ranking::RankingError;
use distractor_core::retrieval::RetrievalError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Category {
    Config,
    Data,
    Transport,
    FixtureGap,
}

impl Category {
    pub fn exit_code(self) -> i32 {
        match self {
            Category::Config => 2,
            Category::Data => 3,
            Category::Transport => 4,
            Category::FixtureGap => 5,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Config => "config",
            Category::Data => "data",
            Category::Transport => "transport",
            Category::FixtureGap => "fixture-gap",
        }
    }
}

#[derive(Debug)]
pub struct CliError {
    pub category: Category,
    pub message: String,
}

impl CliError {
    pub fn new(category: Category, message: impl Into<String>) -> Self {
        Self {
            category,
            message: message.into(),
        }
    }

    pub fn config(message: impl Into<String>) -> Self {
        Self::new(Category::Config, message)
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self::new(Category::Data, message)
    }

    pub fn io(path: &std::path::Path, e: std::io::Error) -> Self {
        Self::data(format!("{}: {e}", path.display()))
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} error: {}", self.category.as_str(), self.message)
    }
}

impl std::error::Error for CliError {}

fn llm_category(e: &LlmError) -> Category {
    match e {
        LlmError::ReplayMiss { .. } => Category::FixtureGap,
        LlmError::InvalidConfig(_) => Category::Config,
        LlmError::Cache(_) => Category::Data,
        LlmError::Transport { .. } | LlmError::Rejected(_) | LlmError::Refusal { .. } | LlmError::SampleCount { .. } => {
            Category::Transport
        }
    }
}

impl From<LlmError> for CliError {
    fn from(e: LlmError) -> Self {
        Self::new(llm_category(&e), e.to_string())
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        match e {
            CorpusError::BadRatio(_) => Self::config(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<CacheError> for CliError {
    fn from(e: CacheError) -> Self {
        Self::data(e.to_string())
    }
}

impl From<RetrievalError> for CliError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Provider(_) => Self::new(Category::Transport, e.to_string()),
            RetrievalError::ZeroK => Self::config(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        match e {
            PromptError::Syntax { .. } | PromptError::Unbound { .. } | PromptError::Io { .. } => Self::config(e.to_string()),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<GenerationError> for CliError {
    fn from(e: GenerationError) -> Self {
        match e {
            GenerationError::Llm(inner) => inner.into(),
            GenerationError::Prompt(inner) => inner.into(),
            GenerationError::Retrieval(inner) => inner.into(),
            GenerationError::MissingDependency { .. } => Self::config(e.to_string()),
            GenerationError::File { .. } => Self::data(e.to_string()),
        }
    }
}

impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        match e {
            MetricsError::Llm(inner) => inner.into(),
            MetricsError::Prompt(inner) => inner.into(),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<RankingError> for CliError {
    fn from(e: RankingError) -> Self {
        match e {
            RankingError::Llm(inner) => inner.into(),
            RankingError::Prompt(inner) => inner.into(),
            _ => Self::data(e.to_string()),
        }
    }
}

impl From<AnalysisError> for CliError {
    fn from(e: AnalysisError) -> Self {
        Self::data(e.to_string())
    }
}
