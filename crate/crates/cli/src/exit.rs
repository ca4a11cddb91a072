//! Exit codes and the mapping from library errors onto them.

use dsc_core::chainmodel::ChainModelError;
use dsc_core::corpus::CorpusError;
use dsc_core::harness::HarnessError;
use dsc_core::llmclient::LlmError;
use dsc_core::metrics::MetricError;
use dsc_core::promptkit::PromptError;

pub const USAGE: u8 = 2;
pub const DATA: u8 = 3;
pub const BACKEND: u8 = 4;
pub const INTERNAL: u8 = 5;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self {
            code: USAGE,
            message: message.into(),
        }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self {
            code: DATA,
            message: message.into(),
        }
    }

    pub fn internal(e: impl std::fmt::Display) -> Self {
        Self {
            code: INTERNAL,
            message: format!("internal error: {e}"),
        }
    }

    fn with(code: u8, e: impl std::fmt::Display) -> Self {
        Self {
            code,
            message: e.to_string(),
        }
    }
}

impl From<CorpusError> for CliError {
    fn from(e: CorpusError) -> Self {
        Self::with(DATA, e)
    }
}

impl From<ChainModelError> for CliError {
    fn from(e: ChainModelError) -> Self {
        let code = match e {
            ChainModelError::InvalidConfig(_)
            | ChainModelError::InvalidOrder
            | ChainModelError::InvalidLambda(_)
            | ChainModelError::KUnreachable { .. } => USAGE,
            _ => DATA,
        };
        Self::with(code, e)
    }
}

impl From<PromptError> for CliError {
    fn from(e: PromptError) -> Self {
        let code = match e {
            PromptError::UnknownTemplateSet(_) | PromptError::ChainCount { .. } => USAGE,
            _ => DATA,
        };
        Self::with(code, e)
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        Self::with(DATA, e)
    }
}

impl From<LlmError> for CliError {
    fn from(e: LlmError) -> Self {
        let code = match e {
            LlmError::InvalidConfig(_) => USAGE,
            LlmError::Script { .. } => DATA,
            _ => BACKEND,
        };
        Self::with(code, e)
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Config(_) => Self::with(USAGE, e),
            HarnessError::AllQuestionsFailed(_) => Self::with(BACKEND, e),
            HarnessError::Corpus(e) => e.into(),
            HarnessError::Model(e) => e.into(),
            HarnessError::Prompt(e) => e.into(),
            HarnessError::Llm(e) => e.into(),
            HarnessError::Metric(e) => e.into(),
            other => Self::with(DATA, other),
        }
    }
}
