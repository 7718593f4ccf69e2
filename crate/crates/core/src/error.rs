use thiserror::Error;

use crate::config::ConfigError;
use crate::corpus::StoreError;
use crate::llm::LlmError;
use crate::target::TargetError;

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error("model backend failed: {0}")]
    Llm(#[from] LlmError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("bad user input: {0}")]
    Input(String),
    #[error("refusing to resume: {0}")]
    ResumeRefused(String),
    #[error("{0}")]
    Loop(String),
}

impl CampaignError {
    /// Process exit code for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            CampaignError::Config(_) | CampaignError::Target(_) | CampaignError::Input(_) => 2,
            CampaignError::Llm(_) => 3,
            CampaignError::ResumeRefused(_) => 4,
            CampaignError::Store(_) | CampaignError::Loop(_) => 1,
        }
    }
}
