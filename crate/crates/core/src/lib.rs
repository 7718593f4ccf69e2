//! LLM-driven fuzzing: prompt distillation, an input-generation loop, SUT
//! oracles and a persistent campaign store.

pub mod autoprompt;
pub mod campaign;
pub mod clock;
pub mod config;
pub mod corpus;
pub mod error;
pub mod fuzz_loop;
pub mod hash;
pub mod llm;
pub mod metrics;
pub mod process;
pub mod strategy;
pub mod target;
pub mod text;

pub use autoprompt::{autoprompting, AutopromptOptions, AutopromptOutcome, CandidateOrigin, PromptCandidate, UserInput};
pub use campaign::{report_campaign, resume_campaign, run_campaign, validate_target, RunOptions, RunReport};
pub use clock::{Clock, ManualClock, SystemClock};
pub use config::{CampaignConfig, CampaignMeta, ConfigError, PromptMode};
pub use corpus::{BugReport, Budget, BudgetKind, CampaignState, CampaignStore, FuzzInput, InputEvent, Phase};
pub use error::CampaignError;
pub use fuzz_loop::{assemble_prompt, extract_code, FuzzPrompt, LoopOutcome, LoopSettings, Session, StrategySet};
pub use llm::{Completion, Gateway, LlmError, ModelEndpoint, Prompt, SamplingParams, ScriptEntry, ScriptedResponses};
pub use metrics::{CampaignStats, Summary};
pub use strategy::{GenerationStrategy, StrategyKind};
pub use target::{OracleVerdict, TargetConfig, VerdictStatus};
