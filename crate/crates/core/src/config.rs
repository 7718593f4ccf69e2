//! Campaign configuration, loaded from TOML.
//!
//! Relative paths are resolved against the directory holding the config
//! file. Validation errors name the offending key.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autoprompt::DEFAULT_SYSTEM_TEXT;
use crate::corpus::Budget;
use crate::fuzz_loop::StrategySet;
use crate::llm::{EndpointKind, ModelEndpoint, RetryPolicy, SamplingParams};
use crate::target::{TargetConfig, TargetSpec};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("{key}: {message}")]
    Invalid { key: String, message: String },
}

fn invalid(key: impl Into<String>, message: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.into(),
        message: message.into(),
    }
}

/// Where the initial prompt comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PromptMode {
    /// Empty initial prompt.
    None,
    /// The user documentation, unmodified.
    Raw,
    /// Distilled and scored candidates.
    #[default]
    Autoprompt,
}

impl std::str::FromStr for PromptMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Self::None),
            "raw" => Ok(Self::Raw),
            "autoprompt" => Ok(Self::Autoprompt),
            other => Err(format!("unknown prompt mode `{other}`")),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct CampaignSection {
    id: Option<String>,
    seed: Option<u64>,
    output_dir: Option<PathBuf>,
    #[serde(default)]
    deterministic: bool,
    jobs: Option<usize>,
    #[serde(default = "default_true")]
    progress: bool,
    invalid_duplicate_code_cap: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct BudgetSection {
    inputs: Option<u64>,
    seconds: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct UserInputSection {
    #[serde(default)]
    files: Vec<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct AutopromptSection {
    num_samples: Option<usize>,
    trial_count: Option<u32>,
    #[serde(default)]
    skip: bool,
    fixed_prompt: Option<String>,
    system_text: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FuzzingSection {
    #[serde(default)]
    prompt_mode: PromptMode,
    #[serde(default)]
    strategies: StrategySet,
    #[serde(default = "default_true")]
    use_examples: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SamplingSection {
    temperature: Option<f64>,
    top_p: Option<f64>,
    max_tokens: Option<u32>,
    batch_size: Option<u32>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EndpointSection {
    kind: EndpointKind,
    #[serde(default)]
    base_url: String,
    #[serde(default)]
    model: String,
    auth_token_env: Option<String>,
    request_timeout_secs: Option<f64>,
    context_tokens: Option<usize>,
    script: Option<PathBuf>,
    max_retries: Option<u32>,
    #[serde(default)]
    sampling: SamplingSection,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelsSection {
    distillation: Option<EndpointSection>,
    generation: Option<EndpointSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDocument {
    target_file: Option<PathBuf>,
    #[serde(default)]
    campaign: CampaignSection,
    budget: Option<BudgetSection>,
    #[serde(default)]
    user_input: UserInputSection,
    #[serde(default)]
    autoprompt: AutopromptSection,
    #[serde(default)]
    fuzzing: FuzzingSection,
    models: Option<ModelsSection>,
    target: Option<TargetSpec>,
}

fn default_true() -> bool {
    true
}

impl Default for CampaignSection {
    fn default() -> Self {
        Self {
            id: None,
            seed: None,
            output_dir: None,
            deterministic: false,
            jobs: None,
            progress: true,
            invalid_duplicate_code_cap: None,
        }
    }
}

impl Default for FuzzingSection {
    fn default() -> Self {
        Self {
            prompt_mode: PromptMode::default(),
            strategies: StrategySet::default(),
            use_examples: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ModelConfig {
    pub endpoint: ModelEndpoint,
    pub sampling: SamplingParams,
    pub retry: RetryPolicy,
}

#[derive(Debug, Clone)]
pub struct AutopromptSettings {
    pub num_samples: usize,
    pub trial_count: u32,
    pub skip: bool,
    pub fixed_prompt: Option<String>,
    pub system_text: String,
}

#[derive(Debug, Clone)]
pub struct CampaignConfig {
    pub campaign_id: Option<String>,
    pub seed: u64,
    pub output_dir: PathBuf,
    pub deterministic: bool,
    pub jobs: usize,
    pub progress: bool,
    pub invalid_duplicate_code_cap: u64,
    pub budget: Budget,
    pub user_input_files: Vec<PathBuf>,
    pub autoprompt: AutopromptSettings,
    pub prompt_mode: PromptMode,
    pub strategies: StrategySet,
    pub use_examples: bool,
    pub distillation: Option<ModelConfig>,
    pub generation: ModelConfig,
    pub target: TargetConfig,
    /// SHA-256 over the config file and any referenced target file.
    pub digest: String,
    pub config_path: Option<PathBuf>,
}

pub const DEFAULT_SEED: u64 = 0;
pub const DEFAULT_INVALID_DUPLICATE_CODE_CAP: u64 = 1000;

fn resolve(base: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        base.join(path)
    }
}

fn model_config(section: EndpointSection, key: &str, base: &Path, defaults: SamplingParams) -> Result<ModelConfig, ConfigError> {
    let request_timeout = match section.request_timeout_secs {
        None => Duration::from_secs(120),
        Some(s) if s > 0.0 && s.is_finite() => Duration::from_secs_f64(s),
        Some(s) => return Err(invalid(format!("{key}.request_timeout_secs"), format!("must be > 0, got {s}"))),
    };
    let endpoint = ModelEndpoint {
        kind: section.kind,
        base_url: section.base_url.trim_end_matches('/').to_string(),
        model_name: section.model,
        auth_token_env: section.auth_token_env,
        request_timeout,
        context_tokens: section.context_tokens,
        script: section.script.map(|p| resolve(base, &p)),
    };
    match endpoint.kind {
        EndpointKind::Scripted if endpoint.script.is_none() => {
            return Err(invalid(format!("{key}.script"), "required for scripted endpoints"))
        }
        EndpointKind::HttpCompletion | EndpointKind::HttpChat if endpoint.base_url.is_empty() => {
            return Err(invalid(format!("{key}.base_url"), "required for HTTP endpoints"))
        }
        EndpointKind::HttpCompletion | EndpointKind::HttpChat if endpoint.model_name.is_empty() => {
            return Err(invalid(format!("{key}.model"), "required for HTTP endpoints"))
        }
        _ => {}
    }
    let s = section.sampling;
    let sampling = SamplingParams {
        temperature: s.temperature.unwrap_or(defaults.temperature),
        top_p: s.top_p.unwrap_or(defaults.top_p),
        max_tokens: s.max_tokens.unwrap_or(defaults.max_tokens),
        batch_size: s.batch_size.unwrap_or(defaults.batch_size),
    };
    sampling
        .validate()
        .map_err(|e| invalid(format!("{key}.sampling"), e.to_string()))?;
    let mut retry = RetryPolicy::default();
    if let Some(n) = section.max_retries {
        retry.max_retries = n;
    }
    Ok(ModelConfig {
        endpoint,
        sampling,
        retry,
    })
}

impl CampaignConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let path = std::path::absolute(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut config = Self::parse(&text, path.parent().unwrap_or(Path::new("/")), &path)?;
        config.config_path = Some(path);
        Ok(config)
    }

    /// Parses config text; `origin` only labels errors.
    pub fn parse(text: &str, base: &Path, origin: &Path) -> Result<Self, ConfigError> {
        let doc: ConfigDocument = toml::from_str(text).map_err(|e| ConfigError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        let mut hasher = Sha256::new();
        hasher.update(text.as_bytes());

        let target = match (doc.target, doc.target_file) {
            (Some(spec), None) => TargetConfig::compile(spec, base).map_err(target_error)?,
            (None, Some(file)) => {
                let file = resolve(base, &file);
                let bytes = std::fs::read(&file).map_err(|source| ConfigError::Io {
                    path: file.clone(),
                    source,
                })?;
                hasher.update(&bytes);
                TargetConfig::load(&file).map_err(target_error)?
            }
            (Some(_), Some(_)) => return Err(invalid("target_file", "give either [target] or target_file, not both")),
            (None, None) => return Err(invalid("target", "missing; add a [target] table or target_file")),
        };

        let budget = match doc.budget {
            Some(BudgetSection {
                inputs: Some(n),
                seconds: None,
            }) => Budget::input_count(n),
            Some(BudgetSection {
                inputs: None,
                seconds: Some(s),
            }) if s >= 0.0 && s.is_finite() => Budget::wall_clock_ms((s * 1000.0).round() as u64),
            Some(BudgetSection {
                inputs: None,
                seconds: Some(s),
            }) => return Err(invalid("budget.seconds", format!("must be >= 0, got {s}"))),
            Some(_) => return Err(invalid("budget", "set exactly one of `inputs` or `seconds`")),
            None => return Err(invalid("budget", "missing [budget] table")),
        };

        let campaign = doc.campaign;
        if campaign.deterministic && budget.kind == crate::corpus::BudgetKind::WallClock {
            return Err(invalid(
                "campaign.deterministic",
                "a frozen clock cannot drive a wall-clock budget; use budget.inputs",
            ));
        }
        let jobs = match campaign.jobs {
            Some(0) => return Err(invalid("campaign.jobs", "must be at least 1")),
            Some(n) => n,
            None => std::thread::available_parallelism().map_or(1, |n| n.get().min(8)),
        };
        if let Some(id) = &campaign.id {
            if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
                return Err(invalid("campaign.id", "must be a plain directory name"));
            }
        }

        let ap = doc.autoprompt;
        let autoprompt = AutopromptSettings {
            num_samples: ap.num_samples.unwrap_or(4),
            trial_count: ap.trial_count.unwrap_or(30),
            skip: ap.skip,
            fixed_prompt: ap.fixed_prompt,
            system_text: ap.system_text.unwrap_or_else(|| DEFAULT_SYSTEM_TEXT.to_string()),
        };
        if autoprompt.num_samples == 0 {
            return Err(invalid("autoprompt.num_samples", "must be at least 1"));
        }
        if autoprompt.trial_count == 0 {
            return Err(invalid("autoprompt.trial_count", "must be at least 1"));
        }

        let models = doc.models.ok_or_else(|| invalid("models", "missing [models] table"))?;
        let generation = models
            .generation
            .ok_or_else(|| invalid("models.generation", "missing"))
            .and_then(|s| model_config(s, "models.generation", base, SamplingParams::generation()))?;
        let distillation = models
            .distillation
            .map(|s| model_config(s, "models.distillation", base, SamplingParams::distillation()))
            .transpose()?;

        let config = Self {
            campaign_id: campaign.id,
            seed: campaign.seed.unwrap_or(DEFAULT_SEED),
            output_dir: resolve(base, &campaign.output_dir.unwrap_or_else(|| PathBuf::from("campaigns"))),
            deterministic: campaign.deterministic,
            jobs,
            progress: campaign.progress,
            invalid_duplicate_code_cap: campaign
                .invalid_duplicate_code_cap
                .unwrap_or(DEFAULT_INVALID_DUPLICATE_CODE_CAP),
            budget,
            user_input_files: doc.user_input.files.iter().map(|p| resolve(base, p)).collect(),
            autoprompt,
            prompt_mode: doc.fuzzing.prompt_mode,
            strategies: doc.fuzzing.strategies,
            use_examples: doc.fuzzing.use_examples,
            distillation,
            generation,
            target,
            digest: hex::encode(hasher.finalize()),
            config_path: None,
        };
        config.check_prompt_mode()?;
        Ok(config)
    }

    /// Checks that the selected prompt mode has what it needs. Called again
    /// after command-line overrides.
    pub fn check_prompt_mode(&self) -> Result<(), ConfigError> {
        match self.prompt_mode {
            PromptMode::None => Ok(()),
            PromptMode::Raw if self.user_input_files.is_empty() => {
                Err(invalid("user_input.files", "raw prompt mode needs user documentation"))
            }
            PromptMode::Raw => Ok(()),
            PromptMode::Autoprompt if self.autoprompt.skip => match &self.autoprompt.fixed_prompt {
                Some(p) if !p.trim().is_empty() => Ok(()),
                _ => Err(invalid("autoprompt.fixed_prompt", "required when autoprompt.skip is set")),
            },
            PromptMode::Autoprompt if self.user_input_files.is_empty() => {
                Err(invalid("user_input.files", "autoprompting needs user documentation"))
            }
            PromptMode::Autoprompt if self.distillation.is_none() => {
                Err(invalid("models.distillation", "autoprompting needs a distillation model"))
            }
            PromptMode::Autoprompt => Ok(()),
        }
    }

    /// True when this run will call the distillation model.
    pub fn uses_distillation(&self) -> bool {
        self.prompt_mode == PromptMode::Autoprompt && !self.autoprompt.skip
    }
}

fn target_error(e: crate::target::TargetError) -> ConfigError {
    match e {
        crate::target::TargetError::Invalid { key, message } => invalid(format!("target.{key}"), message),
        other => invalid("target", other.to_string()),
    }
}

/// Settings persisted in `meta.json`, fixed for the life of a campaign.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignMeta {
    pub campaign_id: String,
    pub seed: u64,
    pub target: String,
    pub config_digest: String,
    pub config_path: Option<PathBuf>,
    pub prompt_mode: PromptMode,
    pub strategies: StrategySet,
    pub use_examples: bool,
    pub deterministic: bool,
    pub created_at_ms: u64,
    pub tool_version: String,
    #[serde(default)]
    pub extra: BTreeMap<String, String>,
}
