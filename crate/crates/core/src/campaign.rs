//! Top-level operations: start, resume and report on a campaign, and check a
//! target configuration against a sample.

use std::path::{Path, PathBuf};
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use crate::autoprompt::{autoprompting, AutopromptOptions, UserInput};
use crate::clock::{Clock, ManualClock, SystemClock};
use crate::config::{CampaignConfig, CampaignMeta, ModelConfig, PromptMode};
use crate::corpus::{read_json, CampaignPhase, CampaignState, CampaignStore, StoreError, CHECKPOINT_FILE, META_FILE, SUMMARY_FILE};
use crate::error::CampaignError;
use crate::fuzz_loop::{LoopOutcome, LoopSettings, Session};
use crate::llm::{Gateway, RecordedRequest};
use crate::metrics::{render_report, CampaignStats, Summary};
use crate::target::{OracleVerdict, TargetConfig};

#[derive(Default, Clone)]
pub struct RunOptions {
    /// Set from a signal handler to stop at the next iteration boundary.
    pub stop: Option<Arc<AtomicBool>>,
    /// Stop after this many loop iterations in this session.
    pub halt_after_iterations: Option<u64>,
    /// Overrides the clock chosen from the config.
    pub clock: Option<Arc<dyn Clock>>,
    /// Overrides `campaign.progress`.
    pub progress: Option<bool>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub dir: PathBuf,
    pub state: CampaignState,
    pub outcome: LoopOutcome,
    pub summary: Summary,
    pub text: String,
    /// Every request sent to each model during this session.
    pub generation_requests: Vec<RecordedRequest>,
    pub distillation_requests: Vec<RecordedRequest>,
}

fn build_gateway(model: &ModelConfig) -> Result<Gateway, CampaignError> {
    let gateway = Gateway::from_endpoint(model.endpoint.clone())?;
    Ok(gateway.with_retry(model.retry))
}

fn pick_clock(config: &CampaignConfig, options: &RunOptions) -> Arc<dyn Clock> {
    match &options.clock {
        Some(clock) => clock.clone(),
        None if config.deterministic => Arc::new(ManualClock::new(0)),
        None => Arc::new(SystemClock),
    }
}

/// Fails fast on a missing credential before anything is written.
fn gateways(config: &CampaignConfig, prompt_mode: PromptMode) -> Result<(Gateway, Option<Gateway>), CampaignError> {
    let needs_distiller = prompt_mode == PromptMode::Autoprompt && !config.autoprompt.skip;
    config.generation.endpoint.check_credentials()?;
    let distillation = if needs_distiller {
        let model = config.distillation.as_ref().ok_or_else(|| {
            CampaignError::Config(crate::config::ConfigError::Invalid {
                key: "models.distillation".into(),
                message: "autoprompting needs a distillation model".into(),
            })
        })?;
        model.endpoint.check_credentials()?;
        Some(model)
    } else {
        None
    };
    let generator = build_gateway(&config.generation)?;
    let distiller = distillation.map(build_gateway).transpose()?;
    Ok((generator, distiller))
}

/// Starts a new campaign and runs it until the budget is spent or it is
/// stopped.
pub fn run_campaign(config: &CampaignConfig, options: &RunOptions) -> Result<RunReport, CampaignError> {
    config.check_prompt_mode()?;
    let (generator, distiller) = gateways(config, config.prompt_mode)?;
    let clock = pick_clock(config, options);
    let campaign_id = config.campaign_id.clone().unwrap_or_else(|| {
        if config.deterministic {
            format!("{}-{}", config.target.name, config.seed)
        } else {
            format!("{}-{}-{}", config.target.name, config.seed, clock.now_ms())
        }
    });

    let mut store = CampaignStore::create(&config.output_dir, &campaign_id)?;
    let meta = CampaignMeta {
        campaign_id: campaign_id.clone(),
        seed: config.seed,
        target: config.target.name.clone(),
        config_digest: config.digest.clone(),
        config_path: config.config_path.clone(),
        prompt_mode: config.prompt_mode,
        strategies: config.strategies,
        use_examples: config.use_examples,
        deterministic: config.deterministic,
        created_at_ms: clock.now_ms(),
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        extra: Default::default(),
    };
    store.write_json(META_FILE, &meta)?;
    let mut state = CampaignState::new(campaign_id, config.seed, config.target.name.clone(), config.budget);
    state.stats = CampaignStats::with_labels(config.target.feature_labels());
    store.checkpoint(&state)?;
    log::info!("campaign directory {}", store.dir().display());

    drive(config, &meta, store, state, &generator, distiller.as_ref(), clock.as_ref(), options)
}

/// Resolves `id_or_dir` to a campaign directory: an existing path wins,
/// otherwise it is looked up under `output_dir`.
pub fn locate_campaign(id_or_dir: &str, output_dir: Option<&Path>) -> PathBuf {
    let direct = PathBuf::from(id_or_dir);
    if direct.join(META_FILE).exists() {
        return direct;
    }
    match output_dir {
        Some(base) => base.join(id_or_dir),
        None => direct,
    }
}

pub fn read_meta(dir: &Path) -> Result<CampaignMeta, CampaignError> {
    read_json(&dir.join(META_FILE)).map_err(|e| CampaignError::ResumeRefused(e.to_string()))
}

/// Continues a campaign from its last checkpoint. The config must match the
/// one the campaign started with unless `force` is set.
pub fn resume_campaign(
    dir: &Path,
    config: &CampaignConfig,
    force: bool,
    options: &RunOptions,
) -> Result<RunReport, CampaignError> {
    let meta = read_meta(dir)?;
    if meta.config_digest != config.digest {
        if !force {
            return Err(CampaignError::ResumeRefused(format!(
                "configuration changed since the campaign started (digest {} vs {}); pass --force to resume anyway",
                short(&meta.config_digest),
                short(&config.digest)
            )));
        }
        log::warn!("resuming with a changed configuration");
    }
    if meta.target != config.target.name {
        return Err(CampaignError::ResumeRefused(format!(
            "campaign targets `{}` but the config targets `{}`",
            meta.target, config.target.name
        )));
    }
    let (store, mut state) = CampaignStore::resume(dir).map_err(|e| match e {
        StoreError::Io { .. } => CampaignError::Store(e),
        other => CampaignError::ResumeRefused(other.to_string()),
    })?;
    if force && meta.config_digest != config.digest {
        state
            .warnings
            .push("resumed with a configuration that differs from the original".into());
    }
    let (generator, distiller) = gateways(config, meta.prompt_mode)?;
    let clock = pick_clock(config, options);
    drive(config, &meta, store, state, &generator, distiller.as_ref(), clock.as_ref(), options)
}

fn short(digest: &str) -> &str {
    &digest[..digest.len().min(12)]
}

#[allow(clippy::too_many_arguments)]
fn drive(
    config: &CampaignConfig,
    meta: &CampaignMeta,
    store: CampaignStore,
    state: CampaignState,
    generator: &Gateway,
    distiller: Option<&Gateway>,
    clock: &dyn Clock,
    options: &RunOptions,
) -> Result<RunReport, CampaignError> {
    let settings = LoopSettings {
        strategies: meta.strategies,
        use_examples: meta.use_examples,
        jobs: config.jobs,
        invalid_duplicate_code_cap: config.invalid_duplicate_code_cap,
        progress: options.progress.unwrap_or(config.progress),
        halt_after_iterations: options.halt_after_iterations,
        stop: options.stop.clone(),
    };
    let mut session = Session::new(
        state,
        store,
        &config.target,
        generator,
        distiller,
        config.generation.sampling,
        settings,
        clock,
    );

    let outcome = match session.state.phase {
        CampaignPhase::Finished => LoopOutcome::BudgetExhausted,
        CampaignPhase::Autoprompt if session.state.budget.exhausted() => {
            session.state.phase = CampaignPhase::Finished;
            session.checkpoint()?;
            LoopOutcome::BudgetExhausted
        }
        CampaignPhase::Autoprompt => {
            let prompt = initial_prompt(&mut session, config, meta.prompt_mode)?;
            session.state.selected_prompt = prompt;
            session.state.phase = CampaignPhase::Fuzzing;
            session.checkpoint()?;
            session.fuzzing_loop()?
        }
        CampaignPhase::Fuzzing => session.fuzzing_loop()?,
    };

    let dir = session.store.dir().to_path_buf();
    let (text, summary) = render_report(&session.state);
    session.store.write_json(SUMMARY_FILE, &summary)?;
    Ok(RunReport {
        dir,
        state: session.state,
        outcome,
        summary,
        text,
        generation_requests: generator.requests(),
        distillation_requests: distiller.map(Gateway::requests).unwrap_or_default(),
    })
}

fn initial_prompt(session: &mut Session<'_>, config: &CampaignConfig, mode: PromptMode) -> Result<String, CampaignError> {
    match mode {
        PromptMode::None => Ok(String::new()),
        PromptMode::Raw => Ok(UserInput::from_files(&config.user_input_files)?.combined_text()),
        PromptMode::Autoprompt if config.autoprompt.skip => Ok(config.autoprompt.fixed_prompt.clone().unwrap_or_default()),
        PromptMode::Autoprompt => {
            let input = UserInput::from_files(&config.user_input_files)?;
            let options = AutopromptOptions {
                num_samples: config.autoprompt.num_samples,
                trial_count: config.autoprompt.trial_count,
                system_text: config.autoprompt.system_text.clone(),
                distill_params: config
                    .distillation
                    .as_ref()
                    .map(|d| d.sampling)
                    .unwrap_or_else(crate::llm::SamplingParams::distillation),
            };
            let outcome = autoprompting(session, &input, &options)?;
            log::info!(
                "selected prompt candidate {} (score {})",
                outcome.selected,
                outcome.candidates[outcome.selected].score
            );
            Ok(outcome.selected_text().to_string())
        }
    }
}

/// Loads the latest checkpoint and rewrites `summary.json`. `coverage` is an
/// externally measured figure copied into the summary as-is.
pub fn report_campaign(dir: &Path, coverage: Option<f64>) -> Result<(String, Summary), CampaignError> {
    let state: CampaignState = read_json(&dir.join(CHECKPOINT_FILE))?;
    let (mut text, mut summary) = render_report(&state);
    if let Some(c) = coverage {
        summary.coverage = Some(c);
        text.push_str(&format!("coverage    {c} (external)\n"));
    }
    crate::corpus::write_json_atomic(&dir.join(SUMMARY_FILE), &summary)?;
    Ok((text, summary))
}

/// Runs one sample through the target's oracle in a scratch directory.
pub fn validate_target(target: &TargetConfig, sample: &Path) -> Result<OracleVerdict, CampaignError> {
    let code = std::fs::read_to_string(sample)
        .map_err(|e| CampaignError::Input(format!("cannot read {}: {e}", sample.display())))?;
    let scratch = std::env::temp_dir().join(format!("autofuzz-validate-{}", std::process::id()));
    std::fs::create_dir_all(&scratch).map_err(|source| StoreError::Io {
        path: scratch.clone(),
        source,
    })?;
    let verdict = target.evaluate(0, &code, &scratch);
    let _ = std::fs::remove_dir_all(&scratch);
    Ok(verdict)
}

/// Loads a target from a file holding either a `[target]` table or a
/// `target_file` key pointing at one.
pub fn load_target(path: &Path) -> Result<TargetConfig, CampaignError> {
    let text = std::fs::read_to_string(path).map_err(|source| crate::config::ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let doc: toml::Table = toml::from_str(&text).map_err(|e| crate::config::ConfigError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    match doc.get("target_file").and_then(|v| v.as_str()) {
        Some(rel) if !doc.contains_key("target") => {
            let base = path.parent().unwrap_or(Path::new("."));
            Ok(TargetConfig::load(&base.join(rel))?)
        }
        _ => Ok(TargetConfig::load(path)?),
    }
}
