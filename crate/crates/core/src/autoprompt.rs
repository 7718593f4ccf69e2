//! Distils user documentation into a short fuzzing prompt.
//!
//! The distillation model is asked once greedily and `num_samples - 1` more
//! times with sampling. Each candidate is scored by generating a trial batch
//! with the generation model and counting the unique inputs the SUT accepts.
//! The best-scoring candidate wins; ties go to the earliest one, so the greedy
//! candidate wins a tie.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{Phase, CANDIDATES_FILE};
use crate::error::CampaignError;
use crate::fuzz_loop::{assemble_prompt, BatchOrigin, Session};
use crate::llm::{Prompt, SamplingParams};
use crate::strategy::StrategyKind;
use crate::text::{estimate_tokens, head};

/// Appended after the user material when asking for a prompt.
pub const AP_INSTRUCTION: &str =
    "Please summarize the above information in a concise manner to describe the usage and functionality of the target";

pub const DEFAULT_SYSTEM_TEXT: &str = "You are an expert in generating fuzzing prompts.";

/// Tokens kept free in the generation context for the example and output.
pub const CANDIDATE_CONTEXT_RESERVE: usize = 1280;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub label: String,
    pub text: String,
}

/// Labelled documentation about the target.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UserInput {
    documents: Vec<Document>,
}

impl UserInput {
    pub fn new(documents: Vec<Document>) -> Result<Self, CampaignError> {
        let mut labels = BTreeSet::new();
        for doc in &documents {
            if doc.label.trim().is_empty() {
                return Err(CampaignError::Input("document label is empty".into()));
            }
            if !labels.insert(doc.label.as_str()) {
                return Err(CampaignError::Input(format!("duplicate document label `{}`", doc.label)));
            }
        }
        Ok(Self { documents })
    }

    /// Reads each file; its file name becomes the label.
    pub fn from_files(paths: &[PathBuf]) -> Result<Self, CampaignError> {
        let documents = paths
            .iter()
            .map(|path| {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CampaignError::Input(format!("cannot read {}: {e}", path.display())))?;
                let label = path
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| path.display().to_string());
                Ok(Document { label, text })
            })
            .collect::<Result<Vec<_>, CampaignError>>()?;
        Self::new(documents)
    }

    pub fn documents(&self) -> &[Document] {
        &self.documents
    }

    pub fn is_empty(&self) -> bool {
        self.documents.iter().all(|d| d.text.trim().is_empty())
    }

    pub fn combined_text(&self) -> String {
        let mut out = String::new();
        for doc in &self.documents {
            out.push_str("## ");
            out.push_str(&doc.label);
            out.push('\n');
            out.push_str(doc.text.trim_end());
            out.push_str("\n\n");
        }
        out.truncate(out.trim_end().len());
        out
    }
}

pub fn build_ap_prompt(input: &UserInput, system_text: &str) -> Prompt {
    Prompt::Chat {
        system: system_text.to_string(),
        user: format!("{}\n\n{AP_INSTRUCTION}", input.combined_text()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CandidateOrigin {
    Greedy,
    Sampled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptCandidate {
    pub text: String,
    pub origin: CandidateOrigin,
    pub score: u64,
    pub selected: bool,
}

#[derive(Debug, Clone)]
pub struct AutopromptOptions {
    pub num_samples: usize,
    pub trial_count: u32,
    pub system_text: String,
    /// Sampling for the non-greedy candidates. The greedy one uses the same
    /// settings at temperature 0.
    pub distill_params: SamplingParams,
}

impl Default for AutopromptOptions {
    fn default() -> Self {
        Self {
            num_samples: 4,
            trial_count: 30,
            system_text: DEFAULT_SYSTEM_TEXT.to_string(),
            distill_params: SamplingParams::distillation(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AutopromptOutcome {
    pub candidates: Vec<PromptCandidate>,
    pub selected: usize,
}

impl AutopromptOutcome {
    pub fn selected_text(&self) -> &str {
        &self.candidates[self.selected].text
    }
}

/// Number of distinct accepted inputs in a trial batch for `candidate`.
pub fn score_candidate(session: &mut Session<'_>, candidate: &str, trial_count: u32) -> Result<u64, CampaignError> {
    let strategy = session.target.instructions.strategy(StrategyKind::GenerateNew);
    let prompt = assemble_prompt(candidate, None, &strategy, &session.target.code_prefix)?;
    let params = session.generation_params.with_batch_size(trial_count);
    let completions = session.generator.sample(&Prompt::Text(prompt.assembled), &params)?;
    let items = session.process_batch(
        &completions,
        BatchOrigin {
            phase: Phase::Autoprompt,
            iteration: 0,
            strategy: StrategyKind::GenerateNew,
            example_id: None,
        },
    )?;
    let accepted: BTreeSet<u64> = items
        .iter()
        .filter(|i| i.accepted)
        .filter_map(|i| i.input_id)
        .collect();
    Ok(accepted.len() as u64)
}

fn draw_candidate(
    session: &mut Session<'_>,
    prompt: &Prompt,
    params: &SamplingParams,
    limit_tokens: Option<usize>,
    index: usize,
) -> Result<String, CampaignError> {
    let distiller = session
        .distiller
        .ok_or_else(|| CampaignError::Loop("autoprompting needs a distillation model".into()))?;
    let draw = |p: &SamplingParams| -> Result<String, CampaignError> {
        let mut out = distiller.sample(prompt, &p.with_batch_size(1))?;
        Ok(out.pop().map(|c| c.text.trim().to_string()).unwrap_or_default())
    };
    let mut text = draw(params)?;
    let Some(limit) = limit_tokens else {
        return Ok(text);
    };
    if estimate_tokens(&text) > limit {
        // A greedy redraw would return the same text.
        if params.temperature > 0.0 {
            text = draw(params)?;
        }
        if estimate_tokens(&text) > limit {
            text = head(&text, limit * 4).to_string();
            session.warn(format!("prompt candidate {index} truncated to {limit} tokens"));
        }
    }
    Ok(text)
}

/// Picks the initial prompt and records every candidate with its score.
pub fn autoprompting(
    session: &mut Session<'_>,
    input: &UserInput,
    options: &AutopromptOptions,
) -> Result<AutopromptOutcome, CampaignError> {
    if input.is_empty() {
        return Err(CampaignError::Input("autoprompting needs non-empty user documentation".into()));
    }
    if options.num_samples == 0 || options.trial_count == 0 {
        return Err(CampaignError::Input("num_samples and trial_count must be positive".into()));
    }
    let ap_prompt = build_ap_prompt(input, &options.system_text);
    let limit_tokens = session
        .generator
        .endpoint()
        .context_tokens
        .map(|ctx| ctx.saturating_sub(CANDIDATE_CONTEXT_RESERVE));

    let mut candidates = Vec::with_capacity(options.num_samples);
    for index in 0..options.num_samples {
        let (origin, params) = if index == 0 {
            (CandidateOrigin::Greedy, options.distill_params.with_temperature(0.0))
        } else {
            (CandidateOrigin::Sampled, options.distill_params)
        };
        let text = draw_candidate(session, &ap_prompt, &params, limit_tokens, index)?;
        candidates.push(PromptCandidate {
            text,
            origin,
            score: 0,
            selected: false,
        });
    }

    for candidate in &mut candidates {
        candidate.score = score_candidate(session, &candidate.text, options.trial_count)?;
    }
    let mut selected = 0;
    for (i, c) in candidates.iter().enumerate() {
        if c.score > candidates[selected].score {
            selected = i;
        }
    }
    candidates[selected].selected = true;
    if candidates.iter().all(|c| c.score == 0) {
        session.warn("weak prompt: no autoprompting candidate produced a valid input".into());
    }
    session.store.write_json(CANDIDATES_FILE, &candidates)?;
    Ok(AutopromptOutcome { candidates, selected })
}

/// Reads `autoprompt/candidates.json` from a campaign directory.
pub fn read_candidates(campaign_dir: &Path) -> Result<Vec<PromptCandidate>, CampaignError> {
    Ok(crate::corpus::read_json(&campaign_dir.join(CANDIDATES_FILE))?)
}
