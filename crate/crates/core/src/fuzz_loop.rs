//! The generation loop.
//!
//! Iteration 1 asks for fresh inputs with `generate-new`. Every later
//! iteration picks one valid input from the previous batch as an example,
//! draws a strategy uniformly, re-assembles the prompt and samples another
//! batch. Each input is deduplicated, handed to the oracle, and logged. The
//! loop stops at the first iteration boundary where the budget is spent.
//!
//! RNG draws per iteration, in order: example index (only when examples are
//! enabled and the previous batch has a valid input), then strategy index
//! (only when an example was picked and all strategies are enabled).

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::corpus::{
    BudgetKind, CampaignPhase, CampaignState, CampaignStore, EventStatus, FuzzInput, InputEvent, Phase, RecordOutcome,
};
use crate::error::CampaignError;
use crate::hash::content_hash;
use crate::llm::{Completion, Gateway, Prompt, SamplingParams};
use crate::strategy::{GenerationStrategy, StrategyKind};
use crate::target::{OracleVerdict, TargetConfig, VerdictStatus};
use crate::text::estimate_tokens;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FuzzPrompt {
    pub initial: String,
    pub example_code: Option<String>,
    pub instruction: String,
    pub code_prefix: String,
    pub assembled: String,
}

const EXAMPLE_HEADER: &str = "### Example program\n```\n";
const EXAMPLE_FOOTER: &str = "```\n\n";

/// Builds `initial`, then the example block, then the instruction line and
/// the target's code-start marker.
pub fn assemble_prompt(
    initial: &str,
    example: Option<&str>,
    strategy: &GenerationStrategy,
    code_prefix: &str,
) -> Result<FuzzPrompt, CampaignError> {
    if strategy.requires_example && example.is_none() {
        return Err(CampaignError::Loop(format!(
            "strategy {} needs an example input",
            strategy.kind
        )));
    }
    let mut assembled = String::with_capacity(initial.len() + example.map_or(0, str::len) + 256);
    if !initial.is_empty() {
        assembled.push_str(initial.trim_end());
        assembled.push_str("\n\n");
    }
    if let Some(code) = example {
        assembled.push_str(EXAMPLE_HEADER);
        assembled.push_str(code);
        if !code.ends_with('\n') {
            assembled.push('\n');
        }
        assembled.push_str(EXAMPLE_FOOTER);
    }
    assembled.push_str(&strategy.instruction_text);
    assembled.push('\n');
    assembled.push_str(code_prefix);
    Ok(FuzzPrompt {
        initial: initial.to_string(),
        example_code: example.map(str::to_string),
        instruction: strategy.instruction_text.clone(),
        code_prefix: code_prefix.to_string(),
        assembled,
    })
}

/// Like [`assemble_prompt`], but drops text from the front of the example
/// until the prompt fits in `budget_tokens`. Returns whether it had to cut.
pub fn assemble_within(
    initial: &str,
    example: Option<&str>,
    strategy: &GenerationStrategy,
    code_prefix: &str,
    budget_tokens: Option<usize>,
) -> Result<(FuzzPrompt, bool), CampaignError> {
    let mut prompt = assemble_prompt(initial, example, strategy, code_prefix)?;
    let Some(budget) = budget_tokens else {
        return Ok((prompt, false));
    };
    let mut truncated = false;
    while estimate_tokens(&prompt.assembled) > budget {
        let Some(code) = prompt.example_code.as_deref().filter(|c| !c.is_empty()) else {
            break;
        };
        let excess = (estimate_tokens(&prompt.assembled) - budget) * 4;
        let mut cut = excess.min(code.len());
        while !code.is_char_boundary(cut) {
            cut += 1;
        }
        let rest = code[cut..].to_string();
        prompt = assemble_prompt(initial, Some(&rest), strategy, code_prefix)?;
        truncated = true;
    }
    Ok((prompt, truncated))
}

fn first_fenced_block(text: &str) -> Option<&str> {
    let mut offset = 0;
    let mut body_start = None;
    for line in text.split_inclusive('\n') {
        let is_fence = line.trim_start().starts_with("```");
        match body_start {
            None if is_fence => body_start = Some(offset + line.len()),
            Some(start) if is_fence => return Some(&text[start..offset]),
            _ => {}
        }
        offset += line.len();
    }
    body_start.map(|start| &text[start.min(text.len())..])
}

/// Code carried by one completion, or `None` when there is nothing usable.
///
/// Fenced output (chat models) yields the first block's body. Anything else
/// is a continuation of the prompt, so the target's code-start marker is put
/// back in front. A completion cut off by the token limit loses its last,
/// unfinished line.
pub fn extract_code(completion: &Completion, target: &TargetConfig) -> Option<String> {
    let text = completion.text.as_str();
    if text.trim().is_empty() {
        return None;
    }
    let mut code = match first_fenced_block(text) {
        Some(body) => body.to_string(),
        None => format!("{}{}", target.code_prefix, text),
    };
    if completion.hit_length_limit && !code.ends_with('\n') {
        match code.rfind('\n') {
            Some(i) => code.truncate(i + 1),
            None => code.clear(),
        }
    }
    (!code.trim().is_empty()).then_some(code)
}

/// Uniform pick among the inputs the validity rule accepted.
pub fn select_example<'a, R: Rng + ?Sized>(batch: &[&'a FuzzInput], rng: &mut R) -> Option<&'a FuzzInput> {
    let valid: Vec<&FuzzInput> = batch.iter().copied().filter(|i| i.accepted).collect();
    if valid.is_empty() {
        return None;
    }
    Some(valid[rng.gen_range(0..valid.len())])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StrategySet {
    #[default]
    All,
    GenerateNewOnly,
}

#[derive(Debug, Clone)]
pub struct LoopSettings {
    pub strategies: StrategySet,
    pub use_examples: bool,
    /// Parallel SUT evaluations per batch.
    pub jobs: usize,
    /// Invalid duplicates whose code is still written to the event log.
    pub invalid_duplicate_code_cap: u64,
    pub progress: bool,
    /// Stop after this many iterations in the current session.
    pub halt_after_iterations: Option<u64>,
    pub stop: Option<Arc<AtomicBool>>,
}

impl Default for LoopSettings {
    fn default() -> Self {
        Self {
            strategies: StrategySet::All,
            use_examples: true,
            jobs: 1,
            invalid_duplicate_code_cap: 1000,
            progress: false,
            halt_after_iterations: None,
            stop: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LoopOutcome {
    BudgetExhausted,
    Interrupted,
    Halted,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchItem {
    pub input_id: Option<u64>,
    pub duplicate: bool,
    pub accepted: bool,
    pub status: EventStatus,
}

#[derive(Debug, Clone, Copy)]
pub struct BatchOrigin {
    pub phase: Phase,
    pub iteration: u64,
    pub strategy: StrategyKind,
    pub example_id: Option<u64>,
}

enum Pending {
    Empty,
    New { id: u64, code: String, hash: String },
    Duplicate { of: u64, code: String },
}

/// Everything one process needs to push a campaign forward.
pub struct Session<'a> {
    pub state: CampaignState,
    pub store: CampaignStore,
    pub target: &'a TargetConfig,
    pub generator: &'a Gateway,
    pub distiller: Option<&'a Gateway>,
    pub generation_params: SamplingParams,
    pub settings: LoopSettings,
    clock: &'a dyn Clock,
    rng: ChaCha8Rng,
    session_start_ms: u64,
    elapsed_base_ms: u64,
}

impl<'a> Session<'a> {
    /// Restores the RNG and scripted backends to where `state` left them.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        state: CampaignState,
        store: CampaignStore,
        target: &'a TargetConfig,
        generator: &'a Gateway,
        distiller: Option<&'a Gateway>,
        generation_params: SamplingParams,
        settings: LoopSettings,
        clock: &'a dyn Clock,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(state.rng.seed);
        rng.set_word_pos(state.rng.word_pos);
        if let Some(cursor) = &state.backends.generation {
            generator.restore_script_cursor(cursor.clone());
        }
        if let (Some(d), Some(cursor)) = (distiller, &state.backends.distillation) {
            d.restore_script_cursor(cursor.clone());
        }
        Self {
            elapsed_base_ms: state.stats.elapsed_ms,
            session_start_ms: clock.now_ms(),
            state,
            store,
            target,
            generator,
            distiller,
            generation_params,
            settings,
            clock,
            rng,
        }
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    pub fn warn(&mut self, message: String) {
        log::warn!("{message}");
        self.state.warnings.push(message);
    }

    fn refresh_clock(&mut self) {
        let elapsed = self.elapsed_base_ms + self.clock.now_ms().saturating_sub(self.session_start_ms);
        self.state.stats.elapsed_ms = elapsed;
        if self.state.budget.kind == BudgetKind::WallClock {
            self.state.budget.consumed = elapsed;
        }
    }

    pub fn checkpoint(&mut self) -> Result<(), CampaignError> {
        self.refresh_clock();
        self.state.rng.word_pos = self.rng.get_word_pos();
        self.state.backends.generation = self.generator.script_cursor();
        if let Some(d) = self.distiller {
            self.state.backends.distillation = d.script_cursor();
        }
        self.store.checkpoint(&self.state)?;
        Ok(())
    }

    fn stop_requested(&self) -> bool {
        self.settings
            .stop
            .as_ref()
            .is_some_and(|flag| flag.load(Ordering::SeqCst))
    }

    /// Dedupes, evaluates and logs one batch of completions.
    pub fn process_batch(&mut self, completions: &[Completion], origin: BatchOrigin) -> Result<Vec<BatchItem>, CampaignError> {
        let mut pending = Vec::with_capacity(completions.len());
        let mut fresh: HashMap<String, u64> = HashMap::new();
        let mut next_id = self.state.next_id();
        for completion in completions {
            let Some(code) = extract_code(completion, self.target) else {
                pending.push(Pending::Empty);
                continue;
            };
            let hash = content_hash(&code);
            if let Some(existing) = self.state.find_by_hash(&hash) {
                pending.push(Pending::Duplicate { of: existing.id, code });
            } else if let Some(&of) = fresh.get(&hash) {
                pending.push(Pending::Duplicate { of, code });
            } else {
                fresh.insert(hash.clone(), next_id);
                pending.push(Pending::New { id: next_id, code, hash });
                next_id += 1;
            }
        }

        let jobs: Vec<(u64, &str)> = pending
            .iter()
            .filter_map(|p| match p {
                Pending::New { id, code, .. } => Some((*id, code.as_str())),
                _ => None,
            })
            .collect();
        let mut verdicts = self.evaluate_all(&jobs).into_iter();

        let mut items = Vec::with_capacity(pending.len());
        for p in pending {
            let item = match p {
                Pending::Empty => self.apply_empty(origin)?,
                Pending::New { id, code, hash } => {
                    let verdict = verdicts.next().expect("one verdict per new input");
                    self.apply_new(origin, id, code, hash, verdict)?
                }
                Pending::Duplicate { of, code } => self.apply_duplicate(origin, of, code)?,
            };
            items.push(item);
        }
        self.state.stats.bugs_unique = self.state.bugs.len() as u64;
        Ok(items)
    }

    fn evaluate_all(&self, jobs: &[(u64, &str)]) -> Vec<OracleVerdict> {
        let workdir = self.store.inputs_dir();
        let workers = self.settings.jobs.clamp(1, jobs.len().max(1));
        if workers == 1 {
            return jobs
                .iter()
                .map(|(id, code)| self.target.evaluate(*id, code, &workdir))
                .collect();
        }
        let slots: Mutex<Vec<Option<OracleVerdict>>> = Mutex::new(vec![None; jobs.len()]);
        let next = AtomicUsize::new(0);
        std::thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some((id, code)) = jobs.get(i) else { break };
                    let verdict = self.target.evaluate(*id, code, &workdir);
                    slots.lock().expect("verdict slots poisoned")[i] = Some(verdict);
                });
            }
        });
        slots
            .into_inner()
            .expect("verdict slots poisoned")
            .into_iter()
            .map(|v| v.expect("every job evaluated"))
            .collect()
    }

    fn count_generated(&mut self, strategy: StrategyKind, code: &str) -> Vec<String> {
        let stats = &mut self.state.stats;
        stats.generated_total += 1;
        stats.per_strategy.entry(strategy).or_default().generated += 1;
        let hits: Vec<String> = self.target.hit_labels(code).into_iter().collect();
        for label in &hits {
            *stats.hit_counts.entry(label.clone()).or_insert(0) += 1;
        }
        hits
    }

    fn apply_empty(&mut self, origin: BatchOrigin) -> Result<BatchItem, CampaignError> {
        self.state.stats.empty_discarded += 1;
        let event = InputEvent {
            seq: self.state.events_written,
            phase: origin.phase,
            iteration: origin.iteration,
            strategy: origin.strategy,
            example_id: origin.example_id,
            input_id: None,
            hash: None,
            duplicate: false,
            status: EventStatus::Empty,
            accepted: false,
            bug_signature: None,
            hits: Vec::new(),
            code: None,
        };
        self.store.append_event(&mut self.state, &event)?;
        Ok(BatchItem {
            input_id: None,
            duplicate: false,
            accepted: false,
            status: EventStatus::Empty,
        })
    }

    fn apply_new(
        &mut self,
        origin: BatchOrigin,
        id: u64,
        code: String,
        hash: String,
        verdict: OracleVerdict,
    ) -> Result<BatchItem, CampaignError> {
        let hits = self.count_generated(origin.strategy, &code);
        let stats = &mut self.state.stats;
        stats.unique_count += 1;
        match verdict.status {
            VerdictStatus::Timeout => stats.timeouts += 1,
            VerdictStatus::ExecError => stats.exec_errors += 1,
            _ if verdict.accepted => {
                stats.valid_unique += 1;
                stats.per_strategy.entry(origin.strategy).or_default().valid += 1;
            }
            _ => stats.invalid_unique += 1,
        }

        let input = FuzzInput {
            id,
            code: code.clone(),
            hash: hash.clone(),
            phase: origin.phase,
            iteration: origin.iteration,
            strategy: origin.strategy,
            example_id: origin.example_id,
            status: verdict.status,
            accepted: verdict.accepted,
            bug_signature: verdict.bug_signature.clone(),
            created_at_ms: self.clock.now_ms(),
        };
        let outcome = self.state.record(input);
        debug_assert_eq!(outcome, RecordOutcome::New(id));

        let scratch = self.target.input_path(&self.store.inputs_dir(), id);
        if let Some(signature) = &verdict.bug_signature {
            self.state.stats.bug_observations += 1;
            let (_, is_new) = self.state.record_bug(signature, id, &verdict.raw);
            if is_new {
                let target = self.target;
                let repro = self.store.write_bug_artifacts(
                    signature,
                    &code,
                    &target.file_extension,
                    |path| target.validity_cmd.display(path),
                    &target.env,
                )?;
                self.state.bugs.last_mut().expect("new bug").reproduction = Some(repro);
            }
        }
        if !keep_scratch(&hash, self.target.keep_sample_rate) {
            let _ = std::fs::remove_file(&scratch);
        }

        let event = InputEvent {
            seq: self.state.events_written,
            phase: origin.phase,
            iteration: origin.iteration,
            strategy: origin.strategy,
            example_id: origin.example_id,
            input_id: Some(id),
            hash: Some(hash),
            duplicate: false,
            status: verdict.status.into(),
            accepted: verdict.accepted,
            bug_signature: verdict.bug_signature,
            hits,
            code: Some(code),
        };
        let item = BatchItem {
            input_id: Some(id),
            duplicate: false,
            accepted: event.accepted,
            status: event.status,
        };
        self.store.append_event(&mut self.state, &event)?;
        Ok(item)
    }

    fn apply_duplicate(&mut self, origin: BatchOrigin, of: u64, code: String) -> Result<BatchItem, CampaignError> {
        let hits = self.count_generated(origin.strategy, &code);
        self.state.stats.duplicates += 1;
        let cached = self.state.input(of).expect("duplicate of a recorded input").clone();
        if let Some(signature) = &cached.bug_signature {
            self.state.stats.bug_observations += 1;
            self.state.record_bug(signature, of, &Default::default());
        }
        let keep_code = if cached.accepted || cached.status == VerdictStatus::Bug {
            true
        } else if self.state.invalid_duplicate_codes < self.settings.invalid_duplicate_code_cap {
            self.state.invalid_duplicate_codes += 1;
            true
        } else {
            false
        };
        let event = InputEvent {
            seq: self.state.events_written,
            phase: origin.phase,
            iteration: origin.iteration,
            strategy: origin.strategy,
            example_id: origin.example_id,
            input_id: Some(of),
            hash: Some(cached.hash.clone()),
            duplicate: true,
            status: cached.status.into(),
            accepted: cached.accepted,
            bug_signature: cached.bug_signature.clone(),
            hits,
            code: keep_code.then_some(code),
        };
        self.store.append_event(&mut self.state, &event)?;
        Ok(BatchItem {
            input_id: Some(of),
            duplicate: true,
            accepted: cached.accepted,
            status: cached.status.into(),
        })
    }

    fn choose_next(&mut self) -> (StrategyKind, Option<u64>) {
        if self.state.iteration == 0 {
            return (StrategyKind::GenerateNew, None);
        }
        let example = if self.settings.use_examples {
            let batch: Vec<&FuzzInput> = self
                .state
                .previous_batch
                .iter()
                .filter_map(|id| self.state.input(*id))
                .collect();
            select_example(&batch, &mut self.rng).map(|i| i.id)
        } else {
            None
        };
        let strategy = match (example, self.settings.strategies) {
            (Some(_), StrategySet::All) => StrategyKind::ALL[self.rng.gen_range(0..StrategyKind::ALL.len())],
            _ => StrategyKind::GenerateNew,
        };
        (strategy, example)
    }

    /// Runs iterations until the budget is spent, a stop is requested, or
    /// the per-session iteration cap is reached. State is checkpointed after
    /// every iteration; a backend failure returns the error with the last
    /// checkpoint intact.
    pub fn fuzzing_loop(&mut self) -> Result<LoopOutcome, CampaignError> {
        let mut iterations_this_session = 0;
        self.state.phase = CampaignPhase::Fuzzing;
        loop {
            self.refresh_clock();
            if self.state.budget.exhausted() {
                self.state.phase = CampaignPhase::Finished;
                self.checkpoint()?;
                return Ok(LoopOutcome::BudgetExhausted);
            }
            if self.stop_requested() {
                self.checkpoint()?;
                return Ok(LoopOutcome::Interrupted);
            }
            if self
                .settings
                .halt_after_iterations
                .is_some_and(|cap| iterations_this_session >= cap)
            {
                self.checkpoint()?;
                return Ok(LoopOutcome::Halted);
            }

            let iteration = self.state.iteration + 1;
            let (kind, example_id) = self.choose_next();
            let strategy = self.target.instructions.strategy(kind);
            let example_code = example_id.and_then(|id| self.state.input(id)).map(|i| i.code.clone());
            let budget_tokens = self
                .generator
                .endpoint()
                .context_tokens
                .map(|ctx| ctx.saturating_sub(self.generation_params.max_tokens as usize));
            let selected_prompt = self.state.selected_prompt.clone();
            let (prompt, truncated) = assemble_within(
                &selected_prompt,
                example_code.as_deref(),
                &strategy,
                &self.target.code_prefix,
                budget_tokens,
            )?;
            if truncated {
                self.warn(format!(
                    "iteration {iteration}: example #{} truncated to fit the generation context",
                    example_id.unwrap_or_default()
                ));
            }

            let completions = self
                .generator
                .sample(&Prompt::Text(prompt.assembled), &self.generation_params)?;
            let origin = BatchOrigin {
                phase: Phase::Loop,
                iteration,
                strategy: kind,
                example_id,
            };
            let items = self.process_batch(&completions, origin)?;

            let mut batch_ids: Vec<u64> = Vec::with_capacity(items.len());
            for id in items.iter().filter_map(|i| i.input_id) {
                if !batch_ids.contains(&id) {
                    batch_ids.push(id);
                }
            }
            self.state.previous_batch = batch_ids;
            self.state.iteration = iteration;
            if self.state.budget.kind == BudgetKind::InputCount {
                self.state.budget.consumed += completions.len() as u64;
            }
            iterations_this_session += 1;
            self.checkpoint()?;

            if self.settings.progress {
                let valid = items.iter().filter(|i| i.accepted).count();
                let s = &self.state.stats;
                eprintln!(
                    "[iter {iteration}] {kind:<15} example={:<6} valid {valid}/{} | generated {} unique {} valid {} bugs {}",
                    example_id.map_or_else(|| "-".to_string(), |id| format!("#{id}")),
                    items.len(),
                    s.generated_total,
                    s.unique_count,
                    s.valid_unique,
                    self.state.bugs.len()
                );
            }
        }
    }
}

/// Deterministic sampling of scratch files to keep, keyed on the content hash.
fn keep_scratch(hash: &str, rate: f64) -> bool {
    if rate <= 0.0 {
        return false;
    }
    let bucket = u32::from_str_radix(&hash[..8], 16).unwrap_or(u32::MAX);
    (bucket as f64) < rate * (u32::MAX as f64 + 1.0)
}
