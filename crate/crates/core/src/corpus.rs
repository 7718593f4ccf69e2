//! Campaign state and its on-disk home.
//!
//! Layout under `campaigns/<id>/`:
//!
//! ```text
//! meta.json              campaign metadata (seed, config digest, run settings)
//! checkpoint.json        full CampaignState, rewritten after every iteration
//! autoprompt/            candidates.json
//! loop/events.ndjson     one record per generated input
//! bugs/<signature>/      repro.<ext> + command.txt for the first occurrence
//! inputs/                scratch files handed to the SUT
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::llm::ScriptCursor;
use crate::metrics::CampaignStats;
use crate::strategy::StrategyKind;
use crate::target::{RawOutcome, VerdictStatus};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("campaign directory {0} already exists")]
    AlreadyExists(PathBuf),
    #[error("no campaign at {0}")]
    NotFound(PathBuf),
    #[error("corrupt campaign data in {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    Autoprompt,
    Loop,
}

/// One unique generated input.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FuzzInput {
    pub id: u64,
    pub code: String,
    /// SHA-256 of the normalized code.
    pub hash: String,
    pub phase: Phase,
    pub iteration: u64,
    pub strategy: StrategyKind,
    pub example_id: Option<u64>,
    pub status: VerdictStatus,
    pub accepted: bool,
    pub bug_signature: Option<String>,
    pub created_at_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecordOutcome {
    New(u64),
    Duplicate { of: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reproduction {
    /// Relative to the campaign directory.
    pub code_path: PathBuf,
    pub command: String,
    pub env: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BugReport {
    pub signature: String,
    pub first_input_id: u64,
    pub occurrences: u64,
    pub reproduction: Option<Reproduction>,
    pub raw: RawOutcome,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BudgetKind {
    WallClock,
    InputCount,
}

/// Wall-clock budgets count milliseconds; input-count budgets count
/// generated completions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Budget {
    pub kind: BudgetKind,
    pub limit: u64,
    pub consumed: u64,
}

impl Budget {
    pub fn wall_clock_ms(limit_ms: u64) -> Self {
        Self {
            kind: BudgetKind::WallClock,
            limit: limit_ms,
            consumed: 0,
        }
    }

    pub fn input_count(limit: u64) -> Self {
        Self {
            kind: BudgetKind::InputCount,
            limit,
            consumed: 0,
        }
    }

    pub fn exhausted(&self) -> bool {
        self.consumed >= self.limit
    }

    pub fn remaining(&self) -> u64 {
        self.limit.saturating_sub(self.consumed)
    }
}

/// Seed plus position in the ChaCha keystream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendCursors {
    pub distillation: Option<ScriptCursor>,
    pub generation: Option<ScriptCursor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CampaignPhase {
    Autoprompt,
    Fuzzing,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignState {
    pub campaign_id: String,
    pub seed: u64,
    pub target_name: String,
    pub selected_prompt: String,
    pub phase: CampaignPhase,
    /// Append-only; ids are 1-based and `inputs[i].id == i + 1`.
    pub inputs: Vec<FuzzInput>,
    pub bugs: Vec<BugReport>,
    pub stats: CampaignStats,
    pub budget: Budget,
    /// Number of completed fuzzing-loop iterations.
    pub iteration: u64,
    /// Ids of the last batch's inputs (duplicates resolved), in order.
    pub previous_batch: Vec<u64>,
    pub rng: RngState,
    pub events_written: u64,
    pub events_bytes: u64,
    pub backends: BackendCursors,
    pub warnings: Vec<String>,
    /// Invalid duplicates whose code has been written to the event log.
    #[serde(default)]
    pub invalid_duplicate_codes: u64,
    #[serde(skip)]
    by_hash: HashMap<String, u64>,
    #[serde(skip)]
    bug_index: HashMap<String, usize>,
}

impl CampaignState {
    pub fn new(campaign_id: impl Into<String>, seed: u64, target_name: impl Into<String>, budget: Budget) -> Self {
        Self {
            campaign_id: campaign_id.into(),
            seed,
            target_name: target_name.into(),
            selected_prompt: String::new(),
            phase: CampaignPhase::Autoprompt,
            inputs: Vec::new(),
            bugs: Vec::new(),
            stats: CampaignStats::default(),
            budget,
            iteration: 0,
            previous_batch: Vec::new(),
            rng: RngState { seed, word_pos: 0 },
            events_written: 0,
            events_bytes: 0,
            backends: BackendCursors::default(),
            warnings: Vec::new(),
            invalid_duplicate_codes: 0,
            by_hash: HashMap::new(),
            bug_index: HashMap::new(),
        }
    }

    fn rebuild_indexes(&mut self) -> Result<(), String> {
        self.by_hash.clear();
        for (i, input) in self.inputs.iter().enumerate() {
            if input.id != i as u64 + 1 {
                return Err(format!("input at position {i} has id {}", input.id));
            }
            if self.by_hash.insert(input.hash.clone(), input.id).is_some() {
                return Err(format!("hash {} recorded twice", input.hash));
            }
        }
        self.bug_index = self
            .bugs
            .iter()
            .enumerate()
            .map(|(i, b)| (b.signature.clone(), i))
            .collect();
        if self.bug_index.len() != self.bugs.len() {
            return Err("duplicate bug signatures".into());
        }
        Ok(())
    }

    pub fn next_id(&self) -> u64 {
        self.inputs.len() as u64 + 1
    }

    pub fn input(&self, id: u64) -> Option<&FuzzInput> {
        id.checked_sub(1).and_then(|i| self.inputs.get(i as usize))
    }

    pub fn find_by_hash(&self, hash: &str) -> Option<&FuzzInput> {
        self.by_hash.get(hash).and_then(|id| self.input(*id))
    }

    /// Appends `input` unless its hash is already known.
    pub fn record(&mut self, input: FuzzInput) -> RecordOutcome {
        if let Some(&of) = self.by_hash.get(&input.hash) {
            return RecordOutcome::Duplicate { of };
        }
        assert_eq!(input.id, self.next_id(), "input ids must be allocated in order");
        let id = input.id;
        self.by_hash.insert(input.hash.clone(), id);
        self.inputs.push(input);
        RecordOutcome::New(id)
    }

    /// Counts one bug observation. Returns the report and whether it is new.
    pub fn record_bug(&mut self, signature: &str, input_id: u64, raw: &RawOutcome) -> (&mut BugReport, bool) {
        if let Some(&i) = self.bug_index.get(signature) {
            let report = &mut self.bugs[i];
            report.occurrences += 1;
            return (report, false);
        }
        self.bug_index.insert(signature.to_string(), self.bugs.len());
        self.bugs.push(BugReport {
            signature: signature.to_string(),
            first_input_id: input_id,
            occurrences: 1,
            reproduction: None,
            raw: raw.clone(),
        });
        (self.bugs.last_mut().expect("just pushed"), true)
    }

    pub fn bug(&self, signature: &str) -> Option<&BugReport> {
        self.bug_index.get(signature).map(|&i| &self.bugs[i])
    }
}

/// Whether the code of an event is written to events.ndjson.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventStatus {
    Valid,
    Invalid,
    Bug,
    Timeout,
    ExecError,
    /// Nothing usable could be extracted from the completion.
    Empty,
}

impl From<VerdictStatus> for EventStatus {
    fn from(s: VerdictStatus) -> Self {
        match s {
            VerdictStatus::Valid => EventStatus::Valid,
            VerdictStatus::Invalid => EventStatus::Invalid,
            VerdictStatus::Bug => EventStatus::Bug,
            VerdictStatus::Timeout => EventStatus::Timeout,
            VerdictStatus::ExecError => EventStatus::ExecError,
        }
    }
}

/// One line of `loop/events.ndjson`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputEvent {
    pub seq: u64,
    pub phase: Phase,
    pub iteration: u64,
    pub strategy: StrategyKind,
    pub example_id: Option<u64>,
    pub input_id: Option<u64>,
    pub hash: Option<String>,
    pub duplicate: bool,
    pub status: EventStatus,
    pub accepted: bool,
    pub bug_signature: Option<String>,
    pub hits: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub code: Option<String>,
}

/// Directory name for a bug signature.
pub fn signature_dir_name(signature: &str) -> String {
    signature
        .chars()
        .map(|c| match c {
            'a'..='z' | 'A'..='Z' | '0'..='9' | '.' | '-' | '_' => c,
            ':' => '-',
            _ => '_',
        })
        .collect()
}

pub const META_FILE: &str = "meta.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const EVENTS_FILE: &str = "loop/events.ndjson";
pub const CANDIDATES_FILE: &str = "autoprompt/candidates.json";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug)]
pub struct CampaignStore {
    dir: PathBuf,
    events: BufWriter<File>,
}

impl CampaignStore {
    /// Creates `base/<id>/` and its subdirectories. Refuses to reuse a
    /// directory that already exists.
    pub fn create(base: &Path, campaign_id: &str) -> Result<Self, StoreError> {
        let dir = std::path::absolute(base.join(campaign_id)).map_err(io_err(base))?;
        if dir.exists() {
            return Err(StoreError::AlreadyExists(dir));
        }
        for sub in ["autoprompt", "loop", "bugs", "inputs"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(io_err(&p))?;
        }
        let events_path = dir.join(EVENTS_FILE);
        let file = File::create(&events_path).map_err(io_err(&events_path))?;
        Ok(Self {
            dir,
            events: BufWriter::new(file),
        })
    }

    /// Reopens the campaign at `dir` from its last checkpoint. Events
    /// written after that checkpoint are discarded.
    pub fn resume(dir: &Path) -> Result<(Self, CampaignState), StoreError> {
        let dir = &std::path::absolute(dir).map_err(io_err(dir))?;
        if !dir.join(META_FILE).exists() {
            return Err(StoreError::NotFound(dir.to_path_buf()));
        }
        let checkpoint = dir.join(CHECKPOINT_FILE);
        if !checkpoint.exists() {
            return Err(StoreError::Corrupt {
                path: checkpoint,
                message: "checkpoint missing".into(),
            });
        }
        let mut state: CampaignState = read_json(&checkpoint)?;
        state.rebuild_indexes().map_err(|message| StoreError::Corrupt {
            path: checkpoint.clone(),
            message,
        })?;

        let events_path = dir.join(EVENTS_FILE);
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .open(&events_path)
            .map_err(io_err(&events_path))?;
        let len = file.metadata().map_err(io_err(&events_path))?.len();
        if len < state.events_bytes {
            return Err(StoreError::Corrupt {
                path: events_path,
                message: format!(
                    "event log holds {len} bytes but the checkpoint expects {}",
                    state.events_bytes
                ),
            });
        }
        file.set_len(state.events_bytes).map_err(io_err(&events_path))?;
        drop(file);
        let file = OpenOptions::new()
            .append(true)
            .open(&events_path)
            .map_err(io_err(&events_path))?;
        Ok((
            Self {
                dir: dir.to_path_buf(),
                events: BufWriter::new(file),
            },
            state,
        ))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn inputs_dir(&self) -> PathBuf {
        self.dir.join("inputs")
    }

    pub fn events_path(&self) -> PathBuf {
        self.dir.join(EVENTS_FILE)
    }

    pub fn write_json<T: Serialize>(&self, relative: &str, value: &T) -> Result<(), StoreError> {
        write_json_atomic(&self.dir.join(relative), value)
    }

    /// Appends one event line and advances the state's event counters.
    pub fn append_event(&mut self, state: &mut CampaignState, event: &InputEvent) -> Result<(), StoreError> {
        let mut line = serde_json::to_string(event).expect("events serialize");
        line.push('\n');
        let path = self.events_path();
        self.events.write_all(line.as_bytes()).map_err(io_err(&path))?;
        state.events_written += 1;
        state.events_bytes += line.len() as u64;
        Ok(())
    }

    /// Flushes the event log, then atomically replaces checkpoint.json.
    pub fn checkpoint(&mut self, state: &CampaignState) -> Result<(), StoreError> {
        let path = self.events_path();
        self.events.flush().map_err(io_err(&path))?;
        self.events.get_ref().sync_data().map_err(io_err(&path))?;
        write_json_atomic(&self.dir.join(CHECKPOINT_FILE), state)
    }

    /// Writes `bugs/<signature>/repro<ext>` and `command.txt`.
    pub fn write_bug_artifacts(
        &self,
        signature: &str,
        code: &str,
        extension: &str,
        command_for: impl FnOnce(&Path) -> String,
        env: &BTreeMap<String, String>,
    ) -> Result<Reproduction, StoreError> {
        let rel_dir = PathBuf::from("bugs").join(signature_dir_name(signature));
        let dir = self.dir.join(&rel_dir);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        let file_name = format!("repro{extension}");
        let code_path = dir.join(&file_name);
        fs::write(&code_path, code).map_err(io_err(&code_path))?;
        let command = command_for(&code_path);
        let mut note = String::new();
        for (k, v) in env {
            note.push_str(&format!("{k}={}\n", shlex::try_quote(v).unwrap_or_else(|_| v.into())));
        }
        note.push_str(&command);
        note.push('\n');
        let cmd_path = dir.join("command.txt");
        fs::write(&cmd_path, note).map_err(io_err(&cmd_path))?;
        Ok(Reproduction {
            code_path: rel_dir.join(file_name),
            command,
            env: env.clone(),
        })
    }

    pub fn read_events(&mut self) -> Result<Vec<InputEvent>, StoreError> {
        let path = self.events_path();
        self.events.flush().map_err(io_err(&path))?;
        read_events(&path)
    }
}

pub fn read_events(path: &Path) -> Result<Vec<InputEvent>, StoreError> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.is_empty() {
            continue;
        }
        let event = serde_json::from_str(&line).map_err(|e| StoreError::Corrupt {
            path: path.to_path_buf(),
            message: format!("line {}: {e}", n + 1),
        })?;
        out.push(event);
    }
    Ok(out)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, StoreError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| StoreError::Corrupt {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_json_atomic<T: Serialize>(path: &Path, value: &T) -> Result<(), StoreError> {
    let mut text = serde_json::to_string_pretty(value).expect("state serializes");
    text.push('\n');
    let tmp = path.with_extension("json.tmp");
    {
        let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
        f.write_all(text.as_bytes()).map_err(io_err(&tmp))?;
        f.sync_data().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, path).map_err(io_err(path))
}
