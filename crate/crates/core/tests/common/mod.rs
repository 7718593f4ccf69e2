//! Scripted campaign fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use autofuzz_core::llm::ScriptEntry;
use autofuzz_core::CampaignConfig;
use tempfile::TempDir;

pub fn toy_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../targets/toy")
}

/// A completion the toy SUT accepts: the prompt ends in `fn main`, so the
/// model continues from there.
pub fn ok(body: &str) -> String {
    format!("() {{\n    {body}\n}}\n")
}

/// Marker-driven oracle for the toy SUT, written independently of the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Expect {
    Valid,
    Invalid,
    Bug,
    Timeout,
}

pub fn expect_for(code: &str) -> Expect {
    if code.contains("HANG") {
        Expect::Timeout
    } else if code.contains("SEGV") || code.contains("ABORT") || code.contains("ICE") {
        Expect::Bug
    } else if code.contains("INVALID") {
        Expect::Invalid
    } else {
        Expect::Valid
    }
}

/// Only exit status 0 counts as accepted by the toy target.
pub fn accepted(code: &str) -> bool {
    expect_for(code) == Expect::Valid
}

/// What the fuzzer should turn a raw completion into, or `None` if empty.
pub fn code_of(completion: &str) -> Option<String> {
    if completion.trim().is_empty() {
        None
    } else {
        Some(format!("fn main{completion}"))
    }
}

/// Whitespace-insensitive key, mirroring the documented normalisation.
pub fn norm(code: &str) -> String {
    let mut out: String = code.lines().map(str::trim_end).collect::<Vec<_>>().join("\n");
    while out.ends_with('\n') {
        out.pop();
    }
    out
}

/// Assigns ids the way the store is documented to: 1-based, in order of
/// first appearance, empties skipped.
#[derive(Default)]
pub struct IdBook {
    ids: HashMap<String, u64>,
    pub codes: Vec<String>,
}

impl IdBook {
    pub fn id_for(&mut self, code: &str) -> u64 {
        let key = norm(code);
        if let Some(&id) = self.ids.get(&key) {
            return id;
        }
        self.codes.push(code.to_string());
        let id = self.codes.len() as u64;
        self.ids.insert(key, id);
        id
    }

    pub fn code(&self, id: u64) -> &str {
        &self.codes[(id - 1) as usize]
    }
}

pub struct Scenario {
    pub seed: u64,
    pub inputs_budget: u64,
    pub batch_size: u32,
    /// `None` skips autoprompting with a fixed prompt.
    pub autoprompt: Option<(usize, u32)>,
    pub distill: Vec<String>,
    pub generate: Vec<Vec<String>>,
    pub jobs: usize,
    pub extra_target: String,
    pub timeout_secs: f64,
    pub sampling_override: bool,
    /// Replaces the generated `[autoprompt]` section verbatim.
    pub autoprompt_section: Option<String>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            seed: 1,
            inputs_budget: 10,
            batch_size: 5,
            autoprompt: None,
            distill: Vec::new(),
            generate: Vec::new(),
            jobs: 2,
            extra_target: String::new(),
            timeout_secs: 1.0,
            sampling_override: true,
            autoprompt_section: None,
        }
    }
}

pub struct Fixture {
    pub dir: TempDir,
    pub config_path: PathBuf,
}

impl Fixture {
    pub fn new(s: &Scenario) -> Self {
        let dir = tempfile::tempdir().expect("tempdir");
        let root = dir.path();
        let distill: Vec<ScriptEntry> = s.distill.iter().map(|t| ScriptEntry::new([t.as_str()])).collect();
        let generate: Vec<ScriptEntry> = s.generate.iter().map(|b| ScriptEntry::new(b.iter().cloned())).collect();
        std::fs::write(root.join("distill.json"), serde_json::to_string(&distill).unwrap()).unwrap();
        std::fs::write(root.join("generate.json"), serde_json::to_string(&generate).unwrap()).unwrap();
        std::fs::write(root.join("docs.md"), "# toy\nPrograms start with fn main.\n").unwrap();

        let prompt = match (&s.autoprompt_section, s.autoprompt) {
            (Some(section), _) => section.clone(),
            (None, ap) => match ap {
                Some((n, t)) => format!("[autoprompt]\nnum_samples = {n}\ntrial_count = {t}\n"),
                None => "[autoprompt]\nskip = true\nfixed_prompt = \"Write toy programs.\"\n".to_string(),
            },
        };
        let sampling = if s.sampling_override {
            format!("[models.generation.sampling]\nbatch_size = {}\n", s.batch_size)
        } else {
            String::new()
        };
        let toy = toy_dir();
        let text = format!(
            r#"
[campaign]
id = "c"
seed = {seed}
output_dir = "out"
deterministic = true
jobs = {jobs}
progress = false

[budget]
inputs = {budget}

[user_input]
files = ["docs.md"]

{prompt}
[models.distillation]
kind = "scripted"
script = "distill.json"

[models.generation]
kind = "scripted"
script = "generate.json"
{sampling}
[target]
name = "toy"
file_extension = ".toy"
code_prefix = "fn main"
validity_cmd = "sh {sut} {{input}}"
timeout_secs = {timeout}
{extra}

[target.oracle]
crash_signals = ["SEGV", "ABRT"]
crash_patterns = [{{ name = "ice", regex = "internal compiler error" }}]

[target.features]
loop = '\bwhile\b'
typedef = '\btypedef\b'
"#,
            seed = s.seed,
            jobs = s.jobs,
            budget = s.inputs_budget,
            sut = toy.join("toy_sut.sh").display(),
            timeout = s.timeout_secs,
            extra = s.extra_target,
        );
        let config_path = root.join("config.toml");
        std::fs::write(&config_path, text).unwrap();
        Self { dir, config_path }
    }

    pub fn config(&self) -> CampaignConfig {
        CampaignConfig::load(&self.config_path).expect("fixture config loads")
    }

    pub fn campaign_dir(&self) -> PathBuf {
        self.dir.path().join("out/c")
    }

    pub fn events_bytes(&self) -> Vec<u8> {
        std::fs::read(self.campaign_dir().join("loop/events.ndjson")).unwrap()
    }
}
