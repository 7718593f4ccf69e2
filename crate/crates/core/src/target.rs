//! Declarative adapter for the system under test.
//!
//! A [`TargetConfig`] says how to invoke the SUT on one input file, when the
//! input counts as valid, and which observations count as bugs. Verdict
//! precedence: timeout, then bug (crash signal or error pattern, even on an
//! invalid input), then valid, then invalid.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hash::sha256_hex;
use crate::process::{self, Execution};
use crate::strategy::StrategyInstructions;
use crate::text::head;

/// Bytes of stderr kept in verdicts and used for signatures.
pub const STDERR_HEAD: usize = 4 * 1024;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);
pub const INPUT_PLACEHOLDER: &str = "{input}";

pub const DEFAULT_CRASH_SIGNALS: [i32; 5] = [libc::SIGSEGV, libc::SIGABRT, libc::SIGBUS, libc::SIGILL, libc::SIGFPE];

#[derive(Debug, Error)]
pub enum TargetError {
    #[error("target.{key}: {message}")]
    Invalid { key: String, message: String },
    #[error("cannot read target file {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot parse target file {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

fn invalid(key: impl Into<String>, message: impl Into<String>) -> TargetError {
    TargetError::Invalid {
        key: key.into(),
        message: message.into(),
    }
}

/// A command line with exactly one `{input}` placeholder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandTemplate {
    source: String,
    argv: Vec<String>,
}

impl CommandTemplate {
    pub fn parse(source: &str) -> Result<Self, String> {
        let count = source.matches(INPUT_PLACEHOLDER).count();
        if count != 1 {
            return Err(format!("`{source}` must contain {INPUT_PLACEHOLDER} exactly once (found {count})"));
        }
        let argv = shlex::split(source).ok_or_else(|| format!("`{source}` has unbalanced quoting"))?;
        if argv.is_empty() {
            return Err("command is empty".into());
        }
        Ok(Self {
            source: source.to_string(),
            argv,
        })
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn render(&self, input: &Path) -> Vec<String> {
        let path = input.to_string_lossy();
        self.argv
            .iter()
            .map(|arg| arg.replace(INPUT_PLACEHOLDER, &path))
            .collect()
    }

    /// Shell-quoted command line for reproduction notes.
    pub fn display(&self, input: &Path) -> String {
        let argv = self.render(input);
        shlex::try_join(argv.iter().map(String::as_str)).unwrap_or_else(|_| argv.join(" "))
    }
}

#[derive(Debug, Clone)]
pub enum ValidityRule {
    ExitZero,
    StdoutRegex(Regex),
    ExitZeroAndStdoutRegex(Regex),
}

impl ValidityRule {
    /// Stdout is matched with trailing whitespace removed so `^sat$` works
    /// against a solver's newline-terminated answer.
    pub fn accepts(&self, exec: &Execution) -> bool {
        if exec.timed_out {
            return false;
        }
        let stdout = exec.stdout.trim_end();
        match self {
            ValidityRule::ExitZero => exec.exit_code == Some(0),
            ValidityRule::StdoutRegex(re) => re.is_match(stdout),
            ValidityRule::ExitZeroAndStdoutRegex(re) => exec.exit_code == Some(0) && re.is_match(stdout),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleKind {
    Crash,
    Differential,
}

impl fmt::Display for OracleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OracleKind::Crash => "crash",
            OracleKind::Differential => "differential",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DiffCompare {
    #[default]
    ExitCode,
    Stdout,
}

#[derive(Debug, Clone)]
pub struct CrashPattern {
    pub name: String,
    pub regex: Regex,
}

#[derive(Debug, Clone)]
pub struct OracleConfig {
    pub kind: OracleKind,
    pub crash_signals: BTreeSet<i32>,
    pub crash_patterns: Vec<CrashPattern>,
    pub diff_cmds: Vec<CommandTemplate>,
    pub diff_compare: DiffCompare,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            kind: OracleKind::Crash,
            crash_signals: DEFAULT_CRASH_SIGNALS.into_iter().collect(),
            crash_patterns: Vec::new(),
            diff_cmds: Vec::new(),
            diff_compare: DiffCompare::ExitCode,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TargetConfig {
    pub name: String,
    pub file_extension: String,
    /// Code-start marker appended after the instruction in generation prompts.
    pub code_prefix: String,
    pub validity_cmd: CommandTemplate,
    pub validity_rule: ValidityRule,
    pub oracle: OracleConfig,
    pub timeout: Duration,
    pub feature_regexes: BTreeMap<String, Regex>,
    pub env: BTreeMap<String, String>,
    pub instructions: StrategyInstructions,
    /// Fraction of non-bug inputs whose files are kept on disk.
    pub keep_sample_rate: f64,
    /// Directory commands run in.
    pub working_dir: PathBuf,
}

// ---- on-disk form -------------------------------------------------------

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
pub enum SignalSpec {
    Number(i32),
    Name(String),
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(untagged)]
pub enum PatternSpec {
    Bare(String),
    Named { name: String, regex: String },
}

#[derive(Debug, Clone, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSpec {
    #[serde(default)]
    pub kind: Option<OracleKind>,
    #[serde(default)]
    pub crash_signals: Option<Vec<SignalSpec>>,
    #[serde(default)]
    pub crash_patterns: Vec<PatternSpec>,
    #[serde(default)]
    pub diff_cmds: Vec<String>,
    #[serde(default)]
    pub diff_compare: DiffCompare,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValidityRuleKind {
    #[default]
    ExitZero,
    StdoutRegex,
    ExitZeroAndStdoutRegex,
}

/// The `[target]` table as written in TOML.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct TargetSpec {
    pub name: String,
    #[serde(default)]
    pub file_extension: String,
    #[serde(default)]
    pub code_prefix: String,
    pub validity_cmd: String,
    #[serde(default)]
    pub validity_rule: ValidityRuleKind,
    #[serde(default)]
    pub validity_stdout_regex: Option<String>,
    #[serde(default)]
    pub oracle: OracleSpec,
    #[serde(default)]
    pub timeout_secs: Option<f64>,
    #[serde(default)]
    pub features: BTreeMap<String, String>,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    #[serde(default)]
    pub instructions: StrategyInstructions,
    #[serde(default)]
    pub keep_sample_rate: f64,
    #[serde(default)]
    pub working_dir: Option<PathBuf>,
}

#[derive(Deserialize)]
struct TargetDocument {
    target: TargetSpec,
}

fn signal_number(spec: &SignalSpec) -> Result<i32, String> {
    match spec {
        SignalSpec::Number(n) if *n > 0 => Ok(*n),
        SignalSpec::Number(n) => Err(format!("invalid signal number {n}")),
        SignalSpec::Name(name) => {
            let bare = name.trim().to_ascii_uppercase();
            let bare = bare.strip_prefix("SIG").unwrap_or(&bare);
            Ok(match bare {
                "SEGV" => libc::SIGSEGV,
                "ABRT" => libc::SIGABRT,
                "BUS" => libc::SIGBUS,
                "ILL" => libc::SIGILL,
                "FPE" => libc::SIGFPE,
                "TRAP" => libc::SIGTRAP,
                "SYS" => libc::SIGSYS,
                "KILL" => libc::SIGKILL,
                _ => return Err(format!("unknown signal name `{name}`")),
            })
        }
    }
}

fn compile_regex(key: &str, pattern: &str) -> Result<Regex, TargetError> {
    Regex::new(pattern).map_err(|e| invalid(key, e.to_string()))
}

impl TargetConfig {
    /// Loads a TOML document holding a `[target]` table. Relative paths are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self, TargetError> {
        let text = std::fs::read_to_string(path).map_err(|source| TargetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let doc: TargetDocument = toml::from_str(&text).map_err(|e| TargetError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let path = std::path::absolute(path).map_err(|source| TargetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::compile(doc.target, path.parent().unwrap_or(Path::new("/")))
    }

    pub fn compile(spec: TargetSpec, base_dir: &Path) -> Result<Self, TargetError> {
        if spec.name.trim().is_empty() {
            return Err(invalid("name", "must not be empty"));
        }
        let validity_cmd = CommandTemplate::parse(&spec.validity_cmd).map_err(|m| invalid("validity_cmd", m))?;

        let stdout_regex = spec
            .validity_stdout_regex
            .as_deref()
            .map(|p| compile_regex("validity_stdout_regex", p))
            .transpose()?;
        let validity_rule = match (spec.validity_rule, stdout_regex) {
            (ValidityRuleKind::ExitZero, _) => ValidityRule::ExitZero,
            (ValidityRuleKind::StdoutRegex, Some(re)) => ValidityRule::StdoutRegex(re),
            (ValidityRuleKind::ExitZeroAndStdoutRegex, Some(re)) => ValidityRule::ExitZeroAndStdoutRegex(re),
            (_, None) => {
                return Err(invalid(
                    "validity_stdout_regex",
                    "required by the selected validity_rule",
                ))
            }
        };

        let oracle = Self::compile_oracle(spec.oracle)?;

        let timeout = match spec.timeout_secs {
            None => DEFAULT_TIMEOUT,
            Some(secs) if secs > 0.0 && secs.is_finite() => Duration::from_secs_f64(secs),
            Some(secs) => return Err(invalid("timeout_secs", format!("must be > 0, got {secs}"))),
        };

        let mut feature_regexes = BTreeMap::new();
        for (label, pattern) in spec.features {
            let re = compile_regex(&format!("features.{label}"), &pattern)?;
            feature_regexes.insert(label, re);
        }

        if !(0.0..=1.0).contains(&spec.keep_sample_rate) {
            return Err(invalid("keep_sample_rate", "must be within [0, 1]"));
        }

        let working_dir = match spec.working_dir {
            Some(dir) if dir.is_absolute() => dir,
            Some(dir) => base_dir.join(dir),
            None => base_dir.to_path_buf(),
        };

        Ok(Self {
            name: spec.name,
            file_extension: spec.file_extension,
            code_prefix: spec.code_prefix,
            validity_cmd,
            validity_rule,
            oracle,
            timeout,
            feature_regexes,
            env: spec.env,
            instructions: spec.instructions,
            keep_sample_rate: spec.keep_sample_rate,
            working_dir,
        })
    }

    fn compile_oracle(spec: OracleSpec) -> Result<OracleConfig, TargetError> {
        let kind = spec.kind.unwrap_or(OracleKind::Crash);
        let crash_signals = match spec.crash_signals {
            None => DEFAULT_CRASH_SIGNALS.into_iter().collect(),
            Some(list) => list
                .iter()
                .map(signal_number)
                .collect::<Result<BTreeSet<_>, _>>()
                .map_err(|m| invalid("oracle.crash_signals", m))?,
        };
        let mut crash_patterns = Vec::new();
        for (i, pattern) in spec.crash_patterns.into_iter().enumerate() {
            let (name, source) = match pattern {
                PatternSpec::Bare(source) => (source.clone(), source),
                PatternSpec::Named { name, regex } => (name, regex),
            };
            let regex = compile_regex(&format!("oracle.crash_patterns[{i}]"), &source)?;
            crash_patterns.push(CrashPattern { name, regex });
        }
        let diff_cmds = spec
            .diff_cmds
            .iter()
            .enumerate()
            .map(|(i, c)| CommandTemplate::parse(c).map_err(|m| invalid(format!("oracle.diff_cmds[{i}]"), m)))
            .collect::<Result<Vec<_>, _>>()?;

        match kind {
            OracleKind::Crash if crash_signals.is_empty() && crash_patterns.is_empty() => {
                return Err(invalid(
                    "oracle",
                    "crash oracle needs at least one crash signal or pattern",
                ))
            }
            OracleKind::Differential if diff_cmds.len() < 2 => {
                return Err(invalid("oracle.diff_cmds", "differential oracle needs at least two commands"))
            }
            _ => {}
        }
        Ok(OracleConfig {
            kind,
            crash_signals,
            crash_patterns,
            diff_cmds,
            diff_compare: spec.diff_compare,
        })
    }

    pub fn input_path(&self, workdir: &Path, id: u64) -> PathBuf {
        workdir.join(format!("{id}{}", self.file_extension))
    }

    /// Labels of every feature regex that matches `code`.
    pub fn hit_labels(&self, code: &str) -> BTreeSet<String> {
        self.feature_regexes
            .iter()
            .filter(|(_, re)| re.is_match(code))
            .map(|(label, _)| label.clone())
            .collect()
    }

    pub fn feature_labels(&self) -> impl Iterator<Item = &str> {
        self.feature_regexes.keys().map(String::as_str)
    }

    /// Writes `code` to `{workdir}/{id}{extension}`, runs the validity
    /// command and, for differential targets, the comparison commands.
    pub fn evaluate(&self, id: u64, code: &str, workdir: &Path) -> OracleVerdict {
        let path = self.input_path(workdir, id);
        if let Err(e) = std::fs::write(&path, code) {
            return OracleVerdict::exec_error(format!("cannot write {}: {e}", path.display()));
        }
        let exec = match self.run(&self.validity_cmd, &path) {
            Ok(exec) => exec,
            Err(e) => return OracleVerdict::exec_error(format!("cannot spawn `{}`: {e}", self.validity_cmd.source())),
        };
        let verdict = classify(&exec, self, &path);
        if self.oracle.kind != OracleKind::Differential || verdict.status != VerdictStatus::Valid {
            return verdict;
        }
        self.run_differential(&path, verdict)
    }

    fn run(&self, cmd: &CommandTemplate, input: &Path) -> std::io::Result<Execution> {
        process::run(&cmd.render(input), &self.env, &self.working_dir, self.timeout)
    }

    fn run_differential(&self, path: &Path, validity: OracleVerdict) -> OracleVerdict {
        let mut runs = Vec::with_capacity(self.oracle.diff_cmds.len());
        for cmd in &self.oracle.diff_cmds {
            let exec = match self.run(cmd, path) {
                Ok(exec) => exec,
                Err(e) => return OracleVerdict::exec_error(format!("cannot spawn `{}`: {e}", cmd.source())),
            };
            if exec.timed_out {
                return OracleVerdict::from_exec(VerdictStatus::Timeout, None, false, &exec);
            }
            if let Some(sig) = crash_signature(&exec, &self.oracle, path) {
                return OracleVerdict::from_exec(VerdictStatus::Bug, Some(sig), true, &exec);
            }
            runs.push(exec);
        }
        match differential_signature(&runs, self.oracle.diff_compare) {
            Some(sig) => OracleVerdict {
                status: VerdictStatus::Bug,
                bug_signature: Some(sig),
                ..validity
            },
            None => validity,
        }
    }
}

// ---- verdicts -----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum VerdictStatus {
    Valid,
    Invalid,
    Bug,
    Timeout,
    ExecError,
}

impl VerdictStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            VerdictStatus::Valid => "valid",
            VerdictStatus::Invalid => "invalid",
            VerdictStatus::Bug => "bug",
            VerdictStatus::Timeout => "timeout",
            VerdictStatus::ExecError => "exec-error",
        }
    }
}

impl fmt::Display for VerdictStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Observable facts about one SUT run, minus timing.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawOutcome {
    pub exit_code: Option<i32>,
    pub signal: Option<i32>,
    /// First 4 KiB of stderr.
    pub stderr_head: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleVerdict {
    pub status: VerdictStatus,
    /// Present iff `status` is `Bug`.
    pub bug_signature: Option<String>,
    /// The validity rule accepted the input. A bug can fire on either side.
    pub accepted: bool,
    pub raw: RawOutcome,
    pub duration: Duration,
}

impl OracleVerdict {
    fn exec_error(message: String) -> Self {
        Self {
            status: VerdictStatus::ExecError,
            bug_signature: None,
            accepted: false,
            raw: RawOutcome {
                error: Some(message),
                ..RawOutcome::default()
            },
            duration: Duration::ZERO,
        }
    }

    fn from_exec(status: VerdictStatus, bug_signature: Option<String>, accepted: bool, exec: &Execution) -> Self {
        Self {
            status,
            bug_signature,
            accepted,
            raw: RawOutcome {
                exit_code: exec.exit_code,
                signal: exec.signal,
                stderr_head: head(&exec.stderr, STDERR_HEAD).to_string(),
                error: None,
            },
            duration: exec.duration,
        }
    }
}

/// Pure verdict for one validity-command execution.
pub fn classify(exec: &Execution, target: &TargetConfig, input: &Path) -> OracleVerdict {
    if exec.timed_out {
        return OracleVerdict::from_exec(VerdictStatus::Timeout, None, false, exec);
    }
    let accepted = target.validity_rule.accepts(exec);
    if let Some(sig) = crash_signature(exec, &target.oracle, input) {
        return OracleVerdict::from_exec(VerdictStatus::Bug, Some(sig), accepted, exec);
    }
    let status = if accepted {
        VerdictStatus::Valid
    } else {
        VerdictStatus::Invalid
    };
    OracleVerdict::from_exec(status, None, accepted, exec)
}

fn short_hash(text: &str) -> String {
    sha256_hex(text.as_bytes())[..16].to_string()
}

/// The line holding the match, with the input path masked so signatures do
/// not depend on which file id triggered the failure.
fn matched_line(haystack: &str, start: usize, input: &Path) -> String {
    let line_start = haystack[..start].rfind('\n').map_or(0, |i| i + 1);
    let line_end = haystack[start..].find('\n').map_or(haystack.len(), |i| start + i);
    let line = &haystack[line_start..line_end];
    let path = input.to_string_lossy();
    let masked = if path.is_empty() {
        line.to_string()
    } else {
        line.replace(path.as_ref(), INPUT_PLACEHOLDER)
    };
    masked.trim().to_string()
}

/// Signature when a crash rule fires, `None` otherwise. A matching error
/// pattern names the bug more precisely than the signal, so it wins.
pub fn crash_signature(exec: &Execution, oracle: &OracleConfig, input: &Path) -> Option<String> {
    let stderr = head(&exec.stderr, STDERR_HEAD);
    for pattern in &oracle.crash_patterns {
        for stream in [stderr, exec.stdout.as_str()] {
            if let Some(m) = pattern.regex.find(stream) {
                let line = matched_line(stream, m.start(), input);
                return Some(format!("crash/pattern:{}/{}", pattern.name, short_hash(&line)));
            }
        }
    }
    match exec.signal {
        Some(sig) if oracle.crash_signals.contains(&sig) => Some(format!("crash/signal:{sig}/{}", short_hash(""))),
        _ => None,
    }
}

fn normalize_stdout(stdout: &str) -> String {
    let mut out = String::with_capacity(stdout.len());
    for line in stdout.trim_end().lines() {
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

/// First pairwise disagreement among differential runs, as a signature.
pub fn differential_signature(runs: &[Execution], compare: DiffCompare) -> Option<String> {
    let channel: Vec<String> = runs
        .iter()
        .map(|e| match compare {
            DiffCompare::ExitCode => match (e.exit_code, e.signal) {
                (Some(code), _) => format!("exit:{code}"),
                (None, Some(sig)) => format!("signal:{sig}"),
                (None, None) => "unknown".to_string(),
            },
            DiffCompare::Stdout => normalize_stdout(&e.stdout),
        })
        .collect();
    let label = match compare {
        DiffCompare::ExitCode => "exit-code",
        DiffCompare::Stdout => "stdout",
    };
    for i in 0..channel.len() {
        for j in i + 1..channel.len() {
            if channel[i] != channel[j] {
                let detail = match compare {
                    DiffCompare::ExitCode => format!("{}|{}", channel[i], channel[j]),
                    DiffCompare::Stdout => {
                        let mut a = channel[i].lines();
                        let mut b = channel[j].lines();
                        loop {
                            match (a.next(), b.next()) {
                                (x, y) if x != y => break format!("{}|{}", x.unwrap_or(""), y.unwrap_or("")),
                                (None, None) => break String::new(),
                                _ => {}
                            }
                        }
                    }
                };
                return Some(format!("differential/{label}:{i}-{j}/{}", short_hash(&detail)));
            }
        }
    }
    None
}
