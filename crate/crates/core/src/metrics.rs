//! Campaign metrics: validity rate, uniqueness, feature hit rates, strategy
//! mix and bug tallies, plus the text and JSON reports built from them.
//!
//! Every rate uses all generated inputs as its denominator, duplicates
//! included. Completions that yielded no code at all are tracked in
//! `empty_discarded` and are not part of `generated_total`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Budget, BudgetKind, CampaignState, EventStatus, InputEvent};
use crate::strategy::StrategyKind;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MetricsError {
    #[error("feature label `{0}` is not registered for this target")]
    UnknownLabel(String),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StrategyStats {
    pub generated: u64,
    /// Unique inputs accepted by the validity rule.
    pub valid: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CampaignStats {
    pub generated_total: u64,
    pub unique_count: u64,
    pub valid_unique: u64,
    pub invalid_unique: u64,
    pub duplicates: u64,
    pub timeouts: u64,
    pub exec_errors: u64,
    pub empty_discarded: u64,
    pub per_strategy: BTreeMap<StrategyKind, StrategyStats>,
    pub hit_counts: BTreeMap<String, u64>,
    pub bugs_unique: u64,
    /// Bug verdicts seen, duplicates of buggy inputs included.
    pub bug_observations: u64,
    pub elapsed_ms: u64,
}

impl CampaignStats {
    /// Zeroed stats with every feature label registered.
    pub fn with_labels<'a>(labels: impl IntoIterator<Item = &'a str>) -> Self {
        Self {
            hit_counts: labels.into_iter().map(|l| (l.to_string(), 0)).collect(),
            ..Self::default()
        }
    }

    /// Checks both counter partitions.
    pub fn check_partition(&self) -> Result<(), String> {
        if self.generated_total != self.unique_count + self.duplicates {
            return Err(format!(
                "generated_total {} != unique {} + duplicates {}",
                self.generated_total, self.unique_count, self.duplicates
            ));
        }
        let parts = self.valid_unique + self.invalid_unique + self.timeouts + self.exec_errors;
        if parts != self.unique_count {
            return Err(format!(
                "valid {} + invalid {} + timeouts {} + exec_errors {} != unique {}",
                self.valid_unique, self.invalid_unique, self.timeouts, self.exec_errors, self.unique_count
            ));
        }
        Ok(())
    }

    /// Same counters, elapsed time ignored.
    pub fn counters_eq(&self, other: &Self) -> bool {
        Self {
            elapsed_ms: 0,
            ..self.clone()
        } == Self {
            elapsed_ms: 0,
            ..other.clone()
        }
    }
}

/// Fraction of generated inputs that are both valid and unique; `None`
/// when nothing was generated.
pub fn validity_rate(stats: &CampaignStats) -> Option<f64> {
    ratio(stats.valid_unique, stats.generated_total)
}

pub fn duplicate_rate(stats: &CampaignStats) -> Option<f64> {
    ratio(stats.duplicates, stats.generated_total)
}

/// Fraction of generated inputs matching the feature regex `label`.
pub fn hit_rate(stats: &CampaignStats, label: &str) -> Result<Option<f64>, MetricsError> {
    let hits = stats
        .hit_counts
        .get(label)
        .ok_or_else(|| MetricsError::UnknownLabel(label.to_string()))?;
    Ok(ratio(*hits, stats.generated_total))
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Rebuilds the counters from the event log alone (elapsed time and bug
/// uniqueness aside, which the log does not carry).
pub fn stats_from_events<'a>(
    events: impl IntoIterator<Item = &'a InputEvent>,
    labels: impl IntoIterator<Item = &'a str>,
) -> CampaignStats {
    let mut stats = CampaignStats::with_labels(labels);
    let mut signatures = std::collections::BTreeSet::new();
    for e in events {
        if e.status == EventStatus::Empty {
            stats.empty_discarded += 1;
            continue;
        }
        stats.generated_total += 1;
        let per = stats.per_strategy.entry(e.strategy).or_default();
        per.generated += 1;
        for label in &e.hits {
            *stats.hit_counts.entry(label.clone()).or_insert(0) += 1;
        }
        if e.status == EventStatus::Bug {
            stats.bug_observations += 1;
            if let Some(sig) = &e.bug_signature {
                signatures.insert(sig.clone());
            }
        }
        if e.duplicate {
            stats.duplicates += 1;
            continue;
        }
        stats.unique_count += 1;
        match e.status {
            EventStatus::Timeout => stats.timeouts += 1,
            EventStatus::ExecError => stats.exec_errors += 1,
            _ if e.accepted => {
                stats.valid_unique += 1;
                per.valid += 1;
            }
            _ => stats.invalid_unique += 1,
        }
    }
    stats.bugs_unique = signatures.len() as u64;
    stats
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BugSummary {
    pub signature: String,
    pub occurrences: u64,
    pub first_input_id: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub campaign_id: String,
    pub target: String,
    pub seed: u64,
    pub iterations: u64,
    pub stats: CampaignStats,
    pub validity_rate: Option<f64>,
    pub duplicate_rate: Option<f64>,
    pub hit_rates: BTreeMap<String, Option<f64>>,
    pub bugs: Vec<BugSummary>,
    pub budget: Budget,
    /// Externally measured coverage, when supplied. Never computed here.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coverage: Option<f64>,
    pub warnings: Vec<String>,
}

pub const SUMMARY_SCHEMA_VERSION: u32 = 1;

fn pct(rate: Option<f64>) -> String {
    rate.map_or_else(|| "n/a".to_string(), |r| format!("{:.2}%", r * 100.0))
}

/// Text report and machine-readable summary for `state`.
pub fn render_report(state: &CampaignState) -> (String, Summary) {
    let stats = &state.stats;
    let mut bugs: Vec<BugSummary> = state
        .bugs
        .iter()
        .map(|b| BugSummary {
            signature: b.signature.clone(),
            occurrences: b.occurrences,
            first_input_id: b.first_input_id,
        })
        .collect();
    bugs.sort_by(|a, b| b.occurrences.cmp(&a.occurrences).then_with(|| a.signature.cmp(&b.signature)));

    let summary = Summary {
        schema_version: SUMMARY_SCHEMA_VERSION,
        campaign_id: state.campaign_id.clone(),
        target: state.target_name.clone(),
        seed: state.seed,
        iterations: state.iteration,
        stats: stats.clone(),
        validity_rate: validity_rate(stats),
        duplicate_rate: duplicate_rate(stats),
        hit_rates: stats
            .hit_counts
            .keys()
            .map(|l| (l.clone(), hit_rate(stats, l).expect("label from hit_counts")))
            .collect(),
        bugs,
        budget: state.budget,
        coverage: None,
        warnings: state.warnings.clone(),
    };

    let mut out = String::new();
    let _ = writeln!(out, "campaign {} (target {}, seed {})", summary.campaign_id, summary.target, summary.seed);
    let budget = match state.budget.kind {
        BudgetKind::InputCount => format!("{} / {} inputs", state.budget.consumed, state.budget.limit),
        BudgetKind::WallClock => format!(
            "{:.1}s / {:.1}s",
            state.budget.consumed as f64 / 1000.0,
            state.budget.limit as f64 / 1000.0
        ),
    };
    let _ = writeln!(out, "budget      {budget}");
    let _ = writeln!(out, "iterations  {}", state.iteration);
    let _ = writeln!(out, "generated   {}", stats.generated_total);
    let _ = writeln!(out, "unique      {} ({} duplicates, {} empty)", stats.unique_count, stats.duplicates, stats.empty_discarded);
    let _ = writeln!(
        out,
        "verdicts    {} valid, {} invalid, {} timeout, {} exec-error",
        stats.valid_unique, stats.invalid_unique, stats.timeouts, stats.exec_errors
    );
    let _ = writeln!(out, "validity    {}", pct(summary.validity_rate));
    let _ = writeln!(out, "duplicates  {}", pct(summary.duplicate_rate));
    if !stats.per_strategy.is_empty() {
        let _ = writeln!(out, "\n{:<18}{:>10}{:>10}", "strategy", "generated", "valid");
        for (kind, s) in &stats.per_strategy {
            let _ = writeln!(out, "{:<18}{:>10}{:>10}", kind.as_str(), s.generated, s.valid);
        }
    }
    if !summary.hit_rates.is_empty() {
        let _ = writeln!(out, "\n{:<18}{:>10}{:>10}", "feature", "hits", "rate");
        for (label, rate) in &summary.hit_rates {
            let _ = writeln!(out, "{:<18}{:>10}{:>10}", label, stats.hit_counts[label], pct(*rate));
        }
    }
    let _ = writeln!(out, "\nbugs        {} unique, {} observations", state.bugs.len(), stats.bug_observations);
    for bug in summary.bugs.iter().take(10) {
        let _ = writeln!(out, "  {:>5}x  {}  (first input #{})", bug.occurrences, bug.signature, bug.first_input_id);
    }
    for w in &state.warnings {
        let _ = writeln!(out, "warning: {w}");
    }
    (out, summary)
}
