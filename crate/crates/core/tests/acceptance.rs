//! Acceptance suite. Prints one PASS/FAIL/SKIP line per criterion and exits
//! non-zero if any criterion fails.
//!
//! The live smoke check (8) only runs when `AUTOFUZZ_LIVE_BASE_URL` and
//! `AUTOFUZZ_LIVE_MODEL` are set; see the README for the other variables.

mod common;

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use autofuzz_core::autoprompt::{read_candidates, CandidateOrigin};
use autofuzz_core::corpus::{read_events, EventStatus, Phase};
use autofuzz_core::metrics::{hit_rate, stats_from_events, validity_rate};
use autofuzz_core::{
    resume_campaign, run_campaign, LoopOutcome, RunOptions, StrategyKind, TargetConfig, VerdictStatus,
};
use common::*;
use proptest::prelude::*;
use proptest::test_runner::{Config as PropConfig, TestCaseError, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn distinct_accepted(batch: &[String]) -> u64 {
    batch
        .iter()
        .filter_map(|c| code_of(c))
        .filter(|c| accepted(c))
        .map(|c| norm(&c))
        .collect::<BTreeSet<_>>()
        .len() as u64
}

// 1. Autoprompting picks the argmax of unique-valid trial counts; ties go to
// the greedy candidate.
fn autoprompt_argmax() -> Outcome {
    let start = Instant::now();
    let trial = 6u32;
    let valid = |tag: &str, n: usize| (0..n).map(|i| ok(&format!("let {tag}{i} = {i};"))).collect::<Vec<_>>();
    let pad = |mut v: Vec<String>, fill: &[&str]| {
        let mut i = 0;
        while v.len() < trial as usize {
            v.push(ok(fill[i % fill.len()]));
            i += 1;
        }
        v
    };
    let with_dup = |tag: &str, n: usize| {
        let mut v = valid(tag, n);
        v.push(ok(&format!("let {tag}0 = 0;   ")));
        v
    };
    let cases: [(&str, [Vec<String>; 4]); 2] = [
        (
            "strict max, sampled tie broken by order",
            [
                pad(with_dup("a", 2), &["INVALID a", "ICE INVALID"]),
                pad(valid("b", 4), &["SEGV"]),
                pad(valid("c", 4), &["INVALID c"]),
                pad(valid("d", 1), &["INVALID d"]),
            ],
        ),
        (
            "tie with greedy",
            [
                pad(valid("e", 3), &["INVALID e"]),
                pad(with_dup("f", 1), &["INVALID f"]),
                pad(valid("g", 3), &["INVALID g"]),
                pad(Vec::new(), &["INVALID h", "INVALID i"]),
            ],
        ),
    ];
    let mut notes = Vec::new();
    for (name, trials) in cases {
        let scores: Vec<u64> = trials.iter().map(|t| distinct_accepted(t)).collect();
        let mut expected = 0;
        for (i, s) in scores.iter().enumerate() {
            if *s > scores[expected] {
                expected = i;
            }
        }
        let distill: Vec<String> = (0..4).map(|i| format!("candidate prompt {i}")).collect();
        let mut generate: Vec<Vec<String>> = trials.to_vec();
        generate.push(valid("loop", trial as usize));
        let fx = Fixture::new(&Scenario {
            inputs_budget: trial as u64,
            batch_size: trial,
            autoprompt: Some((4, trial)),
            distill: distill.clone(),
            generate,
            ..Scenario::default()
        });
        let report = run_campaign(&fx.config(), &RunOptions::default()).map_err(err)?;
        let candidates = read_candidates(&fx.campaign_dir()).map_err(err)?;
        let got: Vec<u64> = candidates.iter().map(|c| c.score).collect();
        ensure!(got == scores, "{name}: scores {got:?}, hand count {scores:?}");
        let selected: Vec<usize> = candidates
            .iter()
            .enumerate()
            .filter(|(_, c)| c.selected)
            .map(|(i, _)| i)
            .collect();
        ensure!(selected == [expected], "{name}: selected {selected:?}, expected {expected}");
        ensure!(
            report.state.selected_prompt == distill[expected],
            "{name}: campaign runs with {:?}",
            report.state.selected_prompt
        );
        ensure!(
            candidates[0].origin == CandidateOrigin::Greedy
                && candidates[1..].iter().all(|c| c.origin == CandidateOrigin::Sampled),
            "{name}: candidate origins wrong"
        );
        notes.push(format!("{scores:?}->{expected}"));
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("argmax matches hand count ({}) in {elapsed:.1?}", notes.join(", ")))
}

fn replay_script(seed: u64, batches: usize, batch: usize) -> Vec<Vec<String>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    (0..batches)
        .map(|b| {
            (0..batch)
                .map(|_| {
                    // Batch 3 has no valid input, so iteration 4 must fall back
                    // to generate-new without drawing.
                    if b == 2 {
                        return ok(&format!("INVALID {}", rng.gen_range(0..4)));
                    }
                    match rng.gen_range(0..10) {
                        0 => ok("INVALID x"),
                        1 => ok("ICE"),
                        2 => String::new(),
                        3 => ok("print(1);"),
                        k => ok(&format!("let v{} = {k};", rng.gen_range(0..12))),
                    }
                })
                .collect()
        })
        .collect()
}

/// Independent trace of example and strategy choice from the script alone.
fn hand_trace(seed: u64, script: &[Vec<String>]) -> Vec<(StrategyKind, Option<u64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut book = IdBook::default();
    let mut previous: Vec<u64> = Vec::new();
    let mut out = Vec::new();
    for (i, batch) in script.iter().enumerate() {
        let choice = if i == 0 {
            (StrategyKind::GenerateNew, None)
        } else {
            let valid: Vec<u64> = previous.iter().copied().filter(|id| accepted(book.code(*id))).collect();
            if valid.is_empty() {
                (StrategyKind::GenerateNew, None)
            } else {
                let example = valid[rng.gen_range(0..valid.len())];
                let strategy = [
                    StrategyKind::GenerateNew,
                    StrategyKind::MutateExisting,
                    StrategyKind::SemanticEquiv,
                ][rng.gen_range(0..3)];
                (strategy, Some(example))
            }
        };
        out.push(choice);
        previous.clear();
        for code in batch.iter().filter_map(|c| code_of(c)) {
            let id = book.id_for(&code);
            if !previous.contains(&id) {
                previous.push(id);
            }
        }
    }
    out
}

// 2. Seeded loop replays byte-for-byte and follows the hand-traced RNG.
fn loop_replay() -> Outcome {
    let start = Instant::now();
    let seed = 2024;
    let script = replay_script(seed, 6, 10);
    let scenario = || Scenario {
        seed,
        inputs_budget: 60,
        batch_size: 10,
        generate: script.clone(),
        ..Scenario::default()
    };
    let first = Fixture::new(&scenario());
    let second = Fixture::new(&scenario());
    let a = run_campaign(&first.config(), &RunOptions::default()).map_err(err)?;
    run_campaign(&second.config(), &RunOptions::default()).map_err(err)?;
    ensure!(a.state.iteration == 6, "ran {} iterations", a.state.iteration);
    ensure!(first.events_bytes() == second.events_bytes(), "events.ndjson differs between runs");

    let events = read_events(&first.campaign_dir().join("loop/events.ndjson")).map_err(err)?;
    let mut observed = Vec::new();
    for iteration in 1..=6 {
        let e = events
            .iter()
            .find(|e| e.phase == Phase::Loop && e.iteration == iteration)
            .ok_or(format!("no events for iteration {iteration}"))?;
        observed.push((e.strategy, e.example_id));
    }
    let expected = hand_trace(seed, &script);
    ensure!(observed == expected, "observed {observed:?}\nexpected {expected:?}");
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    let trace: Vec<String> = observed
        .iter()
        .map(|(s, e)| format!("{}{}", &s.as_str()[..1], e.map_or(String::new(), |id| format!("#{id}"))))
        .collect();
    Ok(format!("identical events, trace [{}] in {elapsed:.1?}", trace.join(" ")))
}

// 3. Oracle classification across the toy SUT's modes.
fn oracle_matrix() -> Outcome {
    let target = TargetConfig::load(&toy_dir().join("target.toml")).map_err(err)?;
    let work = tempfile::tempdir().map_err(err)?;
    let cases = [
        ("exit 0", "fn main() { print(1); }\n", VerdictStatus::Valid, true),
        ("exit 1", "fn main() { INVALID }\n", VerdictStatus::Invalid, false),
        ("internal compiler error", "fn main() { ICE }\n", VerdictStatus::Bug, false),
        ("SIGSEGV", "fn main() { SEGV }\n", VerdictStatus::Bug, false),
        ("timeout", "fn main() { HANG }\n", VerdictStatus::Timeout, false),
    ];
    let mut hits = 0;
    for (i, (mode, code, status, acc)) in cases.iter().enumerate() {
        let v = target.evaluate(i as u64 + 1, code, work.path());
        ensure!(
            v.status == *status && v.accepted == *acc,
            "{mode}: got {:?} (accepted {}), want {status:?}",
            v.status,
            v.accepted
        );
        hits += 1;
    }
    let ice = target.evaluate(10, "fn main() { ICE }\n", work.path());
    ensure!(
        ice.bug_signature.as_deref().is_some_and(|s| s.starts_with("crash/pattern:ice/")),
        "ICE signature {:?}",
        ice.bug_signature
    );
    let segv = target.evaluate(11, "fn main() { SEGV }\n", work.path());
    ensure!(
        segv.bug_signature.as_deref().is_some_and(|s| s.starts_with("crash/signal:11/")),
        "SEGV signature {:?}",
        segv.bug_signature
    );
    Ok(format!("{hits}/5 verdicts exact, bug reported on invalid input"))
}

const VOCAB: usize = 16;

fn vocab(k: usize) -> String {
    match k {
        0 => ok("print(1);"),
        1 => ok("print(1);   "),
        2 => ok("let a = 1;"),
        3 => ok("while (x) { x = 0; }"),
        4 => ok("typedef T = int;"),
        5 => ok("INVALID a"),
        6 => ok("INVALID b"),
        7 => ok("ICE"),
        8 => ok("ICE INVALID"),
        9 => ok("SEGV"),
        10 => String::new(),
        11 => ok("HANG"),
        12 => "```toy\nfn main() { print(2); }\n```\n".to_string(),
        13 => ok("ABORT"),
        14 => "   \n".to_string(),
        _ => ok("typedef U = T; while (u) { u = 0; }"),
    }
}

// 4. Counter partitions hold and match a recount from events.ndjson.
fn metrics_partition() -> Outcome {
    let start = Instant::now();
    let cases = 100;
    let mut runner = TestRunner::new(PropConfig {
        cases,
        failure_persistence: None,
        max_shrink_iters: 32,
        ..PropConfig::default()
    });
    let strategy = (
        0..=i64::MAX as u64,
        1u32..=5,
        1u64..=15,
        prop::option::of((1usize..=2, 1u32..=3)),
        prop::collection::vec(0..VOCAB, 120),
    );
    let generated = std::cell::Cell::new(0u64);
    runner
        .run(&strategy, |(seed, batch, budget, ap, picks)| {
            let mut picks = picks.into_iter().cycle();
            let mut take = |n: usize| (0..n).map(|_| vocab(picks.next().unwrap())).collect::<Vec<_>>();
            let mut generate = Vec::new();
            let mut distill = Vec::new();
            if let Some((n, t)) = ap {
                for i in 0..n {
                    distill.push(format!("prompt {i}"));
                    generate.push(take(t as usize));
                }
            }
            let iterations = budget.div_ceil(batch as u64);
            for _ in 0..iterations {
                generate.push(take(batch as usize));
            }
            let fx = Fixture::new(&Scenario {
                seed,
                inputs_budget: budget,
                batch_size: batch,
                autoprompt: ap,
                distill,
                generate,
                timeout_secs: 0.1,
                ..Scenario::default()
            });
            let config = fx.config();
            let report = run_campaign(&config, &RunOptions::default()).map_err(|e| TestCaseError::fail(e.to_string()))?;
            let stats = &report.state.stats;
            stats.check_partition().map_err(TestCaseError::fail)?;
            prop_assert_eq!(report.state.iteration, iterations);
            let events = read_events(&fx.campaign_dir().join("loop/events.ndjson"))
                .map_err(|e| TestCaseError::fail(e.to_string()))?;
            let recount = stats_from_events(&events, config.target.feature_labels());
            prop_assert!(recount.counters_eq(stats), "recount {:?}\nstate {:?}", recount, stats);
            prop_assert_eq!(recount.bugs_unique, report.state.bugs.len() as u64);
            let unique_ids: BTreeSet<u64> = events.iter().filter_map(|e| e.input_id).collect();
            prop_assert_eq!(unique_ids.len() as u64, stats.unique_count);
            if let Some(r) = validity_rate(stats) {
                prop_assert!((0.0..=1.0).contains(&r));
            }
            generated.set(generated.get() + stats.generated_total);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!(
        "{cases} random campaigns, {} inputs, 0 violations in {:.1?}",
        generated.get(),
        start.elapsed()
    ))
}

// 5. Hit rate over a synthetic corpus: 83 of 100 inputs use typedef.
fn hit_rate_exact() -> Outcome {
    let batch: Vec<String> = (0..100)
        .map(|i| {
            if i < 83 {
                ok(&format!("typedef T{i} = int;"))
            } else {
                ok(&format!("let v{i} = {i};"))
            }
        })
        .collect();
    let matching = batch.iter().filter(|c| c.contains("typedef")).count();
    ensure!(matching == 83, "fixture has {matching} typedef inputs");
    let fx = Fixture::new(&Scenario {
        inputs_budget: 100,
        batch_size: 100,
        generate: vec![batch],
        jobs: 8,
        ..Scenario::default()
    });
    let config = fx.config();
    let report = run_campaign(&config, &RunOptions::default()).map_err(err)?;
    let rate = hit_rate(&report.state.stats, "typedef").map_err(err)?;
    ensure!(rate == Some(0.83), "hit rate {rate:?}");
    let events = read_events(&fx.campaign_dir().join("loop/events.ndjson")).map_err(err)?;
    let recount = stats_from_events(&events, config.target.feature_labels());
    ensure!(hit_rate(&recount, "typedef").map_err(err)? == Some(0.83), "recount disagrees");
    ensure!(hit_rate(&report.state.stats, "nope").is_err(), "unknown label accepted");
    Ok("typedef hit rate 0.83 from state and from event log".into())
}

// 6. Default sampling parameters reach the models unchanged.
fn defaults_conformance() -> Outcome {
    let batch = |tag: &str| -> Vec<String> {
        (0..30).map(|i| ok(&format!("let {tag}{} = 0;", i % 3))).collect()
    };
    let mut generate: Vec<Vec<String>> = (0..4).map(|i| batch(&format!("t{i}_"))).collect();
    generate.push(batch("loop"));
    let fx = Fixture::new(&Scenario {
        inputs_budget: 30,
        sampling_override: false,
        autoprompt_section: Some(String::new()),
        distill: (0..4).map(|i| format!("prompt {i}")).collect(),
        generate,
        ..Scenario::default()
    });
    let report = run_campaign(&fx.config(), &RunOptions::default()).map_err(err)?;
    let d = &report.distillation_requests;
    ensure!(d.len() == 4, "{} distillation requests", d.len());
    ensure!(d[0].params.temperature == 0.0, "greedy candidate at temperature {}", d[0].params.temperature);
    for r in d {
        ensure!(r.params.max_tokens == 500, "distillation max_tokens {}", r.params.max_tokens);
        ensure!(r.params.batch_size == 1, "distillation batch {}", r.params.batch_size);
    }
    for r in &d[1..] {
        ensure!(r.params.temperature == 1.0, "sampled candidate at temperature {}", r.params.temperature);
    }
    let g = &report.generation_requests;
    ensure!(g.len() == 5, "{} generation requests (4 trial batches + 1 loop batch expected)", g.len());
    for r in g {
        let p = r.params;
        ensure!(
            p.temperature == 1.0 && p.top_p == 1.0 && p.max_tokens == 1024 && p.batch_size == 30,
            "generation request {p:?}"
        );
    }
    let candidates = read_candidates(&fx.campaign_dir()).map_err(err)?;
    ensure!(candidates.len() == 4, "{} candidates", candidates.len());
    Ok("temperature 1, top_p 1, max_tokens 1024, batch 30; 4 candidates x 30 trials; distillation max_tokens 500".into())
}

// 7. Halting at a random boundary and resuming matches an uninterrupted run.
fn resume_equivalence() -> Outcome {
    let start = Instant::now();
    let trials = 20;
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let mut hops_total = 0;
    for trial in 0..trials {
        let seed = rng.gen_range(0..=i64::MAX as u64);
        let batch = rng.gen_range(2..=5u32);
        let iterations = rng.gen_range(3..=7u64);
        let ap = rng.gen_bool(0.5).then(|| (rng.gen_range(1..=2usize), rng.gen_range(1..=3u32)));
        let mut picks = (0..400).map(|_| rng.gen_range(0..VOCAB)).filter(|&k| k != 11);
        let mut take = |n: usize| (0..n).map(|_| vocab(picks.next().unwrap())).collect::<Vec<_>>();
        let mut generate = Vec::new();
        let mut distill = Vec::new();
        if let Some((n, t)) = ap {
            for i in 0..n {
                distill.push(format!("prompt {i}"));
                generate.push(take(t as usize));
            }
        }
        for _ in 0..iterations {
            generate.push(take(batch as usize));
        }
        let fx = Fixture::new(&Scenario {
            seed,
            inputs_budget: iterations * batch as u64,
            batch_size: batch,
            autoprompt: ap,
            distill,
            generate,
            ..Scenario::default()
        });
        let config = fx.config();
        let dir = fx.campaign_dir();

        let whole = run_campaign(&config, &RunOptions::default()).map_err(err)?;
        let whole_events = fx.events_bytes();
        std::fs::remove_dir_all(&dir).map_err(err)?;

        let kill_at = rng.gen_range(1..iterations);
        let halted = run_campaign(
            &config,
            &RunOptions {
                halt_after_iterations: Some(kill_at),
                ..RunOptions::default()
            },
        )
        .map_err(err)?;
        ensure!(halted.outcome == LoopOutcome::Halted, "trial {trial}: run was not halted");
        let mut done = kill_at;
        let mut hops = 0;
        let last = loop {
            // A torn write past the checkpoint, as a kill mid-iteration leaves.
            let mut events = std::fs::OpenOptions::new()
                .append(true)
                .open(dir.join("loop/events.ndjson"))
                .map_err(err)?;
            std::io::Write::write_all(&mut events, b"{\"seq\":999,\"phase\":\"lo").map_err(err)?;
            drop(events);
            hops += 1;
            let step = (rng.gen_bool(0.3) && done + 1 < iterations).then_some(1);
            let resumed = resume_campaign(
                &dir,
                &config,
                false,
                &RunOptions {
                    halt_after_iterations: step,
                    ..RunOptions::default()
                },
            )
            .map_err(err)?;
            if step.is_none() {
                break resumed;
            }
            done += 1;
        };
        hops_total += hops;
        ensure!(last.outcome == LoopOutcome::BudgetExhausted, "trial {trial}: resumed run did not finish");
        ensure!(
            last.state == whole.state,
            "trial {trial} (kill at {kill_at}): resumed state diverges"
        );
        ensure!(fx.events_bytes() == whole_events, "trial {trial}: event logs differ");
    }
    Ok(format!(
        "{trials} trials, {hops_total} resumes, 0 divergences in {:.1?}",
        start.elapsed()
    ))
}

// 8. Live smoke run against a real endpoint and a local C compiler.
fn live_smoke() -> Option<Outcome> {
    let base_url = std::env::var("AUTOFUZZ_LIVE_BASE_URL").ok()?;
    let model = std::env::var("AUTOFUZZ_LIVE_MODEL").ok()?;
    Some(live_smoke_run(&base_url, &model))
}

fn live_smoke_run(base_url: &str, model: &str) -> Outcome {
    let kind = std::env::var("AUTOFUZZ_LIVE_KIND").unwrap_or_else(|_| "http-chat".into());
    let token_env = std::env::var("AUTOFUZZ_LIVE_TOKEN_ENV").unwrap_or_else(|_| "OPENAI_API_KEY".into());
    let cc = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    let dir = tempfile::tempdir().map_err(err)?;
    std::fs::write(
        dir.path().join("c.md"),
        "C11 programs: functions, structs, pointers, loops. A translation unit must compile with `cc -c`.\n",
    )
    .map_err(err)?;
    let token_line = if std::env::var_os(&token_env).is_some() {
        format!("auth_token_env = \"{token_env}\"")
    } else {
        String::new()
    };
    let text = format!(
        r#"
[campaign]
id = "live"
output_dir = "out"
progress = false

[budget]
inputs = 50

[user_input]
files = ["c.md"]

[fuzzing]
prompt_mode = "raw"

[models.generation]
kind = "{kind}"
base_url = "{base_url}"
model = "{model}"
{token_line}

[models.generation.sampling]
batch_size = 10
max_tokens = 512

[target]
name = "cc"
file_extension = ".c"
validity_cmd = "{cc} -c -o /dev/null {{input}}"
timeout_secs = 20
"#
    );
    let path = dir.path().join("config.toml");
    std::fs::write(&path, text).map_err(err)?;
    let config = autofuzz_core::CampaignConfig::load(&path).map_err(err)?;
    let report = run_campaign(&config, &RunOptions::default()).map_err(err)?;
    let stats = &report.state.stats;
    let rate = validity_rate(stats).ok_or("nothing generated")?;
    ensure!(rate > 0.0 && rate < 1.0, "validity rate {rate}");
    ensure!(stats.valid_unique >= 1, "no input compiled");
    let compiled = read_events(&report.dir.join("loop/events.ndjson"))
        .map_err(err)?
        .iter()
        .filter(|e| e.accepted && e.status != EventStatus::Empty)
        .count();
    Ok(format!(
        "{} inputs, validity {:.1}%, {compiled} accepted events",
        stats.generated_total,
        rate * 100.0
    ))
}

fn run_one(label: &str, f: impl FnOnce() -> Outcome) -> bool {
    let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panicked".into()))
    });
    match outcome {
        Ok(detail) => {
            println!("{label} PASS  {detail}");
            true
        }
        Err(detail) => {
            println!("{label} FAIL  {detail}");
            false
        }
    }
}

fn main() {
    let mut ok_all = true;
    ok_all &= run_one("AC1 autoprompt argmax      ", autoprompt_argmax);
    ok_all &= run_one("AC2 loop replay            ", loop_replay);
    ok_all &= run_one("AC3 oracle matrix          ", oracle_matrix);
    ok_all &= run_one("AC4 metrics partition      ", metrics_partition);
    ok_all &= run_one("AC5 hit rate               ", hit_rate_exact);
    ok_all &= run_one("AC6 default parameters     ", defaults_conformance);
    ok_all &= run_one("AC7 resume equivalence     ", resume_equivalence);
    match live_smoke() {
        Some(outcome) => ok_all &= run_one("AC8 live smoke             ", || outcome),
        None => println!("AC8 live smoke              SKIP  set AUTOFUZZ_LIVE_BASE_URL and AUTOFUZZ_LIVE_MODEL to run"),
    }
    if !ok_all {
        std::process::exit(1);
    }
}
