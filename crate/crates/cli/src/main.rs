use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use autofuzz_core::campaign::{load_target, locate_campaign, read_meta};
use autofuzz_core::{
    report_campaign, resume_campaign, run_campaign, validate_target, CampaignConfig, CampaignError, LoopOutcome,
    PromptMode, RunOptions, RunReport, StrategySet, VerdictStatus,
};
use clap::{Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "autofuzz", version, about = "LLM-driven fuzzing of compilers, solvers and other tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a new campaign from a config file.
    Run {
        config: PathBuf,
        #[arg(long, value_enum)]
        prompt_mode: Option<PromptModeArg>,
        #[arg(long, value_enum)]
        strategies: Option<StrategiesArg>,
        /// Never put an example input into the prompt.
        #[arg(long)]
        no_example: bool,
        /// Override `campaign.output_dir`.
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Override `campaign.id`.
        #[arg(long)]
        id: Option<String>,
        /// Suppress per-iteration progress lines.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Continue a campaign from its last checkpoint.
    Resume {
        /// Campaign directory, or an id under the output directory.
        campaign: String,
        /// Config to resume with. Defaults to the one recorded at start.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Resume even though the config changed.
        #[arg(long)]
        force: bool,
        #[arg(long, short)]
        quiet: bool,
    },
    /// Print campaign metrics and rewrite summary.json.
    Report {
        campaign: String,
        #[arg(long)]
        output_dir: Option<PathBuf>,
        /// Print summary.json instead of the text report.
        #[arg(long)]
        json: bool,
        /// Externally measured coverage to record in the summary.
        #[arg(long)]
        coverage: Option<f64>,
    },
    /// Run one sample through a target's validity check and oracle.
    ValidateTarget {
        /// Target file or campaign config.
        target: PathBuf,
        sample: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum PromptModeArg {
    None,
    Raw,
    Autoprompt,
}

impl From<PromptModeArg> for PromptMode {
    fn from(arg: PromptModeArg) -> Self {
        match arg {
            PromptModeArg::None => PromptMode::None,
            PromptModeArg::Raw => PromptMode::Raw,
            PromptModeArg::Autoprompt => PromptMode::Autoprompt,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategiesArg {
    GenerateNewOnly,
    All,
}

impl From<StrategiesArg> for StrategySet {
    fn from(arg: StrategiesArg) -> Self {
        match arg {
            StrategiesArg::GenerateNewOnly => StrategySet::GenerateNewOnly,
            StrategiesArg::All => StrategySet::All,
        }
    }
}

const EXIT_INTERRUPTED: u8 = 130;

fn stop_flag() -> Arc<AtomicBool> {
    let stop = Arc::new(AtomicBool::new(false));
    for signal in [signal_hook::consts::SIGINT, signal_hook::consts::SIGTERM] {
        // A second signal while the first is pending exits at once.
        let _ = signal_hook::flag::register_conditional_shutdown(signal, i32::from(EXIT_INTERRUPTED), stop.clone());
        let _ = signal_hook::flag::register(signal, stop.clone());
    }
    stop
}

fn finish(report: RunReport) -> ExitCode {
    print!("{}", report.text);
    println!("campaign directory: {}", report.dir.display());
    println!("{} unique bug(s) found", report.state.bugs.len());
    match report.outcome {
        LoopOutcome::Interrupted => {
            eprintln!("interrupted; state saved, continue with `autofuzz resume`");
            ExitCode::from(EXIT_INTERRUPTED)
        }
        LoopOutcome::BudgetExhausted | LoopOutcome::Halted => ExitCode::SUCCESS,
    }
}

fn options(quiet: bool) -> RunOptions {
    RunOptions {
        stop: Some(stop_flag()),
        progress: quiet.then_some(false),
        ..RunOptions::default()
    }
}

fn execute(command: Command) -> Result<ExitCode, CampaignError> {
    match command {
        Command::Run {
            config,
            prompt_mode,
            strategies,
            no_example,
            output_dir,
            id,
            quiet,
        } => {
            let mut config = CampaignConfig::load(&config)?;
            if let Some(mode) = prompt_mode {
                config.prompt_mode = mode.into();
            }
            if let Some(set) = strategies {
                config.strategies = set.into();
            }
            if no_example {
                config.use_examples = false;
            }
            if let Some(dir) = output_dir {
                config.output_dir = dir;
            }
            if id.is_some() {
                config.campaign_id = id;
            }
            Ok(finish(run_campaign(&config, &options(quiet))?))
        }
        Command::Resume {
            campaign,
            config,
            output_dir,
            force,
            quiet,
        } => {
            let dir = locate_campaign(&campaign, output_dir.as_deref());
            let meta = read_meta(&dir)?;
            let config_path = config.or(meta.config_path).ok_or_else(|| {
                CampaignError::ResumeRefused("no config recorded for this campaign; pass --config".into())
            })?;
            let config = CampaignConfig::load(&config_path)?;
            Ok(finish(resume_campaign(&dir, &config, force, &options(quiet))?))
        }
        Command::Report {
            campaign,
            output_dir,
            json,
            coverage,
        } => {
            let dir = locate_campaign(&campaign, output_dir.as_deref());
            if !dir.is_dir() {
                return Err(CampaignError::Input(format!("unknown campaign `{campaign}`")));
            }
            let (text, summary) = report_campaign(&dir, coverage)?;
            if json {
                println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
            } else {
                print!("{text}");
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::ValidateTarget { target, sample } => validate(&target, &sample),
    }
}

fn validate(target: &Path, sample: &Path) -> Result<ExitCode, CampaignError> {
    let target = load_target(target)?;
    let verdict = validate_target(&target, sample)?;
    println!("verdict: {}", verdict.status.as_str());
    if let Some(sig) = &verdict.bug_signature {
        println!("signature: {sig}");
    }
    match (verdict.raw.exit_code, verdict.raw.signal) {
        (Some(code), _) => println!("exit code: {code}"),
        (None, Some(sig)) => println!("signal: {sig}"),
        _ => {}
    }
    if let Some(err) = &verdict.raw.error {
        println!("error: {err}");
    }
    if !verdict.raw.stderr_head.is_empty() {
        println!("stderr:\n{}", verdict.raw.stderr_head.trim_end());
    }
    Ok(if verdict.status == VerdictStatus::Valid {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
