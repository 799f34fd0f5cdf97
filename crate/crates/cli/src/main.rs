use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use observa_core::runner::manifest::RunManifest;
use observa_core::runner::report::SUMMARY;
use observa_core::runner::{Pipeline, RunConfig, Stage, StageOutcome};
use observa_core::{Error, Result};

/// Multi-observer Big Five assessment of LLM agents.
///
/// Settings come from defaults, then the `--config` file, then flags. When
/// no config file is given and the output directory already holds a run,
/// that run's settings are the starting point.
#[derive(Parser)]
#[command(name = "observa", version)]
struct Cli {
    #[command(flatten)]
    settings: Settings,

    /// Only print warnings and errors.
    #[arg(short, long, global = true)]
    quiet: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Settings {
    /// Flat `key = value` settings file.
    #[arg(short, long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override any setting, e.g. `--set max_turns=12`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Run directory.
    #[arg(short, long, global = true, value_name = "DIR")]
    output: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// `mock` or `openai`.
    #[arg(long, global = true)]
    backend: Option<String>,

    #[arg(long, global = true)]
    endpoint: Option<String>,

    #[arg(long, global = true)]
    model: Option<String>,

    #[arg(long = "subjects", global = true, value_name = "N")]
    n_subjects: Option<usize>,

    /// Observers in each of the family, friend and workplace contexts.
    #[arg(long, global = true, value_name = "N")]
    observers_per_context: Option<usize>,

    #[arg(long = "scenarios", global = true, value_name = "K")]
    k_scenarios: Option<usize>,

    /// `default`, `neutral`, `reversed` or `batch`.
    #[arg(long, global = true)]
    variant: Option<String>,

    /// Worker threads (`auto` for all cores).
    #[arg(long, global = true)]
    threads: Option<String>,

    /// Process units one at a time.
    #[arg(long, global = true)]
    sequential: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate profiles, relationships and scenarios.
    Gen,
    /// Simulate the subject-observer dialogues.
    Simulate,
    /// Administer the questionnaire to subjects and observers and score it.
    Assess,
    /// Compute the statistics tables.
    Analyze,
    /// Write the run summary.
    Report,
    /// Run every stage not already up to date.
    Run,
    /// Import human answer sheets listed in a `rater_id,subject_id,path` CSV.
    ImportHuman {
        #[arg(value_name = "PAIRING_CSV")]
        pairing: PathBuf,
    },
}

impl Settings {
    fn overrides(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                out.push((k.to_string(), v));
            }
        };
        push("output", self.output.as_ref().map(|p| p.display().to_string()));
        push("seed", self.seed.map(|s| s.to_string()));
        push("backend", self.backend.clone());
        push("endpoint", self.endpoint.clone());
        push("model", self.model.clone());
        push("n_subjects", self.n_subjects.map(|n| n.to_string()));
        push("observers_per_context", self.observers_per_context.map(|n| n.to_string()));
        push("k_scenarios", self.k_scenarios.map(|n| n.to_string()));
        push("variant", self.variant.clone());
        push("threads", self.threads.clone());
        push("exec_mode", self.sequential.then(|| "sequential".to_string()));
        out
    }

    fn resolve(&self) -> Result<RunConfig> {
        let mut sets = Vec::new();
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| Error::Usage(format!("--set expects KEY=VALUE, got `{s}`")))?;
            sets.push((k.trim().to_string(), v.trim().to_string()));
        }
        sets.splice(0..0, self.overrides());
        let apply = |mut c: RunConfig| -> Result<RunConfig> {
            for (k, v) in &sets {
                c.set(k, v)?;
            }
            Ok(c)
        };
        let mut config = RunConfig::default();
        if let Some(path) = &self.config {
            config.apply_file(path)?;
            return apply(config);
        }
        let config = apply(config)?;
        match RunManifest::load(&config.output)? {
            Some(m) => {
                let mut previous = m.config;
                previous.output = config.output.clone();
                apply(previous)
            }
            None => Ok(config),
        }
    }
}

fn stages(command: &Command) -> &'static [Stage] {
    match command {
        Command::Gen => &[Stage::Profiles, Stage::Relations, Stage::Scenarios],
        Command::Simulate => &[Stage::Dialogues],
        Command::Assess => &[Stage::Sheets, Stage::Scores],
        Command::Analyze => &[Stage::Stats],
        Command::Report => &[Stage::Report],
        Command::Run => &Stage::ALL,
        Command::ImportHuman { .. } => &[],
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let config = cli.settings.resolve()?;
    let mut pipeline = Pipeline::open(config)?;
    if let Command::ImportHuman { pairing } = &cli.command {
        let s = pipeline.import_human(pairing)?;
        eprintln!(
            "imported {} human sheets ({} scoreable); run `analyze` to include them",
            s.sheets, s.scored
        );
        return Ok(());
    }
    let targets = stages(&cli.command);
    for (stage, outcome) in pipeline.run_stages(targets)? {
        let word = match outcome {
            StageOutcome::Ran => "done",
            StageOutcome::Skipped => "up to date",
        };
        eprintln!("{stage:>10}: {word}");
    }
    if targets.contains(&Stage::Report) {
        let path = pipeline.root().join(SUMMARY);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::Io { path, source: e })?;
        print!("{text}");
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.quiet {
        "warn"
    } else {
        "info"
    }))
    .format_timestamp(None)
    .init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
