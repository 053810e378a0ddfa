use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;

use rubricforge::pipeline::{run_all, run_stage, PipelineConfig, PipelineError, Regime, Stage};

/// Rubric representation-learning pipeline over a workspace directory.
#[derive(Parser)]
#[command(name = "rubricforge", version)]
struct Cli {
    /// Stage to run (ingest, subsample, embed, cohort, rubric, apply,
    /// parsegen, tabularize, train, evaluate, report) or "all"
    stage: String,

    /// Path to the pipeline config (JSON)
    #[arg(long)]
    config: PathBuf,

    /// Restrict the run to a single task by name
    #[arg(long)]
    task: Option<String>,

    /// Override the config's global seed
    #[arg(long)]
    seed: Option<u64>,

    /// Override the sample-size regime (n40 | all)
    #[arg(long)]
    regime: Option<String>,
}

fn apply_overrides(cfg: &mut PipelineConfig, cli: &Cli) -> Result<(), String> {
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(regime) = &cli.regime {
        cfg.regime =
            Regime::parse(regime).ok_or_else(|| format!("invalid regime \"{regime}\""))?;
    }
    if let Some(task) = &cli.task {
        cfg.tasks.retain(|t| &t.name == task);
        cfg.synth.retain(|s| &s.task_name == task);
        if cfg.tasks.is_empty() && cfg.synth.is_empty() {
            return Err(format!("task \"{task}\" not found in config"));
        }
    }
    Ok(())
}

fn exit_code_for(err: &PipelineError) -> ExitCode {
    if err.is_provider_failure() {
        ExitCode::from(2)
    } else {
        ExitCode::from(1)
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let mut cfg = match PipelineConfig::load(&cli.config) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e}");
            return exit_code_for(&e);
        }
    };
    if let Err(msg) = apply_overrides(&mut cfg, &cli) {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }

    if cli.stage == "all" {
        return match run_all(&cfg) {
            Ok((_, rendered)) => {
                print!("{}", rendered.table);
                ExitCode::SUCCESS
            }
            Err(e) => {
                eprintln!("error: {e}");
                exit_code_for(&e)
            }
        };
    }

    let stage = match Stage::parse(&cli.stage) {
        Some(s) => s,
        None => {
            eprintln!("error: unknown stage \"{}\"", cli.stage);
            return ExitCode::from(1);
        }
    };
    match run_stage(stage, &cfg) {
        Ok(report) => {
            if stage == Stage::Report {
                if let Ok(table) =
                    std::fs::read_to_string(cfg.workspace.join("report").join("report.txt"))
                {
                    print!("{table}");
                }
            }
            let _ = report;
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}
