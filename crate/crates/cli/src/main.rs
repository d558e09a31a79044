use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use devclf_core::corpus::{SplitName, TaskId};
use devclf_core::pipeline::{Pipeline, PipelineConfig, PipelineError, PromptMode};

/// Devanagari text classification: train, select, finalize, predict.
#[derive(Debug, Parser)]
#[command(name = "devclf", version, about)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Pipeline config (TOML).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override the task in the config (A, B or C).
    #[arg(long, global = true)]
    task: Option<TaskId>,
    /// Override the output directory (takes precedence over DEVCLF_OUT).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override the pipeline seed (takes precedence over DEVCLF_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train candidates on train and score them on dev.
    Train {
        /// Train only this model.
        #[arg(long)]
        model: Option<String>,
    },
    /// Rank candidates by dev macro-F1 and keep the top k.
    Select {
        #[arg(long, default_value_t = 3)]
        top_k: usize,
    },
    /// Retrain the selected models on train+dev.
    Finalize,
    /// Predict the test split with the ensemble or a single model.
    Predict {
        /// Model name, or "ensemble". Defaults to the configured ensemble.
        #[arg(long)]
        model: Option<String>,
    },
    /// Focal-loss grid search over alpha and gamma.
    Gridsearch,
    /// Render instruction prompts as JSONL.
    RenderPrompts {
        #[arg(long, default_value = "test")]
        split: SplitName,
        #[arg(long, default_value = "inference")]
        mode: PromptMode,
    },
    /// Print stored reports.
    Report,
}

fn open(global: &Global) -> Result<Pipeline, PipelineError> {
    let path = global
        .config
        .as_deref()
        .ok_or_else(|| PipelineError::Usage("--config is required".into()))?;
    let mut config = PipelineConfig::load(path)?;
    if let Some(task) = global.task {
        config.task = task;
    }
    let seed = global.seed.map(|s| s.to_string());
    config.apply_overrides(global.out.clone(), seed.as_deref())?;
    Pipeline::new(config)
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let pipeline = open(&cli.global)?;
    match cli.command {
        Command::Train { model } => {
            for s in pipeline.cmd_train(model.as_deref())? {
                println!(
                    "{}\tdev macro_f1={:.4}\tmicro_f1={:.4}\t{}",
                    s.model,
                    s.dev.macro_f1,
                    s.dev.micro_f1,
                    s.model_path.display()
                );
            }
        }
        Command::Select { top_k } => {
            let sel = pipeline.cmd_select(top_k)?;
            for (rank, m) in sel.ranking.iter().enumerate() {
                let mark = if sel.selected.contains(&m.name) { "*" } else { " " };
                println!("{mark} {}. {}\tmacro_f1={:.4}", rank + 1, m.name, m.macro_f1);
            }
        }
        Command::Finalize => {
            for s in pipeline.cmd_finalize()? {
                println!(
                    "{}-final\t{} examples\t{}",
                    s.model,
                    s.total_examples(),
                    s.model_path.display()
                );
            }
        }
        Command::Predict { model } => {
            let s = pipeline.cmd_predict(model.as_deref())?;
            println!(
                "{}\t{} predictions\t{}",
                s.target,
                s.rows.len(),
                s.predictions_path.display()
            );
            if let Some(rep) = &s.report {
                print!("{}", rep.to_table(&format!("{} on test", s.target)));
            }
        }
        Command::Gridsearch => {
            let g = pipeline.cmd_gridsearch()?;
            for c in &g.cells {
                println!("alpha={}\tgamma={}\tmacro_f1={:.4}", c.alpha, c.gamma, c.macro_f1);
            }
            println!("best alpha={} gamma={}", g.best.alpha, g.best.gamma);
        }
        Command::RenderPrompts { split, mode } => {
            println!("{}", pipeline.cmd_render_prompts(split, mode)?.display());
        }
        Command::Report => print!("{}", pipeline.cmd_report()?),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
