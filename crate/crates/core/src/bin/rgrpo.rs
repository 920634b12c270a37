use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use reflective_grpo::cli::{
    cmd_cold_start, cmd_eval, cmd_gen_data, cmd_score_traces, cmd_train, CliError, Overrides,
    RunConfig,
};

#[derive(Parser)]
#[command(
    name = "rgrpo",
    version,
    about = "Group-relative policy optimization with reflective emotion rewards"
)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; flags below override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    group_size: Option<usize>,
    #[arg(long, global = true)]
    lambda1: Option<f64>,
    #[arg(long, global = true)]
    lambda2: Option<f64>,
    /// oracle, self or remote (the remote endpoint comes from the config file).
    #[arg(long, global = true)]
    judge: Option<String>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset: scenes.jsonl, manifest.jsonl, prompt.txt.
    GenData,
    /// Supervised warm-up on oracle demonstrations.
    ColdStart,
    /// GRPO training with per-step metrics.
    Train,
    /// Greedy evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Score externally produced outputs (`{id, output}` JSONL).
    ScoreTraces {
        #[arg(long)]
        traces: PathBuf,
    },
    /// Print the effective configuration and exit.
    ShowConfig,
}

fn config(common: &Common) -> Result<RunConfig, CliError> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply(&Overrides {
        seed: common.seed,
        steps: common.steps,
        group_size: common.group_size,
        lambda1: common.lambda1,
        lambda2: common.lambda2,
        judge: common.judge.clone(),
        out: common.out.clone(),
    })?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = config(&cli.common)?;
    match cli.command {
        Command::GenData => {
            let s = cmd_gen_data(cfg)?;
            println!("wrote {} scenes to {}", s.n_scenes, s.scenes_path.display());
        }
        Command::ColdStart => {
            let s = cmd_cold_start(cfg)?;
            let ll = s.log_likelihood;
            println!(
                "mean log-likelihood {:.4} -> {:.4}; checkpoint {}",
                ll.first().copied().unwrap_or(f64::NAN),
                ll.last().copied().unwrap_or(f64::NAN),
                s.checkpoint.display()
            );
        }
        Command::Train => {
            let s = cmd_train(cfg)?;
            if let Some(m) = s.metrics.last() {
                println!(
                    "step {}: overall {:.4} accuracy {:.4} consistency {:.4} coherence {:.4}",
                    m.step, m.mean_overall, m.mean_acc, m.mean_cons, m.mean_coh
                );
            }
            println!("checkpoint {}", s.checkpoint.display());
        }
        Command::Eval { checkpoint } => {
            let r = cmd_eval(cfg, &checkpoint)?;
            println!("accuracy {:.4} over {} scenes", r.accuracy, r.n);
            for c in &r.per_class {
                println!(
                    "  {:<12} {:.4} ({}/{})",
                    c.label, c.accuracy, c.correct, c.n
                );
            }
        }
        Command::ScoreTraces { traces } => {
            let s = cmd_score_traces(cfg, &traces)?;
            let malformed = s.iter().filter(|t| t.malformed).count();
            println!("scored {} outputs ({malformed} malformed)", s.len());
        }
        Command::ShowConfig => {
            cfg.validate()?;
            println!(
                "{}",
                serde_json::to_string_pretty(&cfg).expect("config serializes")
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
