use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use safetune::config::{load_config, EvalConfig};
use safetune::data::load_jsonl;
use safetune::error::Result;
use safetune::metrics::compute_scores;
use safetune::model::ClassifierModel;
use safetune::pipeline::{execute_and_write, ScoresDoc};
use safetune::sweep::{run_sweep, write_sweep_csv, SweepGrid};
use safetune::trainer::encode_dataset;

#[derive(Parser)]
#[command(name = "safetune", version, about = "Distillation + noise-robust fine-tuning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a teacher and fine-tune a student from a config file.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Score a checkpoint on a dataset.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "eval-config")]
        eval_config: PathBuf,
    },
    /// Sweep one config axis over a value grid.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        axis: String,
        /// Comma-separated grid values, strictly increasing where numeric.
        #[arg(long, value_delimiter = ',')]
        values: Vec<String>,
        #[arg(long, default_value_t = 1)]
        repeats: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train { config } => {
            let cfg = load_config(&config)?;
            let out = execute_and_write(&cfg)?;
            println!(
                "run {} done: {} steps, scores: kd_alignment={:.1} noise_robustness={:.1} alignment_stability={:.1} overall={:.1}",
                cfg.run_id,
                out.trace.steps(),
                out.scores.kd_alignment,
                out.scores.noise_robustness,
                out.scores.alignment_stability,
                out.scores.overall,
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Eval {
            checkpoint,
            data,
            eval_config,
        } => {
            let text = std::fs::read_to_string(&eval_config)
                .map_err(|e| safetune::Error::Config(format!("{}: {e}", eval_config.display())))?;
            let ecfg: EvalConfig = toml::from_str(&text)
                .map_err(|e| safetune::Error::Config(format!("{}: {e}", eval_config.display())))?;
            let model = ClassifierModel::load(&checkpoint)?;
            let dataset = load_jsonl(&data, Some(model.config.num_classes))?;
            if dataset
                .records
                .iter()
                .any(|r| r.label >= model.config.num_classes)
            {
                return Err(safetune::Error::Config(
                    "dataset labels exceed checkpoint class count".into(),
                ));
            }
            let teacher = match &ecfg.teacher_checkpoint {
                Some(p) => ClassifierModel::load(p)?,
                None => model.clone(),
            };
            if teacher.config.num_classes != model.config.num_classes {
                return Err(safetune::Error::Config(
                    "teacher/student class counts differ".into(),
                ));
            }
            let spec = ecfg
                .perturb
                .clone()
                .unwrap_or_else(safetune::perturb::PerturbSpec::none);
            spec.validate()?;
            let eval_set = encode_dataset(&model, &dataset)?;
            let scores = compute_scores(&model, &teacher, &eval_set, &spec, ecfg.stability_draws)?;
            let doc = ScoresDoc {
                run_id: "eval",
                config_hash: "",
                eval_epsilon: spec.epsilon,
                eval_method: &spec.method,
                stability_draws: ecfg.stability_draws,
                scores,
            };
            println!("{}", serde_json::to_string_pretty(&doc)?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            config,
            axis,
            values,
            repeats,
            out,
        } => {
            let cfg = load_config(&config)?;
            let grid = SweepGrid {
                axis,
                values,
                repeats,
            };
            let workers = std::env::var("SAFETUNE_WORKERS")
                .ok()
                .and_then(|v| v.parse::<usize>().ok())
                .unwrap_or_else(|| {
                    std::thread::available_parallelism()
                        .map(|n| n.get())
                        .unwrap_or(1)
                });
            let result = run_sweep(&cfg, &grid, workers)?;
            write_sweep_csv(&result, &grid, &out)?;
            if result.any_failed {
                eprintln!("sweep finished with failed points");
                Ok(ExitCode::from(1))
            } else {
                Ok(ExitCode::SUCCESS)
            }
        }
    }
}
