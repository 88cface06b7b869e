//! End-to-end run orchestration: data, teacher, student, scores, artifacts.

use std::path::Path;

use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{generate_synthetic, load_jsonl, split, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{compute_scores, SafetyScores};
use crate::model::{ClassifierModel, HeadInit};
use crate::trainer::{encode_dataset, finetune_student, pretrain_teacher, TrainTrace};

pub struct RunOutput {
    pub teacher: ClassifierModel,
    pub student: ClassifierModel,
    pub trace: TrainTrace,
    pub scores: SafetyScores,
}

#[derive(Serialize)]
pub struct ScoresDoc<'a> {
    pub run_id: &'a str,
    pub config_hash: &'a str,
    pub eval_epsilon: f64,
    pub eval_method: &'a str,
    pub stability_draws: usize,
    pub scores: SafetyScores,
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    match (&cfg.data.path, &cfg.data.synthetic) {
        (Some(path), None) => load_jsonl(path, Some(cfg.model.num_classes)),
        (None, Some(spec)) => generate_synthetic(spec),
        _ => Err(Error::Config("data: exactly one source required".into())),
    }
}

/// Execute one full run in memory: teacher pre-training on the train split,
/// student fine-tuning, safety scores on the test split.
pub fn execute(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let (train, val, test) = split(&data, &cfg.data.split)?;
    let teacher = pretrain_teacher(&data_or(&train, &data), &cfg.model, &cfg.teacher_train_config())?;
    let (student, trace) = finetune_student(
        &teacher,
        &data_or(&train, &data),
        Some(&val),
        &cfg.objective,
        &cfg.perturb,
        &cfg.train,
        HeadInit::SeededRandom(cfg.model.seed.wrapping_add(1)),
    )?;
    let eval_data = if test.is_empty() { &data } else { &test };
    let eval_set = encode_dataset(&student, eval_data)?;
    let scores = compute_scores(
        &student,
        &teacher,
        &eval_set,
        &cfg.eval_perturb(),
        cfg.eval.stability_draws,
    )?;
    Ok(RunOutput {
        teacher,
        student,
        trace,
        scores,
    })
}

fn data_or<'a>(preferred: &'a Dataset, fallback: &'a Dataset) -> Dataset {
    if preferred.is_empty() {
        fallback.clone()
    } else {
        preferred.clone()
    }
}

/// `execute` plus artifact files: resolved config echo, teacher/student
/// checkpoints, trace CSV, scores JSON.
pub fn execute_and_write(cfg: &RunConfig) -> Result<RunOutput> {
    let mut out = execute(cfg)?;
    let dir: &Path = &cfg.output_dir;
    std::fs::create_dir_all(dir)?;
    let hash = cfg.config_hash();
    std::fs::write(dir.join("config.toml"), cfg.resolved_toml())?;
    out.teacher.config_hash = Some(hash.clone());
    out.student.config_hash = Some(hash.clone());
    out.teacher.save(&dir.join("teacher.json"))?;
    out.student.save(&dir.join("student.json"))?;
    std::fs::write(
        dir.join("trace.csv"),
        format!("# config_hash={hash}\n{}", out.trace.to_csv()),
    )?;
    let eval_spec = cfg.eval_perturb();
    let doc = ScoresDoc {
        run_id: &cfg.run_id,
        config_hash: &hash,
        eval_epsilon: eval_spec.epsilon,
        eval_method: &eval_spec.method,
        stability_draws: cfg.eval.stability_draws,
        scores: out.scores,
    };
    std::fs::write(
        dir.join("scores.json"),
        serde_json::to_string_pretty(&doc)? + "\n",
    )?;
    Ok(out)
}
