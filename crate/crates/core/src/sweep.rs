//! One-axis sweep harness: a grid of values on a single config axis,
//! repeats with derived seeds, a worker pool, and a loss-free CSV artifact
//! (point rows in grid order, then per-value mean rows).

use std::path::Path;
use std::sync::Mutex;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::SafetyScores;
use crate::pipeline::execute;
use crate::precision::Precision;

pub const AXES: [&str; 7] = [
    "kd_weight",
    "alpha",
    "epsilon",
    "lambda",
    "tau",
    "budget_steps",
    "precision",
];

#[derive(Clone, Debug)]
pub struct SweepGrid {
    pub axis: String,
    pub values: Vec<String>,
    pub repeats: usize,
}

impl SweepGrid {
    pub fn validate(&self) -> Result<()> {
        if !AXES.contains(&self.axis.as_str()) {
            return Err(Error::UnknownStrategy {
                kind: "sweep axis",
                name: self.axis.clone(),
                known: AXES.join(", "),
            });
        }
        if self.values.len() < 2 {
            return Err(Error::Config("sweep needs >= 2 grid points".into()));
        }
        if self.repeats < 1 {
            return Err(Error::Config("sweep repeats must be >= 1".into()));
        }
        if self.axis != "precision" {
            let nums = self.numeric_values()?;
            if nums.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Config(
                    "numeric sweep values must be strictly increasing".into(),
                ));
            }
        }
        Ok(())
    }

    fn numeric_values(&self) -> Result<Vec<f64>> {
        self.values
            .iter()
            .map(|v| {
                v.parse::<f64>()
                    .map_err(|_| Error::Config(format!("non-numeric sweep value {v:?}")))
            })
            .collect()
    }
}

pub fn apply_axis(cfg: &mut RunConfig, axis: &str, value: &str) -> Result<()> {
    let num = || -> Result<f64> {
        value
            .parse::<f64>()
            .map_err(|_| Error::Config(format!("axis {axis}: non-numeric value {value:?}")))
    };
    match axis {
        "kd_weight" => cfg.objective.kd_weight = num()?,
        "alpha" => cfg.objective.alpha = num()?,
        "epsilon" => cfg.perturb.epsilon = num()?,
        "lambda" => cfg.objective.lambda = num()?,
        "tau" => cfg.objective.tau = num()?,
        "budget_steps" => cfg.train.budget_steps = Some(num()? as usize),
        "precision" => {
            cfg.train.precision = Precision::parse(value).ok_or_else(|| {
                Error::Config(format!(
                    "axis precision: {value:?} (expected f64, f32, or emulated-bf16)"
                ))
            })?
        }
        _ => {
            return Err(Error::UnknownStrategy {
                kind: "sweep axis",
                name: axis.to_string(),
                known: AXES.join(", "),
            })
        }
    }
    cfg.validate()
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub value: String,
    pub repeat: usize,
    pub seed: u64,
    pub scores: Option<SafetyScores>,
    pub wall_ms: f64,
    pub error: Option<String>,
}

pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub any_failed: bool,
    /// Hash of the resolved base config, embedded in the CSV artifact.
    pub config_hash: String,
}

impl SweepResult {
    /// Point rows in grid order, then per-value mean rows over the
    /// successful repeats.
    pub fn to_csv(&self, axis: &str, values: &[String]) -> String {
        let mut out = format!(
            "# config_hash={}\naxis,value,repeat,seed,kd_alignment,noise_robustness,alignment_stability,overall,wall_ms,status\n",
            self.config_hash
        );
        for row in &self.rows {
            match &row.scores {
                Some(s) => out.push_str(&format!(
                    "{axis},{},{},{},{},{},{},{},{},ok\n",
                    row.value,
                    row.repeat,
                    row.seed,
                    s.kd_alignment,
                    s.noise_robustness,
                    s.alignment_stability,
                    s.overall,
                    row.wall_ms
                )),
                None => out.push_str(&format!(
                    "{axis},{},{},{},,,,,{},failed\n",
                    row.value, row.repeat, row.seed, row.wall_ms
                )),
            }
        }
        for value in values {
            let ok: Vec<&SweepRow> = self
                .rows
                .iter()
                .filter(|r| &r.value == value && r.scores.is_some())
                .collect();
            if ok.is_empty() {
                out.push_str(&format!("{axis},{value},mean,,,,,,,failed\n"));
                continue;
            }
            let n = ok.len() as f64;
            let sum = |f: fn(&SafetyScores) -> f64| -> f64 {
                ok.iter().map(|r| f(r.scores.as_ref().unwrap())).sum::<f64>() / n
            };
            let wall: f64 = ok.iter().map(|r| r.wall_ms).sum::<f64>() / n;
            out.push_str(&format!(
                "{axis},{value},mean,,{},{},{},{},{},ok\n",
                sum(|s| s.kd_alignment),
                sum(|s| s.noise_robustness),
                sum(|s| s.alignment_stability),
                sum(|s| s.overall),
                wall
            ));
        }
        out
    }
}

/// Run the grid. Each (value, repeat) point is an isolated run with seeds
/// derived from the repeat index; results land in grid order regardless of
/// worker completion order. A single point failure marks its row and the
/// sweep continues.
pub fn run_sweep(base: &RunConfig, grid: &SweepGrid, workers: usize) -> Result<SweepResult> {
    grid.validate()?;
    base.validate()?;
    let config_hash = base.config_hash();

    struct Job {
        index: usize,
        value: String,
        repeat: usize,
        /// A point whose config is invalid still gets a (failed) row.
        cfg: std::result::Result<RunConfig, String>,
    }
    let mut jobs = Vec::new();
    for value in &grid.values {
        for r in 0..grid.repeats {
            let mut cfg = base.with_derived_seeds(r as u64);
            let cfg = match apply_axis(&mut cfg, &grid.axis, value) {
                Ok(()) => Ok(cfg),
                Err(e) => Err(e.to_string()),
            };
            jobs.push(Job {
                index: jobs.len(),
                value: value.clone(),
                repeat: r,
                cfg,
            });
        }
    }

    let n_jobs = jobs.len();
    let queue = Mutex::new(jobs);
    let results: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; n_jobs]);
    let workers = workers.clamp(1, n_jobs.max(1));

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let job = match queue.lock().unwrap().pop() {
                    Some(j) => j,
                    None => break,
                };
                let t0 = std::time::Instant::now();
                let (seed, outcome) = match &job.cfg {
                    Ok(cfg) => (cfg.train.seed, execute(cfg).map_err(|e| e.to_string())),
                    Err(e) => (base.train.seed, Err(e.clone())),
                };
                let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
                let row = SweepRow {
                    value: job.value,
                    repeat: job.repeat,
                    seed,
                    scores: outcome.as_ref().ok().map(|o| o.scores),
                    wall_ms,
                    error: outcome.err(),
                };
                results.lock().unwrap()[job.index] = Some(row);
            });
        }
    });

    let rows: Vec<SweepRow> = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every job produced a row"))
        .collect();
    let any_failed = rows.iter().any(|r| r.scores.is_none());
    Ok(SweepResult {
        rows,
        any_failed,
        config_hash,
    })
}

pub fn write_sweep_csv(result: &SweepResult, grid: &SweepGrid, out: &Path) -> Result<()> {
    if let Some(parent) = out.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(out, result.to_csv(&grid.axis, &grid.values))?;
    Ok(())
}
