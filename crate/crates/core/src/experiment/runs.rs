//! Finetuning jobs, sweep records and their aggregate analyses.
//!
//! Jobs are pure descriptions: [`run_job`] turns one into a record, so a
//! caller may execute a job list in any order or in parallel and get the
//! same records back. Reported accuracy is the best top-1 over evaluation
//! points ([`ACCURACY_METRIC`]).

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use super::graduated::{graduated_schedule, GraduatedSpec};
use super::grid::GridSpec;
use super::metrics::{alpha, beta, min_max};
use crate::data::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::model::{transfer_init, Checkpoint, ModelSpec};
use crate::optim::{train, LrPolicy, MultiplierSchedule, TrainConfig, TrainOutcome};
use crate::seed::{derive_seed, SeedPart};

pub const ACCURACY_METRIC: &str = "best top-1 over evaluation points";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum RecordKind {
    /// Source-model training.
    Source,
    /// Head-only finetuning at a given LL.
    LastLayer,
    /// One IL x LL grid cell.
    Grid,
    /// Head-only baseline of a scale sweep.
    Baseline,
    /// Graduated schedule at one scale.
    Scale,
    /// Single finetune with an explicit schedule.
    Finetune,
}

/// One executed configuration.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SweepRecord {
    pub kind: RecordKind,
    pub task: String,
    pub source: String,
    pub ll: Option<f64>,
    pub il: Option<f64>,
    pub scale: Option<f64>,
    pub seed: u64,
    pub schedule: MultiplierSchedule,
    pub policy: LrPolicy,
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    pub checkpoint: Option<String>,
}

impl SweepRecord {
    /// Accuracy used by every analysis.
    pub fn accuracy(&self) -> f64 {
        self.best_accuracy
    }
}

/// A target to finetune on: training examples and held-out validation.
#[derive(Debug, Clone)]
pub struct TargetTask {
    pub id: String,
    pub train: LabeledDataset,
    pub val: LabeledDataset,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneJob {
    pub kind: RecordKind,
    pub task: String,
    pub ll: Option<f64>,
    pub il: Option<f64>,
    pub scale: Option<f64>,
    pub seed: u64,
    pub schedule: MultiplierSchedule,
    pub policy: LrPolicy,
}

/// Settings shared by every job of a run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSettings {
    pub batch_size: usize,
    pub momentum: f64,
    pub master_seed: u64,
}

/// Inner stages at `il`, head at `ll`, expressed on a policy whose base rate
/// is `ll`: the head multiplier is exactly 1 and IL = 0 is exactly frozen.
pub fn il_ll_schedule(spec: &ModelSpec, il: f64, ll: f64) -> MultiplierSchedule {
    let head = spec.head_name().unwrap_or_default();
    MultiplierSchedule::new(
        spec.stage_names()
            .map(|s| (s, if s == head { 1.0 } else { il / ll })),
        1.0,
    )
}

fn ll_seed(master: u64, task: &str, ll: f64) -> u64 {
    derive_seed(
        master,
        &[SeedPart::Str(task), SeedPart::Str("ll"), SeedPart::F64(ll)],
    )
}

/// Head-only job at `ll`.
pub fn ll_job(
    spec: &ModelSpec,
    task: &str,
    ll: f64,
    policy: &LrPolicy,
    master_seed: u64,
) -> Result<FinetuneJob> {
    if !(ll > 0.0 && ll.is_finite()) {
        return Err(invalid("ll", format!("{ll} must be positive")));
    }
    Ok(FinetuneJob {
        kind: RecordKind::LastLayer,
        task: task.into(),
        ll: Some(ll),
        il: Some(0.0),
        scale: None,
        seed: ll_seed(master_seed, task, ll),
        schedule: il_ll_schedule(spec, 0.0, ll),
        policy: policy.with_base_lr(ll),
    })
}

/// All cells of an IL x LL grid. Cells of one LL share a seed, so the IL = 0
/// cell reproduces [`ll_job`] exactly.
pub fn grid_jobs(
    spec: &ModelSpec,
    task: &str,
    grid: &GridSpec,
    policy: &LrPolicy,
    master_seed: u64,
) -> Result<Vec<FinetuneJob>> {
    grid.validate()?;
    let mut jobs = Vec::with_capacity(grid.run_count());
    for &ll in &grid.ll_values {
        for il in grid.il_values(ll) {
            jobs.push(FinetuneJob {
                kind: RecordKind::Grid,
                task: task.into(),
                ll: Some(ll),
                il: Some(il),
                scale: None,
                seed: ll_seed(master_seed, task, ll),
                schedule: il_ll_schedule(spec, il, ll),
                policy: policy.with_base_lr(ll),
            });
        }
    }
    Ok(jobs)
}

/// One head-only job per task, the reference a scale sweep is compared with.
pub fn baseline_jobs(
    tasks: &[&str],
    spec: &GraduatedSpec,
    policy: &LrPolicy,
    master_seed: u64,
) -> Result<Vec<FinetuneJob>> {
    if tasks.is_empty() {
        return Err(invalid("tasks", "empty"));
    }
    spec.validate()?;
    Ok(tasks
        .iter()
        .map(|&task| FinetuneJob {
            kind: RecordKind::Baseline,
            task: task.into(),
            ll: Some(spec.baseline_head_multiplier),
            il: Some(0.0),
            scale: None,
            seed: derive_seed(
                master_seed,
                &[SeedPart::Str(task), SeedPart::Str("baseline")],
            ),
            schedule: spec.baseline_schedule(),
            policy: *policy,
        })
        .collect())
}

/// One job per (task, scale), task-major.
pub fn scale_jobs(
    tasks: &[&str],
    spec: &GraduatedSpec,
    policy: &LrPolicy,
    master_seed: u64,
) -> Result<Vec<FinetuneJob>> {
    if tasks.is_empty() {
        return Err(invalid("tasks", "empty"));
    }
    spec.validate()?;
    let mut jobs = Vec::with_capacity(tasks.len() * spec.scales.len());
    for &task in tasks {
        for &scale in &spec.scales {
            jobs.push(FinetuneJob {
                kind: RecordKind::Scale,
                task: task.into(),
                ll: Some(spec.head_multiplier),
                il: None,
                scale: Some(scale),
                seed: derive_seed(
                    master_seed,
                    &[
                        SeedPart::Str(task),
                        SeedPart::Str("scale"),
                        SeedPart::F64(scale),
                    ],
                ),
                schedule: graduated_schedule(spec, scale)?,
                policy: *policy,
            });
        }
    }
    Ok(jobs)
}

/// Transfer-initializes from `source`, trains on the task and records the result.
pub fn run_job(
    job: &FinetuneJob,
    source_id: &str,
    source: &Checkpoint,
    task: &TargetTask,
    settings: &RunSettings,
) -> Result<(SweepRecord, TrainOutcome)> {
    let model = transfer_init(source, task.train.num_labels(), job.seed)?;
    let cfg = TrainConfig {
        batch_size: settings.batch_size,
        seed: job.seed,
        momentum: settings.momentum,
    };
    let outcome = train(
        &model,
        &task.train,
        &task.val,
        &job.schedule,
        &job.policy,
        &cfg,
    )?;
    let record = SweepRecord {
        kind: job.kind,
        task: job.task.clone(),
        source: source_id.into(),
        ll: job.ll,
        il: job.il,
        scale: job.scale,
        seed: job.seed,
        schedule: job.schedule.clone(),
        policy: job.policy,
        final_accuracy: outcome.final_accuracy,
        best_accuracy: outcome.best_accuracy,
        checkpoint: None,
    };
    Ok((record, outcome))
}

/// Head-only finetuning with effective head rate `ll`.
pub fn run_ll_experiment(
    source_id: &str,
    source: &Checkpoint,
    task: &TargetTask,
    ll: f64,
    policy: &LrPolicy,
    settings: &RunSettings,
) -> Result<SweepRecord> {
    let job = ll_job(
        &source.meta.spec,
        &task.id,
        ll,
        policy,
        settings.master_seed,
    )?;
    Ok(run_job(&job, source_id, source, task, settings)?.0)
}

/// Metrics of the IL sweep at one LL.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LlSummary {
    pub ll: f64,
    pub runs: usize,
    pub min: f64,
    pub max: f64,
    pub beta: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub records: Vec<SweepRecord>,
    pub per_ll: Vec<LlSummary>,
    /// `max` at the largest LL minus `max` at the smallest, when they differ.
    pub max_difference: Option<f64>,
}

/// Groups records carrying both IL and LL by LL (ascending) and computes
/// their summaries.
pub fn summarize_grid(records: &[&SweepRecord]) -> Result<(Vec<LlSummary>, Option<f64>)> {
    let mut by_ll: Vec<(f64, Vec<(f64, f64)>)> = Vec::new();
    for r in records {
        let (Some(ll), Some(il)) = (r.ll, r.il) else {
            continue;
        };
        match by_ll.iter_mut().find(|(l, _)| *l == ll) {
            Some((_, cells)) => cells.push((il, r.accuracy())),
            None => by_ll.push((ll, alloc::vec![(il, r.accuracy())])),
        }
    }
    by_ll.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out = Vec::with_capacity(by_ll.len());
    for (ll, cells) in by_ll {
        let accs: Vec<f64> = cells.iter().map(|c| c.1).collect();
        let (min, max) = min_max(&accs).expect("non-empty group");
        out.push(LlSummary {
            ll,
            runs: cells.len(),
            min,
            max,
            beta: beta(&accs)?,
            alpha: alpha(&cells)?,
        });
    }
    let diff = match (out.first(), out.last()) {
        (Some(a), Some(b)) if out.len() > 1 => Some(b.max - a.max),
        _ => None,
    };
    Ok((out, diff))
}

/// Runs every grid cell sequentially and summarizes per LL.
pub fn run_il_ll_grid(
    source_id: &str,
    source: &Checkpoint,
    task: &TargetTask,
    grid: &GridSpec,
    policy: &LrPolicy,
    settings: &RunSettings,
) -> Result<GridOutcome> {
    let jobs = grid_jobs(
        &source.meta.spec,
        &task.id,
        grid,
        policy,
        settings.master_seed,
    )?;
    let records = jobs
        .iter()
        .map(|j| run_job(j, source_id, source, task, settings).map(|(r, _)| r))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&SweepRecord> = records.iter().collect();
    let (per_ll, max_difference) = summarize_grid(&refs)?;
    Ok(GridOutcome {
        records,
        per_ll,
        max_difference,
    })
}

/// Per-task accuracy at every scale.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskScales {
    pub task: String,
    pub by_scale: Vec<(f64, f64)>,
}

fn argmax_scale(by_scale: &[(f64, f64)]) -> Option<(f64, f64)> {
    let mut best: Option<(f64, f64)> = None;
    for &(s, a) in by_scale {
        best = match best {
            Some((bs, ba)) if ba > a || (ba == a && bs <= s) => Some((bs, ba)),
            _ => Some((s, a)),
        };
    }
    best
}

fn check_complete(results: &[TaskScales]) -> Result<Vec<f64>> {
    let mut scales: Vec<f64> = results
        .iter()
        .flat_map(|t| t.by_scale.iter().map(|p| p.0))
        .collect();
    scales.sort_by(f64::total_cmp);
    scales.dedup();
    if results.is_empty() || scales.is_empty() {
        return Err(Error::MissingRecords("no scale records".into()));
    }
    for t in results {
        for s in &scales {
            let n = t.by_scale.iter().filter(|p| p.0 == *s).count();
            if n != 1 {
                return Err(Error::MissingRecords(format!(
                    "task `{}` has {n} records at scale {s}",
                    t.task
                )));
            }
        }
    }
    Ok(scales)
}

/// Mode of the per-task best scales; ties (in either step) go to the smaller scale.
pub fn most_frequent_best_scale(results: &[TaskScales]) -> Result<f64> {
    let scales = check_complete(results)?;
    let mut counts = alloc::vec![0usize; scales.len()];
    for t in results {
        let (s, _) = argmax_scale(&t.by_scale).expect("complete");
        counts[scales.iter().position(|&x| x == s).expect("known scale")] += 1;
    }
    let mut best = 0;
    for (i, &c) in counts.iter().enumerate() {
        if c > counts[best] {
            best = i;
        }
    }
    Ok(scales[best])
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ScaleSweepReport {
    pub tasks: usize,
    pub jobs: usize,
    pub per_scale_mean: Vec<(f64, f64)>,
    pub best_scale_per_task: Vec<(String, f64)>,
    /// Mean accuracy when each task uses its own best scale.
    pub best_per_task_mean: f64,
    pub most_frequent_best_scale: f64,
    /// Mean accuracy when every task uses the most frequent best scale.
    pub fixed_scale_mean: f64,
    pub worst_fixed_scale_mean: f64,
    /// Mean accuracy of the head-only baselines, when present.
    pub baseline_mean: Option<f64>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Aggregates scale and baseline records (other kinds are ignored).
pub fn analyze_scale_sweep(records: &[&SweepRecord]) -> Result<ScaleSweepReport> {
    let mut tasks: BTreeMap<&str, TaskScales> = BTreeMap::new();
    let mut baselines = Vec::new();
    let mut jobs = 0;
    for r in records {
        match (r.kind, r.scale) {
            (RecordKind::Scale, Some(scale)) => {
                jobs += 1;
                tasks
                    .entry(&r.task)
                    .or_insert_with(|| TaskScales {
                        task: r.task.clone(),
                        by_scale: Vec::new(),
                    })
                    .by_scale
                    .push((scale, r.accuracy()));
            }
            (RecordKind::Baseline, _) => baselines.push(r.accuracy()),
            _ => {}
        }
    }
    let results: Vec<TaskScales> = tasks.into_values().collect();
    let scales = check_complete(&results)?;
    let mfbs = most_frequent_best_scale(&results)?;
    let at = |t: &TaskScales, s: f64| t.by_scale.iter().find(|p| p.0 == s).expect("complete").1;
    let per_scale_mean: Vec<(f64, f64)> = scales
        .iter()
        .map(|&s| (s, mean(results.iter().map(|t| at(t, s)))))
        .collect();
    let best: Vec<(String, f64, f64)> = results
        .iter()
        .map(|t| {
            let (s, a) = argmax_scale(&t.by_scale).expect("complete");
            (t.task.clone(), s, a)
        })
        .collect();
    Ok(ScaleSweepReport {
        tasks: results.len(),
        jobs,
        best_per_task_mean: mean(best.iter().map(|b| b.2)),
        best_scale_per_task: best.into_iter().map(|(t, s, _)| (t, s)).collect(),
        most_frequent_best_scale: mfbs,
        fixed_scale_mean: per_scale_mean
            .iter()
            .find(|p| p.0 == mfbs)
            .expect("known")
            .1,
        worst_fixed_scale_mean: per_scale_mean
            .iter()
            .map(|p| p.1)
            .fold(f64::INFINITY, f64::min),
        per_scale_mean,
        baseline_mean: (!baselines.is_empty()).then(|| mean(baselines.into_iter())),
    })
}

/// Runs baseline and scale jobs for every task sequentially.
pub fn scale_sweep(
    source_id: &str,
    source: &Checkpoint,
    tasks: &[TargetTask],
    spec: &GraduatedSpec,
    policy: &LrPolicy,
    settings: &RunSettings,
) -> Result<(Vec<SweepRecord>, ScaleSweepReport)> {
    let ids: Vec<&str> = tasks.iter().map(|t| t.id.as_str()).collect();
    let mut jobs = baseline_jobs(&ids, spec, policy, settings.master_seed)?;
    jobs.extend(scale_jobs(&ids, spec, policy, settings.master_seed)?);
    let mut records = Vec::with_capacity(jobs.len());
    for job in &jobs {
        let task = tasks
            .iter()
            .find(|t| t.id == job.task)
            .expect("job built from task list");
        records.push(run_job(job, source_id, source, task, settings)?.0);
    }
    let refs: Vec<&SweepRecord> = records.iter().collect();
    let report = analyze_scale_sweep(&refs)?;
    Ok((records, report))
}
