//! Worker pool for independent finetuning jobs.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use tlrate_core::experiment::{run_job, FinetuneJob, RunSettings, SweepRecord, TargetTask};
use tlrate_core::model::Checkpoint;

/// Applies `f` to every item on up to `workers` threads. Results come back
/// in item order; a panicking call yields `Err` with the panic message.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<Result<R, String>>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &T) -> R + Sync,
{
    let slots: Vec<Mutex<Option<Result<R, String>>>> =
        items.iter().map(|_| Mutex::new(None)).collect();
    let next = AtomicUsize::new(0);
    let run = || loop {
        let i = next.fetch_add(1, Ordering::Relaxed);
        let Some(item) = items.get(i) else { break };
        let out = catch_unwind(AssertUnwindSafe(|| f(i, item))).map_err(|p| {
            p.downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "job panicked".into())
        });
        *slots[i].lock().expect("slot lock") = Some(out);
    };
    let workers = workers.clamp(1, items.len().max(1));
    thread::scope(|s| {
        for _ in 1..workers {
            s.spawn(run);
        }
        run();
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .expect("slot lock")
                .expect("every slot is filled")
        })
        .collect()
}

pub struct JobResult {
    pub record: SweepRecord,
    /// Best model of the run, when requested.
    pub checkpoint: Option<Checkpoint>,
}

/// Runs `jobs` against `tasks`; failures are reported as strings naming the job.
pub fn run_jobs(
    jobs: &[FinetuneJob],
    source_id: &str,
    source: &Checkpoint,
    tasks: &[TargetTask],
    settings: &RunSettings,
    workers: usize,
    keep_checkpoints: bool,
) -> Vec<Result<JobResult, String>> {
    parallel_map(jobs, workers, |_, job| {
        let task = tasks
            .iter()
            .find(|t| t.id == job.task)
            .ok_or_else(|| format!("unknown task `{}`", job.task))?;
        let (record, outcome) =
            run_job(job, source_id, source, task, settings).map_err(|e| e.to_string())?;
        let checkpoint =
            keep_checkpoints.then(|| outcome.best.to_checkpoint(job.policy.total_iterations));
        Ok(JobResult { record, checkpoint })
    })
    .into_iter()
    .zip(jobs)
    .map(|(r, job)| {
        r.and_then(|x| x)
            .map_err(|e| format!("{}: {e}", describe(job)))
    })
    .collect()
}

pub fn describe(job: &FinetuneJob) -> String {
    let mut s = format!("{:?} task={}", job.kind, job.task);
    if let Some(ll) = job.ll {
        s.push_str(&format!(" ll={ll}"));
    }
    if let Some(il) = job.il {
        s.push_str(&format!(" il={il}"));
    }
    if let Some(scale) = job.scale {
        s.push_str(&format!(" scale={scale}"));
    }
    s
}
