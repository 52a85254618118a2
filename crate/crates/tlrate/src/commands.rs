//! Entry points behind the CLI subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use tlrate_core::data::{gen_synthetic_domain, partition_domain, split_train_val, LabeledDataset};
use tlrate_core::experiment::{
    baseline_jobs, graduated_schedule, grid_jobs, il_ll_schedule, ll_job, run_job, scale_jobs,
    FinetuneJob, RecordKind, RunSettings, SweepRecord, TargetTask,
};
use tlrate_core::model::{
    architecture_digest, build_staged_network, mini_staged_spec, Checkpoint, ModelSpec,
};
use tlrate_core::optim::{train, MultiplierSchedule, TrainConfig};
use tlrate_core::seed::{derive_seed, SeedPart};
use tlrate_core::Tensor;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{Command, FinetuneConfig, RunConfig, SweepKind};
use crate::dataset_io::{load_dataset, save_dataset};
use crate::error::{io_at, Error, Result};
use crate::ledger::{append_records, read_ledger};
use crate::report::{build_report, render_json, render_text, Report};
use crate::sweep::run_jobs;

pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";

/// Writes the effective configuration next to the ledger.
pub fn write_config_copy(cfg: &RunConfig) -> Result<PathBuf> {
    let ledger = cfg.ledger_path();
    let stem = ledger
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "ledger".into());
    let path = ledger.with_file_name(format!("{stem}.config.toml"));
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_at(dir))?;
    }
    fs::write(&path, cfg.to_toml()?).map_err(io_at(&path))?;
    Ok(path)
}

pub fn cmd_gen_data(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    cfg.validate(Command::GenData)?;
    let mut written = Vec::new();
    for g in &cfg.generate {
        let ds = gen_synthetic_domain(&g.spec())?;
        if g.partition {
            let p = partition_domain(&ds, g.seed)?;
            let parts = [
                ("source_train", &p.source_train),
                ("val_source", &p.val_source),
                ("val_target", &p.val_target),
                ("transfer_pool", &p.transfer_pool),
                ("target", &p.target),
            ];
            for (name, part) in parts {
                let dir = g.path.join(name);
                save_dataset(part, &dir)?;
                written.push(dir);
            }
        } else {
            save_dataset(&ds, &g.path)?;
            written.push(g.path.clone());
        }
    }
    Ok(written)
}

fn split(
    cfg: &RunConfig,
    id: &str,
    ds: &LabeledDataset,
) -> Result<(LabeledDataset, LabeledDataset)> {
    let seed = derive_seed(cfg.seed, &[SeedPart::Str(id), SeedPart::Str("split")]);
    Ok(split_train_val(ds, 1.0 - cfg.val_fraction, seed)?)
}

fn feature_shape(ds: &LabeledDataset) -> Result<Vec<usize>> {
    Ok(ds
        .feature_shape()
        .ok_or(tlrate_core::Error::EmptyDataset)?
        .to_vec())
}

/// Trains the source model and returns the checkpoint path.
pub fn cmd_train_source(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate(Command::TrainSource)?;
    let ds = load_dataset(cfg.paths.source.as_deref().expect("validated"))?;
    let (train_set, val_set) = split(cfg, &cfg.source_id, &ds)?;
    let spec = cfg.model.spec(&feature_shape(&ds)?, ds.num_labels())?;
    let model = build_staged_network(&spec, cfg.seed)?;
    let schedule = MultiplierSchedule::uniform(&model, 1.0);
    let tc = TrainConfig {
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        momentum: cfg.momentum,
    };
    let outcome = train(
        &model,
        &train_set,
        &val_set,
        &schedule,
        &cfg.source_policy,
        &tc,
    )?;
    let path = cfg.checkpoint_path();
    save_checkpoint(
        &outcome
            .best
            .to_checkpoint(cfg.source_policy.total_iterations),
        &path,
    )?;
    let record = SweepRecord {
        kind: RecordKind::Source,
        task: cfg.source_id.clone(),
        source: cfg.source_id.clone(),
        ll: None,
        il: None,
        scale: None,
        seed: cfg.seed,
        schedule,
        policy: cfg.source_policy,
        final_accuracy: outcome.final_accuracy,
        best_accuracy: outcome.best_accuracy,
        checkpoint: Some(path.display().to_string()),
    };
    append_records(&cfg.ledger_path(), &[record])?;
    write_config_copy(cfg)?;
    Ok(path)
}

/// Loads the source checkpoint and every target task, checking that the
/// configured architecture is the one the checkpoint holds.
fn load_inputs(cfg: &RunConfig) -> Result<(Checkpoint, Vec<TargetTask>)> {
    let ckpt = load_checkpoint(&cfg.checkpoint_path())?;
    let mut tasks = Vec::new();
    for (id, path) in cfg.task_ids().into_iter().zip(&cfg.paths.targets) {
        let ds = load_dataset(path)?;
        let expected = cfg.model.spec(&feature_shape(&ds)?, ds.num_labels())?;
        let digest = architecture_digest(&expected)?;
        if digest != ckpt.meta.digest {
            return Err(tlrate_core::Error::ArchitectureMismatch(format!(
                "task `{id}` needs architecture {digest} but the source checkpoint holds {}",
                ckpt.meta.digest
            ))
            .into());
        }
        let (train, val) = split(cfg, &id, &ds)?;
        tasks.push(TargetTask { id, train, val });
    }
    Ok((ckpt, tasks))
}

fn settings(cfg: &RunConfig) -> RunSettings {
    RunSettings {
        batch_size: cfg.batch_size,
        momentum: cfg.momentum,
        master_seed: cfg.seed,
    }
}

pub fn finetune_job(
    cfg: &RunConfig,
    f: &FinetuneConfig,
    spec: &ModelSpec,
    task: &str,
) -> Result<FinetuneJob> {
    let seed = derive_seed(cfg.seed, &[SeedPart::Str(task), SeedPart::Str("finetune")]);
    let policy = cfg.target_policy();
    let job = |ll, il, scale, schedule, policy| FinetuneJob {
        kind: RecordKind::Finetune,
        task: task.into(),
        ll,
        il,
        scale,
        seed,
        schedule,
        policy,
    };
    Ok(match (f.il, f.ll, f.scale) {
        (None, None, Some(scale)) => job(
            Some(f.graduated.head_multiplier),
            None,
            Some(scale),
            graduated_schedule(&f.graduated, scale)?,
            policy,
        ),
        (Some(il), Some(ll), None) if ll > 0.0 => job(
            Some(ll),
            Some(il),
            None,
            il_ll_schedule(spec, il, ll),
            policy.with_base_lr(ll),
        ),
        (Some(il), Some(ll), None) => {
            // Rates are given directly as multipliers of a unit base rate.
            let head = spec.head_name().unwrap_or_default();
            let schedule = MultiplierSchedule::new(
                spec.stage_names()
                    .map(|s| (s, if s == head { ll } else { il })),
                1.0,
            );
            job(Some(ll), Some(il), None, schedule, policy.with_base_lr(1.0))
        }
        _ => {
            return Err(Error::Config(vec![
                "finetune: set both `il` and `ll`, or only `scale`".into(),
            ]))
        }
    })
}

/// One finetuning run per target task; records are appended to the ledger.
pub fn cmd_finetune(cfg: &RunConfig) -> Result<Vec<SweepRecord>> {
    cfg.validate(Command::Finetune)?;
    let f = cfg.finetune.as_ref().expect("validated");
    let (ckpt, tasks) = load_inputs(cfg)?;
    let settings = settings(cfg);
    let mut records = Vec::new();
    for task in &tasks {
        let job = finetune_job(cfg, f, &ckpt.meta.spec, &task.id)?;
        let (mut record, outcome) = run_job(&job, &cfg.source_id, &ckpt, task, &settings)?;
        if f.save_checkpoint {
            let rel = PathBuf::from("checkpoints").join(format!("finetune-{}.ftlb", task.id));
            save_checkpoint(
                &outcome.best.to_checkpoint(job.policy.total_iterations),
                &cfg.paths.out.join(&rel),
            )?;
            record.checkpoint = Some(rel.display().to_string());
        }
        records.push(record);
    }
    append_records(&cfg.ledger_path(), &records)?;
    write_config_copy(cfg)?;
    Ok(records)
}

pub fn sweep_jobs(cfg: &RunConfig, spec: &ModelSpec) -> Result<Vec<FinetuneJob>> {
    let s = cfg
        .sweep
        .as_ref()
        .ok_or_else(|| Error::Config(vec!["sweep: section missing".into()]))?;
    let policy = cfg.target_policy();
    let ids = cfg.task_ids();
    let mut jobs = Vec::new();
    match s.kind {
        SweepKind::LastLayer => {
            for id in &ids {
                for &ll in &s.ll_values {
                    jobs.push(ll_job(spec, id, ll, &policy, cfg.seed)?);
                }
            }
        }
        SweepKind::Grid => {
            for id in &ids {
                jobs.extend(grid_jobs(spec, id, &s.grid, &policy, cfg.seed)?);
            }
        }
        SweepKind::Scale => {
            let refs: Vec<&str> = ids.iter().map(String::as_str).collect();
            if s.baseline {
                jobs = baseline_jobs(&refs, &s.graduated, &policy, cfg.seed)?;
            }
            jobs.extend(scale_jobs(&refs, &s.graduated, &policy, cfg.seed)?);
        }
    }
    Ok(jobs)
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub records: Vec<SweepRecord>,
    pub failures: Vec<String>,
    pub report: Report,
}

/// Runs all sweep jobs on the worker pool, appends their records in job
/// order and writes the report over the whole ledger.
pub fn cmd_sweep(cfg: &RunConfig) -> Result<SweepOutcome> {
    cfg.validate(Command::Sweep)?;
    let (ckpt, tasks) = load_inputs(cfg)?;
    let jobs = sweep_jobs(cfg, &ckpt.meta.spec)?;
    let keep = cfg.sweep.as_ref().is_some_and(|s| s.save_checkpoints);
    let results = run_jobs(
        &jobs,
        &cfg.source_id,
        &ckpt,
        &tasks,
        &settings(cfg),
        cfg.workers,
        keep,
    );
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(mut done) => {
                if let Some(ck) = done.checkpoint.take() {
                    let rel = PathBuf::from("checkpoints")
                        .join("jobs")
                        .join(format!("{i:04}-{}.ftlb", done.record.task));
                    save_checkpoint(&ck, &cfg.paths.out.join(&rel))?;
                    done.record.checkpoint = Some(rel.display().to_string());
                }
                records.push(done.record);
            }
            Err(e) => failures.push(e),
        }
    }
    let ledger_path = cfg.ledger_path();
    append_records(&ledger_path, &records)?;
    write_config_copy(cfg)?;
    let ledger = read_ledger(&ledger_path)?;
    let report = build_report(&ledger.records, &failures, ledger.skipped)?;
    write_report(&report, &cfg.paths.out)?;
    Ok(SweepOutcome {
        records,
        failures,
        report,
    })
}

pub fn write_report(report: &Report, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(io_at(dir))?;
    for (name, body) in [
        (REPORT_TEXT, render_text(report)),
        (REPORT_JSON, render_json(report)),
    ] {
        let p = dir.join(name);
        fs::write(&p, body).map_err(io_at(&p))?;
    }
    Ok(())
}

/// Recomputes the report from a ledger, writing it to `out` when given.
pub fn cmd_report(ledger: &Path, out: Option<&Path>) -> Result<Report> {
    let l = read_ledger(ledger)?;
    let report = build_report(&l.records, &[], l.skipped)?;
    if let Some(dir) = out {
        write_report(&report, dir)?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub params: usize,
    pub max_relative_error: f64,
}

pub const GRAD_CHECK_EPSILON: f64 = 1e-5;

/// Finite-difference check of the built-in layout on a random batch.
pub fn cmd_grad_check(width: usize, seed: u64) -> Result<GradCheck> {
    let spec = mini_staged_spec([1, 4, 4], width, true, 3);
    let model = build_staged_network(&spec, seed)?;
    let batch_seed = derive_seed(seed, &[SeedPart::Str("grad-check")]);
    let data: Vec<f64> = (0..4 * 16)
        .map(|i| {
            let h = derive_seed(batch_seed, &[SeedPart::U64(i)]);
            (h >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        })
        .collect();
    let batch = Tensor::new(vec![4, 1, 4, 4], data)?;
    let max_relative_error = model.grad_check(&batch, &[0, 1, 2, 0], GRAD_CHECK_EPSILON)?;
    Ok(GradCheck {
        params: model.param_count(),
        max_relative_error,
    })
}
