//! Step-decay learning-rate policy, per-stage multipliers and momentum SGD.
//!
//! The learning rate applied to a stage at iteration `i` is
//! `base_lr * gamma^(i / step_size) * multiplier(stage) * scale`. A stage
//! whose effective rate is zero is frozen: neither its parameters nor its
//! velocities are touched.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::model::StagedModel;
use crate::nn::{ForwardCache, Gradients};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LrPolicy {
    pub base_lr: f64,
    pub step_size: u64,
    pub gamma: f64,
    pub total_iterations: u64,
}

/// Decay factor applied at every step boundary.
pub const DEFAULT_GAMMA: f64 = 0.1;

impl LrPolicy {
    pub fn new(base_lr: f64, step_size: u64, gamma: f64, total_iterations: u64) -> Result<Self> {
        let p = Self {
            base_lr,
            step_size,
            gamma,
            total_iterations,
        };
        p.validate()?;
        Ok(p)
    }

    /// Source-model training: 900k iterations, steps of 300k, initial rate 0.01.
    pub fn source_default() -> Self {
        Self {
            base_lr: 0.01,
            step_size: 300_000,
            gamma: DEFAULT_GAMMA,
            total_iterations: 900_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(invalid(
                "base_lr",
                format!("{} must be positive", self.base_lr),
            ));
        }
        if self.step_size == 0 {
            return Err(invalid("step_size", "must be positive"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(invalid("gamma", format!("{} not in (0, 1]", self.gamma)));
        }
        if self.total_iterations == 0 {
            return Err(invalid("total_iterations", "must be positive"));
        }
        Ok(())
    }

    /// Target-model policy: one tenth of both iterations and step size.
    pub fn for_target(&self) -> Self {
        Self {
            step_size: (self.step_size / 10).max(1),
            total_iterations: (self.total_iterations / 10).max(1),
            ..*self
        }
    }

    pub fn with_base_lr(&self, base_lr: f64) -> Self {
        Self { base_lr, ..*self }
    }

    pub fn lr_at(&self, iteration: u64) -> Result<f64> {
        if iteration >= self.total_iterations {
            return Err(Error::IterationOutOfRange {
                iteration,
                total: self.total_iterations,
            });
        }
        let decays = iteration / self.step_size;
        Ok(self.base_lr * libm::pow(self.gamma, decays as f64))
    }

    /// Validation accuracy is measured every `step_size / 10` iterations
    /// (at least every iteration) and after the last one.
    pub fn eval_interval(&self) -> u64 {
        (self.step_size / 10).max(1)
    }

    /// Iteration counts (1-based, i.e. after that many steps) at which
    /// accuracy is evaluated.
    pub fn eval_points(&self) -> Vec<u64> {
        let every = self.eval_interval();
        let mut points: Vec<u64> = (1..=self.total_iterations / every)
            .map(|k| k * every)
            .collect();
        if points.last() != Some(&self.total_iterations) {
            points.push(self.total_iterations);
        }
        points
    }
}

pub fn lr_at(policy: &LrPolicy, iteration: u64) -> Result<f64> {
    policy.lr_at(iteration)
}

pub fn effective_lr(
    policy: &LrPolicy,
    iteration: u64,
    stage_multiplier: f64,
    scale: f64,
) -> Result<f64> {
    if !(stage_multiplier >= 0.0 && stage_multiplier.is_finite()) {
        return Err(invalid(
            "stage_multiplier",
            format!("{stage_multiplier} must be non-negative"),
        ));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(invalid("scale", format!("{scale} must be positive")));
    }
    Ok(policy.lr_at(iteration)? * stage_multiplier * scale)
}

/// Per-stage learning-rate multipliers and a global scale on top of them.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MultiplierSchedule {
    pub stage_multipliers: BTreeMap<String, f64>,
    pub scale: f64,
}

impl MultiplierSchedule {
    pub fn new<I, S>(multipliers: I, scale: f64) -> Self
    where
        I: IntoIterator<Item = (S, f64)>,
        S: Into<String>,
    {
        Self {
            stage_multipliers: multipliers
                .into_iter()
                .map(|(s, m)| (s.into(), m))
                .collect(),
            scale,
        }
    }

    /// The same multiplier on every stage of `model`.
    pub fn uniform(model: &StagedModel, multiplier: f64) -> Self {
        Self::new(
            model.stages().iter().map(|s| (s.name.clone(), multiplier)),
            1.0,
        )
    }

    /// `inner` on every inner stage and `head` on the head.
    pub fn inner_head(model: &StagedModel, inner: f64, head: f64) -> Self {
        let head_name = &model.head().name;
        Self::new(
            model.stages().iter().map(|s| {
                (
                    s.name.clone(),
                    if &s.name == head_name { head } else { inner },
                )
            }),
            1.0,
        )
    }

    pub fn multiplier(&self, stage: &str) -> Option<f64> {
        self.stage_multipliers.get(stage).copied()
    }

    /// Multipliers with the scale folded in.
    pub fn effective_multipliers(&self) -> BTreeMap<String, f64> {
        self.stage_multipliers
            .iter()
            .map(|(k, v)| (k.clone(), v * self.scale))
            .collect()
    }

    /// Every stage of `model` has exactly one non-negative multiplier.
    pub fn validate_for(&self, model: &StagedModel) -> Result<()> {
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(invalid("scale", format!("{} must be positive", self.scale)));
        }
        for s in model.stages() {
            let m = self
                .multiplier(&s.name)
                .ok_or_else(|| Error::MissingMultiplier(s.name.clone()))?;
            if !(m >= 0.0 && m.is_finite()) {
                return Err(invalid("stage_multiplier", format!("{m} for `{}`", s.name)));
            }
        }
        if let Some(extra) = self
            .stage_multipliers
            .keys()
            .find(|k| !model.stages().iter().any(|s| &&s.name == k))
        {
            return Err(Error::UnknownStage(extra.clone()));
        }
        Ok(())
    }
}

/// Momentum coefficient used when none is configured.
pub const DEFAULT_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    pub momentum: f64,
    pub velocities: Vec<Tensor>,
}

impl SgdState {
    pub fn new(model: &StagedModel, momentum: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&momentum) {
            return Err(invalid("momentum", format!("{momentum} not in [0, 1)")));
        }
        Ok(Self {
            momentum,
            velocities: model
                .params()
                .iter()
                .map(|p| Tensor::zeros(p.shape()))
                .collect(),
        })
    }
}

/// One momentum-SGD update: `v <- mu*v - lr*g; w <- w + v`, per stage.
pub fn sgd_step(
    model: &mut StagedModel,
    grads: &Gradients,
    state: &mut SgdState,
    schedule: &MultiplierSchedule,
    policy: &LrPolicy,
    iteration: u64,
) -> Result<()> {
    if grads.tensors.len() != model.params().len() || state.velocities.len() != model.params().len()
    {
        return Err(Error::ShapeMismatch {
            stage: model.stages()[0].name.clone(),
            reason: "gradient or velocity count differs from parameter count".into(),
        });
    }
    let ranges: Vec<(String, core::ops::Range<usize>)> = model
        .stages()
        .iter()
        .map(|s| (s.name.clone(), s.params.clone()))
        .collect();
    for (name, range) in ranges {
        let m = schedule
            .multiplier(&name)
            .ok_or_else(|| Error::MissingMultiplier(name.clone()))?;
        let lr = effective_lr(policy, iteration, m, schedule.scale)?;
        if lr == 0.0 {
            continue;
        }
        for slot in range {
            let g = &grads.tensors[slot];
            let w = &mut model.params_mut()[slot];
            let v = &mut state.velocities[slot];
            if g.shape() != w.shape() || v.shape() != w.shape() {
                return Err(Error::ShapeMismatch {
                    stage: name,
                    reason: format!("gradient {:?} vs parameter {:?}", g.shape(), w.shape()),
                });
            }
            let mu = state.momentum;
            for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
                *vi = mu * *vi - lr * gi;
                *wi += *vi;
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct TrainConfig {
    pub batch_size: usize,
    pub seed: u64,
    pub momentum: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EvalPoint {
    pub iteration: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the evaluation point with the highest accuracy
    /// (earliest on ties).
    pub best: StagedModel,
    pub last: StagedModel,
    pub trace: Vec<EvalPoint>,
    pub best_accuracy: f64,
    pub best_iteration: u64,
    pub final_accuracy: f64,
}

/// Top-1 accuracy of `model` on `ds` (first maximum wins).
pub fn accuracy(model: &StagedModel, ds: &LabeledDataset) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(256) {
        let (x, y) = ds.batch(chunk)?;
        let scores = model.predict(&x)?;
        for (r, &label) in y.iter().enumerate() {
            let row = scores.row(r);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = c;
                }
            }
            correct += usize::from(best == label);
        }
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// Seeded reshuffling minibatch iterator; incomplete tail batches are dropped.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    batch: usize,
    rng: ChaCha8Rng,
}

impl Batcher {
    fn new(n: usize, batch: usize, seed: u64) -> Self {
        let mut b = Self {
            order: (0..n).collect(),
            pos: n,
            batch,
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        b.reshuffle();
        b
    }

    fn reshuffle(&mut self) {
        self.order.sort_unstable();
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn next(&mut self) -> &[usize] {
        if self.pos + self.batch > self.order.len() {
            self.reshuffle();
        }
        let s = &self.order[self.pos..self.pos + self.batch];
        self.pos += self.batch;
        s
    }
}

/// Runs `policy.total_iterations` SGD steps and tracks validation accuracy.
pub fn train(
    model: &StagedModel,
    train_set: &LabeledDataset,
    val_set: &LabeledDataset,
    schedule: &MultiplierSchedule,
    policy: &LrPolicy,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    policy.validate()?;
    schedule.validate_for(model)?;
    if train_set.is_empty() {
        return Err(invalid("train_set", "empty"));
    }
    if val_set.is_empty() {
        return Err(invalid("val_set", "empty"));
    }
    if cfg.batch_size == 0 || cfg.batch_size > train_set.len() {
        return Err(invalid(
            "batch_size",
            format!("{} not in [1, {}]", cfg.batch_size, train_set.len()),
        ));
    }
    let mut model = model.clone();
    let mut state = SgdState::new(&model, cfg.momentum)?;
    let mut batcher = Batcher::new(train_set.len(), cfg.batch_size, cfg.seed);
    let points = policy.eval_points();
    let mut next_point = points.iter().peekable();
    let mut cache = ForwardCache::default();
    let mut trace = Vec::with_capacity(points.len());
    let mut best: Option<(f64, u64, StagedModel)> = None;

    for it in 0..policy.total_iterations {
        let (x, y) = train_set.batch(batcher.next())?;
        model.forward(&x, &y, &mut cache)?;
        let grads = model.backward(&cache)?;
        sgd_step(&mut model, &grads, &mut state, schedule, policy, it)?;
        if next_point.peek() == Some(&&(it + 1)) {
            next_point.next();
            let acc = accuracy(&model, val_set)?;
            trace.push(EvalPoint {
                iteration: it + 1,
                accuracy: acc,
            });
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, it + 1, model.clone()));
            }
        }
    }
    let (best_accuracy, best_iteration, best_model) = best.expect("at least one evaluation point");
    Ok(TrainOutcome {
        best: best_model,
        final_accuracy: trace.last().map_or(0.0, |p| p.accuracy),
        last: model,
        trace,
        best_accuracy,
        best_iteration,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn policy(base: f64) -> LrPolicy {
        LrPolicy::new(base, 300_000, DEFAULT_GAMMA, 900_000).unwrap()
    }

    #[test]
    fn step_decay_values() {
        let p = policy(0.01);
        assert_eq!(p.lr_at(0).unwrap(), 0.01);
        assert_eq!(p.lr_at(299_999).unwrap(), 0.01);
        assert!((p.lr_at(300_000).unwrap() - 0.001).abs() <= 1e-18);
        assert!(p.lr_at(900_000).is_err());
    }

    #[test]
    fn effective_lr_examples() {
        let p = policy(0.001);
        assert_eq!(effective_lr(&p, 0, 2.0, 0.5).unwrap(), 0.001);
        assert_eq!(effective_lr(&p, 0, 0.0, 7.0).unwrap(), 0.0);
        assert!((effective_lr(&p, 0, 8.0, 10.0).unwrap() - 0.08).abs() < 1e-17);
        assert!(effective_lr(&p, 0, -1.0, 1.0).is_err());
        assert!(effective_lr(&p, 0, 1.0, 0.0).is_err());
    }

    #[test]
    fn target_policy_is_one_tenth() {
        let t = LrPolicy::source_default().for_target();
        assert_eq!((t.total_iterations, t.step_size), (90_000, 30_000));
        assert_eq!(t.base_lr, 0.01);
    }

    #[test]
    fn eval_points_cover_final_iteration() {
        let p = LrPolicy::new(0.1, 25, 0.1, 12).unwrap();
        assert_eq!(p.eval_points(), vec![2, 4, 6, 8, 10, 12]);
        let p = LrPolicy::new(0.1, 30, 0.1, 95).unwrap();
        assert_eq!(*p.eval_points().last().unwrap(), 95);
        assert_eq!(p.eval_points().len(), 32);
    }

    #[test]
    fn policy_rejects_bad_fields() {
        assert!(LrPolicy::new(0.0, 1, 0.1, 1).is_err());
        assert!(LrPolicy::new(0.1, 0, 0.1, 1).is_err());
        assert!(LrPolicy::new(0.1, 1, 1.5, 1).is_err());
        assert!(LrPolicy::new(0.1, 1, 0.1, 0).is_err());
    }
}
