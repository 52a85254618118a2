use proptest::prelude::*;
use tlrate_core::data::{
    gen_synthetic_domain, split_train_val, LabeledDataset, SyntheticDomainSpec,
};
use tlrate_core::model::{
    build_staged_network, mini_staged_spec, transfer_init, ModelSpec, StageSpec, StagedModel,
};
use tlrate_core::nn::{ForwardCache, Gradients, LayerSpec};
use tlrate_core::optim::{
    accuracy, effective_lr, sgd_step, train, LrPolicy, MultiplierSchedule, SgdState, TrainConfig,
    DEFAULT_GAMMA,
};
use tlrate_core::{Error, Tensor};

fn domain(labels: usize, per_label: usize, seed: u64) -> (LabeledDataset, LabeledDataset) {
    let ds =
        gen_synthetic_domain(&SyntheticDomainSpec::new("d", labels, per_label, 0.5, seed)).unwrap();
    split_train_val(&ds, 0.75, seed).unwrap()
}

fn net(labels: usize, seed: u64) -> StagedModel {
    build_staged_network(&mini_staged_spec([1, 8, 8], 2, true, labels), seed).unwrap()
}

fn single_weight() -> StagedModel {
    let spec = ModelSpec {
        input_shape: vec![1],
        stages: vec![StageSpec::new("fc", vec![LayerSpec::Dense { outputs: 1 }])],
        num_labels: 1,
    };
    build_staged_network(&spec, 3).unwrap()
}

fn fixed_grads(model: &StagedModel, value: f64) -> Gradients {
    Gradients {
        tensors: model
            .params()
            .iter()
            .map(|p| Tensor::new(p.shape().to_vec(), vec![value; p.len()]).unwrap())
            .collect(),
    }
}

#[test]
fn plain_step_without_momentum() {
    let mut model = single_weight();
    let w0 = model.params()[0].data()[0];
    let policy = LrPolicy::new(0.05, 10, DEFAULT_GAMMA, 10).unwrap();
    let schedule = MultiplierSchedule::uniform(&model, 1.0);
    let mut state = SgdState::new(&model, 0.0).unwrap();
    let g = 0.37;
    let grads = fixed_grads(&model, g);
    sgd_step(&mut model, &grads, &mut state, &schedule, &policy, 0).unwrap();
    assert_eq!(model.params()[0].data()[0], w0 - 0.05 * g);
}

#[test]
fn two_momentum_steps_unroll() {
    let mut model = single_weight();
    let w0 = model.params()[0].data()[0];
    let (eta, g) = (0.05, 0.37);
    let policy = LrPolicy::new(eta, 10, DEFAULT_GAMMA, 10).unwrap();
    let schedule = MultiplierSchedule::uniform(&model, 1.0);
    let mut state = SgdState::new(&model, 0.9).unwrap();
    let grads = fixed_grads(&model, g);
    sgd_step(&mut model, &grads, &mut state, &schedule, &policy, 0).unwrap();
    sgd_step(&mut model, &grads, &mut state, &schedule, &policy, 1).unwrap();
    let expect = w0 - eta * g - (0.9 * eta * g + eta * g);
    assert!((model.params()[0].data()[0] - expect).abs() < 1e-15);
}

#[test]
fn sgd_rejects_mismatched_gradients() {
    let mut model = single_weight();
    let policy = LrPolicy::new(0.05, 10, DEFAULT_GAMMA, 10).unwrap();
    let schedule = MultiplierSchedule::uniform(&model, 1.0);
    let mut state = SgdState::new(&model, 0.0).unwrap();
    let bad = Gradients {
        tensors: vec![Tensor::zeros(&[2, 2]), Tensor::zeros(&[1])],
    };
    assert!(matches!(
        sgd_step(&mut model, &bad, &mut state, &schedule, &policy, 0),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn zero_multipliers_freeze_everything() {
    let (tr, _) = domain(3, 8, 1);
    let mut model = net(3, 2);
    let before = model.clone();
    let policy = LrPolicy::new(0.1, 50, DEFAULT_GAMMA, 100).unwrap();
    let schedule = MultiplierSchedule::uniform(&model, 0.0);
    let mut state = SgdState::new(&model, 0.9).unwrap();
    let mut cache = ForwardCache::default();
    let idx: Vec<usize> = (0..8).collect();
    let (x, y) = tr.batch(&idx).unwrap();
    for it in 0..100 {
        model.forward(&x, &y, &mut cache).unwrap();
        let g = model.backward(&cache).unwrap();
        sgd_step(&mut model, &g, &mut state, &schedule, &policy, it).unwrap();
    }
    assert_eq!(model.params(), before.params());
    assert!(state
        .velocities
        .iter()
        .all(|v| v.data().iter().all(|&x| x == 0.0)));
}

#[test]
fn all_frozen_training_keeps_initial_accuracy() {
    let (tr, va) = domain(3, 12, 4);
    let model = net(3, 5);
    let policy = LrPolicy::new(0.1, 20, DEFAULT_GAMMA, 40).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        seed: 1,
        momentum: 0.9,
    };
    let out = train(
        &model,
        &tr,
        &va,
        &MultiplierSchedule::uniform(&model, 0.0),
        &policy,
        &cfg,
    )
    .unwrap();
    let initial = accuracy(&model, &va).unwrap();
    assert_eq!(out.final_accuracy, initial);
    assert_eq!(out.best.params(), model.params());
}

#[test]
fn inner_freeze_with_transfer_keeps_inner_bytes() {
    let (tr, va) = domain(4, 12, 8);
    let source = net(6, 9).to_checkpoint(0);
    let model = transfer_init(&source, 4, 3).unwrap();
    let policy = LrPolicy::new(0.05, 30, DEFAULT_GAMMA, 60).unwrap();
    let cfg = TrainConfig {
        batch_size: 8,
        seed: 2,
        momentum: 0.9,
    };
    let schedule = MultiplierSchedule::inner_head(&model, 0.0, 1.0);
    let out = train(&model, &tr, &va, &schedule, &policy, &cfg).unwrap();
    let head = out.last.head().params.clone();
    for slot in 0..head.start {
        let a: Vec<u64> = out.last.params()[slot]
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        let b: Vec<u64> = source.tensors[slot]
            .1
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(a, b);
    }
    assert_ne!(out.last.params()[head.start], model.params()[head.start]);
}

#[test]
fn fixed_seed_training_is_reproducible() {
    let (tr, va) = domain(3, 12, 11);
    let model = net(3, 12);
    let policy = LrPolicy::new(0.05, 20, DEFAULT_GAMMA, 50).unwrap();
    let cfg = TrainConfig {
        batch_size: 5,
        seed: 7,
        momentum: 0.9,
    };
    let s = MultiplierSchedule::uniform(&model, 1.0);
    let a = train(&model, &tr, &va, &s, &policy, &cfg).unwrap();
    let b = train(&model, &tr, &va, &s, &policy, &cfg).unwrap();
    assert_eq!(a.best.params(), b.best.params());
    assert_eq!(a.last.params(), b.last.params());
    assert_eq!(a.trace, b.trace);
    assert!(a.trace.iter().all(|p| p.accuracy <= a.best_accuracy));
}

#[test]
fn target_policy_trace_scales_with_iterations() {
    let (tr, va) = domain(2, 8, 3);
    let model = net(2, 1);
    let source = LrPolicy::new(0.01, 300, DEFAULT_GAMMA, 900).unwrap();
    let target = source.for_target();
    assert_eq!((target.total_iterations, target.step_size), (90, 30));
    let s = MultiplierSchedule::uniform(&model, 0.0);
    let cfg = TrainConfig {
        batch_size: 2,
        seed: 0,
        momentum: 0.0,
    };
    let a = train(&model, &tr, &va, &s, &source, &cfg).unwrap();
    let b = train(&model, &tr, &va, &s, &target, &cfg).unwrap();
    assert_eq!(a.trace.len(), 30);
    assert_eq!(b.trace.len(), 30);
    assert_eq!(a.trace.last().unwrap().iteration, 900);
    assert_eq!(b.trace.last().unwrap().iteration, 90);
}

#[test]
fn train_validates_inputs() {
    let (tr, va) = domain(2, 8, 3);
    let model = net(2, 1);
    let p = LrPolicy::new(0.01, 3, DEFAULT_GAMMA, 9).unwrap();
    let s = MultiplierSchedule::uniform(&model, 1.0);
    let cfg = TrainConfig {
        batch_size: 2,
        seed: 0,
        momentum: 0.0,
    };
    let empty = LabeledDataset {
        examples: vec![],
        ..va.clone()
    };
    assert!(train(&model, &tr, &empty, &s, &p, &cfg).is_err());
    let big = TrainConfig {
        batch_size: tr.len() + 1,
        ..cfg
    };
    assert!(train(&model, &tr, &va, &s, &p, &big).is_err());
    let mut missing = s.clone();
    missing.stage_multipliers.remove("conv3");
    assert_eq!(
        train(&model, &tr, &va, &missing, &p, &cfg).unwrap_err(),
        Error::MissingMultiplier("conv3".into())
    );
    let mut extra = s.clone();
    extra.stage_multipliers.insert("conv9".into(), 1.0);
    assert_eq!(
        train(&model, &tr, &va, &extra, &p, &cfg).unwrap_err(),
        Error::UnknownStage("conv9".into())
    );
}

#[test]
fn rescaled_multipliers_give_the_same_trajectory() {
    let (tr, va) = domain(3, 10, 21);
    let model = net(3, 22);
    let cfg = TrainConfig {
        batch_size: 4,
        seed: 3,
        momentum: 0.0,
    };
    let base = LrPolicy::new(0.02, 10, DEFAULT_GAMMA, 30).unwrap();
    let m = MultiplierSchedule::new(
        [
            ("conv1", 0.0),
            ("conv2", 0.5),
            ("conv3", 1.0),
            ("conv4", 2.0),
            ("conv5", 4.0),
            ("fc", 8.0),
        ],
        1.0,
    );
    for c in [0.25, 3.0, 10.0] {
        let scaled = MultiplierSchedule::new(
            m.stage_multipliers.iter().map(|(k, v)| (k.clone(), v / c)),
            1.0,
        );
        let a = train(&model, &tr, &va, &m, &base, &cfg).unwrap();
        let b = train(
            &model,
            &tr,
            &va,
            &scaled,
            &base.with_base_lr(base.base_lr * c),
            &cfg,
        )
        .unwrap();
        for (x, y) in a.last.params().iter().zip(b.last.params()) {
            for (u, v) in x.data().iter().zip(y.data()) {
                assert!(
                    (u - v).abs() <= 1e-9 * u.abs().max(1e-12),
                    "c={c}: {u} vs {v}"
                );
            }
        }
    }
}

proptest! {
    #[test]
    fn scale_is_linear(base in 1e-5f64..1.0, mult in 0.0f64..20.0, s in 0.01f64..10.0, k in 0.1f64..10.0, it in 0u64..900) {
        let p = LrPolicy::new(base, 300, DEFAULT_GAMMA, 900).unwrap();
        let a = effective_lr(&p, it, mult, k * s).unwrap();
        let b = k * effective_lr(&p, it, mult, s).unwrap();
        prop_assert!((a - b).abs() <= 1e-14 * a.abs().max(1e-300));
    }

    #[test]
    fn schedule_is_non_increasing(base in 1e-5f64..1.0, step in 1u64..50, gamma in 0.01f64..=1.0, it in 0u64..998) {
        let p = LrPolicy::new(base, step, gamma, 1000).unwrap();
        prop_assert!(p.lr_at(it + 1).unwrap() <= p.lr_at(it).unwrap());
    }
}
