//! Forward values against a hand-rolled scalar oracle, and analytic
//! gradients against central finite differences for every layer kind.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tlrate_core::model::{build_staged_network, ModelSpec, StageSpec};
use tlrate_core::nn::{ForwardCache, LayerSpec};
use tlrate_core::{Error, Tensor};

fn random_batch(shape: &[usize], n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut full = vec![n];
    full.extend_from_slice(shape);
    let len = full.iter().product();
    Tensor::new(
        full,
        (0..len).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

fn two_layer(inputs: usize, hidden: usize, labels: usize) -> ModelSpec {
    ModelSpec {
        input_shape: vec![inputs],
        stages: vec![
            StageSpec::new(
                "hidden",
                vec![LayerSpec::Dense { outputs: hidden }, LayerSpec::Relu],
            ),
            StageSpec::new("fc", vec![LayerSpec::Dense { outputs: labels }]),
        ],
        num_labels: labels,
    }
}

/// Straight scalar loops, independent of the batched kernels.
fn oracle_loss(
    w1: &[f64],
    b1: &[f64],
    w2: &[f64],
    b2: &[f64],
    x: &[f64],
    labels: &[usize],
    d: usize,
    h: usize,
    c: usize,
) -> f64 {
    let n = labels.len();
    let mut total = 0.0;
    for r in 0..n {
        let mut hid = vec![0.0; h];
        for j in 0..h {
            let mut s = b1[j];
            for i in 0..d {
                s += w1[i * h + j] * x[r * d + i];
            }
            hid[j] = if s > 0.0 { s } else { 0.0 };
        }
        let mut logits = vec![0.0; c];
        for k in 0..c {
            let mut s = b2[k];
            for j in 0..h {
                s += w2[j * c + k] * hid[j];
            }
            logits[k] = s;
        }
        let z: f64 = logits.iter().map(|v| v.exp()).sum();
        total += -(logits[labels[r]].exp() / z).ln();
    }
    total / n as f64
}

#[test]
fn two_layer_loss_matches_scalar_oracle() {
    let (d, h, c) = (5, 7, 3);
    let model = build_staged_network(&two_layer(d, h, c), 17).unwrap();
    let x = random_batch(&[d], 6, 4);
    let labels = [0, 2, 1, 1, 0, 2];
    let out = model
        .forward(&x, &labels, &mut ForwardCache::default())
        .unwrap();
    let p = model.params();
    let expect = oracle_loss(
        p[0].data(),
        p[1].data(),
        p[2].data(),
        p[3].data(),
        x.data(),
        &labels,
        d,
        h,
        c,
    );
    assert!(
        (out.loss - expect).abs() < 1e-12,
        "{} vs {expect}",
        out.loss
    );
}

#[test]
fn uniform_logits_loss_is_ln_classes() {
    let mut model = build_staged_network(&two_layer(3, 4, 6), 1).unwrap();
    for t in model.params_mut() {
        t.data_mut().fill(0.0);
    }
    let x = random_batch(&[3], 4, 2);
    let out = model
        .forward(&x, &[0, 1, 2, 5], &mut ForwardCache::default())
        .unwrap();
    assert!((out.loss - 6f64.ln()).abs() < 1e-12);
}

#[test]
fn large_margin_drives_loss_and_gradient_to_zero() {
    let spec = ModelSpec {
        input_shape: vec![2],
        stages: vec![StageSpec::new("fc", vec![LayerSpec::Dense { outputs: 2 }])],
        num_labels: 2,
    };
    let mut model = build_staged_network(&spec, 0).unwrap();
    let x = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
    let mut cache = ForwardCache::default();
    let mut last = f64::INFINITY;
    for margin in [1.0, 5.0, 20.0] {
        let p = model.params_mut();
        p[0] = Tensor::new(vec![2, 2], vec![margin, 0.0, 0.0, margin]).unwrap();
        let out = model.forward(&x, &[0, 1], &mut cache).unwrap();
        let g = model.backward(&cache).unwrap();
        assert!(out.loss < last);
        last = out.loss;
        if margin == 20.0 {
            assert!(out.loss < 1e-8);
            assert!(g.squared_norm().sqrt() < 1e-8);
        }
    }
}

#[test]
fn scores_rows_sum_to_one_and_loss_is_neg_log_true_score() {
    let model = build_staged_network(&two_layer(4, 6, 5), 9).unwrap();
    let x = random_batch(&[4], 3, 1);
    let labels = [4, 0, 2];
    let out = model
        .forward(&x, &labels, &mut ForwardCache::default())
        .unwrap();
    let mut manual = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        let row = out.scores.row(r);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        manual -= row[l].ln();
    }
    assert!((out.loss - manual / 3.0).abs() < 1e-9);
}

fn conv_stack(residual: bool) -> ModelSpec {
    let mut body = vec![
        LayerSpec::Conv2d {
            out_channels: 2,
            kernel: 3,
            padding: 1,
        },
        LayerSpec::Relu,
    ];
    if residual {
        body = vec![LayerSpec::Residual { body }];
    }
    ModelSpec {
        input_shape: vec![1, 4, 4],
        stages: vec![
            StageSpec::new(
                "conv1",
                vec![
                    LayerSpec::Conv2d {
                        out_channels: 2,
                        kernel: 3,
                        padding: 1,
                    },
                    LayerSpec::Relu,
                ],
            ),
            StageSpec::new("conv2", body),
            StageSpec::new(
                "pool",
                vec![LayerSpec::MaxPool { size: 2 }, LayerSpec::GlobalAvgPool],
            ),
            StageSpec::new("fc", vec![LayerSpec::Dense { outputs: 3 }]),
        ],
        num_labels: 3,
    }
}

#[test]
fn linear_model_gradient_is_exact_to_roundoff() {
    let spec = ModelSpec {
        input_shape: vec![6],
        stages: vec![
            StageSpec::new("a", vec![LayerSpec::Dense { outputs: 4 }]),
            StageSpec::new("fc", vec![LayerSpec::Dense { outputs: 3 }]),
        ],
        num_labels: 3,
    };
    let model = build_staged_network(&spec, 3).unwrap();
    let x = random_batch(&[6], 2, 8);
    let err = model.grad_check(&x, &[0, 1], 1e-5).unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn conv_pool_residual_gradients_match_finite_differences() {
    for residual in [false, true] {
        let model = build_staged_network(&conv_stack(residual), 5).unwrap();
        assert!(model.param_count() < 1000);
        let x = random_batch(&[1, 4, 4], 4, 6);
        let err = model.grad_check(&x, &[0, 1, 2, 1], 1e-5).unwrap();
        assert!(err < 1e-4, "residual={residual}: {err}");
    }
}

#[test]
fn grad_check_rejects_non_positive_epsilon() {
    let model = build_staged_network(&two_layer(2, 2, 2), 0).unwrap();
    let x = random_batch(&[2], 2, 0);
    assert!(model.grad_check(&x, &[0, 1], 0.0).is_err());
    assert!(model.grad_check(&x, &[0, 1], -1e-5).is_err());
}

#[test]
fn backward_before_forward_is_rejected() {
    let model = build_staged_network(&two_layer(2, 2, 2), 0).unwrap();
    assert_eq!(
        model.backward(&ForwardCache::default()),
        Err(Error::BackwardBeforeForward)
    );
}

#[test]
fn shape_mismatch_names_the_stage() {
    let model = build_staged_network(&two_layer(3, 2, 2), 0).unwrap();
    let x = random_batch(&[4], 2, 0);
    match model.forward(&x, &[0, 1], &mut ForwardCache::default()) {
        Err(Error::ShapeMismatch { stage, .. }) => assert_eq!(stage, "hidden"),
        other => panic!("unexpected {other:?}"),
    }
    let x = random_batch(&[3], 2, 0);
    assert!(model
        .forward(&x, &[0], &mut ForwardCache::default())
        .is_err());
}

#[test]
fn non_finite_activation_is_rejected() {
    let mut model = build_staged_network(&two_layer(2, 2, 2), 0).unwrap();
    model.params_mut()[0].data_mut()[0] = f64::INFINITY;
    let x = Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap();
    assert_eq!(
        model.forward(&x, &[0], &mut ForwardCache::default()),
        Err(Error::NonFinite {
            stage: "hidden".into()
        })
    );
}

#[test]
fn duplicated_batch_has_identical_mean_gradient() {
    let model = build_staged_network(&conv_stack(true), 2).unwrap();
    let x = random_batch(&[1, 4, 4], 3, 3);
    let labels = [2, 0, 1];
    let mut cache = ForwardCache::default();
    model.forward(&x, &labels, &mut cache).unwrap();
    let g1 = model.backward(&cache).unwrap();

    let mut data = x.data().to_vec();
    data.extend_from_slice(x.data());
    let x2 = Tensor::new(vec![6, 1, 4, 4], data).unwrap();
    model.forward(&x2, &[2, 0, 1, 2, 0, 1], &mut cache).unwrap();
    let g2 = model.backward(&cache).unwrap();
    for (a, b) in g1.tensors.iter().zip(&g2.tensors) {
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() <= 1e-14 * (1.0 + u.abs()), "{u} vs {v}");
        }
    }
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let model = build_staged_network(&conv_stack(true), 2).unwrap();
    let x = random_batch(&[1, 4, 4], 3, 3);
    let run = || {
        let mut cache = ForwardCache::default();
        let out = model.forward(&x, &[0, 1, 2], &mut cache).unwrap();
        (out, model.backward(&cache).unwrap())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.loss.to_bits(), b.loss.to_bits());
    assert_eq!(a.scores, b.scores);
    assert_eq!(ga, gb);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_layer_kind_passes_grad_check(seed in 0u64..10_000, residual in any::<bool>()) {
        let model = build_staged_network(&conv_stack(residual), seed).unwrap();
        let x = random_batch(&[1, 4, 4], 3, seed ^ 0xabc);
        // Kinks of relu and ties of max-pool make finite differences
        // meaningless; only score draws whose pre-activations keep clear.
        prop_assume!(clear_of_kinks(&model, &x));
        let err = model.grad_check(&x, &[0, 1, 2], 1e-5).unwrap();
        prop_assert!(err < 1e-4, "seed {} err {}", seed, err);
    }

    #[test]
    fn softmax_rows_normalized(seed in 0u64..10_000, scale in 0.1f64..50.0) {
        let mut model = build_staged_network(&two_layer(4, 5, 7), seed).unwrap();
        for t in model.params_mut() {
            t.data_mut().iter_mut().for_each(|v| *v *= scale);
        }
        let x = random_batch(&[4], 5, seed);
        let labels = [0, 1, 2, 3, 6];
        let out = model.forward(&x, &labels, &mut ForwardCache::default()).unwrap();
        for r in 0..5 {
            let row = out.scores.row(r);
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}

/// Perturbing any single parameter by ±1e-5 must not flip a relu or
/// change a max-pool winner; approximated by requiring every relu input
/// and pool gap to exceed a margin.
fn clear_of_kinks(model: &tlrate_core::model::StagedModel, x: &Tensor) -> bool {
    use tlrate_core::nn::kernels;
    let margin = 1e-4;
    let stages = model.stages();
    let p = model.params();
    let n = x.rows();
    let mut a = x.data().to_vec();
    for st in stages {
        for op in &st.ops {
            a = match op {
                tlrate_core::nn::Op::Conv2d { weight, bias, geom } => {
                    kernels::conv_forward(&a, n, geom, p[*weight].data(), p[*bias].data())
                }
                tlrate_core::nn::Op::Relu => {
                    if a.iter().any(|v| v.abs() < margin) {
                        return false;
                    }
                    kernels::relu_forward(&a)
                }
                tlrate_core::nn::Op::Residual(body) => {
                    let mut y = a.clone();
                    for op in body {
                        y = match op {
                            tlrate_core::nn::Op::Conv2d { weight, bias, geom } => {
                                kernels::conv_forward(
                                    &y,
                                    n,
                                    geom,
                                    p[*weight].data(),
                                    p[*bias].data(),
                                )
                            }
                            tlrate_core::nn::Op::Relu => {
                                if y.iter().any(|v| v.abs() < margin) {
                                    return false;
                                }
                                kernels::relu_forward(&y)
                            }
                            _ => unreachable!(),
                        };
                    }
                    y.iter().zip(&a).map(|(u, v)| u + v).collect()
                }
                tlrate_core::nn::Op::MaxPool {
                    size,
                    channels,
                    height,
                    width,
                } => {
                    let (y, arg) =
                        kernels::maxpool_forward(&a, n, *channels, *height, *width, *size);
                    for (k, &best) in arg.iter().enumerate() {
                        let per = (height / size) * (width / size);
                        let (plane, cell) = (k / per, k % per);
                        let (i, j) = (cell / (width / size), cell % (width / size));
                        for di in 0..*size {
                            for dj in 0..*size {
                                let idx = plane * height * width
                                    + (i * size + di) * width
                                    + j * size
                                    + dj;
                                if idx != best && (a[best] - a[idx]).abs() < margin {
                                    return false;
                                }
                            }
                        }
                    }
                    y
                }
                tlrate_core::nn::Op::GlobalAvgPool { channels, area } => {
                    kernels::gap_forward(&a, n, *channels, *area)
                }
                tlrate_core::nn::Op::Dense {
                    weight,
                    bias,
                    inputs,
                    outputs,
                } => kernels::dense_forward(
                    &a,
                    n,
                    *inputs,
                    *outputs,
                    p[*weight].data(),
                    p[*bias].data(),
                ),
            };
        }
    }
    true
}
