//! Layer kernels with exact reverse-mode gradients, assembled into stages.
//!
//! A network is an ordered list of [`Stage`]s, each a list of [`Op`]s that
//! index into a flat parameter vector. [`forward`] records what [`backward`]
//! needs in a [`ForwardCache`]; the loss is always mean softmax cross-entropy.

pub mod kernels;

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::ops::Range;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;
use kernels::ConvGeom;

/// Declarative layer description used in stage specs.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "kebab-case"))]
pub enum LayerSpec {
    /// Fully connected layer; inputs of any rank are flattened.
    Dense {
        outputs: usize,
    },
    /// Stride-1 zero-padded convolution over `[channels, height, width]`.
    Conv2d {
        out_channels: usize,
        kernel: usize,
        padding: usize,
    },
    Relu,
    /// Non-overlapping max pooling with a square window.
    MaxPool {
        size: usize,
    },
    GlobalAvgPool,
    /// `y = x + body(x)`; the body must preserve the shape.
    Residual {
        body: Vec<LayerSpec>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Conv2d,
    Relu,
    MaxPool,
    GlobalAveragePool,
    ResidualAdd,
    SoftmaxCrossEntropy,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Dense => "dense",
            LayerKind::Conv2d => "conv2d",
            LayerKind::Relu => "relu",
            LayerKind::MaxPool => "max-pool",
            LayerKind::GlobalAveragePool => "global-average-pool",
            LayerKind::ResidualAdd => "residual-add",
            LayerKind::SoftmaxCrossEntropy => "softmax-cross-entropy",
        }
    }
}

/// A planned layer with resolved shapes and parameter slots.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Dense {
        weight: usize,
        bias: usize,
        inputs: usize,
        outputs: usize,
    },
    Conv2d {
        weight: usize,
        bias: usize,
        geom: ConvGeom,
    },
    Relu,
    MaxPool {
        size: usize,
        channels: usize,
        height: usize,
        width: usize,
    },
    GlobalAvgPool {
        channels: usize,
        area: usize,
    },
    Residual(Vec<Op>),
}

impl Op {
    pub fn kind(&self) -> LayerKind {
        match self {
            Op::Dense { .. } => LayerKind::Dense,
            Op::Conv2d { .. } => LayerKind::Conv2d,
            Op::Relu => LayerKind::Relu,
            Op::MaxPool { .. } => LayerKind::MaxPool,
            Op::GlobalAvgPool { .. } => LayerKind::GlobalAveragePool,
            Op::Residual(_) => LayerKind::ResidualAdd,
        }
    }
}

/// Parameter tensor shapes a planned layer needs, in slot order.
#[derive(Debug, Default)]
pub(crate) struct ParamPlan {
    pub shapes: Vec<(String, Vec<usize>, usize)>,
}

impl ParamPlan {
    fn push(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> usize {
        self.shapes.push((name, shape, fan_in));
        self.shapes.len() - 1
    }
}

/// Resolves one layer against `input` shape; returns the op and its output shape.
pub(crate) fn plan_layer(
    spec: &LayerSpec,
    input: &[usize],
    prefix: &str,
    params: &mut ParamPlan,
) -> core::result::Result<(Op, Vec<usize>), String> {
    match spec {
        LayerSpec::Dense { outputs } => {
            if *outputs == 0 {
                return Err("dense layer with zero outputs".into());
            }
            let inputs = input.iter().product();
            let weight = params.push(
                format!("{prefix}.weight"),
                alloc::vec![inputs, *outputs],
                inputs,
            );
            let bias = params.push(format!("{prefix}.bias"), alloc::vec![*outputs], 0);
            Ok((
                Op::Dense {
                    weight,
                    bias,
                    inputs,
                    outputs: *outputs,
                },
                alloc::vec![*outputs],
            ))
        }
        LayerSpec::Conv2d {
            out_channels,
            kernel,
            padding,
        } => {
            let [c, h, w] = *input else {
                return Err(format!(
                    "conv2d needs [channels, height, width] input, got {input:?}"
                ));
            };
            if *out_channels == 0 || *kernel == 0 {
                return Err("conv2d with zero channels or kernel".into());
            }
            let geom =
                ConvGeom::new(c, *out_channels, *kernel, *padding, h, w).ok_or_else(|| {
                    format!("kernel {kernel} with padding {padding} exceeds input {h}x{w}")
                })?;
            let fan_in = c * kernel * kernel;
            let weight = params.push(
                format!("{prefix}.weight"),
                alloc::vec![*out_channels, c, *kernel, *kernel],
                fan_in,
            );
            let bias = params.push(format!("{prefix}.bias"), alloc::vec![*out_channels], 0);
            Ok((
                Op::Conv2d { weight, bias, geom },
                alloc::vec![*out_channels, geom.out_h, geom.out_w],
            ))
        }
        LayerSpec::Relu => Ok((Op::Relu, input.to_vec())),
        LayerSpec::MaxPool { size } => {
            let [c, h, w] = *input else {
                return Err(format!(
                    "max-pool needs [channels, height, width] input, got {input:?}"
                ));
            };
            if *size == 0 || *size > h || *size > w {
                return Err(format!("pool size {size} does not fit input {h}x{w}"));
            }
            Ok((
                Op::MaxPool {
                    size: *size,
                    channels: c,
                    height: h,
                    width: w,
                },
                alloc::vec![c, h / size, w / size],
            ))
        }
        LayerSpec::GlobalAvgPool => {
            let [c, h, w] = *input else {
                return Err(format!(
                    "global-average-pool needs [channels, height, width] input, got {input:?}"
                ));
            };
            Ok((
                Op::GlobalAvgPool {
                    channels: c,
                    area: h * w,
                },
                alloc::vec![c],
            ))
        }
        LayerSpec::Residual { body } => {
            if body.is_empty() {
                return Err("residual block with empty body".into());
            }
            let mut shape = input.to_vec();
            let mut ops = Vec::with_capacity(body.len());
            for (i, layer) in body.iter().enumerate() {
                let (op, out) = plan_layer(layer, &shape, &format!("{prefix}.{i}"), params)?;
                ops.push(op);
                shape = out;
            }
            if shape != input {
                return Err(format!("residual body maps {input:?} to {shape:?}"));
            }
            Ok((Op::Residual(ops), shape))
        }
    }
}

/// A named group of layers sharing one learning-rate multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage {
    pub name: String,
    pub ops: Vec<Op>,
    /// Slots of this stage in the flat parameter vector.
    pub params: Range<usize>,
    pub input_shape: Vec<usize>,
    pub output_shape: Vec<usize>,
}

#[derive(Debug, Clone)]
enum OpCache {
    Input(Vec<f64>),
    Argmax(Vec<usize>, usize),
    Nothing,
    Residual(Vec<OpCache>),
}

/// Activations recorded by [`forward`] for a subsequent [`backward`].
#[derive(Debug, Clone, Default)]
pub struct ForwardCache {
    batch: usize,
    stages: Vec<Vec<OpCache>>,
    probs: Vec<f64>,
    classes: usize,
    labels: Vec<usize>,
    param_count: usize,
}

impl ForwardCache {
    pub fn is_empty(&self) -> bool {
        self.stages.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub loss: f64,
    /// Softmax probabilities, `[batch, labels]`.
    pub scores: Tensor,
}

/// One gradient tensor per parameter tensor, in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Tensor>,
}

impl Gradients {
    pub fn squared_norm(&self) -> f64 {
        self.tensors.iter().map(Tensor::squared_norm).sum()
    }

    /// Gradient tensors grouped by stage name.
    pub fn by_stage<'a>(
        &'a self,
        stages: &'a [Stage],
    ) -> impl Iterator<Item = (&'a str, &'a [Tensor])> + 'a {
        stages
            .iter()
            .map(move |s| (s.name.as_str(), &self.tensors[s.params.clone()]))
    }
}

fn check_batch(stages: &[Stage], batch: &Tensor, labels: &[usize]) -> Result<usize> {
    let first = stages
        .first()
        .ok_or_else(|| Error::InvalidSpec("model has no stages".into()))?;
    let n = batch.rows();
    if batch.shape().get(1..) != Some(&first.input_shape[..]) {
        return Err(Error::ShapeMismatch {
            stage: first.name.clone(),
            reason: format!(
                "batch shape {:?} does not match input shape {:?}",
                batch.shape(),
                first.input_shape
            ),
        });
    }
    if labels.len() != n {
        return Err(Error::ShapeMismatch {
            stage: first.name.clone(),
            reason: format!("{n} examples but {} labels", labels.len()),
        });
    }
    Ok(n)
}

fn run_ops(
    ops: &[Op],
    params: &[Tensor],
    mut x: Vec<f64>,
    n: usize,
    mut cache: Option<&mut Vec<OpCache>>,
) -> Vec<f64> {
    for op in ops {
        let (y, entry) = match op {
            Op::Dense {
                weight,
                bias,
                inputs,
                outputs,
            } => {
                let y = kernels::dense_forward(
                    &x,
                    n,
                    *inputs,
                    *outputs,
                    params[*weight].data(),
                    params[*bias].data(),
                );
                (y, OpCache::Input(x))
            }
            Op::Conv2d { weight, bias, geom } => {
                let y = kernels::conv_forward(
                    &x,
                    n,
                    geom,
                    params[*weight].data(),
                    params[*bias].data(),
                );
                (y, OpCache::Input(x))
            }
            Op::Relu => (kernels::relu_forward(&x), OpCache::Input(x)),
            Op::MaxPool {
                size,
                channels,
                height,
                width,
            } => {
                let (y, arg) = kernels::maxpool_forward(&x, n, *channels, *height, *width, *size);
                (y, OpCache::Argmax(arg, x.len()))
            }
            Op::GlobalAvgPool { channels, area } => (
                kernels::gap_forward(&x, n, *channels, *area),
                OpCache::Nothing,
            ),
            Op::Residual(body) => {
                let mut inner = Vec::new();
                let mut y = run_ops(
                    body,
                    params,
                    x.clone(),
                    n,
                    cache.is_some().then_some(&mut inner),
                );
                y.iter_mut().zip(&x).for_each(|(a, b)| *a += b);
                (y, OpCache::Residual(inner))
            }
        };
        if let Some(c) = cache.as_deref_mut() {
            c.push(entry);
        }
        x = y;
    }
    x
}

fn back_ops(
    ops: &[Op],
    params: &[Tensor],
    caches: &[OpCache],
    mut dy: Vec<f64>,
    n: usize,
    grads: &mut [Tensor],
) -> Vec<f64> {
    for (op, cache) in ops.iter().zip(caches).rev() {
        dy = match (op, cache) {
            (
                Op::Dense {
                    weight,
                    bias,
                    inputs,
                    outputs,
                },
                OpCache::Input(x),
            ) => {
                let (dw, db) = two_mut(grads, *weight, *bias);
                kernels::dense_backward(
                    x,
                    &dy,
                    n,
                    *inputs,
                    *outputs,
                    params[*weight].data(),
                    dw,
                    db,
                )
            }
            (Op::Conv2d { weight, bias, geom }, OpCache::Input(x)) => {
                let (dw, db) = two_mut(grads, *weight, *bias);
                kernels::conv_backward(x, &dy, n, geom, params[*weight].data(), dw, db)
            }
            (Op::Relu, OpCache::Input(x)) => kernels::relu_backward(x, &dy),
            (Op::MaxPool { .. }, OpCache::Argmax(arg, len)) => {
                kernels::maxpool_backward(arg, &dy, *len)
            }
            (Op::GlobalAvgPool { area, .. }, OpCache::Nothing) => kernels::gap_backward(&dy, *area),
            (Op::Residual(body), OpCache::Residual(inner)) => {
                let mut dx = back_ops(body, params, inner, dy.clone(), n, grads);
                dx.iter_mut().zip(&dy).for_each(|(a, b)| *a += b);
                dx
            }
            _ => unreachable!("cache recorded for a different op"),
        };
    }
    dy
}

fn two_mut(grads: &mut [Tensor], a: usize, b: usize) -> (&mut [f64], &mut [f64]) {
    debug_assert!(a < b);
    let (lo, hi) = grads.split_at_mut(b);
    (lo[a].data_mut(), hi[0].data_mut())
}

fn run_network(
    stages: &[Stage],
    params: &[Tensor],
    batch: &Tensor,
    n: usize,
    mut cache: Option<&mut Vec<Vec<OpCache>>>,
) -> Result<Vec<f64>> {
    let mut x = batch.data().to_vec();
    for stage in stages {
        let mut entries = Vec::new();
        x = run_ops(
            &stage.ops,
            params,
            x,
            n,
            cache.is_some().then_some(&mut entries),
        );
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                stage: stage.name.clone(),
            });
        }
        if let Some(c) = cache.as_deref_mut() {
            c.push(entries);
        }
    }
    Ok(x)
}

fn classes(stages: &[Stage]) -> usize {
    stages.last().map_or(0, |s| s.output_shape.iter().product())
}

/// Forward pass with mean softmax cross-entropy, recording activations.
pub fn forward(
    stages: &[Stage],
    params: &[Tensor],
    batch: &Tensor,
    labels: &[usize],
    cache: &mut ForwardCache,
) -> Result<ForwardOutput> {
    let n = check_batch(stages, batch, labels)?;
    let classes = classes(stages);
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::ShapeMismatch {
            stage: stages.last().unwrap().name.clone(),
            reason: format!("label {bad} outside {classes} outputs"),
        });
    }
    let mut entries = Vec::with_capacity(stages.len());
    let logits = run_network(stages, params, batch, n, Some(&mut entries))?;
    let (loss, probs) = kernels::softmax_cross_entropy(&logits, n, classes, labels);
    if !loss.is_finite() {
        return Err(Error::NonFinite {
            stage: LayerKind::SoftmaxCrossEntropy.name().into(),
        });
    }
    *cache = ForwardCache {
        batch: n,
        stages: entries,
        probs: probs.clone(),
        classes,
        labels: labels.to_vec(),
        param_count: params.len(),
    };
    Ok(ForwardOutput {
        loss,
        scores: Tensor::new(alloc::vec![n, classes], probs)?,
    })
}

/// Class probabilities without recording activations.
pub fn predict(stages: &[Stage], params: &[Tensor], batch: &Tensor) -> Result<Tensor> {
    let n = batch.rows();
    let dummy = alloc::vec![0; n];
    check_batch(stages, batch, &dummy)?;
    let classes = classes(stages);
    let logits = run_network(stages, params, batch, n, None)?;
    let (_, probs) = kernels::softmax_cross_entropy(&logits, n, classes, &dummy);
    Tensor::new(alloc::vec![n, classes], probs)
}

/// Gradients of the mean loss recorded in `cache` with respect to every parameter.
pub fn backward(stages: &[Stage], params: &[Tensor], cache: &ForwardCache) -> Result<Gradients> {
    if cache.is_empty() {
        return Err(Error::BackwardBeforeForward);
    }
    if cache.stages.len() != stages.len() || cache.param_count != params.len() {
        return Err(Error::ShapeMismatch {
            stage: stages.first().map(|s| s.name.clone()).unwrap_or_default(),
            reason: "forward cache was recorded for a different model".into(),
        });
    }
    let mut grads = Gradients {
        tensors: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
    };
    let mut dy = kernels::softmax_cross_entropy_backward(
        &cache.probs,
        cache.batch,
        cache.classes,
        &cache.labels,
    );
    for (stage, entries) in stages.iter().zip(&cache.stages).rev() {
        dy = back_ops(
            &stage.ops,
            params,
            entries,
            dy,
            cache.batch,
            &mut grads.tensors,
        );
    }
    Ok(grads)
}

/// Largest scalar parameter count accepted by [`grad_check`].
pub const GRAD_CHECK_MAX_PARAMS: usize = 10_000;

/// Compares analytic gradients with central finite differences.
///
/// Returns `max |a - n| / max(|a|, |n|, 1e-12)` over every scalar parameter.
pub fn grad_check(
    stages: &[Stage],
    params: &[Tensor],
    batch: &Tensor,
    labels: &[usize],
    epsilon: f64,
) -> Result<f64> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(invalid(
            "epsilon",
            format!("must be positive, got {epsilon}"),
        ));
    }
    let count: usize = params.iter().map(Tensor::len).sum();
    if count > GRAD_CHECK_MAX_PARAMS {
        return Err(invalid(
            "model",
            format!("{count} parameters exceed {GRAD_CHECK_MAX_PARAMS}"),
        ));
    }
    let mut cache = ForwardCache::default();
    forward(stages, params, batch, labels, &mut cache)?;
    let analytic = backward(stages, params, &cache)?;

    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    let mut scratch = ForwardCache::default();
    for t in 0..work.len() {
        for i in 0..work[t].len() {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + epsilon;
            let plus = forward(stages, &work, batch, labels, &mut scratch)?.loss;
            work[t].data_mut()[i] = orig - epsilon;
            let minus = forward(stages, &work, batch, labels, &mut scratch)?.loss;
            work[t].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let a = analytic.tensors[t].data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-12);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}
