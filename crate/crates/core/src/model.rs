//! Staged model definition, deterministic initialization, architecture
//! digests and head-replacement transfer.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::{self, ForwardCache, ForwardOutput, Gradients, LayerSpec, Op, ParamPlan, Stage};
use crate::tensor::Tensor;

/// A named group of layers. The last stage of a model is its head.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct StageSpec {
    pub name: String,
    pub layers: Vec<LayerSpec>,
}

impl StageSpec {
    pub fn new(name: impl Into<String>, layers: Vec<LayerSpec>) -> Self {
        Self {
            name: name.into(),
            layers,
        }
    }
}

/// Full architecture: per-example input shape, stages and label count.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelSpec {
    pub input_shape: Vec<usize>,
    pub stages: Vec<StageSpec>,
    pub num_labels: usize,
}

impl ModelSpec {
    /// The same architecture with a head of `num_labels` outputs.
    pub fn with_labels(&self, num_labels: usize) -> Self {
        let mut spec = self.clone();
        spec.num_labels = num_labels;
        if let Some(head) = spec.stages.last_mut() {
            if let Some(LayerSpec::Dense { outputs }) = head.layers.last_mut() {
                *outputs = num_labels;
            }
        }
        spec
    }

    pub fn head_name(&self) -> Option<&str> {
        self.stages.last().map(|s| s.name.as_str())
    }

    pub fn stage_names(&self) -> impl Iterator<Item = &str> {
        self.stages.iter().map(|s| s.name.as_str())
    }
}

/// Mini staged network: five convolutional stage groups `conv1`..`conv5`
/// followed by a dense `fc` head, at a configurable channel `width`.
///
/// Input is `[channels, height, width]` with height and width divisible by 2.
pub fn mini_staged_spec(
    input_shape: [usize; 3],
    width: usize,
    residual: bool,
    num_labels: usize,
) -> ModelSpec {
    let conv = |out_channels| LayerSpec::Conv2d {
        out_channels,
        kernel: 3,
        padding: 1,
    };
    let block = |out_channels| {
        if residual {
            alloc::vec![LayerSpec::Residual {
                body: alloc::vec![conv(out_channels), LayerSpec::Relu],
            }]
        } else {
            alloc::vec![conv(out_channels), LayerSpec::Relu]
        }
    };
    let wide = 2 * width;
    let mut conv2 = block(width);
    conv2.push(LayerSpec::MaxPool { size: 2 });
    let mut conv5 = block(wide);
    conv5.push(LayerSpec::GlobalAvgPool);
    ModelSpec {
        input_shape: input_shape.to_vec(),
        stages: alloc::vec![
            StageSpec::new("conv1", alloc::vec![conv(width), LayerSpec::Relu]),
            StageSpec::new("conv2", conv2),
            StageSpec::new("conv3", alloc::vec![conv(wide), LayerSpec::Relu]),
            StageSpec::new("conv4", block(wide)),
            StageSpec::new("conv5", conv5),
            StageSpec::new(
                "fc",
                alloc::vec![LayerSpec::Dense {
                    outputs: num_labels
                }]
            ),
        ],
        num_labels,
    }
}

/// A network as an ordered list of named stages over a flat parameter vector.
#[derive(Debug, Clone, PartialEq)]
pub struct StagedModel {
    spec: ModelSpec,
    stages: Vec<Stage>,
    names: Vec<String>,
    fan_in: Vec<usize>,
    params: Vec<Tensor>,
    seed: u64,
}

struct Plan {
    stages: Vec<Stage>,
    params: ParamPlan,
}

fn plan(spec: &ModelSpec) -> Result<Plan> {
    if spec.stages.is_empty() {
        return Err(Error::InvalidSpec("no stages".into()));
    }
    if spec.input_shape.is_empty() || spec.input_shape.contains(&0) {
        return Err(Error::InvalidSpec(format!(
            "bad input shape {:?}",
            spec.input_shape
        )));
    }
    for (i, s) in spec.stages.iter().enumerate() {
        if s.name.is_empty() || spec.stages[..i].iter().any(|o| o.name == s.name) {
            return Err(Error::InvalidSpec(format!(
                "stage name `{}` empty or repeated",
                s.name
            )));
        }
        if s.layers.is_empty() {
            return Err(Error::InvalidSpec(format!(
                "stage `{}` has no layers",
                s.name
            )));
        }
    }
    let head = spec.stages.last().unwrap();
    match head.layers.as_slice() {
        [LayerSpec::Dense { outputs }] if *outputs == spec.num_labels && spec.num_labels > 0 => {}
        _ => {
            return Err(Error::InvalidSpec(format!(
                "head stage `{}` must be a single dense layer with {} outputs",
                head.name, spec.num_labels
            )))
        }
    }

    let mut params = ParamPlan::default();
    let mut stages = Vec::with_capacity(spec.stages.len());
    let mut shape = spec.input_shape.clone();
    let mut previous = "input".to_string();
    for s in &spec.stages {
        let start = params.shapes.len();
        let input_shape = shape.clone();
        let mut ops = Vec::with_capacity(s.layers.len());
        for (i, layer) in s.layers.iter().enumerate() {
            let (op, out) = nn::plan_layer(layer, &shape, &format!("{}.{i}", s.name), &mut params)
                .map_err(|reason| Error::IncompatibleStages {
                    previous: previous.clone(),
                    stage: s.name.clone(),
                    reason,
                })?;
            ops.push(op);
            shape = out;
        }
        stages.push(Stage {
            name: s.name.clone(),
            ops,
            params: start..params.shapes.len(),
            input_shape,
            output_shape: shape.clone(),
        });
        previous = s.name.clone();
    }
    Ok(Plan { stages, params })
}

/// He-style uniform fan-in initialization of one tensor; biases start at zero.
///
/// Each tensor draws from its own ChaCha stream so that re-initializing a
/// single tensor does not depend on any other.
fn init_tensor(shape: &[usize], fan_in: usize, seed: u64, slot: usize) -> Tensor {
    let mut t = Tensor::zeros(shape);
    if fan_in > 0 {
        let bound = libm::sqrt(6.0 / fan_in as f64);
        let dist = Uniform::new(-bound, bound).expect("finite bound");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(slot as u64);
        for v in t.data_mut() {
            *v = dist.sample(&mut rng);
        }
    }
    t
}

/// Builds and deterministically initializes a staged network.
pub fn build_staged_network(spec: &ModelSpec, seed: u64) -> Result<StagedModel> {
    let Plan { stages, params } = plan(spec)?;
    let mut names = Vec::with_capacity(params.shapes.len());
    let mut fan_in = Vec::with_capacity(params.shapes.len());
    let mut tensors = Vec::with_capacity(params.shapes.len());
    for (slot, (name, shape, fi)) in params.shapes.into_iter().enumerate() {
        tensors.push(init_tensor(&shape, fi, seed, slot));
        names.push(name);
        fan_in.push(fi);
    }
    Ok(StagedModel {
        spec: spec.clone(),
        stages,
        names,
        fan_in,
        params: tensors,
        seed,
    })
}

impl StagedModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn stages(&self) -> &[Stage] {
        &self.stages
    }

    pub fn head(&self) -> &Stage {
        self.stages.last().expect("validated non-empty")
    }

    pub fn num_labels(&self) -> usize {
        self.spec.num_labels
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Parameters grouped by stage name.
    pub fn stage_params(&self) -> impl Iterator<Item = (&str, &[Tensor])> {
        self.stages
            .iter()
            .map(|s| (s.name.as_str(), &self.params[s.params.clone()]))
    }

    pub fn forward(
        &self,
        batch: &Tensor,
        labels: &[usize],
        cache: &mut ForwardCache,
    ) -> Result<ForwardOutput> {
        nn::forward(&self.stages, &self.params, batch, labels, cache)
    }

    pub fn backward(&self, cache: &ForwardCache) -> Result<Gradients> {
        nn::backward(&self.stages, &self.params, cache)
    }

    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        nn::predict(&self.stages, &self.params, batch)
    }

    pub fn grad_check(&self, batch: &Tensor, labels: &[usize], epsilon: f64) -> Result<f64> {
        nn::grad_check(&self.stages, &self.params, batch, labels, epsilon)
    }

    /// Architecture digest; see [`architecture_digest`].
    pub fn digest(&self) -> String {
        architecture_digest(&self.spec).expect("spec validated at build")
    }

    /// Replaces every parameter with the checkpoint's values, which must
    /// describe the same architecture and label count.
    pub fn load_params(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let digest = self.digest();
        if ckpt.meta.digest != digest {
            return Err(Error::ArchitectureMismatch(format!(
                "digest {} does not match model digest {digest}",
                ckpt.meta.digest
            )));
        }
        if ckpt.meta.num_labels != self.num_labels() {
            return Err(Error::ArchitectureMismatch(format!(
                "checkpoint head has {} labels, model has {}",
                ckpt.meta.num_labels,
                self.num_labels()
            )));
        }
        let params = match_tensors(self, &ckpt.tensors, false)?;
        self.params = params;
        Ok(())
    }

    /// Snapshot of this model as a checkpoint.
    pub fn to_checkpoint(&self, iterations: u64) -> Checkpoint {
        Checkpoint {
            meta: CheckpointMeta {
                digest: self.digest(),
                num_labels: self.num_labels(),
                seed: self.seed,
                iterations,
                spec: self.spec.clone(),
            },
            tensors: self
                .names
                .iter()
                .cloned()
                .zip(self.params.iter().cloned())
                .collect(),
        }
    }

    fn reinit_head(&mut self, seed: u64) {
        let range = self.head().params.clone();
        for slot in range {
            let shape = self.params[slot].shape().to_vec();
            self.params[slot] = init_tensor(&shape, self.fan_in[slot], seed, slot);
        }
    }
}

fn match_tensors(
    model: &StagedModel,
    tensors: &[(String, Tensor)],
    skip_head: bool,
) -> Result<Vec<Tensor>> {
    let head = model.head().params.clone();
    let mut out = model.params.clone();
    for (slot, name) in model.names.iter().enumerate() {
        if skip_head && head.contains(&slot) {
            continue;
        }
        let (_, t) = tensors.iter().find(|(n, _)| n == name).ok_or_else(|| {
            Error::ArchitectureMismatch(format!("checkpoint lacks tensor `{name}`"))
        })?;
        if t.shape() != out[slot].shape() {
            return Err(Error::ArchitectureMismatch(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                out[slot].shape()
            )));
        }
        out[slot] = t.clone();
    }
    Ok(out)
}

fn digest_layer(h: &mut Sha256, op: &Op, params: &ParamPlan, skip_output: bool) {
    h.update(op.kind().name().as_bytes());
    match op {
        Op::Dense { weight, inputs, .. } => {
            h.update((*inputs as u64).to_le_bytes());
            if !skip_output {
                for d in &params.shapes[*weight].1 {
                    h.update((*d as u64).to_le_bytes());
                }
            }
        }
        Op::Conv2d { weight, geom, .. } => {
            for d in &params.shapes[*weight].1 {
                h.update((*d as u64).to_le_bytes());
            }
            for d in [geom.padding, geom.in_h, geom.in_w] {
                h.update((d as u64).to_le_bytes());
            }
        }
        Op::Relu => {}
        Op::MaxPool {
            size,
            channels,
            height,
            width,
        } => {
            for d in [*size, *channels, *height, *width] {
                h.update((d as u64).to_le_bytes());
            }
        }
        Op::GlobalAvgPool { channels, area } => {
            h.update((*channels as u64).to_le_bytes());
            h.update((*area as u64).to_le_bytes());
        }
        Op::Residual(body) => {
            h.update((body.len() as u64).to_le_bytes());
            for b in body {
                digest_layer(h, b, params, false);
            }
        }
    }
    h.update([0xff]);
}

/// Hash over ordered (stage name, layer kind, shape) triples, excluding the
/// head's output size so that heads for different label counts share it.
pub fn architecture_digest(spec: &ModelSpec) -> Result<String> {
    let Plan { stages, params } = plan(spec)?;
    let mut h = Sha256::new();
    for d in &spec.input_shape {
        h.update((*d as u64).to_le_bytes());
    }
    let last = stages.len() - 1;
    for (i, stage) in stages.iter().enumerate() {
        h.update((stage.name.len() as u64).to_le_bytes());
        h.update(stage.name.as_bytes());
        for op in &stage.ops {
            digest_layer(&mut h, op, &params, i == last);
        }
    }
    let bytes = h.finalize();
    Ok(bytes[..16].iter().map(|b| format!("{b:02x}")).collect())
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CheckpointMeta {
    pub digest: String,
    pub num_labels: usize,
    pub seed: u64,
    pub iterations: u64,
    pub spec: ModelSpec,
}

/// Named parameter tensors plus the metadata needed to rebuild the model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Rebuilds the model this checkpoint was taken from.
    pub fn to_model(&self) -> Result<StagedModel> {
        let mut model = build_staged_network(&self.meta.spec, self.meta.seed)?;
        model.load_params(self)?;
        Ok(model)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

/// Copies every inner-stage tensor of `source` and re-initializes the head
/// (weight and bias) for `target_num_labels` outputs from `head_seed`.
pub fn transfer_init(
    source: &Checkpoint,
    target_num_labels: usize,
    head_seed: u64,
) -> Result<StagedModel> {
    let spec = source.meta.spec.with_labels(target_num_labels);
    let digest = architecture_digest(&spec)?;
    if digest != source.meta.digest {
        return Err(Error::ArchitectureMismatch(format!(
            "source digest {} does not match its own architecture ({digest})",
            source.meta.digest
        )));
    }
    let mut model = build_staged_network(&spec, source.meta.seed)?;
    model.params = match_tensors(&model, &source.tensors, true)?;
    model.reinit_head(head_seed);
    model.seed = head_seed;
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(labels: usize) -> ModelSpec {
        mini_staged_spec([1, 8, 8], 2, true, labels)
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = build_staged_network(&spec(10), 3).unwrap();
        let b = build_staged_network(&spec(10), 3).unwrap();
        let c = build_staged_network(&spec(10), 4).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn five_inner_stages_plus_head() {
        let m = build_staged_network(&spec(10), 0).unwrap();
        assert_eq!(m.stages().len(), 6);
        assert_eq!(m.head().name, "fc");
    }

    #[test]
    fn flowers_head_has_102_outputs() {
        let m = build_staged_network(&spec(102), 0).unwrap();
        let w = &m.params()[m.head().params.start];
        assert_eq!(w.shape()[1], 102);
        assert_eq!(m.param_names()[m.head().params.start], "fc.0.weight");
    }

    #[test]
    fn incompatible_stages_name_both_sides() {
        let mut s = spec(3);
        s.stages.insert(
            5,
            StageSpec::new(
                "extra",
                alloc::vec![LayerSpec::Conv2d {
                    out_channels: 2,
                    kernel: 3,
                    padding: 0
                }],
            ),
        );
        match build_staged_network(&s, 0) {
            Err(Error::IncompatibleStages {
                previous, stage, ..
            }) => {
                assert_eq!(previous, "conv5");
                assert_eq!(stage, "extra");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn head_must_match_label_count() {
        let mut s = spec(3);
        s.num_labels = 4;
        assert!(matches!(
            build_staged_network(&s, 0),
            Err(Error::InvalidSpec(_))
        ));
        s.stages.clear();
        assert!(build_staged_network(&s, 0).is_err());
    }

    #[test]
    fn digest_ignores_head_size_only() {
        let d10 = architecture_digest(&spec(10)).unwrap();
        assert_eq!(d10, architecture_digest(&spec(102)).unwrap());
        assert_ne!(
            d10,
            architecture_digest(&mini_staged_spec([1, 8, 8], 3, true, 10)).unwrap()
        );
        assert_ne!(
            d10,
            architecture_digest(&mini_staged_spec([1, 8, 8], 2, false, 10)).unwrap()
        );
        let mut renamed = spec(10);
        renamed.stages[2].name = "stage3".into();
        assert_ne!(d10, architecture_digest(&renamed).unwrap());
    }

    #[test]
    fn transfer_copies_inner_and_reinitializes_head() {
        let src = build_staged_network(&spec(10), 1).unwrap();
        let ckpt = src.to_checkpoint(0);
        let same = transfer_init(&ckpt, 10, 99).unwrap();
        let head = src.head().params.clone();
        for slot in 0..head.start {
            assert_eq!(same.params()[slot], src.params()[slot]);
        }
        assert_ne!(same.params()[head.start], src.params()[head.start]);

        let big = transfer_init(&ckpt, 102, 99).unwrap();
        assert_eq!(big.params()[head.start].shape(), &[4, 102]);
        for slot in 0..head.start {
            assert_eq!(big.params()[slot].data(), src.params()[slot].data());
        }
    }

    #[test]
    fn head_reinit_matches_fresh_build() {
        let src = build_staged_network(&spec(5), 1).unwrap();
        let t = transfer_init(&src.to_checkpoint(0), 7, 42).unwrap();
        let fresh = build_staged_network(&spec(7), 42).unwrap();
        let head = t.head().params.clone();
        assert_eq!(&t.params()[head.clone()], &fresh.params()[head]);
    }

    #[test]
    fn load_params_rejects_label_mismatch() {
        let src = build_staged_network(&spec(10), 1).unwrap();
        let mut big = build_staged_network(&spec(102), 1).unwrap();
        assert!(matches!(
            big.load_params(&src.to_checkpoint(0)),
            Err(Error::ArchitectureMismatch(_))
        ));
    }
}
