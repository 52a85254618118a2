//! Labeled datasets, the four-way domain partition, stratified train/val
//! splits and synthetic domains with a tunable relatedness knob.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub features: Tensor,
    pub label: usize,
}

/// Examples with dense label ids in `[0, label_names.len())`.
///
/// [`LabeledDataset::new`] requires every label to have at least one example;
/// subsets produced by partitioning and splitting keep the parent's label
/// names even where a label ends up unrepresented.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub examples: Vec<Example>,
    pub label_names: Vec<String>,
    pub domain_name: String,
}

impl LabeledDataset {
    pub fn new(
        domain_name: impl Into<String>,
        label_names: Vec<String>,
        examples: Vec<Example>,
    ) -> Result<Self> {
        let ds = Self {
            examples,
            label_names,
            domain_name: domain_name.into(),
        };
        let counts = ds.label_counts();
        if let Some(e) = ds.examples.iter().find(|e| e.label >= ds.label_names.len()) {
            return Err(invalid(
                "label",
                format!("id {} outside {} labels", e.label, ds.label_names.len()),
            ));
        }
        if let Some(l) = counts.iter().position(|&c| c == 0) {
            return Err(Error::TooFewExamples {
                label: ds.label_names[l].clone(),
                count: 0,
                required: 1,
            });
        }
        if let Some(first) = ds.examples.first() {
            if let Some(e) = ds
                .examples
                .iter()
                .find(|e| e.features.shape() != first.features.shape())
            {
                return Err(invalid(
                    "features",
                    format!(
                        "mixed shapes {:?} and {:?}",
                        first.features.shape(),
                        e.features.shape()
                    ),
                ));
            }
        }
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn feature_shape(&self) -> Option<&[usize]> {
        self.examples.first().map(|e| e.features.shape())
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = alloc::vec![0; self.label_names.len()];
        for e in &self.examples {
            if let Some(c) = counts.get_mut(e.label) {
                *c += 1;
            }
        }
        counts
    }

    /// Stacks the selected examples into a `[n, ...]` batch with labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = Tensor::stack(indices.iter().map(|&i| &self.examples[i].features))?;
        let y = indices.iter().map(|&i| self.examples[i].label).collect();
        Ok((x, y))
    }

    fn subset(&self, indices: &[usize]) -> Self {
        Self {
            examples: indices.iter().map(|&i| self.examples[i].clone()).collect(),
            label_names: self.label_names.clone(),
            domain_name: self.domain_name.clone(),
        }
    }

    fn indices_by_label(&self) -> Vec<Vec<usize>> {
        let mut by = alloc::vec![Vec::new(); self.label_names.len()];
        for (i, e) in self.examples.iter().enumerate() {
            by[e.label].push(i);
        }
        by
    }
}

/// Examples per label: `|examples| / |labels|`.
pub fn images_per_label(ds: &LabeledDataset) -> Result<f64> {
    if ds.is_empty() || ds.num_labels() == 0 {
        return Err(Error::EmptyDataset);
    }
    Ok(ds.len() as f64 / ds.num_labels() as f64)
}

/// A domain split four ways, plus the transfer target drawn from the pool.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionedDomain {
    pub source_train: LabeledDataset,
    pub val_source: LabeledDataset,
    pub val_target: LabeledDataset,
    pub transfer_pool: LabeledDataset,
    pub target: LabeledDataset,
}

/// Largest-remainder apportionment of `total` over `counts`, then at least
/// one per non-empty label.
fn target_quotas(counts: &[usize], total: usize) -> Vec<usize> {
    let pool: usize = counts.iter().sum();
    if pool == 0 {
        return alloc::vec![0; counts.len()];
    }
    let mut quotas: Vec<usize> = counts.iter().map(|&c| c * total / pool).collect();
    let assigned: usize = quotas.iter().sum();
    let mut order: Vec<usize> = (0..counts.len()).collect();
    order.sort_by_key(|&l| core::cmp::Reverse((counts[l] * total) % pool));
    for &l in order.iter().take(total - assigned) {
        quotas[l] += 1;
    }
    for (q, &c) in quotas.iter_mut().zip(counts) {
        if *q == 0 && c > 0 {
            *q = 1;
        }
    }
    quotas
}

/// Stratified four-way split; the target is a seeded stratified tenth of the
/// fourth partition (rounded down, at least one example per label).
pub fn partition_domain(ds: &LabeledDataset, seed: u64) -> Result<PartitionedDomain> {
    let by_label = ds.indices_by_label();
    for (l, idx) in by_label.iter().enumerate() {
        if idx.len() < 4 {
            return Err(Error::TooFewExamples {
                label: ds.label_names[l].clone(),
                count: idx.len(),
                required: 4,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<usize>; 4] = Default::default();
    let mut pool_by_label = alloc::vec![Vec::new(); by_label.len()];
    let mut dealt = 0usize;
    for (l, idx) in by_label.iter().enumerate() {
        let mut idx = idx.clone();
        idx.shuffle(&mut rng);
        for i in idx {
            let p = dealt % 4;
            parts[p].push(i);
            if p == 3 {
                pool_by_label[l].push(i);
            }
            dealt += 1;
        }
    }
    for p in &mut parts {
        p.sort_unstable();
    }

    let counts: Vec<usize> = pool_by_label.iter().map(Vec::len).collect();
    let quotas = target_quotas(&counts, parts[3].len() / 10);
    let mut pick_rng = ChaCha8Rng::seed_from_u64(seed);
    pick_rng.set_stream(1);
    let mut target = Vec::new();
    for (mut idx, q) in pool_by_label.into_iter().zip(quotas) {
        idx.sort_unstable();
        idx.shuffle(&mut pick_rng);
        target.extend_from_slice(&idx[..q]);
    }
    target.sort_unstable();

    Ok(PartitionedDomain {
        source_train: ds.subset(&parts[0]),
        val_source: ds.subset(&parts[1]),
        val_target: ds.subset(&parts[2]),
        transfer_pool: ds.subset(&parts[3]),
        target: ds.subset(&target),
    })
}

/// Stratified split with `round(train_fraction * n)` training examples per label.
pub fn split_train_val(
    ds: &LabeledDataset,
    train_fraction: f64,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(invalid(
            "train_fraction",
            format!("{train_fraction} not in (0, 1)"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for mut idx in ds.indices_by_label() {
        idx.shuffle(&mut rng);
        let k = (libm::round(train_fraction * idx.len() as f64) as usize).min(idx.len());
        train.extend_from_slice(&idx[..k]);
        val.extend_from_slice(&idx[k..]);
    }
    if train.is_empty() || val.is_empty() {
        return Err(invalid(
            "train_fraction",
            format!(
                "{train_fraction} leaves an empty side ({} train, {} val)",
                train.len(),
                val.len()
            ),
        ));
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&val)))
}

/// Generator settings for a synthetic labeled image domain.
///
/// Every domain is a mixture of a shared generative draw (from
/// `shared_seed`) and its own draw (from `seed`), weighted by
/// `relatedness`: `1.0` reproduces the shared parameters exactly and `0.0`
/// ignores them. Two domains with the same `shared_seed` and high
/// relatedness therefore share textures and label prototypes.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SyntheticDomainSpec {
    pub name: String,
    pub num_labels: usize,
    pub examples_per_label: usize,
    /// `[channels, height, width]`
    pub image: [usize; 3],
    pub textures: usize,
    pub relatedness: f64,
    pub shared_seed: u64,
    pub seed: u64,
    pub coefficient_noise: f64,
    pub pixel_noise: f64,
    /// Largest circular translation applied to each example, per axis.
    pub max_shift: usize,
}

impl SyntheticDomainSpec {
    pub fn new(
        name: impl Into<String>,
        num_labels: usize,
        examples_per_label: usize,
        relatedness: f64,
        seed: u64,
    ) -> Self {
        Self {
            name: name.into(),
            num_labels,
            examples_per_label,
            image: [1, 8, 8],
            textures: 6,
            relatedness,
            shared_seed: 0,
            seed,
            coefficient_noise: 0.6,
            pixel_noise: 0.3,
            max_shift: 2,
        }
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.relatedness) {
            return Err(invalid(
                "relatedness",
                format!("{} not in [0, 1]", self.relatedness),
            ));
        }
        if self.num_labels < 2 {
            return Err(invalid("num_labels", "at least 2 labels required"));
        }
        if self.examples_per_label < 4 {
            return Err(invalid(
                "examples_per_label",
                "at least 4 examples per label required",
            ));
        }
        if self.textures == 0 || self.image.contains(&0) {
            return Err(invalid(
                "image",
                "textures and image dimensions must be positive",
            ));
        }
        if !(self.coefficient_noise >= 0.0 && self.pixel_noise >= 0.0) {
            return Err(invalid("noise", "noise levels must be non-negative"));
        }
        Ok(())
    }
}

/// Texture bank and per-label mixing coefficients of a synthetic domain.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerativeParams {
    pub textures: Vec<Vec<f64>>,
    pub prototypes: Vec<Vec<f64>>,
}

fn raw_params(spec: &SyntheticDomainSpec, seed: u64) -> GenerativeParams {
    let [c, h, w] = spec.image;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tau = 2.0 * core::f64::consts::PI;
    let textures = (0..spec.textures)
        .map(|_| {
            let mut t = alloc::vec![0.0; c * h * w];
            for ch in 0..c {
                for _ in 0..2 {
                    let fy: f64 = rng.random_range(-2.0..2.0);
                    let fx: f64 = rng.random_range(-2.0..2.0);
                    let phase: f64 = rng.random_range(0.0..tau);
                    for i in 0..h {
                        for j in 0..w {
                            let arg =
                                tau * (fy * i as f64 / h as f64 + fx * j as f64 / w as f64) + phase;
                            t[(ch * h + i) * w + j] += libm::cos(arg);
                        }
                    }
                }
            }
            t
        })
        .collect();
    let prototypes = (0..spec.num_labels)
        .map(|_| {
            (0..spec.textures)
                .map(|_| rng.sample(StandardNormal))
                .collect()
        })
        .collect();
    GenerativeParams {
        textures,
        prototypes,
    }
}

fn mix(shared: &[f64], own: &[f64], rho: f64) -> Vec<f64> {
    let keep = libm::sqrt(1.0 - rho * rho);
    shared
        .iter()
        .zip(own)
        .map(|(s, o)| rho * s + keep * o)
        .collect()
}

fn unit_rms(mut v: Vec<f64>) -> Vec<f64> {
    let rms = libm::sqrt(v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64);
    if rms > 0.0 {
        v.iter_mut().for_each(|x| *x /= rms);
    }
    v
}

/// The mixed generative parameters `spec` samples from.
pub fn generative_params(spec: &SyntheticDomainSpec) -> Result<GenerativeParams> {
    spec.validate()?;
    let shared = raw_params(spec, spec.shared_seed);
    let own = raw_params(spec, spec.seed ^ 0x9e37_79b9_7f4a_7c15);
    let rho = spec.relatedness;
    Ok(GenerativeParams {
        textures: shared
            .textures
            .iter()
            .zip(&own.textures)
            .map(|(s, o)| unit_rms(mix(s, o, rho)))
            .collect(),
        prototypes: shared
            .prototypes
            .iter()
            .zip(&own.prototypes)
            .map(|(s, o)| mix(s, o, rho))
            .collect(),
    })
}

/// Samples a synthetic domain; a pure function of `spec`.
pub fn gen_synthetic_domain(spec: &SyntheticDomainSpec) -> Result<LabeledDataset> {
    let params = generative_params(spec)?;
    let [c, h, w] = spec.image;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(1);
    let norm = 1.0 / libm::sqrt(spec.textures as f64);
    let mut examples = Vec::with_capacity(spec.num_labels * spec.examples_per_label);
    for (label, proto) in params.prototypes.iter().enumerate() {
        for _ in 0..spec.examples_per_label {
            let mut img = alloc::vec![0.0; c * h * w];
            for (tex, &p) in params.textures.iter().zip(proto) {
                let noise: f64 = rng.sample(StandardNormal);
                let coef = (p + spec.coefficient_noise * noise) * norm;
                img.iter_mut().zip(tex).for_each(|(v, t)| *v += coef * t);
            }
            let dy = rng.random_range(0..=spec.max_shift) % h;
            let dx = rng.random_range(0..=spec.max_shift) % w;
            let mut shifted = alloc::vec![0.0; img.len()];
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let noise: f64 = rng.sample(StandardNormal);
                        shifted[(ch * h + (i + dy) % h) * w + (j + dx) % w] =
                            img[(ch * h + i) * w + j] + spec.pixel_noise * noise;
                    }
                }
            }
            examples.push(Example {
                features: Tensor::new(alloc::vec![c, h, w], shifted)?,
                label,
            });
        }
    }
    let label_names = (0..spec.num_labels)
        .map(|l| format!("{}-{l}", spec.name))
        .collect();
    LabeledDataset::new(spec.name.clone(), label_names, examples)
}

/// Per-label example counts, keyed by label name.
pub fn label_histogram(ds: &LabeledDataset) -> BTreeMap<String, usize> {
    ds.label_names
        .iter()
        .cloned()
        .zip(ds.label_counts())
        .collect()
}
