//! TOML run configuration.
//!
//! ```toml
//! seed = 7
//! batch_size = 16
//! workers = 4
//!
//! [paths]
//! out = "runs/plants"
//! source = "data/plants"
//! targets = ["data/oxford", "data/fungus"]
//!
//! [source_policy]
//! base_lr = 0.01
//! step_size = 300
//! gamma = 0.1
//! total_iterations = 900
//!
//! [sweep]
//! kind = "grid"
//! grid = { ll_values = [0.01, 0.1] }
//! ```
//!
//! Relative paths resolve against the working directory. Every field except
//! `seed` has a default; the target policy defaults to the source policy
//! with a tenth of its iterations and step size.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tlrate_core::data::SyntheticDomainSpec;
use tlrate_core::experiment::{GraduatedSpec, GridSpec};
use tlrate_core::model::{mini_staged_spec, ModelSpec, StageSpec};
use tlrate_core::nn::LayerSpec;
use tlrate_core::optim::{LrPolicy, DEFAULT_MOMENTUM};

use crate::dataset_io::MANIFEST;
use crate::error::{io_at, Error, Result};

pub const HEAD_STAGE: &str = "fc";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_momentum")]
    pub momentum: f64,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Share of every dataset held out for validation.
    #[serde(default = "default_val_fraction")]
    pub val_fraction: f64,
    #[serde(default = "default_source_id")]
    pub source_id: String,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "LrPolicy::source_default")]
    pub source_policy: LrPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_policy: Option<LrPolicy>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub finetune: Option<FinetuneConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub generate: Vec<GenerateConfig>,
}

fn default_batch() -> usize {
    16
}
fn default_momentum() -> f64 {
    DEFAULT_MOMENTUM
}
fn default_workers() -> usize {
    1
}
fn default_val_fraction() -> f64 {
    0.2
}
fn default_source_id() -> String {
    "source".into()
}
fn default_out() -> PathBuf {
    "out".into()
}
fn default_width() -> usize {
    4
}
fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    #[serde(default = "default_out")]
    pub out: PathBuf,
    /// Source dataset directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<PathBuf>,
    /// Target dataset directories; each directory name is a task id.
    #[serde(default)]
    pub targets: Vec<PathBuf>,
    /// Defaults to `<out>/checkpoints/source.ftlb`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
    /// Defaults to `<out>/ledger.jsonl`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ledger: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            out: default_out(),
            source: None,
            targets: Vec::new(),
            checkpoint: None,
            ledger: None,
        }
    }
}

/// Inner stages; the dense head `fc` sized to the label count is appended.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_true")]
    pub residual: bool,
    /// Replaces the built-in five-stage layout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inner_stages: Option<Vec<StageSpec>>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            width: default_width(),
            residual: true,
            inner_stages: None,
        }
    }
}

impl ModelConfig {
    pub fn spec(&self, input_shape: &[usize], num_labels: usize) -> Result<ModelSpec> {
        match &self.inner_stages {
            Some(stages) => {
                let mut stages = stages.clone();
                stages.push(StageSpec::new(
                    HEAD_STAGE,
                    vec![LayerSpec::Dense {
                        outputs: num_labels,
                    }],
                ));
                Ok(ModelSpec {
                    input_shape: input_shape.to_vec(),
                    stages,
                    num_labels,
                })
            }
            None => {
                let [c, h, w] = <[usize; 3]>::try_from(input_shape).map_err(|_| {
                    Error::Config(vec![format!(
                        "model: the built-in layout needs [channels, height, width] features, got {input_shape:?}"
                    )])
                })?;
                Ok(mini_staged_spec(
                    [c, h, w],
                    self.width,
                    self.residual,
                    num_labels,
                ))
            }
        }
    }
}

/// One finetuning run: either an IL/LL pair or a graduated scale.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub il: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ll: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<f64>,
    #[serde(default)]
    pub graduated: GraduatedSpec,
    #[serde(default)]
    pub save_checkpoint: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    LastLayer,
    Grid,
    Scale,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub kind: SweepKind,
    /// LL values of a `last-layer` sweep.
    #[serde(default = "default_ll_values")]
    pub ll_values: Vec<f64>,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub graduated: GraduatedSpec,
    /// Also run one head-only baseline per task in a `scale` sweep.
    #[serde(default)]
    pub baseline: bool,
    #[serde(default)]
    pub save_checkpoints: bool,
}

fn default_ll_values() -> Vec<f64> {
    vec![0.01, 0.1]
}

/// A synthetic domain written by `gen-data`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateConfig {
    pub path: PathBuf,
    pub name: String,
    pub num_labels: usize,
    pub examples_per_label: usize,
    pub relatedness: f64,
    pub seed: u64,
    /// Writes the four partitions and the target as subdirectories.
    #[serde(default)]
    pub partition: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub textures: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coefficient_noise: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pixel_noise: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_shift: Option<usize>,
}

impl GenerateConfig {
    pub fn spec(&self) -> SyntheticDomainSpec {
        let d = SyntheticDomainSpec::new(
            &self.name,
            self.num_labels,
            self.examples_per_label,
            self.relatedness,
            self.seed,
        );
        SyntheticDomainSpec {
            image: self.image.unwrap_or(d.image),
            textures: self.textures.unwrap_or(d.textures),
            shared_seed: self.shared_seed.unwrap_or(d.shared_seed),
            coefficient_noise: self.coefficient_noise.unwrap_or(d.coefficient_noise),
            pixel_noise: self.pixel_noise.unwrap_or(d.pixel_noise),
            max_shift: self.max_shift.unwrap_or(d.max_shift),
            ..d
        }
    }
}

/// What a command needs from the configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Command {
    GenData,
    TrainSource,
    Finetune,
    Sweep,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path).map_err(io_at(path))?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format {
            what: "configuration",
            reason: e.to_string(),
        })
    }

    pub fn target_policy(&self) -> LrPolicy {
        self.target_policy
            .unwrap_or_else(|| self.source_policy.for_target())
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths
            .checkpoint
            .clone()
            .unwrap_or_else(|| self.paths.out.join("checkpoints").join("source.ftlb"))
    }

    pub fn ledger_path(&self) -> PathBuf {
        self.paths
            .ledger
            .clone()
            .unwrap_or_else(|| self.paths.out.join("ledger.jsonl"))
    }

    /// Task ids of the target directories, in configuration order.
    pub fn task_ids(&self) -> Vec<String> {
        self.paths
            .targets
            .iter()
            .map(|p| {
                p.file_name()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            })
            .collect()
    }

    /// Checks everything `command` depends on and reports every problem at once.
    pub fn validate(&self, command: Command) -> Result<()> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        check(
            self.seed <= i64::MAX as u64,
            format!("seed: {} exceeds {}", self.seed, i64::MAX),
        );
        check(self.batch_size > 0, "batch_size: must be positive".into());
        check(
            (0.0..1.0).contains(&self.momentum),
            format!("momentum: {} not in [0, 1)", self.momentum),
        );
        check(self.workers > 0, "workers: must be positive".into());
        check(
            self.val_fraction > 0.0 && self.val_fraction < 1.0,
            format!("val_fraction: {} not in (0, 1)", self.val_fraction),
        );
        check(
            !self.source_id.is_empty(),
            "source_id: must not be empty".into(),
        );
        if let Err(e) = self.source_policy.validate() {
            errs.push(format!("source_policy: {e}"));
        }
        if let Some(Err(e)) = self.target_policy.map(|p| p.validate()) {
            errs.push(format!("target_policy: {e}"));
        }
        self.validate_model(&mut errs);
        let dataset = |errs: &mut Vec<String>, field: &str, p: &Path| {
            if !p.join(MANIFEST).is_file() {
                errs.push(format!(
                    "{field}: no dataset at {} (missing {MANIFEST})",
                    p.display()
                ));
            }
        };
        match command {
            Command::GenData => {
                if self.generate.is_empty() {
                    errs.push("generate: no domains listed".into());
                }
                for (i, g) in self.generate.iter().enumerate() {
                    if let Err(e) = tlrate_core::data::generative_params(&g.spec()) {
                        errs.push(format!("generate[{i}]: {e}"));
                    }
                    if g.seed > i64::MAX as u64
                        || g.shared_seed.is_some_and(|s| s > i64::MAX as u64)
                    {
                        errs.push(format!("generate[{i}].seed: exceeds {}", i64::MAX));
                    }
                }
            }
            Command::TrainSource => match &self.paths.source {
                Some(p) => dataset(&mut errs, "paths.source", p),
                None => errs.push("paths.source: missing".into()),
            },
            Command::Finetune | Command::Sweep => {
                if self.paths.targets.is_empty() {
                    errs.push("paths.targets: no target datasets listed".into());
                }
                for (i, p) in self.paths.targets.iter().enumerate() {
                    dataset(&mut errs, &format!("paths.targets[{i}]"), p);
                }
                let ids = self.task_ids();
                let unique: BTreeSet<&String> = ids.iter().collect();
                if unique.len() != ids.len() || ids.iter().any(String::is_empty) {
                    errs.push(
                        "paths.targets: directory names must be distinct and non-empty".into(),
                    );
                }
                let ck = self.checkpoint_path();
                if !ck.is_file() {
                    errs.push(format!(
                        "paths.checkpoint: no source checkpoint at {}",
                        ck.display()
                    ));
                }
                if command == Command::Finetune {
                    self.validate_finetune(&mut errs);
                } else {
                    self.validate_sweep(&mut errs);
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    fn validate_model(&self, errs: &mut Vec<String>) {
        match &self.model.inner_stages {
            None => {
                if self.model.width == 0 {
                    errs.push("model.width: must be positive".into());
                }
            }
            Some(stages) => {
                let mut seen = BTreeSet::new();
                if stages.is_empty() {
                    errs.push("model.inner_stages: empty".into());
                }
                for (i, s) in stages.iter().enumerate() {
                    if s.name.is_empty() || s.name == HEAD_STAGE || !seen.insert(s.name.as_str()) {
                        errs.push(format!(
                            "model.inner_stages[{i}].name: `{}` must be non-empty, unique and not `{HEAD_STAGE}`",
                            s.name
                        ));
                    }
                }
            }
        }
    }

    fn validate_finetune(&self, errs: &mut Vec<String>) {
        let Some(f) = &self.finetune else {
            errs.push("finetune: section missing".into());
            return;
        };
        let rate = |v: Option<f64>| v.is_none_or(|x| x >= 0.0 && x.is_finite());
        if !rate(f.il) || !rate(f.ll) {
            errs.push("finetune.il, finetune.ll: must be finite and non-negative".into());
        }
        match (f.il, f.ll, f.scale) {
            (Some(_), Some(_), None) => {}
            (None, None, Some(s)) => {
                if !(s > 0.0 && s.is_finite()) {
                    errs.push(format!("finetune.scale: {s} must be positive"));
                }
                if let Err(e) = f.graduated.validate() {
                    errs.push(format!("finetune.graduated: {e}"));
                }
            }
            _ => errs.push("finetune: set both `il` and `ll`, or only `scale`".into()),
        }
    }

    fn validate_sweep(&self, errs: &mut Vec<String>) {
        let Some(s) = &self.sweep else {
            errs.push("sweep: section missing".into());
            return;
        };
        match s.kind {
            SweepKind::LastLayer => {
                if s.ll_values.is_empty()
                    || s.ll_values.iter().any(|v| !(*v > 0.0 && v.is_finite()))
                {
                    errs.push("sweep.ll_values: must be a non-empty list of positive rates".into());
                }
            }
            SweepKind::Grid => {
                if let Err(e) = s.grid.validate() {
                    errs.push(format!("sweep.grid: {e}"));
                }
            }
            SweepKind::Scale => {
                if let Err(e) = s.graduated.validate() {
                    errs.push(format!("sweep.graduated: {e}"));
                }
            }
        }
    }
}
