use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{invalid, Result};
use crate::optim::MultiplierSchedule;

/// How the base multipliers map onto the inner stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "kebab-case"))]
pub enum GraduatedLayout {
    /// One multiplier per inner stage, in order.
    #[default]
    OnePerStage,
    /// The first two inner stages share the first multiplier; every later
    /// stage takes the next one. Needs one fewer multiplier than stages.
    SharedFirst,
}

/// Graduated multipliers swept over a set of global scales.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct GraduatedSpec {
    pub multipliers: Vec<f64>,
    pub head_multiplier: f64,
    pub scales: Vec<f64>,
    pub layout: GraduatedLayout,
    pub inner_stages: Vec<String>,
    pub head: String,
    /// Head multiplier of the head-only (IL = 0) baseline jobs.
    pub baseline_head_multiplier: f64,
}

impl Default for GraduatedSpec {
    fn default() -> Self {
        Self {
            multipliers: alloc::vec![0.0, 1.0, 2.0, 4.0, 8.0],
            head_multiplier: 16.0,
            scales: alloc::vec![0.25, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0, 7.0, 10.0],
            layout: GraduatedLayout::OnePerStage,
            inner_stages: (1..=5).map(|i| format!("conv{i}")).collect(),
            head: "fc".to_string(),
            baseline_head_multiplier: 10.0,
        }
    }
}

impl GraduatedSpec {
    pub fn validate(&self) -> Result<()> {
        let needed = match self.layout {
            GraduatedLayout::OnePerStage => self.inner_stages.len(),
            GraduatedLayout::SharedFirst => self.inner_stages.len().saturating_sub(1),
        };
        if self.inner_stages.len() < 2 || self.multipliers.len() != needed {
            return Err(invalid(
                "multipliers",
                format!(
                    "{:?} layout over {} inner stages needs {needed} multipliers, got {}",
                    self.layout,
                    self.inner_stages.len(),
                    self.multipliers.len()
                ),
            ));
        }
        if self
            .multipliers
            .iter()
            .any(|m| !(*m >= 0.0 && m.is_finite()))
        {
            return Err(invalid("multipliers", "must be non-negative"));
        }
        if self.multipliers.windows(2).any(|w| w[0] > w[1]) {
            return Err(invalid(
                "multipliers",
                "must be non-decreasing across stages",
            ));
        }
        if !(self.head_multiplier >= 0.0 && self.baseline_head_multiplier >= 0.0) {
            return Err(invalid("head_multiplier", "must be non-negative"));
        }
        if self.scales.is_empty() || self.scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(invalid(
                "scales",
                "must be a non-empty list of positive values",
            ));
        }
        if self.scales.windows(2).any(|w| w[0] >= w[1]) {
            return Err(invalid(
                "scales",
                "must be sorted ascending without repeats",
            ));
        }
        Ok(())
    }

    /// Multiplier assigned to each inner stage, in stage order.
    pub fn stage_multipliers(&self) -> Vec<f64> {
        match self.layout {
            GraduatedLayout::OnePerStage => self.multipliers.clone(),
            GraduatedLayout::SharedFirst => core::iter::once(self.multipliers[0])
                .chain(self.multipliers.iter().copied())
                .collect(),
        }
    }

    /// Head-only schedule used for the baseline jobs.
    pub fn baseline_schedule(&self) -> MultiplierSchedule {
        MultiplierSchedule::new(
            self.inner_stages
                .iter()
                .map(|s| (s.clone(), 0.0))
                .chain([(self.head.clone(), self.baseline_head_multiplier)]),
            1.0,
        )
    }
}

/// Graduated multipliers on the inner stages, the head multiplier on the
/// head, and `scale` on top of all of them.
pub fn graduated_schedule(spec: &GraduatedSpec, scale: f64) -> Result<MultiplierSchedule> {
    spec.validate()?;
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(invalid("scale", format!("{scale} must be positive")));
    }
    let inner = spec
        .inner_stages
        .iter()
        .cloned()
        .zip(spec.stage_multipliers());
    Ok(MultiplierSchedule::new(
        inner.chain([(spec.head.clone(), spec.head_multiplier)]),
        scale,
    ))
}
