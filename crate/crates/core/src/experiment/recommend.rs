use alloc::format;
use alloc::vec::Vec;

use super::grid::GridSpec;
use crate::error::{invalid, Result};

/// Step function from target images/label to an inner-layer rate.
///
/// The non-zero IL values of the grid for the given LL form levels, lowest
/// first; each threshold crossed moves one level up, capped at the top.
/// Small targets therefore get the smallest non-zero IL and large ones the
/// largest value the grid allows.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default))]
pub struct Recommender {
    /// Ascending images/label thresholds.
    pub thresholds: Vec<f64>,
    pub min_il_exponent: i32,
}

impl Default for Recommender {
    fn default() -> Self {
        Self {
            thresholds: alloc::vec![20.0, 40.0],
            min_il_exponent: -4,
        }
    }
}

impl Recommender {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.windows(2).any(|w| w[0] > w[1])
            || self.thresholds.iter().any(|t| !t.is_finite())
        {
            return Err(invalid("thresholds", "must be finite and ascending"));
        }
        Ok(())
    }

    pub fn recommend(&self, images_per_label: f64, ll: f64) -> Result<f64> {
        if !(images_per_label > 0.0 && images_per_label.is_finite()) {
            return Err(invalid(
                "images_per_label",
                format!("{images_per_label} must be positive"),
            ));
        }
        if !(ll > 0.0 && ll.is_finite()) {
            return Err(invalid("ll", format!("{ll} must be positive")));
        }
        self.validate()?;
        let grid = GridSpec {
            ll_values: alloc::vec![ll],
            min_il_exponent: self.min_il_exponent,
        };
        let levels = grid.il_values(ll);
        let nonzero = &levels[1..];
        let Some(top) = nonzero.len().checked_sub(1) else {
            return Ok(0.0);
        };
        let level = self
            .thresholds
            .iter()
            .filter(|&&t| images_per_label >= t)
            .count();
        Ok(nonzero[level.min(top)])
    }
}

/// Recommendation with the default thresholds.
pub fn recommend_multipliers(images_per_label: f64, ll: f64) -> Result<f64> {
    Recommender::default().recommend(images_per_label, ll)
}
