use alloc::format;
use alloc::vec::Vec;

use crate::error::{invalid, Result};

/// `10^exponent`, exact for the decimal literals it stands for.
pub fn power_of_ten(exponent: i32) -> f64 {
    let mag = 10u64.pow(exponent.unsigned_abs()) as f64;
    if exponent < 0 {
        1.0 / mag
    } else {
        mag
    }
}

/// IL x LL grid: for each LL value `m`, IL ranges over `{0} ∪ {10^k <= m}`
/// with `k >= min_il_exponent`.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GridSpec {
    pub ll_values: Vec<f64>,
    #[cfg_attr(feature = "serde", serde(default = "default_min_exponent"))]
    pub min_il_exponent: i32,
}

fn default_min_exponent() -> i32 {
    -4
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            ll_values: alloc::vec![0.01, 0.1],
            min_il_exponent: default_min_exponent(),
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ll_values.is_empty() {
            return Err(invalid("ll_values", "empty"));
        }
        if let Some(bad) = self
            .ll_values
            .iter()
            .find(|v| !(**v > 0.0 && v.is_finite()))
        {
            return Err(invalid("ll_values", format!("{bad} must be positive")));
        }
        if self.min_il_exponent < -15 || self.min_il_exponent > 15 {
            return Err(invalid("min_il_exponent", "outside [-15, 15]"));
        }
        Ok(())
    }

    /// IL values for one LL, ascending, starting with 0.
    pub fn il_values(&self, ll: f64) -> Vec<f64> {
        let mut out = alloc::vec![0.0];
        let mut k = self.min_il_exponent;
        loop {
            let v = power_of_ten(k);
            if v > ll * (1.0 + 1e-9) || k > 15 {
                break;
            }
            out.push(v);
            k += 1;
        }
        out
    }

    pub fn run_count(&self) -> usize {
        self.ll_values
            .iter()
            .map(|&ll| self.il_values(ll).len())
            .sum()
    }
}
