//! Accuracy-variation metrics.

use crate::error::{invalid, Error, Result};

/// `(best - other) / other * 100`.
pub fn percent_gain(best: f64, other: f64) -> Result<f64> {
    if other == 0.0 {
        return Err(Error::ZeroDenominator("percent_gain"));
    }
    if !(other > 0.0) {
        return Err(invalid("other", "must be positive"));
    }
    Ok((best - other) / other * 100.0)
}

/// Percentage range `(max - min) / min * 100` of accuracies.
pub fn beta(accuracies: &[f64]) -> Result<f64> {
    let (min, max) = min_max(accuracies).ok_or_else(|| invalid("accuracies", "empty"))?;
    if min == 0.0 {
        return Err(Error::ZeroDenominator("beta"));
    }
    if !(min > 0.0) {
        return Err(invalid("accuracies", "must be positive"));
    }
    Ok((max - min) / min * 100.0)
}

/// The IL achieving the maximum accuracy; ties go to the smallest IL.
pub fn alpha(accuracy_by_il: &[(f64, f64)]) -> Result<f64> {
    let mut best: Option<(f64, f64)> = None;
    for &(il, acc) in accuracy_by_il {
        best = match best {
            Some((bil, bacc)) if bacc > acc || (bacc == acc && bil <= il) => Some((bil, bacc)),
            _ => Some((il, acc)),
        };
    }
    best.map(|(il, _)| il)
        .ok_or_else(|| invalid("accuracy_by_il", "empty"))
}

pub fn min_max(values: &[f64]) -> Option<(f64, f64)> {
    let first = *values.first()?;
    Some(
        values
            .iter()
            .fold((first, first), |(lo, hi), &v| (lo.min(v), hi.max(v))),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gain_examples() {
        assert!((percent_gain(91.06, 73.17).unwrap() - 24.45).abs() < 0.05);
        assert_eq!(percent_gain(3.0, 3.0).unwrap(), 0.0);
        assert!((percent_gain(13.12, 5.80).unwrap() - 126.21).abs() < 0.005);
        assert_eq!(
            percent_gain(1.0, 0.0),
            Err(Error::ZeroDenominator("percent_gain"))
        );
    }

    #[test]
    fn beta_examples() {
        assert_eq!(beta(&[0.4, 0.4, 0.4]).unwrap(), 0.0);
        assert!((beta(&[5.80, 9.47, 13.12]).unwrap() - 126.21).abs() < 0.005);
        assert_eq!(beta(&[0.7]).unwrap(), 0.0);
        assert!(beta(&[0.0, 0.5]).is_err());
        assert!(beta(&[]).is_err());
    }

    #[test]
    fn alpha_ties_prefer_smaller_il() {
        assert_eq!(
            alpha(&[(0.01, 0.5), (0.0001, 0.5), (0.001, 0.4)]).unwrap(),
            0.0001
        );
        assert_eq!(
            alpha(&[(0.0, 0.1), (0.0001, 0.3), (0.001, 0.2), (0.01, 0.25)]).unwrap(),
            0.0001
        );
        assert!(alpha(&[]).is_err());
    }
}
