//! Summary statistics over per-call and per-review samples.

use serde::{Deserialize, Serialize};

/// Mean and quartiles of a sample. Quartiles use linear interpolation
/// between order statistics (position `q * (n - 1)`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub count: usize,
    pub mean: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
}

impl Distribution {
    /// `None` for an empty sample. Non-finite values are rejected by callers.
    pub fn from_samples(samples: &[f64]) -> Option<Distribution> {
        if samples.is_empty() {
            return None;
        }
        let mut scratch = samples.to_vec();
        Some(Distribution {
            count: samples.len(),
            mean: samples.iter().sum::<f64>() / samples.len() as f64,
            q1: quantile_unsorted(&mut scratch, 0.25),
            median: quantile_unsorted(&mut scratch, 0.5),
            q3: quantile_unsorted(&mut scratch, 0.75),
        })
    }

    pub fn iqr(&self) -> f64 {
        self.q3 - self.q1
    }
}

/// Quantile by selection; reorders `values` but does not fully sort it.
pub fn quantile_unsorted(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "quantile of empty sample");
    let n = values.len();
    let pos = q.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let frac = pos - lo as f64;
    let (_, lo_value, upper) = values.select_nth_unstable_by(lo, f64::total_cmp);
    let lo_value = *lo_value;
    if frac == 0.0 || upper.is_empty() {
        return lo_value;
    }
    let hi_value = upper.iter().copied().min_by(f64::total_cmp).expect("non-empty");
    lo_value + (hi_value - lo_value) * frac
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // Independent oracle: full sort, then interpolate.
    fn sorted_quantile(values: &[f64], q: f64) -> f64 {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let pos = q * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    }

    #[test]
    fn mean_of_ten_twenty_thirty() {
        let d = Distribution::from_samples(&[10.0, 20.0, 30.0]).unwrap();
        assert_eq!(d.mean, 20.0);
        assert_eq!(d.median, 20.0);
        assert_eq!(d.q1, 15.0);
        assert_eq!(d.q3, 25.0);
    }

    #[test]
    fn empty_sample_has_no_distribution() {
        assert!(Distribution::from_samples(&[]).is_none());
    }

    proptest! {
        #[test]
        fn selection_matches_sorting(values in proptest::collection::vec(-1e6f64..1e6, 1..200), q in 0.0f64..=1.0) {
            let mut scratch = values.clone();
            prop_assert_eq!(quantile_unsorted(&mut scratch, q), sorted_quantile(&values, q));
        }
    }
}
