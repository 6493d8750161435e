//! Quantile transform to a standard normal marginal.
//!
//! `Q` evenly spaced empirical quantiles of the training column are stored
//! as reference values at CDF levels `k / (Q − 1)`. A new value is mapped to
//! a CDF level by piecewise-linear interpolation between references and then
//! through `Φ⁻¹`, with levels clipped to `[1e-7, 1 − 1e-7]`. Values outside
//! the training range clamp to the boundary quantiles.

use statrs::distribution::{ContinuousCDF, Normal};

pub const DEFAULT_QUANTILES: usize = 1000;

/// CDF levels are clipped to `[CLIP, 1 − CLIP]` before `Φ⁻¹`.
pub const CLIP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq)]
pub struct QuantileTransformState {
    /// Nondecreasing reference values; level `k` is `k / (len − 1)`.
    pub references: Vec<f64>,
}

/// Fits the transform on training values. `quantiles` is capped at the
/// number of values. NaNs are ignored.
pub fn fit_quantile_transform(values: &[f64], quantiles: usize) -> QuantileTransformState {
    let mut sorted: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    if n == 0 {
        return QuantileTransformState { references: Vec::new() };
    }
    let q = quantiles.clamp(1, n);
    let references = (0..q)
        .map(|k| {
            let level = if q == 1 { 0.0 } else { k as f64 / (q - 1) as f64 };
            let pos = level * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            let frac = pos - lo as f64;
            sorted[lo] + frac * (sorted[hi] - sorted[lo])
        })
        .collect();
    let state = QuantileTransformState { references };
    if state.is_degenerate() {
        log::warn!("quantile transform fitted on a constant column; output will be 0");
    }
    state
}

pub fn inverse_normal_cdf(p: f64) -> f64 {
    Normal::standard().inverse_cdf(p)
}

impl QuantileTransformState {
    pub fn is_degenerate(&self) -> bool {
        match (self.references.first(), self.references.last()) {
            (Some(a), Some(b)) => a == b,
            _ => true,
        }
    }

    fn level(&self, k: usize) -> f64 {
        k as f64 / (self.references.len() - 1) as f64
    }

    /// Empirical CDF level of `x` in `[0, 1]`.
    pub fn cdf_level(&self, x: f64) -> f64 {
        let r = &self.references;
        let last = r.len() - 1;
        if x <= r[0] {
            return 0.0;
        }
        if x >= r[last] {
            return 1.0;
        }
        // Interpolate from both sides so runs of equal references map to
        // the middle of their level range.
        let j = r.partition_point(|&v| v <= x) - 1;
        let fwd = if r[j] == x {
            self.level(j)
        } else {
            self.level(j) + (x - r[j]) / (r[j + 1] - r[j]) * (self.level(j + 1) - self.level(j))
        };
        let i = r.partition_point(|&v| v < x);
        let bwd = if r[i] == x {
            self.level(i)
        } else {
            self.level(i - 1) + (x - r[i - 1]) / (r[i] - r[i - 1]) * (self.level(i) - self.level(i - 1))
        };
        0.5 * (fwd + bwd)
    }

    pub fn apply(&self, x: f64) -> f64 {
        if self.is_degenerate() {
            return 0.0;
        }
        inverse_normal_cdf(self.cdf_level(x).clamp(CLIP, 1.0 - CLIP))
    }

    pub fn apply_all(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| self.apply(v)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Φ⁻¹ by bisection on Φ(x) = erfc(−x/√2)/2.
    fn probit_oracle(p: f64) -> f64 {
        let phi = |x: f64| 0.5 * statrs::function::erf::erfc(-x / std::f64::consts::SQRT_2);
        let (mut lo, mut hi) = (-40.0, 40.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if phi(mid) < p {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn three_point_column() {
        let st = fit_quantile_transform(&[1.0, 2.0, 3.0], 3);
        assert_eq!(st.references, vec![1.0, 2.0, 3.0]);
        let lo = probit_oracle(1e-7);
        assert!((lo - (-5.199)).abs() < 1e-3);
        assert!((st.apply(1.0) - lo).abs() < 1e-9);
        assert!(st.apply(2.0).abs() < 1e-6);
        assert!((st.apply(3.0) + lo).abs() < 1e-9);
    }

    #[test]
    fn below_range_clamps_to_minimum_image() {
        let st = fit_quantile_transform(&[1.0, 2.0, 3.0, 7.0, 9.0], 5);
        assert_eq!(st.apply(-100.0), st.apply(1.0));
        assert_eq!(st.apply(1e9), st.apply(9.0));
    }

    #[test]
    fn median_maps_to_zero() {
        let v: Vec<f64> = (0..101).map(|i| (i as f64 * 0.3).exp()).collect();
        let st = fit_quantile_transform(&v, 101);
        assert!(st.apply(v[50]).abs() < 1e-6);
    }

    #[test]
    fn constant_column_maps_to_zero() {
        let st = fit_quantile_transform(&[4.0; 10], 1000);
        assert!(st.is_degenerate());
        assert_eq!(st.apply(4.0), 0.0);
        assert_eq!(st.apply(-1.0), 0.0);
    }

    #[test]
    fn ties_map_to_the_middle_of_their_levels() {
        let st = fit_quantile_transform(&[0.0, 1.0, 1.0, 1.0, 2.0], 5);
        assert!((st.cdf_level(1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn quantile_count_is_capped() {
        let st = fit_quantile_transform(&[3.0, 1.0, 2.0], 1000);
        assert_eq!(st.references.len(), 3);
    }
}
