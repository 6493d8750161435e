//! Leave-one-out target encoding for categorical columns.

use std::collections::BTreeMap;

#[derive(Clone, Debug, PartialEq)]
pub struct LooEncoderState {
    /// Per category: (target sum, count).
    pub categories: BTreeMap<String, (f64, u64)>,
    pub global_mean: f64,
}

/// Encodes a training column and returns the fitted state.
///
/// Each training row gets the mean target of the *other* rows in its
/// category; categories seen once fall back to the global mean.
pub fn fit_apply_loo(column: &[String], targets: &[f64]) -> (Vec<f64>, LooEncoderState) {
    assert_eq!(column.len(), targets.len(), "column and target lengths differ");
    let mut categories: BTreeMap<String, (f64, u64)> = BTreeMap::new();
    for (c, &y) in column.iter().zip(targets) {
        let e = categories.entry(c.clone()).or_insert((0.0, 0));
        e.0 += y;
        e.1 += 1;
    }
    let global_mean = if targets.is_empty() {
        0.0
    } else {
        targets.iter().sum::<f64>() / targets.len() as f64
    };
    let encoded = column
        .iter()
        .zip(targets)
        .map(|(c, &y)| {
            let (sum, count) = categories[c];
            if count > 1 {
                (sum - y) / (count - 1) as f64
            } else {
                global_mean
            }
        })
        .collect();
    (
        encoded,
        LooEncoderState {
            categories,
            global_mean,
        },
    )
}

impl LooEncoderState {
    /// Encoding for rows outside the training set: category mean, or the
    /// global mean for unseen categories.
    pub fn apply(&self, category: &str) -> f64 {
        match self.categories.get(category) {
            Some(&(sum, count)) if count > 0 => sum / count as f64,
            _ => self.global_mean,
        }
    }
}
