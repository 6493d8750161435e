//! Seeded synthetic tasks used by tests, benches and the ablation harness.

use rand::Rng;
use rand_distr::StandardNormal;

use super::dataset::{Dataset, Target};
use crate::error::Result;
use crate::tensor::Tensor;
use crate::{rng_from_seed, NodeRng};

fn uniform_matrix(rng: &mut NodeRng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches data")
}

fn labels(bits: impl Iterator<Item = bool>) -> Target {
    Target::Labels(bits.map(|b| if b { "1" } else { "0" }.to_string()).collect())
}

/// `y = 1[x_3 > 0.5]` over `x ~ U(0, 1)^features`; `features ≥ 4`.
pub fn single_split(rows: usize, features: usize, seed: u64) -> Result<Dataset> {
    assert!(features >= 4, "the decisive feature is x_3");
    let mut rng = rng_from_seed(seed);
    let x = uniform_matrix(&mut rng, rows, features, 0.0, 1.0);
    let y = labels((0..rows).map(|r| x.row(r)[3] > 0.5));
    Dataset::from_matrix(&x, None, "y", Some(y))
}

/// `y = 1[x_0 > 0] ⊕ 1[x_1 > 0]` over `x ~ U(−1, 1)^2`.
pub fn xor(rows: usize, seed: u64) -> Result<Dataset> {
    let mut rng = rng_from_seed(seed);
    let x = uniform_matrix(&mut rng, rows, 2, -1.0, 1.0);
    let y = labels((0..rows).map(|r| (x.row(r)[0] > 0.0) ^ (x.row(r)[1] > 0.0)));
    Dataset::from_matrix(&x, None, "y", Some(y))
}

/// Standard-normal features with labels independent of them.
pub fn random_labels(rows: usize, features: usize, seed: u64) -> Result<Dataset> {
    let mut rng = rng_from_seed(seed);
    let data = (0..rows * features).map(|_| rng.sample(StandardNormal)).collect();
    let x = Tensor::new(vec![rows, features], data)?;
    let y = labels((0..rows).map(|_| rng.random_bool(0.5)));
    Dataset::from_matrix(&x, None, "y", Some(y))
}

pub const YEAR_FEATURES: usize = 90;

/// Regression data shaped like the million-song year prediction task:
/// 90 numeric columns (12 timbre means, 78 timbre covariances) driven by
/// ten latent factors, and an integer release year in `[1922, 2011]` that
/// depends nonlinearly on the latents.
pub fn year_prediction_like(rows: usize, seed: u64) -> Result<Dataset> {
    const LATENT: usize = 10;
    let mut rng = rng_from_seed(seed);
    let loadings: Vec<f64> = (0..YEAR_FEATURES * LATENT)
        .map(|_| rng.sample::<f64, _>(StandardNormal) / (LATENT as f64).sqrt())
        .collect();
    let scales: Vec<f64> = (0..YEAR_FEATURES).map(|j| if j < 12 { 40.0 } else { 400.0 }).collect();
    let mut x = Vec::with_capacity(rows * YEAR_FEATURES);
    let mut y = Vec::with_capacity(rows);
    for _ in 0..rows {
        let z: Vec<f64> = (0..LATENT).map(|_| rng.sample(StandardNormal)).collect();
        for j in 0..YEAR_FEATURES {
            let mix: f64 = (0..LATENT).map(|k| loadings[j * LATENT + k] * z[k]).sum();
            let noise: f64 = rng.sample(StandardNormal);
            let v = mix + 0.3 * noise;
            // covariance-like columns are heavy tailed
            let v = if j < 12 { v } else { v * v.abs() };
            x.push(scales[j] * v);
        }
        let signal = 4.0 * z[0] + 3.0 * (1.5 * z[1]).sin() + 2.0 * z[2] * z[3] + 2.5 * z[4].abs()
            - 3.0 * (z[5] > 0.5) as u8 as f64;
        let noise: f64 = rng.sample(StandardNormal);
        y.push((1998.0 + signal + 3.0 * noise).round().clamp(1922.0, 2011.0));
    }
    let names = (0..YEAR_FEATURES)
        .map(|j| if j < 12 { format!("timbre_avg_{j}") } else { format!("timbre_cov_{}", j - 12) })
        .collect();
    let x = Tensor::new(vec![rows, YEAR_FEATURES], x)?;
    Dataset::from_matrix(&x, Some(names), "year", Some(Target::Values(y)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ColumnData;

    #[test]
    fn single_split_labels_follow_x3() {
        let ds = single_split(200, 5, 1).unwrap();
        let Some(Target::Labels(y)) = &ds.target else { panic!() };
        let ColumnData::Numeric(x3) = &ds.data[3] else { panic!() };
        for (l, v) in y.iter().zip(x3) {
            assert_eq!(l == "1", *v > 0.5);
        }
    }

    #[test]
    fn xor_is_balanced() {
        let ds = xor(4000, 2).unwrap();
        let Some(Target::Labels(y)) = &ds.target else { panic!() };
        let ones = y.iter().filter(|l| *l == "1").count() as f64 / 4000.0;
        assert!((ones - 0.5).abs() < 0.05);
    }

    #[test]
    fn generators_are_seeded() {
        assert_eq!(year_prediction_like(50, 3).unwrap(), year_prediction_like(50, 3).unwrap());
        assert_ne!(random_labels(50, 3, 1).unwrap(), random_labels(50, 3, 2).unwrap());
    }

    #[test]
    fn year_targets_are_integral_and_in_range() {
        let ds = year_prediction_like(500, 4).unwrap();
        assert_eq!(ds.columns.len(), YEAR_FEATURES);
        let Some(Target::Values(y)) = &ds.target else { panic!() };
        assert!(y.iter().all(|v| v.fract() == 0.0 && (1922.0..=2011.0).contains(v)));
    }
}
