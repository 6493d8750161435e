//! Data-aware initialisation from the first training batch.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::ops::{softplus_inv, Concat, MatMulT};
use crate::autodiff::Operation;
use crate::choice::saturation_gap;
use crate::error::{NodeError, Result};
use crate::model::NodeModel;
use crate::odt::{feature_weights, TAU_OFFSET};
use crate::tensor::Tensor;
use crate::NodeRng;

/// Fraction of the saturation gap occupied by the widest first-batch score.
pub const INIT_MARGIN: f64 = 0.9;

/// Smallest initial scale; used when a selected feature is constant on the batch.
pub const TAU_FLOOR: f64 = 1e-3;

/// Initialises every layer in one forward sweep over `batch`:
///
/// * `F ~ U(0, 1)`;
/// * `b[t, i] = f̂_{t,i}(x_s)` for a uniformly drawn batch row `s`;
/// * `τ[t, i] = max_s |f̂_{t,i}(x_s) − b[t, i]| / (0.9 · g*)`, so every
///   first-batch score lies strictly inside the unsaturated region;
/// * `R ~ N(0, 1)`.
///
/// Deeper layers are initialised on the concatenated outputs of the
/// already initialised layers.
pub fn data_aware_init(model: &mut NodeModel, batch: &Tensor, rng: &mut NodeRng) -> Result<()> {
    if batch.ndim() != 2 || batch.dim(0) < 2 {
        return Err(NodeError::InvalidArgument(format!(
            "data-aware init needs a batch of at least 2 rows, got shape {:?}",
            batch.shape()
        )));
    }
    if batch.dim(1) != model.input_dim {
        return Err(crate::error::shape_err("data_aware_init", model.input_dim, batch.dim(1)));
    }
    let rows = batch.dim(0);
    let mut outputs: Vec<Tensor> = Vec::with_capacity(model.layers.len());
    for layer in &mut model.layers {
        let input = {
            let mut parts = vec![batch];
            parts.extend(outputs.iter());
            Concat.forward(&parts)?
        };
        let cfg = layer.config.clone();
        let k = cfg.trees * cfg.depth;
        let gap = saturation_gap(&cfg.choice);

        layer
            .selection
            .value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.random::<f64>());
        let weights = feature_weights(&cfg.choice, &layer.selection.value, None)?;
        let fhat = MatMulT.forward(&[&input, &weights])?;

        let mut floored = 0usize;
        for j in 0..k {
            let s = rng.random_range(0..rows);
            let b = fhat.row(s)[j];
            let spread = (0..rows).map(|r| (fhat.row(r)[j] - b).abs()).fold(0.0, f64::max);
            let mut tau = spread / (INIT_MARGIN * gap);
            if tau < TAU_FLOOR {
                tau = TAU_FLOOR;
                floored += 1;
            }
            layer.thresholds.value.data_mut()[j] = b;
            layer.scales.value.data_mut()[j] = softplus_inv(tau - TAU_OFFSET);
        }
        if floored > 0 {
            log::warn!(
                "{}: {floored} of {k} selected features are constant on the first batch; scale floor {TAU_FLOOR} applied",
                layer.selection.name
            );
        }
        layer
            .response
            .value
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = rng.sample(StandardNormal));
        outputs.push(layer.forward(&input)?);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::choice::{gate, ChoiceKind};
    use crate::model::{ArchConfig, Task};
    use crate::odt::gate_vector;
    use crate::rng_from_seed;

    fn batch(rows: usize, n: usize, seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        Tensor::new(vec![rows, n], (0..rows * n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    }

    fn model(layers: usize) -> NodeModel {
        NodeModel::new(
            Task::Regression,
            5,
            &ArchConfig {
                num_layers: layers,
                trees_per_layer: 8,
                depth: 3,
                tree_dim: 2,
                choice: ChoiceKind::entmax15(),
            },
        )
        .unwrap()
    }

    #[test]
    fn every_first_batch_gate_is_unsaturated() {
        let x = batch(64, 5, 1);
        let mut m = model(3);
        data_aware_init(&mut m, &x, &mut rng_from_seed(2)).unwrap();
        let mut outputs: Vec<Tensor> = Vec::new();
        for layer in &m.layers {
            let mut parts = vec![&x];
            parts.extend(outputs.iter());
            let input = Concat.forward(&parts).unwrap();
            let w = feature_weights(&layer.config.choice, &layer.selection.value, None).unwrap();
            let fhat = MatMulT.forward(&[&input, &w]).unwrap();
            let c = gate_vector(&fhat, &layer.thresholds.value, &layer.tau(), &layer.config.choice).unwrap();
            assert!(c.data().iter().all(|&v| v > 0.0 && v < 1.0));
            outputs.push(layer.forward(&input).unwrap());
        }
    }

    #[test]
    fn entmax15_gap_bounds_the_scores() {
        let g = saturation_gap(&ChoiceKind::entmax15());
        assert!((g - 2.0).abs() < 1e-9);
        assert!(gate(INIT_MARGIN * g, 1.5) < 1.0);
    }

    #[test]
    fn initialisation_is_bit_identical_per_seed() {
        let x = batch(32, 5, 3);
        let (mut a, mut b) = (model(2), model(2));
        data_aware_init(&mut a, &x, &mut rng_from_seed(4)).unwrap();
        data_aware_init(&mut b, &x, &mut rng_from_seed(4)).unwrap();
        assert_eq!(a.layers, b.layers);
    }

    #[test]
    fn selection_is_uniform_in_unit_interval() {
        let mut m = model(1);
        data_aware_init(&mut m, &batch(16, 5, 5), &mut rng_from_seed(6)).unwrap();
        assert!(m.layers[0].selection.value.data().iter().all(|&v| (0.0..1.0).contains(&v)));
    }

    #[test]
    fn constant_features_get_the_floor() {
        let mut m = model(1);
        let x = Tensor::full(&[8, 5], 3.0);
        data_aware_init(&mut m, &x, &mut rng_from_seed(7)).unwrap();
        assert!(m.layers[0].tau().data().iter().all(|&t| (t - TAU_FLOOR).abs() < 1e-12));
    }

    #[test]
    fn single_row_batch_is_rejected() {
        let mut m = model(1);
        assert!(data_aware_init(&mut m, &batch(1, 5, 8), &mut rng_from_seed(0)).is_err());
    }
}
