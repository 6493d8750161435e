//! Permutation importance, per-tree contributions and binned reports.

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::error::{NodeError, Result};
use crate::model::NodeModel;
use crate::par;
use crate::rng_from_seed;
use crate::tensor::Tensor;
use crate::train::metric;

/// A column that can be permuted: a raw input feature or a layer-output
/// column at the concatenation boundary.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum FeatureRef {
    Raw { column: usize },
    Learned { layer: usize, column: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImportanceRecord {
    pub name: String,
    pub feature: FeatureRef,
    /// Mean metric increase over repeats.
    pub importance: f64,
    pub std: f64,
}

/// Every raw feature followed by every layer-output column.
pub fn all_features(model: &NodeModel) -> Vec<FeatureRef> {
    let raw = (0..model.input_dim).map(|column| FeatureRef::Raw { column });
    let learned = model.layers.iter().enumerate().flat_map(|(layer, l)| {
        (0..l.config.output_dim()).map(move |column| FeatureRef::Learned { layer, column })
    });
    raw.chain(learned).collect()
}

pub fn feature_name(model: &NodeModel, f: FeatureRef) -> String {
    match f {
        FeatureRef::Raw { column } => model
            .preprocessor
            .as_ref()
            .and_then(|p| p.features.get(column))
            .map_or_else(|| format!("f{column}"), |c| c.name.clone()),
        FeatureRef::Learned { layer, column } => {
            let l = model.tree_dim;
            format!("layer{layer}.tree{}.ch{}", column / l, column % l)
        }
    }
}

fn permute_column(t: &mut Tensor, column: usize, perm: &[usize]) {
    let w = t.dim(1);
    let original: Vec<f64> = (0..t.dim(0)).map(|s| t.data()[s * w + column]).collect();
    for (s, &p) in perm.iter().enumerate() {
        t.data_mut()[s * w + column] = original[p];
    }
}

/// Metric with `feature` permuted by `perm`, recomputing only the layers
/// downstream of the permuted column.
pub fn permuted_metric(model: &NodeModel, x: &Tensor, y: &[f64], feature: FeatureRef, perm: &[usize]) -> Result<f64> {
    if perm.len() != x.dim(0) {
        return Err(crate::error::shape_err("permuted_metric", x.dim(0), perm.len()));
    }
    let head = match feature {
        FeatureRef::Raw { column } => {
            let mut xp = x.clone();
            permute_column(&mut xp, column, perm);
            model.forward(&xp)?
        }
        FeatureRef::Learned { layer, column } => {
            let mut outs = model.layer_outputs(x)?;
            outs.truncate(layer + 1);
            permute_column(&mut outs[layer], column, perm);
            let outs = model.continue_from(x, outs)?;
            model.head_from_outputs(&outs)?
        }
    };
    Ok(metric(model.task, &head, y))
}

/// `importance(j) = mean_r [metric(j permuted) − metric]` over `repeats`
/// permutations. Each feature draws from its own stream of `seed`, so the
/// result does not depend on evaluation order.
pub fn permutation_importance(
    model: &NodeModel,
    x: &Tensor,
    y: &[f64],
    features: &[FeatureRef],
    repeats: usize,
    seed: u64,
) -> Result<Vec<ImportanceRecord>> {
    if repeats < 1 {
        return Err(NodeError::InvalidArgument("repeats must be at least 1".into()));
    }
    let baseline = metric(model.task, &model.forward(x)?, y);
    let rows = x.dim(0);
    par::map_indices(features.len(), |i| {
        let f = features[i];
        let mut rng = rng_from_seed(seed);
        rng.set_stream(i as u64);
        let mut deltas = Vec::with_capacity(repeats);
        for _ in 0..repeats {
            let mut perm: Vec<usize> = (0..rows).collect();
            perm.shuffle(&mut rng);
            deltas.push(permuted_metric(model, x, y, f, &perm)? - baseline);
        }
        let mean = deltas.iter().sum::<f64>() / repeats as f64;
        let var = deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / repeats as f64;
        Ok(ImportanceRecord {
            name: feature_name(model, f),
            feature: f,
            importance: mean,
            std: var.sqrt(),
        })
    })
    .into_iter()
    .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TreeContribution {
    pub layer: usize,
    pub tree: usize,
    /// Mean over rows of `‖head slice‖₁ / total_trees`.
    pub contribution: f64,
}

/// Mean absolute share of each tree in the averaged head. The head slice
/// is the first `|C|` channels (one for regression), measured in L1.
pub fn tree_contributions(model: &NodeModel, x: &Tensor) -> Result<Vec<TreeContribution>> {
    let outs = model.layer_outputs(x)?;
    let (l, h) = (model.tree_dim, model.head_dim());
    let denom = (model.total_trees() * x.dim(0)) as f64;
    let mut result = Vec::with_capacity(model.total_trees());
    for (layer, out) in outs.iter().enumerate() {
        for tree in 0..model.layers[layer].config.trees {
            let total: f64 = (0..x.dim(0))
                .map(|s| out.row(s)[tree * l..tree * l + h].iter().map(|v| v.abs()).sum::<f64>())
                .sum();
            result.push(TreeContribution {
                layer,
                tree,
                contribution: total / denom,
            });
        }
    }
    Ok(result)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BinReport {
    pub min: f64,
    pub max: f64,
    /// Sum of the importances falling in each bin.
    pub totals: Vec<f64>,
    pub counts: Vec<usize>,
    /// All values equal: a single bin holds everything.
    pub degenerate: bool,
}

/// Partitions `values` into `bins` equal-width bins over their range.
pub fn importance_report(values: &[f64], bins: usize) -> Result<BinReport> {
    if bins == 0 || values.is_empty() {
        return Err(NodeError::InvalidArgument("need at least one value and one bin".into()));
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        log::warn!("all importances are equal; reporting a single bin");
        return Ok(BinReport {
            min,
            max,
            totals: vec![values.iter().sum()],
            counts: vec![values.len()],
            degenerate: true,
        });
    }
    let width = (max - min) / bins as f64;
    let mut totals = vec![0.0; bins];
    let mut counts = vec![0; bins];
    for &v in values {
        let b = (((v - min) / width) as usize).min(bins - 1);
        totals[b] += v;
        counts[b] += 1;
    }
    Ok(BinReport {
        min,
        max,
        totals,
        counts,
        degenerate: false,
    })
}

/// One report per source: raw features (`None`) and each layer.
pub fn importance_report_by_layer(records: &[ImportanceRecord], bins: usize) -> Result<Vec<(Option<usize>, BinReport)>> {
    let mut groups: Vec<(Option<usize>, Vec<f64>)> = Vec::new();
    for r in records {
        let key = match r.feature {
            FeatureRef::Raw { .. } => None,
            FeatureRef::Learned { layer, .. } => Some(layer),
        };
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r.importance),
            None => groups.push((key, vec![r.importance])),
        }
    }
    groups
        .into_iter()
        .map(|(k, v)| Ok((k, importance_report(&v, bins)?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::choice::ChoiceKind;
    use crate::model::{LayerSpec, Task};
    use rand::Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Every selector is one-hot on feature 0.
    fn feature0_model(layers: usize) -> NodeModel {
        let specs = vec![LayerSpec { trees: 3, depth: 2 }; layers];
        let mut m = NodeModel::from_specs(Task::Regression, 4, &specs, 1, ChoiceKind::entmax15()).unwrap();
        let mut rng = rng_from_seed(1);
        for layer in &mut m.layers {
            let n = layer.config.input_dim;
            for row in layer.selection.value.data_mut().chunks_exact_mut(n) {
                row.iter_mut().for_each(|v| *v = 0.0);
                row[0] = 50.0;
            }
            layer.thresholds.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
            layer.response.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        m
    }

    #[test]
    fn unselected_features_have_exactly_zero_importance() {
        let m = feature0_model(2);
        let x = random(100, 4, 2);
        let y = m.forward(&x).unwrap().into_data();
        let recs = permutation_importance(&m, &x, &y, &all_features(&m), 3, 7).unwrap();
        for r in &recs {
            match r.feature {
                FeatureRef::Raw { column: 0 } => assert!(r.importance > 0.0),
                FeatureRef::Raw { .. } => assert_eq!(r.importance, 0.0),
                FeatureRef::Learned { .. } => {}
            }
        }
    }

    #[test]
    fn identity_permutation_changes_nothing() {
        let m = feature0_model(2);
        let x = random(20, 4, 3);
        let y = vec![0.0; 20];
        let base = metric(m.task, &m.forward(&x).unwrap(), &y);
        let id: Vec<usize> = (0..20).collect();
        for f in all_features(&m) {
            assert_eq!(permuted_metric(&m, &x, &y, f, &id).unwrap(), base);
        }
    }

    #[test]
    fn zero_repeats_is_an_error() {
        let m = feature0_model(1);
        let x = random(5, 4, 4);
        assert!(permutation_importance(&m, &x, &[0.0; 5], &[], 0, 0).is_err());
    }

    #[test]
    fn zero_response_tree_contributes_nothing() {
        let mut m = feature0_model(1);
        let leaves = 4;
        m.layers[0].response.value.data_mut()[..leaves].iter_mut().for_each(|v| *v = 0.0);
        let c = tree_contributions(&m, &random(30, 4, 5)).unwrap();
        assert_eq!(c[0].contribution, 0.0);
        assert!(c[1].contribution > 0.0);
    }

    #[test]
    fn single_tree_contribution_is_mean_abs_head() {
        let mut m = NodeModel::from_specs(Task::Regression, 3, &[LayerSpec { trees: 1, depth: 2 }], 1, ChoiceKind::entmax15()).unwrap();
        let mut rng = rng_from_seed(9);
        for p in m.parameters_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        let x = random(40, 3, 6);
        let head = m.forward(&x).unwrap();
        let mean_abs = head.data().iter().map(|v| v.abs()).sum::<f64>() / 40.0;
        let c = tree_contributions(&m, &x).unwrap();
        assert!((c[0].contribution - mean_abs).abs() < 1e-12);
    }

    #[test]
    fn contributions_bound_the_head() {
        let m = feature0_model(2);
        let x = random(40, 4, 7);
        let head = m.forward(&x).unwrap();
        let mean_abs = head.data().iter().map(|v| v.abs()).sum::<f64>() / 40.0;
        let total: f64 = tree_contributions(&m, &x).unwrap().iter().map(|c| c.contribution).sum();
        assert!(total >= mean_abs - 1e-12);
    }

    #[test]
    fn evenly_spaced_values_fill_one_bin_each() {
        let v: Vec<f64> = (0..7).map(f64::from).collect();
        let r = importance_report(&v, 7).unwrap();
        assert_eq!(r.counts, vec![1; 7]);
        assert!((r.totals.iter().sum::<f64>() - 21.0).abs() < 1e-12);
    }

    #[test]
    fn equal_values_collapse_to_one_bin() {
        let r = importance_report(&[0.2; 5], 7).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.counts, vec![5]);
    }

    #[test]
    fn bin_totals_partition_the_sum() {
        let mut rng = rng_from_seed(8);
        let v: Vec<f64> = (0..50).map(|_| rng.random_range(-1.0..3.0)).collect();
        let r = importance_report(&v, 7).unwrap();
        assert!((r.totals.iter().sum::<f64>() - v.iter().sum::<f64>()).abs() < 1e-12);
        assert_eq!(r.counts.iter().sum::<usize>(), 50);
    }
}
