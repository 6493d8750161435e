//! Inference with precomputed sparse feature selectors.
//!
//! Selector rows are evaluated once and stored as `(feature, weight)` pairs
//! holding only the nonzero weights. Gates, leaf expansion and the response
//! contraction are unchanged, so predictions match the dense model up to
//! the order of skipped zero terms.

use crate::choice::ChoiceKind;
use crate::data::{Dataset, Preprocessor};
use crate::error::{shape_err, NodeError, Result};
use crate::model::{softmax_rows, NodeModel, Task};
use crate::odt::{expand, feature_weights};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct CompiledLayer {
    pub trees: usize,
    pub depth: usize,
    pub input_dim: usize,
    /// One sparse selector per `(tree, depth)`, tree-major.
    pub selectors: Vec<Vec<(u32, f64)>>,
    pub thresholds: Vec<f64>,
    /// Positive scales `τ`.
    pub scales: Vec<f64>,
    /// `(m, 2^d, l)` row-major.
    pub response: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompiledModel {
    pub task: Task,
    pub input_dim: usize,
    pub tree_dim: usize,
    /// Gate function; Gumbel-softmax gates are hard steps.
    pub choice: ChoiceKind,
    pub layers: Vec<CompiledLayer>,
    pub preprocessor: Option<Preprocessor>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SparsityReport {
    pub total_weights: usize,
    pub stored_weights: usize,
    /// Fraction of selector weights dropped as exact zeros, in `[0, 1]`.
    pub dropped_fraction: f64,
}

/// Evaluates every selector row once and drops the zeros.
pub fn compile(model: &NodeModel) -> Result<CompiledModel> {
    let choice = model.choice().clone();
    if matches!(choice, ChoiceKind::Softmax) {
        log::warn!("softmax selectors have no exact zeros; the compiled model stays dense");
    }
    let layers = model
        .layers
        .iter()
        .map(|layer| {
            let cfg = &layer.config;
            let w = feature_weights(&cfg.choice, &layer.selection.value, None)?;
            let selectors = w
                .data()
                .chunks_exact(cfg.input_dim)
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .filter(|(_, &v)| v != 0.0)
                        .map(|(j, &v)| (j as u32, v))
                        .collect()
                })
                .collect();
            Ok(CompiledLayer {
                trees: cfg.trees,
                depth: cfg.depth,
                input_dim: cfg.input_dim,
                selectors,
                thresholds: layer.thresholds.value.data().to_vec(),
                scales: layer.tau().into_data(),
                response: layer.response.value.data().to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CompiledModel {
        task: model.task,
        input_dim: model.input_dim,
        tree_dim: model.tree_dim,
        choice,
        layers,
        preprocessor: model.preprocessor.clone(),
    })
}

impl CompiledModel {
    pub fn sparsity(&self) -> SparsityReport {
        let total: usize = self.layers.iter().map(|l| l.selectors.len() * l.input_dim).sum();
        let stored: usize = self.layers.iter().flat_map(|l| &l.selectors).map(Vec::len).sum();
        SparsityReport {
            total_weights: total,
            stored_weights: stored,
            dropped_fraction: if total == 0 { 0.0 } else { 1.0 - stored as f64 / total as f64 },
        }
    }

    pub fn total_trees(&self) -> usize {
        self.layers.iter().map(|l| l.trees).sum()
    }

    /// Raw head output `(batch, head_dim)` for preprocessed input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.ndim() != 2 || x.dim(1) != self.input_dim {
            return Err(shape_err("compiled_forward", format!("(batch, {})", self.input_dim), x.shape()));
        }
        let (l, h) = (self.tree_dim, self.task.head_dim());
        let scale = 1.0 / self.total_trees() as f64;
        let width = self.input_dim + self.total_trees() * l;
        let max_leaves = self.layers.iter().map(|ly| 1usize << ly.depth).max().unwrap_or(1);
        let mut out = vec![0.0; x.dim(0) * h];
        par::for_each_row(&mut out, h, |s, head| {
            let mut input = Vec::with_capacity(width);
            input.extend_from_slice(x.row(s));
            let mut gates = Vec::new();
            let mut leaves = vec![0.0; max_leaves];
            for ly in &self.layers {
                let nl = 1usize << ly.depth;
                let leaves = &mut leaves[..nl];
                let mut produced = vec![0.0; ly.trees * l];
                for t in 0..ly.trees {
                    gates.clear();
                    for i in 0..ly.depth {
                        let k = t * ly.depth + i;
                        let f: f64 = ly.selectors[k].iter().map(|&(j, w)| input[j as usize] * w).sum();
                        gates.push(self.choice.gate((f - ly.thresholds[k]) / ly.scales[k]));
                    }
                    expand(&gates, leaves);
                    let o = &mut produced[t * l..(t + 1) * l];
                    for (idx, &wi) in leaves.iter().enumerate() {
                        if wi == 0.0 {
                            continue;
                        }
                        let r = &ly.response[(t * nl + idx) * l..(t * nl + idx + 1) * l];
                        for (a, &rv) in o.iter_mut().zip(r) {
                            *a += wi * rv;
                        }
                    }
                }
                for tree in produced.chunks_exact(l) {
                    for (a, v) in head.iter_mut().zip(&tree[..h]) {
                        *a += v;
                    }
                }
                input.extend_from_slice(&produced);
            }
            head.iter_mut().for_each(|a| *a *= scale);
        });
        Tensor::new(vec![x.dim(0), h], out)
    }

    /// Probabilities or training-scale regression values for preprocessed input.
    pub fn predict_encoded(&self, x: &Tensor) -> Result<Tensor> {
        let head = self.forward(x)?;
        Ok(match self.task {
            Task::Classification { .. } => softmax_rows(&head),
            Task::Regression => head,
        })
    }

    /// Predictions for raw rows, regression values on the original scale.
    pub fn predict(&self, data: &Dataset) -> Result<Tensor> {
        let pre = self
            .preprocessor
            .as_ref()
            .ok_or(NodeError::Unfitted("no preprocessing state"))?;
        let out = self.predict_encoded(&pre.transform_features(data)?)?;
        Ok(match self.task {
            Task::Classification { .. } => out,
            Task::Regression => out.map(|v| pre.decode_value(v)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::choice::TemperatureSchedule;
    use crate::model::LayerSpec;
    use crate::rng_from_seed;
    use rand::Rng;

    fn model(choice: ChoiceKind, seed: u64) -> NodeModel {
        let specs = [LayerSpec { trees: 6, depth: 3 }, LayerSpec { trees: 4, depth: 2 }];
        let mut m = NodeModel::from_specs(Task::Classification { classes: 2 }, 5, &specs, 2, choice).unwrap();
        let mut rng = rng_from_seed(seed);
        for p in m.parameters_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-2.0..2.0));
        }
        m
    }

    fn inputs(rows: usize, seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        Tensor::new(vec![rows, 5], (0..rows * 5).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap()
    }

    #[test]
    fn parity_with_dense_model() {
        for choice in [ChoiceKind::entmax15(), ChoiceKind::Sparsemax, ChoiceKind::Softmax] {
            let m = model(choice, 1);
            let c = compile(&m).unwrap();
            let x = inputs(200, 2);
            assert!(c.forward(&x).unwrap().max_abs_diff(&m.forward(&x).unwrap()) <= 1e-12);
        }
    }

    #[test]
    fn one_hot_selectors_compile_to_singletons() {
        let mut m = model(ChoiceKind::entmax15(), 3);
        for layer in &mut m.layers {
            let n = layer.config.input_dim;
            for (r, row) in layer.selection.value.data_mut().chunks_exact_mut(n).enumerate() {
                row.iter_mut().for_each(|v| *v = 0.0);
                row[r % n] = 100.0;
            }
        }
        let c = compile(&m).unwrap();
        assert!(c.layers.iter().flat_map(|l| &l.selectors).all(|s| s.len() == 1));
    }

    #[test]
    fn gumbel_compiles_through_hard_argmax() {
        let m = model(ChoiceKind::GumbelSoftmax(TemperatureSchedule::default()), 4);
        let c = compile(&m).unwrap();
        assert!(c.layers.iter().flat_map(|l| &l.selectors).all(|s| s.len() == 1 && s[0].1 == 1.0));
        let x = inputs(50, 5);
        assert!(c.forward(&x).unwrap().max_abs_diff(&m.forward(&x).unwrap()) <= 1e-12);
    }

    #[test]
    fn sparsity_fraction_is_a_fraction() {
        for choice in [ChoiceKind::entmax15(), ChoiceKind::Softmax] {
            let s = compile(&model(choice, 6)).unwrap().sparsity();
            assert!((0.0..=1.0).contains(&s.dropped_fraction));
            assert!(s.stored_weights <= s.total_weights);
        }
        let s = compile(&model(ChoiceKind::Softmax, 6)).unwrap().sparsity();
        assert_eq!(s.dropped_fraction, 0.0);
    }

    #[test]
    fn stored_selectors_sum_to_one() {
        let c = compile(&model(ChoiceKind::entmax15(), 7)).unwrap();
        for s in c.layers.iter().flat_map(|l| &l.selectors) {
            assert!((s.iter().map(|p| p.1).sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
