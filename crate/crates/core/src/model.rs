//! Densely connected multi-layer ensemble.
//!
//! Layer `i` reads `[x, h_0, …, h_{i−1}]`, the raw input followed by every
//! earlier layer's output, so its input width is `n + Σ_{j<i} m_j · l`.
//! The head averages the leading channels of every tree of every layer with
//! the same weight `1 / total_trees`.

use crate::autodiff::{Operation, Tape, Var};
use crate::choice::{ChoiceKind, Sampler};
use crate::data::{Dataset, Preprocessor};
use crate::error::{shape_err, NodeError, Result};
use crate::odt::{LayerConfig, OdtLayer};
use crate::par;
use crate::tensor::{Parameter, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Classification { classes: usize },
    Regression,
}

impl Task {
    /// Number of leading tree channels the head reads.
    pub fn head_dim(&self) -> usize {
        match *self {
            Task::Classification { classes } => classes,
            Task::Regression => 1,
        }
    }

    pub fn is_classification(&self) -> bool {
        matches!(self, Task::Classification { .. })
    }
}

/// Shape of one layer before its input width is known.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub trees: usize,
    pub depth: usize,
}

/// Architecture with equally sized layers.
#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub num_layers: usize,
    pub trees_per_layer: usize,
    pub depth: usize,
    pub tree_dim: usize,
    pub choice: ChoiceKind,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            num_layers: 1,
            trees_per_layer: 2048,
            depth: 6,
            tree_dim: 1,
            choice: ChoiceKind::entmax15(),
        }
    }
}

/// Provenance recorded with a trained model.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelMetadata {
    pub seed: u64,
    /// Hex SHA-256 of the run configuration, empty when trained without one.
    pub config_digest: String,
    /// Best validation metric on the model's training scale; NaN if never evaluated.
    pub val_metric: f64,
    pub steps: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NodeModel {
    pub task: Task,
    pub input_dim: usize,
    pub tree_dim: usize,
    pub layers: Vec<OdtLayer>,
    pub preprocessor: Option<Preprocessor>,
    pub metadata: ModelMetadata,
}

/// Input width of every layer under dense connectivity.
pub fn layer_input_dims(input_dim: usize, trees: &[usize], tree_dim: usize) -> Vec<usize> {
    let mut width = input_dim;
    trees
        .iter()
        .map(|&m| {
            let w = width;
            width += m * tree_dim;
            w
        })
        .collect()
}

impl NodeModel {
    /// Zero-initialised model with one entry of `specs` per layer.
    pub fn from_specs(task: Task, input_dim: usize, specs: &[LayerSpec], tree_dim: usize, choice: ChoiceKind) -> Result<Self> {
        let mut errs = Vec::new();
        if specs.is_empty() {
            errs.push("at least one layer is required".to_string());
        }
        if tree_dim < task.head_dim() {
            errs.push(format!(
                "tree output dim {tree_dim} is smaller than the head width {}",
                task.head_dim()
            ));
        }
        if let Task::Classification { classes } = task {
            if classes < 2 {
                errs.push(format!("classification needs at least 2 classes, got {classes}"));
            }
        }
        if !errs.is_empty() {
            return Err(NodeError::Config(errs));
        }
        let trees: Vec<usize> = specs.iter().map(|s| s.trees).collect();
        let dims = layer_input_dims(input_dim, &trees, tree_dim);
        let layers = specs
            .iter()
            .zip(dims)
            .enumerate()
            .map(|(i, (s, n))| {
                OdtLayer::zeros(
                    LayerConfig {
                        trees: s.trees,
                        depth: s.depth,
                        tree_dim,
                        input_dim: n,
                        choice: choice.clone(),
                    },
                    &format!("layer{i}"),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NodeModel {
            task,
            input_dim,
            tree_dim,
            layers,
            preprocessor: None,
            metadata: ModelMetadata {
                val_metric: f64::NAN,
                ..ModelMetadata::default()
            },
        })
    }

    pub fn new(task: Task, input_dim: usize, arch: &ArchConfig) -> Result<Self> {
        let spec = LayerSpec {
            trees: arch.trees_per_layer,
            depth: arch.depth,
        };
        Self::from_specs(task, input_dim, &vec![spec; arch.num_layers], arch.tree_dim, arch.choice.clone())
    }

    pub fn total_trees(&self) -> usize {
        self.layers.iter().map(|l| l.config.trees).sum()
    }

    pub fn head_dim(&self) -> usize {
        self.task.head_dim()
    }

    pub fn choice(&self) -> &ChoiceKind {
        &self.layers[0].config.choice
    }

    /// Parameters in tape-slot order: four per layer.
    pub fn parameters(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(|l| l.parameters()).collect()
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(|l| l.parameters_mut()).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.ndim() != 2 || x.dim(1) != self.input_dim {
            return Err(shape_err("model_forward", format!("(batch, {})", self.input_dim), x.shape()));
        }
        Ok(())
    }

    fn head(&self) -> TreeAverage {
        TreeAverage {
            tree_dim: self.tree_dim,
            head_dim: self.head_dim(),
        }
    }

    /// Every layer's output for preprocessed input `x`.
    pub fn layer_outputs(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        self.continue_from(x, Vec::with_capacity(self.layers.len()))
    }

    /// Completes `outputs` (the first few layer outputs) with the remaining layers.
    pub fn continue_from(&self, x: &Tensor, mut outputs: Vec<Tensor>) -> Result<Vec<Tensor>> {
        for layer in &self.layers[outputs.len()..] {
            let out = {
                let mut parts: Vec<&Tensor> = vec![x];
                parts.extend(outputs.iter());
                let input = if parts.len() == 1 {
                    x.clone()
                } else {
                    crate::autodiff::ops::Concat.forward(&parts)?
                };
                layer.forward(&input)?
            };
            outputs.push(out);
        }
        Ok(outputs)
    }

    /// Head output from a full set of layer outputs.
    pub fn head_from_outputs(&self, outputs: &[Tensor]) -> Result<Tensor> {
        let parts: Vec<&Tensor> = outputs.iter().collect();
        self.head().forward(&parts)
    }

    /// Raw head output `(batch, head_dim)`; logits for classification.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let outputs = self.layer_outputs(x)?;
        self.head_from_outputs(&outputs)
    }

    /// Classic hard-lookup forward: every layer replaced by its hardened trees.
    pub fn hard_forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let mut outputs: Vec<Tensor> = Vec::new();
        for layer in &self.layers {
            let mut parts: Vec<&Tensor> = vec![x];
            parts.extend(outputs.iter());
            let input = crate::autodiff::ops::Concat.forward(&parts)?;
            outputs.push(layer.hard_forward(&input)?);
        }
        self.head_from_outputs(&outputs)
    }

    /// Records the forward pass. Parameter `p` of layer `i` uses slot `4i + p`.
    pub fn record(&self, tape: &mut Tape, x: Var, sampler: Option<&mut Sampler>) -> Result<Var> {
        let params: Vec<Var> = self
            .parameters()
            .iter()
            .enumerate()
            .map(|(slot, p)| tape.param(slot, p.value.clone()))
            .collect();
        self.record_with_params(tape, x, &params, sampler)
    }

    /// Records the forward pass with existing variables for every
    /// parameter, four per layer in [`NodeModel::parameters`] order.
    pub fn record_with_params(&self, tape: &mut Tape, x: Var, params: &[Var], mut sampler: Option<&mut Sampler>) -> Result<Var> {
        self.check_input(tape.value(x))?;
        if params.len() != 4 * self.layers.len() {
            return Err(shape_err("model_record", 4 * self.layers.len(), params.len()));
        }
        let mut outputs: Vec<Var> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let mut parts = vec![x];
            parts.extend_from_slice(&outputs);
            let input = tape.concat(&parts)?;
            let p = [params[4 * i], params[4 * i + 1], params[4 * i + 2], params[4 * i + 3]];
            outputs.push(layer.record_with_params(tape, input, p, sampler.as_deref_mut())?);
        }
        tape.apply(self.head(), &outputs)
    }

    /// Class probabilities `(batch, |C|)` or regression values on the
    /// model's training scale `(batch, 1)` for preprocessed input.
    pub fn predict_encoded(&self, x: &Tensor) -> Result<Tensor> {
        let head = self.forward(x)?;
        Ok(match self.task {
            Task::Classification { .. } => softmax_rows(&head),
            Task::Regression => head,
        })
    }

    /// Predictions for raw rows: class probabilities or regression values
    /// on the target's original scale.
    pub fn predict(&self, data: &Dataset) -> Result<Tensor> {
        let pre = self
            .preprocessor
            .as_ref()
            .ok_or(NodeError::Unfitted("no preprocessing state"))?;
        let x = pre.transform_features(data)?;
        let out = self.predict_encoded(&x)?;
        Ok(match self.task {
            Task::Classification { .. } => out,
            Task::Regression => out.map(|v| pre.decode_value(v)),
        })
    }
}

/// Row-wise softmax of a `(batch, k)` matrix.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let k = logits.dim(1);
    let mut out = logits.data().to_vec();
    for row in out.chunks_exact_mut(k) {
        let p = crate::choice::softmax(row);
        row.copy_from_slice(&p);
    }
    Tensor::new(logits.shape().to_vec(), out).expect("shape unchanged")
}

/// Tree-uniform head over layer outputs `(batch, m_i · l)`.
///
/// `out[s, c] = Σ_i Σ_t h_i[s, t·l + c] / Σ_i m_i` for `c < head_dim`.
pub struct TreeAverage {
    pub tree_dim: usize,
    pub head_dim: usize,
}

impl TreeAverage {
    fn dims(&self, inputs: &[&Tensor]) -> Result<(usize, usize)> {
        let batch = inputs.first().map_or(0, |t| t.dim(0));
        let mut trees = 0;
        for t in inputs {
            if t.ndim() != 2 || t.dim(0) != batch || t.dim(1) % self.tree_dim != 0 {
                return Err(shape_err("tree_average", format!("({batch}, m·{})", self.tree_dim), t.shape()));
            }
            trees += t.dim(1) / self.tree_dim;
        }
        if trees == 0 {
            return Err(shape_err("tree_average", "at least one tree", 0));
        }
        Ok((batch, trees))
    }
}

impl Operation for TreeAverage {
    fn name(&self) -> &'static str {
        "tree_average"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (batch, trees) = self.dims(inputs)?;
        let (l, h) = (self.tree_dim, self.head_dim);
        let scale = 1.0 / trees as f64;
        let mut out = vec![0.0; batch * h];
        par::for_each_row(&mut out, h, |s, row| {
            for t in inputs {
                for tree in t.row(s).chunks_exact(l) {
                    for (o, v) in row.iter_mut().zip(&tree[..h]) {
                        *o += v;
                    }
                }
            }
            row.iter_mut().for_each(|o| *o *= scale);
        });
        Tensor::new(vec![batch, h], out)
    }

    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, up: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (_, trees) = self.dims(inputs)?;
        let (l, h) = (self.tree_dim, self.head_dim);
        let scale = 1.0 / trees as f64;
        Ok(inputs
            .iter()
            .zip(needs)
            .map(|(t, &need)| {
                need.then(|| {
                    let w = t.dim(1);
                    let mut d = vec![0.0; t.len()];
                    par::for_each_row(&mut d, w, |s, row| {
                        let u = up.row(s);
                        for tree in row.chunks_exact_mut(l) {
                            for (o, g) in tree[..h].iter_mut().zip(u) {
                                *o = g * scale;
                            }
                        }
                    });
                    Tensor::new(t.shape().to_vec(), d).expect("shape preserved")
                })
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::rng_from_seed;
    use rand::Rng;

    fn random_model(task: Task, n: usize, specs: &[LayerSpec], l: usize, seed: u64) -> NodeModel {
        let mut model = NodeModel::from_specs(task, n, specs, l, ChoiceKind::entmax15()).unwrap();
        let mut rng = rng_from_seed(seed);
        for p in model.parameters_mut() {
            p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-1.0..1.0));
        }
        model
    }

    fn random_x(rows: usize, n: usize, seed: u64) -> Tensor {
        let mut rng = rng_from_seed(seed);
        Tensor::new(vec![rows, n], (0..rows * n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn single_layer_input_is_raw_features() {
        let m = NodeModel::new(
            Task::Regression,
            7,
            &ArchConfig {
                num_layers: 1,
                trees_per_layer: 3,
                depth: 2,
                tree_dim: 1,
                choice: ChoiceKind::entmax15(),
            },
        )
        .unwrap();
        assert_eq!(m.layers[0].config.input_dim, 7);
    }

    #[test]
    fn dense_connectivity_widths() {
        assert_eq!(layer_input_dims(10, &[4, 4, 4], 2), vec![10, 18, 26]);
        for layers in [2, 4, 8] {
            for depth in [6, 8] {
                for l in [2, 3] {
                    let m = NodeModel::new(
                        Task::Regression,
                        10,
                        &ArchConfig {
                            num_layers: layers,
                            trees_per_layer: 2,
                            depth,
                            tree_dim: l,
                            choice: ChoiceKind::entmax15(),
                        },
                    )
                    .unwrap();
                    for (i, layer) in m.layers.iter().enumerate() {
                        assert_eq!(layer.config.input_dim, 10 + i * 2 * l);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_responses_give_zero_head() {
        let mut m = random_model(Task::Regression, 4, &[LayerSpec { trees: 3, depth: 2 }], 1, 1);
        m.layers[0].response.value = Tensor::zeros(m.layers[0].response.value.shape());
        let out = m.forward(&random_x(5, 4, 2)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn head_weights_every_tree_equally() {
        let specs = [LayerSpec { trees: 1, depth: 1 }, LayerSpec { trees: 3, depth: 1 }];
        let m = random_model(Task::Regression, 2, &specs, 1, 3);
        let x = random_x(4, 2, 4);
        let outs = m.layer_outputs(&x).unwrap();
        let head = m.head_from_outputs(&outs).unwrap();
        for s in 0..4 {
            let total: f64 = outs[0].row(s).iter().chain(outs[1].row(s)).sum();
            assert!((head.row(s)[0] - total / 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn dropping_a_zero_layer_only_rescales() {
        let specs = [LayerSpec { trees: 2, depth: 2 }, LayerSpec { trees: 3, depth: 2 }];
        let mut m = random_model(Task::Regression, 3, &specs, 1, 5);
        m.layers[1].response.value = Tensor::zeros(m.layers[1].response.value.shape());
        let x = random_x(6, 3, 6);
        let full = m.forward(&x).unwrap();
        let mut short = m.clone();
        short.layers.pop();
        let reduced = short.forward(&x).unwrap();
        for (a, b) in full.data().iter().zip(reduced.data()) {
            assert!((a * 5.0 - b * 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_logits_give_even_probabilities() {
        let p = softmax_rows(&Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        assert_eq!(p.data(), &[0.5, 0.5]);
    }

    #[test]
    fn probabilities_are_normalised() {
        let m = random_model(Task::Classification { classes: 3 }, 4, &[LayerSpec { trees: 4, depth: 3 }], 3, 7);
        let p = m.predict_encoded(&random_x(20, 4, 8)).unwrap();
        for s in 0..20 {
            assert!((p.row(s).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn head_narrower_than_classes_is_rejected() {
        let r = NodeModel::from_specs(
            Task::Classification { classes: 3 },
            2,
            &[LayerSpec { trees: 1, depth: 1 }],
            2,
            ChoiceKind::entmax15(),
        );
        assert!(matches!(r, Err(NodeError::Config(_))));
    }

    #[test]
    fn predict_requires_preprocessing() {
        let m = random_model(Task::Regression, 2, &[LayerSpec { trees: 1, depth: 1 }], 1, 9);
        let ds = Dataset::from_matrix(&random_x(3, 2, 1), None, "y", None).unwrap();
        assert!(matches!(m.predict(&ds), Err(NodeError::Unfitted(_))));
    }

    #[test]
    fn forward_is_deterministic_and_matches_tape() {
        let specs = [LayerSpec { trees: 2, depth: 2 }, LayerSpec { trees: 2, depth: 2 }];
        let m = random_model(Task::Classification { classes: 2 }, 3, &specs, 2, 10);
        let x = random_x(8, 3, 11);
        let a = m.forward(&x).unwrap();
        assert_eq!(a, m.forward(&x).unwrap());
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = m.record(&mut tape, xv, None).unwrap();
        assert!(tape.value(out).max_abs_diff(&a) < 1e-12);
    }

    #[test]
    fn tree_average_gradients_match_finite_differences() {
        let a = random_x(3, 4, 12);
        let b = random_x(3, 6, 13);
        let report = grad_check(
            |tape, vars| {
                let out = tape.apply(TreeAverage { tree_dim: 2, head_dim: 2 }, vars)?;
                let sq = tape.mul(out, out)?;
                tape.sum(sq)
            },
            &[a, b],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-8, "{report:?}");
    }
}
