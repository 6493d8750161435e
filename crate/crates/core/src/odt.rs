//! Differentiable oblivious decision tree layer.
//!
//! A layer holds `m` trees of depth `d`. For an input row `x ∈ R^n` each tree
//!
//! 1. selects one soft feature per depth, `f̂_i = Σ_j x_j · choice(F_i)_j`;
//! 2. gates it, `c_i = gate((f̂_i − b_i) / τ_i)`;
//! 3. expands the gates into leaf weights `C[idx] = Π_i (c_i or 1 − c_i)`;
//! 4. contracts the weights with the response table, `ĥ = Σ_idx C[idx] R[idx]`.
//!
//! Leaf index convention: bit `i` of `idx` (depth 0 is the lowest bit) is
//! set when the sample goes to the `c_i` side, which is the side a hard
//! tree takes when `f_i ≥ b_i`. Saturating every selector and gate
//! therefore reproduces the table lookup done by [`OdtLayer::hard_forward`].
//!
//! Intermediates use flat 2-D layouts: `(batch, m·d)` for features and gates,
//! `(batch, m·2^d)` for leaf weights and `(batch, m·l)` for outputs, all
//! tree-major.

use crate::autodiff::{Operation, Tape, Var};
use crate::choice::{self, ChoiceKind, Sampler};
use crate::error::{shape_err, NodeError, Result};
use crate::par;
use crate::tensor::{Parameter, Tensor};

/// Added to `softplus(raw)` so scales never reach zero.
pub const TAU_OFFSET: f64 = 1e-6;

/// Largest supported depth; the leaf table has `2^depth` rows per tree.
pub const MAX_DEPTH: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct LayerConfig {
    pub trees: usize,
    pub depth: usize,
    pub tree_dim: usize,
    pub input_dim: usize,
    pub choice: ChoiceKind,
}

impl LayerConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.trees == 0 {
            errs.push("tree count must be at least 1".to_string());
        }
        if self.depth == 0 || self.depth > MAX_DEPTH {
            errs.push(format!("depth must be in 1..={MAX_DEPTH}, got {}", self.depth));
        }
        if self.tree_dim == 0 {
            errs.push("tree output dim must be at least 1".to_string());
        }
        if self.input_dim == 0 {
            errs.push("input dim must be at least 1".to_string());
        }
        if let Err(e) = self.choice.validate() {
            errs.push(e.to_string());
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(NodeError::Config(errs))
        }
    }

    pub fn leaves(&self) -> usize {
        1 << self.depth
    }

    pub fn output_dim(&self) -> usize {
        self.trees * self.tree_dim
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OdtLayer {
    pub config: LayerConfig,
    /// Feature-selection logits, `(m, d, n)`.
    pub selection: Parameter,
    /// Thresholds, `(m, d)`.
    pub thresholds: Parameter,
    /// Unconstrained scales, `(m, d)`; `τ = softplus(raw) + TAU_OFFSET`.
    pub scales: Parameter,
    /// Leaf responses, `(m, 2^d, l)`.
    pub response: Parameter,
}

impl OdtLayer {
    /// A layer with all-zero parameters (unit-ish scales); call the
    /// data-aware initialiser before training.
    pub fn zeros(config: LayerConfig, prefix: &str) -> Result<Self> {
        config.validate()?;
        let (m, d, n, l) = (config.trees, config.depth, config.input_dim, config.tree_dim);
        Ok(OdtLayer {
            selection: Parameter::new(format!("{prefix}.selection"), Tensor::zeros(&[m, d, n])),
            thresholds: Parameter::new(format!("{prefix}.thresholds"), Tensor::zeros(&[m, d])),
            scales: Parameter::new(format!("{prefix}.scales"), Tensor::zeros(&[m, d])),
            response: Parameter::new(format!("{prefix}.response"), Tensor::zeros(&[m, 1 << d, l])),
            config,
        })
    }

    /// Parameters in serialization order: selection, thresholds, raw scales, response.
    pub fn parameters(&self) -> [&Parameter; 4] {
        [&self.selection, &self.thresholds, &self.scales, &self.response]
    }

    pub fn parameters_mut(&mut self) -> [&mut Parameter; 4] {
        [
            &mut self.selection,
            &mut self.thresholds,
            &mut self.scales,
            &mut self.response,
        ]
    }

    /// Positive scales `τ`.
    pub fn tau(&self) -> Tensor {
        self.scales
            .value
            .map(|r| crate::autodiff::ops::softplus(r) + TAU_OFFSET)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.ndim() != 2 || x.dim(1) != self.config.input_dim {
            return Err(shape_err(
                "layer_forward",
                format!("(batch, {})", self.config.input_dim),
                x.shape(),
            ));
        }
        Ok(())
    }

    /// Deterministic (inference-mode) forward pass, `(batch, n) -> (batch, m·l)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let cfg = &self.config;
        let weights = feature_weights(&cfg.choice, &self.selection.value, None)?;
        let fhat = crate::autodiff::ops::MatMulT.forward(&[x, &weights])?;
        let c = gate_vector(&fhat, &self.thresholds.value, &self.tau(), &cfg.choice)?;
        LeafResponse {
            trees: cfg.trees,
            depth: cfg.depth,
        }
        .forward(&[&c, &self.response.value])
    }

    /// Records the forward pass on `tape`. Parameters occupy slots
    /// `slot_base..slot_base + 4` in [`OdtLayer::parameters`] order.
    pub fn record(&self, tape: &mut Tape, x: Var, slot_base: usize, sampler: Option<&mut Sampler>) -> Result<Var> {
        let params = [0, 1, 2, 3].map(|i| tape.param(slot_base + i, self.parameters()[i].value.clone()));
        self.record_with_params(tape, x, params, sampler)
    }

    /// Records the forward pass using existing variables for the selection
    /// logits, thresholds, raw scales and responses. Their values, not this
    /// layer's stored parameters, determine the result.
    pub fn record_with_params(&self, tape: &mut Tape, x: Var, params: [Var; 4], sampler: Option<&mut Sampler>) -> Result<Var> {
        self.check_input(tape.value(x))?;
        let cfg = &self.config;
        let batch = tape.value(x).dim(0);
        let k = cfg.trees * cfg.depth;

        let temperature = match (&cfg.choice, sampler.as_deref()) {
            (ChoiceKind::GumbelSoftmax(s), Some(sm)) => Some(s.temperature(sm.step)),
            _ => None,
        };
        let (row_noise, gate_noise) = match (temperature, sampler) {
            (Some(_), Some(sm)) => {
                let rows = choice::gumbel_noise(k * cfg.input_dim, sm.rng);
                let g0 = choice::gumbel_noise(batch * k, sm.rng);
                let g1 = choice::gumbel_noise(batch * k, sm.rng);
                let diff = g0.iter().zip(&g1).map(|(a, b)| a - b).collect();
                (Some(rows), Some(diff))
            }
            _ => (None, None),
        };

        let [f, b, raw, r] = params;
        let weights = tape.apply(
            ChoiceRows {
                kind: cfg.choice.clone(),
                temperature,
                noise: row_noise,
            },
            &[f],
        )?;
        let fhat = tape.matmul_t(x, weights)?;
        let tau = tape.softplus(raw, TAU_OFFSET)?;
        let c = tape.apply(
            Gate {
                kind: cfg.choice.clone(),
                temperature,
                noise: gate_noise,
            },
            &[fhat, b, tau],
        )?;
        tape.apply(
            LeafResponse {
                trees: cfg.trees,
                depth: cfg.depth,
            },
            &[c, r],
        )
    }

    /// Classic non-differentiable oblivious-tree lookup.
    ///
    /// Each depth uses the argmax feature of its selection row (lowest index
    /// on ties) and the step `1(x_j − b ≥ 0)`.
    pub fn hard_forward(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let cfg = &self.config;
        let (m, d, n, l) = (cfg.trees, cfg.depth, cfg.input_dim, cfg.tree_dim);
        let fsel = self.selection.value.data();
        let mut chosen = Vec::with_capacity(m * d);
        for row in fsel.chunks_exact(n) {
            let j = choice::argmax(row);
            if row.iter().filter(|&&v| v == row[j]).count() > 1 {
                log::debug!("selector argmax tie resolved to feature {j}");
            }
            chosen.push(j);
        }
        let b = self.thresholds.value.data();
        let r = self.response.value.data();
        let leaves = 1usize << d;
        let batch = x.dim(0);
        let mut out = vec![0.0; batch * m * l];
        par::for_each_row(&mut out, m * l, |s, row| {
            let xs = x.row(s);
            for t in 0..m {
                let mut idx = 0usize;
                for i in 0..d {
                    if xs[chosen[t * d + i]] - b[t * d + i] >= 0.0 {
                        idx |= 1 << i;
                    }
                }
                let src = &r[(t * leaves + idx) * l..(t * leaves + idx + 1) * l];
                row[t * l..(t + 1) * l].copy_from_slice(src);
            }
        });
        Tensor::new(vec![batch, m * l], out)
    }
}

/// Applies the choice function to every trailing-axis row of the selection logits.
pub fn feature_weights(kind: &ChoiceKind, selection: &Tensor, sampler: Option<&mut Sampler>) -> Result<Tensor> {
    let (temperature, noise) = match (kind, sampler) {
        (ChoiceKind::GumbelSoftmax(s), Some(sm)) => (
            Some(s.temperature(sm.step)),
            Some(choice::gumbel_noise(selection.len(), sm.rng)),
        ),
        _ => (None, None),
    };
    ChoiceRows {
        kind: kind.clone(),
        temperature,
        noise,
    }
    .forward(&[selection])
}

/// Soft feature values `(batch, m·d)` for input `(batch, n)` and logits `(m, d, n)`.
pub fn select_features(x: &Tensor, selection: &Tensor, kind: &ChoiceKind) -> Result<Tensor> {
    let w = feature_weights(kind, selection, None)?;
    crate::autodiff::ops::MatMulT.forward(&[x, &w])
}

/// Gate values `gate((f̂ − b) / τ)` in inference mode.
pub fn gate_vector(fhat: &Tensor, thresholds: &Tensor, tau: &Tensor, kind: &ChoiceKind) -> Result<Tensor> {
    Gate {
        kind: kind.clone(),
        temperature: None,
        noise: None,
    }
    .forward(&[fhat, thresholds, tau])
}

/// Leaf weights `(batch, m·2^d)` from gates `(batch, m·d)`.
pub fn choice_tensor(c: &Tensor, trees: usize, depth: usize) -> Result<Tensor> {
    ChoiceTensor { trees, depth }.forward(&[c])
}

/// Tree outputs `(batch, m·l)` from leaf weights and responses `(m, 2^d, l)`.
pub fn tree_response(leaves: &Tensor, response: &Tensor) -> Result<Tensor> {
    TreeResponse.forward(&[leaves, response])
}

/// Row-wise choice function over the trailing axis.
pub struct ChoiceRows {
    pub kind: ChoiceKind,
    /// Gumbel temperature; set only in training mode.
    pub temperature: Option<f64>,
    /// Frozen Gumbel draw, one value per input entry.
    pub noise: Option<Vec<f64>>,
}

impl Operation for ChoiceRows {
    fn name(&self) -> &'static str {
        "choice_rows"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let z = inputs[0];
        let n = *z.shape().last().ok_or_else(|| shape_err("choice_rows", "(.., n)", z.shape()))?;
        if n == 0 {
            return Err(NodeError::InvalidArgument("empty score vector".into()));
        }
        if !z.is_finite() {
            return Err(NodeError::InvalidArgument("non-finite selection logits".into()));
        }
        let mut out = vec![0.0; z.len()];
        let zd = z.data();
        par::for_each_row(&mut out, n, |r, row| {
            let scores = &zd[r * n..(r + 1) * n];
            let p = match (&self.kind, self.temperature, &self.noise) {
                (ChoiceKind::GumbelSoftmax(_), Some(t), Some(g)) => {
                    let noisy: Vec<f64> = scores
                        .iter()
                        .zip(&g[r * n..(r + 1) * n])
                        .map(|(a, b)| (a + b) / t)
                        .collect();
                    choice::softmax(&noisy)
                }
                (kind, _, _) => choice::choice_forward(kind, scores, None).expect("scores checked"),
            };
            row.copy_from_slice(&p);
        });
        Tensor::new(z.shape().to_vec(), out)
    }

    fn vjp(&self, inputs: &[&Tensor], output: &Tensor, up: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        let n = *inputs[0].shape().last().unwrap();
        let mut dz = vec![0.0; output.len()];
        let (p, u) = (output.data(), up.data());
        par::for_each_row(&mut dz, n, |r, row| {
            let span = r * n..(r + 1) * n;
            choice::choice_backward_into(&self.kind, &p[span.clone()], &u[span], self.temperature, row);
        });
        Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), dz)?)])
    }
}

/// `c = gate((f̂ − b) / τ)` broadcast over the batch.
pub struct Gate {
    pub kind: ChoiceKind,
    pub temperature: Option<f64>,
    /// Frozen logistic noise `g0 − g1` per output entry (Gumbel training).
    pub noise: Option<Vec<f64>>,
}

impl Gate {
    fn dims(inputs: &[&Tensor]) -> Result<(usize, usize)> {
        let (f, b, tau) = (inputs[0], inputs[1], inputs[2]);
        if f.ndim() != 2 || b.len() != f.dim(1) || tau.len() != f.dim(1) {
            return Err(shape_err("gate", f.shape(), (b.shape(), tau.shape())));
        }
        Ok((f.dim(0), f.dim(1)))
    }

    fn value(&self, t: f64, idx: usize) -> f64 {
        match (&self.kind, self.temperature, &self.noise) {
            (ChoiceKind::GumbelSoftmax(_), Some(temp), Some(g)) => choice::sigmoid((t + g[idx]) / temp),
            (kind, _, _) => kind.gate(t),
        }
    }
}

impl Operation for Gate {
    fn name(&self) -> &'static str {
        "gate"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (batch, k) = Self::dims(inputs)?;
        let (f, b, tau) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        if let Some(bad) = tau.iter().find(|&&v| !(v > 0.0)) {
            return Err(NodeError::InvalidArgument(format!("scale must be positive, got {bad}")));
        }
        let mut out = vec![0.0; batch * k];
        par::for_each_row(&mut out, k, |s, row| {
            for (j, o) in row.iter_mut().enumerate() {
                let t = (f[s * k + j] - b[j]) / tau[j];
                *o = self.value(t, s * k + j);
            }
        });
        Tensor::new(vec![batch, k], out)
    }

    fn vjp(&self, inputs: &[&Tensor], output: &Tensor, up: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (batch, k) = Self::dims(inputs)?;
        let (f, b, tau) = (inputs[0].data(), inputs[1].data(), inputs[2].data());
        let (c, u) = (output.data(), up.data());
        // dL/dt for every entry
        let mut dt = vec![0.0; batch * k];
        par::for_each_row(&mut dt, k, |s, row| {
            for (j, o) in row.iter_mut().enumerate() {
                let i = s * k + j;
                *o = u[i] * self.kind.gate_derivative(c[i], self.temperature);
            }
        });
        let df = needs[0].then(|| {
            let mut df = dt.clone();
            par::for_each_row(&mut df, k, |_, row| {
                for (j, v) in row.iter_mut().enumerate() {
                    *v /= tau[j];
                }
            });
            Tensor::new(vec![batch, k], df).expect("df shape")
        });
        let (db, dtau) = if needs[1] || needs[2] {
            // Column blocks are walked row by row; each column still sums over
            // the batch in sample order.
            const BLOCK: usize = 64;
            let sums: Vec<(f64, f64)> = par::map_indices(k.div_ceil(BLOCK), |blk| {
                let cols = blk * BLOCK..((blk + 1) * BLOCK).min(k);
                let mut acc = vec![(0.0, 0.0); cols.len()];
                for s in 0..batch {
                    for (a, j) in acc.iter_mut().zip(cols.clone()) {
                        let g = dt[s * k + j];
                        let t = (f[s * k + j] - b[j]) / tau[j];
                        a.0 -= g / tau[j];
                        a.1 -= g * t / tau[j];
                    }
                }
                acc
            })
            .into_iter()
            .flatten()
            .collect();
            let db = needs[1].then(|| {
                Tensor::new(inputs[1].shape().to_vec(), sums.iter().map(|p| p.0).collect()).expect("db shape")
            });
            let dtau = needs[2].then(|| {
                Tensor::new(inputs[2].shape().to_vec(), sums.iter().map(|p| p.1).collect()).expect("dtau shape")
            });
            (db, dtau)
        } else {
            (None, None)
        };
        Ok(vec![df, db, dtau])
    }
}

/// Outer product of per-depth `[c_i, 1 − c_i]` pairs, built by iterated
/// binomial expansion.
pub struct ChoiceTensor {
    pub trees: usize,
    pub depth: usize,
}

/// Writes the `2^d` leaf weights for gates `c` into `out`.
pub(crate) fn expand(c: &[f64], out: &mut [f64]) {
    out[0] = 1.0;
    for (i, &ci) in c.iter().enumerate() {
        let half = 1usize << i;
        let (lo, hi) = out[..2 * half].split_at_mut(half);
        for (p, h) in lo.iter_mut().zip(hi.iter_mut()) {
            *h = *p * ci;
            *p *= 1.0 - ci;
        }
    }
}

impl Operation for ChoiceTensor {
    fn name(&self) -> &'static str {
        "choice_tensor"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let c = inputs[0];
        let (m, d) = (self.trees, self.depth);
        if c.ndim() != 2 || c.dim(1) != m * d {
            return Err(shape_err("choice_tensor", format!("(batch, {})", m * d), c.shape()));
        }
        let batch = c.dim(0);
        let leaves = 1usize << d;
        let mut out = vec![0.0; batch * m * leaves];
        let cd = c.data();
        par::for_each_row(&mut out, m * leaves, |s, row| {
            for t in 0..m {
                let gates = &cd[(s * m + t) * d..(s * m + t + 1) * d];
                expand(gates, &mut row[t * leaves..(t + 1) * leaves]);
            }
        });
        Tensor::new(vec![batch, m * leaves], out)
    }

    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, up: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        let c = inputs[0];
        let (m, d) = (self.trees, self.depth);
        let batch = c.dim(0);
        let leaves = 1usize << d;
        let (cd, ud) = (c.data(), up.data());
        let mut dc = vec![0.0; batch * m * d];
        par::for_each_row(&mut dc, m * d, |s, row| {
            let mut levels = vec![0.0; 2 * leaves - 1];
            let mut grad = vec![0.0; leaves];
            let mut scratch = vec![0.0; leaves / 2];
            for t in 0..m {
                let gates = &cd[(s * m + t) * d..(s * m + t + 1) * d];
                expand_levels(gates, &mut levels);
                grad.copy_from_slice(&ud[(s * m + t) * leaves..(s * m + t + 1) * leaves]);
                expand_levels_vjp(gates, &levels, &mut grad, &mut scratch, &mut row[t * d..(t + 1) * d]);
            }
        });
        Ok(vec![Some(Tensor::new(vec![batch, m * d], dc)?)])
    }
}

/// `ĥ[s, t, :] = Σ_idx C[s, t, idx] · R[t, idx, :]`.
pub struct TreeResponse;

impl TreeResponse {
    fn dims(leaves: &Tensor, r: &Tensor) -> Result<(usize, usize, usize, usize)> {
        if r.ndim() != 3 || leaves.ndim() != 2 || leaves.dim(1) != r.dim(0) * r.dim(1) {
            return Err(shape_err("tree_response", leaves.shape(), r.shape()));
        }
        Ok((leaves.dim(0), r.dim(0), r.dim(1), r.dim(2)))
    }
}

impl Operation for TreeResponse {
    fn name(&self) -> &'static str {
        "tree_response"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (batch, m, nl, l) = Self::dims(inputs[0], inputs[1])?;
        let (cd, rd) = (inputs[0].data(), inputs[1].data());
        let mut out = vec![0.0; batch * m * l];
        par::for_each_row(&mut out, m * l, |s, row| {
            for t in 0..m {
                let w = &cd[(s * m + t) * nl..(s * m + t + 1) * nl];
                let o = &mut row[t * l..(t + 1) * l];
                for (idx, &wi) in w.iter().enumerate() {
                    if wi == 0.0 {
                        continue;
                    }
                    let rrow = &rd[(t * nl + idx) * l..(t * nl + idx + 1) * l];
                    for (a, &rv) in o.iter_mut().zip(rrow) {
                        *a += wi * rv;
                    }
                }
            }
        });
        Tensor::new(vec![batch, m * l], out)
    }

    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, up: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (batch, m, nl, l) = Self::dims(inputs[0], inputs[1])?;
        let (cd, rd, ud) = (inputs[0].data(), inputs[1].data(), up.data());
        let dleaves = needs[0].then(|| {
            let mut dcw = vec![0.0; batch * m * nl];
            par::for_each_row(&mut dcw, m * nl, |s, row| {
                for t in 0..m {
                    let g = &ud[(s * m + t) * l..(s * m + t + 1) * l];
                    for idx in 0..nl {
                        let rrow = &rd[(t * nl + idx) * l..(t * nl + idx + 1) * l];
                        row[t * nl + idx] = crate::tensor::dot(g, rrow);
                    }
                }
            });
            Tensor::new(vec![batch, m * nl], dcw).expect("leaf grad shape")
        });
        let dr = needs[1].then(|| {
            let mut dr = vec![0.0; m * nl * l];
            par::for_each_row(&mut dr, nl * l, |t, row| {
                for s in 0..batch {
                    let w = &cd[(s * m + t) * nl..(s * m + t + 1) * nl];
                    let g = &ud[(s * m + t) * l..(s * m + t + 1) * l];
                    for (idx, &wi) in w.iter().enumerate() {
                        if wi == 0.0 {
                            continue;
                        }
                        for (d, &gv) in row[idx * l..(idx + 1) * l].iter_mut().zip(g) {
                            *d += wi * gv;
                        }
                    }
                }
            });
            Tensor::new(inputs[1].shape().to_vec(), dr).expect("response grad shape")
        });
        Ok(vec![dleaves, dr])
    }
}

/// Fused [`ChoiceTensor`] and [`TreeResponse`]: `(batch, m·d)` gates and
/// `(m, 2^d, l)` responses to `(batch, m·l)` outputs.
///
/// Leaf weights are rebuilt per (sample, tree) instead of being stored, so
/// memory stays `O(batch·m·(d + l))`.
pub struct LeafResponse {
    pub trees: usize,
    pub depth: usize,
}

impl LeafResponse {
    fn dims(&self, c: &Tensor, r: &Tensor) -> Result<(usize, usize)> {
        let (m, d) = (self.trees, self.depth);
        if c.ndim() != 2 || c.dim(1) != m * d {
            return Err(shape_err("leaf_response", format!("(batch, {})", m * d), c.shape()));
        }
        if r.ndim() != 3 || r.dim(0) != m || r.dim(1) != 1 << d {
            return Err(shape_err("leaf_response", format!("({m}, {}, l)", 1usize << d), r.shape()));
        }
        Ok((c.dim(0), r.dim(2)))
    }
}

/// Fills `levels` with every prefix expansion of `gates`; the expansion
/// after `i` gates occupies `levels[2^i − 1 .. 2^(i+1) − 1]`.
fn expand_levels(gates: &[f64], levels: &mut [f64]) {
    levels[0] = 1.0;
    for (i, &ci) in gates.iter().enumerate() {
        let half = 1usize << i;
        let (prev, cur) = levels[half - 1..].split_at_mut(half);
        let (lo, hi) = cur[..2 * half].split_at_mut(half);
        for ((p, a), b) in prev.iter().zip(lo.iter_mut()).zip(hi.iter_mut()) {
            *b = p * ci;
            *a = p * (1.0 - ci);
        }
    }
}

/// Back-propagates leaf-weight gradients `grad` (overwritten) through
/// [`expand_levels`], writing gate gradients to `dc`.
fn expand_levels_vjp(gates: &[f64], levels: &[f64], grad: &mut [f64], scratch: &mut [f64], dc: &mut [f64]) {
    for i in (0..gates.len()).rev() {
        let half = 1usize << i;
        let prev = &levels[half - 1..2 * half - 1];
        let ci = gates[i];
        let mut acc = 0.0;
        let (glo, ghi) = grad[..2 * half].split_at(half);
        for (((p, &lo), &hi), out) in prev.iter().zip(glo).zip(ghi).zip(scratch.iter_mut()) {
            acc += p * (hi - lo);
            *out = hi * ci + lo * (1.0 - ci);
        }
        dc[i] = acc;
        grad[..half].copy_from_slice(&scratch[..half]);
    }
}

impl Operation for LeafResponse {
    fn name(&self) -> &'static str {
        "leaf_response"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (c, r) = (inputs[0], inputs[1]);
        let (batch, l) = self.dims(c, r)?;
        let (m, d) = (self.trees, self.depth);
        let nl = 1usize << d;
        let (cd, rd) = (c.data(), r.data());
        let mut out = vec![0.0; batch * m * l];
        par::for_each_row(&mut out, m * l, |s, row| {
            let mut w = vec![0.0; nl];
            for t in 0..m {
                expand(&cd[(s * m + t) * d..(s * m + t + 1) * d], &mut w);
                let table = &rd[t * nl * l..(t + 1) * nl * l];
                if l == 1 {
                    row[t] = crate::tensor::dot(&w, table);
                    continue;
                }
                let o = &mut row[t * l..(t + 1) * l];
                for (&wi, rrow) in w.iter().zip(table.chunks_exact(l)) {
                    for (a, &rv) in o.iter_mut().zip(rrow) {
                        *a += wi * rv;
                    }
                }
            }
        });
        Tensor::new(vec![batch, m * l], out)
    }

    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, up: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (c, r) = (inputs[0], inputs[1]);
        let (batch, l) = self.dims(c, r)?;
        let (m, d) = (self.trees, self.depth);
        let nl = 1usize << d;
        let (cd, rd, ud) = (c.data(), r.data(), up.data());
        let dc = needs[0].then(|| {
            let mut dc = vec![0.0; batch * m * d];
            par::for_each_row(&mut dc, m * d, |s, row| {
                let mut levels = vec![0.0; 2 * nl - 1];
                let mut grad = vec![0.0; nl];
                let mut scratch = vec![0.0; nl / 2];
                for t in 0..m {
                    let gates = &cd[(s * m + t) * d..(s * m + t + 1) * d];
                    expand_levels(gates, &mut levels);
                    let g = &ud[(s * m + t) * l..(s * m + t + 1) * l];
                    let table = &rd[t * nl * l..(t + 1) * nl * l];
                    if l == 1 {
                        for (v, &rv) in grad.iter_mut().zip(table) {
                            *v = g[0] * rv;
                        }
                    } else {
                        for (v, rrow) in grad.iter_mut().zip(table.chunks_exact(l)) {
                            *v = crate::tensor::dot(g, rrow);
                        }
                    }
                    expand_levels_vjp(gates, &levels, &mut grad, &mut scratch, &mut row[t * d..(t + 1) * d]);
                }
            });
            Tensor::new(vec![batch, m * d], dc).expect("gate grad shape")
        });
        let dr = needs[1].then(|| {
            let mut dr = vec![0.0; m * nl * l];
            par::for_each_row(&mut dr, nl * l, |t, row| {
                let mut w = vec![0.0; nl];
                for s in 0..batch {
                    expand(&cd[(s * m + t) * d..(s * m + t + 1) * d], &mut w);
                    let g = &ud[(s * m + t) * l..(s * m + t + 1) * l];
                    if l == 1 {
                        for (dv, &wi) in row.iter_mut().zip(&w) {
                            *dv += wi * g[0];
                        }
                        continue;
                    }
                    for (&wi, drow) in w.iter().zip(row.chunks_exact_mut(l)) {
                        for (dv, &gv) in drow.iter_mut().zip(g) {
                            *dv += wi * gv;
                        }
                    }
                }
            });
            Tensor::new(r.shape().to_vec(), dr).expect("response grad shape")
        });
        Ok(vec![dc, dr])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn config(m: usize, d: usize, n: usize, l: usize) -> LayerConfig {
        LayerConfig {
            trees: m,
            depth: d,
            tree_dim: l,
            input_dim: n,
            choice: ChoiceKind::entmax15(),
        }
    }

    #[test]
    fn one_hot_logits_select_a_single_feature() {
        let x = Tensor::from_rows(&[vec![0.3, -1.2, 2.5], vec![1.0, 4.0, -0.5]]).unwrap();
        let f = Tensor::new(vec![1, 1, 3], vec![0.0, 100.0, 0.0]).unwrap();
        let fh = select_features(&x, &f, &ChoiceKind::entmax15()).unwrap();
        assert_eq!(fh.data(), &[-1.2, 4.0]);
    }

    #[test]
    fn equal_logits_average_the_features() {
        let x = Tensor::from_rows(&[vec![0.3, -1.2, 2.4]]).unwrap();
        let f = Tensor::new(vec![1, 1, 3], vec![0.7; 3]).unwrap();
        let fh = select_features(&x, &f, &ChoiceKind::entmax15()).unwrap();
        assert!((fh.data()[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_feature_input_passes_through() {
        let x = Tensor::from_rows(&[vec![0.37], vec![-2.0]]).unwrap();
        let f = Tensor::new(vec![2, 1, 1], vec![-3.0, 11.0]).unwrap();
        let fh = select_features(&x, &f, &ChoiceKind::entmax15()).unwrap();
        assert_eq!(fh.data(), &[0.37, 0.37, -2.0, -2.0]);
    }

    #[test]
    fn gate_vector_cases() {
        let kind = ChoiceKind::entmax15();
        let b = Tensor::from_vec(vec![0.4, -1.0]);
        let tau = Tensor::from_vec(vec![1.0, 0.5]);
        let f = Tensor::new(vec![1, 2], vec![0.4, 0.0]).unwrap();
        let c = gate_vector(&f, &b, &tau, &kind).unwrap();
        assert_eq!(c.data(), &[0.5, 1.0]);

        let f1 = Tensor::new(vec![1, 1], vec![0.9]).unwrap();
        let c1 = gate_vector(&f1, &Tensor::from_vec(vec![0.2]), &Tensor::from_vec(vec![1.3]), &kind).unwrap();
        let f10 = Tensor::new(vec![1, 1], vec![0.2 + 7.0]).unwrap();
        let c10 = gate_vector(&f10, &Tensor::from_vec(vec![0.2]), &Tensor::from_vec(vec![13.0]), &kind).unwrap();
        assert!((c1.data()[0] - c10.data()[0]).abs() < 1e-12);
    }

    #[test]
    fn gate_rejects_non_positive_scale() {
        let f = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let r = gate_vector(&f, &Tensor::from_vec(vec![0.0]), &Tensor::from_vec(vec![0.0]), &ChoiceKind::entmax15());
        assert!(r.is_err());
    }

    #[test]
    fn choice_tensor_cases() {
        let c = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        assert_eq!(choice_tensor(&c, 1, 2).unwrap().data(), &[0.25; 4]);
        // c = (1, 0): bit0 set, bit1 clear -> index 1
        let c = Tensor::new(vec![1, 2], vec![1.0, 0.0]).unwrap();
        assert_eq!(choice_tensor(&c, 1, 2).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
        let c = Tensor::new(vec![1, 3], vec![0.13, 0.77, 0.42]).unwrap();
        let s: f64 = choice_tensor(&c, 1, 3).unwrap().data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn tree_response_cases() {
        // d = 1, l = 1: index 1 carries weight c
        let leaves = choice_tensor(&Tensor::new(vec![1, 1], vec![0.7]).unwrap(), 1, 1).unwrap();
        let r = Tensor::new(vec![1, 2, 1], vec![-1.0, 3.0]).unwrap();
        let h = tree_response(&leaves, &r).unwrap();
        assert!((h.data()[0] - 1.8).abs() < 1e-12);

        let r = Tensor::new(vec![1, 4, 2], (0..8).map(f64::from).collect()).unwrap();
        let onehot = Tensor::new(vec![1, 4], vec![0.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(tree_response(&onehot, &r).unwrap().data(), &[4.0, 5.0]);

        let r = Tensor::full(&[1, 4, 1], 2.5);
        let leaves = choice_tensor(&Tensor::new(vec![1, 2], vec![0.31, 0.9]).unwrap(), 1, 2).unwrap();
        assert!((tree_response(&leaves, &r).unwrap().data()[0] - 2.5).abs() < 1e-12);
    }

    #[test]
    fn fused_leaf_response_matches_composition() {
        let (b, m, d, l) = (5, 3, 4, 2);
        let c = Tensor::new(vec![b, m * d], (0..b * m * d).map(|i| ((i * 5) as f64 * 0.37).sin().abs()).collect()).unwrap();
        let r = Tensor::new(vec![m, 1 << d, l], (0..(m * l) << d).map(|i| ((i * 3) as f64 * 0.71).cos()).collect()).unwrap();
        let fused = LeafResponse { trees: m, depth: d };
        let composed = tree_response(&choice_tensor(&c, m, d).unwrap(), &r).unwrap();
        let out = fused.forward(&[&c, &r]).unwrap();
        assert!(out.data().iter().zip(composed.data()).all(|(a, b)| (a - b).abs() <= 1e-14));

        let w = Tensor::new(vec![b, m * l], (0..b * m * l).map(|i| (i as f64 * 0.53).sin()).collect()).unwrap();
        let report = grad_check(
            |tape, vars| {
                let h = tape.apply(LeafResponse { trees: m, depth: d }, &[vars[0], vars[1]])?;
                let wv = tape.constant(w.clone());
                let prod = tape.mul(h, wv)?;
                tape.sum(prod)
            },
            &[c.clone(), r.clone()],
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-6, "{report:?}");
    }

    fn random_layer(cfg: LayerConfig, seed: u64) -> OdtLayer {
        use rand::Rng;
        let mut rng = crate::rng_from_seed(seed);
        let mut layer = OdtLayer::zeros(cfg, "l0").unwrap();
        for p in layer.parameters_mut() {
            for v in p.value.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        layer
    }

    #[test]
    fn output_layout_is_tree_major() {
        let layer = random_layer(config(2, 2, 3, 3), 1);
        let x = Tensor::from_rows(&[vec![0.1, 0.2, 0.3]]).unwrap();
        let out = layer.forward(&x).unwrap();
        assert_eq!(out.shape(), &[1, 6]);
        // tree 1 alone gives the second block
        let mut single = OdtLayer::zeros(config(1, 2, 3, 3), "s").unwrap();
        single.selection.value = Tensor::new(vec![1, 2, 3], layer.selection.value.data()[6..].to_vec()).unwrap();
        single.thresholds.value = Tensor::new(vec![1, 2], layer.thresholds.value.data()[2..].to_vec()).unwrap();
        single.scales.value = Tensor::new(vec![1, 2], layer.scales.value.data()[2..].to_vec()).unwrap();
        single.response.value = Tensor::new(vec![1, 4, 3], layer.response.value.data()[12..].to_vec()).unwrap();
        let s = single.forward(&x).unwrap();
        assert_eq!(&out.data()[3..], s.data());
    }

    #[test]
    fn zero_input_is_finite() {
        let layer = random_layer(config(3, 3, 4, 2), 2);
        let out = layer.forward(&Tensor::zeros(&[5, 4])).unwrap();
        assert!(out.is_finite());
    }

    #[test]
    fn hard_lookup_examples() {
        let mut layer = OdtLayer::zeros(config(1, 2, 2, 1), "h").unwrap();
        // depth 0 picks feature 0, depth 1 picks feature 1
        layer.selection.value = Tensor::new(vec![1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        layer.response.value = Tensor::new(vec![1, 4, 1], vec![10.0, 11.0, 12.0, 13.0]).unwrap();
        let x = Tensor::from_rows(&[vec![0.5, -1.0], vec![0.0, 0.0]]).unwrap();
        let out = layer.hard_forward(&x).unwrap();
        // bits (1, 0) -> idx 1; thresholds hit exactly -> both bits set
        assert_eq!(out.data(), &[11.0, 13.0]);
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let layer = random_layer(config(3, 2, 4, 2), 3);
        let x = Tensor::new(vec![6, 4], (0..24).map(|i| ((i * 7) as f64 * 0.31).sin()).collect()).unwrap();
        let params: Vec<Tensor> = layer.parameters().iter().map(|p| p.value.clone()).collect();
        let report = grad_check(
            |tape, vars| {
                let xv = tape.constant(x.clone());
                let out = layer.record_with_params(tape, xv, [vars[0], vars[1], vars[2], vars[3]], None)?;
                tape.mean(out)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-4, "{report:?}");
    }

    #[test]
    fn record_matches_inference_forward() {
        let layer = random_layer(config(4, 3, 5, 2), 4);
        let x = Tensor::new(vec![7, 5], (0..35).map(|i| (i as f64 * 0.77).cos()).collect()).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let out = layer.record(&mut tape, xv, 0, None).unwrap();
        assert_eq!(tape.value(out), &layer.forward(&x).unwrap());
    }
}
