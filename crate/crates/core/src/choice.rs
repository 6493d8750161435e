//! Simplex-mapping choice functions.
//!
//! Every function here maps a score vector to a probability vector. They
//! are used twice in a tree: to pick splitting features from a row of
//! selection logits and, in their two-class form, to relax the Heaviside
//! step that routes a sample left or right.
//!
//! Backward passes share one formula. With weights `s_i` that are zero off
//! the support,
//!
//! ```text
//! dz_i = s_i · (u_i − Σ_j s_j u_j / Σ_j s_j)
//! ```
//!
//! where `s_i = p_i^(2−α)` for α-entmax, `s_i = p_i` for softmax and
//! `s_i = 1[p_i > 0]` for sparsemax.

use rand::Rng;
use rand_distr::{Distribution, Gumbel};
use serde::{Deserialize, Serialize};

use crate::error::{NodeError, Result};
use crate::NodeRng;

/// Fixed iteration count for the entmax threshold bisection.
pub const BISECTION_ITERS: usize = 50;

/// Probabilities at or below this value are treated as off-support.
pub const SUPPORT_EPS: f64 = 1e-12;

/// Score gap used to size initial scales when the choice function never
/// saturates (softmax, Gumbel-softmax).
pub const NOMINAL_GAP: f64 = 2.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TemperatureSchedule {
    Constant { t0: f64 },
    /// `T(step) = max(floor, t0 · exp(−decay · step))`.
    Annealed { t0: f64, decay: f64, floor: f64 },
}

impl Default for TemperatureSchedule {
    fn default() -> Self {
        TemperatureSchedule::Annealed {
            t0: 1.0,
            decay: 1e-4,
            floor: 0.1,
        }
    }
}

impl TemperatureSchedule {
    pub fn temperature(&self, step: u64) -> f64 {
        match *self {
            TemperatureSchedule::Constant { t0 } => t0,
            TemperatureSchedule::Annealed { t0, decay, floor } => {
                (t0 * (-decay * step as f64).exp()).max(floor)
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            TemperatureSchedule::Constant { t0 } => t0 > 0.0 && t0.is_finite(),
            TemperatureSchedule::Annealed { t0, decay, floor } => {
                t0 > 0.0 && floor > 0.0 && decay >= 0.0 && t0.is_finite() && decay.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(NodeError::InvalidArgument(format!(
                "temperature schedule must stay strictly positive: {self:?}"
            )))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum ChoiceKind {
    Softmax,
    Sparsemax,
    Entmax { alpha: f64 },
    GumbelSoftmax(TemperatureSchedule),
}

impl Default for ChoiceKind {
    fn default() -> Self {
        ChoiceKind::entmax15()
    }
}

impl ChoiceKind {
    pub fn entmax15() -> Self {
        ChoiceKind::Entmax { alpha: 1.5 }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ChoiceKind::Entmax { alpha } if !(*alpha > 1.0 && *alpha <= 2.0) => Err(
                NodeError::InvalidArgument(format!("entmax alpha must lie in (1, 2], got {alpha}")),
            ),
            ChoiceKind::GumbelSoftmax(s) => s.validate(),
            _ => Ok(()),
        }
    }

    pub fn name(&self) -> String {
        match self {
            ChoiceKind::Softmax => "softmax".into(),
            ChoiceKind::Sparsemax => "sparsemax".into(),
            ChoiceKind::Entmax { alpha } => format!("entmax{alpha}"),
            ChoiceKind::GumbelSoftmax(TemperatureSchedule::Constant { .. }) => "gumbel-constant".into(),
            ChoiceKind::GumbelSoftmax(TemperatureSchedule::Annealed { .. }) => "gumbel-annealed".into(),
        }
    }

    pub fn is_stochastic(&self) -> bool {
        matches!(self, ChoiceKind::GumbelSoftmax(_))
    }

    /// Whether outputs can contain exact zeros.
    pub fn is_sparse(&self) -> bool {
        matches!(self, ChoiceKind::Sparsemax | ChoiceKind::Entmax { .. })
    }

    /// Gumbel temperature at `step`; `None` for deterministic kinds.
    pub fn temperature(&self, step: u64) -> Option<f64> {
        match self {
            ChoiceKind::GumbelSoftmax(s) => Some(s.temperature(step)),
            _ => None,
        }
    }

    /// Deterministic two-class gate `choice([t, 0])[0]`.
    ///
    /// Gumbel-softmax gates are evaluated in inference mode: a hard step
    /// with `t = 0` routed to the first class.
    pub fn gate(&self, t: f64) -> f64 {
        match *self {
            ChoiceKind::Softmax => sigmoid(t),
            ChoiceKind::Sparsemax => ((t + 1.0) * 0.5).clamp(0.0, 1.0),
            ChoiceKind::Entmax { alpha } => gate(t, alpha),
            ChoiceKind::GumbelSoftmax(_) => {
                if t >= 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// `d gate / d t` expressed through the gate value `c`.
    ///
    /// `temperature` is set for a Gumbel gate evaluated in training mode.
    pub fn gate_derivative(&self, c: f64, temperature: Option<f64>) -> f64 {
        let (s0, s1) = match *self {
            ChoiceKind::Softmax => (c, 1.0 - c),
            ChoiceKind::Sparsemax => (indicator(c), indicator(1.0 - c)),
            ChoiceKind::Entmax { alpha } => (support_weight(c, alpha), support_weight(1.0 - c, alpha)),
            ChoiceKind::GumbelSoftmax(_) => match temperature {
                Some(t) => return c * (1.0 - c) / t,
                None => return 0.0,
            },
        };
        let total = s0 + s1;
        if total > 0.0 {
            s0 * s1 / total
        } else {
            0.0
        }
    }
}

fn indicator(p: f64) -> f64 {
    if p > SUPPORT_EPS {
        1.0
    } else {
        0.0
    }
}

fn support_weight(p: f64, alpha: f64) -> f64 {
    if p <= SUPPORT_EPS {
        0.0
    } else if alpha == 1.5 {
        p.sqrt()
    } else {
        p.powf(2.0 - alpha)
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_scores(z: &[f64]) -> Result<()> {
    if z.is_empty() {
        return Err(NodeError::InvalidArgument("empty score vector".into()));
    }
    if z.iter().any(|v| !v.is_finite()) {
        return Err(NodeError::InvalidArgument("non-finite score".into()));
    }
    Ok(())
}

fn max_of(z: &[f64]) -> f64 {
    z.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = max_of(z);
    let mut p: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

/// Euclidean projection of `z` onto the probability simplex.
pub fn sparsemax(z: &[f64]) -> Vec<f64> {
    let mut sorted = z.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mut cumsum = 0.0;
    let mut tau = sorted[0] - 1.0;
    for (k, &v) in sorted.iter().enumerate() {
        cumsum += v;
        let kk = (k + 1) as f64;
        if 1.0 + kk * v > cumsum {
            tau = (cumsum - 1.0) / kk;
        } else {
            break;
        }
    }
    // `v − tau` can round above 1 when one entry holds all the mass
    z.iter().map(|&v| (v - tau).clamp(0.0, 1.0)).collect()
}

/// α-entmax by bisection on the normalisation threshold.
///
/// Solves `Σ_i [(α−1) z_i − τ]₊^(1/(α−1)) = 1` for `τ` in
/// `[max − 1, max − n^(1−α)]` with [`BISECTION_ITERS`] halvings, then
/// renormalises.
pub fn entmax_bisect(z: &[f64], alpha: f64) -> Vec<f64> {
    let am1 = alpha - 1.0;
    let power = 1.0 / am1;
    let scaled: Vec<f64> = z.iter().map(|&v| v * am1).collect();
    let zmax = max_of(&scaled);
    let mut lo = zmax - 1.0;
    let mut hi = zmax - (1.0 / scaled.len() as f64).powf(am1);
    let mass = |tau: f64| -> f64 {
        scaled
            .iter()
            .map(|&v| {
                let d = v - tau;
                if d > 0.0 {
                    d.powf(power)
                } else {
                    0.0
                }
            })
            .sum()
    };
    let mut tau = 0.5 * (lo + hi);
    for _ in 0..BISECTION_ITERS {
        tau = 0.5 * (lo + hi);
        if mass(tau) >= 1.0 {
            lo = tau;
        } else {
            hi = tau;
        }
    }
    let mut p: Vec<f64> = scaled
        .iter()
        .map(|&v| {
            let d = v - tau;
            if d > 0.0 {
                d.powf(power)
            } else {
                0.0
            }
        })
        .collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

/// Exact sort-based 1.5-entmax.
pub fn entmax15(z: &[f64]) -> Vec<f64> {
    let m = max_of(z);
    let x: Vec<f64> = z.iter().map(|&v| (v - m) * 0.5).collect();
    let mut sorted = x.clone();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    let mut tau_star = sorted[0] - 1.0;
    for (k, &v) in sorted.iter().enumerate() {
        sum += v;
        sum_sq += v * v;
        let rho = (k + 1) as f64;
        let mean = sum / rho;
        let mean_sq = sum_sq / rho;
        let ss = rho * (mean_sq - mean * mean);
        let delta = ((1.0 - ss) / rho).max(0.0);
        let tau = mean - delta.sqrt();
        if tau <= v {
            tau_star = tau;
        } else {
            break;
        }
    }
    x.iter()
        .map(|&v| {
            let d = (v - tau_star).max(0.0);
            d * d
        })
        .collect()
}

/// α-entmax; uses the exact routine for α = 1.5 and bisection otherwise.
pub fn entmax(z: &[f64], alpha: f64) -> Vec<f64> {
    if alpha == 1.5 {
        entmax15(z)
    } else {
        entmax_bisect(z, alpha)
    }
}

/// Two-class entmax gate `σ_α(t) = entmax_α([t, 0])[0]`.
pub fn gate(t: f64, alpha: f64) -> f64 {
    if alpha == 1.5 {
        // Both classes stay in the support while |t| < 2, where the
        // threshold equation gives ((t + √(8 − t²)) / 4)² = 1/2 + t√(8 − t²)/8.
        if t >= 2.0 {
            1.0
        } else if t <= -2.0 {
            0.0
        } else {
            0.5 + t * (8.0 - t * t).sqrt() * 0.125
        }
    } else {
        entmax_bisect(&[t, 0.0], alpha)[0]
    }
}

/// One-hot vector at the first maximal score.
pub fn hard_argmax(z: &[f64]) -> Vec<f64> {
    let mut p = vec![0.0; z.len()];
    p[argmax(z)] = 1.0;
    p
}

/// Index of the maximum, lowest index on ties.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate() {
        if v > z[best] {
            best = i;
        }
    }
    best
}

/// Draws standard Gumbel noise.
pub fn gumbel_noise<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    let g = Gumbel::new(0.0, 1.0).expect("unit Gumbel");
    (0..n).map(|_| g.sample(rng)).collect()
}

/// `softmax((z + g) / T)` with a fresh Gumbel draw `g`.
pub fn gumbel_sample<R: Rng + ?Sized>(z: &[f64], temperature: f64, rng: &mut R) -> Result<Vec<f64>> {
    check_scores(z)?;
    if !(temperature > 0.0) {
        return Err(NodeError::InvalidArgument(format!(
            "Gumbel temperature must be positive, got {temperature}"
        )));
    }
    let g = gumbel_noise(z.len(), rng);
    let shifted: Vec<f64> = z.iter().zip(&g).map(|(a, b)| (a + b) / temperature).collect();
    Ok(softmax(&shifted))
}

/// Gumbel noise source for training-mode forward passes.
pub struct Sampler<'a> {
    pub rng: &'a mut NodeRng,
    pub step: u64,
}

/// Maps scores to a probability vector.
///
/// For Gumbel-softmax a `sampler` selects training mode (tempered noisy
/// softmax); without one the hard argmax one-hot is returned. Other kinds
/// ignore the sampler.
pub fn choice_forward(kind: &ChoiceKind, z: &[f64], sampler: Option<&mut Sampler>) -> Result<Vec<f64>> {
    check_scores(z)?;
    Ok(match kind {
        ChoiceKind::Softmax => softmax(z),
        ChoiceKind::Sparsemax => sparsemax(z),
        ChoiceKind::Entmax { alpha } => entmax(z, *alpha),
        ChoiceKind::GumbelSoftmax(schedule) => match sampler {
            Some(s) => gumbel_sample(z, schedule.temperature(s.step), s.rng)?,
            None => hard_argmax(z),
        },
    })
}

/// Vector-Jacobian product of [`choice_forward`] at output `p`.
///
/// `temperature` must be the Gumbel temperature used in the forward pass
/// (training mode); it is ignored for deterministic kinds. A Gumbel
/// forward in inference mode is piecewise constant and has zero gradient.
pub fn choice_backward(kind: &ChoiceKind, p: &[f64], upstream: &[f64], temperature: Option<f64>) -> Result<Vec<f64>> {
    if p.len() != upstream.len() {
        return Err(crate::error::shape_err("choice_backward", p.len(), upstream.len()));
    }
    let total: f64 = p.iter().sum();
    if p.iter().any(|&v| v < -SUPPORT_EPS || !v.is_finite()) || (total - 1.0).abs() > 1e-6 {
        return Err(NodeError::InvalidArgument("choice output is not on the simplex".into()));
    }
    let mut out = vec![0.0; p.len()];
    choice_backward_into(kind, p, upstream, temperature, &mut out);
    Ok(out)
}

/// Unchecked [`choice_backward`] writing into `out`.
pub(crate) fn choice_backward_into(
    kind: &ChoiceKind,
    p: &[f64],
    upstream: &[f64],
    temperature: Option<f64>,
    out: &mut [f64],
) {
    let (weight, scale): (fn(f64, f64) -> f64, f64) = match kind {
        ChoiceKind::Softmax => (|p, _| p, 1.0),
        ChoiceKind::Sparsemax => (|p, _| indicator(p), 1.0),
        ChoiceKind::Entmax { .. } => (support_weight, 1.0),
        ChoiceKind::GumbelSoftmax(_) => match temperature {
            Some(t) => (|p, _| p, 1.0 / t),
            None => {
                out.iter_mut().for_each(|v| *v = 0.0);
                return;
            }
        },
    };
    let alpha = match kind {
        ChoiceKind::Entmax { alpha } => *alpha,
        _ => 0.0,
    };
    let (mut ss, mut su) = (0.0, 0.0);
    for ((o, &pi), &ui) in out.iter_mut().zip(p).zip(upstream) {
        let s = weight(pi, alpha);
        *o = s;
        ss += s;
        su += s * ui;
    }
    let q = if ss > 0.0 { su / ss } else { 0.0 };
    for (o, &ui) in out.iter_mut().zip(upstream) {
        *o = scale * *o * (ui - q);
    }
}

/// Smallest `t` at which the two-class gate outputs exactly `{1, 0}`.
///
/// Located by bisection on the support of `entmax([t, 0])`. Kinds that
/// never saturate report [`NOMINAL_GAP`].
pub fn saturation_gap(kind: &ChoiceKind) -> f64 {
    let alpha = match kind {
        ChoiceKind::Entmax { alpha } => *alpha,
        ChoiceKind::Sparsemax => 2.0,
        _ => return NOMINAL_GAP,
    };
    let saturated = |t: f64| entmax_bisect(&[t, 0.0], alpha)[1] == 0.0;
    let mut hi = 1.0;
    while !saturated(hi) {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..64 {
        let mid = 0.5 * (lo + hi);
        if saturated(mid) {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}
