//! Training objectives and validation metrics.

use crate::autodiff::{Operation, Tape, Var};
use crate::error::{shape_err, NodeError, Result};
use crate::model::Task;
use crate::tensor::Tensor;

/// Mean cross-entropy of `(batch, |C|)` logits against class indices.
///
/// Uses `lse(z) − z_y` with the max subtracted before exponentiating.
pub struct CrossEntropy {
    pub targets: Vec<usize>,
}

impl CrossEntropy {
    fn check(&self, logits: &Tensor) -> Result<()> {
        if logits.ndim() != 2 || logits.dim(0) != self.targets.len() {
            return Err(shape_err("cross_entropy", format!("({}, classes)", self.targets.len()), logits.shape()));
        }
        Ok(())
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl Operation for CrossEntropy {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let z = inputs[0];
        self.check(z)?;
        let total: f64 = self
            .targets
            .iter()
            .enumerate()
            .map(|(s, &y)| log_sum_exp(z.row(s)) - z.row(s)[y])
            .sum();
        Ok(Tensor::scalar(total / self.targets.len() as f64))
    }

    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, up: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        let z = inputs[0];
        let k = z.dim(1);
        let g = up.item()? / self.targets.len() as f64;
        let mut d = Vec::with_capacity(z.len());
        for (s, &y) in self.targets.iter().enumerate() {
            let p = crate::choice::softmax(z.row(s));
            d.extend(p.iter().enumerate().map(|(j, &pj)| g * (pj - f64::from(j == y))));
        }
        Ok(vec![Some(Tensor::new(vec![z.dim(0), k], d)?)])
    }
}

/// Mean squared error of the first column of `(batch, k)` predictions.
pub struct Mse {
    pub targets: Vec<f64>,
}

impl Operation for Mse {
    fn name(&self) -> &'static str {
        "mse"
    }

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let p = inputs[0];
        if p.ndim() != 2 || p.dim(0) != self.targets.len() {
            return Err(shape_err("mse", format!("({}, _)", self.targets.len()), p.shape()));
        }
        let total: f64 = self.targets.iter().enumerate().map(|(s, y)| (p.row(s)[0] - y).powi(2)).sum();
        Ok(Tensor::scalar(total / self.targets.len() as f64))
    }

    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, up: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        if !needs[0] {
            return Ok(vec![None]);
        }
        let p = inputs[0];
        let g = 2.0 * up.item()? / self.targets.len() as f64;
        let mut d = Tensor::zeros(p.shape());
        let k = p.dim(1);
        for (s, y) in self.targets.iter().enumerate() {
            d.data_mut()[s * k] = g * (p.row(s)[0] - y);
        }
        Ok(vec![Some(d)])
    }
}

fn class_indices(targets: &[f64], classes: usize) -> Result<Vec<usize>> {
    targets
        .iter()
        .map(|&y| {
            if y >= 0.0 && y.fract() == 0.0 && (y as usize) < classes {
                Ok(y as usize)
            } else {
                Err(NodeError::InvalidArgument(format!("class index {y} outside [0, {classes})")))
            }
        })
        .collect()
}

/// Records the task's objective on `head`: cross-entropy or MSE.
pub fn record_loss(tape: &mut Tape, task: Task, head: Var, targets: &[f64]) -> Result<Var> {
    match task {
        Task::Classification { classes } => {
            let targets = class_indices(targets, classes)?;
            tape.apply(CrossEntropy { targets }, &[head])
        }
        Task::Regression => tape.apply(Mse { targets: targets.to_vec() }, &[head]),
    }
}

/// Loss value without a tape.
pub fn loss_value(task: Task, head: &Tensor, targets: &[f64]) -> Result<f64> {
    match task {
        Task::Classification { classes } => CrossEntropy {
            targets: class_indices(targets, classes)?,
        }
        .forward(&[head])?
        .item(),
        Task::Regression => Mse { targets: targets.to_vec() }.forward(&[head])?.item(),
    }
}

/// Classification error rate (argmax of the head) or MSE; lower is better.
pub fn metric(task: Task, head: &Tensor, targets: &[f64]) -> f64 {
    let n = targets.len() as f64;
    match task {
        Task::Classification { .. } => {
            let wrong = targets
                .iter()
                .enumerate()
                .filter(|(s, &y)| crate::choice::argmax(head.row(*s)) as f64 != y)
                .count();
            wrong as f64 / n
        }
        Task::Regression => targets.iter().enumerate().map(|(s, y)| (head.row(s)[0] - y).powi(2)).sum::<f64>() / n,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    #[test]
    fn symmetric_logits_cost_ln2() {
        let z = Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let l = loss_value(Task::Classification { classes: 2 }, &z, &[0.0]).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn large_logits_stay_finite() {
        let z = Tensor::new(vec![1, 2], vec![1000.0, -1000.0]).unwrap();
        let l = loss_value(Task::Classification { classes: 2 }, &z, &[1.0]).unwrap();
        assert!((l - 2000.0).abs() < 1e-9);
    }

    #[test]
    fn perfect_regression_has_zero_loss_and_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(0, Tensor::new(vec![3, 1], vec![1.0, 2.0, 3.0]).unwrap());
        let l = record_loss(&mut tape, Task::Regression, p, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(tape.value(l).item().unwrap(), 0.0);
        let g = tape.backward(l).unwrap();
        assert!(g.get(0).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let z = Tensor::new(vec![2, 3], vec![0.1, -0.4, 1.2, 0.0, 0.3, -0.2]).unwrap();
        let mut tape = Tape::new();
        let v = tape.param(0, z.clone());
        let l = record_loss(&mut tape, Task::Classification { classes: 3 }, v, &[2.0, 0.0]).unwrap();
        let g = tape.backward(l).unwrap();
        let g = g.get(0).unwrap();
        for (s, y) in [(0usize, 2usize), (1, 0)] {
            let p = crate::choice::softmax(z.row(s));
            for j in 0..3 {
                let expected = (p[j] - f64::from(j == y)) / 2.0;
                assert!((g.row(s)[j] - expected).abs() < 1e-15);
            }
        }
        let report = grad_check(
            |tape, vars| record_loss(tape, Task::Classification { classes: 3 }, vars[0], &[2.0, 0.0]),
            &[z],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-8);
    }

    #[test]
    fn invalid_class_index_is_rejected() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::zeros(&[1, 2]));
        assert!(record_loss(&mut tape, Task::Classification { classes: 2 }, v, &[2.0]).is_err());
    }

    #[test]
    fn metrics() {
        let z = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        assert_eq!(metric(Task::Classification { classes: 2 }, &z, &[0.0, 0.0]), 0.5);
        let p = Tensor::new(vec![2, 1], vec![1.0, 3.0]).unwrap();
        assert_eq!(metric(Task::Regression, &p, &[0.0, 3.0]), 0.5);
    }
}
