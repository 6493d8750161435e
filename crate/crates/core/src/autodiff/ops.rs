//! Generic operations: elementwise arithmetic, affine maps, concatenation,
//! reshapes and reductions.

use super::tape::{Operation, Tape, Var};
use crate::error::{shape_err, Result};
use crate::par;
use crate::tensor::Tensor;

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, a.shape(), b.shape()));
    }
    Ok(())
}

fn zip_with(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shapes checked by caller")
}

pub struct Add;

impl Operation for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        same_shape("add", inputs[0], inputs[1])?;
        Ok(zip_with(inputs[0], inputs[1], |a, b| a + b))
    }
    fn vjp(&self, _: &[&Tensor], _: &Tensor, up: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(needs.iter().map(|&n| n.then(|| up.clone())).collect())
    }
}

pub struct Sub;

impl Operation for Sub {
    fn name(&self) -> &'static str {
        "sub"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        same_shape("sub", inputs[0], inputs[1])?;
        Ok(zip_with(inputs[0], inputs[1], |a, b| a - b))
    }
    fn vjp(&self, _: &[&Tensor], _: &Tensor, up: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![needs[0].then(|| up.clone()), needs[1].then(|| up.map(|g| -g))])
    }
}

/// Elementwise (Hadamard) product.
pub struct Mul;

impl Operation for Mul {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        same_shape("mul", inputs[0], inputs[1])?;
        Ok(zip_with(inputs[0], inputs[1], |a, b| a * b))
    }
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, up: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![
            needs[0].then(|| zip_with(up, inputs[1], |g, b| g * b)),
            needs[1].then(|| zip_with(up, inputs[0], |g, a| g * a)),
        ])
    }
}

pub struct Scale(pub f64);

impl Operation for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].map(|v| v * self.0))
    }
    fn vjp(&self, _: &[&Tensor], _: &Tensor, up: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![needs[0].then(|| up.map(|g| g * self.0))])
    }
}

/// Absolute value. The derivative at zero is taken as +1 (right derivative).
pub struct Abs;

impl Operation for Abs {
    fn name(&self) -> &'static str {
        "abs"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].map(f64::abs))
    }
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, up: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![needs[0].then(|| zip_with(up, inputs[0], |g, x| if x >= 0.0 { g } else { -g }))])
    }
}

/// Sum of all entries; produces a scalar.
pub struct Sum;

impl Operation for Sum {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(Tensor::scalar(inputs[0].data().iter().sum()))
    }
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, up: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let g = up.item()?;
        Ok(vec![needs[0].then(|| Tensor::full(inputs[0].shape(), g))])
    }
}

/// Mean of all entries; produces a scalar.
pub struct Mean;

impl Operation for Mean {
    fn name(&self) -> &'static str {
        "mean"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let n = inputs[0].len().max(1) as f64;
        Ok(Tensor::scalar(inputs[0].data().iter().sum::<f64>() / n))
    }
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, up: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let g = up.item()? / inputs[0].len().max(1) as f64;
        Ok(vec![needs[0].then(|| Tensor::full(inputs[0].shape(), g))])
    }
}

/// `x · wᵀ` for `x` of shape `(b, n)` and `w` whose trailing axis is `n`
/// (viewed as `(k, n)`). The output has shape `(b, k)`.
pub struct MatMulT;

impl MatMulT {
    fn dims(x: &Tensor, w: &Tensor) -> Result<(usize, usize, usize)> {
        if x.ndim() != 2 {
            return Err(shape_err("matmul_t", "(b, n)", x.shape()));
        }
        let (b, n) = (x.dim(0), x.dim(1));
        let wn = w.shape().last().copied().unwrap_or(1);
        if wn != n {
            return Err(shape_err("matmul_t", n, wn));
        }
        let k = w.len().checked_div(n).unwrap_or(0);
        Ok((b, n, k))
    }
}

impl Operation for MatMulT {
    fn name(&self) -> &'static str {
        "matmul_t"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let (x, w) = (inputs[0], inputs[1]);
        let (b, n, k) = Self::dims(x, w)?;
        let mut out = vec![0.0; b * k];
        let (xd, wd) = (x.data(), w.data());
        par::for_each_row(&mut out, k, |s, row| {
            let xs = &xd[s * n..(s + 1) * n];
            let mut quads = row.chunks_exact_mut(4);
            let mut wq = wd.chunks_exact(4 * n);
            for (o, w) in (&mut quads).zip(&mut wq) {
                o.copy_from_slice(&crate::tensor::dot4(xs, w));
            }
            for (o, wr) in quads.into_remainder().iter_mut().zip(wq.remainder().chunks_exact(n)) {
                *o = crate::tensor::dot(xs, wr);
            }
        });
        Tensor::new(vec![b, k], out)
    }
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, up: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let (x, w) = (inputs[0], inputs[1]);
        let (b, n, k) = Self::dims(x, w)?;
        let (xd, wd, ud) = (x.data(), w.data(), up.data());
        let dx = needs[0].then(|| {
            let mut dx = vec![0.0; b * n];
            par::for_each_row(&mut dx, n, |s, row| {
                for (kk, wr) in wd.chunks_exact(n).enumerate() {
                    let g = ud[s * k + kk];
                    for (d, wv) in row.iter_mut().zip(wr) {
                        *d += g * wv;
                    }
                }
            });
            Tensor::new(vec![b, n], dx).expect("dx shape")
        });
        let dw = needs[1].then(|| {
            let mut dw = vec![0.0; k * n];
            par::for_each_row(&mut dw, n, |kk, row| {
                for s in 0..b {
                    let g = ud[s * k + kk];
                    for (d, xv) in row.iter_mut().zip(&xd[s * n..(s + 1) * n]) {
                        *d += g * xv;
                    }
                }
            });
            Tensor::new(w.shape().to_vec(), dw).expect("dw shape")
        });
        Ok(vec![dx, dw])
    }
}

/// Concatenation of `(b, w_i)` matrices along the trailing axis.
pub struct Concat;

impl Operation for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let b = inputs.first().map_or(0, |t| t.dim(0));
        for t in inputs {
            if t.ndim() != 2 || t.dim(0) != b {
                return Err(shape_err("concat", format!("({b}, _)"), t.shape()));
            }
        }
        let widths: Vec<usize> = inputs.iter().map(|t| t.dim(1)).collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(b * total);
        for s in 0..b {
            for t in inputs {
                data.extend_from_slice(t.row(s));
            }
        }
        Tensor::new(vec![b, total], data)
    }
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, up: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        let total = up.dim(1);
        let mut offset = 0;
        let mut out = Vec::with_capacity(inputs.len());
        for (t, &need) in inputs.iter().zip(needs) {
            let (b, w) = (t.dim(0), t.dim(1));
            if need {
                let mut d = Vec::with_capacity(b * w);
                for s in 0..b {
                    d.extend_from_slice(&up.data()[s * total + offset..s * total + offset + w]);
                }
                out.push(Some(Tensor::new(vec![b, w], d)?));
            } else {
                out.push(None);
            }
            offset += w;
        }
        Ok(out)
    }
}

pub struct Reshape(pub Vec<usize>);

impl Operation for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        inputs[0].clone().reshape(&self.0)
    }
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, up: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![if needs[0] {
            Some(up.clone().reshape(inputs[0].shape())?)
        } else {
            None
        }])
    }
}

/// `softplus(x) + offset`, used to keep scales strictly positive.
pub struct Softplus {
    pub offset: f64,
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Inverse of [`softplus`] on `(0, ∞)`.
pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Operation for Softplus {
    fn name(&self) -> &'static str {
        "softplus"
    }
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        Ok(inputs[0].map(|v| softplus(v) + self.offset))
    }
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, up: &Tensor, needs: &[bool]) -> Result<Vec<Option<Tensor>>> {
        Ok(vec![needs[0].then(|| zip_with(up, inputs[0], |g, x| g * sigmoid(x)))])
    }
}

impl Tape {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var> {
        self.apply(Scale(k), &[a])
    }
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.apply(Abs, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Sum, &[a])
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Mean, &[a])
    }
    pub fn matmul_t(&mut self, x: Var, w: Var) -> Result<Var> {
        self.apply(MatMulT, &[x, w])
    }
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.len() == 1 {
            return Ok(parts[0]);
        }
        self.apply(Concat, parts)
    }
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.apply(Reshape(shape.to_vec()), &[a])
    }
    pub fn softplus(&mut self, a: Var, offset: f64) -> Result<Var> {
        self.apply(Softplus { offset }, &[a])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::tensor::Parameter;

    #[test]
    fn quadratic_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(0, Tensor::from_vec(vec![1.0, 2.0]));
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(0).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn constant_loss_leaves_parameters_at_zero() {
        let mut tape = Tape::new();
        let _p = tape.param(0, Tensor::from_vec(vec![1.0, 2.0]));
        let c = tape.constant(Tensor::scalar(3.0));
        let g = tape.backward(c).unwrap();
        let mut params = vec![Parameter::new("p", Tensor::from_vec(vec![1.0, 2.0]))];
        params[0].grad = Tensor::from_vec(vec![9.0, 9.0]);
        g.assign(params.iter_mut()).unwrap();
        assert_eq!(params[0].grad.data(), &[0.0, 0.0]);
    }

    #[test]
    fn linear_map_gradient() {
        let mut tape = Tape::new();
        let a = tape.param(0, Tensor::new(vec![1, 2], vec![3.0, 5.0]).unwrap());
        let x = tape.constant(Tensor::new(vec![1, 2], vec![1.0, 1.0]).unwrap());
        let ax = tape.matmul_t(x, a).unwrap();
        assert_eq!(tape.value(ax).data(), &[8.0]);
        let loss = tape.sum(ax).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.get(0).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let p = tape.param(0, Tensor::from_vec(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(p),
            Err(crate::NodeError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn backward_twice_is_identical() {
        let mut tape = Tape::new();
        let p = tape.param(0, Tensor::from_vec(vec![0.3, -1.2, 2.0]));
        let s = tape.softplus(p, 0.0).unwrap();
        let m = tape.mul(s, p).unwrap();
        let loss = tape.mean(m).unwrap();
        let g1 = tape.backward(loss).unwrap();
        let g2 = tape.backward(loss).unwrap();
        assert_eq!(g1.get(0), g2.get(0));
    }

    #[test]
    fn gradient_is_linear_in_the_loss() {
        let x = Tensor::new(vec![3, 2], vec![0.1, -0.4, 1.3, 0.7, -2.0, 0.5]).unwrap();
        let w = Tensor::new(vec![2, 2], vec![0.2, -0.3, 0.9, 1.1]).unwrap();
        let run = |a: f64, b: f64| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let wv = tape.param(0, w.clone());
            let y = tape.matmul_t(xv, wv).unwrap();
            let sp = tape.softplus(y, 0.0).unwrap();
            let l1 = tape.sum(sp).unwrap();
            let sq = tape.mul(y, y).unwrap();
            let l2 = tape.mean(sq).unwrap();
            let l1s = tape.scale(l1, a).unwrap();
            let l2s = tape.scale(l2, b).unwrap();
            let l = tape.add(l1s, l2s).unwrap();
            tape.backward(l).unwrap().get(0).unwrap().clone()
        };
        let (a, b) = (0.7, -2.3);
        let combined = run(a, b);
        let g1 = run(1.0, 0.0);
        let g2 = run(0.0, 1.0);
        for i in 0..combined.len() {
            let lin = a * g1.data()[i] + b * g2.data()[i];
            assert!((combined.data()[i] - lin).abs() <= 1e-10);
        }
    }

    #[test]
    fn generic_ops_pass_finite_differences() {
        let x = Tensor::new(vec![4, 3], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let w = Tensor::new(vec![2, 3], vec![0.3, -0.8, 0.5, 1.2, 0.1, -0.6]).unwrap();
        let report = grad_check(
            |tape, vars| {
                let xv = tape.constant(x.clone());
                let y = tape.matmul_t(xv, vars[0])?;
                let sp = tape.softplus(y, 1e-6)?;
                let c = tape.concat(&[y, sp])?;
                let r = tape.reshape(c, &[16])?;
                let sq = tape.mul(r, r)?;
                let d = tape.sub(sq, r)?;
                tape.mean(d)
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_error <= 1e-8, "{report:?}");
    }
}
