//! Differentiable primitives: forward values and vector-Jacobian products.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Lower clamp applied to probabilities inside [`OpKind::Bce`].
pub const BCE_CLAMP: f64 = 1e-12;

/// The primitive operations understood by the tape.
#[derive(Debug, Clone, PartialEq)]
pub enum OpKind {
    /// `[m, k] x [k, n] -> [m, n]`
    MatMul,
    /// Elementwise add; the right operand may broadcast over leading axes.
    Add,
    /// Elementwise multiply with the same broadcasting rule as `Add`.
    Mul,
    Relu,
    Sigmoid,
    /// Per-row normalization of a `[batch, channels]` input within channel groups.
    GroupNorm {
        groups: usize,
        eps: f64,
    },
    Reshape(Vec<usize>),
    /// 2-D transpose.
    Transpose,
    /// Mean over every element, producing a scalar.
    Mean,
    /// Elementwise binary cross-entropy of probabilities (first operand)
    /// against targets (second operand, treated as constant).
    Bce,
}

impl OpKind {
    pub fn name(&self) -> &'static str {
        match self {
            OpKind::MatMul => "matmul",
            OpKind::Add => "add",
            OpKind::Mul => "mul",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::GroupNorm { .. } => "group_norm",
            OpKind::Reshape(_) => "reshape",
            OpKind::Transpose => "transpose",
            OpKind::Mean => "mean",
            OpKind::Bce => "bce",
        }
    }

    pub fn arity(&self) -> usize {
        match self {
            OpKind::MatMul | OpKind::Add | OpKind::Mul | OpKind::Bce => 2,
            _ => 1,
        }
    }
}

fn mismatch(op: &OpKind, lhs: &Tensor, rhs: &Tensor) -> Error {
    Error::ShapeMismatch {
        op: op.name(),
        lhs: lhs.shape().to_vec(),
        rhs: rhs.shape().to_vec(),
    }
}

/// `rhs` broadcasts onto `lhs` when its shape equals a suffix of `lhs`'s shape.
fn broadcasts(lhs: &[usize], rhs: &[usize]) -> bool {
    rhs.len() <= lhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs
}

fn matrix_dims(t: &Tensor) -> Option<(usize, usize)> {
    match t.shape() {
        [r, c] => Some((*r, *c)),
        _ => None,
    }
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; a.len()];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
}

/// Per-group statistics of one row; returns `(mean, inv_std)` per group.
fn group_stats(row: &[f64], groups: usize, eps: f64) -> Vec<(f64, f64)> {
    let size = row.len() / groups;
    row.chunks(size)
        .map(|g| {
            let mean = g.iter().sum::<f64>() / size as f64;
            let var = g.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / size as f64;
            (mean, 1.0 / (var + eps).sqrt())
        })
        .collect()
}

/// Checks operand shapes for `op` without evaluating it.
fn check(op: &OpKind, inputs: &[&Tensor]) -> Result<()> {
    if inputs.len() != op.arity() {
        return Err(Error::InvalidArgument(format!(
            "{} takes {} operands, got {}",
            op.name(),
            op.arity(),
            inputs.len()
        )));
    }
    match op {
        OpKind::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            match (matrix_dims(a), matrix_dims(b)) {
                (Some((_, k1)), Some((k2, _))) if k1 == k2 => Ok(()),
                _ => Err(mismatch(op, a, b)),
            }
        }
        OpKind::Add | OpKind::Mul => {
            if broadcasts(inputs[0].shape(), inputs[1].shape()) {
                Ok(())
            } else {
                Err(mismatch(op, inputs[0], inputs[1]))
            }
        }
        OpKind::Bce => {
            if inputs[0].shape() == inputs[1].shape() {
                Ok(())
            } else {
                Err(mismatch(op, inputs[0], inputs[1]))
            }
        }
        OpKind::GroupNorm { groups, eps } => {
            let x = inputs[0];
            let Some((_, c)) = matrix_dims(x) else {
                return Err(Error::ShapeMismatch {
                    op: op.name(),
                    lhs: x.shape().to_vec(),
                    rhs: vec![*groups],
                });
            };
            if *groups == 0 || c % groups != 0 {
                return Err(Error::GroupsIndivisible {
                    groups: *groups,
                    width: c,
                });
            }
            if !(*eps >= 0.0 && eps.is_finite()) {
                return Err(Error::InvalidArgument(format!("group-norm eps {eps}")));
            }
            Ok(())
        }
        OpKind::Reshape(shape) => {
            if shape.iter().product::<usize>() == inputs[0].len() && !shape.contains(&0) {
                Ok(())
            } else {
                Err(Error::ShapeMismatch {
                    op: op.name(),
                    lhs: inputs[0].shape().to_vec(),
                    rhs: shape.clone(),
                })
            }
        }
        OpKind::Transpose => {
            if matrix_dims(inputs[0]).is_some() {
                Ok(())
            } else {
                Err(Error::ShapeMismatch {
                    op: op.name(),
                    lhs: inputs[0].shape().to_vec(),
                    rhs: vec![],
                })
            }
        }
        OpKind::Relu | OpKind::Sigmoid | OpKind::Mean => Ok(()),
    }
}

/// Evaluates one primitive on concrete operands.
pub fn forward(op: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    check(op, inputs)?;
    let x = inputs[0];
    let out = match op {
        OpKind::MatMul => {
            let (m, k) = matrix_dims(x).unwrap();
            let (_, n) = matrix_dims(inputs[1]).unwrap();
            Tensor::from_parts(vec![m, n], matmul_raw(x.data(), inputs[1].data(), m, k, n))
        }
        OpKind::Add | OpKind::Mul => {
            let b = inputs[1].data();
            let data = x
                .data()
                .iter()
                .enumerate()
                .map(|(i, &a)| {
                    let bv = b[i % b.len()];
                    if *op == OpKind::Add {
                        a + bv
                    } else {
                        a * bv
                    }
                })
                .collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        }
        OpKind::Relu => x.map(|v| if v > 0.0 { v } else { 0.0 }),
        OpKind::Sigmoid => x.map(sigmoid),
        OpKind::GroupNorm { groups, eps } => {
            let (rows, c) = matrix_dims(x).unwrap();
            let size = c / groups;
            let mut data = Vec::with_capacity(x.len());
            for r in 0..rows {
                let row = &x.data()[r * c..(r + 1) * c];
                let stats = group_stats(row, *groups, *eps);
                for (j, &v) in row.iter().enumerate() {
                    let (mean, inv_std) = stats[j / size];
                    data.push((v - mean) * inv_std);
                }
            }
            Tensor::from_parts(vec![rows, c], data)
        }
        OpKind::Reshape(shape) => Tensor::from_parts(shape.clone(), x.data().to_vec()),
        OpKind::Transpose => {
            let (r, c) = matrix_dims(x).unwrap();
            Tensor::from_parts(vec![c, r], transpose_raw(x.data(), r, c))
        }
        OpKind::Mean => Tensor::scalar(x.data().iter().sum::<f64>() / x.len() as f64),
        OpKind::Bce => {
            let data = x
                .data()
                .iter()
                .zip(inputs[1].data())
                .map(|(&p, &y)| {
                    let p = clamp_prob(p);
                    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
                })
                .collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        }
    };
    Ok(out)
}

/// Sums `g` (shaped like `full`) down onto the trailing shape `target`.
fn reduce_to(g: &[f64], target: &[usize]) -> Tensor {
    let n: usize = target.iter().product();
    let mut out = vec![0.0; n];
    for (i, v) in g.iter().enumerate() {
        out[i % n] += v;
    }
    Tensor::from_parts(target.to_vec(), out)
}

/// Vector-Jacobian product: gradients for each operand given the upstream
/// gradient `grad` of `output`.
pub fn backward(op: &OpKind, inputs: &[&Tensor], output: &Tensor, grad: &Tensor) -> Vec<Tensor> {
    let x = inputs[0];
    let g = grad.data();
    match op {
        OpKind::MatMul => {
            let b = inputs[1];
            let (m, k) = matrix_dims(x).unwrap();
            let (_, n) = matrix_dims(b).unwrap();
            let bt = transpose_raw(b.data(), k, n);
            let at = transpose_raw(x.data(), m, k);
            vec![
                Tensor::from_parts(vec![m, k], matmul_raw(g, &bt, m, n, k)),
                Tensor::from_parts(vec![k, n], matmul_raw(&at, g, k, m, n)),
            ]
        }
        OpKind::Add => vec![grad.clone(), reduce_to(g, inputs[1].shape())],
        OpKind::Mul => {
            let b = inputs[1].data();
            let ga: Vec<f64> = g
                .iter()
                .enumerate()
                .map(|(i, v)| v * b[i % b.len()])
                .collect();
            let gb: Vec<f64> = g.iter().zip(x.data()).map(|(v, a)| v * a).collect();
            vec![
                Tensor::from_parts(x.shape().to_vec(), ga),
                reduce_to(&gb, inputs[1].shape()),
            ]
        }
        OpKind::Relu => {
            // subgradient at 0 is 0
            let data = g
                .iter()
                .zip(x.data())
                .map(|(v, &a)| if a > 0.0 { *v } else { 0.0 })
                .collect();
            vec![Tensor::from_parts(x.shape().to_vec(), data)]
        }
        OpKind::Sigmoid => {
            let data = g
                .iter()
                .zip(output.data())
                .map(|(v, &y)| v * y * (1.0 - y))
                .collect();
            vec![Tensor::from_parts(x.shape().to_vec(), data)]
        }
        OpKind::GroupNorm { groups, eps } => {
            let (rows, c) = matrix_dims(x).unwrap();
            let size = c / groups;
            let mut data = vec![0.0; x.len()];
            for r in 0..rows {
                let row = &x.data()[r * c..(r + 1) * c];
                let stats = group_stats(row, *groups, *eps);
                for (gi, &(_, inv_std)) in stats.iter().enumerate() {
                    let lo = r * c + gi * size;
                    let hi = lo + size;
                    let xhat = &output.data()[lo..hi];
                    let dy = &g[lo..hi];
                    let mean_dy = dy.iter().sum::<f64>() / size as f64;
                    let mean_dy_xhat =
                        dy.iter().zip(xhat).map(|(a, b)| a * b).sum::<f64>() / size as f64;
                    for j in 0..size {
                        data[lo + j] = inv_std * (dy[j] - mean_dy - xhat[j] * mean_dy_xhat);
                    }
                }
            }
            vec![Tensor::from_parts(vec![rows, c], data)]
        }
        OpKind::Reshape(_) => vec![Tensor::from_parts(x.shape().to_vec(), g.to_vec())],
        OpKind::Transpose => {
            let (r, c) = matrix_dims(x).unwrap();
            vec![Tensor::from_parts(vec![r, c], transpose_raw(g, c, r))]
        }
        OpKind::Mean => {
            let v = g[0] / x.len() as f64;
            vec![Tensor::full(x.shape(), v)]
        }
        OpKind::Bce => {
            let y = inputs[1].data();
            let data = g
                .iter()
                .zip(x.data())
                .zip(y)
                .map(|((v, &p), &t)| {
                    if p <= BCE_CLAMP || p >= 1.0 - BCE_CLAMP {
                        0.0
                    } else {
                        v * (-t / p + (1.0 - t) / (1.0 - p))
                    }
                })
                .collect();
            vec![
                Tensor::from_parts(x.shape().to_vec(), data),
                Tensor::zeros(inputs[1].shape()),
            ]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_by_identity() {
        let a = m(&[vec![1.0, 2.0], vec![3.0, 4.0]]);
        let out = forward(&OpKind::MatMul, &[&a, &Tensor::identity(2)]).unwrap();
        assert_eq!(out, a);
    }

    #[test]
    fn relu_definition() {
        let x = Tensor::vector(vec![-1.0, 0.0, 2.0]);
        let out = forward(&OpKind::Relu, &[&x]).unwrap();
        assert_eq!(out.data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let out = forward(&OpKind::Sigmoid, &[&Tensor::vector(vec![0.0])]).unwrap();
        assert_eq!(out.data(), &[0.5]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        let err = forward(&OpKind::MatMul, &[&a, &b]).unwrap_err();
        assert_eq!(
            err,
            Error::ShapeMismatch {
                op: "matmul",
                lhs: vec![2, 3],
                rhs: vec![2, 3]
            }
        );
    }

    #[test]
    fn add_broadcasts_only_over_leading_axis() {
        let a = Tensor::zeros(&[3, 2]);
        let bias = Tensor::vector(vec![1.0, 2.0]);
        let out = forward(&OpKind::Add, &[&a, &bias]).unwrap();
        assert_eq!(out.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let bad = Tensor::vector(vec![1.0, 2.0, 3.0]);
        assert!(forward(&OpKind::Add, &[&a, &bad]).is_err());
    }

    #[test]
    fn bce_clamps_saturated_probabilities() {
        let p = Tensor::vector(vec![0.0, 1.0]);
        let y = Tensor::vector(vec![1.0, 0.0]);
        let out = forward(&OpKind::Bce, &[&p, &y]).unwrap();
        assert!(out.is_finite());
        assert!((out.data()[0] - (-(BCE_CLAMP.ln()))).abs() < 1e-9);
    }

    #[test]
    fn group_norm_rejects_indivisible() {
        let x = Tensor::zeros(&[1, 6]);
        let err = forward(
            &OpKind::GroupNorm {
                groups: 4,
                eps: 1e-5,
            },
            &[&x],
        )
        .unwrap_err();
        assert!(matches!(
            err,
            Error::GroupsIndivisible {
                groups: 4,
                width: 6
            }
        ));
    }
}
