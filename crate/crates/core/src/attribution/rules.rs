//! Relevance redistribution rules. All rules are linear in the incoming
//! relevance and conserve its sum up to the epsilon stabilizer.

use crate::error::{ensure, Error, Result};
use crate::tensor::Matrix;
use crate::Scalar;

/// `R / (z + eps * sign(z))`, with `sign(0) = +1` and `0` for a vanishing
/// denominator.
#[inline]
pub(crate) fn ratio<T: Scalar>(r: T, z: T, eps: T) -> T {
    let den = z + eps * z.stab_sign();
    if den == T::zero() {
        T::zero()
    } else {
        r / den
    }
}

/// Epsilon rule through `z = x · W`:
/// `R_in[j] = x[j] * sum_k W[j, k] R_out[k] / (z[k] + eps sign(z[k]))`.
pub fn propagate_linear<T: Scalar>(relevance_out: &[T], inputs: &[T], weight: &Matrix<T>, epsilon: T) -> Result<Vec<T>> {
    ensure!(
        weight.rows() == inputs.len() && weight.cols() == relevance_out.len(),
        Input,
        "linear rule shapes: inputs {}, weight {}x{}, relevance {}",
        inputs.len(),
        weight.rows(),
        weight.cols(),
        relevance_out.len()
    );
    ensure!(epsilon >= T::zero(), Input, "epsilon must be non-negative");
    let z = weight.left_mul(inputs);
    Ok(linear_with_z(relevance_out, inputs, weight, &z, epsilon))
}

pub(crate) fn linear_with_z<T: Scalar>(r_out: &[T], x: &[T], w: &Matrix<T>, z: &[T], eps: T) -> Vec<T> {
    let s: Vec<T> = r_out.iter().zip(z).map(|(&r, &z)| ratio(r, z, eps)).collect();
    let back = w.right_mul(&s);
    x.iter().zip(back).map(|(&xi, b)| xi * b).collect()
}

/// Pass-through rule for elementwise maps (activations, norms).
pub fn propagate_elementwise<T: Scalar>(relevance_out: &[T], pre: &[T], post: &[T]) -> Result<Vec<T>> {
    ensure!(
        relevance_out.len() == pre.len() && pre.len() == post.len(),
        Input,
        "elementwise rule shapes: relevance {}, pre {}, post {}",
        relevance_out.len(),
        pre.len(),
        post.len()
    );
    Ok(relevance_out.to_vec())
}

const STOCHASTIC_TOL: f64 = 1e-6;

/// Relevance through `out[t] = sum_i A[t, i] values[i]` for one head with
/// `A` held constant. Returns relevance on `values` (same shape).
pub fn propagate_attention<T: Scalar>(
    relevance_out: &Matrix<T>,
    attention: &Matrix<T>,
    values: &Matrix<T>,
    epsilon: T,
) -> Result<Matrix<T>> {
    let n = attention.rows();
    ensure!(
        attention.cols() == n && values.rows() == n && relevance_out.shape() == values.shape(),
        Input,
        "attention rule shapes: weights {:?}, values {:?}, relevance {:?}",
        attention.shape(),
        values.shape(),
        relevance_out.shape()
    );
    for t in 0..n {
        let row = attention.row(t);
        let s: f64 = row.iter().map(|v| v.f64()).sum();
        if (s - 1.0).abs() > STOCHASTIC_TOL || row.iter().any(|&a| a < T::zero()) {
            return Err(Error::Internal(format!("attention row {t} is not stochastic (sums to {s})")));
        }
    }
    let dh = values.cols();
    let mut mixed = Matrix::zeros(n, dh);
    for t in 0..n {
        for i in 0..n {
            let a = attention[(t, i)];
            if a != T::zero() {
                for (o, &v) in mixed.row_mut(t).iter_mut().zip(values.row(i)) {
                    *o += a * v;
                }
            }
        }
    }
    Ok(attention_with_mix(relevance_out, attention, values, &mixed, epsilon, 0..dh))
}

/// Attention rule over the columns `cols` of `values`/`mixed`, given the
/// forward mixture. Output has the full width of `values`.
pub(crate) fn attention_with_mix<T: Scalar>(
    r_out: &Matrix<T>,
    attn: &Matrix<T>,
    values: &Matrix<T>,
    mixed: &Matrix<T>,
    eps: T,
    cols: std::ops::Range<usize>,
) -> Matrix<T> {
    let n = attn.rows();
    let mut r_v = Matrix::zeros(n, values.cols());
    let mut s = vec![T::zero(); cols.len()];
    for t in 0..n {
        for (sj, j) in s.iter_mut().zip(cols.clone()) {
            *sj = ratio(r_out[(t, j)], mixed[(t, j)], eps);
        }
        for i in 0..n {
            let a = attn[(t, i)];
            if a == T::zero() {
                continue;
            }
            let v = &values.row(i)[cols.clone()];
            let dst = &mut r_v.row_mut(i)[cols.clone()];
            for ((d, &vj), &sj) in dst.iter_mut().zip(v).zip(&s) {
                *d += a * vj * sj;
            }
        }
    }
    r_v
}

/// Splits the relevance of `y = skip + branch` between its two inputs:
/// the branch takes `branch / (y + eps sign(y))` of it, the skip the rest,
/// so each coordinate's two shares sum to its input relevance.
pub fn split_residual<T: Scalar>(relevance: &[T], skip: &[T], branch: &[T], epsilon: T) -> Result<(Vec<T>, Vec<T>)> {
    ensure!(
        relevance.len() == skip.len() && skip.len() == branch.len(),
        Input,
        "residual split shapes: relevance {}, skip {}, branch {}",
        relevance.len(),
        skip.len(),
        branch.len()
    );
    let mut r_skip = Vec::with_capacity(relevance.len());
    let mut r_branch = Vec::with_capacity(relevance.len());
    for ((&r, &s), &b) in relevance.iter().zip(skip).zip(branch) {
        let rb = b * ratio(r, s + b, epsilon);
        r_branch.push(rb);
        r_skip.push(r - rb);
    }
    Ok((r_skip, r_branch))
}
