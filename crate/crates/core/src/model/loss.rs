//! Per-example classification losses and their logit gradients.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    /// `logsumexp(f) - f_y`
    Ce,
    /// `logsumexp_{i != y}(f_i) - f_y`
    Smoothmax,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ce" => Ok(LossKind::Ce),
            "smoothmax" => Ok(LossKind::Smoothmax),
            other => Err(Error::usage(format!("unknown loss kind `{other}`"))),
        }
    }
}

fn check_labels<T: Real>(logits: &ArrayView2<T>, labels: &[usize]) -> Result<()> {
    let (b, k) = logits.dim();
    if labels.len() != b {
        return Err(Error::input(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::input(format!("label {bad} out of range for {k} classes")));
    }
    Ok(())
}

/// Max-shifted log-sum-exp over the entries `skip` excludes.
fn logsumexp<T: Real>(row: &ArrayView1<T>, skip: Option<usize>) -> T {
    let keep = |i: &usize| Some(*i) != skip;
    let max = (0..row.len())
        .filter(keep)
        .map(|i| row[i])
        .fold(T::neg_infinity(), T::max);
    let sum: T = (0..row.len()).filter(keep).map(|i| (row[i] - max).exp()).sum();
    max + sum.ln()
}

/// `log(1 + exp(z))` without overflow for large `z`.
fn softplus<T: Real>(z: T) -> T {
    if z > T::zero() {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

/// Cross-entropy as `softplus(logsumexp_{i != y}(f_i) - f_y)`, which keeps
/// its precision when the true class dominates.
fn ce_row<T: Real>(row: &ArrayView1<T>, y: usize) -> T {
    if row.len() < 2 {
        return T::zero();
    }
    softplus(logsumexp(row, Some(y)) - row[y])
}

pub fn loss_ce<T: Real>(logits: &ArrayView2<T>, labels: &[usize]) -> Result<Array1<T>> {
    check_labels(logits, labels)?;
    Ok(Array1::from_iter(
        logits.outer_iter().zip(labels).map(|(row, &y)| ce_row(&row, y)),
    ))
}

pub fn loss_smoothmax<T: Real>(logits: &ArrayView2<T>, labels: &[usize]) -> Result<Array1<T>> {
    check_labels(logits, labels)?;
    if logits.ncols() < 2 {
        return Err(Error::input("smooth-max loss needs at least two classes"));
    }
    Ok(Array1::from_iter(
        logits
            .outer_iter()
            .zip(labels)
            .map(|(row, &y)| logsumexp(&row, Some(y)) - row[y]),
    ))
}

/// Per-example losses plus `d loss_b / d logits_b` for every row.
pub fn loss_and_grad<T: Real>(
    kind: LossKind,
    logits: &ArrayView2<T>,
    labels: &[usize],
) -> Result<(Array1<T>, Array2<T>)> {
    let losses = match kind {
        LossKind::Ce => loss_ce(logits, labels)?,
        LossKind::Smoothmax => loss_smoothmax(logits, labels)?,
    };
    let mut grad = Array2::<T>::zeros(logits.dim());
    for ((row, mut g), &y) in logits.outer_iter().zip(grad.outer_iter_mut()).zip(labels) {
        let skip = (kind == LossKind::Smoothmax).then_some(y);
        let lse = logsumexp(&row, skip);
        for i in 0..row.len() {
            if Some(i) != skip {
                g[i] = (row[i] - lse).exp();
            }
        }
        // `p_y - 1` rounds to zero once p_y saturates; the other classes'
        // mass keeps the true-logit term alive.
        g[y] = match kind {
            LossKind::Ce => -(0..row.len()).filter(|&i| i != y).map(|i| g[i]).sum::<T>(),
            LossKind::Smoothmax => -T::one(),
        };
    }
    Ok((losses, grad))
}

/// Share of probability mass outside the true class,
/// `sum_{i != y} exp(f_i) / sum_i exp(f_i)`.
///
/// It links the two losses: `grad L_ce = r * grad L_smoothmax` for any
/// parameterization of the logits.
pub fn ce_smoothmax_ratio<T: Real>(logits: &ArrayView1<T>, y: usize) -> Result<T> {
    if logits.len() < 2 {
        return Err(Error::input("ratio needs at least two classes"));
    }
    if y >= logits.len() {
        return Err(Error::input(format!("label {y} out of range")));
    }
    Ok((logsumexp(logits, Some(y)) - logsumexp(logits, None)).exp())
}

pub fn softmax_row<T: Real>(row: &ArrayView1<T>) -> Array1<T> {
    let lse = logsumexp(row, None);
    row.mapv(|v| (v - lse).exp())
}
