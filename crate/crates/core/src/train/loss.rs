use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// Softmax over all entities, gold tail as the single target.
    #[default]
    SoftmaxCe,
    /// Independent sigmoid per entity, every known training tail a positive.
    Bce,
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "softmax_ce" => Ok(Self::SoftmaxCe),
            "bce" => Ok(Self::Bce),
            other => Err(Error::Config(format!("unknown loss {other:?} (softmax_ce | bce)"))),
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::SoftmaxCe => "softmax_ce",
            Self::Bce => "bce",
        })
    }
}

fn check_ids(ids: &[usize], bound: usize) -> Result<()> {
    match ids.iter().find(|&&g| g >= bound) {
        Some(&id) => Err(Error::IdOutOfRange {
            kind: "gold entity",
            id,
            bound,
        }),
        None => Ok(()),
    }
}

/// Mean softmax cross entropy of `gold` per row, and its gradient.
///
/// With smoothing `eps` the target is `(1 - eps) * onehot + eps / |E|`.
/// Accumulates in f64 whatever the element type.
pub fn cross_entropy_loss<T: Scalar>(
    scores: &Matrix<T>,
    gold: &[usize],
    smoothing: f64,
) -> Result<(f64, Matrix<T>)> {
    let (b, n) = scores.shape();
    if gold.len() != b {
        return Err(Error::shape("cross entropy", (gold.len(), 1), (b, 1)));
    }
    check_ids(gold, n)?;
    let uniform = smoothing / n as f64;
    let mut grad = Matrix::zeros(b, n);
    let mut total = 0.0;
    for (i, &g) in gold.iter().enumerate() {
        let row = scores.row(i);
        let max = row.iter().map(|s| s.f64()).fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|s| (s.f64() - max).exp()).sum::<f64>().ln();
        let out = grad.row_mut(i);
        for (j, s) in row.iter().enumerate() {
            let logp = s.f64() - lse;
            let target = uniform + if j == g { 1.0 - smoothing } else { 0.0 };
            if target > 0.0 {
                total -= target * logp;
            }
            out[j] = T::of((logp.exp() - target) / b as f64);
        }
    }
    Ok((total / b as f64, grad))
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross entropy over every (query, entity) cell, with
/// `targets[i]` the positive entities of row `i`. Smoothing maps targets to
/// `(1 - eps) * y + eps / |E|`.
pub fn binary_cross_entropy_loss<T: Scalar>(
    scores: &Matrix<T>,
    targets: &[&[usize]],
    smoothing: f64,
) -> Result<(f64, Matrix<T>)> {
    let (b, n) = scores.shape();
    if targets.len() != b {
        return Err(Error::shape("binary cross entropy", (targets.len(), 1), (b, 1)));
    }
    let cells = (b * n) as f64;
    let mut grad = Matrix::zeros(b, n);
    let mut total = 0.0;
    let mut y = vec![0.0; n];
    for (i, pos) in targets.iter().enumerate() {
        check_ids(pos, n)?;
        y.fill(smoothing / n as f64);
        for &p in pos.iter() {
            y[p] = 1.0 - smoothing + smoothing / n as f64;
        }
        let out = grad.row_mut(i);
        for (j, s) in scores.row(i).iter().enumerate() {
            let s = s.f64();
            // -[y log σ(s) + (1-y) log(1-σ(s))] = softplus(s) - y s
            total += softplus(s) - y[j] * s;
            out[j] = T::of((sigmoid(s) - y[j]) / cells);
        }
    }
    Ok((total / cells, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::Rng;

    fn numeric_grad(scores: &Matrix<f64>, f: impl Fn(&Matrix<f64>) -> f64) -> Matrix<f64> {
        let h = 1e-6;
        let mut g = Matrix::zeros(scores.rows(), scores.cols());
        for k in 0..scores.len() {
            let mut p = scores.clone();
            p.data_mut()[k] += h;
            let mut m = scores.clone();
            m.data_mut()[k] -= h;
            g.data_mut()[k] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    #[test]
    fn uniform_scores_give_log_n() {
        let s = Matrix::<f64>::zeros(3, 4);
        let (loss, _) = cross_entropy_loss(&s, &[0, 1, 3], 0.0).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn confident_gold_drives_loss_to_zero() {
        let mut s = Matrix::<f64>::zeros(1, 6);
        s.set(0, 2, 50.0);
        let (loss, _) = cross_entropy_loss(&s, &[2], 0.0).unwrap();
        assert!(loss < 1e-20, "{loss}");
    }

    #[test]
    fn matches_direct_formula_and_finite_differences() {
        let s: Matrix<f64> = Rng::new(11).normal_matrix(3, 5, 1.5);
        let gold = [4, 0, 2];
        let (loss, grad) = cross_entropy_loss(&s, &gold, 0.0).unwrap();

        let direct = |s: &Matrix<f64>| {
            (0..3)
                .map(|i| {
                    let z: f64 = s.row(i).iter().map(|v| v.exp()).sum();
                    -(s.get(i, gold[i]).exp() / z).ln()
                })
                .sum::<f64>()
                / 3.0
        };
        assert!((loss - direct(&s)).abs() < 1e-12);
        let num = numeric_grad(&s, direct);
        for (a, n) in grad.data().iter().zip(num.data()) {
            assert!((a - n).abs() < 1e-6, "{a} vs {n}");
        }
    }

    #[test]
    fn smoothing_gradient_matches_finite_differences() {
        let s: Matrix<f64> = Rng::new(12).normal_matrix(2, 6, 1.0);
        let gold = [1, 5];
        let f = |s: &Matrix<f64>| cross_entropy_loss(s, &gold, 0.1).unwrap().0;
        let (_, grad) = cross_entropy_loss(&s, &gold, 0.1).unwrap();
        let num = numeric_grad(&s, f);
        for (a, n) in grad.data().iter().zip(num.data()) {
            assert!((a - n).abs() < 1e-6);
        }
    }

    #[test]
    fn bce_matches_direct_formula_and_finite_differences() {
        let s: Matrix<f64> = Rng::new(13).normal_matrix(2, 4, 2.0);
        let t0: &[usize] = &[0, 3];
        let t1: &[usize] = &[2];
        let targets = [t0, t1];
        let direct = |s: &Matrix<f64>| {
            let mut total = 0.0;
            for i in 0..2 {
                for j in 0..4 {
                    let y = if targets[i].contains(&j) { 1.0 } else { 0.0 };
                    let p = 1.0 / (1.0 + (-s.get(i, j)).exp());
                    total -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
                }
            }
            total / 8.0
        };
        let (loss, grad) = binary_cross_entropy_loss(&s, &targets, 0.0).unwrap();
        assert!((loss - direct(&s)).abs() < 1e-12);
        let num = numeric_grad(&s, direct);
        for (a, n) in grad.data().iter().zip(num.data()) {
            assert!((a - n).abs() < 1e-6);
        }
    }

    #[test]
    fn bad_gold_is_rejected() {
        let s = Matrix::<f32>::zeros(1, 3);
        assert!(cross_entropy_loss(&s, &[3], 0.0).is_err());
        assert!(cross_entropy_loss(&s, &[0, 1], 0.0).is_err());
    }
}
