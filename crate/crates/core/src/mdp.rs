//! Classification as a one-step decision problem: states are inputs, actions
//! are labels and the reward is 1 for the correct label. This module holds
//! the objective, the 0-1 loss, symmetric label noise and executable forms
//! of the identities relating them.

use rand::Rng;

use crate::error::{invalid, Error, Result};
use crate::losses::reward;
use crate::tensor::Tensor;

/// Tolerance on row sums accepted as "on the simplex".
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = k;
        }
    }
    best
}

/// Row-wise argmax of a score matrix.
pub fn argmax_rows(scores: &Tensor) -> Vec<usize> {
    (0..scores.rows()).map(|i| argmax(scores.row(i))).collect()
}

/// Fraction of mismatched predictions.
pub fn zero_one_loss(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(invalid("zero_one_loss: empty input"));
    }
    if predictions.len() != labels.len() {
        return Err(invalid(format!(
            "zero_one_loss: {} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let wrong = predictions.iter().zip(labels).filter(|(p, y)| p != y).count();
    Ok(wrong as f64 / labels.len() as f64)
}

fn check_simplex(probs: &Tensor, labels: &[usize]) -> Result<usize> {
    if probs.shape().len() != 2 || probs.rows() != labels.len() || labels.is_empty() {
        return Err(invalid(format!(
            "expected {} probability rows, got shape {:?}",
            labels.len(),
            probs.shape()
        )));
    }
    let k = probs.cols();
    for i in 0..probs.rows() {
        let row = probs.row(i);
        let s: f64 = row.iter().sum();
        if (s - 1.0).abs() > SIMPLEX_TOL || row.iter().any(|&p| p < 0.0) {
            return Err(invalid(format!("row {i} is not a distribution (sum {s})")));
        }
        if labels[i] >= k {
            return Err(Error::LabelOutOfRange {
                label: labels[i],
                classes: k,
            });
        }
    }
    Ok(k)
}

/// Expected reward `J = (1/N) Σ_i Σ_a π(a|x_i) R(y_i, a)` under the
/// empirical state distribution.
pub fn rl_objective(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let k = check_simplex(probs, labels)?;
    let total: f64 = labels
        .iter()
        .enumerate()
        .map(|(i, &y)| (0..k).map(|a| probs.at(i, a) * reward(y, a)).sum::<f64>())
        .sum();
    Ok(total / labels.len() as f64)
}

/// One-hot rows at the argmax of each score row.
pub fn deterministic_policy(scores: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(scores.shape());
    for (i, a) in argmax_rows(scores).into_iter().enumerate() {
        out.row_mut(i)[a] = 1.0;
    }
    out
}

/// Symmetric label noise: keep the label with probability `1 - η`, otherwise
/// move it uniformly to one of the other `K - 1` classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseChannel {
    eta: f64,
    classes: usize,
}

impl NoiseChannel {
    pub fn new(eta: f64, classes: usize) -> Result<Self> {
        if !(0.0..=1.0).contains(&eta) {
            return Err(invalid(format!("noise rate must lie in [0, 1], got {eta}")));
        }
        if classes < 2 {
            return Err(invalid(format!("noise channel needs K >= 2, got {classes}")));
        }
        Ok(Self { eta, classes })
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    /// `q_η(k | y)`.
    pub fn prob(&self, clean: usize, observed: usize) -> f64 {
        if clean == observed {
            1.0 - self.eta
        } else {
            self.eta / (self.classes - 1) as f64
        }
    }

    /// The target distribution `q_η(· | y)` as a vector.
    pub fn target(&self, label: usize) -> Vec<f64> {
        (0..self.classes).map(|k| self.prob(label, k)).collect()
    }

    /// Passes one label through the channel.
    pub fn corrupt<R: Rng + ?Sized>(&self, label: usize, rng: &mut R) -> usize {
        if self.eta == 0.0 {
            return label;
        }
        let flip: f64 = rng.random();
        if flip >= self.eta {
            return label;
        }
        let other = rng.random_range(0..self.classes - 1);
        if other >= label {
            other + 1
        } else {
            other
        }
    }
}

/// Labels independently passed through `channel`.
pub fn apply_noise<R: Rng + ?Sized>(labels: &[usize], channel: &NoiseChannel, rng: &mut R) -> Vec<usize> {
    labels.iter().map(|&y| channel.corrupt(y, rng)).collect()
}

/// Expected objective under noisy labels, computed per sample as
/// `(1 - η) π(y) + η/(K-1) · (1 - π(y))`.
pub fn noisy_objective_exact(probs: &Tensor, clean_labels: &[usize], eta: f64) -> Result<f64> {
    let k = check_simplex(probs, clean_labels)?;
    let channel = NoiseChannel::new(eta, k)?;
    let off = channel.eta / (k - 1) as f64;
    let total: f64 = clean_labels
        .iter()
        .enumerate()
        .map(|(i, &y)| {
            let py = probs.at(i, y);
            (1.0 - eta) * py + off * (1.0 - py)
        })
        .sum();
    Ok(total / clean_labels.len() as f64)
}

/// Closed form of the noisy objective as an affine map of the clean one:
/// `(1 - Kη/(K-1)) J + η/(K-1)`.
pub fn noisy_objective_affine(clean_objective: f64, eta: f64, classes: usize) -> f64 {
    let k = classes as f64;
    (1.0 - k * eta / (k - 1.0)) * clean_objective + eta / (k - 1.0)
}

/// Whether two policies are ranked the same by the clean and the noisy
/// objective (equal values on both sides count as agreement).
pub fn noisy_ranking_preserved(probs_a: &Tensor, probs_b: &Tensor, labels: &[usize], eta: f64) -> Result<bool> {
    let k = probs_a.cols();
    if k < 2 {
        return Err(invalid("ranking check needs K >= 2"));
    }
    if !(0.0..1.0 - 1.0 / k as f64).contains(&eta) {
        return Err(invalid(format!(
            "noise rate {eta} must satisfy 0 <= eta < 1 - 1/K = {}",
            1.0 - 1.0 / k as f64
        )));
    }
    let clean = rl_objective(probs_a, labels)? - rl_objective(probs_b, labels)?;
    let noisy = noisy_objective_exact(probs_a, labels, eta)? - noisy_objective_exact(probs_b, labels, eta)?;
    Ok(sign(clean) == sign(noisy))
}

fn sign(v: f64) -> i8 {
    if v > 0.0 {
        1
    } else if v < 0.0 {
        -1
    } else {
        0
    }
}

/// Both sides of `-KL(p ‖ q_η) - H(p) = A·p(y*) + B`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KlEntropyIdentity {
    pub lhs: f64,
    pub rhs: f64,
    pub diff: f64,
    /// `A = log(1-η) - log(η/(K-1))`
    pub a: f64,
    /// `B = log(η/(K-1))`
    pub b: f64,
}

/// `A` and `B` of the KL-plus-entropy identity for `η` and `K`.
pub fn kl_identity_coefficients(eta: f64, classes: usize) -> (f64, f64) {
    let b = (eta / (classes - 1) as f64).ln();
    ((1.0 - eta).ln() - b, b)
}

/// Evaluates both sides of the KL-plus-entropy identity for a strictly
/// positive distribution `p` and observed label `true_class`.
pub fn kl_entropy_identity(p: &[f64], true_class: usize, eta: f64) -> Result<KlEntropyIdentity> {
    let k = p.len();
    if k < 2 {
        return Err(invalid("need at least two classes"));
    }
    if true_class >= k {
        return Err(Error::LabelOutOfRange {
            label: true_class,
            classes: k,
        });
    }
    if !(eta > 0.0 && eta < 1.0) {
        return Err(invalid(format!("eta must lie in (0, 1), got {eta}")));
    }
    if let Some(i) = p.iter().position(|&v| !(v > 0.0)) {
        return Err(invalid(format!("p[{i}] = {} is not strictly positive; KL undefined", p[i])));
    }
    let channel = NoiseChannel::new(eta, k)?;
    let q = channel.target(true_class);
    let kl: f64 = p.iter().zip(&q).map(|(&pk, &qk)| pk * (pk.ln() - qk.ln())).sum();
    let h = entropy(p);
    let lhs = -kl - h;
    let (a, b) = kl_identity_coefficients(eta, k);
    let rhs = a * p[true_class] + b;
    Ok(KlEntropyIdentity {
        lhs,
        rhs,
        diff: (lhs - rhs).abs(),
        a,
        b,
    })
}

/// Natural-log entropy with `0 log 0 = 0`.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum::<f64>()
}

/// Mean entropy of probability rows.
pub fn mean_entropy(probs: &Tensor) -> f64 {
    let n = probs.rows();
    if n == 0 {
        return 0.0;
    }
    (0..n).map(|i| entropy(probs.row(i))).sum::<f64>() / n as f64
}
