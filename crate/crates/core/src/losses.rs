//! Classification losses as functions of logits.
//!
//! Every loss returns its batch-mean value together with the analytic
//! gradient with respect to the logits, so the trunk gradient is obtained by
//! seeding [`crate::tensor::Tape::backward_from`] at the logits node. The
//! same losses can also be recorded on a tape ([`LossSpec::record`]) for
//! finite-difference and autodiff cross-checks.
//!
//! Notation in the comments: `π` is the softmax of a logits row, `y` the
//! label, `e_y` its one-hot vector, `H(π)` the natural-log entropy.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng::sample_categorical;
use crate::tensor::{log_softmax_rows, Tape, Tensor, Var};

/// Probabilities at or below this are treated as zero when dividing by
/// `π(y|x)` in [`grad_ratio_check`].
pub const RATIO_PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ce,
    Epg,
    Aepg,
    Reinforce,
    Focal,
    LabelSmooth,
    ConfPenalty,
    EntropyPenalty,
}

impl LossKind {
    pub const ALL: [LossKind; 8] = [
        LossKind::Ce,
        LossKind::Epg,
        LossKind::Aepg,
        LossKind::Reinforce,
        LossKind::Focal,
        LossKind::LabelSmooth,
        LossKind::ConfPenalty,
        LossKind::EntropyPenalty,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Ce => "ce",
            LossKind::Epg => "epg",
            LossKind::Aepg => "aepg",
            LossKind::Reinforce => "reinforce",
            LossKind::Focal => "focal",
            LossKind::LabelSmooth => "label_smooth",
            LossKind::ConfPenalty => "conf_penalty",
            LossKind::EntropyPenalty => "entropy_penalty",
        }
    }

    /// Default `γ`: focal exponent 1, label smoothing 0.01.
    pub fn default_gamma(self) -> f64 {
        match self {
            LossKind::Focal => 1.0,
            LossKind::LabelSmooth => 0.01,
            _ => 0.0,
        }
    }

    /// Default `β`: confidence penalty 0.1, entropy penalty 1.
    pub fn default_beta(self) -> f64 {
        match self {
            LossKind::ConfPenalty => 0.1,
            LossKind::EntropyPenalty => 1.0,
            _ => 0.0,
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        LossKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown loss kind {s:?}")))
    }
}

/// A loss and its hyperparameters.
///
/// `gamma` is the focal exponent or the label-smoothing weight depending on
/// `kind`; `beta` weighs the entropy term of the two penalty losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    pub gamma: f64,
    pub beta: f64,
    /// Actions drawn per sample by REINFORCE.
    pub reinforce_samples: usize,
}

impl LossSpec {
    pub fn new(kind: LossKind) -> Self {
        Self {
            kind,
            gamma: kind.default_gamma(),
            beta: kind.default_beta(),
            reinforce_samples: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0) || !self.gamma.is_finite() {
            return Err(invalid(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.beta >= 0.0) || !self.beta.is_finite() {
            return Err(invalid(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.kind == LossKind::LabelSmooth && self.gamma >= 1.0 {
            return Err(invalid(format!("label smoothing must lie in [0, 1), got {}", self.gamma)));
        }
        if self.reinforce_samples == 0 {
            return Err(invalid("reinforce_samples must be >= 1"));
        }
        Ok(())
    }

    /// Loss value and logits gradient. `alpha` is only read by aEPG and
    /// `rng` only by REINFORCE.
    pub fn evaluate<R: Rng + ?Sized>(
        &self,
        logits: &Tensor,
        labels: &[usize],
        alpha: f64,
        rng: &mut R,
    ) -> Result<GradientEstimate> {
        self.validate()?;
        match self.kind {
            LossKind::Ce => ce_loss(logits, labels),
            LossKind::Epg => epg_loss(logits, labels),
            LossKind::Aepg => aepg_loss(logits, labels, alpha),
            LossKind::Reinforce => reinforce_grad(logits, labels, self.reinforce_samples, rng),
            LossKind::Focal => focal_loss(logits, labels, self.gamma),
            LossKind::LabelSmooth => label_smoothing_loss(logits, labels, self.gamma),
            LossKind::ConfPenalty => confidence_penalty_loss(logits, labels, self.beta),
            LossKind::EntropyPenalty => entropy_penalty_loss(logits, labels, self.beta),
        }
    }

    /// Records the loss on `tape` as a scalar node. REINFORCE is recorded as
    /// its score-function surrogate with the given `actions` held fixed
    /// (`reinforce_samples` per row, row-major).
    pub fn record(
        &self,
        tape: &mut Tape,
        logits: Var,
        labels: &[usize],
        alpha: f64,
        actions: Option<&[usize]>,
    ) -> Result<Var> {
        self.validate()?;
        let (n, k) = batch_dims(tape.value(logits), labels)?;
        let rows: Vec<usize> = (0..n).collect();
        let ls = tape.log_softmax(logits);
        let ce = |tape: &mut Tape| -> Result<Var> {
            let picked = tape.gather(ls, &rows, labels)?;
            let m = tape.mean(picked);
            Ok(tape.neg(m))
        };
        let epg = |tape: &mut Tape| -> Result<Var> {
            let picked = tape.gather(ls, &rows, labels)?;
            let p = tape.exp(picked);
            let m = tape.mean(p);
            Ok(tape.neg(m))
        };
        // Mean over rows of -Σ_k π_k log π_k.
        let entropy = |tape: &mut Tape| -> Result<Var> {
            let p = tape.exp(ls);
            let plogp = tape.mul(p, ls)?;
            let per_row = tape.sum_rows(plogp)?;
            let m = tape.mean(per_row);
            Ok(tape.neg(m))
        };
        match self.kind {
            LossKind::Ce => ce(tape),
            LossKind::Epg => epg(tape),
            LossKind::Aepg => {
                check_alpha(alpha)?;
                let c = ce(tape)?;
                let e = epg(tape)?;
                let c = tape.scale(c, alpha);
                let e = tape.scale(e, 1.0 - alpha);
                Ok(tape.add(c, e)?)
            }
            LossKind::Reinforce => {
                let actions = actions.ok_or_else(|| invalid("REINFORCE surrogate needs fixed actions"))?;
                let m = self.reinforce_samples;
                if actions.len() != n * m {
                    return Err(invalid(format!("expected {} actions, got {}", n * m, actions.len())));
                }
                let mut a_rows = Vec::new();
                let mut a_cols = Vec::new();
                for (idx, &a) in actions.iter().enumerate() {
                    let i = idx / m;
                    check_label(a, k)?;
                    if a == labels[i] {
                        a_rows.push(i);
                        a_cols.push(a);
                    }
                }
                let picked = tape.gather(ls, &a_rows, &a_cols)?;
                let s = tape.sum(picked);
                Ok(tape.scale(s, -1.0 / (n * m) as f64))
            }
            LossKind::Focal => {
                let picked = tape.gather(ls, &rows, labels)?;
                let p = tape.exp(picked);
                let neg_p = tape.neg(p);
                let one_minus = tape.add_scalar(neg_p, 1.0);
                let w = tape.powf(one_minus, self.gamma);
                let nll = tape.neg(picked);
                let per = tape.mul(w, nll)?;
                Ok(tape.mean(per))
            }
            LossKind::LabelSmooth => {
                let c = ce(tape)?;
                // KL(u || π) = -ln K - (1/K) Σ_k log π_k, averaged over rows.
                let mean_logp = tape.mean(ls);
                let kl = tape.scale(mean_logp, -1.0);
                let kl = tape.add_scalar(kl, -(k as f64).ln());
                let c = tape.scale(c, 1.0 - self.gamma);
                let kl = tape.scale(kl, self.gamma);
                Ok(tape.add(c, kl)?)
            }
            LossKind::ConfPenalty | LossKind::EntropyPenalty => {
                let c = ce(tape)?;
                let h = entropy(tape)?;
                let sign = if self.kind == LossKind::ConfPenalty { -1.0 } else { 1.0 };
                let h = tape.scale(h, sign * self.beta);
                Ok(tape.add(c, h)?)
            }
        }
    }
}

/// A loss value with its gradient with respect to the logits.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub loss: f64,
    /// Same shape as the logits.
    pub grad: Tensor,
    /// REINFORCE only: sampled actions, `samples_per_row` per row.
    pub actions: Option<Vec<usize>>,
    /// REINFORCE only: reward of each sampled action.
    pub rewards: Option<Vec<f64>>,
}

impl GradientEstimate {
    fn analytic(loss: f64, grad: Tensor) -> Self {
        Self {
            loss,
            grad,
            actions: None,
            rewards: None,
        }
    }
}

fn check_label(label: usize, classes: usize) -> Result<()> {
    if label >= classes {
        return Err(Error::LabelOutOfRange { label, classes });
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(invalid(format!("alpha must lie in [0, 1], got {alpha}")));
    }
    Ok(())
}

fn batch_dims(logits: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    if logits.shape().len() != 2 {
        return Err(invalid(format!("logits must be N×K, got {:?}", logits.shape())));
    }
    let (n, k) = (logits.rows(), logits.cols());
    if labels.len() != n {
        return Err(invalid(format!("{} labels for {n} logit rows", labels.len())));
    }
    if n == 0 || k == 0 {
        return Err(invalid("empty logits batch"));
    }
    for &y in labels {
        check_label(y, k)?;
    }
    Ok((n, k))
}

/// Row-wise log π and π for a validated batch.
fn policy(logits: &Tensor) -> (Tensor, Tensor) {
    let logp = log_softmax_rows(logits);
    let p = logp.map(f64::exp);
    (logp, p)
}

/// Builds a batch loss from a per-row closure returning
/// `(row loss, row gradient)`; both are averaged over rows.
fn per_row(
    logits: &Tensor,
    labels: &[usize],
    mut f: impl FnMut(&[f64], &[f64], usize, &mut [f64]) -> f64,
) -> Result<GradientEstimate> {
    let (n, k) = batch_dims(logits, labels)?;
    let (logp, p) = policy(logits);
    let mut grad = Tensor::zeros(&[n, k]);
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let g = grad.row_mut(i);
        total += f(logp.row(i), p.row(i), labels[i], g);
        for v in g.iter_mut() {
            *v *= inv_n;
        }
    }
    Ok(GradientEstimate::analytic(total * inv_n, grad))
}

fn row_entropy(logp: &[f64], p: &[f64]) -> f64 {
    -p.iter().zip(logp).map(|(&pk, &lk)| if pk > 0.0 { pk * lk } else { 0.0 }).sum::<f64>()
}

/// Cross-entropy: loss `-log π(y)`, gradient `π - e_y`.
pub fn ce_loss(logits: &Tensor, labels: &[usize]) -> Result<GradientEstimate> {
    per_row(logits, labels, |logp, p, y, g| {
        g.copy_from_slice(p);
        g[y] -= 1.0;
        -logp[y]
    })
}

/// Expected policy gradient with 0/1 reward: loss `-π(y)`, gradient
/// `-π(y)(e_y - π)`.
pub fn epg_loss(logits: &Tensor, labels: &[usize]) -> Result<GradientEstimate> {
    per_row(logits, labels, |_, p, y, g| {
        let py = p[y];
        for (gk, &pk) in g.iter_mut().zip(p) {
            *gk = py * pk;
        }
        g[y] -= py;
        -py
    })
}

/// `alpha · CE + (1 - alpha) · EPG`.
pub fn aepg_loss(logits: &Tensor, labels: &[usize], alpha: f64) -> Result<GradientEstimate> {
    check_alpha(alpha)?;
    let ce = ce_loss(logits, labels)?;
    let epg = epg_loss(logits, labels)?;
    let grad = ce.grad.zip_map(&epg.grad, "aepg", |c, e| alpha * c + (1.0 - alpha) * e)?;
    Ok(GradientEstimate::analytic(
        alpha * ce.loss + (1.0 - alpha) * epg.loss,
        grad,
    ))
}

/// Focal loss `(1 - π(y))^γ · (-log π(y))`, differentiated on a tape.
pub fn focal_loss(logits: &Tensor, labels: &[usize], gamma: f64) -> Result<GradientEstimate> {
    batch_dims(logits, labels)?;
    let mut spec = LossSpec::new(LossKind::Focal);
    spec.gamma = gamma;
    let mut tape = Tape::new();
    let z = tape.leaf(logits.clone());
    let root = spec.record(&mut tape, z, labels, 1.0, None)?;
    let loss = tape.value(root).item();
    let grad = tape.backward(root)?.wrt(z);
    Ok(GradientEstimate::analytic(loss, grad))
}

/// `(1 - γ) · CE + γ · KL(u ‖ π)` with `u` uniform. Gradient
/// `(1 - γ)(π - e_y) + γ(π - u)`.
pub fn label_smoothing_loss(logits: &Tensor, labels: &[usize], gamma: f64) -> Result<GradientEstimate> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(invalid(format!("label smoothing must lie in [0, 1), got {gamma}")));
    }
    per_row(logits, labels, |logp, p, y, g| {
        let k = p.len() as f64;
        let u = 1.0 / k;
        let kl: f64 = logp.iter().map(|&l| u * (u.ln() - l)).sum();
        for (gk, &pk) in g.iter_mut().zip(p) {
            *gk = pk - gamma * u;
        }
        g[y] -= 1.0 - gamma;
        (1.0 - gamma) * -logp[y] + gamma * kl
    })
}

/// CE with a signed entropy term, `CE + sign·β·H(π)`.
/// `∂H/∂z_j = -π_j (log π_j + H)`.
fn ce_with_entropy(logits: &Tensor, labels: &[usize], signed_beta: f64) -> Result<GradientEstimate> {
    per_row(logits, labels, |logp, p, y, g| {
        let h = row_entropy(logp, p);
        for ((gk, &pk), &lk) in g.iter_mut().zip(p).zip(logp) {
            let dh = if pk > 0.0 { -pk * (lk + h) } else { 0.0 };
            *gk = pk + signed_beta * dh;
        }
        g[y] -= 1.0;
        -logp[y] + signed_beta * h
    })
}

/// Confidence penalty `CE - β H(π)`.
pub fn confidence_penalty_loss(logits: &Tensor, labels: &[usize], beta: f64) -> Result<GradientEstimate> {
    if !(beta >= 0.0) {
        return Err(invalid(format!("beta must be >= 0, got {beta}")));
    }
    ce_with_entropy(logits, labels, -beta)
}

/// Entropy penalty `CE + β H(π)`.
pub fn entropy_penalty_loss(logits: &Tensor, labels: &[usize], beta: f64) -> Result<GradientEstimate> {
    if !(beta >= 0.0) {
        return Err(invalid(format!("beta must be >= 0, got {beta}")));
    }
    ce_with_entropy(logits, labels, beta)
}

/// Monte Carlo policy gradient with 0/1 reward.
///
/// Draws `n_samples` actions per row by inverse-CDF sampling and returns the
/// descent direction `-(1/(N·M)) Σ R(y, a) (e_a - π)`. The reported loss is
/// the matching score-function surrogate `-(1/(N·M)) Σ R log π(a)`.
pub fn reinforce_grad<R: Rng + ?Sized>(
    logits: &Tensor,
    labels: &[usize],
    n_samples: usize,
    rng: &mut R,
) -> Result<GradientEstimate> {
    if n_samples == 0 {
        return Err(invalid("n_samples must be >= 1"));
    }
    let (n, k) = batch_dims(logits, labels)?;
    let (logp, p) = policy(logits);
    let mut grad = Tensor::zeros(&[n, k]);
    let mut actions = Vec::with_capacity(n * n_samples);
    let mut rewards = Vec::with_capacity(n * n_samples);
    let scale = 1.0 / (n * n_samples) as f64;
    let mut loss = 0.0;
    for i in 0..n {
        let pi = p.row(i);
        for _ in 0..n_samples {
            let a = sample_categorical(pi, rng);
            let r = reward(labels[i], a);
            actions.push(a);
            rewards.push(r);
            if r != 0.0 {
                let g = grad.row_mut(i);
                for (gk, &pk) in g.iter_mut().zip(pi) {
                    *gk += r * pk * scale;
                }
                g[a] -= r * scale;
                loss -= r * logp.at(i, a) * scale;
            }
        }
    }
    Ok(GradientEstimate {
        loss,
        grad,
        actions: Some(actions),
        rewards: Some(rewards),
    })
}

/// The REINFORCE estimator with the action expectation taken exactly: every
/// action is enumerated and weighted by its probability. Equals the EPG
/// gradient.
pub fn reinforce_enumerated(logits: &Tensor, labels: &[usize]) -> Result<GradientEstimate> {
    let (n, k) = batch_dims(logits, labels)?;
    let (_, p) = policy(logits);
    let mut grad = Tensor::zeros(&[n, k]);
    let mut expected_reward = 0.0;
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let pi = p.row(i).to_vec();
        let g = grad.row_mut(i);
        for a in 0..k {
            let w = pi[a] * reward(labels[i], a);
            if w == 0.0 {
                continue;
            }
            expected_reward += w;
            // w · (-(e_a - π))
            for (gk, &pk) in g.iter_mut().zip(&pi) {
                *gk += w * pk * inv_n;
            }
            g[a] -= w * inv_n;
        }
    }
    Ok(GradientEstimate::analytic(-expected_reward * inv_n, grad))
}

/// 0/1 reward: one for the correct action.
pub fn reward(label: usize, action: usize) -> f64 {
    if label == action {
        1.0
    } else {
        0.0
    }
}

/// Outcome of [`grad_ratio_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RatioCheck {
    Deviation(f64),
    /// `π(y|x)` too small to divide by.
    Skipped { prob: f64 },
}

/// Checks `g_CE = -(1/π(y)) g_EPG` for one sample, with `g_CE` the CE
/// descent gradient and `g_EPG` the EPG ascent gradient
/// `π(y)(e_y - π)`, both with respect to the logits.
///
/// Returns `max_k |g_CE,k + g_EPG,k / π(y)|`.
pub fn grad_ratio_check(logits: &[f64], label: usize) -> Result<RatioCheck> {
    grad_ratio_check_with(logits, label, 1.0)
}

/// [`grad_ratio_check`] with the EPG ascent gradient multiplied by
/// `epg_sign`. Only the verifier's fault-injection path passes `-1`.
pub(crate) fn grad_ratio_check_with(logits: &[f64], label: usize, epg_sign: f64) -> Result<RatioCheck> {
    let z = Tensor::matrix(1, logits.len(), logits.to_vec())?;
    let ce = ce_loss(&z, &[label])?;
    let epg = epg_loss(&z, &[label])?;
    let (_, p) = policy(&z);
    let py = p.data()[label];
    if py <= RATIO_PROB_FLOOR {
        return Ok(RatioCheck::Skipped { prob: py });
    }
    let dev = ce
        .grad
        .data()
        .iter()
        .zip(epg.grad.data())
        .map(|(&c, &e_descent)| {
            let e_ascent = -e_descent * epg_sign;
            (c + e_ascent / py).abs()
        })
        .fold(0.0, f64::max);
    Ok(RatioCheck::Deviation(dev))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, Stream};
    use std::f64::consts::LN_2;

    fn z00() -> Tensor {
        Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap()
    }

    fn close(a: &[f64], b: &[f64], tol: f64) {
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol, "{a:?} vs {b:?}");
        }
    }

    #[test]
    fn ce_uniform_logits() {
        let out = ce_loss(&z00(), &[0]).unwrap();
        assert!((out.loss - LN_2).abs() < 1e-15);
        close(out.grad.data(), &[-0.5, 0.5], 1e-15);
    }

    #[test]
    fn ce_vanishes_for_confident_correct_prediction() {
        let z = Tensor::matrix(1, 3, vec![60.0, 0.0, 0.0]).unwrap();
        assert!(ce_loss(&z, &[0]).unwrap().loss < 1e-25);
    }

    #[test]
    fn out_of_range_label_is_an_error() {
        assert!(matches!(
            ce_loss(&z00(), &[2]),
            Err(Error::LabelOutOfRange { label: 2, classes: 2 })
        ));
        assert!(epg_loss(&z00(), &[5]).is_err());
    }

    #[test]
    fn epg_uniform_logits() {
        let out = epg_loss(&z00(), &[0]).unwrap();
        assert!((out.loss + 0.5).abs() < 1e-15);
        close(out.grad.data(), &[-0.25, 0.25], 1e-15);
        let k = 7;
        let z = Tensor::zeros(&[1, k]);
        let out = epg_loss(&z, &[3]).unwrap();
        assert!((out.loss + 1.0 / k as f64).abs() < 1e-15);
    }

    #[test]
    fn aepg_endpoints_and_midpoint() {
        let z = Tensor::matrix(2, 3, vec![0.2, -1.0, 0.7, 1.5, 0.1, -0.3]).unwrap();
        let y = [2, 0];
        let ce = ce_loss(&z, &y).unwrap();
        let epg = epg_loss(&z, &y).unwrap();
        assert_eq!(aepg_loss(&z, &y, 1.0).unwrap(), ce);
        assert_eq!(aepg_loss(&z, &y, 0.0).unwrap(), epg);
        let mid = aepg_loss(&z, &y, 0.5).unwrap();
        for i in 0..6 {
            let expected = 0.5 * ce.grad.data()[i] + 0.5 * epg.grad.data()[i];
            assert!((mid.grad.data()[i] - expected).abs() < 1e-12);
        }
        assert!(aepg_loss(&z, &y, 1.5).is_err());
        assert!(aepg_loss(&z, &y, -0.1).is_err());
    }

    #[test]
    fn focal_reduces_to_ce_and_matches_arithmetic() {
        let z = Tensor::matrix(2, 3, vec![0.2, -1.0, 0.7, 1.5, 0.1, -0.3]).unwrap();
        let y = [1, 0];
        let f = focal_loss(&z, &y, 0.0).unwrap();
        let ce = ce_loss(&z, &y).unwrap();
        assert!((f.loss - ce.loss).abs() < 1e-14);
        close(f.grad.data(), ce.grad.data(), 1e-14);
        let f = focal_loss(&z00(), &[0], 1.0).unwrap();
        assert!((f.loss - 0.5 * LN_2).abs() < 1e-15);
    }

    #[test]
    fn label_smoothing_edges() {
        let z = Tensor::matrix(1, 3, vec![0.2, -1.0, 0.7]).unwrap();
        assert_eq!(
            label_smoothing_loss(&z, &[1], 0.0).unwrap().loss,
            ce_loss(&z, &[1]).unwrap().loss
        );
        // Uniform prediction: KL(u || π) = 0, loss is (1 - γ) ln K.
        let u = Tensor::zeros(&[1, 4]);
        let out = label_smoothing_loss(&u, &[0], 0.3).unwrap();
        assert!((out.loss - 0.7 * 4f64.ln()).abs() < 1e-14);
        assert!(label_smoothing_loss(&z, &[1], 1.0).is_err());
    }

    #[test]
    fn entropy_terms() {
        let z = Tensor::matrix(1, 3, vec![0.2, -1.0, 0.7]).unwrap();
        let ce = ce_loss(&z, &[2]).unwrap();
        assert_eq!(confidence_penalty_loss(&z, &[2], 0.0).unwrap(), ce);
        assert_eq!(entropy_penalty_loss(&z, &[2], 0.0).unwrap(), ce);
        let u = Tensor::zeros(&[1, 4]);
        let cp = confidence_penalty_loss(&u, &[0], 0.2).unwrap();
        let ce_u = ce_loss(&u, &[0]).unwrap();
        assert!((cp.loss - ce_u.loss - (-0.2 * 4f64.ln())).abs() < 1e-14);
        // One-hot π: entropy term vanishes.
        let hot = Tensor::matrix(1, 3, vec![0.0, 800.0, 0.0]).unwrap();
        let ep = entropy_penalty_loss(&hot, &[1], 1.0).unwrap();
        assert_eq!(ep.loss, ce_loss(&hot, &[1]).unwrap().loss);
    }

    #[test]
    fn tape_route_matches_analytic() {
        let z = Tensor::matrix(3, 4, vec![0.3, -0.2, 1.1, 0.0, -1.4, 0.8, 0.25, 0.5, 2.0, -0.7, 0.1, 0.9]).unwrap();
        let y = [2, 1, 0];
        for kind in LossKind::ALL {
            if kind == LossKind::Reinforce {
                continue;
            }
            let spec = LossSpec::new(kind);
            let mut rng = stream(0, Stream::Sampling);
            let analytic = spec.evaluate(&z, &y, 0.3, &mut rng).unwrap();
            let mut tape = Tape::new();
            let v = tape.leaf(z.clone());
            let root = spec.record(&mut tape, v, &y, 0.3, None).unwrap();
            assert!((tape.value(root).item() - analytic.loss).abs() < 1e-13, "{kind:?}");
            let g = tape.backward(root).unwrap().wrt(v);
            close(g.data(), analytic.grad.data(), 1e-13);
        }
    }

    #[test]
    fn reinforce_surrogate_matches_sampled_gradient() {
        let z = Tensor::matrix(2, 3, vec![0.3, -0.2, 1.1, -1.4, 0.8, 0.25]).unwrap();
        let y = [2, 1];
        let mut spec = LossSpec::new(LossKind::Reinforce);
        spec.reinforce_samples = 4;
        let mut rng = stream(4, Stream::Sampling);
        let est = spec.evaluate(&z, &y, 0.0, &mut rng).unwrap();
        let actions = est.actions.clone().unwrap();
        let mut tape = Tape::new();
        let v = tape.leaf(z);
        let root = spec.record(&mut tape, v, &y, 0.0, Some(&actions)).unwrap();
        assert!((tape.value(root).item() - est.loss).abs() < 1e-14);
        close(tape.backward(root).unwrap().wrt(v).data(), est.grad.data(), 1e-14);
    }

    #[test]
    fn enumerated_reinforce_equals_epg() {
        let z = Tensor::matrix(2, 3, vec![0.3, -0.2, 1.1, -1.4, 0.8, 0.25]).unwrap();
        let y = [0, 2];
        let a = reinforce_enumerated(&z, &y).unwrap();
        let b = epg_loss(&z, &y).unwrap();
        assert!(a.grad.max_abs_diff(&b.grad).unwrap() < 1e-12);
        assert!((a.loss - b.loss).abs() < 1e-12);
    }

    #[test]
    fn deterministic_policy_has_no_sampling_noise() {
        let z = Tensor::matrix(2, 3, vec![0.0, 900.0, 0.0, 0.0, 0.0, 900.0]).unwrap();
        let y = [1, 0];
        let epg = epg_loss(&z, &y).unwrap();
        let mut rng = stream(8, Stream::Sampling);
        for _ in 0..50 {
            let est = reinforce_grad(&z, &y, 1, &mut rng).unwrap();
            assert_eq!(est.actions.as_deref(), Some(&[1usize, 2][..]));
            assert!(est.grad.max_abs_diff(&epg.grad).unwrap() == 0.0);
        }
    }

    #[test]
    fn ratio_check_worked_example() {
        assert_eq!(grad_ratio_check(&[0.0, 0.0], 0).unwrap(), RatioCheck::Deviation(0.0));
        match grad_ratio_check(&[-800.0, 0.0], 0).unwrap() {
            RatioCheck::Skipped { prob } => assert!(prob <= RATIO_PROB_FLOOR),
            other => panic!("{other:?}"),
        }
        match grad_ratio_check_with(&[0.3, -0.1, 0.2], 1, -1.0).unwrap() {
            RatioCheck::Deviation(d) => assert!(d > 0.1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn epg_magnitude_never_exceeds_ce() {
        let z = Tensor::matrix(2, 4, vec![0.3, -0.2, 1.1, 0.0, -1.4, 0.8, 0.25, 3.0]).unwrap();
        let y = [0, 3];
        let ce = ce_loss(&z, &y).unwrap();
        let epg = epg_loss(&z, &y).unwrap();
        let p = crate::tensor::softmax_rows(&z);
        for i in 0..2 {
            let py = p.at(i, y[i]);
            for k in 0..4 {
                let c = ce.grad.at(i, k).abs();
                let e = epg.grad.at(i, k).abs();
                assert!((e - py * c).abs() < 1e-15);
                assert!(e <= c);
            }
        }
    }

    #[test]
    fn loss_kind_parsing_and_validation() {
        for k in LossKind::ALL {
            assert_eq!(k.name().parse::<LossKind>().unwrap(), k);
        }
        assert!("hinge".parse::<LossKind>().is_err());
        let mut spec = LossSpec::new(LossKind::Focal);
        spec.gamma = -1.0;
        assert!(spec.validate().is_err());
        let mut spec = LossSpec::new(LossKind::ConfPenalty);
        spec.beta = -0.5;
        assert!(spec.validate().is_err());
    }
}
