//! Self-contained identity suite behind `aepg verify`. Fixed seeds, no
//! files, no network.

use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::harness::{metrics, AccuracyMatrix};
use crate::losses::{self, epg_loss, reinforce_enumerated, reinforce_grad, LossKind, LossSpec, RatioCheck};
use crate::mdp::{
    entropy, kl_identity_coefficients, noisy_objective_affine, noisy_objective_exact, noisy_ranking_preserved, kl_entropy_identity,
    rl_objective, NoiseChannel,
};
use crate::rng::{stream, RunRng, Stream};
use crate::schedule::{alpha_at, ScheduleKind};
use crate::tensor::{fd_check, softmax_rows, Tape, Tensor};

const SEED: u64 = 20_240_601;

/// Deliberate bugs for checking that the suite catches them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Flips the sign of the EPG gradient inside the ratio check.
    EpgSign,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    /// Largest observed deviation (or the check's own statistic).
    pub deviation: f64,
    pub tolerance: f64,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {:<26} max_dev={:.3e} tol={:.1e}  {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.deviation,
            self.tolerance,
            self.detail
        )
    }
}

fn result(name: &'static str, deviation: f64, tolerance: f64, extra_ok: bool, detail: String) -> CheckResult {
    CheckResult {
        name,
        passed: extra_ok && deviation < tolerance,
        deviation,
        tolerance,
        detail,
    }
}

fn random_logits(rng: &mut RunRng, n: usize, k: usize, scale: f64) -> Tensor {
    let normal = Normal::new(0.0, scale).expect("finite scale");
    Tensor::matrix(n, k, (0..n * k).map(|_| normal.sample(rng)).collect()).expect("sized")
}

fn random_labels(rng: &mut RunRng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..k)).collect()
}

/// Strictly positive distribution over `k` classes.
fn random_simplex(rng: &mut RunRng, k: usize) -> Vec<f64> {
    let z = random_logits(rng, 1, k, 2.0);
    softmax_rows(&z).into_data()
}

pub fn check_grad_ratio(fault: Fault) -> Result<CheckResult> {
    let mut rng = stream(SEED, Stream::Sampling);
    let sign = if fault == Fault::EpgSign { -1.0 } else { 1.0 };
    let (mut worst, mut skipped, mut total) = (0.0f64, 0, 0);
    for k in [2, 10, 100] {
        for _ in 0..1000 {
            let z: Vec<f64> = (0..k).map(|_| rng.random_range(-5.0..5.0)).collect();
            let y = rng.random_range(0..k);
            total += 1;
            match losses::grad_ratio_check_with(&z, y, sign)? {
                RatioCheck::Deviation(d) => worst = worst.max(d),
                RatioCheck::Skipped { .. } => skipped += 1,
            }
        }
    }
    Ok(result(
        "grad_ratio_check",
        worst,
        1e-10,
        skipped == 0,
        format!("{total} samples, K in {{2,10,100}}, {skipped} skipped"),
    ))
}

pub fn check_estimators() -> Result<CheckResult> {
    let mut rng = stream(SEED, Stream::Data);
    let mut enum_dev = 0.0f64;
    for _ in 0..200 {
        let n = rng.random_range(1..8);
        let k = rng.random_range(2..12);
        let z = random_logits(&mut rng, n, k, 2.0);
        let y = random_labels(&mut rng, n, k);
        let a = reinforce_enumerated(&z, &y)?;
        let b = epg_loss(&z, &y)?;
        enum_dev = enum_dev.max(a.grad.max_abs_diff(&b.grad)?).max((a.loss - b.loss).abs());
    }

    let z = Tensor::matrix(1, 5, vec![0.3, -0.4, 1.1, 0.0, -1.2])?;
    let y = [2];
    let exact = epg_loss(&z, &y)?.grad;
    let draws = 100_000;
    let mut sum = [0.0; 5];
    let mut sq = [0.0; 5];
    let mut sample_rng = stream(SEED, Stream::Sampling);
    for _ in 0..draws {
        let g = reinforce_grad(&z, &y, 1, &mut sample_rng)?.grad;
        for (k, &v) in g.data().iter().enumerate() {
            sum[k] += v;
            sq[k] += v * v;
        }
    }
    let n = draws as f64;
    let mut worst_se = 0.0f64;
    let mut min_var = f64::INFINITY;
    for k in 0..5 {
        let mean = sum[k] / n;
        let var = (sq[k] - n * mean * mean) / (n - 1.0);
        min_var = min_var.min(var);
        let se = (var / n).sqrt();
        worst_se = worst_se.max((mean - exact.data()[k]).abs() / se);
    }
    let epg_repeat = epg_loss(&z, &y)?.grad;
    let epg_var_zero = epg_repeat == exact;
    Ok(result(
        "estimator_equivalence",
        enum_dev,
        1e-12,
        worst_se <= 3.0 && min_var > 0.0 && epg_var_zero,
        format!("MC mean within {worst_se:.2} SE (<= 3), min sample var {min_var:.3e} > 0, EPG var 0: {epg_var_zero}"),
    ))
}

/// Worst finite-difference relative error over 100 random instances of
/// `kind`'s analytic logits gradient.
pub fn fd_error(kind: LossKind, seed: u64) -> Result<f64> {
    let mut rng = stream(seed, Stream::Data);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let n = rng.random_range(1..5);
        let k = rng.random_range(2..8);
        let z = random_logits(&mut rng, n, k, 1.0);
        let y = random_labels(&mut rng, n, k);
        let alpha = rng.random::<f64>();
        let mut spec = LossSpec::new(kind);
        spec.reinforce_samples = 3;
        let est = spec.evaluate(&z, &y, alpha, &mut rng)?;
        let actions = est.actions.clone();
        let value = |flat: &[f64]| -> f64 {
            let mut tape = Tape::new();
            let v = tape.leaf(Tensor::matrix(n, k, flat.to_vec()).expect("sized"));
            let root = spec.record(&mut tape, v, &y, alpha, actions.as_deref()).expect("valid loss");
            tape.value(root).item()
        };
        worst = worst.max(fd_check(value, z.data(), est.grad.data(), 1e-5)?);
    }
    Ok(worst)
}

pub fn check_fd() -> Result<CheckResult> {
    let mut worst = 0.0f64;
    let mut names = Vec::new();
    for (i, kind) in LossKind::ALL.into_iter().enumerate() {
        let e = fd_error(kind, SEED + i as u64)?;
        if e >= 1e-5 {
            names.push(kind.name());
        }
        worst = worst.max(e);
    }
    let detail = if names.is_empty() {
        "8 losses x 100 instances".to_string()
    } else {
        format!("over tolerance: {}", names.join(", "))
    };
    Ok(result("fd_gradients", worst, 1e-5, true, detail))
}

pub fn check_noisy_objective() -> Result<CheckResult> {
    let mut rng = stream(SEED, Stream::Noise);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(2..20);
        let n = rng.random_range(1..10);
        let p = softmax_rows(&random_logits(&mut rng, n, k, 2.0));
        let y = random_labels(&mut rng, n, k);
        let eta = rng.random::<f64>() * (1.0 - 1e-9);
        let exact = noisy_objective_exact(&p, &y, eta)?;
        let affine = noisy_objective_affine(rl_objective(&p, &y)?, eta, k);
        worst = worst.max((exact - affine).abs());
    }
    let mut disagreements = 0;
    for _ in 0..1000 {
        let k = rng.random_range(2..20);
        let n = rng.random_range(1..10);
        let a = softmax_rows(&random_logits(&mut rng, n, k, 2.0));
        let b = softmax_rows(&random_logits(&mut rng, n, k, 2.0));
        let y = random_labels(&mut rng, n, k);
        let eta = rng.random::<f64>() * (1.0 - 1.0 / k as f64);
        if !noisy_ranking_preserved(&a, &b, &y, eta)? {
            disagreements += 1;
        }
    }
    let mut degenerate = 0.0f64;
    for _ in 0..100 {
        let p = softmax_rows(&random_logits(&mut rng, 4, 2, 3.0));
        let y = random_labels(&mut rng, 4, 2);
        degenerate = degenerate.max((noisy_objective_exact(&p, &y, 0.5)? - 0.5).abs());
    }
    Ok(result(
        "noisy_objective_affine",
        worst.max(degenerate),
        1e-12,
        disagreements == 0,
        format!("rank disagreements {disagreements}/1000, K=2 eta=0.5 max |J-0.5| {degenerate:.1e}"),
    ))
}

pub fn check_kl_entropy() -> Result<CheckResult> {
    let mut rng = stream(SEED, Stream::Init);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let k = rng.random_range(2..30);
        let p = random_simplex(&mut rng, k);
        let y = rng.random_range(0..k);
        let eta = rng.random_range(1e-6..1.0 - 1e-6);
        worst = worst.max(kl_entropy_identity(&p, y, eta)?.diff);
    }
    // At p = q_eta the KL term vanishes exactly, so lhs is exactly -H(q).
    let mut special = 0.0f64;
    let mut kl_exact = true;
    for (k, eta) in [(2, 0.5), (2, 0.25), (4, 0.5), (5, 0.2), (10, 0.1), (100, 0.3)] {
        let q = NoiseChannel::new(eta, k)?.target(0);
        let id = kl_entropy_identity(&q, 0, eta)?;
        kl_exact &= id.lhs == -entropy(&q);
        special = special.max(id.diff);
    }
    let (a, b) = kl_identity_coefficients(0.2, 5);
    Ok(result(
        "kl_entropy_identity",
        worst.max(special),
        1e-12,
        kl_exact && a > 0.0,
        format!("p = q_eta: KL exactly 0 {kl_exact}, diff {special:.1e}; A={a:.4} > 0, B={b:.4} at eta=0.2 K=5"),
    ))
}

pub fn check_schedule() -> CheckResult {
    let expected = [(4.0, 0.9820, 0.0180), (6.0, 0.9975, 0.0025), (8.0, 0.9997, 0.0003)];
    let mut worst = 0.0f64;
    let mut cells = Vec::new();
    for (tau, start, end) in expected {
        let kind = ScheduleKind::Sigmoid { tau };
        let a0 = alpha_at(kind, 0, 1000);
        let a1 = alpha_at(kind, 1000, 1000);
        let r = |v: f64| (v * 1e4).round() / 1e4;
        worst = worst.max((r(a0) - start).abs()).max((r(a1) - end).abs());
        cells.push(format!("tau={tau}: {a0:.4}/{a1:.4}"));
    }
    result("sigmoid_endpoints", worst, 1e-12, true, cells.join(", "))
}

pub fn check_metrics() -> Result<CheckResult> {
    let m = AccuracyMatrix::from_rows(vec![vec![1.0], vec![0.8, 0.9]])?;
    let r = metrics(&m, 2)?;
    let dev = (r.final_accuracy - 0.85).abs().max((r.average_accuracy - 0.925).abs());
    Ok(result(
        "accuracy_metrics",
        dev,
        1e-15,
        true,
        format!("A_T={} avg={}", r.final_accuracy, r.average_accuracy),
    ))
}

type Check = fn(Fault) -> Result<CheckResult>;

/// Runs every check; a check that errors is reported as failed.
pub fn run_all(fault: Fault) -> Vec<CheckResult> {
    let errored = |name: &'static str, e: crate::error::Error| CheckResult {
        name,
        passed: false,
        deviation: f64::NAN,
        tolerance: 0.0,
        detail: format!("error: {e}"),
    };
    let mut out = Vec::new();
    let checks: [(&'static str, Check); 6] = [
        ("grad_ratio_check", check_grad_ratio),
        ("estimator_equivalence", |_| check_estimators()),
        ("fd_gradients", |_| check_fd()),
        ("noisy_objective_affine", |_| check_noisy_objective()),
        ("kl_entropy_identity", |_| check_kl_entropy()),
        ("accuracy_metrics", |_| check_metrics()),
    ];
    for (name, f) in checks {
        out.push(f(fault).unwrap_or_else(|e| errored(name, e)));
    }
    out.insert(5, check_schedule());
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sign_fault_is_caught() {
        let r = check_grad_ratio(Fault::EpgSign).unwrap();
        assert!(!r.passed);
        assert!(r.deviation > 1.0);
    }

    #[test]
    fn clean_ratio_check_passes() {
        assert!(check_grad_ratio(Fault::None).unwrap().passed);
    }
}
