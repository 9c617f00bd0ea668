//! Tape gradients against central differences, plus algebraic properties
//! of the softmax primitives.

use aepg::model::{Architecture, MlpPolicy};
use aepg::rng::{stream, Stream};
use aepg::tensor::{fd_check, log_softmax_rows, softmax_rows, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

const INSTANCES: usize = 100;
const EPS: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn random(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Builds `f(a, b) -> scalar` on a fresh tape, checks d/da and d/db by FD.
fn check_binary(name: &str, a: &Tensor, b: &Tensor, build: impl Fn(&mut Tape, Var, Var) -> Var) -> f64 {
    let eval = |av: &Tensor, bv: &Tensor| -> f64 {
        let mut t = Tape::new();
        let (x, y) = (t.leaf(av.clone()), t.leaf(bv.clone()));
        let out = build(&mut t, x, y);
        t.value(out).item()
    };
    let mut tape = Tape::new();
    let (x, y) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
    let out = build(&mut tape, x, y);
    let g = tape.backward(out).unwrap();
    let ga = fd_check(
        |p| eval(&Tensor::new(a.shape().to_vec(), p.to_vec()).unwrap(), b),
        a.data(),
        g.wrt(x).data(),
        EPS,
    )
    .unwrap();
    let gb = fd_check(
        |p| eval(a, &Tensor::new(b.shape().to_vec(), p.to_vec()).unwrap()),
        b.data(),
        g.wrt(y).data(),
        EPS,
    )
    .unwrap();
    let worst = ga.max(gb);
    assert!(worst < TOL, "{name}: rel err {worst:e}");
    worst
}

fn check_unary(name: &str, a: &Tensor, build: impl Fn(&mut Tape, Var) -> Var) {
    let eval = |p: &[f64]| -> f64 {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(a.shape().to_vec(), p.to_vec()).unwrap());
        let out = build(&mut t, x);
        t.value(out).item()
    };
    let mut tape = Tape::new();
    let x = tape.leaf(a.clone());
    let out = build(&mut tape, x);
    let g = tape.backward(out).unwrap();
    let err = fd_check(eval, a.data(), g.wrt(x).data(), EPS).unwrap();
    assert!(err < TOL, "{name}: rel err {err:e}");
}

// A fixed non-uniform weighting so that every output coordinate matters to
// the scalar being differentiated.
fn weigh(t: &mut Tape, v: Var) -> Var {
    let shape = t.value(v).shape().to_vec();
    let n: usize = shape.iter().product();
    let w = t.constant(Tensor::new(shape, (0..n).map(|i| 0.3 + 0.1 * i as f64).collect()).unwrap());
    let m = t.mul(v, w).unwrap();
    t.sum(m)
}

#[test]
fn binary_primitives_match_finite_differences() {
    let mut rng = stream(11, Stream::Init);
    for _ in 0..INSTANCES {
        let a = random(&mut rng, &[3, 4], -2.0, 2.0);
        let b = random(&mut rng, &[3, 4], -2.0, 2.0);
        let c = random(&mut rng, &[4, 2], -2.0, 2.0);
        let bias = random(&mut rng, &[4], -1.0, 1.0);
        check_binary("add", &a, &b, |t, x, y| {
            let v = t.add(x, y).unwrap();
            weigh(t, v)
        });
        check_binary("sub", &a, &b, |t, x, y| {
            let v = t.sub(x, y).unwrap();
            weigh(t, v)
        });
        check_binary("mul", &a, &b, |t, x, y| {
            let v = t.mul(x, y).unwrap();
            weigh(t, v)
        });
        check_binary("matmul", &a, &c, |t, x, y| {
            let v = t.matmul(x, y).unwrap();
            weigh(t, v)
        });
        check_binary("add_row", &a, &bias, |t, x, y| {
            let v = t.add_row(x, y).unwrap();
            weigh(t, v)
        });
    }
}

#[test]
fn unary_primitives_match_finite_differences() {
    let mut rng = stream(12, Stream::Init);
    for _ in 0..INSTANCES {
        let a = random(&mut rng, &[2, 5], -3.0, 3.0);
        let pos = random(&mut rng, &[2, 5], 0.2, 3.0);
        // Keep relu inputs away from the kink where FD straddles it.
        let away = a.map(|v| if v.abs() < 1e-3 { 0.5 } else { v });
        check_unary("scale", &a, |t, x| {
            let v = t.scale(x, -1.7);
            weigh(t, v)
        });
        check_unary("neg", &a, |t, x| {
            let v = t.neg(x);
            weigh(t, v)
        });
        check_unary("add_scalar", &a, |t, x| {
            let v = t.add_scalar(x, 0.9);
            let v = t.mul(v, v).unwrap();
            weigh(t, v)
        });
        check_unary("relu", &away, |t, x| {
            let v = t.relu(x);
            weigh(t, v)
        });
        check_unary("log", &pos, |t, x| {
            let v = t.log(x);
            weigh(t, v)
        });
        check_unary("exp", &a, |t, x| {
            let v = t.exp(x);
            weigh(t, v)
        });
        check_unary("powf", &pos, |t, x| {
            let v = t.powf(x, 1.5);
            weigh(t, v)
        });
        check_unary("mean", &a, |t, x| {
            let v = t.mul(x, x).unwrap();
            t.mean(v)
        });
        check_unary("sum_rows", &a, |t, x| {
            let v = t.sum_rows(x).unwrap();
            weigh(t, v)
        });
        check_unary("gather", &a, |t, x| {
            let v = t.gather(x, &[0, 1, 1], &[4, 0, 2]).unwrap();
            let v = t.mul(v, v).unwrap();
            weigh(t, v)
        });
        check_unary("log_softmax", &a, |t, x| {
            let v = t.log_softmax(x);
            weigh(t, v)
        });
    }
}

/// Checks every trainable parameter of `model` by FD and returns how many
/// parameter tensors were covered.
fn check_model(mut model: MlpPolicy, rng: &mut impl Rng) -> usize {
    // Zero-init B would make every A gradient vanish; perturb everything.
    for p in model.params_mut() {
        for v in p.data_mut() {
            *v += rng.random_range(-0.2..0.2);
        }
    }
    let x = random(rng, &[6, 3], -1.0, 1.0);
    let labels = [0usize, 1, 2, 3, 1, 0];
    let loss_of = |m: &MlpPolicy| -> f64 {
        let ls = log_softmax_rows(&m.predict(&x, None).unwrap());
        -labels.iter().enumerate().map(|(i, &y)| ls.at(i, y)).sum::<f64>()
    };

    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, &x).unwrap();
    let ls = tape.log_softmax(fwd.logits);
    let picked = tape.gather(ls, &(0..6).collect::<Vec<_>>(), &labels).unwrap();
    let s = tape.sum(picked);
    let loss = tape.neg(s);
    let grads = tape.backward(loss).unwrap();

    let mut covered = 0;
    for (k, slot) in fwd.params.iter().enumerate() {
        let Some(var) = slot else { continue };
        let base: Vec<f64> = model.params_mut()[k].data().to_vec();
        let mut probe = model.clone();
        let err = fd_check(
            |p| {
                probe.params_mut()[k].data_mut().copy_from_slice(p);
                loss_of(&probe)
            },
            &base,
            grads.wrt(*var).data(),
            EPS,
        )
        .unwrap();
        assert!(err < 1e-5, "param {k}: rel err {err:e}");
        covered += 1;
    }
    covered
}

#[test]
fn mlp_gradients_match_finite_differences() {
    let mut rng = stream(13, Stream::Init);
    for rank in [0, 2] {
        let arch = Architecture {
            input_dim: 3,
            depth: 2,
            width: 5,
            adapter_rank: rank,
        };
        let mut model = MlpPolicy::new(arch, &mut rng).unwrap();
        model.init_head(4, 0.3, &mut rng).unwrap();
        model.set_freeze(false);
        // Plain trunk: 2 layers × (W, b) + head (W, b). Adapted: 2 × (B, A) + head.
        assert_eq!(check_model(model, &mut rng), 6);
    }
}

#[test]
fn backward_is_deterministic() {
    let mut rng = stream(14, Stream::Init);
    let a = random(&mut rng, &[8, 6], -2.0, 2.0);
    let w = random(&mut rng, &[6, 5], -1.0, 1.0);
    let run = || {
        let mut t = Tape::new();
        let (x, y) = (t.leaf(a.clone()), t.leaf(w.clone()));
        let z = t.matmul(x, y).unwrap();
        let z = t.log_softmax(z);
        let z = t.mul(z, z).unwrap();
        let out = t.sum(z);
        let g = t.backward(out).unwrap();
        (g.wrt(x), g.wrt(y))
    };
    let (a1, w1) = run();
    let (a2, w2) = run();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a1), bits(&a2));
    assert_eq!(bits(&w1), bits(&w2));
}

proptest! {
    #[test]
    fn log_softmax_is_shift_invariant(
        row in prop::collection::vec(-30.0f64..30.0, 2..12),
        shift in -100.0f64..100.0,
    ) {
        let k = row.len();
        let x = Tensor::matrix(1, k, row.clone()).unwrap();
        let shifted = x.map(|v| v + shift);
        let d = log_softmax_rows(&x).max_abs_diff(&log_softmax_rows(&shifted)).unwrap();
        prop_assert!(d <= 1e-12, "shift {shift}: {d:e}");
    }

    #[test]
    fn softmax_rows_sum_to_one(row in prop::collection::vec(-700.0f64..700.0, 1..20)) {
        let p = softmax_rows(&Tensor::matrix(1, row.len(), row).unwrap());
        prop_assert!((p.sum() - 1.0).abs() <= 1e-12);
        prop_assert!(p.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
