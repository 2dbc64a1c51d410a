//! Finite-difference checks for every differentiable op, plus the small
//! worked examples for the forward/backward contracts.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ser_autograd::{
    bind, finite_diff_check, Bound, FdConfig, ParamSet, Probe, Result, Tape, Tensor, Var,
};

fn random(shape: &[usize], rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Reduce `out` to a scalar with fixed random weights so every output
/// coordinate contributes a distinct gradient.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = random(tape.shape(out), &mut rng, -1.0, 1.0);
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn check<F>(params: &ParamSet, build: F) -> f64
where
    F: Fn(&mut Tape, &Bound) -> Result<Var>,
{
    let eval = |p: &ParamSet| -> Result<(Tape, Var, Bound)> {
        let mut tape = Tape::new();
        let bound = bind(&mut tape, p, true);
        let out = build(&mut tape, &bound)?;
        let loss = project(&mut tape, out, 7)?;
        Ok((tape, loss, bound))
    };
    let (mut tape, loss, bound) = eval(params).unwrap();
    tape.backward(loss).unwrap();
    let grads = bound.grads(&tape);
    let report = finite_diff_check(
        |p| {
            let (t, l, _) = eval(p)?;
            Ok(Probe {
                value: t.value(l).item(),
                regime: t.regime_signature(),
            })
        },
        params,
        &grads,
        FdConfig {
            max_coords: 400,
            ..FdConfig::default()
        },
    )
    .unwrap();
    assert!(report.checked > 0);
    report.max_rel_error
}

fn set(entries: Vec<(&str, Tensor)>) -> ParamSet {
    let mut p = ParamSet::new();
    for (n, t) in entries {
        p.insert(n, t);
    }
    p
}

/// Draw values whose magnitude stays at least `gap` away from each kink.
fn away_from(shape: &[usize], rng: &mut ChaCha8Rng, kinks: &[f64], gap: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-2.0..2.0);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

const TOL: f64 = 1e-4;

#[test]
fn matmul_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let p = set(vec![("a", random(&[3, 4], &mut rng, -1.0, 1.0)), ("b", random(&[4, 5], &mut rng, -1.0, 1.0))]);
    let e = check(&p, |t, b| t.matmul(b.var("a")?, b.var("b")?));
    assert!(e < TOL, "{e}");
}

#[test]
fn elementwise_binary_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let p = set(vec![("a", random(&[2, 3, 4], &mut rng, -1.0, 1.0)), ("b", random(&[2, 3, 4], &mut rng, -1.0, 1.0))]);
    for op in ["add", "sub", "mul"] {
        let e = check(&p, |t, b| {
            let (x, y) = (b.var("a")?, b.var("b")?);
            match op {
                "add" => t.add(x, y),
                "sub" => t.sub(x, y),
                _ => t.mul(x, y),
            }
        });
        assert!(e < TOL, "{op}: {e}");
    }
}

#[test]
fn row_broadcast_and_scalar_scale_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let p = set(vec![
        ("x", random(&[5, 3], &mut rng, -1.0, 1.0)),
        ("r", random(&[3], &mut rng, -1.0, 1.0)),
        ("s", random(&[1], &mut rng, -1.0, 1.0)),
    ]);
    let e = check(&p, |t, b| t.add_row(b.var("x")?, b.var("r")?));
    assert!(e < TOL, "add_row {e}");
    let e = check(&p, |t, b| t.mul_row(b.var("x")?, b.var("r")?));
    assert!(e < TOL, "mul_row {e}");
    let e = check(&p, |t, b| t.scale_by(b.var("x")?, b.var("s")?));
    assert!(e < TOL, "scale_by {e}");
    let e = check(&p, |t, b| t.scale(b.var("x")?, -2.5));
    assert!(e < TOL, "scale {e}");
}

#[test]
fn unary_nonlinearity_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = set(vec![("x", away_from(&[40], &mut rng, &[0.0, 1.0], 1e-3))]);
    let e = check(&p, |t, b| t.relu(b.var("x")?));
    assert!(e < TOL, "relu {e}");
    let e = check(&p, |t, b| t.tanh(b.var("x")?));
    assert!(e < TOL, "tanh {e}");
    let e = check(&p, |t, b| t.clamp01(b.var("x")?));
    assert!(e < 1e-6, "clamp01 {e}");
}

#[test]
fn softmax_and_reduction_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let p = set(vec![("x", random(&[3, 4, 2], &mut rng, -2.0, 2.0))]);
    for axis in 0..3 {
        let e = check(&p, |t, b| t.softmax(b.var("x")?, axis));
        assert!(e < TOL, "softmax axis {axis}: {e}");
        let e = check(&p, |t, b| t.mean_axis(b.var("x")?, axis));
        assert!(e < TOL, "mean_axis {axis}: {e}");
    }
    let e = check(&p, |t, b| t.sum(b.var("x")?));
    assert!(e < TOL, "sum {e}");
    let e = check(&p, |t, b| t.mean(b.var("x")?));
    assert!(e < TOL, "mean {e}");
    let e = check(&p, |t, b| t.reshape(b.var("x")?, &[6, 4]));
    assert!(e < TOL, "reshape {e}");
    let q = set(vec![("x", random(&[3, 5], &mut rng, -2.0, 2.0))]);
    let e = check(&q, |t, b| t.transpose(b.var("x")?));
    assert!(e < TOL, "transpose {e}");
}

#[test]
fn masked_softmax_gradient_ignores_masked_entries() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let p = set(vec![("x", random(&[7], &mut rng, -2.0, 2.0))]);
    let mask = [true, false, true, true, false, true, true];
    let e = check(&p, |t, b| t.masked_softmax(b.var("x")?, &mask));
    assert!(e < TOL, "{e}");

    let mut tape = Tape::new();
    let x = tape.param(p.get("x").unwrap().clone());
    let y = tape.masked_softmax(x, &mask).unwrap();
    let l = project(&mut tape, y, 1).unwrap();
    tape.backward(l).unwrap();
    let g = tape.grad(x).unwrap();
    assert_eq!(g[1], 0.0);
    assert_eq!(g[4], 0.0);
    assert_eq!(tape.value(y).data()[1], 0.0);
}

#[test]
fn loss_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let p = set(vec![("a", random(&[4, 6], &mut rng, -1.0, 1.0)), ("b", random(&[4, 6], &mut rng, -1.0, 1.0))]);
    let e = check(&p, |t, b| t.mse(b.var("a")?, b.var("b")?));
    assert!(e < TOL, "mse {e}");
    let q = set(vec![("z", random(&[1, 4], &mut rng, -2.0, 2.0))]);
    for label in 0..4 {
        let e = check(&q, |t, b| t.cross_entropy(b.var("z")?, label));
        assert!(e < TOL, "cross_entropy {label}: {e}");
    }
}

#[test]
fn conv2d_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let p = set(vec![
        ("x", random(&[2, 9, 7], &mut rng, -1.0, 1.0)),
        ("w", random(&[3, 2, 5, 5], &mut rng, -0.5, 0.5)),
        ("b", random(&[3], &mut rng, -0.5, 0.5)),
    ]);
    for stride in [1, 2] {
        let e = check(&p, |t, b| t.conv2d(b.var("x")?, b.var("w")?, b.var("b")?, stride));
        assert!(e < TOL, "conv stride {stride}: {e}");
    }
    // explicit row count reading past the input edge
    let e = check(&p, |t, b| t.conv2d_rows(b.var("x")?, b.var("w")?, b.var("b")?, 2, 6));
    assert!(e < TOL, "conv rows {e}");
    let q = set(vec![
        ("x", random(&[2, 9, 7], &mut rng, -1.0, 1.0)),
        ("w", random(&[4, 2, 1, 1], &mut rng, -0.5, 0.5)),
        ("b", random(&[4], &mut rng, -0.5, 0.5)),
    ]);
    let e = check(&q, |t, b| t.conv2d(b.var("x")?, b.var("w")?, b.var("b")?, 2));
    assert!(e < TOL, "1x1 conv {e}");
}

#[test]
fn composite_graph_gradient() {
    // a small attention-pooling style graph mixing most ops
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = set(vec![
        ("f", random(&[6, 4], &mut rng, -1.0, 1.0)),
        ("w", random(&[4, 4], &mut rng, -1.0, 1.0)),
        ("bias", random(&[4], &mut rng, -1.0, 1.0)),
        ("v", random(&[4, 1], &mut rng, -1.0, 1.0)),
    ]);
    let e = check(&p, |t, b| {
        let f = b.var("f")?;
        let u = t.matmul(f, b.var("w")?)?;
        let u = t.add_row(u, b.var("bias")?)?;
        let u = t.tanh(u)?;
        let e = t.matmul(u, b.var("v")?)?;
        let e = t.reshape(e, &[6])?;
        let a = t.masked_softmax(e, &[true, true, false, true, true, true])?;
        let a = t.reshape(a, &[1, 6])?;
        t.matmul(a, f)
    });
    assert!(e < TOL, "{e}");
}

#[test]
fn relu_backward_example() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![-1.0, 2.0]));
    let y = tape.relu(x).unwrap();
    let l = tape.sum(y).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
}

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[4]));
    let y = tape.softmax(x, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[0.25; 4]);
}

#[test]
fn conv_same_padding_shape() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 500, 80]));
    let w = tape.constant(Tensor::zeros(&[32, 1, 5, 5]));
    let b = tape.constant(Tensor::zeros(&[32]));
    let y = tape.conv2d(x, w, b, 2).unwrap();
    assert_eq!(tape.shape(y), &[32, 250, 40]);
}

#[test]
fn sum_loss_gives_unit_gradient_and_backward_accumulates() {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::full(&[2, 3, 2], 0.7));
    let l = tape.sum(p).unwrap();
    tape.backward(l).unwrap();
    assert!(tape.grad(p).unwrap().iter().all(|&g| g == 1.0));
    tape.backward(l).unwrap();
    assert!(tape.grad(p).unwrap().iter().all(|&g| g == 2.0));
    tape.zero_grads();
    assert!(tape.grad(p).is_none());
}

#[test]
fn mse_against_detached_copy_has_zero_gradient() {
    let mut tape = Tape::new();
    let p = tape.param(Tensor::vector(vec![0.3, -4.0, 2.0]));
    let d = tape.detach(p);
    let l = tape.mse(p, d).unwrap();
    tape.backward(l).unwrap();
    assert!(tape.grad(p).unwrap().iter().all(|&g| g == 0.0));
    assert!(tape.grad(d).is_none());
}

#[test]
fn clamp_passes_gradient_on_closed_unit_interval() {
    let mut tape = Tape::new();
    let x = tape.param(Tensor::vector(vec![-0.5, 0.0, 0.4, 1.0, 1.5]));
    let y = tape.clamp01(x).unwrap();
    let l = tape.sum(y).unwrap();
    tape.backward(l).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0, 1.0, 1.0, 0.0]);
}

#[test]
fn errors_for_bad_inputs() {
    let mut tape = Tape::new();
    let a = tape.param(Tensor::zeros(&[2, 3]));
    let b = tape.param(Tensor::zeros(&[2, 2]));
    assert!(tape.add(a, b).is_err());
    assert!(tape.matmul(a, a).is_err());
    assert!(tape.backward(a).is_err());
    let big = tape.constant(Tensor::scalar(1e300));
    let sq = tape.mul(big, big);
    assert!(matches!(sq, Err(ser_autograd::AutogradError::NonFinite { .. })));
    let z = tape.constant(Tensor::zeros(&[3]));
    assert!(tape.masked_softmax(z, &[false, false, false]).is_err());
}

#[test]
fn frozen_leaves_receive_no_gradient() {
    let mut tape = Tape::new();
    let frozen = tape.constant(Tensor::vector(vec![1.0, 2.0]));
    let p = tape.param(Tensor::vector(vec![3.0, 4.0]));
    let y = tape.mul(frozen, p).unwrap();
    let l = tape.sum(y).unwrap();
    tape.backward(l).unwrap();
    assert!(tape.grad(frozen).is_none());
    assert_eq!(tape.grad(p).unwrap(), &[1.0, 2.0]);
}
