//! SNR coefficient estimation from noisy/enhanced feature similarity and
//! the compensated feature it weights.

use ser_autograd::{Bound, ParamSet, Tape, Tensor, Var};

use crate::dsp::{Spectrogram, NUM_MEL};
use crate::error::{invalid, Result};

fn check_same(a: (usize, usize), b: (usize, usize), what: &str) -> Result<()> {
    if a != b {
        return Err(invalid(format!("{what}: shape {a:?} vs {b:?}")));
    }
    Ok(())
}

/// Cosine similarity of each frequency column (a length-T series) of two
/// row-major `T × F` matrices; zero-norm columns give 0.
pub fn similarity_rows(x: &[f64], x_e: &[f64], dims: usize) -> Result<Vec<f64>> {
    if x.len() != x_e.len() || dims == 0 || x.len() % dims != 0 {
        return Err(invalid(format!(
            "similarity: lengths {} and {} with {dims} columns",
            x.len(),
            x_e.len()
        )));
    }
    let mut dot = vec![0.0; dims];
    let mut nx = vec![0.0; dims];
    let mut ne = vec![0.0; dims];
    for (rx, re) in x.chunks_exact(dims).zip(x_e.chunks_exact(dims)) {
        for f in 0..dims {
            dot[f] += rx[f] * re[f];
            nx[f] += rx[f] * rx[f];
            ne[f] += re[f] * re[f];
        }
    }
    Ok((0..dims)
        .map(|f| {
            let denom = nx[f].sqrt() * ne[f].sqrt();
            if denom == 0.0 {
                0.0
            } else {
                (dot[f] / denom).clamp(-1.0, 1.0)
            }
        })
        .collect())
}

pub fn similarity_vector(x: &Spectrogram, x_e: &Spectrogram) -> Result<Vec<f64>> {
    check_same((x.frames(), x.dims()), (x_e.frames(), x_e.dims()), "similarity")?;
    similarity_rows(x.data(), x_e.data(), x.dims())
}

/// FC weight `w` (F) and bias `b` of the coefficient estimator.
#[derive(Clone, Debug, PartialEq)]
pub struct SnrAwareParams {
    pub w: Vec<f64>,
    pub b: f64,
}

impl Default for SnrAwareParams {
    fn default() -> Self {
        Self {
            w: vec![1.0 / NUM_MEL as f64; NUM_MEL],
            b: 0.0,
        }
    }
}

impl SnrAwareParams {
    pub fn to_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("snr.w", Tensor::new(vec![self.w.len(), 1], self.w.clone()).expect("column"));
        p.insert("snr.b", Tensor::new(vec![1, 1], vec![self.b]).expect("scalar"));
        p
    }

    pub fn from_params(p: &ParamSet) -> Result<Self> {
        Ok(Self {
            w: p.get("snr.w")?.data().to_vec(),
            b: p.get("snr.b")?.item(),
        })
    }
}

/// Pre-clamp `c̄` and clamped `c`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SnrCoefficient {
    pub raw: f64,
    pub c: f64,
}

pub fn estimate_coefficient(d: &[f64], p: &SnrAwareParams) -> Result<SnrCoefficient> {
    if d.len() != p.w.len() {
        return Err(invalid(format!("d has {} entries, weights {}", d.len(), p.w.len())));
    }
    let raw = d.iter().zip(&p.w).map(|(a, b)| a * b).sum::<f64>() + p.b;
    Ok(SnrCoefficient {
        raw,
        c: raw.clamp(0.0, 1.0),
    })
}

/// `c·X + (1−c)·X_e`, elementwise.
pub fn compensate(x: &Spectrogram, x_e: &Spectrogram, c: f64) -> Result<Spectrogram> {
    check_same((x.frames(), x.dims()), (x_e.frames(), x_e.dims()), "compensate")?;
    if !(0.0..=1.0).contains(&c) {
        return Err(invalid(format!("coefficient {c} outside [0, 1]")));
    }
    let data = x
        .data()
        .iter()
        .zip(x_e.data())
        .map(|(a, b)| c * a + (1.0 - c) * b)
        .collect();
    Spectrogram::new(x.frames(), x.dims(), data)
}

pub fn loss_low(x_s: &Spectrogram, x_tilde: &Spectrogram) -> Result<f64> {
    check_same((x_s.frames(), x_s.dims()), (x_tilde.frames(), x_tilde.dims()), "loss_low")?;
    let n = x_s.data().len() as f64;
    Ok(x_s
        .data()
        .iter()
        .zip(x_tilde.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / n)
}

/// Graph form: `c = clamp01(dᵀw + b)` as a `[1, 1]` var.
pub fn coefficient_graph(tape: &mut Tape, p: &Bound, d: &[f64]) -> Result<Var> {
    let dv = tape.constant(Tensor::new(vec![1, d.len()], d.to_vec())?);
    let z = tape.matmul(dv, p.var("snr.w")?)?;
    let z = tape.add(z, p.var("snr.b")?)?;
    Ok(tape.clamp01(z)?)
}

/// Graph form of the compensation; `c` is a single-element var.
pub fn compensate_graph(tape: &mut Tape, x: Var, x_e: Var, c: Var) -> Result<Var> {
    let one = tape.constant(Tensor::full(tape.shape(c), 1.0));
    let rest = tape.sub(one, c)?;
    let a = tape.scale_by(x, c)?;
    let b = tape.scale_by(x_e, rest)?;
    Ok(tape.add(a, b)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use ser_autograd::{bind, finite_diff_check, FdConfig, Probe};

    fn spec(t: usize, f: usize, data: Vec<f64>) -> Spectrogram {
        Spectrogram::new(t, f, data).unwrap()
    }

    fn random(rng: &mut ChaCha8Rng, t: usize, f: usize) -> Spectrogram {
        spec(t, f, (0..t * f).map(|_| rng.random_range(-5.0..5.0)).collect())
    }

    #[test]
    fn similarity_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(&mut rng, 10, 80);
        assert!(similarity_vector(&x, &x).unwrap().iter().all(|d| (d - 1.0).abs() < 1e-12));
        let neg = spec(10, 80, x.data().iter().map(|v| -v).collect());
        assert!(similarity_vector(&x, &neg).unwrap().iter().all(|d| (d + 1.0).abs() < 1e-12));
        let a = spec(3, 1, vec![1.0, 0.0, 0.0]);
        let b = spec(3, 1, vec![0.0, 1.0, 0.0]);
        assert_eq!(similarity_vector(&a, &b).unwrap(), vec![0.0]);
        let z = spec(3, 1, vec![0.0; 3]);
        assert_eq!(similarity_vector(&a, &z).unwrap(), vec![0.0]);
        assert!(similarity_vector(&x, &random(&mut rng, 9, 80)).is_err());
    }

    #[test]
    fn coefficient_examples() {
        let p = SnrAwareParams::default();
        assert!((estimate_coefficient(&[1.0; 80], &p).unwrap().c - 1.0).abs() < 1e-12);
        let c = estimate_coefficient(&[-0.5; 80], &p).unwrap();
        assert!((c.raw + 0.5).abs() < 1e-12);
        assert_eq!(c.c, 0.0);
        assert!((estimate_coefficient(&[0.3; 80], &p).unwrap().c - 0.3).abs() < 1e-12);
    }

    #[test]
    fn compensation_endpoints_are_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 7, 80);
        let xe = random(&mut rng, 7, 80);
        assert_eq!(compensate(&x, &xe, 1.0).unwrap(), x);
        assert_eq!(compensate(&x, &xe, 0.0).unwrap(), xe);
        let mid = compensate(&spec(2, 2, vec![2.0; 4]), &spec(2, 2, vec![4.0; 4]), 0.5).unwrap();
        assert_eq!(mid.data(), &[3.0; 4]);
        assert!(compensate(&x, &xe, 1.5).is_err());
    }

    #[test]
    fn graph_compensation_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&mut rng, 5, 80);
        let xe = random(&mut rng, 5, 80);
        for c in [0.0, 0.37, 1.0] {
            let mut tape = Tape::new();
            let xv = tape.constant(Tensor::new(vec![5, 80], x.data().to_vec()).unwrap());
            let ev = tape.constant(Tensor::new(vec![5, 80], xe.data().to_vec()).unwrap());
            let cv = tape.constant(Tensor::new(vec![1, 1], vec![c]).unwrap());
            let out = compensate_graph(&mut tape, xv, ev, cv).unwrap();
            assert_eq!(tape.value(out).data(), compensate(&x, &xe, c).unwrap().data());
        }
    }

    #[test]
    fn loss_low_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&mut rng, 4, 80);
        assert_eq!(loss_low(&x, &x).unwrap(), 0.0);
        let shifted = spec(4, 80, x.data().iter().map(|v| v + 1.0).collect());
        assert!((loss_low(&x, &shifted).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn loss_low_gradient_in_c() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (x, xe, xs) = (random(&mut rng, 10, 80), random(&mut rng, 10, 80), random(&mut rng, 10, 80));
        let c0 = 0.42;
        let mut params = ParamSet::new();
        params.insert("c", Tensor::new(vec![1, 1], vec![c0]).unwrap());
        let run = |p: &ParamSet| -> (f64, ParamSet) {
            let mut tape = Tape::new();
            let b = bind(&mut tape, p, true);
            let xv = tape.constant(Tensor::new(vec![10, 80], x.data().to_vec()).unwrap());
            let ev = tape.constant(Tensor::new(vec![10, 80], xe.data().to_vec()).unwrap());
            let sv = tape.constant(Tensor::new(vec![10, 80], xs.data().to_vec()).unwrap());
            let xt = compensate_graph(&mut tape, xv, ev, b.var("c").unwrap()).unwrap();
            let l = tape.mse(sv, xt).unwrap();
            tape.backward(l).unwrap();
            (tape.value(l).item(), b.grads(&tape))
        };
        let (_, g) = run(&params);
        let xt = compensate(&x, &xe, c0).unwrap();
        let closed: f64 = (0..800)
            .map(|i| 2.0 * (xt.data()[i] - xs.data()[i]) * (x.data()[i] - xe.data()[i]))
            .sum::<f64>()
            / 800.0;
        assert!((g.get("c").unwrap().item() - closed).abs() <= 1e-9 * closed.abs().max(1.0));
        let cfg = FdConfig { h: 1e-6, ..FdConfig::default() };
        let report = finite_diff_check(|p| Ok(Probe::smooth(run(p).0)), &params, &g, cfg).unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }

    #[test]
    fn coefficient_graph_matches_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = SnrAwareParams::default();
        p.w.iter_mut().for_each(|w| *w += rng.random_range(-0.01..0.01));
        p.b = 0.05;
        let d: Vec<f64> = (0..80).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let b = bind(&mut tape, &p.to_params(), true);
        let c = coefficient_graph(&mut tape, &b, &d).unwrap();
        let expect = estimate_coefficient(&d, &p).unwrap().c;
        assert!((tape.value(c).item() - expect).abs() < 1e-15);
        assert_eq!(SnrAwareParams::from_params(&p.to_params()).unwrap(), p);
    }

    proptest! {
        #[test]
        fn similarity_bounded_and_scale_invariant(
            seed in any::<u64>(),
            t in 1usize..20,
            k1 in 0.01f64..100.0,
            k2 in 0.01f64..100.0,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random(&mut rng, t, 6);
            let xe = random(&mut rng, t, 6);
            let d = similarity_vector(&x, &xe).unwrap();
            prop_assert!(d.iter().all(|v| (-1.0..=1.0).contains(v)));
            let xs = spec(t, 6, x.data().iter().map(|v| v * k1).collect());
            let es = spec(t, 6, xe.data().iter().map(|v| v * k2).collect());
            let d2 = similarity_vector(&xs, &es).unwrap();
            for (a, b) in d.iter().zip(&d2) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }
    }
}
