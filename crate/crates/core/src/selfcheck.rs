//! Built-in verification: finite-difference checks of every tape op and of
//! the full training loss, and exactness checks of the signal pipeline.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ser_autograd::{bind, finite_diff_check, Bound, FdConfig, FdReport, ParamSet, Probe, Tape, Tensor, Var};

use crate::corpus::{synth_noise, synth_utterance, Emotion, NoiseKind, Waveform};
use crate::dsp::{istft, measure_snr, mix_at_snr, stft, FrameConfig, Spectrogram, NUM_MEL};
use crate::enhance::enhancer_by_name;
use crate::error::Result;
use crate::model::{example_loss, Model, ModelKind, Targets};
use crate::ser::{reference_representation, InputNorm};
use crate::snr_aware::compensate;
use crate::trainer::{make_training_view, rng_for, LoadedUtterance, NoiseSpec, TrainingExample};

/// Step of the full-loss check. At 1e-5 the rounding noise of a loss near
/// 1.0 swamps coordinates whose gradient is around 1e-7.
pub const FULL_LOSS_H: f64 = 1e-4;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.random_range(-1.5..1.5);
            // keep clear of the relu and clamp kinks
            if v.abs() > 0.05 && (v - 1.0).abs() > 0.05 {
                break v;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

fn project(tape: &mut Tape, out: Var) -> ser_autograd::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let w = random(tape.shape(out), &mut rng);
    let w = tape.constant(w);
    let prod = tape.mul(out, w)?;
    tape.sum(prod)
}

fn op_error<F>(inputs: &[(&str, &[usize])], seed: u64, build: F) -> Result<FdReport>
where
    F: Fn(&mut Tape, &Bound) -> ser_autograd::Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamSet::new();
    for (name, shape) in inputs {
        params.insert(*name, random(shape, &mut rng));
    }
    let eval = |p: &ParamSet| -> ser_autograd::Result<(Tape, Var, Bound)> {
        let mut tape = Tape::new();
        let b = bind(&mut tape, p, true);
        let out = build(&mut tape, &b)?;
        let loss = project(&mut tape, out)?;
        Ok((tape, loss, b))
    };
    let (mut tape, loss, b) = eval(&params)?;
    tape.backward(loss)?;
    let grads = b.grads(&tape);
    let cfg = FdConfig {
        max_coords: 300,
        ..FdConfig::default()
    };
    let report = finite_diff_check(
        |p| {
            let (t, l, _) = eval(p)?;
            Ok(Probe {
                value: t.value(l).item(),
                regime: t.regime_signature(),
            })
        },
        &params,
        &grads,
        cfg,
    )?;
    Ok(report)
}

/// Finite-difference report of every differentiable tape op.
pub fn op_gradient_reports() -> Result<Vec<(&'static str, FdReport)>> {
    let v = |b: &Bound, n: &str| b.var(n);
    Ok(vec![
        ("matmul", op_error(&[("a", &[3, 4]), ("b", &[4, 2])], 1, |t, b| t.matmul(v(b, "a")?, v(b, "b")?))?),
        ("add", op_error(&[("a", &[3, 4]), ("b", &[3, 4])], 2, |t, b| t.add(v(b, "a")?, v(b, "b")?))?),
        ("sub", op_error(&[("a", &[3, 4]), ("b", &[3, 4])], 3, |t, b| t.sub(v(b, "a")?, v(b, "b")?))?),
        ("mul", op_error(&[("a", &[3, 4]), ("b", &[3, 4])], 4, |t, b| t.mul(v(b, "a")?, v(b, "b")?))?),
        ("add_row", op_error(&[("x", &[3, 4]), ("r", &[4])], 5, |t, b| t.add_row(v(b, "x")?, v(b, "r")?))?),
        ("mul_row", op_error(&[("x", &[3, 4]), ("r", &[4])], 6, |t, b| t.mul_row(v(b, "x")?, v(b, "r")?))?),
        ("scale_by", op_error(&[("x", &[3, 4]), ("s", &[1, 1])], 7, |t, b| t.scale_by(v(b, "x")?, v(b, "s")?))?),
        ("scale", op_error(&[("x", &[3, 4])], 8, |t, b| t.scale(v(b, "x")?, -1.7))?),
        ("relu", op_error(&[("x", &[3, 4])], 9, |t, b| t.relu(v(b, "x")?))?),
        ("tanh", op_error(&[("x", &[3, 4])], 10, |t, b| t.tanh(v(b, "x")?))?),
        ("clamp01", op_error(&[("x", &[3, 4])], 11, |t, b| t.clamp01(v(b, "x")?))?),
        ("softmax_axis0", op_error(&[("x", &[3, 4])], 12, |t, b| t.softmax(v(b, "x")?, 0))?),
        ("softmax_axis1", op_error(&[("x", &[3, 4])], 13, |t, b| t.softmax(v(b, "x")?, 1))?),
        (
            "masked_softmax",
            op_error(&[("x", &[5])], 14, |t, b| t.masked_softmax(v(b, "x")?, &[true, false, true, true, false]))?,
        ),
        ("sum", op_error(&[("x", &[3, 4])], 15, |t, b| t.sum(v(b, "x")?))?),
        ("mean", op_error(&[("x", &[3, 4])], 16, |t, b| t.mean(v(b, "x")?))?),
        ("mean_axis", op_error(&[("x", &[2, 3, 4])], 17, |t, b| t.mean_axis(v(b, "x")?, 1))?),
        ("transpose", op_error(&[("x", &[3, 4])], 18, |t, b| t.transpose(v(b, "x")?))?),
        ("reshape", op_error(&[("x", &[3, 4])], 19, |t, b| t.reshape(v(b, "x")?, &[2, 6]))?),
        ("mse", op_error(&[("a", &[3, 4]), ("b", &[3, 4])], 20, |t, b| t.mse(v(b, "a")?, v(b, "b")?))?),
        ("cross_entropy", op_error(&[("x", &[1, 4])], 21, |t, b| t.cross_entropy(v(b, "x")?, 2))?),
        (
            "conv2d",
            op_error(&[("x", &[2, 7, 6]), ("w", &[3, 2, 5, 5]), ("b", &[3])], 22, |t, b| {
                t.conv2d(v(b, "x")?, v(b, "w")?, v(b, "b")?, 2)
            })?,
        ),
        (
            "conv2d_rows",
            op_error(&[("x", &[2, 7, 6]), ("w", &[3, 2, 1, 1]), ("b", &[3])], 23, |t, b| {
                t.conv2d_rows(v(b, "x")?, v(b, "w")?, v(b, "b")?, 2, 3)
            })?,
        ),
    ])
}

/// Two noisy, enhanced training examples built from synthetic recordings.
pub fn noisy_pair(max_frames: usize) -> Result<Vec<TrainingExample>> {
    let enh = enhancer_by_name("oracle_wiener")?;
    let mut out = Vec::new();
    for (i, (e, snr)) in [(Emotion::Angry, 5.0), (Emotion::Sad, 10.0)].into_iter().enumerate() {
        let u = LoadedUtterance {
            id: format!("u{i}"),
            emotion: e,
            wave: synth_utterance(e, "ses1_spk0", 1.0, i as u64)?,
        };
        let noise = synth_noise(NoiseKind::White, 2.0, i as u64)?;
        let mut rng = rng_for(&[b"pair", &[i as u8]]);
        let spec = NoiseSpec { noise: &noise, snr_db: snr };
        out.push(make_training_view(&u, Some(spec), Some(enh.as_ref()), &mut rng, max_frames, None)?);
    }
    Ok(out)
}

/// Batch-mean loss, a combined regime signature and, optionally, the
/// batch-mean gradient.
fn batch_loss(model: &Model, batch: &[TrainingExample], h_s: &[Vec<f64>], grads: bool) -> Result<(f64, u64, ParamSet)> {
    let (a, b) = model.kind.loss_weights(0.5, 0.5);
    let mut total = 0.0;
    let mut regime = 0u64;
    let mut acc = model.params.zeros_like();
    for (ex, hs) in batch.iter().zip(h_s) {
        let mut tape = Tape::new();
        let p = bind(&mut tape, &model.params, true);
        let nv = model.norm.bind(&mut tape);
        let f = model.forward(&mut tape, &p, nv, &ex.inputs())?;
        let targets = Targets {
            x_s: ex.clean_target(),
            h_s: hs,
        };
        let t = model.kind.is_trnet().then_some(&targets);
        let (l, _) = example_loss(&mut tape, &f, ex.label, t, a, b)?;
        total += tape.value(l).item();
        regime = regime.rotate_left(17) ^ tape.regime_signature();
        if grads {
            tape.backward(l)?;
            for ((_, acc), (_, g)) in acc.iter_mut().zip(p.grads(&tape).iter()) {
                acc.data_mut().iter_mut().zip(g.data()).for_each(|(x, y)| *x += y);
            }
        }
    }
    let n = batch.len() as f64;
    acc.iter_mut().for_each(|(_, g)| g.data_mut().iter_mut().for_each(|v| *v /= n));
    Ok((total / n, regime, acc))
}

/// Finite-difference check of the full training loss of `kind` on a
/// two-utterance batch. With `heads_only` the convolution weights are left
/// out so the attention, classifier, snr and bridge parameters get covered;
/// a uniform draw would almost only hit convolution weights.
pub fn full_loss_check(kind: ModelKind, seed: u64, max_coords: usize, heads_only: bool, h: f64) -> Result<FdReport> {
    let batch = noisy_pair(500)?;
    let norm = InputNorm::fit(batch.iter().map(|e| e.clean_target().real()))?;
    let mut model = Model::init(kind, seed, norm.clone());
    if kind.is_trnet() {
        // move the bridge off its identity initialisation
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for name in ["bridge.w1", "bridge.b1", "bridge.w2", "bridge.b2"] {
            let t = model.params.get_mut(name)?;
            t.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.1..0.1));
        }
    }
    let reference = Model::init(ModelKind::BaselineC, seed + 100, norm);
    let enc = reference.encoder_params();
    let h_s: Vec<Vec<f64>> = batch
        .iter()
        .map(|e| reference_representation(&enc, &reference.norm, e.clean_target()))
        .collect::<Result<_>>()?;
    let (_, _, all) = batch_loss(&model, &batch, &h_s, true)?;
    let mut analytic = ParamSet::new();
    for (name, g) in all.iter() {
        let conv = name.starts_with("enc.conv") || name.starts_with("enc.short");
        if !(heads_only && conv) {
            analytic.insert(name, g.clone());
        }
    }
    let mut probe = model.clone();
    let report = finite_diff_check(
        |p| {
            probe.params = p.clone();
            let (v, r, _) = batch_loss(&probe, &batch, &h_s, false)
                .map_err(|e| ser_autograd::AutogradError::Invalid {
                    op: "full_loss_check",
                    reason: e.to_string(),
                })?;
            Ok(Probe { value: v, regime: r })
        },
        &model.params,
        &analytic,
        FdConfig {
            h,
            max_coords,
            seed,
        },
    )?;
    Ok(report)
}

/// Outcome of one named check.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub limit: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.value < self.limit
    }
}

/// Op-level and full-loss gradient checks; `coords` bounds the coordinates
/// sampled per full-loss pass.
pub fn gradient_suite(coords: usize) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for (name, r) in op_gradient_reports()? {
        out.push(Check {
            name: format!("grad {name}"),
            value: r.max_rel_error,
            limit: 1e-4,
        });
    }
    for kind in ModelKind::ALL {
        let mut worst = 0.0f64;
        for heads_only in [false, true] {
            worst = worst.max(full_loss_check(kind, 7, coords, heads_only, FULL_LOSS_H)?.max_rel_error);
        }
        out.push(Check {
            name: format!("grad full loss {kind}"),
            value: worst,
            limit: 1e-4,
        });
    }
    Ok(out)
}

/// Mixing exactness, STFT round trip and compensation endpoints.
pub fn dsp_suite(pairs_per_snr: usize) -> Result<Vec<Check>> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut mix_err = 0.0f64;
    for target in [0.0, 5.0, 10.0, 15.0, 20.0] {
        for _ in 0..pairs_per_snr {
            let n = rng.random_range(8000..32000);
            let speech = Waveform::new((0..n).map(|_| rng.random_range(-0.5..0.5)).collect())?;
            let kind = NoiseKind::ALL[rng.random_range(0..4)];
            let noise = synth_noise(kind, rng.random_range(1.0..6.0), rng.random())?;
            let m = mix_at_snr(&speech, &noise, target, &mut rng)?;
            mix_err = mix_err.max((measure_snr(&speech, &m.scaled_noise)? - target).abs());
        }
    }

    let cfg = FrameConfig::default();
    let mut stft_err = 0.0f64;
    for seed in 0..4u64 {
        let w = synth_utterance(Emotion::ALL[seed as usize], "ses1_spk0", 1.3, seed)?;
        let back = istft(&stft(&w, &cfg)?, &cfg)?;
        // the first and last half-frames lack full window overlap
        let edge = cfg.frame_len;
        let n = w.len().min(back.len());
        for i in edge..n.saturating_sub(edge) {
            stft_err = stft_err.max((w.samples()[i] - back.samples()[i]).abs());
        }
    }

    let mut endpoint_err = 0.0f64;
    for _ in 0..20 {
        let t = rng.random_range(1..300);
        let mut draw = || Spectrogram::new(t, NUM_MEL, (0..t * NUM_MEL).map(|_| rng.random_range(-23.0..5.0)).collect());
        let (x, xe) = (draw()?, draw()?);
        let exact = compensate(&x, &xe, 1.0)?.data() == x.data() && compensate(&x, &xe, 0.0)?.data() == xe.data();
        if !exact {
            endpoint_err = 1.0;
        }
    }
    Ok(vec![
        Check {
            name: "mix snr error (dB)".into(),
            value: mix_err,
            limit: 1e-6,
        },
        Check {
            name: "stft round trip error".into(),
            value: stft_err,
            limit: 1e-9,
        },
        Check {
            name: "compensation endpoints inexact".into(),
            value: endpoint_err,
            limit: 0.5,
        },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dsp_checks_pass() {
        for c in dsp_suite(5).unwrap() {
            assert!(c.passed(), "{c:?}");
        }
    }
}
