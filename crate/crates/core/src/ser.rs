//! Residual CNN encoder with attention pooling over time, the emotion
//! classifier head, and the fixed input normalisation.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use ser_autograd::{Bound, ParamSet, Tape, Tensor, Var};

use crate::dsp::{Spectrogram, LOG_FLOOR, NUM_MEL};
use crate::error::{invalid, Error, Result};

pub const MAX_FRAMES: usize = 500;
pub const FILTERS: [usize; 4] = [32, 64, 128, 256];
pub const KERNEL: usize = 5;
pub const STRIDE: usize = 2;
pub const EMBED_DIM: usize = 256;

/// A spectrogram fitted to a nominal `frames` rows (500 in the model). Only
/// the real rows are stored; padding rows hold the log floor and are
/// materialised on demand.
#[derive(Clone, Debug, PartialEq)]
pub struct Padded {
    real: Spectrogram,
    frames: usize,
}

impl Padded {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.real.dims()
    }

    pub fn valid(&self) -> usize {
        self.real.frames()
    }

    pub fn mask(&self) -> Vec<bool> {
        (0..self.frames).map(|t| t < self.valid()).collect()
    }

    /// The real frames only.
    pub fn real(&self) -> &Spectrogram {
        &self.real
    }

    /// The real frames only, `valid × F` row-major.
    pub fn valid_data(&self) -> &[f64] {
        self.real.data()
    }

    pub fn valid_tensor(&self) -> Tensor {
        Tensor::new(vec![self.valid(), self.dims()], self.valid_data().to_vec()).expect("valid rows")
    }

    /// Full `frames × F` matrix including floor-valued padding rows.
    pub fn to_spectrogram(&self) -> Spectrogram {
        let mut data = self.real.data().to_vec();
        data.resize(self.frames * self.dims(), LOG_FLOOR.ln());
        Spectrogram::new(self.frames, self.dims(), data).expect("padded shape")
    }
}

/// Fit a spectrogram to exactly `MAX_FRAMES` rows: keep the first 500 frames
/// or pad with the log floor.
pub fn pad_or_truncate(s: &Spectrogram) -> Result<Padded> {
    pad_or_truncate_to(s, MAX_FRAMES)
}

pub fn pad_or_truncate_to(s: &Spectrogram, frames: usize) -> Result<Padded> {
    if s.frames() == 0 || frames == 0 {
        return Err(invalid("cannot pad an empty spectrogram"));
    }
    let valid = s.frames().min(frames);
    let dims = s.dims();
    Ok(Padded {
        real: Spectrogram::new(valid, dims, s.data()[..valid * dims].to_vec())?,
        frames,
    })
}

/// Valid row count after one stride-2, kernel-5 same-padded layer: an output
/// row is kept iff its receptive field touches at least one real input row.
pub fn next_valid(valid_in: usize, nominal_out: usize) -> usize {
    ((valid_in + 1) / STRIDE + 1).min(nominal_out)
}

/// Nominal and valid time extents at the input and after each block.
pub fn time_extents(nominal: usize, valid: usize) -> [(usize, usize); 5] {
    let mut out = [(nominal, valid.min(nominal)); 5];
    for i in 1..5 {
        let n = out[i - 1].0.div_ceil(STRIDE);
        out[i] = (n, next_valid(out[i - 1].1, n));
    }
    out
}

/// Per-bin mean and standard deviation of clean training features, frozen
/// once computed.
#[derive(Clone, Debug, PartialEq)]
pub struct InputNorm {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl InputNorm {
    pub fn identity(dims: usize) -> Self {
        Self {
            mean: vec![0.0; dims],
            std: vec![1.0; dims],
        }
    }

    /// Statistics over every real frame of `specs`.
    pub fn fit<'a>(specs: impl IntoIterator<Item = &'a Spectrogram>) -> Result<Self> {
        let mut sum = vec![0.0; NUM_MEL];
        let mut sq = vec![0.0; NUM_MEL];
        let mut n = 0usize;
        for s in specs {
            if s.dims() != NUM_MEL {
                return Err(invalid(format!("expected {NUM_MEL} bins, got {}", s.dims())));
            }
            for t in 0..s.frames() {
                for (f, v) in s.row(t).iter().enumerate() {
                    sum[f] += v;
                    sq[f] += v * v;
                }
            }
            n += s.frames();
        }
        if n == 0 {
            return Err(invalid("no frames to fit input normalisation"));
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-3))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn to_params(&self) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert("norm.mean", Tensor::vector(self.mean.clone()));
        p.insert("norm.std", Tensor::vector(self.std.clone()));
        p
    }

    pub fn from_params(p: &ParamSet) -> Result<Self> {
        Ok(Self {
            mean: p.get("norm.mean")?.data().to_vec(),
            std: p.get("norm.std")?.data().to_vec(),
        })
    }

    pub fn bind(&self, tape: &mut Tape) -> NormVars {
        NormVars {
            shift: tape.constant(Tensor::vector(self.mean.iter().map(|m| -m).collect())),
            scale: tape.constant(Tensor::vector(self.std.iter().map(|s| 1.0 / s).collect())),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct NormVars {
    shift: Var,
    scale: Var,
}

fn normal(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// Encoder parameters: He-normal 5×5 convolutions, `N(0, 1/fan_in)` for
/// 1×1 shortcuts and attention, zero biases.
pub fn init_encoder(rng: &mut impl Rng) -> ParamSet {
    let mut p = ParamSet::new();
    let mut cin = 1;
    for (i, &cout) in FILTERS.iter().enumerate() {
        let fan = (cin * KERNEL * KERNEL) as f64;
        p.insert(format!("enc.conv{}.w", i + 1), normal(rng, &[cout, cin, KERNEL, KERNEL], (2.0 / fan).sqrt()));
        p.insert(format!("enc.conv{}.b", i + 1), Tensor::zeros(&[cout]));
        p.insert(format!("enc.short{}.w", i + 1), normal(rng, &[cout, cin, 1, 1], (1.0 / cin as f64).sqrt()));
        p.insert(format!("enc.short{}.b", i + 1), Tensor::zeros(&[cout]));
        cin = cout;
    }
    let s = (1.0 / EMBED_DIM as f64).sqrt();
    p.insert("enc.att.w", normal(rng, &[EMBED_DIM, EMBED_DIM], s));
    p.insert("enc.att.b", Tensor::zeros(&[EMBED_DIM]));
    p.insert("enc.att.v", normal(rng, &[EMBED_DIM, 1], s));
    p
}

pub fn init_classifier(rng: &mut impl Rng, classes: usize) -> ParamSet {
    let mut p = ParamSet::new();
    p.insert("cls.w", normal(rng, &[EMBED_DIM, classes], (1.0 / EMBED_DIM as f64).sqrt()));
    p.insert("cls.b", Tensor::zeros(&[1, classes]));
    p
}

#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    /// `[T', 256]` frame sequence after frequency averaging.
    pub frames: Var,
    /// `[1, 256]` pooled representation.
    pub h: Var,
}

fn normalise(tape: &mut Tape, norm: NormVars, x: Var) -> Result<Var> {
    let shifted = tape.add_row(x, norm.shift)?;
    Ok(tape.mul_row(shifted, norm.scale)?)
}

fn block(tape: &mut Tape, p: &Bound, i: usize, x: Var, out_rows: usize) -> Result<Var> {
    let w = p.var(&format!("enc.conv{i}.w"))?;
    let b = p.var(&format!("enc.conv{i}.b"))?;
    let sw = p.var(&format!("enc.short{i}.w"))?;
    let sb = p.var(&format!("enc.short{i}.b"))?;
    let main = tape.conv2d_rows(x, w, b, STRIDE, out_rows)?;
    let main = tape.relu(main)?;
    let short = tape.conv2d_rows(x, sw, sb, STRIDE, out_rows)?;
    Ok(tape.add(main, short)?)
}

fn frequency_average(tape: &mut Tape, x: Var) -> Result<Var> {
    let m = tape.mean_axis(x, 2)?;
    Ok(tape.transpose(m)?)
}

/// Encode the real frames `x: [T, F]` (T ≤ 500). Rows past the valid extent
/// are never materialised; they behave exactly as zero-valued masked rows.
pub fn encode(tape: &mut Tape, p: &Bound, norm: NormVars, x: Var) -> Result<EncoderOutput> {
    let (t, f) = match tape.shape(x) {
        [t, f] => (*t, *f),
        s => return Err(invalid(format!("encoder input must be [T, F], got {s:?}"))),
    };
    if t == 0 || t > MAX_FRAMES {
        return Err(invalid(format!("encoder input has {t} frames, expected 1..={MAX_FRAMES}")));
    }
    let extents = time_extents(MAX_FRAMES, t);
    let xn = normalise(tape, norm, x)?;
    let mut cur = tape.reshape(xn, &[1, t, f])?;
    for i in 0..4 {
        cur = block(tape, p, i + 1, cur, extents[i + 1].1)?;
    }
    let frames = frequency_average(tape, cur)?;
    let h = attention_pool(tape, p, frames, None)?;
    Ok(EncoderOutput { frames, h })
}

/// Reference formulation over the full padded `[500, F]` input: padded rows
/// are zeroed after normalisation, every block output is multiplied by its
/// downsampled mask, and attention runs over all 32 rows with masking.
pub fn encode_masked(tape: &mut Tape, p: &Bound, norm: NormVars, x: Var, valid: usize) -> Result<EncoderOutput> {
    let (t, f) = match tape.shape(x) {
        [t, f] => (*t, *f),
        s => return Err(invalid(format!("encoder input must be [T, F], got {s:?}"))),
    };
    let extents = time_extents(t, valid);
    let row_mask = |tape: &mut Tape, c: usize, rows: usize, cols: usize, valid: usize| {
        let data = (0..c * rows * cols)
            .map(|i| if (i / cols) % rows < valid { 1.0 } else { 0.0 })
            .collect();
        tape.constant(Tensor::new(vec![c, rows, cols], data).expect("mask shape"))
    };
    let xn = normalise(tape, norm, x)?;
    let xn = tape.reshape(xn, &[1, t, f])?;
    let m = row_mask(tape, 1, t, f, extents[0].1);
    let mut cur = tape.mul(xn, m)?;
    for i in 0..4 {
        cur = block(tape, p, i + 1, cur, extents[i + 1].0)?;
        let [c, rows, cols] = *tape.shape(cur) else {
            return Err(invalid("block output must be rank 3"));
        };
        let m = row_mask(tape, c, rows, cols, extents[i + 1].1);
        cur = tape.mul(cur, m)?;
    }
    let frames = frequency_average(tape, cur)?;
    let mask: Vec<bool> = (0..extents[4].0).map(|r| r < extents[4].1).collect();
    let h = attention_pool(tape, p, frames, Some(&mask))?;
    Ok(EncoderOutput { frames, h })
}

/// `e_t = vᵀ tanh(W f_t + b)`, softmax over (unmasked) time, weighted sum of
/// frames. Returns `[1, D]`.
pub fn attention_pool(tape: &mut Tape, p: &Bound, frames: Var, mask: Option<&[bool]>) -> Result<Var> {
    let t = tape.shape(frames)[0];
    let w = p.var("enc.att.w")?;
    let b = p.var("enc.att.b")?;
    let v = p.var("enc.att.v")?;
    let u = tape.matmul(frames, w)?;
    let u = tape.add_row(u, b)?;
    let u = tape.tanh(u)?;
    let e = tape.matmul(u, v)?;
    let e = tape.reshape(e, &[t])?;
    let alpha = match mask {
        Some(m) => tape.masked_softmax(e, m)?,
        None => tape.softmax(e, 0)?,
    };
    let alpha = tape.reshape(alpha, &[1, t])?;
    Ok(tape.matmul(alpha, frames)?)
}

/// Fully connected head `[1, 256] → [1, classes]`.
pub fn classify(tape: &mut Tape, p: &Bound, rep: Var) -> Result<Var> {
    let w = p.var("cls.w")?;
    let b = p.var("cls.b")?;
    let z = tape.matmul(rep, w)?;
    Ok(tape.add(z, b)?)
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// `h_s` of the frozen clean reference model: the encoder is bound as
/// constants so no gradient can reach it.
pub fn reference_representation(frozen: &ParamSet, norm: &InputNorm, x_s: &Padded) -> Result<Vec<f64>> {
    if frozen.is_empty() {
        return Err(Error::MissingReference("no frozen parameters loaded".into()));
    }
    let mut tape = Tape::new();
    let p = ser_autograd::bind(&mut tape, frozen, false);
    let nv = norm.bind(&mut tape);
    let x = tape.constant(x_s.valid_tensor());
    let out = encode(&mut tape, &p, nv, x)?;
    let h = tape.value(out.h).data().to_vec();
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("reference representation".into()));
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use ser_autograd::{bind, finite_diff_check, FdConfig, Probe};

    fn random_spec(rng: &mut ChaCha8Rng, t: usize) -> Spectrogram {
        Spectrogram::new(t, NUM_MEL, (0..t * NUM_MEL).map(|_| rng.random_range(-8.0..2.0)).collect()).unwrap()
    }

    fn params(seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = init_encoder(&mut rng);
        p.extend(&init_classifier(&mut rng, 4));
        p
    }

    #[test]
    fn padding_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = random_spec(&mut rng, 98);
        let p = pad_or_truncate(&s).unwrap();
        let full = p.to_spectrogram();
        assert_eq!(full.frames(), 500);
        assert_eq!(p.mask().iter().filter(|m| **m).count(), 98);
        assert_eq!(full.row(97), s.row(97));
        assert!(full.row(98).iter().all(|v| *v == LOG_FLOOR.ln()));
        let long = random_spec(&mut rng, 700);
        let p = pad_or_truncate(&long).unwrap();
        assert!(p.mask().iter().all(|m| *m));
        assert_eq!(p.to_spectrogram().data(), &long.data()[..500 * NUM_MEL]);
        let exact = random_spec(&mut rng, 500);
        assert_eq!(pad_or_truncate(&exact).unwrap().to_spectrogram(), exact);
    }

    #[test]
    fn shape_trace() {
        assert_eq!(
            time_extents(500, 500).map(|e| e.0),
            [500, 250, 125, 63, 32]
        );
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = params(1);
        let mut tape = Tape::new();
        let b = bind(&mut tape, &p, false);
        let nv = InputNorm::identity(NUM_MEL).bind(&mut tape);
        let x = tape.constant(Tensor::new(vec![500, 80], random_spec(&mut rng, 500).into_data()).unwrap());
        let out = encode(&mut tape, &b, nv, x).unwrap();
        assert_eq!(tape.shape(out.frames), &[32, 256]);
        assert_eq!(tape.shape(out.h), &[1, 256]);
    }

    #[test]
    fn receptive_field_rule_matches_brute_force() {
        for valid in 1..=500 {
            let ext = time_extents(500, valid);
            let mut rows: Vec<bool> = (0..500).map(|r| r < valid).collect();
            for e in &ext[1..] {
                let next: Vec<bool> = (0..e.0)
                    .map(|j| (0..KERNEL).any(|k| {
                        let i = (2 * j + k) as isize - 2;
                        i >= 0 && (i as usize) < rows.len() && rows[i as usize]
                    }))
                    .collect();
                assert_eq!(next.iter().filter(|m| **m).count(), e.1, "valid {valid}");
                assert!(next.iter().take(e.1).all(|m| *m));
                rows = next;
            }
        }
    }

    fn encode_both(p: &ParamSet, padded: &Padded) -> (Vec<f64>, Vec<f64>) {
        encode_full(p, padded, &padded.to_spectrogram())
    }

    /// Cropped encoder on the real rows and masked encoder on `full`.
    fn encode_full(p: &ParamSet, padded: &Padded, full: &Spectrogram) -> (Vec<f64>, Vec<f64>) {
        let norm = InputNorm::identity(NUM_MEL);
        let mut tape = Tape::new();
        let b = bind(&mut tape, p, false);
        let nv = norm.bind(&mut tape);
        let x = tape.constant(padded.valid_tensor());
        let cropped = encode(&mut tape, &b, nv, x).unwrap();
        let full = tape.constant(Tensor::new(vec![500, 80], full.data().to_vec()).unwrap());
        let masked = encode_masked(&mut tape, &b, nv, full, padded.valid()).unwrap();
        (tape.value(cropped.h).data().to_vec(), tape.value(masked.h).data().to_vec())
    }

    #[test]
    fn cropped_and_masked_encoders_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = params(2);
        for t in [37, 98, 251, 500] {
            let padded = pad_or_truncate(&random_spec(&mut rng, t)).unwrap();
            let (a, b) = encode_both(&p, &padded);
            let d = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(d < 1e-10, "T={t}: {d}");
        }
    }

    #[test]
    fn padded_frames_have_no_influence() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = params(3);
        let padded = pad_or_truncate(&random_spec(&mut rng, 120)).unwrap();
        let mut data = padded.to_spectrogram().into_data();
        for v in &mut data[120 * NUM_MEL..] {
            *v = rng.random_range(-50.0..50.0);
        }
        let perturbed = Spectrogram::new(500, NUM_MEL, data).unwrap();
        let base = encode_both(&p, &padded);
        let moved = encode_full(&p, &padded, &perturbed);
        assert_eq!(base.1, moved.1);
    }

    #[test]
    fn single_frame_attention_returns_that_frame() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = params(4);
        let mut tape = Tape::new();
        let b = bind(&mut tape, &p, false);
        let frames = tape.constant(Tensor::new(vec![6, 256], (0..6 * 256).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        let mask = [false, false, true, false, false, false];
        let h = attention_pool(&mut tape, &b, frames, Some(&mask)).unwrap();
        assert_eq!(tape.value(h).data(), &tape.value(frames).data()[2 * 256..3 * 256]);
        assert!(attention_pool(&mut tape, &b, frames, Some(&[false; 6])).is_err());
    }

    #[test]
    fn attention_convexity_and_uniform_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut p = params(5);
        let f: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let b = bind(&mut tape, &p, false);
        let frames = tape.constant(Tensor::new(vec![5, 256], f.repeat(5)).unwrap());
        let h = attention_pool(&mut tape, &b, frames, None).unwrap();
        for (a, e) in tape.value(h).data().iter().zip(&f) {
            assert!((a - e).abs() < 1e-12);
        }
        *p.get_mut("enc.att.v").unwrap() = Tensor::zeros(&[256, 1]);
        let rows: Vec<f64> = (0..4 * 256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let b = bind(&mut tape, &p, false);
        let frames = tape.constant(Tensor::new(vec![4, 256], rows.clone()).unwrap());
        let mask = [true, true, false, true];
        let h = attention_pool(&mut tape, &b, frames, Some(&mask)).unwrap();
        for j in 0..256 {
            let m = (rows[j] + rows[256 + j] + rows[3 * 256 + j]) / 3.0;
            assert!((tape.value(h).data()[j] - m).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut p = ParamSet::new();
        p.extend(&params(6).with_prefix("enc.att."));
        p.insert("frames", Tensor::new(vec![4, 256], (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
        let proj: Vec<f64> = (0..256).map(|_| rng.random_range(-1.0..1.0)).collect();
        let run = |params: &ParamSet| -> (f64, ParamSet) {
            let mut tape = Tape::new();
            let b = bind(&mut tape, params, true);
            let h = attention_pool(&mut tape, &b, b.var("frames").unwrap(), None).unwrap();
            let w = tape.constant(Tensor::new(vec![1, 256], proj.clone()).unwrap());
            let y = tape.mul(h, w).unwrap();
            let loss = tape.sum(y).unwrap();
            tape.backward(loss).unwrap();
            (tape.value(loss).item(), b.grads(&tape))
        };
        let (_, analytic) = run(&p);
        let report = finite_diff_check(
            |q| Ok(Probe::smooth(run(q).0)),
            &p,
            &analytic,
            FdConfig::default(),
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn classifier_examples() {
        let mut p = params(7);
        *p.get_mut("cls.w").unwrap() = Tensor::zeros(&[256, 4]);
        let mut tape = Tape::new();
        let b = bind(&mut tape, &p, false);
        let h = tape.constant(Tensor::new(vec![1, 256], vec![0.3; 256]).unwrap());
        let logits = classify(&mut tape, &b, h).unwrap();
        assert_eq!(tape.value(logits).data(), &[0.0; 4]);
        let probs = tape.softmax(logits, 1).unwrap();
        assert!(tape.value(probs).data().iter().all(|v| (v - 0.25).abs() < 1e-15));
        for label in 0..4 {
            let ce = tape.cross_entropy(logits, label).unwrap();
            assert!((tape.value(ce).item() - 4f64.ln()).abs() < 1e-12);
        }
        let xs = [0.1, 2.0, -1.0, 1.9];
        let shifted: Vec<f64> = xs.iter().map(|v| v + 17.0).collect();
        assert_eq!(argmax(&xs), argmax(&shifted));
    }

    #[test]
    fn encoding_is_deterministic_and_reference_is_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = params(8);
        let padded = pad_or_truncate(&random_spec(&mut rng, 64)).unwrap();
        let norm = InputNorm::identity(NUM_MEL);
        let a = reference_representation(&p, &norm, &padded).unwrap();
        let b = reference_representation(&p, &norm, &padded).unwrap();
        assert_eq!(a, b);
        assert!(reference_representation(&ParamSet::new(), &norm, &padded).is_err());
    }

    #[test]
    fn norm_fit_and_round_trip() {
        let a = Spectrogram::new(2, 80, [vec![1.0; 80], vec![3.0; 80]].concat()).unwrap();
        let n = InputNorm::fit([&a]).unwrap();
        assert!(n.mean.iter().all(|m| (m - 2.0).abs() < 1e-12));
        assert!(n.std.iter().all(|s| (s - 1.0).abs() < 1e-12));
        assert_eq!(InputNorm::from_params(&n.to_params()).unwrap(), n);
    }
}
