//! Parametric stand-ins for emotional speech and environmental noise.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::waveform::{Waveform, SAMPLE_RATE};
use super::Emotion;
use crate::error::{invalid, Error, Result};
use crate::util::stable_hash;

/// Samples of silence at the start of every synthetic utterance (0.25 s).
pub const LEAD_IN_SAMPLES: usize = 4000;
pub const UTTERANCE_DURATION_RANGE: (f64, f64) = (1.0, 3.0);
pub const NOISE_DURATION_RANGE: (f64, f64) = (1.0, 6.0);
const MAX_HARMONIC_HZ: f64 = 7500.0;
const NOISE_PEAK: f64 = 0.8;

struct Voice {
    f0: f64,
    /// Hz per second
    slope: f64,
    am_rate: f64,
    am_depth: f64,
    /// harmonic k has amplitude k^-tilt
    tilt: f64,
}

fn voice(emotion: Emotion) -> Voice {
    match emotion {
        Emotion::Angry => Voice { f0: 300.0, slope: 15.0, am_rate: 7.0, am_depth: 0.5, tilt: 0.7 },
        Emotion::Happy => Voice { f0: 240.0, slope: 25.0, am_rate: 5.0, am_depth: 0.4, tilt: 1.0 },
        Emotion::Neutral => Voice { f0: 120.0, slope: 0.0, am_rate: 3.0, am_depth: 0.2, tilt: 1.3 },
        Emotion::Sad => Voice { f0: 180.0, slope: -15.0, am_rate: 2.0, am_depth: 0.3, tilt: 1.6 },
    }
}

/// Speaker-specific f0 offset in [-15, 15] Hz.
pub fn speaker_f0_offset(speaker: &str) -> f64 {
    let h = stable_hash(["speaker-f0", speaker]);
    (h % 3001) as f64 / 100.0 - 15.0
}

fn speaker_tilt_offset(speaker: &str) -> f64 {
    let h = stable_hash(["speaker-tilt", speaker]);
    (h % 301) as f64 / 1000.0 - 0.15
}

fn check_duration(what: &str, d: f64, (lo, hi): (f64, f64)) -> Result<usize> {
    if !(d.is_finite() && d >= lo && d <= hi) {
        return Err(invalid(format!("{what} duration {d} s outside [{lo}, {hi}]")));
    }
    Ok((d * SAMPLE_RATE as f64).round() as usize)
}

/// A 0.25 s silent lead-in followed by an amplitude-modulated harmonic tone
/// whose pitch, pitch slope, modulation rate and spectral tilt depend on the
/// emotion class, shifted by a per-speaker f0 offset. Peak amplitude ≤ 0.5.
pub fn synth_utterance(emotion: Emotion, speaker: &str, duration_s: f64, seed: u64) -> Result<Waveform> {
    let n = check_duration("utterance", duration_s, UTTERANCE_DURATION_RANGE)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash([
        "utterance".as_bytes(),
        emotion.name().as_bytes(),
        speaker.as_bytes(),
        &duration_s.to_bits().to_le_bytes(),
        &seed.to_le_bytes(),
    ]));
    let v = voice(emotion);
    let sr = SAMPLE_RATE as f64;
    let f0_start = v.f0 + speaker_f0_offset(speaker) + rng.random_range(-4.0..4.0);
    let slope = v.slope * rng.random_range(0.8..1.2);
    let am_rate = v.am_rate * rng.random_range(0.9..1.1);
    let am_phase = rng.random_range(0.0..2.0 * PI);
    let tilt = (v.tilt + speaker_tilt_offset(speaker)).max(0.3);
    let peak_target = 0.5 * rng.random_range(0.6..1.0);

    let voiced = n - LEAD_IN_SAMPLES;
    let t_end = voiced as f64 / sr;
    let f0_max = f0_start.max(f0_start + slope * t_end);
    let harmonics = ((MAX_HARMONIC_HZ / f0_max).floor() as usize).max(1);
    let amps: Vec<f64> = (1..=harmonics).map(|k| (k as f64).powf(-tilt)).collect();
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let ramp = (0.01 * sr) as usize;

    let mut samples = vec![0.0; n];
    let mut phase = 0.0;
    for i in 0..voiced {
        let t = i as f64 / sr;
        let f0 = f0_start + slope * t;
        phase += 2.0 * PI * f0 / sr;
        let mut s = 0.0;
        for (k, (a, p)) in amps.iter().zip(&phases).enumerate() {
            s += a * ((k + 1) as f64 * phase + p).sin();
        }
        let am = (1.0 - v.am_depth) + v.am_depth * 0.5 * (1.0 + (2.0 * PI * am_rate * t + am_phase).sin());
        let edge = (i.min(voiced - 1 - i) as f64 / ramp as f64).min(1.0);
        samples[LEAD_IN_SAMPLES + i] = s * am * edge;
    }
    normalize_peak(&mut samples, peak_target);
    Waveform::new(samples)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    White,
    Pink,
    TonalBabble,
    Impulsive,
}

impl NoiseKind {
    pub const ALL: [NoiseKind; 4] = [NoiseKind::White, NoiseKind::Pink, NoiseKind::TonalBabble, NoiseKind::Impulsive];

    pub fn name(self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Pink => "pink",
            NoiseKind::TonalBabble => "tonal_babble",
            NoiseKind::Impulsive => "impulsive",
        }
    }
}

impl fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NoiseKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| invalid(format!("unknown noise kind '{s}'")))
    }
}

pub fn synth_noise(kind: NoiseKind, duration_s: f64, seed: u64) -> Result<Waveform> {
    let n = check_duration("noise", duration_s, NOISE_DURATION_RANGE)?;
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash([
        "noise".as_bytes(),
        kind.name().as_bytes(),
        &duration_s.to_bits().to_le_bytes(),
        &seed.to_le_bytes(),
    ]));
    let mut samples = match kind {
        NoiseKind::White => (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect(),
        NoiseKind::Pink => pink(n, &mut rng),
        NoiseKind::TonalBabble => babble(n, &mut rng),
        NoiseKind::Impulsive => impulsive(n, &mut rng),
    };
    normalize_peak(&mut samples, NOISE_PEAK);
    Waveform::new(samples)
}

fn normalize_peak(samples: &mut [f64], target: f64) {
    let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        let g = target / peak;
        samples.iter_mut().for_each(|v| *v *= g);
    }
}

/// Paul Kellet's refined pinking filter over Gaussian white noise.
fn pink(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut b = [0.0f64; 7];
    let mut out = Vec::with_capacity(n);
    // let the slow poles settle before recording
    for i in 0..n + 4096 {
        let w: f64 = rng.sample(StandardNormal);
        b[0] = 0.99886 * b[0] + w * 0.0555179;
        b[1] = 0.99332 * b[1] + w * 0.0750759;
        b[2] = 0.96900 * b[2] + w * 0.1538520;
        b[3] = 0.86650 * b[3] + w * 0.3104856;
        b[4] = 0.55000 * b[4] + w * 0.5329522;
        b[5] = -0.7616 * b[5] - w * 0.0168980;
        let y = b[..6].iter().sum::<f64>() + b[6] + w * 0.5362;
        b[6] = w * 0.115926;
        if i >= 4096 {
            out.push(y);
        }
    }
    out
}

/// Several gated harmonic "talkers" with slow vibrato over a faint floor.
fn babble(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let mut out: Vec<f64> = (0..n).map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal)).collect();
    for _ in 0..6 {
        let f0: f64 = rng.random_range(90.0..260.0);
        let vib_rate: f64 = rng.random_range(0.5..1.0);
        let vib_depth: f64 = rng.random_range(0.02..0.05);
        let gate_rate: f64 = rng.random_range(3.0..6.0);
        let gate_phase: f64 = rng.random_range(0.0..2.0 * PI);
        let level: f64 = rng.random_range(0.5..1.0);
        let harmonics = (4000.0 / (f0 * (1.0 + vib_depth))).floor().max(1.0) as usize;
        let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
        let mut phase = 0.0;
        for (i, o) in out.iter_mut().enumerate() {
            let t = i as f64 / sr;
            let f = f0 * (1.0 + vib_depth * (2.0 * PI * vib_rate * t).sin());
            phase += 2.0 * PI * f / sr;
            let g = 0.5 * (1.0 + (2.0 * PI * gate_rate * t + gate_phase).sin());
            let mut s = 0.0;
            for (k, p) in phases.iter().enumerate() {
                s += ((k + 1) as f64 * phase + p).sin() / (k + 1) as f64;
            }
            *o += level * g * g * s;
        }
    }
    out
}

/// Sparse decaying bursts (clicks, knocks) over a low background.
fn impulsive(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let sr = SAMPLE_RATE as f64;
    let mut out: Vec<f64> = (0..n).map(|_| 0.02 * rng.sample::<f64, _>(StandardNormal)).collect();
    let rate = 5.0;
    let mut t = 0.0;
    loop {
        let u: f64 = rng.random_range(f64::EPSILON..1.0);
        t += -u.ln() / rate;
        let start = (t * sr) as usize;
        if start >= n {
            break;
        }
        let len = (rng.random_range(0.002..0.02) * sr) as usize;
        let amp: f64 = rng.random_range(0.3..1.0);
        let tau = len as f64 / 4.0;
        for j in 0..len.min(n - start) {
            let w: f64 = rng.sample(StandardNormal);
            out[start + j] += amp * (-(j as f64) / tau).exp() * w;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    fn spectrum(w: &Waveform) -> Vec<f64> {
        let n = w.len().next_power_of_two();
        let mut buf: Vec<Complex<f64>> = w.samples().iter().map(|&v| Complex::new(v, 0.0)).collect();
        buf.resize(n, Complex::new(0.0, 0.0));
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        buf[..n / 2].iter().map(|c| c.norm_sqr()).collect()
    }

    fn dominant_hz(w: &Waveform) -> f64 {
        let s = spectrum(w);
        let n = s.len() * 2;
        let (k, _) = s.iter().enumerate().skip(1).fold((0, 0.0), |b, (k, &v)| if v > b.1 { (k, v) } else { b });
        k as f64 * SAMPLE_RATE as f64 / n as f64
    }

    fn kurtosis(w: &Waveform) -> f64 {
        let x = w.samples();
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let m2 = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n;
        let m4 = x.iter().map(|v| (v - m).powi(4)).sum::<f64>() / n;
        m4 / (m2 * m2)
    }

    #[test]
    fn utterance_is_deterministic_and_bounded() {
        let a = synth_utterance(Emotion::Angry, "spk0", 2.0, 7).unwrap();
        let b = synth_utterance(Emotion::Angry, "spk0", 2.0, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.peak() <= 0.5);
        assert_eq!(a.len(), 32000);
        let c = synth_utterance(Emotion::Angry, "spk0", 2.0, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn lead_in_is_silent() {
        for e in Emotion::ALL {
            let w = synth_utterance(e, "ses3_spk1", 1.3, 2).unwrap();
            assert!(w.samples()[..LEAD_IN_SAMPLES].iter().all(|&v| v == 0.0));
            assert!(w.samples()[LEAD_IN_SAMPLES + 200] != 0.0);
        }
    }

    #[test]
    fn angry_and_sad_fundamentals_are_far_apart() {
        for seed in 0..5 {
            let a = synth_utterance(Emotion::Angry, "spk0", 2.0, seed).unwrap();
            let s = synth_utterance(Emotion::Sad, "spk0", 2.0, seed).unwrap();
            let (fa, fs) = (dominant_hz(&a), dominant_hz(&s));
            assert!((fa - fs).abs() >= 60.0, "angry {fa} sad {fs}");
        }
    }

    #[test]
    fn utterance_argument_errors() {
        assert!(synth_utterance(Emotion::Sad, "x", 0.5, 0).is_err());
        assert!(synth_utterance(Emotion::Sad, "x", 3.5, 0).is_err());
        assert!("furious".parse::<Emotion>().is_err());
    }

    #[test]
    fn noise_is_deterministic_and_bounded() {
        for kind in NoiseKind::ALL {
            let a = synth_noise(kind, 5.0, 1).unwrap();
            let b = synth_noise(kind, 5.0, 1).unwrap();
            assert_eq!(a, b, "{kind}");
            assert!(a.rms() > 0.0);
            assert!(a.peak() <= 0.9);
        }
        assert!("brown".parse::<NoiseKind>().is_err());
        assert!(synth_noise(NoiseKind::White, 7.0, 0).is_err());
    }

    #[test]
    fn pink_has_more_low_frequency_energy_than_white() {
        let frac = |w: &Waveform| {
            let s = spectrum(w);
            let cut = (1000.0 / 8000.0 * s.len() as f64) as usize;
            s[..cut].iter().sum::<f64>() / s.iter().sum::<f64>()
        };
        for seed in 0..3 {
            let white = synth_noise(NoiseKind::White, 5.0, seed).unwrap();
            let pink = synth_noise(NoiseKind::Pink, 5.0, seed).unwrap();
            assert!(frac(&pink) > frac(&white), "{} vs {}", frac(&pink), frac(&white));
        }
    }

    #[test]
    fn impulsive_is_heavier_tailed_than_white() {
        for seed in 0..3 {
            let white = synth_noise(NoiseKind::White, 5.0, seed).unwrap();
            let imp = synth_noise(NoiseKind::Impulsive, 5.0, seed).unwrap();
            assert!(kurtosis(&imp) > kurtosis(&white), "{} vs {}", kurtosis(&imp), kurtosis(&white));
        }
    }
}
