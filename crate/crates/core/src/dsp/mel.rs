use std::sync::OnceLock;

use super::{stft, FrameConfig, Spectrogram};
use crate::corpus::{Waveform, SAMPLE_RATE};
use crate::error::Result;

pub const NUM_MEL: usize = 80;
pub const LOG_FLOOR: f64 = 1e-10;

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters equally spaced on the HTK mel scale between 0 Hz and
/// Nyquist, evaluated at the FFT bin centre frequencies. Row-major
/// `num_filters × bins`.
pub fn mel_filterbank(num_filters: usize, cfg: &FrameConfig) -> Vec<f64> {
    let bins = cfg.bins();
    let nyquist = SAMPLE_RATE as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..num_filters + 2)
        .map(|i| mel_to_hz(top * i as f64 / (num_filters + 1) as f64))
        .collect();
    let mut fb = vec![0.0; num_filters * bins];
    for m in 0..num_filters {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..bins {
            let f = k as f64 * SAMPLE_RATE as f64 / cfg.fft_size as f64;
            let w = if f > lo && f <= mid {
                (f - lo) / (mid - lo)
            } else if f > mid && f < hi {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[m * bins + k] = w;
        }
    }
    fb
}

fn default_filterbank() -> &'static [f64] {
    static FB: OnceLock<Vec<f64>> = OnceLock::new();
    FB.get_or_init(|| mel_filterbank(NUM_MEL, &FrameConfig::default()))
}

/// 80-band log-mel filterbank energies with the default framing.
pub fn lmfb(w: &Waveform) -> Result<Spectrogram> {
    lmfb_with(w, &FrameConfig::default())
}

pub fn lmfb_with(w: &Waveform, cfg: &FrameConfig) -> Result<Spectrogram> {
    let spec = stft(w, cfg)?;
    let owned;
    let fb: &[f64] = if *cfg == FrameConfig::default() {
        default_filterbank()
    } else {
        owned = mel_filterbank(NUM_MEL, cfg);
        &owned
    };
    let bins = spec.bins();
    let mut data = Vec::with_capacity(spec.frames() * NUM_MEL);
    let mut power = vec![0.0; bins];
    for t in 0..spec.frames() {
        for (p, c) in power.iter_mut().zip(spec.frame(t)) {
            *p = c.norm_sqr();
        }
        for m in 0..NUM_MEL {
            let e: f64 = fb[m * bins..(m + 1) * bins].iter().zip(&power).map(|(a, b)| a * b).sum();
            data.push(e.max(LOG_FLOOR).ln());
        }
    }
    Spectrogram::new(spec.frames(), NUM_MEL, data)
}
