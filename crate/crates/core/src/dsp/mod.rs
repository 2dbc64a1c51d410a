//! Framing, STFT/iSTFT, log-mel filterbank features and SNR-exact mixing.

mod cache;
mod mel;
mod mix;

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub use cache::{read_features, write_features, CACHE_MAGIC, CACHE_VERSION};
pub use mel::{hz_to_mel, lmfb, lmfb_with, mel_filterbank, mel_to_hz, LOG_FLOOR, NUM_MEL};
pub use mix::{fit_noise, measure_snr, mix_at_snr, Mixture};

use crate::corpus::Waveform;
use crate::error::{invalid, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FrameConfig {
    pub frame_len: usize,
    pub hop: usize,
    pub fft_size: usize,
}

impl Default for FrameConfig {
    fn default() -> Self {
        Self {
            frame_len: 400,
            hop: 160,
            fft_size: 512,
        }
    }
}

impl FrameConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.frame_len || self.frame_len > self.fft_size {
            return Err(invalid(format!(
                "frame config needs 0 < hop <= frame_len <= fft_size, got {self:?}"
            )));
        }
        Ok(())
    }

    pub fn bins(&self) -> usize {
        self.fft_size / 2 + 1
    }

    pub fn num_frames(&self, len: usize) -> Result<usize> {
        if len < self.frame_len {
            return Err(invalid(format!(
                "waveform of {len} samples is shorter than one frame ({})",
                self.frame_len
            )));
        }
        Ok(1 + (len - self.frame_len) / self.hop)
    }

    /// Periodic Hann window of `frame_len` samples.
    pub fn window(&self) -> Vec<f64> {
        let n = self.frame_len as f64;
        (0..self.frame_len).map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n).cos()).collect()
    }
}

/// Complex STFT, `frames × bins` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrogram {
    frames: usize,
    bins: usize,
    signal_len: usize,
    data: Vec<Complex64>,
}

impl ComplexSpectrogram {
    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn bins(&self) -> usize {
        self.bins
    }

    /// Length of the waveform the spectrogram was computed from.
    pub fn signal_len(&self) -> usize {
        self.signal_len
    }

    pub fn frame(&self, t: usize) -> &[Complex64] {
        &self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [Complex64] {
        &mut self.data[t * self.bins..(t + 1) * self.bins]
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn magnitudes(&self) -> Vec<f64> {
        self.data.iter().map(|c| c.norm()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|c| c.re.is_finite() && c.im.is_finite())
    }
}

/// Real `T × F` feature matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    frames: usize,
    dims: usize,
    data: Vec<f64>,
}

impl Spectrogram {
    pub fn new(frames: usize, dims: usize, data: Vec<f64>) -> Result<Self> {
        if frames * dims != data.len() {
            return Err(invalid(format!(
                "spectrogram {frames}x{dims} needs {} values, got {}",
                frames * dims,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("spectrogram contains non-finite values"));
        }
        Ok(Self { frames, dims, data })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn dims(&self) -> usize {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * self.dims..(t + 1) * self.dims]
    }

    pub fn get(&self, t: usize, f: usize) -> f64 {
        self.data[t * self.dims + f]
    }

    /// Frequency column `f` as a time series.
    pub fn column(&self, f: usize) -> Vec<f64> {
        (0..self.frames).map(|t| self.get(t, f)).collect()
    }
}

thread_local! {
    static PLANNER: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

fn plan(size: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        let (planner, cache) = &mut *p;
        cache
            .entry((size, inverse))
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(size)
                } else {
                    planner.plan_fft_forward(size)
                }
            })
            .clone()
    })
}

pub fn stft(w: &Waveform, cfg: &FrameConfig) -> Result<ComplexSpectrogram> {
    cfg.validate()?;
    let frames = cfg.num_frames(w.len())?;
    let bins = cfg.bins();
    let window = cfg.window();
    let fft = plan(cfg.fft_size, false);
    let x = w.samples();
    let mut buf = vec![Complex64::new(0.0, 0.0); cfg.fft_size];
    let mut data = Vec::with_capacity(frames * bins);
    for t in 0..frames {
        let start = t * cfg.hop;
        buf.iter_mut().for_each(|c| *c = Complex64::new(0.0, 0.0));
        for (i, (b, wv)) in buf.iter_mut().zip(&window).enumerate() {
            *b = Complex64::new(x[start + i] * wv, 0.0);
        }
        fft.process(&mut buf);
        data.extend_from_slice(&buf[..bins]);
    }
    Ok(ComplexSpectrogram {
        frames,
        bins,
        signal_len: w.len(),
        data,
    })
}

/// Weighted overlap-add inverse normalised by the summed squared window.
/// Samples no frame covers with nonzero weight come back as zero.
pub fn istft(spec: &ComplexSpectrogram, cfg: &FrameConfig) -> Result<Waveform> {
    cfg.validate()?;
    if spec.bins != cfg.bins() {
        return Err(invalid(format!(
            "spectrogram has {} bins, frame config expects {}",
            spec.bins,
            cfg.bins()
        )));
    }
    if !spec.is_finite() {
        return Err(invalid("spectrogram contains non-finite values"));
    }
    let window = cfg.window();
    let ifft = plan(cfg.fft_size, true);
    let n = cfg.fft_size;
    let len = spec.signal_len.max((spec.frames.max(1) - 1) * cfg.hop + cfg.frame_len);
    let mut out = vec![0.0; len];
    let mut norm = vec![0.0; len];
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    for t in 0..spec.frames {
        let frame = spec.frame(t);
        buf[..spec.bins].copy_from_slice(frame);
        for k in spec.bins..n {
            buf[k] = frame[n - k].conj();
        }
        buf[0].im = 0.0;
        buf[n / 2].im = 0.0;
        ifft.process(&mut buf);
        let start = t * cfg.hop;
        for (i, wv) in window.iter().enumerate() {
            out[start + i] += buf[i].re / n as f64 * wv;
            norm[start + i] += wv * wv;
        }
    }
    for (o, d) in out.iter_mut().zip(&norm) {
        *o = if *d > 1e-10 { *o / d } else { 0.0 };
    }
    out.truncate(spec.signal_len);
    Waveform::new(out)
}
