//! Frozen speech-enhancement front ends behind a waveform-to-waveform
//! interface.

use std::fmt::Debug;

use rustfft::num_complex::Complex64;

use crate::corpus::Waveform;
use crate::dsp::{istft, stft, ComplexSpectrogram, FrameConfig};
use crate::error::{invalid, Error, Result};
use crate::util::stable_hash;

/// Extra inputs an enhancer may read. Only the oracle enhancer uses the clean
/// reference; nothing outside an enhancer ever sees it through this path.
#[derive(Clone, Copy, Debug, Default)]
pub struct SideInfo<'a> {
    pub clean_reference: Option<&'a Waveform>,
}

impl<'a> SideInfo<'a> {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn with_clean(clean: &'a Waveform) -> Self {
        Self {
            clean_reference: Some(clean),
        }
    }
}

pub trait Enhancer: Debug + Send + Sync {
    fn name(&self) -> &'static str;

    /// Same length as `noisy`, deterministic.
    fn enhance(&self, noisy: &Waveform, side: &SideInfo<'_>) -> Result<Waveform>;

    /// Fingerprint of the frozen parameters.
    fn checksum(&self) -> u64;
}

pub const ENHANCER_NAMES: [&str; 3] = ["identity", "specsub", "oracle_wiener"];

pub fn enhancer_by_name(name: &str) -> Result<Box<dyn Enhancer>> {
    match name {
        "identity" => Ok(Box::new(Identity)),
        "specsub" => Ok(Box::new(SpectralSubtraction::default())),
        "oracle_wiener" => Ok(Box::new(OracleWiener::default())),
        other => Err(Error::Config(format!(
            "unknown enhancer '{other}' (expected one of {})",
            ENHANCER_NAMES.join(", ")
        ))),
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl Enhancer for Identity {
    fn name(&self) -> &'static str {
        "identity"
    }

    fn enhance(&self, noisy: &Waveform, _side: &SideInfo<'_>) -> Result<Waveform> {
        Ok(noisy.clone())
    }

    fn checksum(&self) -> u64 {
        stable_hash(["identity"])
    }
}

/// Zero-pad by one frame on both sides so every original sample is covered by
/// fully overlapping frames, then take the STFT.
fn padded_stft(w: &Waveform, cfg: &FrameConfig) -> Result<ComplexSpectrogram> {
    let mut x = vec![0.0; cfg.frame_len];
    x.extend_from_slice(w.samples());
    x.extend(std::iter::repeat_n(0.0, cfg.frame_len));
    stft(&Waveform::new(x)?, cfg)
}

fn unpad(spec: &ComplexSpectrogram, cfg: &FrameConfig, len: usize) -> Result<Waveform> {
    let y = istft(spec, cfg)?;
    Waveform::new(y.samples()[cfg.frame_len..cfg.frame_len + len].to_vec())
}

fn check_frames(noisy: &Waveform, cfg: &FrameConfig) -> Result<()> {
    cfg.num_frames(noisy.len()).map(|_| ())
}

/// Magnitude spectral subtraction with a per-bin noise floor taken as a low
/// percentile of the noisy magnitudes over time.
#[derive(Clone, Debug)]
pub struct SpectralSubtraction {
    pub frame: FrameConfig,
    pub percentile: f64,
    pub floor: f64,
}

impl Default for SpectralSubtraction {
    fn default() -> Self {
        Self {
            frame: FrameConfig::default(),
            percentile: 0.1,
            floor: 0.01,
        }
    }
}

/// Linear-interpolated percentile of an unsorted sample.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

impl SpectralSubtraction {
    /// Per-bin noise magnitude estimate from the unpadded signal.
    pub fn noise_estimate(&self, noisy: &Waveform) -> Result<Vec<f64>> {
        let spec = stft(noisy, &self.frame)?;
        let mut col = vec![0.0; spec.frames()];
        Ok((0..spec.bins())
            .map(|k| {
                for (t, v) in col.iter_mut().enumerate() {
                    *v = spec.frame(t)[k].norm();
                }
                percentile(&mut col, self.percentile)
            })
            .collect())
    }
}

impl SpectralSubtraction {
    /// Per-TF gains |Ŝ|/|Y| on the padded STFT grid. Where |Y| = 0 the
    /// gain is 0 and `enhance` substitutes the floor magnitude directly.
    pub fn gains(&self, noisy: &Waveform) -> Result<Vec<f64>> {
        check_frames(noisy, &self.frame)?;
        let noise = self.noise_estimate(noisy)?;
        let spec = padded_stft(noisy, &self.frame)?;
        let mut out = Vec::with_capacity(spec.data().len());
        for t in 0..spec.frames() {
            for (y, n) in spec.frame(t).iter().zip(&noise) {
                let mag = y.norm();
                let target = (mag - n).max(self.floor * n);
                out.push(if mag > 0.0 { target / mag } else { 0.0 });
            }
        }
        Ok(out)
    }
}

impl Enhancer for SpectralSubtraction {
    fn name(&self) -> &'static str {
        "specsub"
    }

    fn enhance(&self, noisy: &Waveform, _side: &SideInfo<'_>) -> Result<Waveform> {
        check_frames(noisy, &self.frame)?;
        let noise = self.noise_estimate(noisy)?;
        let mut spec = padded_stft(noisy, &self.frame)?;
        for t in 0..spec.frames() {
            for (y, n) in spec.frame_mut(t).iter_mut().zip(&noise) {
                let mag = y.norm();
                let target = (mag - n).max(self.floor * n);
                *y = if mag > 0.0 {
                    *y * (target / mag)
                } else {
                    Complex64::new(target, 0.0)
                };
            }
        }
        unpad(&spec, &self.frame, noisy.len())
    }

    fn checksum(&self) -> u64 {
        stable_hash([
            "specsub".as_bytes(),
            &self.percentile.to_le_bytes(),
            &self.floor.to_le_bytes(),
            &(self.frame.frame_len as u64).to_le_bytes(),
            &(self.frame.hop as u64).to_le_bytes(),
            &(self.frame.fft_size as u64).to_le_bytes(),
        ])
    }
}

/// Filter a waveform with a fixed per-TF gain map on the padded STFT grid.
/// Applying one enhancer's gains to the speech and noise components
/// separately measures its noise reduction without the cross terms.
pub fn apply_gains(w: &Waveform, gains: &[f64], cfg: &FrameConfig) -> Result<Waveform> {
    let mut spec = padded_stft(w, cfg)?;
    if spec.data().len() != gains.len() {
        return Err(invalid(format!(
            "gain map has {} entries, spectrogram {}",
            gains.len(),
            spec.data().len()
        )));
    }
    for (y, g) in spec.data_mut().iter_mut().zip(gains) {
        *y *= *g;
    }
    unpad(&spec, cfg, w.len())
}

/// Ideal Wiener mask computed from the true clean signal.
#[derive(Clone, Debug, Default)]
pub struct OracleWiener {
    pub frame: FrameConfig,
}

impl Enhancer for OracleWiener {
    fn name(&self) -> &'static str {
        "oracle_wiener"
    }

    fn enhance(&self, noisy: &Waveform, side: &SideInfo<'_>) -> Result<Waveform> {
        let clean = side
            .clean_reference
            .ok_or_else(|| invalid("oracle_wiener needs the clean reference"))?;
        if clean.len() != noisy.len() {
            return Err(invalid(format!(
                "oracle_wiener length mismatch: noisy {} vs clean {}",
                noisy.len(),
                clean.len()
            )));
        }
        check_frames(noisy, &self.frame)?;
        let residual = Waveform::new(
            noisy
                .samples()
                .iter()
                .zip(clean.samples())
                .map(|(y, s)| y - s)
                .collect(),
        )?;
        let s = padded_stft(clean, &self.frame)?;
        let n = padded_stft(&residual, &self.frame)?;
        let mut spec = padded_stft(noisy, &self.frame)?;
        for ((y, s), n) in spec.data_mut().iter_mut().zip(s.data()).zip(n.data()) {
            let (ps, pn) = (s.norm_sqr(), n.norm_sqr());
            let denom = ps + pn;
            let gain = if denom > 0.0 { ps / denom } else { 0.0 };
            *y *= gain;
        }
        unpad(&spec, &self.frame, noisy.len())
    }

    fn checksum(&self) -> u64 {
        stable_hash([
            "oracle_wiener".as_bytes(),
            &(self.frame.frame_len as u64).to_le_bytes(),
            &(self.frame.hop as u64).to_le_bytes(),
            &(self.frame.fft_size as u64).to_le_bytes(),
        ])
    }
}
