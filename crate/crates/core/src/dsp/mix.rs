use rand::Rng;

use crate::corpus::Waveform;
use crate::error::{invalid, Result};

pub struct Mixture {
    pub mixture: Waveform,
    pub scaled_noise: Waveform,
}

/// Loop a short noise or take a random crop of a long one so it spans
/// exactly `len` samples.
pub fn fit_noise<R: Rng + ?Sized>(noise: &Waveform, len: usize, rng: &mut R) -> Waveform {
    let n = noise.samples();
    let out = if n.len() >= len {
        let offset = rng.random_range(0..=n.len() - len);
        n[offset..offset + len].to_vec()
    } else {
        (0..len).map(|i| n[i % n.len()]).collect()
    };
    Waveform::new(out).expect("crop of a valid waveform")
}

/// Mix at a whole-signal SNR of `snr_db`.
pub fn mix_at_snr<R: Rng + ?Sized>(speech: &Waveform, noise: &Waveform, snr_db: f64, rng: &mut R) -> Result<Mixture> {
    if !snr_db.is_finite() {
        return Err(invalid(format!("SNR must be finite, got {snr_db}")));
    }
    if speech.rms() == 0.0 {
        return Err(invalid("speech has zero RMS"));
    }
    if noise.rms() == 0.0 {
        return Err(invalid("noise has zero RMS"));
    }
    let fitted = fit_noise(noise, speech.len(), rng);
    if fitted.rms() == 0.0 {
        return Err(invalid("noise segment has zero RMS"));
    }
    let g = speech.rms() / fitted.rms() * 10f64.powf(-snr_db / 20.0);
    let scaled_noise = fitted.scaled(g);
    let mixture = Waveform::new(
        speech
            .samples()
            .iter()
            .zip(scaled_noise.samples())
            .map(|(s, n)| s + n)
            .collect(),
    )?;
    Ok(Mixture { mixture, scaled_noise })
}

pub fn measure_snr(speech: &Waveform, noise: &Waveform) -> Result<f64> {
    if speech.len() != noise.len() {
        return Err(invalid(format!(
            "length mismatch: speech {} vs noise {}",
            speech.len(),
            noise.len()
        )));
    }
    let pn = noise.energy();
    if pn == 0.0 {
        return Err(invalid("noise has zero power"));
    }
    Ok(10.0 * (speech.energy() / pn).log10())
}
