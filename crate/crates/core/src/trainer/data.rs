use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::corpus::{read_wav, Emotion, Manifest, NoiseSet, UtteranceRecord, Waveform};
use crate::dsp::{lmfb, mix_at_snr};
use crate::enhance::{Enhancer, SideInfo};
use crate::error::Result;
use crate::model::ModelInputs;
use crate::ser::{pad_or_truncate_to, Padded};

/// A manifest utterance with its decoded audio.
#[derive(Clone, Debug)]
pub struct LoadedUtterance {
    pub id: String,
    pub emotion: Emotion,
    pub wave: Waveform,
}

pub fn load_utterances(manifest: &Manifest, records: &[&UtteranceRecord]) -> Result<Vec<LoadedUtterance>> {
    records
        .iter()
        .map(|r| {
            Ok(LoadedUtterance {
                id: r.id.clone(),
                emotion: r.emotion,
                wave: read_wav(&manifest.resolve(&r.path))?,
            })
        })
        .collect()
}

pub fn load_noises(manifest: &Manifest, set: NoiseSet) -> Result<Vec<Waveform>> {
    manifest
        .noises_in(set)
        .iter()
        .map(|n| read_wav(&manifest.resolve(&n.path)))
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct NoiseSpec<'a> {
    pub noise: &'a Waveform,
    pub snr_db: f64,
}

/// Mixture and the scaled noise actually added (none for clean examples).
pub fn mix(clean: &Waveform, noise: Option<NoiseSpec<'_>>, rng: &mut impl Rng) -> Result<(Waveform, Option<Waveform>)> {
    match noise {
        None => Ok((clean.clone(), None)),
        Some(n) => {
            let m = mix_at_snr(clean, n.noise, n.snr_db, rng)?;
            Ok((m.mixture, Some(m.scaled_noise)))
        }
    }
}

/// What inference sees: features of the noisy input and, if an enhancer is
/// in play, of its enhanced version.
#[derive(Clone, Debug)]
pub struct InferenceView {
    pub x: Padded,
    pub x_e: Option<Padded>,
}

impl InferenceView {
    pub fn inputs(&self) -> ModelInputs<'_> {
        ModelInputs {
            x: &self.x,
            x_e: self.x_e.as_ref(),
        }
    }
}

/// Build the inference view of `clean` corrupted by `noise`. The clean
/// waveform is only handed to the enhancer as side information.
pub fn make_inference_view(
    clean: &Waveform,
    noise: Option<NoiseSpec<'_>>,
    enhancer: Option<&dyn Enhancer>,
    rng: &mut impl Rng,
    max_frames: usize,
) -> Result<InferenceView> {
    let (mixture, _) = mix(clean, noise, rng)?;
    view_of_mixture(clean, &mixture, enhancer, max_frames)
}

fn view_of_mixture(
    clean: &Waveform,
    mixture: &Waveform,
    enhancer: Option<&dyn Enhancer>,
    max_frames: usize,
) -> Result<InferenceView> {
    let x = pad_or_truncate_to(&lmfb(mixture)?, max_frames)?;
    let x_e = match enhancer {
        Some(e) => {
            let enhanced = e.enhance(mixture, &SideInfo::with_clean(clean))?;
            Some(pad_or_truncate_to(&lmfb(&enhanced)?, max_frames)?)
        }
        None => None,
    };
    Ok(InferenceView { x, x_e })
}

/// One training example: the inference view plus the clean target, whose
/// reads are counted so tests can confirm inference never touches it.
#[derive(Debug)]
pub struct TrainingExample {
    pub id: String,
    pub label: usize,
    pub snr: Option<f64>,
    view: InferenceView,
    x_s: Padded,
    target_reads: AtomicUsize,
}

impl TrainingExample {
    pub fn new(id: String, label: usize, snr: Option<f64>, view: InferenceView, x_s: Padded) -> Self {
        Self {
            id,
            label,
            snr,
            view,
            x_s,
            target_reads: AtomicUsize::new(0),
        }
    }

    pub fn view(&self) -> &InferenceView {
        &self.view
    }

    pub fn inputs(&self) -> ModelInputs<'_> {
        self.view.inputs()
    }

    pub fn clean_target(&self) -> &Padded {
        self.target_reads.fetch_add(1, Ordering::Relaxed);
        &self.x_s
    }

    pub fn target_reads(&self) -> usize {
        self.target_reads.load(Ordering::Relaxed)
    }
}

/// Features of the mixture, its enhanced version and the clean target.
/// `x_s` may be supplied from a cache; it must come from `clean`.
pub fn make_training_view(
    utt: &LoadedUtterance,
    noise: Option<NoiseSpec<'_>>,
    enhancer: Option<&dyn Enhancer>,
    rng: &mut impl Rng,
    max_frames: usize,
    cached_target: Option<&Padded>,
) -> Result<TrainingExample> {
    let (mixture, _) = mix(&utt.wave, noise, rng)?;
    let view = view_of_mixture(&utt.wave, &mixture, enhancer, max_frames)?;
    let x_s = match cached_target {
        Some(t) => t.clone(),
        None => pad_or_truncate_to(&lmfb(&utt.wave)?, max_frames)?,
    };
    Ok(TrainingExample::new(
        utt.id.clone(),
        utt.emotion.index(),
        noise.map(|n| n.snr_db),
        view,
        x_s,
    ))
}
