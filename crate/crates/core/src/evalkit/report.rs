use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{NoiseSet, Waveform};
use crate::enhance::{enhancer_by_name, Enhancer};
use crate::error::{invalid, Error, Result};
use crate::model::{Model, ModelKind};
use crate::trainer::{make_inference_view, rng_for, InferenceView, LoadedUtterance, NoiseSpec};

use super::ConfusionMatrix;
use rand::Rng;

/// Clean, or one noise family at one SNR.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub noise_set: Option<NoiseSet>,
    pub snr: Option<f64>,
}

impl Condition {
    pub fn clean() -> Self {
        Self {
            noise_set: None,
            snr: None,
        }
    }

    pub fn noisy(set: NoiseSet, snr: f64) -> Self {
        Self {
            noise_set: Some(set),
            snr: Some(snr),
        }
    }

    pub fn label(&self) -> String {
        match (self.noise_set, self.snr) {
            (Some(set), Some(snr)) => format!("{}_{snr}", set.name()),
            _ => "clean".into(),
        }
    }
}

/// The clean condition followed by every (set, SNR) pair.
pub fn conditions(sets: &[NoiseSet], snrs: &[f64]) -> Vec<Condition> {
    let mut out = vec![Condition::clean()];
    for &set in sets {
        for &snr in snrs {
            out.push(Condition::noisy(set, snr));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub enhancer: String,
    pub conditions: Vec<Condition>,
    /// Independent noise draws per utterance and noisy condition.
    pub draws: usize,
    /// Seed of the noise assignment; shared by every evaluated model.
    pub seed: u64,
    pub max_frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub condition: String,
    pub noise_set: Option<NoiseSet>,
    pub snr: Option<f64>,
    pub uar: f64,
    pub war: f64,
    pub mean_c: Option<f64>,
    pub examples: usize,
    pub confusion: ConfusionMatrix,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub clean_uar: f64,
    pub clean_war: f64,
    pub matched_uar: Option<f64>,
    pub matched_war: Option<f64>,
    pub unmatched_uar: Option<f64>,
    pub unmatched_war: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub kind: ModelKind,
    /// Number of (fold, seed) runs averaged into this report.
    pub runs: usize,
    pub conditions: Vec<ConditionResult>,
    pub summary: Summary,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = xs.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn summarise(conds: &[ConditionResult]) -> Summary {
    let set_mean = |set: NoiseSet, f: fn(&ConditionResult) -> f64| {
        mean(conds.iter().filter(|c| c.noise_set == Some(set)).map(f))
    };
    let clean = conds.iter().find(|c| c.noise_set.is_none());
    Summary {
        clean_uar: clean.map_or(f64::NAN, |c| c.uar),
        clean_war: clean.map_or(f64::NAN, |c| c.war),
        matched_uar: set_mean(NoiseSet::Matched, |c| c.uar),
        matched_war: set_mean(NoiseSet::Matched, |c| c.war),
        unmatched_uar: set_mean(NoiseSet::Unmatched, |c| c.uar),
        unmatched_war: set_mean(NoiseSet::Unmatched, |c| c.war),
    }
}

impl EvalReport {
    pub fn condition(&self, label: &str) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| c.condition == label)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Mean of per-condition UAR, WAR and mean c over several reports of the
/// same kind; confusion matrices are summed.
pub fn average_reports(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports.first().ok_or_else(|| invalid("no reports to average"))?;
    let mut conditions = Vec::new();
    for c in &first.conditions {
        let same: Vec<&ConditionResult> = reports
            .iter()
            .map(|r| {
                r.condition(&c.condition)
                    .ok_or_else(|| invalid(format!("condition {} missing from a report", c.condition)))
            })
            .collect::<Result<_>>()?;
        let mut confusion = ConfusionMatrix::new();
        same.iter().for_each(|s| confusion.merge(&s.confusion));
        let n = same.len() as f64;
        conditions.push(ConditionResult {
            condition: c.condition.clone(),
            noise_set: c.noise_set,
            snr: c.snr,
            uar: same.iter().map(|s| s.uar).sum::<f64>() / n,
            war: same.iter().map(|s| s.war).sum::<f64>() / n,
            mean_c: if same.iter().all(|s| s.mean_c.is_some()) {
                mean(same.iter().filter_map(|s| s.mean_c))
            } else {
                None
            },
            examples: same.iter().map(|s| s.examples).sum(),
            confusion,
        });
    }
    Ok(EvalReport {
        kind: first.kind,
        runs: reports.iter().map(|r| r.runs).sum(),
        summary: summarise(&conditions),
        conditions,
    })
}

/// The noisy recording and crop/assignment generator for one evaluation
/// item; depends only on the utterance, condition, draw and seed.
pub(crate) fn eval_view_for(
    u: &LoadedUtterance,
    cond: &Condition,
    draw: usize,
    settings: &EvalSettings,
    matched: &[Waveform],
    unmatched: &[Waveform],
    enhancer: Option<&dyn Enhancer>,
) -> Result<InferenceView> {
    let (set, snr) = match (cond.noise_set, cond.snr) {
        (Some(set), Some(snr)) => (set, snr),
        _ => return make_inference_view(&u.wave, None, enhancer, &mut rng_for(&[b"clean"]), settings.max_frames),
    };
    let bank = match set {
        NoiseSet::Matched => matched,
        NoiseSet::Unmatched => unmatched,
    };
    if bank.is_empty() {
        return Err(Error::Manifest(format!("condition {} needs {} noise recordings", cond.label(), set.name())));
    }
    let mut rng = rng_for(&[
        b"eval",
        u.id.as_bytes(),
        set.name().as_bytes(),
        &snr.to_le_bytes(),
        &(draw as u64).to_le_bytes(),
        &settings.seed.to_le_bytes(),
    ]);
    let noise = &bank[rng.random_range(0..bank.len())];
    make_inference_view(&u.wave, Some(NoiseSpec { noise, snr_db: snr }), enhancer, &mut rng, settings.max_frames)
}

/// Evaluate several models on identical inputs: for every utterance and
/// condition the noisy input and its enhancement are prepared once and fed
/// to each model through the inference path only.
pub fn evaluate_models(
    models: &[&Model],
    utts: &[LoadedUtterance],
    matched: &[Waveform],
    unmatched: &[Waveform],
    settings: &EvalSettings,
) -> Result<Vec<EvalReport>> {
    if utts.is_empty() {
        return Err(invalid("no utterances to evaluate"));
    }
    let enhancer = if models.iter().any(|m| m.kind.uses_enhancer()) {
        Some(enhancer_by_name(&settings.enhancer)?)
    } else {
        None
    };
    let mut results: Vec<Vec<ConditionResult>> = vec![Vec::new(); models.len()];
    for cond in &settings.conditions {
        let draws = if cond.noise_set.is_some() { settings.draws.max(1) } else { 1 };
        let mut cms = vec![ConfusionMatrix::new(); models.len()];
        let mut c_sum = vec![(0.0, 0usize); models.len()];
        for u in utts {
            for draw in 0..draws {
                let view = eval_view_for(u, cond, draw, settings, matched, unmatched, enhancer.as_deref())?;
                for (i, m) in models.iter().enumerate() {
                    let p = m.predict(&view.inputs())?;
                    cms[i].add(u.emotion.index(), p.label)?;
                    if let Some(c) = p.c {
                        c_sum[i].0 += c;
                        c_sum[i].1 += 1;
                    }
                }
            }
        }
        for i in 0..models.len() {
            results[i].push(ConditionResult {
                condition: cond.label(),
                noise_set: cond.noise_set,
                snr: cond.snr,
                uar: cms[i].uar()?,
                war: cms[i].war()?,
                mean_c: (c_sum[i].1 > 0).then(|| c_sum[i].0 / c_sum[i].1 as f64),
                examples: cms[i].total() as usize,
                confusion: cms[i].clone(),
            });
        }
    }
    Ok(models
        .iter()
        .zip(results)
        .map(|(m, conds)| EvalReport {
            kind: m.kind,
            runs: 1,
            summary: summarise(&conds),
            conditions: conds,
        })
        .collect())
}
