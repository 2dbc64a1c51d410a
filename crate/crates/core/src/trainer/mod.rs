//! Composite-loss training of the six model kinds, with seeded noisy
//! augmentation, validation-based selection and a JSON-lines log.

mod config;
mod data;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ser_autograd::{bind, Adam, AdamConfig, ParamSet, Tape};

pub use config::TrainConfig;
pub use data::{
    load_noises, load_utterances, make_inference_view, make_training_view, mix, InferenceView, LoadedUtterance,
    NoiseSpec, TrainingExample,
};

use crate::corpus::{Manifest, NoiseSet, Waveform};
use crate::dsp::lmfb;
use crate::enhance::{enhancer_by_name, Enhancer};
use crate::error::{Error, Result};
use crate::evalkit::{loso_splits, ConfusionMatrix, Fold};
use crate::model::{example_loss, LossTerms, Model, ModelKind, Targets};
use crate::ser::{argmax, pad_or_truncate_to, reference_representation, InputNorm, Padded};
use crate::util::stable_hash;

pub use crate::ser::pad_or_truncate;

/// Seeded generator for one named purpose.
pub fn rng_for(parts: &[&[u8]]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stable_hash(parts))
}

pub fn snr_key(snr: Option<f64>) -> String {
    match snr {
        None => "clean".into(),
        Some(s) => format!("{s}"),
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogLine {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub task_loss: f64,
    pub low_loss: f64,
    pub high_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uar: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub war: Option<f64>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty", default)]
    pub mean_c: BTreeMap<String, f64>,
}

impl LogLine {
    fn new(epoch: usize, split: &str, loss: LossTerms) -> Self {
        Self {
            epoch,
            split: split.into(),
            loss: loss.total,
            task_loss: loss.task,
            low_loss: loss.low,
            high_loss: loss.high,
            uar: None,
            war: None,
            mean_c: BTreeMap::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("log line serialises")
    }
}

/// Everything a training run needs from the corpus for one fold.
pub struct FoldData {
    pub fold: Fold,
    pub train: Vec<LoadedUtterance>,
    pub validation: Vec<LoadedUtterance>,
    pub test: Vec<LoadedUtterance>,
    pub matched: Vec<Waveform>,
    pub unmatched: Vec<Waveform>,
}

impl FoldData {
    pub fn load(manifest: &Manifest, fold_index: usize) -> Result<Self> {
        let folds = loso_splits(manifest)?;
        let fold = folds
            .get(fold_index)
            .cloned()
            .ok_or_else(|| Error::Config(format!("fold {fold_index} out of range (0..{})", folds.len())))?;
        let parts = fold.partition(manifest);
        if parts.train.is_empty() || parts.validation.is_empty() {
            return Err(Error::Manifest(format!("fold {fold_index} has an empty train or validation split")));
        }
        Ok(Self {
            train: load_utterances(manifest, &parts.train)?,
            validation: load_utterances(manifest, &parts.validation)?,
            test: load_utterances(manifest, &parts.test)?,
            matched: load_noises(manifest, NoiseSet::Matched)?,
            unmatched: load_noises(manifest, NoiseSet::Unmatched)?,
            fold,
        })
    }

    /// Clean LMFB of every training utterance, truncated to `max_frames`.
    pub fn clean_train_features(&self, max_frames: usize) -> Result<Vec<Padded>> {
        self.train
            .iter()
            .map(|u| pad_or_truncate_to(&lmfb(&u.wave)?, max_frames))
            .collect()
    }
}

/// Input normalisation from the real frames of the clean training features.
pub fn fit_norm(targets: &[Padded]) -> Result<InputNorm> {
    InputNorm::fit(targets.iter().map(|p| p.real()))
}

pub struct TrainOutcome {
    /// Parameters from the epoch with the best validation UAR.
    pub model: Model,
    pub best_epoch: usize,
    pub best_val_uar: f64,
    pub epoch0_val_uar: f64,
    pub epochs_run: usize,
    pub log: Vec<LogLine>,
}

/// Mean loss terms, predictions and mean c over a fixed example set, using
/// parameters as constants.
pub struct EvalPass {
    pub loss: LossTerms,
    pub confusion: ConfusionMatrix,
    pub mean_c: BTreeMap<String, f64>,
}

fn accumulate(acc: &mut ParamSet, g: &ParamSet) {
    for ((_, a), (_, b)) in acc.iter_mut().zip(g.iter()) {
        for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
            *x += y;
        }
    }
}

/// Runs the model over `examples`; `h_s` supplies the clean reference
/// representation of each example when the loss needs it.
pub fn evaluate_examples(
    model: &Model,
    examples: &[TrainingExample],
    h_s: &dyn Fn(&TrainingExample) -> Option<Vec<f64>>,
    alpha: f64,
    beta: f64,
) -> Result<EvalPass> {
    let (a, b) = model.kind.loss_weights(alpha, beta);
    let mut loss = LossTerms::default();
    let mut confusion = ConfusionMatrix::new();
    let mut c_sum: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for ex in examples {
        let mut tape = Tape::new();
        let p = bind(&mut tape, &model.params, false);
        let nv = model.norm.bind(&mut tape);
        let f = model.forward(&mut tape, &p, nv, &ex.inputs())?;
        let pred = argmax(tape.value(f.logits).data());
        confusion.add(ex.label, pred)?;
        if let Some(c) = f.c {
            let e = c_sum.entry(snr_key(ex.snr)).or_insert((0.0, 0));
            e.0 += tape.value(c).item();
            e.1 += 1;
        }
        let hs = if model.kind.is_trnet() { h_s(ex) } else { None };
        let targets = hs.as_ref().map(|h| Targets {
            x_s: ex.clean_target(),
            h_s: h,
        });
        let (_, terms) = example_loss(&mut tape, &f, ex.label, targets.as_ref(), a, b)?;
        loss.add(&terms);
    }
    Ok(EvalPass {
        loss: loss.scaled(1.0 / examples.len().max(1) as f64),
        confusion,
        mean_c: c_sum.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
    })
}

/// Result of one optimisation step over a batch.
pub struct StepResult {
    pub loss: LossTerms,
    pub correct: usize,
}

/// One Adam step on the batch-mean loss: per-example tapes, summed
/// gradients divided by the batch size.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[TrainingExample],
    h_s: &dyn Fn(&TrainingExample) -> Option<Vec<f64>>,
    alpha: f64,
    beta: f64,
) -> Result<StepResult> {
    let (a, b) = model.kind.loss_weights(alpha, beta);
    let mut grads = model.params.zeros_like();
    let mut loss = LossTerms::default();
    let mut correct = 0;
    for ex in batch {
        let mut tape = Tape::new();
        let p = bind(&mut tape, &model.params, true);
        let nv = model.norm.bind(&mut tape);
        let f = model.forward(&mut tape, &p, nv, &ex.inputs())?;
        if argmax(tape.value(f.logits).data()) == ex.label {
            correct += 1;
        }
        let hs = if model.kind.is_trnet() && b != 0.0 { h_s(ex) } else { None };
        if model.kind.is_trnet() && b != 0.0 && hs.is_none() {
            return Err(Error::MissingReference(format!("no clean reference representation for '{}'", ex.id)));
        }
        let dummy = Vec::new();
        let targets = if model.kind.is_trnet() {
            Some(Targets {
                x_s: ex.clean_target(),
                h_s: hs.as_deref().unwrap_or(&dummy),
            })
        } else {
            None
        };
        let (l, terms) = example_loss(&mut tape, &f, ex.label, targets.as_ref(), a, b)?;
        tape.backward(l)?;
        accumulate(&mut grads, &p.grads(&tape));
        loss.add(&terms);
    }
    let inv = 1.0 / batch.len() as f64;
    for (_, g) in grads.iter_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= inv);
    }
    adam.step(&mut model.params, &grads)?;
    if model.params.iter().any(|(_, t)| !t.is_finite()) {
        return Err(Error::NonFinite("parameters after update".into()));
    }
    Ok(StepResult {
        loss: loss.scaled(inv),
        correct,
    })
}

/// Cache of clean reference representations keyed by utterance id.
pub struct ReferenceCache {
    map: BTreeMap<String, Vec<f64>>,
}

impl ReferenceCache {
    pub fn build(reference: &Model, utts: &[LoadedUtterance], targets: &[Padded]) -> Result<Self> {
        let enc = reference.encoder_params();
        let mut map = BTreeMap::new();
        for (u, t) in utts.iter().zip(targets) {
            map.insert(u.id.clone(), reference_representation(&enc, &reference.norm, t)?);
        }
        Ok(Self { map })
    }

    pub fn get(&self, id: &str) -> Option<Vec<f64>> {
        self.map.get(id).cloned()
    }
}

fn enhancer_for(cfg: &TrainConfig) -> Result<Option<Box<dyn Enhancer>>> {
    if cfg.kind.uses_enhancer() {
        Ok(Some(enhancer_by_name(&cfg.enhancer)?))
    } else {
        Ok(None)
    }
}

/// Fixed validation set: every validation utterance clean, plus one matched
/// noisy version for kinds trained on noise.
fn validation_examples(
    cfg: &TrainConfig,
    data: &FoldData,
    enhancer: Option<&dyn Enhancer>,
) -> Result<Vec<TrainingExample>> {
    let mut out = Vec::new();
    for u in &data.validation {
        let mut rng = rng_for(&[b"validation", u.id.as_bytes(), &cfg.seed.to_le_bytes()]);
        out.push(make_training_view(u, None, enhancer, &mut rng, cfg.max_frames, None)?);
        if cfg.kind.trains_on_noise() {
            let noise = &data.matched[rng.random_range(0..data.matched.len())];
            let snr = cfg.snrs[rng.random_range(0..cfg.snrs.len())];
            let spec = NoiseSpec { noise, snr_db: snr };
            out.push(make_training_view(u, Some(spec), enhancer, &mut rng, cfg.max_frames, None)?);
        }
    }
    Ok(out)
}

/// Train one model kind on one fold. Trnet kinds need the frozen clean
/// reference (a trained `baseline_c` of the same fold).
pub fn train(
    cfg: &TrainConfig,
    data: &FoldData,
    reference: Option<&Model>,
    on_log: &mut dyn FnMut(&LogLine),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if cfg.kind.trains_on_noise() && data.matched.is_empty() {
        return Err(Error::Manifest("training on noise needs matched noise recordings".into()));
    }
    let enhancer = enhancer_for(cfg)?;
    let enh = enhancer.as_deref();
    let targets = data.clean_train_features(cfg.max_frames)?;
    let norm = fit_norm(&targets)?;
    let cache = if cfg.kind.is_trnet() {
        let r = reference.ok_or_else(|| {
            Error::MissingReference(format!("{} needs a clean-pretrained checkpoint", cfg.kind))
        })?;
        Some(ReferenceCache::build(r, &data.train, &targets)?)
    } else {
        None
    };
    let val_cache = match (cfg.kind.is_trnet(), reference) {
        (true, Some(r)) => {
            let vt: Vec<Padded> = data
                .validation
                .iter()
                .map(|u| pad_or_truncate_to(&lmfb(&u.wave)?, cfg.max_frames))
                .collect::<Result<_>>()?;
            Some(ReferenceCache::build(r, &data.validation, &vt)?)
        }
        _ => None,
    };
    let h_train = |ex: &TrainingExample| cache.as_ref().and_then(|c| c.get(&ex.id));
    let h_val = |ex: &TrainingExample| val_cache.as_ref().and_then(|c| c.get(&ex.id));

    let mut model = Model::init(cfg.kind, cfg.seed, norm);
    model.classifier_input = cfg.classifier_input;
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let validation = validation_examples(cfg, data, enh)?;
    let mut log = Vec::new();
    let mut emit = |line: LogLine, log: &mut Vec<LogLine>| {
        on_log(&line);
        log.push(line);
    };

    let val_line = |epoch: usize, model: &Model| -> Result<(LogLine, f64)> {
        let pass = evaluate_examples(model, &validation, &h_val, cfg.alpha, cfg.beta)?;
        let uar = pass.confusion.uar()?;
        let mut line = LogLine::new(epoch, "validation", pass.loss);
        line.uar = Some(uar);
        line.war = Some(pass.confusion.war()?);
        line.mean_c = pass.mean_c;
        Ok((line, uar))
    };

    let (line, uar0) = val_line(0, &model)?;
    emit(line, &mut log);
    let mut best = (model.clone(), 0usize, uar0);
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        epochs_run = epoch;
        let mut plan: Vec<(usize, bool)> = Vec::new();
        for i in 0..data.train.len() {
            plan.push((i, false));
            if cfg.kind.trains_on_noise() {
                plan.push((i, true));
            }
        }
        let mut order_rng = rng_for(&[b"order", &cfg.seed.to_le_bytes(), &(epoch as u64).to_le_bytes()]);
        plan.shuffle(&mut order_rng);
        let mut epoch_loss = LossTerms::default();
        let mut steps = 0;
        for chunk in plan.chunks(cfg.batch) {
            let mut batch = Vec::with_capacity(chunk.len());
            for &(i, noisy) in chunk {
                let u = &data.train[i];
                let mut rng = rng_for(&[
                    b"example",
                    u.id.as_bytes(),
                    &[noisy as u8],
                    &cfg.seed.to_le_bytes(),
                    &(epoch as u64).to_le_bytes(),
                ]);
                let noise = if noisy {
                    let n = &data.matched[rng.random_range(0..data.matched.len())];
                    let snr = cfg.snrs[rng.random_range(0..cfg.snrs.len())];
                    Some(NoiseSpec { noise: n, snr_db: snr })
                } else {
                    None
                };
                batch.push(make_training_view(u, noise, enh, &mut rng, cfg.max_frames, Some(&targets[i]))?);
            }
            let r = train_step(&mut model, &mut adam, &batch, &h_train, cfg.alpha, cfg.beta)?;
            epoch_loss.add(&r.loss);
            steps += 1;
        }
        emit(LogLine::new(epoch, "train", epoch_loss.scaled(1.0 / steps.max(1) as f64)), &mut log);
        let (line, uar) = val_line(epoch, &model)?;
        emit(line, &mut log);
        if uar > best.2 {
            best = (model.clone(), epoch, uar);
        }
        if cfg.patience > 0 && epoch - best.1 >= cfg.patience {
            break;
        }
    }
    Ok(TrainOutcome {
        model: best.0,
        best_epoch: best.1,
        best_val_uar: best.2,
        epoch0_val_uar: uar0,
        epochs_run,
        log,
    })
}

/// Clean pretraining of the frozen reference: a `baseline_c` run.
pub fn pretrain_clean(cfg: &TrainConfig, data: &FoldData, on_log: &mut dyn FnMut(&LogLine)) -> Result<TrainOutcome> {
    let cfg = TrainConfig {
        kind: ModelKind::BaselineC,
        ..cfg.clone()
    };
    train(&cfg, data, None, on_log)
}

pub struct ProbeOutcome {
    pub steps: usize,
    pub accuracy: f64,
}

/// Repeated full-batch steps on a fixed batch until every example is
/// classified correctly (checked on the forward pass of each step) or
/// `max_steps` is reached.
pub fn overfit_probe(
    model: &mut Model,
    batch: &[TrainingExample],
    h_s: &dyn Fn(&TrainingExample) -> Option<Vec<f64>>,
    cfg: &TrainConfig,
    max_steps: usize,
) -> Result<ProbeOutcome> {
    let mut adam = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut last = 0.0;
    for step in 0..max_steps {
        let r = train_step(model, &mut adam, batch, h_s, cfg.alpha, cfg.beta)?;
        last = r.correct as f64 / batch.len() as f64;
        if r.correct == batch.len() {
            return Ok(ProbeOutcome {
                steps: step,
                accuracy: 1.0,
            });
        }
    }
    Ok(ProbeOutcome {
        steps: max_steps,
        accuracy: last,
    })
}
