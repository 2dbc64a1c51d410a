//! Model kinds and the assembled forward pass: SNR-aware compensation,
//! encoder, calibration bridge and classifier.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use ser_autograd::{bind, Bound, ParamSet, Tape, Tensor, Var};

use crate::bridge::{calibrate_graph, init_bridge};
use crate::corpus::NUM_CLASSES;
use crate::error::{invalid, Error, Result};
use crate::ser::{argmax, classify, encode, init_classifier, init_encoder, InputNorm, NormVars, Padded};
use crate::snr_aware::{coefficient_graph, compensate_graph, similarity_rows, SnrAwareParams};
use crate::util::stable_hash;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    BaselineC,
    BaselineN,
    BaselineE,
    Trnet,
    TrnetNoLow,
    TrnetNoHigh,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::BaselineC,
        ModelKind::BaselineN,
        ModelKind::BaselineE,
        ModelKind::Trnet,
        ModelKind::TrnetNoLow,
        ModelKind::TrnetNoHigh,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::BaselineC => "baseline_c",
            ModelKind::BaselineN => "baseline_n",
            ModelKind::BaselineE => "baseline_e",
            ModelKind::Trnet => "trnet",
            ModelKind::TrnetNoLow => "trnet_no_low",
            ModelKind::TrnetNoHigh => "trnet_no_high",
        }
    }

    pub fn is_trnet(self) -> bool {
        matches!(self, ModelKind::Trnet | ModelKind::TrnetNoLow | ModelKind::TrnetNoHigh)
    }

    /// Whether the kind reads enhancer output at all.
    pub fn uses_enhancer(self) -> bool {
        self == ModelKind::BaselineE || self.is_trnet()
    }

    /// Whether training includes noisy mixtures.
    pub fn trains_on_noise(self) -> bool {
        self != ModelKind::BaselineC
    }

    /// Effective loss weights after the ablation switches.
    pub fn loss_weights(self, alpha: f64, beta: f64) -> (f64, f64) {
        match self {
            ModelKind::Trnet => (alpha, beta),
            ModelKind::TrnetNoLow => (0.0, beta),
            ModelKind::TrnetNoHigh => (alpha, 0.0),
            _ => (0.0, 0.0),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown model kind '{s}'")))
    }
}

/// What the classifier reads in the trnet kinds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassifierInput {
    #[default]
    Calibrated,
    Raw,
}

impl FromStr for ClassifierInput {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "calibrated" => Ok(ClassifierInput::Calibrated),
            "raw" => Ok(ClassifierInput::Raw),
            _ => Err(Error::Config(format!("unknown classifier input '{s}'"))),
        }
    }
}

/// Inference inputs: features of the noisy signal and of its enhanced
/// version. The clean target never appears here.
#[derive(Clone, Copy, Debug)]
pub struct ModelInputs<'a> {
    pub x: &'a Padded,
    pub x_e: Option<&'a Padded>,
}

/// Graph handles of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Var,
    pub h: Var,
    /// Calibrated representation (trnet kinds), else `h`.
    pub rep: Var,
    pub c: Option<Var>,
    pub x_tilde: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub label: usize,
    pub c: Option<f64>,
    /// Calibrated representation for trnet kinds, raw `h` otherwise.
    pub representation: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ModelMeta {
    kind: ModelKind,
    classifier_input: ClassifierInput,
    checksum: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub classifier_input: ClassifierInput,
    pub params: ParamSet,
    pub norm: InputNorm,
}

impl Model {
    /// Fresh parameters. The encoder and classifier draws depend only on
    /// `seed`, so every kind starts from the same encoder for a given seed.
    pub fn init(kind: ModelKind, seed: u64, norm: InputNorm) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(["init".as_bytes(), &seed.to_le_bytes()]));
        let mut params = init_encoder(&mut rng);
        params.extend(&init_classifier(&mut rng, NUM_CLASSES));
        if kind.is_trnet() {
            params.extend(&SnrAwareParams::default().to_params());
            params.extend(&init_bridge());
        }
        Self {
            kind,
            classifier_input: ClassifierInput::default(),
            params,
            norm,
        }
    }

    /// SHA-256 over parameters and normalisation statistics.
    pub fn checksum(&self) -> String {
        let mut all = self.params.clone();
        all.extend(&self.norm.to_params());
        all.checksum()
    }

    pub fn encoder_params(&self) -> ParamSet {
        self.params.with_prefix("enc.")
    }

    /// Writes the parameter file at `path` and a JSON sidecar next to it.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut all = self.params.clone();
        all.extend(&self.norm.to_params());
        all.save(path).map_err(|e| match e {
            ser_autograd::AutogradError::Io(msg) => Error::io(path, std::io::Error::other(msg)),
            other => other.into(),
        })?;
        let meta = ModelMeta {
            kind: self.kind,
            classifier_input: self.classifier_input,
            checksum: self.checksum(),
        };
        let side = sidecar(path);
        let mut text = serde_json::to_string_pretty(&meta)?;
        text.push('\n');
        std::fs::write(&side, text).map_err(|e| Error::io(&side, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let side = sidecar(path);
        let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let meta: ModelMeta = serde_json::from_str(&text)?;
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let all = ParamSet::from_bytes(&bytes)?;
        let norm = InputNorm::from_params(&all)?;
        let mut params = ParamSet::new();
        for (name, t) in all.iter().filter(|(n, _)| !n.starts_with("norm.")) {
            params.insert(name, t.clone());
        }
        let model = Self {
            kind: meta.kind,
            classifier_input: meta.classifier_input,
            params,
            norm,
        };
        if model.checksum() != meta.checksum {
            return Err(Error::InvalidInput(format!("{}: checksum mismatch", path.display())));
        }
        Ok(model)
    }

    fn input_for<'a>(&self, inputs: &ModelInputs<'a>) -> Result<&'a Padded> {
        match self.kind {
            ModelKind::BaselineC | ModelKind::BaselineN => Ok(inputs.x),
            _ => inputs
                .x_e
                .ok_or_else(|| invalid(format!("{} needs enhanced features", self.kind))),
        }
    }

    /// Build the inference graph on `tape` with parameters already bound.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, norm: NormVars, inputs: &ModelInputs<'_>) -> Result<Forward> {
        if !self.kind.is_trnet() {
            let feats = self.input_for(inputs)?;
            let x = tape.constant(feats.valid_tensor());
            let enc = encode(tape, p, norm, x)?;
            let logits = classify(tape, p, enc.h)?;
            return Ok(Forward {
                logits,
                h: enc.h,
                rep: enc.h,
                c: None,
                x_tilde: None,
            });
        }
        let x_e = self.input_for(inputs)?;
        let x = inputs.x;
        if x.valid() != x_e.valid() || x.dims() != x_e.dims() {
            return Err(invalid("noisy and enhanced features differ in shape"));
        }
        let d = similarity_rows(x.valid_data(), x_e.valid_data(), x.dims())?;
        let c = coefficient_graph(tape, p, &d)?;
        let xv = tape.constant(x.valid_tensor());
        let ev = tape.constant(x_e.valid_tensor());
        let x_tilde = compensate_graph(tape, xv, ev, c)?;
        let enc = encode(tape, p, norm, x_tilde)?;
        let h_tilde = calibrate_graph(tape, p, enc.h, c)?;
        let head_in = match self.classifier_input {
            ClassifierInput::Calibrated => h_tilde,
            ClassifierInput::Raw => enc.h,
        };
        let logits = classify(tape, p, head_in)?;
        Ok(Forward {
            logits,
            h: enc.h,
            rep: h_tilde,
            c: Some(c),
            x_tilde: Some(x_tilde),
        })
    }

    /// Inference with parameters bound as constants.
    pub fn predict(&self, inputs: &ModelInputs<'_>) -> Result<Prediction> {
        let mut tape = Tape::new();
        let p = bind(&mut tape, &self.params, false);
        let nv = self.norm.bind(&mut tape);
        let f = self.forward(&mut tape, &p, nv, inputs)?;
        let logits = tape.value(f.logits).data().to_vec();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logits".into()));
        }
        Ok(Prediction {
            label: argmax(&logits),
            logits,
            c: f.c.map(|c| tape.value(c).item()),
            representation: tape.value(f.rep).data().to_vec(),
        })
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Clean-target side of a training example.
#[derive(Clone, Copy, Debug)]
pub struct Targets<'a> {
    pub x_s: &'a Padded,
    pub h_s: &'a [f64],
}

/// Values of the loss terms for one example.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub task: f64,
    pub low: f64,
    pub high: f64,
}

impl LossTerms {
    pub fn add(&mut self, o: &LossTerms) {
        self.total += o.total;
        self.task += o.task;
        self.low += o.low;
        self.high += o.high;
    }

    pub fn scaled(&self, k: f64) -> LossTerms {
        LossTerms {
            total: self.total * k,
            task: self.task * k,
            low: self.low * k,
            high: self.high * k,
        }
    }
}

/// `L_task + α·L_low + β·L_high` for one example. The low and high terms
/// are only built when their weight is nonzero and targets are given.
pub fn example_loss(
    tape: &mut Tape,
    f: &Forward,
    label: usize,
    targets: Option<&Targets<'_>>,
    alpha: f64,
    beta: f64,
) -> Result<(Var, LossTerms)> {
    let task = tape.cross_entropy(f.logits, label)?;
    let mut terms = LossTerms {
        task: tape.value(task).item(),
        ..LossTerms::default()
    };
    let mut total = task;
    if let (Some(t), Some(x_tilde)) = (targets, f.x_tilde) {
        if alpha != 0.0 {
            let xs = tape.constant(t.x_s.valid_tensor());
            if tape.shape(xs) != tape.shape(x_tilde) {
                return Err(invalid("clean target and compensated features differ in shape"));
            }
            let low = tape.mse(xs, x_tilde)?;
            terms.low = tape.value(low).item();
            let w = tape.scale(low, alpha)?;
            total = tape.add(total, w)?;
        }
        if beta != 0.0 {
            let hs = tape.constant(Tensor::new(vec![1, t.h_s.len()], t.h_s.to_vec())?);
            let high = tape.mse(hs, f.rep)?;
            terms.high = tape.value(high).item();
            let w = tape.scale(high, beta)?;
            total = tape.add(total, w)?;
        }
    }
    terms.total = tape.value(total).item();
    Ok((total, terms))
}
