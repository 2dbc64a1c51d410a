//! Synthetic emotional-speech corpus, noise banks and manifest handling.

mod synth;
mod wav;
mod waveform;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use synth::{
    speaker_f0_offset, synth_noise, synth_utterance, NoiseKind, LEAD_IN_SAMPLES, NOISE_DURATION_RANGE,
    UTTERANCE_DURATION_RANGE,
};
pub use wav::{read_wav, write_wav};
pub use waveform::{Waveform, SAMPLE_RATE};

use crate::error::{invalid, Error, Result};
use crate::util::stable_hash;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Emotion {
    Angry,
    Happy,
    Neutral,
    Sad,
}

pub const NUM_CLASSES: usize = 4;

impl Emotion {
    pub const ALL: [Emotion; NUM_CLASSES] = [Emotion::Angry, Emotion::Happy, Emotion::Neutral, Emotion::Sad];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Emotion> {
        Emotion::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Emotion::Angry => "angry",
            Emotion::Happy => "happy",
            Emotion::Neutral => "neutral",
            Emotion::Sad => "sad",
        }
    }
}

impl fmt::Display for Emotion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Emotion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Emotion::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| invalid(format!("unknown emotion class '{s}'")))
    }
}

/// Which noise family a recording belongs to: seen in training (matched) or
/// reserved for evaluation (unmatched).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseSet {
    Matched,
    Unmatched,
}

impl NoiseSet {
    pub fn name(self) -> &'static str {
        match self {
            NoiseSet::Matched => "matched",
            NoiseSet::Unmatched => "unmatched",
        }
    }

    pub fn kinds(self) -> [NoiseKind; 2] {
        match self {
            NoiseSet::Matched => [NoiseKind::White, NoiseKind::TonalBabble],
            NoiseSet::Unmatched => [NoiseKind::Pink, NoiseKind::Impulsive],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub path: String,
    pub emotion: Emotion,
    pub speaker: String,
    pub session: String,
    pub duration_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseRecord {
    pub id: String,
    pub path: String,
    pub noise_set: NoiseSet,
}

/// Corpus index. Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub utterances: Vec<UtteranceRecord>,
    pub noises: Vec<NoiseRecord>,
    #[serde(skip)]
    root: PathBuf,
}

impl Manifest {
    pub fn new(utterances: Vec<UtteranceRecord>, noises: Vec<NoiseRecord>, root: impl Into<PathBuf>) -> Self {
        Self {
            utterances,
            noises,
            root: root.into(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, path: &str) -> PathBuf {
        let p = Path::new(path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_str(&text)?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate(true)?;
        Ok(m)
    }

    /// Deterministic pretty JSON followed by a newline.
    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    /// Checks id uniqueness and the one-session-per-speaker rule, and
    /// optionally that every referenced file exists.
    pub fn validate(&self, check_paths: bool) -> Result<()> {
        let mut ids = HashSet::new();
        for id in self.utterances.iter().map(|u| &u.id).chain(self.noises.iter().map(|n| &n.id)) {
            if !ids.insert(id) {
                return Err(Error::Manifest(format!("duplicate id '{id}'")));
            }
        }
        let mut sessions: BTreeMap<&str, &str> = BTreeMap::new();
        for u in &self.utterances {
            match sessions.insert(&u.speaker, &u.session) {
                Some(prev) if prev != u.session => {
                    return Err(Error::Manifest(format!(
                        "speaker '{}' appears in sessions '{}' and '{}'",
                        u.speaker, prev, u.session
                    )))
                }
                _ => {}
            }
        }
        if check_paths {
            for p in self.utterances.iter().map(|u| &u.path).chain(self.noises.iter().map(|n| &n.path)) {
                if !self.resolve(p).is_file() {
                    return Err(Error::Manifest(format!("missing file '{p}'")));
                }
            }
        }
        Ok(())
    }

    /// Sessions in sorted order, each with its sorted speakers.
    pub fn sessions(&self) -> BTreeMap<String, Vec<String>> {
        let mut out: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for u in &self.utterances {
            let spk = out.entry(u.session.clone()).or_default();
            if !spk.contains(&u.speaker) {
                spk.push(u.speaker.clone());
            }
        }
        out.values_mut().for_each(|v| v.sort());
        out
    }

    pub fn noises_in(&self, set: NoiseSet) -> Vec<&NoiseRecord> {
        self.noises.iter().filter(|n| n.noise_set == set).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusConfig {
    pub sessions: usize,
    pub speakers_per_session: usize,
    pub utterances_per_speaker_per_class: usize,
    pub matched_noises: usize,
    pub unmatched_noises: usize,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub noise_duration_s: f64,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            sessions: 5,
            speakers_per_session: 2,
            utterances_per_speaker_per_class: 5,
            matched_noises: 10,
            unmatched_noises: 10,
            min_duration_s: 1.0,
            max_duration_s: 3.0,
            noise_duration_s: 5.0,
            seed: 0,
        }
    }
}

impl CorpusConfig {
    fn check(&self) -> Result<()> {
        let (lo, hi) = UTTERANCE_DURATION_RANGE;
        if self.sessions == 0 || self.speakers_per_session == 0 || self.utterances_per_speaker_per_class == 0 {
            return Err(Error::Config("corpus needs at least one session, speaker and utterance".into()));
        }
        if !(lo <= self.min_duration_s && self.min_duration_s <= self.max_duration_s && self.max_duration_s <= hi) {
            return Err(Error::Config(format!("utterance durations must lie within [{lo}, {hi}] s")));
        }
        let (nlo, nhi) = NOISE_DURATION_RANGE;
        if !(nlo..=nhi).contains(&self.noise_duration_s) {
            return Err(Error::Config(format!("noise duration must lie within [{nlo}, {nhi}] s")));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
        }
        match key {
            "sessions" => self.sessions = num(key, v)?,
            "speakers_per_session" => self.speakers_per_session = num(key, v)?,
            "utterances_per_speaker_per_class" => self.utterances_per_speaker_per_class = num(key, v)?,
            "matched_noises" => self.matched_noises = num(key, v)?,
            "unmatched_noises" => self.unmatched_noises = num(key, v)?,
            "min_duration_s" => self.min_duration_s = num(key, v)?,
            "max_duration_s" => self.max_duration_s = num(key, v)?,
            "noise_duration_s" => self.noise_duration_s = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            other => return Err(Error::Config(format!("unknown corpus key '{other}'"))),
        }
        Ok(())
    }

    /// `key = value` lines with the field names as keys; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        cfg.check()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        format!(
            "sessions = {}\nspeakers_per_session = {}\nutterances_per_speaker_per_class = {}\n\
             matched_noises = {}\nunmatched_noises = {}\nmin_duration_s = {}\nmax_duration_s = {}\n\
             noise_duration_s = {}\nseed = {}\n",
            self.sessions,
            self.speakers_per_session,
            self.utterances_per_speaker_per_class,
            self.matched_noises,
            self.unmatched_noises,
            self.min_duration_s,
            self.max_duration_s,
            self.noise_duration_s,
            self.seed
        )
    }
}

pub fn session_name(i: usize) -> String {
    format!("ses{}", i + 1)
}

pub fn speaker_name(session: usize, j: usize) -> String {
    format!("ses{}_spk{}", session + 1, j)
}

/// Plan the corpus without touching the filesystem.
pub fn plan_corpus(config: &CorpusConfig) -> Result<Manifest> {
    config.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(["corpus".as_bytes(), &config.seed.to_le_bytes()]));
    let mut utterances = Vec::new();
    for s in 0..config.sessions {
        for j in 0..config.speakers_per_session {
            let speaker = speaker_name(s, j);
            for e in Emotion::ALL {
                for k in 0..config.utterances_per_speaker_per_class {
                    let d: f64 = rng.random_range(config.min_duration_s..=config.max_duration_s);
                    let d = ((d * 100.0).round() / 100.0).clamp(config.min_duration_s, config.max_duration_s);
                    let id = format!("{speaker}_{}_{k:02}", e.name());
                    utterances.push(UtteranceRecord {
                        path: format!("speech/{id}.wav"),
                        id,
                        emotion: e,
                        speaker: speaker.clone(),
                        session: session_name(s),
                        duration_s: d,
                    });
                }
            }
        }
    }
    let mut noises = Vec::new();
    for (set, count) in [(NoiseSet::Matched, config.matched_noises), (NoiseSet::Unmatched, config.unmatched_noises)] {
        for k in 0..count {
            let kind = set.kinds()[k % 2];
            let id = format!("{}_{}_{k:02}", set.name(), kind.name());
            noises.push(NoiseRecord {
                path: format!("noise/{id}.wav"),
                id,
                noise_set: set,
            });
        }
    }
    let m = Manifest::new(utterances, noises, PathBuf::new());
    m.validate(false)?;
    Ok(m)
}

fn noise_kind_of(record: &NoiseRecord) -> Result<NoiseKind> {
    NoiseKind::ALL
        .into_iter()
        .find(|k| record.id.contains(k.name()))
        .ok_or_else(|| Error::Manifest(format!("cannot infer noise kind of '{}'", record.id)))
}

fn item_seed(config: &CorpusConfig, id: &str) -> u64 {
    stable_hash([id.as_bytes(), &config.seed.to_le_bytes()])
}

/// Synthesize every utterance and noise recording into `out_dir` and write
/// `manifest.json` there. The output is a pure function of `config`.
pub fn build_corpus(config: &CorpusConfig, out_dir: &Path) -> Result<Manifest> {
    let mut manifest = plan_corpus(config)?;
    for sub in ["speech", "noise"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for u in &manifest.utterances {
        let w = synth_utterance(u.emotion, &u.speaker, u.duration_s, item_seed(config, &u.id))?;
        write_wav(&out_dir.join(&u.path), &w)?;
    }
    for n in &manifest.noises {
        let w = synth_noise(noise_kind_of(n)?, config.noise_duration_s, item_seed(config, &n.id))?;
        write_wav(&out_dir.join(&n.path), &w)?;
    }
    manifest.root = out_dir.to_path_buf();
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}
