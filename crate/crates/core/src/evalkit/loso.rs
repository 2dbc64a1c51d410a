use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{Manifest, UtteranceRecord};
use crate::error::{Error, Result};

/// One leave-one-speaker-out fold: the other sessions train, one speaker of
/// the held-out session validates and its partner is tested.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub train_sessions: Vec<String>,
    pub validation_speaker: String,
    pub test_speaker: String,
}

pub struct FoldData<'a> {
    pub train: Vec<&'a UtteranceRecord>,
    pub validation: Vec<&'a UtteranceRecord>,
    pub test: Vec<&'a UtteranceRecord>,
}

impl Fold {
    pub fn partition<'a>(&self, manifest: &'a Manifest) -> FoldData<'a> {
        let train_sessions: HashSet<&str> = self.train_sessions.iter().map(String::as_str).collect();
        let pick = |f: &dyn Fn(&UtteranceRecord) -> bool| manifest.utterances.iter().filter(|u| f(u)).collect();
        FoldData {
            train: pick(&|u| train_sessions.contains(u.session.as_str())),
            validation: pick(&|u| u.speaker == self.validation_speaker),
            test: pick(&|u| u.speaker == self.test_speaker),
        }
    }
}

/// Each speaker of each session is the test speaker once; the next speaker
/// of the same session (cyclically) validates.
pub fn loso_splits(manifest: &Manifest) -> Result<Vec<Fold>> {
    manifest.validate(false)?;
    let sessions = manifest.sessions();
    if sessions.len() < 2 {
        return Err(Error::Manifest(format!(
            "leave-one-speaker-out needs at least 2 sessions, found {}",
            sessions.len()
        )));
    }
    let mut folds = Vec::new();
    for (session, speakers) in &sessions {
        if speakers.len() < 2 {
            return Err(Error::Manifest(format!(
                "session '{session}' needs at least 2 speakers for validation and test"
            )));
        }
        let train_sessions: Vec<String> = sessions.keys().filter(|s| *s != session).cloned().collect();
        for (i, test) in speakers.iter().enumerate() {
            folds.push(Fold {
                index: folds.len(),
                train_sessions: train_sessions.clone(),
                validation_speaker: speakers[(i + 1) % speakers.len()].clone(),
                test_speaker: test.clone(),
            });
        }
    }
    Ok(folds)
}
