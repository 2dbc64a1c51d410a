#![allow(dead_code)]

use ser_refine::corpus::CorpusConfig;

/// Small corpus used by the integration tests: every speaker and fold is
/// present, utterances are short.
pub fn tiny_corpus() -> CorpusConfig {
    CorpusConfig {
        utterances_per_speaker_per_class: 1,
        matched_noises: 2,
        unmatched_noises: 2,
        min_duration_s: 1.0,
        max_duration_s: 1.2,
        noise_duration_s: 2.0,
        ..CorpusConfig::default()
    }
}
