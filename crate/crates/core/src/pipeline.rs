//! Per-seed ablation: clean pretraining, the five remaining kinds against
//! the frozen clean model, then one shared evaluation pass.

use crate::error::{invalid, Result};
use crate::evalkit::{average_reports, evaluate_models, EvalReport, EvalSettings};
use crate::model::ModelKind;
use crate::trainer::{pretrain_clean, train, FoldData, LogLine, TrainConfig, TrainOutcome};

pub struct SeedRun {
    pub seed: u64,
    /// One outcome per kind in `ModelKind::ALL` order.
    pub outcomes: Vec<TrainOutcome>,
    pub reports: Vec<EvalReport>,
}

impl SeedRun {
    pub fn outcome(&self, kind: ModelKind) -> Option<&TrainOutcome> {
        self.outcomes.iter().find(|o| o.model.kind == kind)
    }

    pub fn report(&self, kind: ModelKind) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.kind == kind)
    }
}

/// Train all six kinds for one seed. `baseline_c` doubles as the frozen
/// clean reference of the trnet kinds.
pub fn run_seed(
    base: &TrainConfig,
    data: &FoldData,
    seed: u64,
    settings: &EvalSettings,
    on_log: &mut dyn FnMut(ModelKind, &LogLine),
) -> Result<SeedRun> {
    let cfg = TrainConfig {
        seed,
        ..base.clone()
    };
    let reference = pretrain_clean(&cfg, data, &mut |l| on_log(ModelKind::BaselineC, l))?;
    let mut outcomes = Vec::with_capacity(ModelKind::ALL.len());
    for kind in ModelKind::ALL {
        if kind == ModelKind::BaselineC {
            continue;
        }
        let kcfg = TrainConfig { kind, ..cfg.clone() };
        outcomes.push(train(&kcfg, data, Some(&reference.model), &mut |l| on_log(kind, l))?);
    }
    outcomes.insert(0, reference);
    outcomes.sort_by_key(|o| ModelKind::ALL.iter().position(|&k| k == o.model.kind));
    let models: Vec<_> = outcomes.iter().map(|o| &o.model).collect();
    let reports = evaluate_models(&models, &data.test, &data.matched, &data.unmatched, settings)?;
    Ok(SeedRun {
        seed,
        outcomes,
        reports,
    })
}

/// Seed-averaged report per kind, in `ModelKind::ALL` order.
pub fn average_runs(runs: &[SeedRun]) -> Result<Vec<EvalReport>> {
    if runs.is_empty() {
        return Err(invalid("no runs to average"));
    }
    ModelKind::ALL
        .iter()
        .map(|&k| {
            let reports: Vec<EvalReport> = runs.iter().filter_map(|r| r.report(k).cloned()).collect();
            average_reports(&reports)
        })
        .collect()
}
