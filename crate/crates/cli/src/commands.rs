use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use ser_refine::corpus::{build_corpus, CorpusConfig, Manifest, NoiseSet};
use ser_refine::dsp::{lmfb, write_features};
use ser_refine::evalkit::{
    average_reports, centroid_shift, collect_embeddings, conditions, embedding_conditions, evaluate_models,
    write_embeddings_csv, EvalReport, EvalSettings,
};
use ser_refine::model::{Model, ModelKind};
use ser_refine::pipeline::run_seed;
use ser_refine::selfcheck::{dsp_suite, gradient_suite};
use ser_refine::trainer::{load_utterances, pretrain_clean, FoldData, LogLine, TrainConfig};
use ser_refine::{Error, Result};

use crate::rundir::RunDir;
use crate::{RunOptions, VERSION};

/// 1 usage or config error, 2 data error, 3 numerical failure.
pub fn exit_code(e: &Error) -> u8 {
    if e.is_numerical() {
        3
    } else if matches!(e, Error::Config(_)) {
        1
    } else {
        2
    }
}

fn effective_config(run: &RunOptions) -> Result<TrainConfig> {
    let mut cfg = match &run.config {
        Some(p) => TrainConfig::load(p).map_err(|e| match e {
            Error::Io { path, source } => Error::Config(format!("{}: {source}", path.display())),
            other => other,
        })?,
        None => TrainConfig::default(),
    };
    if let Some(s) = run.seed {
        cfg.seed = s;
    }
    if let Some(e) = &run.enhancer {
        cfg.enhancer = e.clone();
    }
    if let Some(s) = &run.snrs {
        cfg.snrs = s.clone();
    }
    if let Some(f) = run.fold {
        cfg.fold = f;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn progress(kind: ModelKind, seed: u64) -> impl FnMut(&LogLine) {
    move |l: &LogLine| {
        if l.split == "validation" {
            eprintln!(
                "{kind} seed {seed} epoch {:>3}: loss {:.4} uar {:.3}",
                l.epoch,
                l.loss,
                l.uar.unwrap_or(f64::NAN)
            );
        }
    }
}

fn eval_settings(cfg: &TrainConfig) -> EvalSettings {
    EvalSettings {
        enhancer: cfg.enhancer.clone(),
        conditions: conditions(&[NoiseSet::Matched, NoiseSet::Unmatched], &cfg.snrs),
        draws: cfg.eval_noise_draws,
        seed: cfg.seed,
        max_frames: cfg.max_frames,
    }
}

pub fn synth_corpus(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<ExitCode> {
    let mut cfg = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            CorpusConfig::parse(&text)?
        }
        None => CorpusConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let manifest = build_corpus(&cfg, out)?;
    let write = |name: &str, text: String| {
        let p = out.join(name);
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))
    };
    write("corpus_config.txt", cfg.to_text())?;
    write("version.txt", format!("{VERSION}\n"))?;
    println!(
        "{} utterances and {} noise recordings written to {}",
        manifest.utterances.len(),
        manifest.noises.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn featurize(manifest: &Path, out: &Path) -> Result<ExitCode> {
    let manifest = Manifest::load(manifest)?;
    let records: Vec<_> = manifest.utterances.iter().collect();
    let utts = load_utterances(&manifest, &records)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    for u in &utts {
        write_features(&out.join(format!("{}.lmfb", u.id)), &lmfb(&u.wave)?)?;
    }
    println!("{} feature files written to {}", utts.len(), out.display());
    Ok(ExitCode::SUCCESS)
}

fn save_outcome(dir: &RunDir, model: &Model, log: &[LogLine], summary: String) -> Result<()> {
    model.save(&dir.join("model.ckpt"))?;
    dir.write_log(log)?;
    dir.write("summary.txt", &summary)
}

fn outcome_summary(o: &ser_refine::trainer::TrainOutcome) -> String {
    format!(
        "kind = {}\nbest_epoch = {}\nbest_val_uar = {}\nepoch0_val_uar = {}\nepochs_run = {}\nchecksum = {}\n",
        o.model.kind,
        o.best_epoch,
        o.best_val_uar,
        o.epoch0_val_uar,
        o.epochs_run,
        o.model.checksum()
    )
}

pub fn pretrain(run: &RunOptions, out: &Path) -> Result<ExitCode> {
    let mut cfg = effective_config(run)?;
    cfg.kind = ModelKind::BaselineC;
    let manifest = Manifest::load(&run.manifest)?;
    let data = FoldData::load(&manifest, cfg.fold)?;
    let dir = RunDir::create(out, &cfg)?;
    let outcome = pretrain_clean(&cfg, &data, &mut progress(cfg.kind, cfg.seed))?;
    save_outcome(&dir, &outcome.model, &outcome.log, outcome_summary(&outcome))?;
    println!(
        "baseline_c: best validation UAR {:.4} at epoch {}; checkpoint {}",
        outcome.best_val_uar,
        outcome.best_epoch,
        dir.join("model.ckpt").display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn train(run: &RunOptions, out: &Path, model: Option<ModelKind>, checkpoint: Option<&Path>) -> Result<ExitCode> {
    let mut cfg = effective_config(run)?;
    if let Some(k) = model {
        cfg.kind = k;
    }
    let reference = match (cfg.kind.is_trnet(), checkpoint) {
        (true, None) => {
            return Err(Error::MissingReference(format!(
                "{} needs --checkpoint pointing at a clean-pretrained model",
                cfg.kind
            )))
        }
        (true, Some(p)) => {
            let m = Model::load(p)?;
            if m.kind != ModelKind::BaselineC {
                return Err(Error::Config(format!("{} is a {} checkpoint, not baseline_c", p.display(), m.kind)));
            }
            Some((p.to_path_buf(), m))
        }
        (false, _) => None,
    };
    let manifest = Manifest::load(&run.manifest)?;
    let data = FoldData::load(&manifest, cfg.fold)?;
    let dir = RunDir::create(out, &cfg)?;
    let outcome = ser_refine::trainer::train(
        &cfg,
        &data,
        reference.as_ref().map(|(_, m)| m),
        &mut progress(cfg.kind, cfg.seed),
    )?;
    let mut summary = outcome_summary(&outcome);
    if let Some((path, m)) = &reference {
        // the frozen reference must come out of training untouched
        let after = Model::load(path)?.checksum();
        if after != m.checksum() {
            return Err(Error::InvalidInput(format!("{} changed during training", path.display())));
        }
        let _ = writeln!(summary, "reference = {}\nreference_checksum = {after}", path.display());
    }
    save_outcome(&dir, &outcome.model, &outcome.log, summary)?;
    println!(
        "{}: best validation UAR {:.4} at epoch {}; checkpoint {}",
        cfg.kind,
        outcome.best_val_uar,
        outcome.best_epoch,
        dir.join("model.ckpt").display()
    );
    Ok(ExitCode::SUCCESS)
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |x| format!("{x:.3}"))
}

/// One row per report: UAR/WAR on clean, matched and unmatched noise, and
/// the mean coefficient per matched SNR for trnet kinds.
pub fn table(reports: &[EvalReport], snrs: &[f64]) -> String {
    let mut s = String::new();
    let mut order: Vec<f64> = snrs.to_vec();
    order.sort_by(|a, b| b.total_cmp(a));
    let _ = write!(s, "{:<14} {:>11} {:>11} {:>11}", "kind", "clean", "matched", "unmatched");
    for snr in &order {
        let _ = write!(s, " {:>7}", format!("c@{snr}"));
    }
    s.push('\n');
    for r in reports {
        let pair = |u: Option<f64>, w: Option<f64>| format!("{}/{}", fmt_opt(u), fmt_opt(w));
        let sm = &r.summary;
        let _ = write!(
            s,
            "{:<14} {:>11} {:>11} {:>11}",
            r.kind.name(),
            pair(Some(sm.clean_uar), Some(sm.clean_war)),
            pair(sm.matched_uar, sm.matched_war),
            pair(sm.unmatched_uar, sm.unmatched_war)
        );
        for snr in &order {
            let c = r.condition(&format!("matched_{snr}")).and_then(|c| c.mean_c);
            let _ = write!(s, " {:>7}", fmt_opt(c));
        }
        s.push('\n');
    }
    s.push_str("cells are UAR/WAR; c@ columns are mean SNR coefficients on matched noise\n");
    s
}

pub fn evaluate(run: &RunOptions, out: &Path, checkpoints: &[PathBuf], kind: Option<ModelKind>) -> Result<ExitCode> {
    let cfg = effective_config(run)?;
    let models: Vec<Model> = checkpoints.iter().map(|p| Model::load(p)).collect::<Result<_>>()?;
    if let Some(k) = kind {
        if let Some(m) = models.iter().find(|m| m.kind != k) {
            return Err(Error::Config(format!("checkpoint of kind {} given with --model {k}", m.kind)));
        }
    }
    let manifest = Manifest::load(&run.manifest)?;
    let data = FoldData::load(&manifest, cfg.fold)?;
    let dir = RunDir::create(out, &cfg)?;
    let refs: Vec<&Model> = models.iter().collect();
    let reports = evaluate_models(&refs, &data.test, &data.matched, &data.unmatched, &eval_settings(&cfg))?;
    let mut by_kind: BTreeMap<usize, Vec<EvalReport>> = BTreeMap::new();
    let mut listing = String::new();
    for (i, (r, path)) in reports.iter().zip(checkpoints).enumerate() {
        r.save(&dir.join(&format!("report_{i}_{}.json", r.kind)))?;
        let _ = writeln!(listing, "{i} {} {}", r.kind, path.display());
        let pos = ModelKind::ALL.iter().position(|&k| k == r.kind).unwrap_or(0);
        by_kind.entry(pos).or_default().push(r.clone());
    }
    dir.write("checkpoints.txt", &listing)?;
    let averaged: Vec<EvalReport> = by_kind.values().map(|v| average_reports(v)).collect::<Result<_>>()?;
    for r in &averaged {
        r.save(&dir.join(&format!("report_{}.json", r.kind)))?;
    }
    let t = table(&averaged, &cfg.snrs);
    dir.write("table.txt", &t)?;
    print!("{t}");
    Ok(ExitCode::SUCCESS)
}

pub fn ablate(run: &RunOptions, out: &Path, seeds: Option<Vec<u64>>, folds: Option<Vec<usize>>) -> Result<ExitCode> {
    let base = effective_config(run)?;
    let seeds = seeds.unwrap_or_else(|| base.seeds.clone());
    let folds = folds.unwrap_or_else(|| vec![base.fold]);
    if seeds.is_empty() || folds.is_empty() {
        return Err(Error::Config("ablate needs at least one seed and one fold".into()));
    }
    let manifest = Manifest::load(&run.manifest)?;
    // validate every fold before any training starts
    for &f in &folds {
        FoldData::load(&manifest, f)?;
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    // per seed, reports of each kind over folds
    let mut per_seed: Vec<Vec<Vec<EvalReport>>> = vec![vec![Vec::new(); ModelKind::ALL.len()]; seeds.len()];
    for &fold in &folds {
        let data = FoldData::load(&manifest, fold)?;
        for (si, &seed) in seeds.iter().enumerate() {
            let cfg = TrainConfig {
                fold,
                seed,
                seeds: seeds.clone(),
                ..base.clone()
            };
            let settings = eval_settings(&cfg);
            let result = run_seed(&cfg, &data, seed, &settings, &mut |k, l| progress(k, seed)(l))?;
            for (ki, kind) in ModelKind::ALL.iter().enumerate() {
                let (Some(o), Some(r)) = (result.outcome(*kind), result.report(*kind)) else {
                    continue;
                };
                let kcfg = TrainConfig { kind: *kind, ..cfg.clone() };
                let dir = RunDir::create(&out.join(format!("{kind}_fold{fold}_seed{seed}")), &kcfg)?;
                save_outcome(&dir, &o.model, &o.log, outcome_summary(o))?;
                r.save(&dir.join("report.json"))?;
                per_seed[si][ki].push(r.clone());
            }
        }
    }
    let mut seed_means: Vec<Vec<EvalReport>> = vec![Vec::new(); ModelKind::ALL.len()];
    for (si, &seed) in seeds.iter().enumerate() {
        let mut fold_means = Vec::new();
        for (ki, reports) in per_seed[si].iter().enumerate() {
            let m = average_reports(reports)?;
            seed_means[ki].push(m.clone());
            fold_means.push(m);
        }
        let text = serde_json_array(&fold_means)?;
        let p = out.join(format!("seed{seed}_fold_mean.json"));
        std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
    }
    let summary: Vec<EvalReport> = seed_means.iter().map(|v| average_reports(v)).collect::<Result<_>>()?;
    let p = out.join("summary.json");
    std::fs::write(&p, serde_json_array(&summary)?).map_err(|e| Error::io(&p, e))?;
    let t = table(&summary, &base.snrs);
    let p = out.join("table.txt");
    std::fs::write(&p, &t).map_err(|e| Error::io(&p, e))?;
    print!("{t}");
    Ok(ExitCode::SUCCESS)
}

fn serde_json_array(reports: &[EvalReport]) -> Result<String> {
    let items: Vec<String> = reports.iter().map(|r| r.to_json()).collect::<Result<_>>()?;
    Ok(format!("[\n{}]\n", items.iter().map(|s| s.trim_end()).collect::<Vec<_>>().join(",\n") + "\n"))
}

pub fn dump_embeddings(run: &RunOptions, checkpoint: &Path, out: &Path) -> Result<ExitCode> {
    let cfg = effective_config(run)?;
    let model = Model::load(checkpoint)?;
    let manifest = Manifest::load(&run.manifest)?;
    let data = FoldData::load(&manifest, cfg.fold)?;
    let settings = EvalSettings {
        conditions: embedding_conditions(&conditions(&[NoiseSet::Matched], &cfg.snrs)),
        ..eval_settings(&cfg)
    };
    let rows = collect_embeddings(&model, &data.test, &data.matched, &data.unmatched, &settings)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    write_embeddings_csv(out, &rows)?;
    println!(
        "{} rows written to {}; centroid shift {:.4}",
        rows.len(),
        out.display(),
        centroid_shift(&rows)?
    );
    Ok(ExitCode::SUCCESS)
}

pub fn selfcheck(coords: usize) -> Result<ExitCode> {
    let mut checks = dsp_suite(20)?;
    checks.extend(gradient_suite(coords.max(1))?);
    let mut max_grad = 0.0f64;
    for c in &checks {
        println!(
            "{} {:<36} {:.3e} (limit {:.0e})",
            if c.passed() { "ok  " } else { "FAIL" },
            c.name,
            c.value,
            c.limit
        );
        if c.name.starts_with("grad") {
            max_grad = max_grad.max(c.value);
        }
    }
    println!("max gradient-check error: {max_grad:.3e}");
    if checks.iter().all(|c| c.passed()) {
        Ok(ExitCode::SUCCESS)
    } else {
        Ok(ExitCode::from(3))
    }
}
