use std::collections::BTreeMap;
use std::path::Path;

use crate::corpus::{Waveform, NUM_CLASSES};
use crate::error::{invalid, Error, Result};
use crate::model::Model;
use crate::trainer::LoadedUtterance;

use super::report::{eval_view_for, Condition, EvalSettings};

/// One exported representation: calibrated for trnet kinds, raw otherwise.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRow {
    pub id: String,
    pub emotion: String,
    pub noise_set: String,
    pub snr: String,
    pub values: Vec<f64>,
}

pub fn collect_embeddings(
    model: &Model,
    utts: &[LoadedUtterance],
    matched: &[Waveform],
    unmatched: &[Waveform],
    settings: &EvalSettings,
) -> Result<Vec<EmbeddingRow>> {
    let enhancer = if model.kind.uses_enhancer() {
        Some(crate::enhance::enhancer_by_name(&settings.enhancer)?)
    } else {
        None
    };
    let mut rows = Vec::new();
    for u in utts {
        for cond in &settings.conditions {
            let view = eval_view_for(u, cond, 0, settings, matched, unmatched, enhancer.as_deref())?;
            let p = model.predict(&view.inputs())?;
            rows.push(EmbeddingRow {
                id: u.id.clone(),
                emotion: u.emotion.name().into(),
                noise_set: cond.noise_set.map_or("clean", |s| s.name()).into(),
                snr: cond.snr.map_or("clean".into(), |s| format!("{s}")),
                values: p.representation,
            });
        }
    }
    Ok(rows)
}

/// CSV with header `id,emotion,noise_set,snr,h0..h{D-1}`.
pub fn write_embeddings_csv(path: &Path, rows: &[EmbeddingRow]) -> Result<()> {
    let dims = rows.first().map_or(0, |r| r.values.len());
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(file);
    let mut header: Vec<String> = ["id", "emotion", "noise_set", "snr"].map(String::from).to_vec();
    header.extend((0..dims).map(|i| format!("h{i}")));
    w.write_record(&header)?;
    for r in rows {
        if r.values.len() != dims {
            return Err(invalid("embedding rows differ in dimension"));
        }
        let mut rec = vec![r.id.clone(), r.emotion.clone(), r.noise_set.clone(), r.snr.clone()];
        rec.extend(r.values.iter().map(|v| format!("{v:e}")));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_embeddings_csv(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() < 4 {
            return Err(invalid("embedding row has fewer than 4 columns"));
        }
        let values = rec
            .iter()
            .skip(4)
            .map(|v| v.parse::<f64>().map_err(|_| invalid(format!("bad embedding value '{v}'"))))
            .collect::<Result<_>>()?;
        rows.push(EmbeddingRow {
            id: rec[0].into(),
            emotion: rec[1].into(),
            noise_set: rec[2].into(),
            snr: rec[3].into(),
            values,
        });
    }
    Ok(rows)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Mean distance from each noisy-condition class centroid to the same
/// class's clean centroid, divided by the mean pairwise distance between
/// clean class centroids so models with different embedding scales compare.
pub fn centroid_shift(rows: &[EmbeddingRow]) -> Result<f64> {
    let mut groups: BTreeMap<(String, String, String), (Vec<f64>, usize)> = BTreeMap::new();
    for r in rows {
        let e = groups
            .entry((r.noise_set.clone(), r.snr.clone(), r.emotion.clone()))
            .or_insert_with(|| (vec![0.0; r.values.len()], 0));
        e.0.iter_mut().zip(&r.values).for_each(|(a, v)| *a += v);
        e.1 += 1;
    }
    let centroids: BTreeMap<_, Vec<f64>> = groups
        .into_iter()
        .map(|(k, (s, n))| (k, s.into_iter().map(|v| v / n as f64).collect()))
        .collect();
    let clean: Vec<(&String, &Vec<f64>)> = centroids
        .iter()
        .filter(|((set, _, _), _)| set == "clean")
        .map(|((_, _, emo), c)| (emo, c))
        .collect();
    if clean.len() < 2 || clean.len() > NUM_CLASSES {
        return Err(invalid("centroid shift needs clean embeddings of at least two classes"));
    }
    let mut sep = Vec::new();
    for i in 0..clean.len() {
        for j in i + 1..clean.len() {
            sep.push(dist(clean[i].1, clean[j].1));
        }
    }
    let separation = sep.iter().sum::<f64>() / sep.len() as f64;
    let mut shifts = Vec::new();
    for ((set, _, emo), c) in &centroids {
        if set == "clean" {
            continue;
        }
        if let Some((_, base)) = clean.iter().find(|(e, _)| *e == emo) {
            shifts.push(dist(c, base));
        }
    }
    if shifts.is_empty() || separation == 0.0 {
        return Err(invalid("centroid shift needs noisy embeddings and distinct clean centroids"));
    }
    Ok(shifts.iter().sum::<f64>() / shifts.len() as f64 / separation)
}

/// Conditions used by the embedding dump: clean plus the given noisy ones.
pub fn embedding_conditions(noisy: &[Condition]) -> Vec<Condition> {
    let mut out = vec![Condition::clean()];
    out.extend(noisy.iter().copied().filter(|c| c.noise_set.is_some()));
    out
}
