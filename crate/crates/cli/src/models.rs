use std::collections::HashMap;
use std::path::Path;
use std::time::Instant;

use anyhow::{bail, Context};
use rayon::prelude::*;
use tracing::{info, warn};
use voicerank_core::container::ModelBundle;
use voicerank_core::features::extract_features;
use voicerank_core::gallery::{ingest_metadata, SelectionRule, SpeakerRecord};
use voicerank_core::pipeline::Embedder;
use voicerank_core::plda::{build_index as build_plda_index, IndexPrecision};
use voicerank_core::training::{train_models, TrainConfig, TrainingUtterance};

use crate::corpus::{read_embeddings, write_embeddings, EmbeddingRow, UtteranceList};
use crate::Preset;

pub fn load_train_config(path: Option<&Path>, preset: Preset, seed: Option<u64>) -> anyhow::Result<TrainConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            toml::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => match preset {
            Preset::Full => TrainConfig::default(),
            Preset::Desk => TrainConfig::desk(),
        },
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn train(
    utterances: &Path,
    config: Option<&Path>,
    preset: Preset,
    seed: Option<u64>,
    output: &Path,
    ids_out: Option<&Path>,
) -> anyhow::Result<()> {
    let cfg = load_train_config(config, preset, seed)?;
    let list = UtteranceList::read(utterances)?;
    if list.rows.is_empty() {
        bail!("{} lists no utterances", utterances.display());
    }
    let t = Instant::now();
    let data = list
        .rows
        .par_iter()
        .map(|r| {
            let clip = list.load_clip(r)?;
            let features = extract_features(&clip, &cfg.features)
                .with_context(|| format!("features of {}", r.utterance_id))?;
            Ok(TrainingUtterance {
                utterance_id: r.utterance_id.clone(),
                speaker_id: r.speaker_id.clone(),
                features,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    let feature_s = t.elapsed().as_secs_f64();
    info!(utterances = data.len(), seconds = feature_s, "features extracted");

    let (bundle, report) = train_models(&data, &cfg)?;
    bundle.save(output).with_context(|| format!("writing {}", output.display()))?;
    if let Some(path) = ids_out {
        let mut text = String::new();
        for &i in &report.used_utterances {
            text.push_str(&data[i].utterance_id);
            text.push('\n');
        }
        if let Err(e) = std::fs::write(path, text) {
            let _ = std::fs::remove_file(output);
            return Err(e).with_context(|| format!("writing {}", path.display()));
        }
    }

    println!("stage,seconds,utterances");
    println!("features,{feature_s:.3},{}", data.len());
    for (stage, secs) in &report.stage_seconds {
        let n = match stage.as_str() {
            "ubm" => report.ubm_utterances,
            "ppca" => report.ppca_utterances,
            "ivectors" | "plda" => report.plda_utterances,
            _ => data.len(),
        };
        println!("{stage},{secs:.3},{n}");
    }
    info!(path = %output.display(), "model container written");
    Ok(())
}

fn embedder_of(bundle: &ModelBundle) -> anyhow::Result<Embedder> {
    Ok(Embedder::new(
        bundle.meta.clone(),
        bundle.ubm.clone(),
        bundle.ppca.clone(),
        bundle.global_mean.clone(),
    )?)
}

/// Embeds every listed utterance; utterances the front end rejects are skipped with a warning.
pub fn embed_list(bundle: &ModelBundle, list: &UtteranceList) -> anyhow::Result<Vec<EmbeddingRow>> {
    let embedder = embedder_of(bundle)?;
    let results: Vec<anyhow::Result<Option<EmbeddingRow>>> = list
        .rows
        .par_iter()
        .map(|r| {
            let clip = list.load_clip(r)?;
            match embedder.embed(&clip) {
                Ok(iv) => Ok(Some(EmbeddingRow {
                    utterance_id: r.utterance_id.clone(),
                    speaker_id: r.speaker_id.clone(),
                    ivector: iv.eta,
                })),
                Err(e) => {
                    warn!(utterance = %r.utterance_id, "skipped: {e}");
                    Ok(None)
                }
            }
        })
        .collect();
    let mut rows = Vec::with_capacity(results.len());
    for r in results {
        rows.extend(r?);
    }
    Ok(rows)
}

pub fn enroll(models: &Path, utterances: &Path, output: &Path) -> anyhow::Result<()> {
    let bundle = ModelBundle::load(models).with_context(|| format!("loading {}", models.display()))?;
    let list = UtteranceList::read(utterances)?;
    let rows = embed_list(&bundle, &list)?;
    write_embeddings(output, &rows)?;
    println!(
        "embedded {} of {} utterances into {}",
        rows.len(),
        list.rows.len(),
        output.display()
    );
    Ok(())
}

/// Keeps gallery utterances that have an embedding; speakers left empty are dropped.
fn restrict_gallery(records: Vec<SpeakerRecord>, have: &HashMap<&str, usize>) -> (Vec<SpeakerRecord>, usize) {
    let mut dropped = 0;
    let kept = records
        .into_iter()
        .filter_map(|mut r| {
            let before = r.utterances.len();
            r.utterances.retain(|u| have.contains_key(u.utterance_id.as_str()));
            dropped += before - r.utterances.len();
            (!r.utterances.is_empty()).then_some(r)
        })
        .collect();
    (kept, dropped)
}

pub fn build_index(
    models: &Path,
    embeddings: &Path,
    metadata: &Path,
    select: bool,
    precision: IndexPrecision,
    output: &Path,
) -> anyhow::Result<()> {
    let mut bundle = ModelBundle::load(models).with_context(|| format!("loading {}", models.display()))?;
    let rule = if select { SelectionRule::default() } else { SelectionRule::disabled() };
    let records = ingest_metadata(metadata, &rule).with_context(|| format!("reading {}", metadata.display()))?;
    let rows = read_embeddings(embeddings)?;
    let by_id: HashMap<&str, usize> = rows.iter().enumerate().map(|(i, r)| (r.utterance_id.as_str(), i)).collect();
    let (records, dropped) = restrict_gallery(records, &by_id);
    if dropped > 0 {
        warn!(dropped, "gallery utterances without embeddings were left out");
    }
    let mut enrolled = Vec::new();
    for r in &records {
        for u in &r.utterances {
            let row = &rows[by_id[u.utterance_id.as_str()]];
            enrolled.push((u.utterance_id.clone(), row.to_ivector()?));
        }
    }
    let index = build_plda_index(&enrolled, &bundle.plda, precision)?;
    println!(
        "indexed {} utterances of {} speakers ({:?} rows)",
        index.len(),
        records.len(),
        precision
    );
    bundle.index = Some(index);
    bundle.gallery = Some(records);
    bundle.save(output).with_context(|| format!("writing {}", output.display()))?;
    Ok(())
}
