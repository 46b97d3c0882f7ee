use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::Serialize;
use voicerank_core::container::ModelBundle;
use voicerank_core::embedding::IVector;
use voicerank_core::eval::{self, eer, sweep_csv};
use voicerank_core::pipeline::Engine;
use voicerank_core::plda::score_pairwise;
use voicerank_core::Error;

use crate::corpus::{read_csv, TrialLabel, TrialRow, UtteranceList};
use crate::models::embed_list;

#[derive(Debug, Serialize)]
struct ScoredTrial<'a> {
    enroll_utterance_id: &'a str,
    test_utterance_id: &'a str,
    label: TrialLabel,
    score: f64,
}

fn load_bundle(path: &Path) -> anyhow::Result<ModelBundle> {
    ModelBundle::load(path).with_context(|| format!("loading {}", path.display()))
}

pub fn eval_eer(
    models: &Path,
    lists: &[PathBuf],
    trials_path: &Path,
    train_ids: Option<&Path>,
    output: Option<&Path>,
) -> anyhow::Result<()> {
    let bundle = load_bundle(models)?;
    let trials: Vec<TrialRow> = read_csv(trials_path)?;
    let needed: BTreeSet<&str> = trials
        .iter()
        .flat_map(|t| [t.enroll_utterance_id.as_str(), t.test_utterance_id.as_str()])
        .collect();

    let mut ivectors: HashMap<String, IVector> = HashMap::new();
    for path in lists {
        let mut list = UtteranceList::read(path)?;
        list.rows.retain(|r| needed.contains(r.utterance_id.as_str()));
        for row in embed_list(&bundle, &list)? {
            let iv = row.to_ivector()?;
            ivectors.insert(row.utterance_id, iv);
        }
    }
    let mut scored = Vec::with_capacity(trials.len());
    for t in &trials {
        let get = |id: &str| ivectors.get(id).ok_or_else(|| Error::MissingUtterance(id.to_string()));
        let score = score_pairwise(get(&t.enroll_utterance_id)?, get(&t.test_utterance_id)?, &bundle.plda)?;
        scored.push(ScoredTrial {
            enroll_utterance_id: &t.enroll_utterance_id,
            test_utterance_id: &t.test_utterance_id,
            label: t.label,
            score,
        });
    }
    let scores: Vec<f64> = scored.iter().map(|s| s.score).collect();
    let targets: Vec<bool> = scored.iter().map(|s| s.label == TrialLabel::Same).collect();
    let rate = eer(&scores, &targets)?;

    let split = match train_ids {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            let trained: HashSet<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
            if needed.iter().any(|id| trained.contains(id)) {
                "contaminated"
            } else {
                "clean"
            }
        }
        None => "unlabeled",
    };
    let n_target = targets.iter().filter(|&&t| t).count();
    println!("trials,target,impostor,split,eer_pct");
    println!(
        "{},{},{},{split},{rate:.3}",
        scored.len(),
        n_target,
        scored.len() - n_target
    );
    if let Some(out) = output {
        crate::corpus::write_csv(out, &scored)?;
    }
    Ok(())
}

fn engine_and_clips(models: &Path, clips: &Path) -> anyhow::Result<(Engine, Vec<eval::LabeledClip>)> {
    let engine = Engine::new(load_bundle(models)?, None)?;
    let clips = UtteranceList::read(clips)?.labeled_clips()?;
    Ok((engine, clips))
}

pub fn rank_test(models: &Path, clips: &Path, allow_unknown: bool, output: Option<&Path>) -> anyhow::Result<()> {
    let (engine, clips) = engine_and_clips(models, clips)?;
    let report = eval::rank_test(&engine, &clips, allow_unknown)?;
    print!("{}", report.table());
    if let Some(out) = output {
        std::fs::write(out, report.to_csv()).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

pub fn length_sweep(models: &Path, clips: &Path, lengths: &[f64], output: Option<&Path>) -> anyhow::Result<()> {
    let (engine, clips) = engine_and_clips(models, clips)?;
    let rows = eval::length_sweep(&engine, &clips, lengths)?;
    let csv = sweep_csv(&rows);
    print!("{csv}");
    if let Some(out) = output {
        std::fs::write(out, csv).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

