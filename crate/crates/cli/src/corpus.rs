//! CSV file formats shared by the commands.
//!
//! Utterance lists (`enroll.csv`, `test.csv`) have the header
//! `utterance_id,speaker_id,path`; relative paths resolve against the list's
//! directory. Trial lists have `enroll_utterance_id,test_utterance_id,label`
//! with label `same` or `different`.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use voicerank_core::audio::{decode_wav, AudioClip};
use voicerank_core::embedding::IVector;
use voicerank_core::eval::LabeledClip;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRow {
    pub utterance_id: String,
    pub speaker_id: String,
    pub path: PathBuf,
}

#[derive(Debug, Clone)]
pub struct UtteranceList {
    base: PathBuf,
    pub rows: Vec<UtteranceRow>,
}

impl UtteranceList {
    pub fn read(path: &Path) -> anyhow::Result<Self> {
        let rows: Vec<UtteranceRow> = read_csv(path)?;
        let mut seen = HashMap::new();
        for (i, r) in rows.iter().enumerate() {
            if let Some(prev) = seen.insert(r.utterance_id.as_str(), i) {
                bail!(
                    "{}: utterance {:?} listed on rows {} and {}",
                    path.display(),
                    r.utterance_id,
                    prev + 2,
                    i + 2
                );
            }
        }
        Ok(Self {
            base: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            rows,
        })
    }

    pub fn audio_path(&self, row: &UtteranceRow) -> PathBuf {
        if row.path.is_relative() {
            self.base.join(&row.path)
        } else {
            row.path.clone()
        }
    }

    pub fn load_clip(&self, row: &UtteranceRow) -> anyhow::Result<AudioClip> {
        let path = self.audio_path(row);
        let bytes = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
        decode_wav(&bytes).with_context(|| format!("decoding {}", path.display()))
    }

    pub fn labeled_clips(&self) -> anyhow::Result<Vec<LabeledClip>> {
        self.rows
            .par_iter()
            .map(|r| {
                Ok(LabeledClip {
                    clip_id: r.utterance_id.clone(),
                    speaker_id: r.speaker_id.clone(),
                    clip: self.load_clip(r)?,
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrialLabel {
    Same,
    Different,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRow {
    pub enroll_utterance_id: String,
    pub test_utterance_id: String,
    pub label: TrialLabel,
}

/// One length-normalized i-vector per line of an embeddings JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRow {
    pub utterance_id: String,
    pub speaker_id: String,
    pub ivector: Vec<f64>,
}

impl EmbeddingRow {
    pub fn to_ivector(&self) -> anyhow::Result<IVector> {
        IVector::normalized(self.ivector.clone())
            .with_context(|| format!("embedding of {:?} is not length-normalized", self.utterance_id))
    }
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<Vec<T>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    reader
        .deserialize()
        .enumerate()
        .map(|(i, r)| r.with_context(|| format!("{}: row {}", path.display(), i + 2)))
        .collect()
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> anyhow::Result<()> {
    let mut writer = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        writer.serialize(r)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn read_embeddings(path: &Path) -> anyhow::Result<Vec<EmbeddingRow>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}: line {}", path.display(), i + 1)))
        .collect()
}

pub fn write_embeddings(path: &Path, rows: &[EmbeddingRow]) -> anyhow::Result<()> {
    let mut out = String::new();
    for r in rows {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))
}
