//! Gallery metadata and speaker-level ranking.
//!
//! Metadata is one JSON object per line:
//!
//! | field          | type   | notes                                    |
//! |----------------|--------|------------------------------------------|
//! | `speaker_id`   | string | stable id, e.g. `id10001`                |
//! | `display_name` | string | shown to users                           |
//! | `utterance_id` | string | unique across the corpus                 |
//! | `video_id`     | string | external video id                        |
//! | `start_frame`  | number | clip start in video frames               |
//! | `end_frame`    | number | clip end in video frames                 |
//! | `fps`          | number | optional, defaults to 25                 |
//!
//! Rows of one speaker need not be contiguous.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plda::IdentificationIndex;

pub const DEFAULT_FPS: f64 = 25.0;
pub const DEFAULT_TOP_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRef {
    pub utterance_id: String,
    pub video_id: String,
    pub clip_start_s: f64,
    pub clip_end_s: f64,
}

impl UtteranceRef {
    pub fn duration_s(&self) -> f64 {
        self.clip_end_s - self.clip_start_s
    }

    pub fn video_url(&self) -> String {
        format!(
            "https://www.youtube.com/watch?v={}&t={}s",
            self.video_id,
            self.clip_start_s.max(0.0).floor() as u64
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerRecord {
    pub speaker_id: String,
    pub display_name: String,
    pub utterances: Vec<UtteranceRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedResult {
    pub rank: usize,
    pub speaker_id: String,
    pub display_name: String,
    pub best_utterance: UtteranceRef,
    pub score: f64,
    pub video_url: String,
}

/// Speakers are kept when they have more than `min_utterances` clips of at
/// least `min_duration_s`; only those clips are kept.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionRule {
    pub enabled: bool,
    pub min_utterances: usize,
    pub min_duration_s: f64,
}

impl Default for SelectionRule {
    fn default() -> Self {
        Self {
            enabled: true,
            min_utterances: 5,
            min_duration_s: 5.0,
        }
    }
}

impl SelectionRule {
    pub fn disabled() -> Self {
        Self {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn apply(&self, records: Vec<SpeakerRecord>) -> Vec<SpeakerRecord> {
        if !self.enabled {
            return records;
        }
        records
            .into_iter()
            .filter_map(|mut r| {
                // Small tolerance so 125 frames at 25 fps counts as 5 s.
                r.utterances
                    .retain(|u| u.duration_s() >= self.min_duration_s - 1e-9);
                (r.utterances.len() > self.min_utterances).then_some(r)
            })
            .collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MetadataRow {
    speaker_id: String,
    #[serde(alias = "name")]
    display_name: String,
    utterance_id: String,
    video_id: String,
    start_frame: f64,
    end_frame: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    fps: Option<f64>,
}

fn frames_to_ref(
    utterance_id: String,
    video_id: String,
    start_frame: f64,
    end_frame: f64,
    fps: f64,
) -> std::result::Result<UtteranceRef, String> {
    if !(fps > 0.0) || !fps.is_finite() {
        return Err(format!("fps must be positive, got {fps}"));
    }
    if !(start_frame >= 0.0) || !(end_frame > start_frame) {
        return Err(format!(
            "clip end frame {end_frame} must exceed start frame {start_frame}"
        ));
    }
    Ok(UtteranceRef {
        utterance_id,
        video_id,
        clip_start_s: start_frame / fps,
        clip_end_s: end_frame / fps,
    })
}

/// Groups rows into speaker records, preserving first-seen speaker order.
fn assemble(
    rows: Vec<(String, String, UtteranceRef)>,
    rule: &SelectionRule,
) -> Result<Vec<SpeakerRecord>> {
    let mut seen = HashSet::new();
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, SpeakerRecord> = HashMap::new();
    for (speaker_id, display_name, utt) in rows {
        if !seen.insert(utt.utterance_id.clone()) {
            return Err(Error::DuplicateUtterance(utt.utterance_id));
        }
        groups
            .entry(speaker_id.clone())
            .or_insert_with(|| {
                order.push(speaker_id.clone());
                SpeakerRecord {
                    speaker_id,
                    display_name,
                    utterances: Vec::new(),
                }
            })
            .utterances
            .push(utt);
    }
    let records = order
        .into_iter()
        .map(|id| groups.remove(&id).expect("grouped speaker"))
        .collect();
    Ok(rule.apply(records))
}

/// Parses JSON-lines metadata. Blank lines are skipped; line numbers are 1-based.
pub fn parse_metadata(text: &str, rule: &SelectionRule) -> Result<Vec<SpeakerRecord>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let row: MetadataRow = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let utt = frames_to_ref(
            row.utterance_id,
            row.video_id,
            row.start_frame,
            row.end_frame,
            row.fps.unwrap_or(DEFAULT_FPS),
        )
        .map_err(|message| Error::Parse {
            line: line_no,
            message,
        })?;
        rows.push((row.speaker_id, row.display_name, utt));
    }
    assemble(rows, rule)
}

/// Serializes records as metadata lines at `fps` frames per second.
pub fn write_metadata(records: &[SpeakerRecord], fps: f64) -> String {
    let mut out = String::new();
    for r in records {
        for u in &r.utterances {
            let row = MetadataRow {
                speaker_id: r.speaker_id.clone(),
                display_name: r.display_name.clone(),
                utterance_id: u.utterance_id.clone(),
                video_id: u.video_id.clone(),
                start_frame: u.clip_start_s * fps,
                end_frame: u.clip_end_s * fps,
                fps: (fps != DEFAULT_FPS).then_some(fps),
            };
            out.push_str(&serde_json::to_string(&row).expect("metadata row serializes"));
            out.push('\n');
        }
    }
    out
}

pub fn ingest_metadata(path: &Path, rule: &SelectionRule) -> Result<Vec<SpeakerRecord>> {
    parse_metadata(&fs::read_to_string(path)?, rule)
}

/// Reads a VoxCeleb-style tree `root/<speaker>/<video>/<clip>.txt`, where each
/// file has an `Identity :` header and a `FRAME X Y W H` track table.
/// Utterance ids are `<speaker>/<video>/<clip>`.
pub fn ingest_voxceleb_dir(root: &Path, fps: f64, rule: &SelectionRule) -> Result<Vec<SpeakerRecord>> {
    let mut rows = Vec::new();
    for speaker_dir in sorted_dirs(root)? {
        let speaker_id = file_name(&speaker_dir);
        for video_dir in sorted_dirs(&speaker_dir)? {
            let video_id = file_name(&video_dir);
            let mut clips: Vec<_> = fs::read_dir(&video_dir)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "txt"))
                .collect();
            clips.sort();
            for clip in clips {
                let stem = clip
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default();
                let (name, start, end) = parse_voxceleb_clip(&fs::read_to_string(&clip)?)
                    .map_err(|(line, message)| Error::Parse {
                        line,
                        message: format!("{}: {message}", clip.display()),
                    })?;
                let utt = frames_to_ref(
                    format!("{speaker_id}/{video_id}/{stem}"),
                    video_id.clone(),
                    start,
                    end,
                    fps,
                )
                .map_err(|message| Error::Parse { line: 0, message })?;
                let display = name.unwrap_or_else(|| speaker_id.clone());
                rows.push((speaker_id.clone(), display, utt));
            }
        }
    }
    assemble(rows, rule)
}

fn sorted_dirs(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

type ClipParse = std::result::Result<(Option<String>, f64, f64), (usize, String)>;

fn parse_voxceleb_clip(text: &str) -> ClipParse {
    let mut name = None;
    let mut in_table = false;
    let mut first = None;
    let mut last = None;
    for (i, line) in text.lines().enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        if in_table {
            let frame = t
                .split_whitespace()
                .next()
                .and_then(|f| f.parse::<f64>().ok())
                .ok_or((i + 1, format!("bad frame row '{t}'")))?;
            first.get_or_insert(frame);
            last = Some(frame);
        } else if t.starts_with("FRAME") {
            in_table = true;
        } else if let Some((key, value)) = t.split_once(':') {
            if key.trim() == "Identity" {
                name = Some(value.trim().replace('_', " "));
            }
        }
    }
    match (first, last) {
        (Some(a), Some(b)) => Ok((name, a, b)),
        _ => Err((0, "no frame rows".into())),
    }
}

/// Immutable speaker collection with an utterance lookup table.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    speakers: Vec<SpeakerRecord>,
    by_utterance: HashMap<String, (usize, usize)>,
}

impl Gallery {
    pub fn new(speakers: Vec<SpeakerRecord>) -> Result<Self> {
        let mut ids = HashSet::new();
        let mut by_utterance = HashMap::new();
        for (si, s) in speakers.iter().enumerate() {
            if !ids.insert(s.speaker_id.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "speaker id '{}' appears twice",
                    s.speaker_id
                )));
            }
            if s.utterances.is_empty() {
                return Err(Error::InvalidConfig(format!(
                    "speaker '{}' has no utterances",
                    s.speaker_id
                )));
            }
            for (ui, u) in s.utterances.iter().enumerate() {
                if !(u.clip_end_s > u.clip_start_s) {
                    return Err(Error::InvalidConfig(format!(
                        "utterance '{}' ends before it starts",
                        u.utterance_id
                    )));
                }
                if by_utterance.insert(u.utterance_id.clone(), (si, ui)).is_some() {
                    return Err(Error::DuplicateUtterance(u.utterance_id.clone()));
                }
            }
        }
        Ok(Self {
            speakers,
            by_utterance,
        })
    }

    pub fn speakers(&self) -> &[SpeakerRecord] {
        &self.speakers
    }

    pub fn len(&self) -> usize {
        self.speakers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speakers.is_empty()
    }

    pub fn num_utterances(&self) -> usize {
        self.by_utterance.len()
    }

    pub fn speaker(&self, speaker_id: &str) -> Option<&SpeakerRecord> {
        self.speakers.iter().find(|s| s.speaker_id == speaker_id)
    }

    /// Speaker record and utterance for an utterance id.
    pub fn lookup(&self, utterance_id: &str) -> Option<(&SpeakerRecord, &UtteranceRef)> {
        self.by_utterance
            .get(utterance_id)
            .map(|&(s, u)| (&self.speakers[s], &self.speakers[s].utterances[u]))
    }

    /// Resolves every index row to its gallery position once, so ranking a
    /// probe needs no string lookups.
    pub fn assign_rows(&self, index: &IdentificationIndex) -> Result<RowAssignment> {
        let rows = index
            .utterance_ids()
            .iter()
            .map(|id| {
                self.by_utterance
                    .get(id)
                    .map(|&(s, u)| (s as u32, u as u32))
                    .ok_or_else(|| Error::MissingUtterance(id.clone()))
            })
            .collect::<Result<_>>()?;
        Ok(RowAssignment { rows })
    }
}

/// Maps index rows to `(speaker, utterance)` positions in a [`Gallery`].
#[derive(Debug, Clone, PartialEq)]
pub struct RowAssignment {
    rows: Vec<(u32, u32)>,
}

impl RowAssignment {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Top-`k` speakers by their best utterance score.
pub fn rank_speakers(
    scores: &[f64],
    index: &IdentificationIndex,
    gallery: &Gallery,
    k: usize,
) -> Result<Vec<RankedResult>> {
    if gallery.is_empty() || index.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let assignment = gallery.assign_rows(index)?;
    rank_assigned(scores, &assignment, gallery, k)
}

/// [`rank_speakers`] with a precomputed row assignment.
pub fn rank_assigned(
    scores: &[f64],
    assignment: &RowAssignment,
    gallery: &Gallery,
    k: usize,
) -> Result<Vec<RankedResult>> {
    if gallery.is_empty() || assignment.is_empty() {
        return Err(Error::EmptyGallery);
    }
    if k == 0 {
        return Err(Error::InvalidConfig("k must be at least 1".into()));
    }
    if scores.len() != assignment.len() {
        return Err(Error::DimensionMismatch {
            expected: assignment.len(),
            actual: scores.len(),
        });
    }
    let mut best: Vec<Option<(f64, u32)>> = vec![None; gallery.len()];
    for (&score, &(s, u)) in scores.iter().zip(&assignment.rows) {
        let slot = &mut best[s as usize];
        match slot {
            Some((b, _)) if score.total_cmp(b).is_le() => {}
            _ => *slot = Some((score, u)),
        }
    }
    let mut ranked: Vec<(usize, f64, u32)> = best
        .iter()
        .enumerate()
        .filter_map(|(s, b)| b.map(|(score, u)| (s, score, u)))
        .collect();
    ranked.sort_by(|a, b| {
        b.1.total_cmp(&a.1).then_with(|| {
            gallery.speakers[a.0]
                .speaker_id
                .cmp(&gallery.speakers[b.0].speaker_id)
        })
    });
    Ok(ranked
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (s, score, u))| {
            let sp = &gallery.speakers[s];
            let utt = sp.utterances[u as usize].clone();
            RankedResult {
                rank: i + 1,
                speaker_id: sp.speaker_id.clone(),
                display_name: sp.display_name.clone(),
                video_url: utt.video_url(),
                best_utterance: utt,
                score,
            }
        })
        .collect())
}

/// Speaker-id-sorted view, handy for deterministic listings.
pub fn speakers_by_id(gallery: &Gallery) -> BTreeMap<&str, &SpeakerRecord> {
    gallery
        .speakers()
        .iter()
        .map(|s| (s.speaker_id.as_str(), s))
        .collect()
}
