//! Evaluation harnesses: EER, top-k rank testing, length sweep and timing statistics.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};
use crate::gallery::RankedResult;
use crate::pipeline::Engine;

/// Equal error rate in percent, accepting trials with `score >= threshold`.
///
/// Sweeps the distinct score values in ascending order and linearly
/// interpolates between the last operating point with FAR > FRR and the first
/// with FAR <= FRR.
pub fn eer(scores: &[f64], is_target: &[bool]) -> Result<f64> {
    let (n_t, n_n) = check_trials(scores, is_target)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Threshold at the lowest score: everything accepted.
    let (mut rejected_t, mut rejected_n) = (0usize, 0usize);
    let mut prev = (1.0, 0.0);
    let mut i = 0;
    while i < order.len() {
        let far = 1.0 - rejected_n as f64 / n_n as f64;
        let frr = rejected_t as f64 / n_t as f64;
        if frr >= far {
            let (pf, pr) = prev;
            let gap_prev = pf - pr;
            let gap_cur = far - frr;
            let t = if gap_prev - gap_cur > 0.0 {
                gap_prev / (gap_prev - gap_cur)
            } else {
                1.0
            };
            return Ok(100.0 * (pf + t * (far - pf)));
        }
        prev = (far, frr);
        // Raise the threshold past every trial tied at this score.
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if is_target[order[i]] {
                rejected_t += 1;
            } else {
                rejected_n += 1;
            }
            i += 1;
        }
    }
    // Threshold above every score: FAR = 0, FRR = 1.
    let (pf, pr) = prev;
    let gap_prev = pf - pr;
    let t = gap_prev / (gap_prev + 1.0);
    Ok(100.0 * pf * (1.0 - t))
}

fn check_trials(scores: &[f64], is_target: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != is_target.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            actual: is_target.len(),
        });
    }
    let n_t = is_target.iter().filter(|&&t| t).count();
    let n_n = is_target.len() - n_t;
    if n_t == 0 || n_n == 0 {
        return Err(Error::InvalidConfig(
            "EER needs at least one target and one non-target trial".into(),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidConfig("NaN trial score".into()));
    }
    Ok((n_t, n_n))
}

/// `O(n²)` oracle: the smallest `max(FAR, FRR)` over all distinct thresholds.
pub fn eer_brute_force(scores: &[f64], is_target: &[bool]) -> Result<f64> {
    let (n_t, n_n) = check_trials(scores, is_target)?;
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.push(f64::INFINITY);
    let mut best = f64::INFINITY;
    for &th in &thresholds {
        let mut fa = 0;
        let mut fr = 0;
        for (s, &t) in scores.iter().zip(is_target) {
            let accept = *s >= th;
            if t && !accept {
                fr += 1;
            }
            if !t && accept {
                fa += 1;
            }
        }
        best = best.min((fa as f64 / n_n as f64).max(fr as f64 / n_t as f64));
    }
    Ok(100.0 * best)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRank {
    pub clip_id: String,
    pub speaker_id: String,
    /// 1-based list position, `None` when absent from the list.
    pub rank: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub clips: Vec<ClipRank>,
    pub top1: f64,
    pub top3: f64,
    pub top5: f64,
}

pub fn position_of(results: &[RankedResult], speaker_id: &str) -> Option<usize> {
    results.iter().find(|r| r.speaker_id == speaker_id).map(|r| r.rank)
}

impl RankReport {
    pub fn from_clips(clips: Vec<ClipRank>) -> Self {
        let n = clips.len().max(1) as f64;
        let pct = |k: usize| 100.0 * clips.iter().filter(|c| c.rank.is_some_and(|r| r <= k)).count() as f64 / n;
        Self {
            top1: pct(1),
            top3: pct(3),
            top5: pct(5),
            clips,
        }
    }

    /// Per-speaker list positions (`x` for a miss) and top-k counts, with a percentage totals row.
    pub fn table(&self) -> String {
        let mut by_speaker: BTreeMap<&str, Vec<Option<usize>>> = BTreeMap::new();
        for c in &self.clips {
            by_speaker.entry(&c.speaker_id).or_default().push(c.rank);
        }
        let width = by_speaker.keys().map(|k| k.len()).max().unwrap_or(7).max(7);
        let mut out = String::new();
        let _ = writeln!(out, "{:<width$}  {:<12} {:>5} {:>5} {:>5}", "speaker", "positions", "top1", "top3", "top5");
        for (spk, ranks) in &by_speaker {
            let positions: String = ranks
                .iter()
                .map(|r| match r {
                    Some(p) if *p < 10 => char::from_digit(*p as u32, 10).unwrap_or('x'),
                    Some(_) | None => 'x',
                })
                .collect();
            let count = |k: usize| ranks.iter().filter(|r| r.is_some_and(|p| p <= k)).count();
            let _ = writeln!(
                out,
                "{spk:<width$}  {positions:<12} {:>5} {:>5} {:>5}",
                count(1),
                count(3),
                count(5)
            );
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:<12} {:>5.0} {:>5.0} {:>5.0}",
            "total (%)", "", self.top1, self.top3, self.top5
        );
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("clip_id,speaker_id,rank\n");
        for c in &self.clips {
            let rank = c.rank.map_or("x".to_string(), |r| r.to_string());
            let _ = writeln!(out, "{},{},{}", c.clip_id, c.speaker_id, rank);
        }
        out
    }
}

/// A labeled test clip for rank testing and the length sweep.
#[derive(Debug, Clone)]
pub struct LabeledClip {
    pub clip_id: String,
    pub speaker_id: String,
    pub clip: AudioClip,
}

/// Ranks each clip against the engine's gallery (top-5 lists).
///
/// Labels not enrolled in the gallery are an error unless `allow_unknown`,
/// in which case those clips count as misses.
pub fn rank_test(engine: &Engine, clips: &[LabeledClip], allow_unknown: bool) -> Result<RankReport> {
    if !allow_unknown {
        if let Some(c) = clips.iter().find(|c| engine.gallery().speaker(&c.speaker_id).is_none()) {
            return Err(Error::UnknownSpeakerLabel(c.speaker_id.clone()));
        }
    }
    let ranks = clips
        .par_iter()
        .map(|c| {
            let id = engine.identify_clip(&c.clip, 5)?;
            Ok(ClipRank {
                clip_id: c.clip_id.clone(),
                speaker_id: c.speaker_id.clone(),
                rank: position_of(&id.results, &c.speaker_id),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(RankReport::from_clips(ranks))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub length_s: f64,
    pub k: usize,
    pub accuracy_pct: f64,
}

pub const SWEEP_KS: [usize; 3] = [1, 3, 5];

/// Top-1/3/5 accuracy with every clip truncated (before VAD) to each length.
/// Clips whose truncated audio yields no usable frames count as misses.
pub fn length_sweep(engine: &Engine, clips: &[LabeledClip], lengths_s: &[f64]) -> Result<Vec<SweepRow>> {
    let longest = lengths_s.iter().cloned().fold(0.0, f64::max);
    for c in clips {
        // Allow one sample of rounding slack.
        if c.clip.duration_s() + 1.0 / f64::from(c.clip.sample_rate_hz()) < longest {
            return Err(Error::ClipTooShort {
                id: c.clip_id.clone(),
                seconds: c.clip.duration_s(),
                required: longest,
            });
        }
    }
    if let Some(c) = clips.iter().find(|c| engine.gallery().speaker(&c.speaker_id).is_none()) {
        return Err(Error::UnknownSpeakerLabel(c.speaker_id.clone()));
    }
    let mut rows = Vec::with_capacity(lengths_s.len() * SWEEP_KS.len());
    for &len in lengths_s {
        let ranks: Vec<Option<usize>> = clips
            .par_iter()
            .map(|c| match engine.identify_clip(&c.clip.truncated(len), 5) {
                Ok(id) => Ok(position_of(&id.results, &c.speaker_id)),
                Err(Error::TooShort { .. } | Error::AllFramesRejected) => Ok(None),
                Err(e) => Err(e),
            })
            .collect::<Result<_>>()?;
        for k in SWEEP_KS {
            let hits = ranks.iter().filter(|r| r.is_some_and(|p| p <= k)).count();
            rows.push(SweepRow {
                length_s: len,
                k,
                accuracy_pct: 100.0 * hits as f64 / clips.len().max(1) as f64,
            });
        }
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("length_s,k,accuracy_pct\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{:.2}", r.length_s, r.k, r.accuracy_pct);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub median: f64,
    pub mean: f64,
    pub sd: f64,
}

/// Median, mean and sample standard deviation.
pub fn summarize(samples: &[f64]) -> Summary {
    if samples.is_empty() {
        return Summary {
            median: f64::NAN,
            mean: f64::NAN,
            sd: f64::NAN,
        };
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    let median = if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    };
    let mean = s.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        s.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    Summary {
        median,
        mean,
        sd: var.sqrt(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Ordinary least squares `y ≈ slope · x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy > 0.0 { sxy * sxy / (sxx * syy) } else { 1.0 };
    LinearFit { slope, intercept, r2 }
}
