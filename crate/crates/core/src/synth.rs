//! Synthetic corpora with known speaker identity.
//!
//! [`SpeakerVoice`] is a small source-filter model: a jittered glottal pulse
//! train through a formant cascade for vowels, shaped noise for fricatives,
//! and digital silence for pauses. Voices differ in pitch, vocal-tract scale,
//! per-vowel formant targets, spectral tilt, an extra fixed resonance and
//! speaking habits; `separation` scales how far a voice strays from the
//! population average. Each utterance adds session effects (pitch drift, a
//! channel tilt and background noise).
//!
//! The i-vector level generator draws labeled vectors directly from a PLDA
//! model for back-end tests that do not need audio.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::audio::{AudioClip, CANONICAL_RATE_HZ};
use crate::embedding::IVector;
use crate::error::Result;
use crate::gallery::{SpeakerRecord, UtteranceRef};
use crate::linalg;
use crate::plda::{IdentificationIndex, IndexPrecision, PldaModel};

/// Average adult formants (F1..F4, Hz) for the vowel inventory.
const VOWELS: [[f64; 4]; 8] = [
    [730.0, 1090.0, 2440.0, 3400.0],
    [270.0, 2290.0, 3010.0, 3700.0],
    [300.0, 870.0, 2240.0, 3300.0],
    [530.0, 1840.0, 2480.0, 3500.0],
    [570.0, 840.0, 2410.0, 3300.0],
    [660.0, 1720.0, 2410.0, 3400.0],
    [490.0, 1350.0, 1690.0, 3300.0],
    [440.0, 1020.0, 2240.0, 3350.0],
];
const FORMANT_BW: [f64; 4] = [80.0, 100.0, 140.0, 200.0];

/// Separation at which a 50-speaker desk system is mostly, not always, right.
pub const SEPARATION_MODERATE: f64 = 0.35;
pub const SEPARATION_STRONG: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VoiceConfig {
    /// Scales the spread of speaker traits around the population mean.
    pub separation: f64,
    /// Scales per-utterance session effects.
    pub session_variability: f64,
    /// Background noise level in dB relative to full scale.
    pub noise_db: f64,
}

impl Default for VoiceConfig {
    fn default() -> Self {
        Self {
            separation: SEPARATION_MODERATE,
            session_variability: 1.0,
            noise_db: -50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerVoice {
    pub f0_hz: f64,
    pub formant_scale: f64,
    pub formants: Vec<[f64; 4]>,
    pub vowel_weights: Vec<f64>,
    /// Glottal source low-pass coefficient; larger is darker.
    pub tilt: f64,
    pub extra_resonance_hz: f64,
    pub extra_resonance_gain: f64,
    pub fricative_hz: f64,
    pub fricative_rate: f64,
    pub breathiness: f64,
    pub jitter: f64,
    pub vowel_ms: f64,
}

fn log_normal(rng: &mut ChaCha8Rng, sd: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    (sd * z).exp()
}

impl SpeakerVoice {
    pub fn sample(rng: &mut ChaCha8Rng, cfg: &VoiceConfig) -> Self {
        let s = cfg.separation;
        let f0_hz = (140.0 * log_normal(rng, 0.35 * s)).clamp(65.0, 320.0);
        let formant_scale = log_normal(rng, 0.08 * s);
        let formants = VOWELS
            .iter()
            .map(|v| {
                let mut f = [0.0; 4];
                for (i, base) in v.iter().enumerate() {
                    f[i] = base * formant_scale * log_normal(rng, 0.07 * s);
                }
                f
            })
            .collect();
        let vowel_weights = (0..VOWELS.len())
            .map(|_| log_normal(rng, 0.6 * s))
            .collect();
        Self {
            f0_hz,
            formant_scale,
            formants,
            vowel_weights,
            tilt: (0.75 + 0.15 * s * rng.random_range(-1.0..1.0)).clamp(0.3, 0.97),
            extra_resonance_hz: 3900.0 + 1300.0 * s.min(1.0) * rng.random_range(-1.0..1.0),
            extra_resonance_gain: (0.5 * s * rng.random_range(0.2..1.0)).min(0.9),
            fricative_hz: 5000.0 + 1500.0 * s.min(1.0) * rng.random_range(-1.0..1.0),
            fricative_rate: 0.25 + 0.15 * s.min(1.0) * rng.random_range(-1.0..1.0),
            breathiness: (0.15 * s * rng.random_range(0.0..1.0)).min(0.6),
            jitter: 0.0125 + 0.0075 * s.min(1.0) * rng.random_range(-1.0..1.0),
            vowel_ms: 160.0 * log_normal(rng, 0.2 * s),
        }
    }
}

/// Deterministic stream for `(seed, speaker, utterance)`.
pub fn stream_rng(seed: u64, speaker: usize, utterance: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((speaker as u64) << 24) ^ utterance as u64 ^ 0x5a5a_0000_0000_0000);
    rng
}

/// Voice of speaker `index` in the corpus with the given seed.
pub fn speaker_voice(seed: u64, index: usize, cfg: &VoiceConfig) -> SpeakerVoice {
    SpeakerVoice::sample(&mut stream_rng(seed, index, usize::MAX >> 40), cfg)
}

struct Resonator {
    b0: f64,
    a1: f64,
    a2: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new() -> Self {
        Self {
            b0: 0.0,
            a1: 0.0,
            a2: 0.0,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn tune(&mut self, freq: f64, bw: f64, fs: f64) {
        let freq = freq.min(0.45 * fs);
        let r = (-PI * bw / fs).exp();
        self.a1 = -2.0 * r * (2.0 * PI * freq / fs).cos();
        self.a2 = r * r;
        // Unit gain at DC.
        self.b0 = 1.0 + self.a1 + self.a2;
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.b0 * x - self.a1 * self.y1 - self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Synthesizes `duration_s` seconds of 16 kHz speech-like audio.
pub fn synthesize(voice: &SpeakerVoice, duration_s: f64, rng: &mut ChaCha8Rng, cfg: &VoiceConfig) -> AudioClip {
    let fs = CANONICAL_RATE_HZ as f64;
    let total = (duration_s * fs).round() as usize;
    let sv = cfg.session_variability;
    let f0_session = voice.f0_hz * log_normal(rng, 0.05 * sv);
    let formant_session = log_normal(rng, 0.015 * sv);
    let channel: f64 = (0.25 * sv * rng.sample::<f64, _>(StandardNormal)).clamp(-0.9, 0.9);
    let gain = rng.random_range(0.3..0.7);
    let noise_amp = 10f64.powf(cfg.noise_db / 20.0);
    let weight_sum: f64 = voice.vowel_weights.iter().sum();

    let mut out = vec![0.0f64; total];
    let mut formant_filters: Vec<Resonator> = (0..4).map(|_| Resonator::new()).collect();
    let mut extra = Resonator::new();
    extra.tune(voice.extra_resonance_hz, 300.0, fs);
    let mut fric = Resonator::new();
    fric.tune(voice.fricative_hz, 1200.0, fs);
    let mut current = voice.formants[0];
    let mut tilt_state = [0.0f64; 2];
    let mut phase = 0.0f64;
    let mut pos = rng.random_range(0..(0.2 * fs) as usize);

    while pos < total {
        let roll: f64 = rng.random();
        if roll < 0.12 {
            // Pause: digital silence, dropped by VAD.
            pos += rng.random_range((0.06 * fs) as usize..(0.2 * fs) as usize);
            continue;
        }
        if roll < 0.12 + voice.fricative_rate * 0.5 {
            let len = rng.random_range((0.05 * fs) as usize..(0.12 * fs) as usize);
            let end = (pos + len).min(total);
            for (i, o) in out[pos..end].iter_mut().enumerate() {
                let env = envelope(i, end - pos, fs);
                let n: f64 = rng.sample(StandardNormal);
                *o += 0.25 * env * fric.step(n) * 4.0;
            }
            pos = end;
            continue;
        }
        // Voiced segment with a target vowel drawn from speaker habits.
        let mut pick = rng.random_range(0.0..weight_sum);
        let mut vowel = 0;
        for (i, w) in voice.vowel_weights.iter().enumerate() {
            if pick < *w {
                vowel = i;
                break;
            }
            pick -= w;
        }
        let target = voice.formants[vowel].map(|f| f * formant_session);
        let len = ((voice.vowel_ms * log_normal(rng, 0.3)) * 1e-3 * fs) as usize;
        let end = (pos + len.max(400)).min(total);
        let glide = (0.04 * fs) as usize;
        let start_formants = current;
        let contour = rng.random_range(-0.08..0.08);
        for i in 0..end - pos {
            if i % 32 == 0 {
                let a = (i as f64 / glide as f64).min(1.0);
                for k in 0..4 {
                    current[k] = start_formants[k] + a * (target[k] - start_formants[k]);
                    formant_filters[k].tune(current[k], FORMANT_BW[k], fs);
                }
            }
            let t = i as f64 / (end - pos) as f64;
            let f0 = f0_session * (1.0 + contour * (t - 0.5));
            phase += f0 / fs;
            let mut x = 0.0;
            if phase >= 1.0 {
                phase -= 1.0 + voice.jitter * rng.sample::<f64, _>(StandardNormal);
                phase = phase.max(0.0);
                x = 1.0;
            }
            tilt_state[0] = (1.0 - voice.tilt) * x + voice.tilt * tilt_state[0];
            tilt_state[1] = (1.0 - voice.tilt) * tilt_state[0] + voice.tilt * tilt_state[1];
            let aspiration: f64 = voice.breathiness * 0.02 * rng.sample::<f64, _>(StandardNormal);
            let mut y = tilt_state[1] * 20.0 + aspiration;
            for f in formant_filters.iter_mut() {
                y = f.step(y);
            }
            y += voice.extra_resonance_gain * extra.step(y);
            out[pos + i] += envelope(i, end - pos, fs) * y;
        }
        pos = end;
    }

    // Session channel: first-order tilt, level, then background noise.
    let mut prev = 0.0;
    let peak = out.iter().fold(0.0f64, |m, x| m.max(x.abs())).max(1e-12);
    let samples: Vec<f32> = out
        .iter()
        .map(|&x| {
            let y = x + channel * prev;
            prev = x;
            let speech = gain * y / peak / (1.0 + channel.abs());
            let noise = if x != 0.0 {
                noise_amp * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            (speech + noise).clamp(-1.0, 1.0) as f32
        })
        .collect();
    AudioClip::new(samples).expect("non-empty synthetic clip")
}

fn envelope(i: usize, len: usize, fs: f64) -> f64 {
    let ramp = ((0.015 * fs) as usize).min(len / 2).max(1);
    if i < ramp {
        0.5 - 0.5 * (PI * i as f64 / ramp as f64).cos()
    } else if i + ramp > len {
        0.5 - 0.5 * (PI * (len - i) as f64 / ramp as f64).cos()
    } else {
        1.0
    }
}

/// Utterance `utterance` of speaker `speaker`, reproducible from the seed.
pub fn speaker_utterance(
    seed: u64,
    speaker: usize,
    utterance: usize,
    duration_s: f64,
    cfg: &VoiceConfig,
) -> AudioClip {
    let voice = speaker_voice(seed, speaker, cfg);
    synthesize(&voice, duration_s, &mut stream_rng(seed, speaker, utterance), cfg)
}

pub fn speaker_id(index: usize) -> String {
    format!("synth{index:04}")
}

pub fn display_name(index: usize) -> String {
    format!("Synthetic Speaker {index}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Enroll,
    Test,
}

/// Shape of a synthetic speaker corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusPlan {
    pub speakers: usize,
    pub enroll_per_speaker: usize,
    pub test_per_speaker: usize,
    /// Enrollment durations are drawn uniformly from this range.
    pub enroll_s: (f64, f64),
    pub test_s: f64,
    pub seed: u64,
    pub voice: VoiceConfig,
}

impl Default for CorpusPlan {
    fn default() -> Self {
        Self {
            speakers: 50,
            enroll_per_speaker: 10,
            test_per_speaker: 5,
            enroll_s: (6.0, 9.0),
            test_s: 10.0,
            seed: 1,
            voice: VoiceConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct CorpusUtterance {
    pub utterance_id: String,
    pub speaker_index: usize,
    pub speaker_id: String,
    pub role: Role,
    pub clip: AudioClip,
}

/// Generates every utterance of the plan, enrollment first for each speaker.
pub fn generate_corpus(plan: &CorpusPlan) -> Vec<CorpusUtterance> {
    let per = plan.enroll_per_speaker + plan.test_per_speaker;
    (0..plan.speakers * per)
        .into_par_iter()
        .map(|i| {
            let (s, u) = (i / per, i % per);
            let role = if u < plan.enroll_per_speaker { Role::Enroll } else { Role::Test };
            let mut rng = stream_rng(plan.seed, s, u);
            let duration = match role {
                Role::Enroll => rng.random_range(plan.enroll_s.0..=plan.enroll_s.1),
                Role::Test => plan.test_s,
            };
            let voice = speaker_voice(plan.seed, s, &plan.voice);
            let clip = synthesize(&voice, duration, &mut rng, &plan.voice);
            CorpusUtterance {
                utterance_id: format!("{}-{u:03}", speaker_id(s)),
                speaker_index: s,
                speaker_id: speaker_id(s),
                role,
                clip,
            }
        })
        .collect()
}

/// Gallery metadata for the enrollment utterances of a corpus.
pub fn gallery_records(corpus: &[CorpusUtterance]) -> Vec<SpeakerRecord> {
    let mut records: Vec<SpeakerRecord> = Vec::new();
    for u in corpus.iter().filter(|u| u.role == Role::Enroll) {
        if records.last().is_none_or(|r| r.speaker_id != u.speaker_id) {
            records.push(SpeakerRecord {
                speaker_id: u.speaker_id.clone(),
                display_name: display_name(u.speaker_index),
                utterances: Vec::new(),
            });
        }
        let record = records.last_mut().expect("record");
        let n = record.utterances.len();
        let start = 30.0 * n as f64;
        record.utterances.push(UtteranceRef {
            utterance_id: u.utterance_id.clone(),
            video_id: format!("{}v{n}", u.speaker_id),
            clip_start_s: start,
            clip_end_s: start + u.clip.duration_s(),
        });
    }
    records
}

/// Random PLDA model with well-conditioned residual covariance.
pub fn random_plda_model(rng: &mut ChaCha8Rng, ivector_dim: usize, speaker_dim: usize) -> Result<PldaModel> {
    let d = ivector_dim;
    let v = DMatrix::from_fn(d, speaker_dim, |_, _| rng.sample::<f64, _>(StandardNormal) / (d as f64).sqrt());
    let a = DMatrix::from_fn(d, d, |_, _| rng.sample::<f64, _>(StandardNormal));
    let sigma = (&a * a.transpose()) / (d as f64 * d as f64) + DMatrix::identity(d, d) * (0.2 / d as f64);
    let mu = (0..d).map(|_| 0.01 * rng.sample::<f64, _>(StandardNormal)).collect();
    PldaModel::from_parameters(mu, v, sigma)
}

pub fn random_unit_ivector(rng: &mut ChaCha8Rng, dim: usize) -> IVector {
    let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
    let n = linalg::norm(&v);
    IVector::normalized(v.into_iter().map(|x| x / n).collect()).expect("unit vector")
}

/// Draws raw (un-normalized) labeled i-vectors `μ + V y_s + ε` from `model`.
pub fn sample_plda_ivectors(
    model: &PldaModel,
    speakers: usize,
    per_speaker: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<(String, IVector)> {
    let d = model.ivector_dim();
    let k = model.speaker_dim();
    let chol = model
        .residual_covariance()
        .clone()
        .cholesky()
        .expect("model covariance is positive definite")
        .l();
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mu = DVector::from_column_slice(model.mean());
    let mut out = Vec::with_capacity(speakers * per_speaker);
    for s in 0..speakers {
        let y = DVector::from_fn(k, |_, _| normal.sample(rng));
        let center = &mu + model.speaker_loading() * y;
        for _ in 0..per_speaker {
            let eps = &chol * DVector::from_fn(d, |_, _| normal.sample(rng));
            out.push((speaker_id(s), IVector::raw((&center + eps).as_slice().to_vec())));
        }
    }
    out
}

/// Random index rows grouped `per_speaker` to a speaker, with matching gallery
/// records, for timing and scaling runs. Rows are drawn directly in the
/// requested precision so large `f32` galleries never exist as `f64`.
pub fn synthetic_index(
    seed: u64,
    n: usize,
    speaker_dim: usize,
    per_speaker: usize,
    precision: IndexPrecision,
) -> Result<(IdentificationIndex, Vec<SpeakerRecord>)> {
    const CHUNK: usize = 4096;
    let per_speaker = per_speaker.max(1);
    let k = speaker_dim;
    let ids: Vec<String> = (0..n)
        .map(|i| format!("g{:07}-{:03}", i / per_speaker, i % per_speaker))
        .collect();
    let nu: Vec<f64> = (0..n.div_ceil(CHUNK))
        .into_par_iter()
        .flat_map_iter(|c| {
            let mut rng = stream_rng(seed, usize::MAX, c);
            let len = CHUNK.min(n - c * CHUNK);
            (0..len).map(move |_| -1.0 - 0.1 * rng.sample::<f64, _>(StandardNormal).abs())
        })
        .collect();
    let fill = |c: usize, out: &mut dyn FnMut(f64)| {
        let mut rng = stream_rng(seed, usize::MAX - 1, c);
        let len = CHUNK.min(n - c * CHUNK);
        for _ in 0..len * k {
            out(0.05 * rng.sample::<f64, _>(StandardNormal));
        }
    };
    let index = match precision {
        IndexPrecision::F64 => {
            let mut d = vec![0.0f64; n * k];
            d.par_chunks_mut(CHUNK * k.max(1)).enumerate().for_each(|(c, dst)| {
                let mut it = dst.iter_mut();
                fill(c, &mut |x| *it.next().expect("chunk length") = x);
            });
            IdentificationIndex::from_parts(nu, d, ids, k, IndexPrecision::F64)?
        }
        IndexPrecision::F32 => {
            let mut d = vec![0.0f32; n * k];
            d.par_chunks_mut(CHUNK * k.max(1)).enumerate().for_each(|(c, dst)| {
                let mut it = dst.iter_mut();
                fill(c, &mut |x| *it.next().expect("chunk length") = x as f32);
            });
            IdentificationIndex::from_parts_f32(nu, d, ids, k)?
        }
    };
    let records = index
        .utterance_ids()
        .chunks(per_speaker)
        .enumerate()
        .map(|(s, utts)| SpeakerRecord {
            speaker_id: format!("g{s:07}"),
            display_name: format!("Gallery Speaker {s}"),
            utterances: utts
                .iter()
                .enumerate()
                .map(|(u, id)| UtteranceRef {
                    utterance_id: id.clone(),
                    video_id: format!("gv{s:07}x{u}"),
                    clip_start_s: 30.0 * u as f64,
                    clip_end_s: 30.0 * u as f64 + 8.0,
                })
                .collect(),
        })
        .collect();
    Ok((index, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{extract_features, FeatureConfig};

    #[test]
    fn synthetic_index_matches_its_gallery_in_both_precisions() {
        let (a, recs) = synthetic_index(3, 10_000, 7, 123, IndexPrecision::F64).unwrap();
        let (b, _) = synthetic_index(3, 10_000, 7, 123, IndexPrecision::F32).unwrap();
        assert_eq!(a.len(), 10_000);
        assert_eq!(recs.len(), 10_000usize.div_ceil(123));
        let g = crate::gallery::Gallery::new(recs).unwrap();
        g.assign_rows(&a).unwrap();
        for i in [0, 4095, 4096, 9999] {
            let (ra, rb) = (a.row(i), b.row(i));
            assert!(ra.iter().zip(&rb).all(|(x, y)| (x - y).abs() < 1e-7));
        }
        assert_eq!(a.nu(), b.nu());
        let (c, _) = synthetic_index(3, 10_000, 7, 123, IndexPrecision::F64).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn utterances_are_reproducible() {
        let cfg = VoiceConfig::default();
        let a = speaker_utterance(7, 3, 1, 2.0, &cfg);
        let b = speaker_utterance(7, 3, 1, 2.0, &cfg);
        let c = speaker_utterance(7, 3, 2, 2.0, &cfg);
        assert_eq!(a.samples(), b.samples());
        assert_ne!(a.samples(), c.samples());
        assert_eq!(a.samples().len(), 32000);
        assert!(a.samples().iter().all(|x| x.abs() <= 1.0));
    }

    #[test]
    fn pauses_are_dropped_by_vad() {
        let clip = speaker_utterance(1, 0, 0, 6.0, &VoiceConfig::default());
        let feats = extract_features(&clip, &FeatureConfig::default()).unwrap();
        assert!(feats.vad_kept_ratio() > 0.4 && feats.vad_kept_ratio() < 1.0);
    }

    #[test]
    fn separation_zero_makes_voices_identical() {
        let cfg = VoiceConfig {
            separation: 0.0,
            ..VoiceConfig::default()
        };
        let a = speaker_voice(1, 0, &cfg);
        let b = speaker_voice(1, 1, &cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn plda_samples_follow_the_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = random_plda_model(&mut rng, 10, 3).unwrap();
        let data = sample_plda_ivectors(&model, 4, 3, &mut rng);
        assert_eq!(data.len(), 12);
        assert_eq!(data[3].0, speaker_id(1));
        assert!(data.iter().all(|(_, iv)| iv.dim() == 10 && !iv.normalized));
    }
}
