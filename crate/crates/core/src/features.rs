//! MFCC front end: 20 cepstra plus first and second order regression
//! deltas, an energy VAD and per-utterance mean/variance normalization.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::audio::AudioClip;
use crate::error::{Error, Result};

/// Width of every feature vector: statics, deltas and delta-deltas.
pub const FEATURE_DIM: usize = 60;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub frame_length_s: f64,
    pub frame_shift_s: f64,
    pub fft_size: usize,
    pub num_mel_filters: usize,
    pub low_freq_hz: f64,
    pub high_freq_hz: f64,
    pub num_cepstra: usize,
    pub pre_emphasis: f64,
    /// Half-width of the delta regression window, in frames.
    pub delta_window: usize,
    /// Frames more than this many dB below the loudest frame are dropped.
    pub vad_threshold_db: f64,
    /// Absolute frame power floor in dBFS; frames below it are always dropped.
    pub vad_floor_db: f64,
    /// Minimum number of analysis frames before VAD.
    pub min_frames: usize,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            frame_length_s: 0.025,
            frame_shift_s: 0.010,
            fft_size: 512,
            num_mel_filters: 27,
            low_freq_hz: 20.0,
            high_freq_hz: 7600.0,
            num_cepstra: 20,
            pre_emphasis: 0.97,
            delta_window: 2,
            vad_threshold_db: 30.0,
            vad_floor_db: -75.0,
            min_frames: 50,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_cepstra * 3 != FEATURE_DIM {
            return Err(Error::InvalidConfig(format!(
                "num_cepstra must be {} (got {})",
                FEATURE_DIM / 3,
                self.num_cepstra
            )));
        }
        if self.num_cepstra > self.num_mel_filters {
            return Err(Error::InvalidConfig(
                "more cepstra than mel filters".into(),
            ));
        }
        if !(self.frame_shift_s > 0.0 && self.frame_length_s >= self.frame_shift_s) {
            return Err(Error::InvalidConfig("frame length/shift".into()));
        }
        if !(0.0 <= self.low_freq_hz && self.low_freq_hz < self.high_freq_hz) {
            return Err(Error::InvalidConfig("mel filter band edges".into()));
        }
        if self.delta_window == 0 {
            return Err(Error::InvalidConfig("delta_window must be positive".into()));
        }
        Ok(())
    }
}

/// Row-major `frames x FEATURE_DIM` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    n_frames: usize,
    frame_hop_s: f64,
    vad_kept_ratio: f64,
}

impl FeatureMatrix {
    /// Builds a matrix from raw rows; used by training tools and tests.
    pub fn from_rows(data: Vec<f64>, frame_hop_s: f64) -> Result<Self> {
        if data.is_empty() || data.len() % FEATURE_DIM != 0 {
            return Err(Error::DimensionMismatch {
                expected: FEATURE_DIM,
                actual: data.len() % FEATURE_DIM,
            });
        }
        Ok(Self {
            n_frames: data.len() / FEATURE_DIM,
            data,
            frame_hop_s,
            vad_kept_ratio: 1.0,
        })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dim(&self) -> usize {
        FEATURE_DIM
    }

    pub fn frame_hop_s(&self) -> f64 {
        self.frame_hop_s
    }

    pub fn vad_kept_ratio(&self) -> f64 {
        self.vad_kept_ratio
    }

    pub fn row(&self, t: usize) -> &[f64] {
        &self.data[t * FEATURE_DIM..(t + 1) * FEATURE_DIM]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> {
        self.data.chunks_exact(FEATURE_DIM)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Stacks two utterances' frames.
    pub fn concat(&self, other: &FeatureMatrix) -> FeatureMatrix {
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        FeatureMatrix {
            n_frames: self.n_frames + other.n_frames,
            data,
            frame_hop_s: self.frame_hop_s,
            vad_kept_ratio: 1.0,
        }
    }

    /// Normalizes every column to zero mean and unit variance in place.
    pub fn normalize(&mut self) {
        cmvn(&mut self.data, FEATURE_DIM);
    }
}

/// Per-column mean/variance normalization of a row-major matrix.
/// Constant columns are centered but left unscaled.
pub fn cmvn(data: &mut [f64], dim: usize) {
    let n = data.len() / dim;
    if n == 0 {
        return;
    }
    let mut mean = vec![0.0; dim];
    for row in data.chunks_exact(dim) {
        for (m, &x) in mean.iter_mut().zip(row) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; dim];
    for row in data.chunks_exact(dim) {
        for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
            *v += (x - m) * (x - m);
        }
    }
    let inv_std: Vec<f64> = var
        .iter()
        .map(|&v| {
            let sd = (v / n as f64).sqrt();
            if sd > 1e-12 {
                1.0 / sd
            } else {
                1.0
            }
        })
        .collect();
    for row in data.chunks_exact_mut(dim) {
        for ((x, &m), &s) in row.iter_mut().zip(&mean).zip(&inv_std) {
            *x = (*x - m) * s;
        }
    }
}

/// Energy VAD decision per frame. `log_energy_db` holds frame power in dBFS.
pub fn vad_mask(log_energy_db: &[f64], threshold_db: f64, floor_db: f64) -> Vec<bool> {
    let max = log_energy_db
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let cut = (max - threshold_db).max(floor_db);
    log_energy_db.iter().map(|&e| e >= cut).collect()
}

/// Regression deltas over `±window` frames with edge replication.
pub fn deltas(data: &[f64], dim: usize, window: usize) -> Vec<f64> {
    let n = data.len() / dim;
    let denom = 2.0 * (1..=window).map(|k| (k * k) as f64).sum::<f64>();
    let mut out = vec![0.0; data.len()];
    for t in 0..n {
        let dst = &mut out[t * dim..(t + 1) * dim];
        for k in 1..=window {
            let next = (t + k).min(n - 1);
            let prev = t.saturating_sub(k);
            let kf = k as f64;
            for j in 0..dim {
                dst[j] += kf * (data[next * dim + j] - data[prev * dim + j]);
            }
        }
        dst.iter_mut().for_each(|d| *d /= denom);
    }
    out
}

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// MFCC analysis state for one configuration.
pub struct MfccExtractor {
    cfg: FeatureConfig,
    frame_len: usize,
    hop: usize,
    window: Vec<f64>,
    filterbank: Vec<Vec<(usize, f64)>>,
    dct: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for MfccExtractor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("MfccExtractor")
            .field("cfg", &self.cfg)
            .field("frame_len", &self.frame_len)
            .field("hop", &self.hop)
            .finish_non_exhaustive()
    }
}

impl MfccExtractor {
    pub fn new(cfg: &FeatureConfig, sample_rate_hz: u32) -> Result<Self> {
        cfg.validate()?;
        let sr = sample_rate_hz as f64;
        let frame_len = (cfg.frame_length_s * sr).round() as usize;
        let hop = (cfg.frame_shift_s * sr).round() as usize;
        if frame_len > cfg.fft_size {
            return Err(Error::InvalidConfig(format!(
                "frame of {frame_len} samples exceeds FFT size {}",
                cfg.fft_size
            )));
        }
        if cfg.high_freq_hz > sr / 2.0 {
            return Err(Error::InvalidConfig("high_freq_hz above Nyquist".into()));
        }

        let window = (0..frame_len)
            .map(|i| 0.54 - 0.46 * (2.0 * PI * i as f64 / (frame_len - 1) as f64).cos())
            .collect();

        let n_bins = cfg.fft_size / 2 + 1;
        let m = cfg.num_mel_filters;
        let (lo, hi) = (hz_to_mel(cfg.low_freq_hz), hz_to_mel(cfg.high_freq_hz));
        let edges: Vec<f64> = (0..m + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (m + 1) as f64))
            .collect();
        let filterbank = (0..m)
            .map(|f| {
                let (left, center, right) = (edges[f], edges[f + 1], edges[f + 2]);
                (0..n_bins)
                    .filter_map(|b| {
                        let hz = b as f64 * sr / cfg.fft_size as f64;
                        let w = if hz > left && hz <= center {
                            (hz - left) / (center - left)
                        } else if hz > center && hz < right {
                            (right - hz) / (right - center)
                        } else {
                            0.0
                        };
                        (w > 0.0).then_some((b, w))
                    })
                    .collect()
            })
            .collect();

        // Orthonormal DCT-II, row k = cepstrum k.
        let mut dct = Vec::with_capacity(cfg.num_cepstra * m);
        for k in 0..cfg.num_cepstra {
            let scale = if k == 0 { (1.0 / m as f64).sqrt() } else { (2.0 / m as f64).sqrt() };
            for j in 0..m {
                dct.push(scale * (PI * k as f64 * (j as f64 + 0.5) / m as f64).cos());
            }
        }

        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self {
            cfg: cfg.clone(),
            frame_len,
            hop,
            window,
            filterbank,
            dct,
            fft,
        })
    }

    pub fn frame_count(&self, n_samples: usize) -> usize {
        if n_samples < self.frame_len {
            0
        } else {
            1 + (n_samples - self.frame_len) / self.hop
        }
    }

    /// Static cepstra (row-major, `num_cepstra` wide) and frame power in dBFS.
    pub fn cepstra(&self, samples: &[f32]) -> (Vec<f64>, Vec<f64>) {
        let n_frames = self.frame_count(samples.len());
        let nc = self.cfg.num_cepstra;
        let m = self.cfg.num_mel_filters;
        let a = self.cfg.pre_emphasis;

        let mut ceps = Vec::with_capacity(n_frames * nc);
        let mut energy_db = Vec::with_capacity(n_frames);
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        let mut scratch = vec![Complex::new(0.0, 0.0); self.fft.get_inplace_scratch_len()];
        let mut log_mel = vec![0.0; m];

        for t in 0..n_frames {
            let start = t * self.hop;
            let frame = &samples[start..start + self.frame_len];

            let power = frame.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>()
                / self.frame_len as f64;
            energy_db.push(10.0 * (power + 1e-20).log10());

            let mut prev = if start > 0 { samples[start - 1] as f64 } else { frame[0] as f64 };
            for (i, slot) in buf.iter_mut().enumerate() {
                *slot = if i < self.frame_len {
                    let x = frame[i] as f64;
                    let y = x - a * prev;
                    prev = x;
                    Complex::new(y * self.window[i], 0.0)
                } else {
                    Complex::new(0.0, 0.0)
                };
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);

            for (lm, filt) in log_mel.iter_mut().zip(&self.filterbank) {
                let e: f64 = filt.iter().map(|&(b, w)| w * buf[b].norm_sqr()).sum();
                *lm = e.max(1e-10).ln();
            }
            for k in 0..nc {
                let row = &self.dct[k * m..(k + 1) * m];
                ceps.push(row.iter().zip(&log_mel).map(|(d, l)| d * l).sum());
            }
        }
        (ceps, energy_db)
    }
}

/// Full front end: MFCC + Δ + ΔΔ, energy VAD, then CMVN over the surviving frames.
pub fn extract_features(clip: &AudioClip, cfg: &FeatureConfig) -> Result<FeatureMatrix> {
    let extractor = MfccExtractor::new(cfg, clip.sample_rate_hz())?;
    extract_with(&extractor, clip)
}

pub fn extract_with(extractor: &MfccExtractor, clip: &AudioClip) -> Result<FeatureMatrix> {
    let cfg = &extractor.cfg;
    let n_frames = extractor.frame_count(clip.samples().len());
    if n_frames < cfg.min_frames {
        return Err(Error::TooShort {
            frames: n_frames,
            required: cfg.min_frames,
        });
    }
    let nc = cfg.num_cepstra;
    let (statics, energy_db) = extractor.cepstra(clip.samples());
    let d1 = deltas(&statics, nc, cfg.delta_window);
    let d2 = deltas(&d1, nc, cfg.delta_window);

    let keep = vad_mask(&energy_db, cfg.vad_threshold_db, cfg.vad_floor_db);
    let kept = keep.iter().filter(|&&k| k).count();
    if kept == 0 {
        return Err(Error::AllFramesRejected);
    }

    let mut data = Vec::with_capacity(kept * FEATURE_DIM);
    for t in (0..n_frames).filter(|&t| keep[t]) {
        let r = t * nc..(t + 1) * nc;
        data.extend_from_slice(&statics[r.clone()]);
        data.extend_from_slice(&d1[r.clone()]);
        data.extend_from_slice(&d2[r]);
    }
    cmvn(&mut data, FEATURE_DIM);

    Ok(FeatureMatrix {
        data,
        n_frames: kept,
        frame_hop_s: cfg.frame_shift_s,
        vad_kept_ratio: kept as f64 / n_frames as f64,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    /// 0.5 s noise bursts (4 Hz amplitude modulation) alternating with near-silence.
    fn bursty_signal(seconds: f64, seed: u64) -> (Vec<f32>, f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, 1.0).unwrap();
        let n = (seconds * 16_000.0) as usize;
        let period = 16_000;
        let mut on = 0;
        let samples = (0..n)
            .map(|i| {
                let t = i as f64 / 16_000.0;
                if i % period < period / 2 {
                    on += 1;
                    let env = 0.75 + 0.25 * (2.0 * PI * 4.0 * t).sin();
                    (0.2 * env * noise.sample(&mut rng)) as f32
                } else {
                    (1e-5 * noise.sample(&mut rng)) as f32
                }
            })
            .collect();
        (samples, on as f64 / n as f64)
    }

    fn clip(samples: Vec<f32>) -> AudioClip {
        AudioClip::new(samples).unwrap()
    }

    #[test]
    fn vad_keeps_the_burst_duty_cycle() {
        let (samples, duty) = bursty_signal(10.0, 7);
        let feats = extract_features(&clip(samples), &FeatureConfig::default()).unwrap();
        let r = feats.vad_kept_ratio();
        assert!(r > 0.0 && r < 1.0);
        assert!((r - duty).abs() <= 0.1, "kept {r}, duty {duty}");
        assert_eq!(feats.dim(), 60);
    }

    #[test]
    fn digital_silence_is_rejected() {
        let err = extract_features(&clip(vec![0.0; 32_000]), &FeatureConfig::default());
        assert!(matches!(err, Err(Error::AllFramesRejected)));
    }

    #[test]
    fn too_short_before_vad() {
        // 0.5 s yields 48 frames at 25/10 ms
        let err = extract_features(&clip(vec![0.1; 8_000]), &FeatureConfig::default());
        assert!(matches!(err, Err(Error::TooShort { frames: 48, required: 50 })));
    }

    #[test]
    fn columns_are_standardized() {
        let (samples, _) = bursty_signal(3.0, 11);
        let feats = extract_features(&clip(samples), &FeatureConfig::default()).unwrap();
        let t = feats.n_frames() as f64;
        assert!(t > 1.0);
        for j in 0..FEATURE_DIM {
            let mean = feats.rows().map(|r| r[j]).sum::<f64>() / t;
            let var = feats.rows().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / t;
            assert!(mean.abs() < 1e-6, "column {j} mean {mean}");
            assert!((var - 1.0).abs() < 1e-6, "column {j} var {var}");
        }
    }

    #[test]
    fn cmvn_is_idempotent() {
        let (samples, _) = bursty_signal(2.0, 3);
        let once = extract_features(&clip(samples), &FeatureConfig::default()).unwrap();
        let mut twice = once.clone();
        twice.normalize();
        for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn one_hop_delay_barely_moves_vad() {
        let (samples, _) = bursty_signal(5.0, 5);
        let mut delayed = vec![0.0f32; 160];
        delayed.extend_from_slice(&samples);
        let cfg = FeatureConfig::default();
        let a = extract_features(&clip(samples), &cfg).unwrap().n_frames() as i64;
        let b = extract_features(&clip(delayed), &cfg).unwrap().n_frames() as i64;
        assert!((a - b).abs() <= 2, "{a} vs {b}");
    }

    #[test]
    fn delta_of_a_ramp_is_its_slope() {
        let data: Vec<f64> = (0..10).map(|t| 3.0 * t as f64).collect();
        let d = deltas(&data, 1, 2);
        for &v in &d[2..8] {
            assert!((v - 3.0).abs() < 1e-12);
        }
        // edge replication shrinks the slope at the borders
        assert!(d[0] < 3.0 && d[9] < 3.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn raising_the_cutoff_never_keeps_more(
            energies in prop::collection::vec(-90.0f64..0.0, 1..200),
            lo in 0.0f64..60.0,
            extra in 0.0f64..30.0,
        ) {
            // a smaller dB range below the maximum is a higher energy cutoff
            let wide = vad_mask(&energies, lo + extra, -120.0).iter().filter(|&&k| k).count();
            let narrow = vad_mask(&energies, lo, -120.0).iter().filter(|&&k| k).count();
            prop_assert!(narrow <= wide);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn output_is_always_sixty_wide(seed in 0u64..1000, amp in 0.01f32..0.9, secs in 0.6f64..2.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = (secs * 16_000.0) as usize;
            let s: Vec<f32> = (0..n).map(|_| amp * (rng.random::<f32>() * 2.0 - 1.0)).collect();
            let feats = extract_features(&clip(s), &FeatureConfig::default()).unwrap();
            prop_assert_eq!(feats.dim(), 60);
            prop_assert_eq!(feats.as_slice().len(), feats.n_frames() * 60);
        }
    }
}
