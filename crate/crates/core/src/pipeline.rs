//! End-to-end identification: audio in, ranked speakers and stage timings out.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::audio::{decode_wav, AudioClip};
use crate::container::{ModelBundle, ModelMeta};
use crate::embedding::{center_and_normalize, extract_ivector, IVector, PpcaModel};
use crate::error::{Error, Result};
use crate::features::{extract_with, FeatureMatrix, MfccExtractor};
use crate::gallery::{rank_assigned, Gallery, RankedResult, RowAssignment, SpeakerRecord};
use crate::gmm::{compute_stats, map_adapt_means, DiagonalGmm};
use crate::plda::{IdentificationIndex, PldaModel};

pub const STAGES: [&str; 9] = [
    "audio_load_mfcc",
    "suff_stats",
    "map_adapt",
    "ppca_project",
    "center_lnorm",
    "plda_project",
    "plda_score",
    "sort_speakers",
    "total_server",
];

/// Per-stage wall time in milliseconds, rounded to 0.1 ms.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub audio_load_mfcc: f64,
    pub suff_stats: f64,
    pub map_adapt: f64,
    pub ppca_project: f64,
    pub center_lnorm: f64,
    pub plda_project: f64,
    pub plda_score: f64,
    pub sort_speakers: f64,
    pub total_server: f64,
}

impl TimingReport {
    /// Values in [`STAGES`] order.
    pub fn values(&self) -> [f64; 9] {
        [
            self.audio_load_mfcc,
            self.suff_stats,
            self.map_adapt,
            self.ppca_project,
            self.center_lnorm,
            self.plda_project,
            self.plda_score,
            self.sort_speakers,
            self.total_server,
        ]
    }

    pub fn stage_sum(&self) -> f64 {
        self.values()[..8].iter().sum()
    }
}

fn ms_since(t: Instant) -> f64 {
    (t.elapsed().as_secs_f64() * 1e4).round() / 10.0
}

/// Accepted pre-VAD clip duration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DurationLimits {
    pub min_s: f64,
    pub max_s: f64,
}

impl Default for DurationLimits {
    fn default() -> Self {
        Self {
            min_s: 1.0,
            max_s: 60.0,
        }
    }
}

/// Audio to length-normalized i-vector.
#[derive(Debug)]
pub struct Embedder {
    meta: ModelMeta,
    extractor: MfccExtractor,
    ubm: DiagonalGmm,
    ppca: PpcaModel,
    global_mean: Vec<f64>,
}

impl Embedder {
    pub fn new(meta: ModelMeta, ubm: DiagonalGmm, ppca: PpcaModel, global_mean: Vec<f64>) -> Result<Self> {
        if ubm.supervector_dim() != ppca.supervector_dim() {
            return Err(Error::DimensionMismatch {
                expected: ubm.supervector_dim(),
                actual: ppca.supervector_dim(),
            });
        }
        if global_mean.len() != ppca.ivector_dim() {
            return Err(Error::DimensionMismatch {
                expected: ppca.ivector_dim(),
                actual: global_mean.len(),
            });
        }
        let extractor = MfccExtractor::new(&meta.features, crate::audio::CANONICAL_RATE_HZ)?;
        Ok(Self {
            meta,
            extractor,
            ubm,
            ppca,
            global_mean,
        })
    }

    pub fn meta(&self) -> &ModelMeta {
        &self.meta
    }

    pub fn ubm(&self) -> &DiagonalGmm {
        &self.ubm
    }

    pub fn ppca(&self) -> &PpcaModel {
        &self.ppca
    }

    pub fn global_mean(&self) -> &[f64] {
        &self.global_mean
    }

    pub fn features(&self, clip: &AudioClip) -> Result<FeatureMatrix> {
        extract_with(&self.extractor, clip)
    }

    /// Un-normalized i-vector of a feature matrix.
    pub fn raw_ivector(&self, feats: &FeatureMatrix) -> Result<IVector> {
        let stats = compute_stats(feats, &self.ubm)?;
        let sv = map_adapt_means(&stats, &self.ubm, self.meta.relevance)?;
        extract_ivector(&sv, &self.ppca)
    }

    pub fn embed(&self, clip: &AudioClip) -> Result<IVector> {
        let raw = self.raw_ivector(&self.features(clip)?)?;
        center_and_normalize(&raw, &self.global_mean)
    }

    fn embed_timed(&self, clip: &AudioClip, t: &mut TimingReport, started: Instant) -> Result<IVector> {
        let feats = self.features(clip)?;
        t.audio_load_mfcc = ms_since(started);
        let s = Instant::now();
        let stats = compute_stats(&feats, &self.ubm)?;
        t.suff_stats = ms_since(s);
        let s = Instant::now();
        let sv = map_adapt_means(&stats, &self.ubm, self.meta.relevance)?;
        t.map_adapt = ms_since(s);
        let s = Instant::now();
        let raw = extract_ivector(&sv, &self.ppca)?;
        t.ppca_project = ms_since(s);
        let s = Instant::now();
        let iv = center_and_normalize(&raw, &self.global_mean)?;
        t.center_lnorm = ms_since(s);
        Ok(iv)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Identification {
    pub results: Vec<RankedResult>,
    pub timing: TimingReport,
}

/// Preloaded models, index and gallery; shared read-only across requests.
#[derive(Debug)]
pub struct Engine {
    embedder: Embedder,
    plda: PldaModel,
    index: IdentificationIndex,
    gallery: Gallery,
    assignment: RowAssignment,
    limits: DurationLimits,
    pool: Option<Arc<rayon::ThreadPool>>,
}

impl Engine {
    /// Builds an engine; `gallery` overrides any gallery stored in the bundle.
    pub fn new(bundle: ModelBundle, gallery: Option<Vec<SpeakerRecord>>) -> Result<Self> {
        let records = gallery
            .or(bundle.gallery)
            .ok_or_else(|| Error::InvalidConfig("no gallery metadata in container or config".into()))?;
        let index = bundle
            .index
            .ok_or_else(|| Error::InvalidConfig("container has no identification index".into()))?;
        if index.is_empty() {
            return Err(Error::EmptyGallery);
        }
        let gallery = Gallery::new(records)?;
        let assignment = gallery.assign_rows(&index)?;
        Ok(Self {
            embedder: Embedder::new(bundle.meta, bundle.ubm, bundle.ppca, bundle.global_mean)?,
            plda: bundle.plda,
            index,
            gallery,
            assignment,
            limits: DurationLimits::default(),
            pool: None,
        })
    }

    pub fn with_limits(mut self, limits: DurationLimits) -> Self {
        self.limits = limits;
        self
    }

    /// Runs identification inside `pool`, bounding its internal parallelism.
    pub fn with_pool(mut self, pool: Arc<rayon::ThreadPool>) -> Self {
        self.pool = Some(pool);
        self
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }

    pub fn plda(&self) -> &PldaModel {
        &self.plda
    }

    pub fn index(&self) -> &IdentificationIndex {
        &self.index
    }

    pub fn gallery(&self) -> &Gallery {
        &self.gallery
    }

    pub fn identify_wav(&self, bytes: &[u8], k: usize) -> Result<Identification> {
        let started = Instant::now();
        let clip = decode_wav(bytes)?;
        self.identify_from(clip, k, started)
    }

    pub fn identify_clip(&self, clip: &AudioClip, k: usize) -> Result<Identification> {
        self.identify_from(clip.clone(), k, Instant::now())
    }

    /// Identification scores for an embedded probe.
    pub fn score(&self, probe: &IVector) -> Result<Vec<f64>> {
        self.run(|| crate::plda::score_all(probe, &self.index, &self.plda))
    }

    pub fn rank(&self, scores: &[f64], k: usize) -> Result<Vec<RankedResult>> {
        rank_assigned(scores, &self.assignment, &self.gallery, k)
    }

    fn run<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        match &self.pool {
            Some(pool) => pool.install(f),
            None => f(),
        }
    }

    fn identify_from(&self, clip: AudioClip, k: usize, started: Instant) -> Result<Identification> {
        let duration = clip.duration_s();
        if duration > self.limits.max_s {
            return Err(Error::TooLong {
                seconds: duration,
                limit: self.limits.max_s,
            });
        }
        if duration < self.limits.min_s {
            let ex = &self.embedder.extractor;
            return Err(Error::TooShort {
                frames: ex.frame_count(clip.samples().len()),
                required: ex.frame_count((self.limits.min_s * clip.sample_rate_hz() as f64) as usize),
            });
        }
        self.run(|| {
            let mut t = TimingReport::default();
            let probe = self.embedder.embed_timed(&clip, &mut t, started)?;
            let s = Instant::now();
            let projected = self.plda.project(&probe)?;
            t.plda_project = ms_since(s);
            let s = Instant::now();
            let scores = self.index.score_projected(&projected)?;
            t.plda_score = ms_since(s);
            let s = Instant::now();
            let results = self.rank(&scores, k)?;
            t.sort_speakers = ms_since(s);
            t.total_server = ms_since(started);
            Ok(Identification { results, timing: t })
        })
    }
}
