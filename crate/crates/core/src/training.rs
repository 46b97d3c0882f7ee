//! Model training recipe and enrollment helpers.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::info;

use crate::container::{ModelBundle, ModelMeta};
use crate::embedding::{mean_ivector, train_ppca, IVector, PpcaConfig};
use crate::error::{Error, Result};
use crate::eval::LabeledClip;
use crate::features::{extract_features, FeatureConfig, FeatureMatrix};
use crate::gmm::{compute_stats, map_adapt_means, train_ubm, UbmConfig};
use crate::pipeline::Embedder;
use crate::plda::{build_index, train_plda, IdentificationIndex, IndexPrecision, PldaConfig};
use crate::synth::{gallery_records, generate_corpus, CorpusPlan, Role};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub features: FeatureConfig,
    pub ubm: UbmConfig,
    pub ppca: PpcaConfig,
    pub plda: PldaConfig,
    pub relevance: f64,
    pub ubm_fraction: f64,
    pub ppca_fraction: f64,
    pub plda_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            ubm: UbmConfig::default(),
            ppca: PpcaConfig::default(),
            plda: PldaConfig::default(),
            relevance: 16.0,
            ubm_fraction: 1.0 / 30.0,
            ppca_fraction: 1.0 / 15.0,
            plda_fraction: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Small models for synthetic corpora of tens of speakers: 64 components,
    /// 100-d i-vectors, 40-d speaker subspace, every utterance in every stage.
    pub fn desk() -> Self {
        Self {
            ubm: UbmConfig {
                components: 64,
                ..UbmConfig::default()
            },
            ppca: PpcaConfig {
                ivector_dim: 100,
                ..PpcaConfig::default()
            },
            plda: PldaConfig {
                speaker_dim: 40,
                ..PldaConfig::default()
            },
            ubm_fraction: 1.0,
            ppca_fraction: 1.0,
            plda_fraction: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, f) in [
            ("ubm_fraction", self.ubm_fraction),
            ("ppca_fraction", self.ppca_fraction),
            ("plda_fraction", self.plda_fraction),
        ] {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::InvalidConfig(format!("{name} must be in (0, 1], got {f}")));
            }
        }
        if !(self.relevance > 0.0) {
            return Err(Error::InvalidConfig("relevance must be positive".into()));
        }
        self.features.validate()
    }
}

#[derive(Debug, Clone)]
pub struct TrainingUtterance {
    pub utterance_id: String,
    pub speaker_id: String,
    pub features: FeatureMatrix,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainReport {
    pub ubm_utterances: usize,
    pub ppca_utterances: usize,
    pub plda_utterances: usize,
    /// Sorted input positions used by at least one training stage.
    pub used_utterances: Vec<usize>,
    /// `(stage, seconds)` in execution order.
    pub stage_seconds: Vec<(String, f64)>,
    pub ubm_log_likelihoods: Vec<f64>,
    pub ppca_log_likelihoods: Vec<f64>,
    pub plda_log_likelihoods: Vec<f64>,
}

/// Sorted indices of a seeded random subset holding `round(n · fraction)` items (at least one).
pub fn select_subset(n: usize, fraction: f64, seed: u64, salt: u64) -> Vec<usize> {
    let count = ((n as f64 * fraction).round() as usize).clamp(1.min(n), n);
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    idx.shuffle(&mut rng);
    idx.truncate(count);
    idx.sort_unstable();
    idx
}

/// UBM, PPCA, global mean and PLDA, each on its configured subset.
pub fn train_models(data: &[TrainingUtterance], cfg: &TrainConfig) -> Result<(ModelBundle, TrainReport)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InsufficientData("empty training corpus".into()));
    }
    let mut report = TrainReport::default();

    let t = Instant::now();
    let ubm_idx = select_subset(data.len(), cfg.ubm_fraction, cfg.seed, 1);
    report.ubm_utterances = ubm_idx.len();
    info!(utterances = ubm_idx.len(), "training UBM");
    let ubm_feats: Vec<FeatureMatrix> = ubm_idx.iter().map(|&i| data[i].features.clone()).collect();
    let ubm_fit = train_ubm(&ubm_feats, &cfg.ubm)?;
    drop(ubm_feats);
    let ubm = ubm_fit.gmm;
    report.ubm_log_likelihoods = ubm_fit.trace.iter().map(|s| s.log_likelihood).collect();
    report.stage_seconds.push(("ubm".into(), t.elapsed().as_secs_f64()));

    let t = Instant::now();
    let supervectors = data
        .par_iter()
        .map(|u| map_adapt_means(&compute_stats(&u.features, &ubm)?, &ubm, cfg.relevance))
        .collect::<Result<Vec<_>>>()?;
    report.stage_seconds.push(("stats_map".into(), t.elapsed().as_secs_f64()));

    let t = Instant::now();
    let ppca_idx = select_subset(data.len(), cfg.ppca_fraction, cfg.seed, 2);
    report.ppca_utterances = ppca_idx.len();
    info!(utterances = ppca_idx.len(), "training PPCA");
    let ppca_svs: Vec<_> = ppca_idx.iter().map(|&i| supervectors[i].clone()).collect();
    let ppca_cfg = PpcaConfig {
        seed: cfg.ppca.seed ^ cfg.seed,
        ..cfg.ppca.clone()
    };
    let ppca_fit = train_ppca(&ppca_svs, &ppca_cfg)?;
    drop(ppca_svs);
    report.ppca_log_likelihoods = ppca_fit.log_likelihoods;
    let ppca = ppca_fit.model;
    report.stage_seconds.push(("ppca".into(), t.elapsed().as_secs_f64()));

    let t = Instant::now();
    let plda_idx = select_subset(data.len(), cfg.plda_fraction, cfg.seed, 3);
    report.plda_utterances = plda_idx.len();
    let raw: Vec<IVector> = plda_idx
        .par_iter()
        .map(|&i| crate::embedding::extract_ivector(&supervectors[i], &ppca))
        .collect::<Result<_>>()?;
    let global_mean = mean_ivector(&raw)?;
    let labeled: Vec<(String, IVector)> = plda_idx
        .iter()
        .zip(&raw)
        .map(|(&i, iv)| {
            Ok((
                data[i].speaker_id.clone(),
                crate::embedding::center_and_normalize(iv, &global_mean)?,
            ))
        })
        .collect::<Result<_>>()?;
    report.stage_seconds.push(("ivectors".into(), t.elapsed().as_secs_f64()));

    let t = Instant::now();
    info!(utterances = labeled.len(), "training PLDA");
    let plda_fit = train_plda(&labeled, &cfg.plda)?;
    report.plda_log_likelihoods = plda_fit.log_likelihoods;
    report.stage_seconds.push(("plda".into(), t.elapsed().as_secs_f64()));

    let mut used: Vec<usize> = ubm_idx.into_iter().chain(ppca_idx).chain(plda_idx).collect();
    used.sort_unstable();
    used.dedup();
    report.used_utterances = used;

    let bundle = ModelBundle {
        meta: ModelMeta {
            features: cfg.features.clone(),
            relevance: cfg.relevance,
            seed: cfg.seed,
        },
        ubm,
        ppca,
        global_mean,
        plda: plda_fit.model,
        index: None,
        gallery: None,
    };
    Ok((bundle, report))
}

/// Length-normalized i-vectors for `(utterance_id, features)` pairs, in input order.
pub fn embed_features(embedder: &Embedder, items: &[(String, FeatureMatrix)]) -> Result<Vec<(String, IVector)>> {
    items
        .par_iter()
        .map(|(id, f)| {
            let raw = embedder.raw_ivector(f)?;
            Ok((id.clone(), crate::embedding::center_and_normalize(&raw, embedder.global_mean())?))
        })
        .collect()
}

/// A trained and enrolled system over a synthetic corpus, plus its held-out test clips.
#[derive(Debug)]
pub struct SyntheticSystem {
    pub bundle: ModelBundle,
    pub report: TrainReport,
    pub tests: Vec<LabeledClip>,
}

/// Generates `plan`, trains on the enrollment utterances (the gallery is part
/// of the training data) and enrolls them into an index.
pub fn train_synthetic(plan: &CorpusPlan, cfg: &TrainConfig, precision: IndexPrecision) -> Result<SyntheticSystem> {
    let corpus = generate_corpus(plan);
    let enroll: Vec<_> = corpus.iter().filter(|u| u.role == Role::Enroll).collect();
    let feats = enroll
        .par_iter()
        .map(|u| extract_features(&u.clip, &cfg.features))
        .collect::<Result<Vec<_>>>()?;
    let train: Vec<TrainingUtterance> = enroll
        .iter()
        .zip(&feats)
        .map(|(u, f)| TrainingUtterance {
            utterance_id: u.utterance_id.clone(),
            speaker_id: u.speaker_id.clone(),
            features: f.clone(),
        })
        .collect();
    let (bundle, report) = train_models(&train, cfg)?;
    drop(train);
    let embedder = Embedder::new(
        bundle.meta.clone(),
        bundle.ubm.clone(),
        bundle.ppca.clone(),
        bundle.global_mean.clone(),
    )?;
    let items: Vec<(String, FeatureMatrix)> = enroll
        .iter()
        .zip(feats)
        .map(|(u, f)| (u.utterance_id.clone(), f))
        .collect();
    let enrolled = embed_features(&embedder, &items)?;
    let index = build_index(&enrolled, &bundle.plda, precision)?;
    let tests = corpus
        .iter()
        .filter(|u| u.role == Role::Test)
        .map(|u| LabeledClip {
            clip_id: u.utterance_id.clone(),
            speaker_id: u.speaker_id.clone(),
            clip: u.clip.clone(),
        })
        .collect();
    let bundle = ModelBundle {
        index: Some(index),
        gallery: Some(gallery_records(&corpus)),
        ..bundle
    };
    Ok(SyntheticSystem { bundle, report, tests })
}

/// Enrolls embedded utterances into an identification index.
pub fn enroll(bundle: &ModelBundle, enrollment: &[(String, IVector)], precision: IndexPrecision) -> Result<IdentificationIndex> {
    build_index(enrollment, &bundle.plda, precision)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subset_sizes_follow_fractions() {
        assert_eq!(select_subset(3000, 1.0 / 30.0, 1, 1).len(), 100);
        assert_eq!(select_subset(3000, 1.0 / 15.0, 1, 2).len(), 200);
        assert_eq!(select_subset(10, 1.0, 1, 1), (0..10).collect::<Vec<_>>());
        assert_eq!(select_subset(10, 0.01, 1, 1).len(), 1);
    }

    #[test]
    fn subsets_are_seeded() {
        assert_eq!(select_subset(500, 0.2, 9, 1), select_subset(500, 0.2, 9, 1));
        assert_ne!(select_subset(500, 0.2, 9, 1), select_subset(500, 0.2, 10, 1));
        assert_ne!(select_subset(500, 0.2, 9, 1), select_subset(500, 0.2, 9, 2));
    }

    #[test]
    fn fractions_are_validated() {
        let cfg = TrainConfig {
            ubm_fraction: 0.0,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
        let cfg = TrainConfig {
            plda_fraction: 1.5,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }
}
