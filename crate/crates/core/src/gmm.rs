//! Diagonal-covariance GMM universal background model, Baum-Welch
//! statistics and relevance-MAP mean adaptation.

use std::f64::consts::PI;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;

/// Frames are processed in this many fixed blocks so reductions do not
/// depend on the rayon pool size.
const REDUCTION_BLOCKS: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagonalGmm {
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
    dim: usize,
    inv_var: Vec<f64>,
    log_norm: Vec<f64>,
}

impl DiagonalGmm {
    pub fn new(weights: Vec<f64>, means: Vec<f64>, variances: Vec<f64>, dim: usize) -> Result<Self> {
        let c = weights.len();
        if c == 0 || dim == 0 {
            return Err(Error::InvalidConfig("empty GMM".into()));
        }
        for m in [&means, &variances] {
            if m.len() != c * dim {
                return Err(Error::DimensionMismatch {
                    expected: c * dim,
                    actual: m.len(),
                });
            }
        }
        if weights.iter().any(|&w| !(w > 0.0)) || variances.iter().any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidConfig(
                "GMM weights and variances must be positive".into(),
            ));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("GMM weights sum to {total}")));
        }
        let inv_var = variances.iter().map(|v| 1.0 / v).collect();
        let log_norm = (0..c)
            .map(|k| {
                let log_det: f64 = variances[k * dim..(k + 1) * dim]
                    .iter()
                    .map(|v| (2.0 * PI * v).ln())
                    .sum();
                weights[k].ln() - 0.5 * log_det
            })
            .collect();
        Ok(Self {
            weights,
            means,
            variances,
            dim,
            inv_var,
            log_norm,
        })
    }

    pub fn num_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn variances(&self) -> &[f64] {
        &self.variances
    }

    pub fn mean(&self, c: usize) -> &[f64] {
        &self.means[c * self.dim..(c + 1) * self.dim]
    }

    pub fn supervector_dim(&self) -> usize {
        self.weights.len() * self.dim
    }

    /// Per-component joint log densities `ln w_c + ln N(x | c)` written into `out`;
    /// returns their log-sum-exp.
    fn joint_log_densities(&self, x: &[f64], out: &mut [f64]) -> f64 {
        let d = self.dim;
        let mut max = f64::NEG_INFINITY;
        for (c, slot) in out.iter_mut().enumerate() {
            let mu = &self.means[c * d..(c + 1) * d];
            let iv = &self.inv_var[c * d..(c + 1) * d];
            let mut q = 0.0;
            for j in 0..d {
                let diff = x[j] - mu[j];
                q += diff * diff * iv[j];
            }
            let v = self.log_norm[c] - 0.5 * q;
            *slot = v;
            max = max.max(v);
        }
        let sum: f64 = out.iter().map(|&v| (v - max).exp()).sum();
        max + sum.ln()
    }

    /// Posterior responsibilities of every component for one frame.
    pub fn posteriors(&self, x: &[f64]) -> Vec<f64> {
        let mut buf = vec![0.0; self.num_components()];
        let lse = self.joint_log_densities(x, &mut buf);
        buf.iter_mut().for_each(|v| *v = (*v - lse).exp());
        buf
    }

    pub fn log_likelihood(&self, frames: &[f64]) -> f64 {
        let mut buf = vec![0.0; self.num_components()];
        frames
            .chunks_exact(self.dim)
            .map(|x| self.joint_log_densities(x, &mut buf))
            .sum()
    }
}

/// Zeroth and first order Baum-Welch statistics of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SuffStats {
    pub n: Vec<f64>,
    pub f: Vec<f64>,
    pub dim: usize,
}

impl SuffStats {
    pub fn zeros(components: usize, dim: usize) -> Self {
        Self {
            n: vec![0.0; components],
            f: vec![0.0; components * dim],
            dim,
        }
    }

    pub fn num_components(&self) -> usize {
        self.n.len()
    }

    pub fn total_mass(&self) -> f64 {
        self.n.iter().sum()
    }

    pub fn add(&mut self, other: &SuffStats) {
        self.n.iter_mut().zip(&other.n).for_each(|(a, b)| *a += b);
        self.f.iter_mut().zip(&other.f).for_each(|(a, b)| *a += b);
    }
}

/// Stacked component means, component-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Supervector(pub Vec<f64>);

impl Supervector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Clone)]
struct Accumulator {
    n: Vec<f64>,
    f: Vec<f64>,
    s: Vec<f64>,
    log_likelihood: f64,
}

impl Accumulator {
    fn zeros(c: usize, d: usize, second_order: bool) -> Self {
        Self {
            n: vec![0.0; c],
            f: vec![0.0; c * d],
            s: if second_order { vec![0.0; c * d] } else { Vec::new() },
            log_likelihood: 0.0,
        }
    }

    fn merge(mut self, other: &Accumulator) -> Self {
        self.n.iter_mut().zip(&other.n).for_each(|(a, b)| *a += b);
        self.f.iter_mut().zip(&other.f).for_each(|(a, b)| *a += b);
        self.s.iter_mut().zip(&other.s).for_each(|(a, b)| *a += b);
        self.log_likelihood += other.log_likelihood;
        self
    }
}

fn accumulate(gmm: &DiagonalGmm, frames: &[f64], second_order: bool) -> Accumulator {
    let (c, d) = (gmm.num_components(), gmm.dim);
    let n_frames = frames.len() / d;
    let block = n_frames.div_ceil(REDUCTION_BLOCKS).max(1) * d;
    let partials: Vec<Accumulator> = frames
        .par_chunks(block)
        .map(|chunk| {
            let mut acc = Accumulator::zeros(c, d, second_order);
            let mut post = vec![0.0; c];
            for x in chunk.chunks_exact(d) {
                let lse = gmm.joint_log_densities(x, &mut post);
                acc.log_likelihood += lse;
                for k in 0..c {
                    let g = (post[k] - lse).exp();
                    if g == 0.0 {
                        continue;
                    }
                    acc.n[k] += g;
                    let fk = &mut acc.f[k * d..(k + 1) * d];
                    for j in 0..d {
                        fk[j] += g * x[j];
                    }
                    if second_order {
                        let sk = &mut acc.s[k * d..(k + 1) * d];
                        for j in 0..d {
                            sk[j] += g * x[j] * x[j];
                        }
                    }
                }
            }
            acc
        })
        .collect();
    partials
        .iter()
        .fold(Accumulator::zeros(c, d, second_order), |a, b| a.merge(b))
}

/// Baum-Welch statistics under exact (all-component) posteriors.
pub fn compute_stats(feat: &FeatureMatrix, ubm: &DiagonalGmm) -> Result<SuffStats> {
    if feat.dim() != ubm.dim {
        return Err(Error::DimensionMismatch {
            expected: ubm.dim,
            actual: feat.dim(),
        });
    }
    let acc = accumulate(ubm, feat.as_slice(), false);
    Ok(SuffStats {
        n: acc.n,
        f: acc.f,
        dim: ubm.dim,
    })
}

/// Relevance-MAP adaptation of the UBM means, stacked into a supervector.
pub fn map_adapt_means(stats: &SuffStats, ubm: &DiagonalGmm, relevance: f64) -> Result<Supervector> {
    if !(relevance > 0.0) {
        return Err(Error::InvalidConfig("relevance factor must be positive".into()));
    }
    if stats.num_components() != ubm.num_components() || stats.dim != ubm.dim {
        return Err(Error::DimensionMismatch {
            expected: ubm.supervector_dim(),
            actual: stats.f.len(),
        });
    }
    let d = ubm.dim;
    let mut sv = ubm.means.clone();
    for (c, &n) in stats.n.iter().enumerate() {
        if n <= 0.0 {
            continue;
        }
        let alpha = n / (n + relevance);
        let block = &mut sv[c * d..(c + 1) * d];
        let f = &stats.f[c * d..(c + 1) * d];
        for j in 0..d {
            block[j] = alpha * (f[j] / n) + (1.0 - alpha) * block[j];
        }
    }
    Ok(Supervector(sv))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct UbmConfig {
    pub components: usize,
    /// EM iterations after each intermediate split.
    pub split_iterations: usize,
    /// EM iterations once the target size is reached.
    pub final_iterations: usize,
    /// Split offset in units of the component standard deviation.
    pub split_offset: f64,
    pub variance_floor_ratio: f64,
    /// Components with less responsibility mass (in frames) are reseeded.
    pub min_component_mass: f64,
}

impl Default for UbmConfig {
    fn default() -> Self {
        Self {
            components: 1024,
            split_iterations: 4,
            final_iterations: 10,
            split_offset: 0.2,
            variance_floor_ratio: 1e-4,
            min_component_mass: 3.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmStep {
    pub components: usize,
    pub log_likelihood: f64,
    /// True when the model evaluated at this step was produced by a split or
    /// reseed rather than a plain M-step, so no monotonicity is implied.
    pub restructured: bool,
}

#[derive(Debug, Clone)]
pub struct UbmFit {
    pub gmm: DiagonalGmm,
    pub trace: Vec<EmStep>,
}

struct Params {
    weights: Vec<f64>,
    means: Vec<f64>,
    variances: Vec<f64>,
    dim: usize,
}

impl Params {
    fn build(&self) -> Result<DiagonalGmm> {
        DiagonalGmm::new(
            self.weights.clone(),
            self.means.clone(),
            self.variances.clone(),
            self.dim,
        )
    }

    fn components(&self) -> usize {
        self.weights.len()
    }

    /// Splits component `src` into itself and slot `dst` (appending when `dst` is the end).
    fn split_into(&mut self, src: usize, dst: usize, offset: f64) {
        let d = self.dim;
        let w = self.weights[src] / 2.0;
        let mu: Vec<f64> = self.means[src * d..(src + 1) * d].to_vec();
        let var: Vec<f64> = self.variances[src * d..(src + 1) * d].to_vec();
        let plus: Vec<f64> = mu.iter().zip(&var).map(|(m, v)| m + offset * v.sqrt()).collect();
        let minus: Vec<f64> = mu.iter().zip(&var).map(|(m, v)| m - offset * v.sqrt()).collect();
        self.weights[src] = w;
        self.means[src * d..(src + 1) * d].copy_from_slice(&plus);
        if dst == self.components() {
            self.weights.push(w);
            self.means.extend_from_slice(&minus);
            self.variances.extend_from_slice(&var);
        } else {
            self.weights[dst] = w;
            self.means[dst * d..(dst + 1) * d].copy_from_slice(&minus);
            self.variances[dst * d..(dst + 1) * d].copy_from_slice(&var);
        }
    }
}

/// Trains a UBM by binary splitting from a single Gaussian.
pub fn train_ubm(features: &[FeatureMatrix], cfg: &UbmConfig) -> Result<UbmFit> {
    let c_target = cfg.components;
    if c_target == 0 || !c_target.is_power_of_two() {
        return Err(Error::InvalidConfig(format!(
            "component count {c_target} is not a power of two"
        )));
    }
    let dim = features
        .first()
        .map(|f| f.dim())
        .ok_or_else(|| Error::InsufficientData("no training utterances".into()))?;
    let pooled: Vec<f64> = features.iter().flat_map(|f| f.as_slice().iter().copied()).collect();
    let n_frames = pooled.len() / dim;
    if n_frames < 50 * c_target {
        return Err(Error::InsufficientData(format!(
            "{n_frames} frames for {c_target} components (need {})",
            50 * c_target
        )));
    }

    let mut mean = vec![0.0; dim];
    for x in pooled.chunks_exact(dim) {
        mean.iter_mut().zip(x).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n_frames as f64);
    let mut var = vec![0.0; dim];
    for x in pooled.chunks_exact(dim) {
        for j in 0..dim {
            var[j] += (x[j] - mean[j]).powi(2);
        }
    }
    var.iter_mut().for_each(|v| *v /= n_frames as f64);
    let floor: Vec<f64> = var.iter().map(|v| (v * cfg.variance_floor_ratio).max(1e-300)).collect();
    if var.iter().any(|&v| !(v > 0.0)) {
        return Err(Error::InsufficientData("feature dimension with zero variance".into()));
    }

    let mut params = Params {
        weights: vec![1.0],
        means: mean,
        variances: var,
        dim,
    };
    let mut trace = Vec::new();
    let mut restructured = false;
    let mut strikes: Vec<u32> = vec![0];

    loop {
        let size = params.components();
        let iterations = if size < c_target {
            cfg.split_iterations
        } else {
            cfg.final_iterations
        };
        for _ in 0..iterations {
            let gmm = params.build()?;
            let acc = accumulate(&gmm, &pooled, true);
            trace.push(EmStep {
                components: size,
                log_likelihood: acc.log_likelihood,
                restructured,
            });
            restructured = m_step(&mut params, &acc, &floor, cfg, &mut strikes)?;
        }
        if size >= c_target {
            break;
        }
        for k in 0..size {
            params.split_into(k, params.components(), cfg.split_offset);
        }
        strikes = vec![0; params.components()];
        restructured = true;
        debug!(components = params.components(), "split UBM");
    }

    let gmm = params.build()?;
    trace.push(EmStep {
        components: gmm.num_components(),
        log_likelihood: gmm_log_likelihood_blocked(&gmm, &pooled),
        restructured,
    });
    Ok(UbmFit { gmm, trace })
}

fn gmm_log_likelihood_blocked(gmm: &DiagonalGmm, frames: &[f64]) -> f64 {
    accumulate(gmm, frames, false).log_likelihood
}

/// Returns true when a degenerate component had to be reseeded.
fn m_step(
    params: &mut Params,
    acc: &Accumulator,
    floor: &[f64],
    cfg: &UbmConfig,
    strikes: &mut [u32],
) -> Result<bool> {
    let d = params.dim;
    let total: f64 = acc.n.iter().sum();
    let mut degenerate = Vec::new();
    for k in 0..params.components() {
        let n = acc.n[k];
        if n < cfg.min_component_mass {
            degenerate.push(k);
            continue;
        }
        strikes[k] = 0;
        params.weights[k] = n / total;
        for j in 0..d {
            let mu = acc.f[k * d + j] / n;
            let v = acc.s[k * d + j] / n - mu * mu;
            params.means[k * d + j] = mu;
            params.variances[k * d + j] = v.max(floor[j]);
        }
    }
    if degenerate.is_empty() {
        return Ok(false);
    }
    for &k in &degenerate {
        strikes[k] += 1;
        if strikes[k] > 2 {
            return Err(Error::DegenerateComponent { component: k });
        }
        // Reseed by splitting the heaviest healthy component into slot k.
        let donor = (0..params.components())
            .filter(|i| !degenerate.contains(i))
            .max_by(|&a, &b| params.weights[a].total_cmp(&params.weights[b]))
            .ok_or(Error::DegenerateComponent { component: k })?;
        params.weights[k] = 0.0;
        params.split_into(donor, k, cfg.split_offset);
    }
    let sum: f64 = params.weights.iter().sum();
    params.weights.iter_mut().for_each(|w| *w /= sum);
    debug!(count = degenerate.len(), "reseeded degenerate UBM components");
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FEATURE_DIM;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, StandardNormal};

    fn random_feats(rng: &mut ChaCha8Rng, frames: usize) -> FeatureMatrix {
        let data = (0..frames * FEATURE_DIM)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        FeatureMatrix::from_rows(data, 0.01).unwrap()
    }

    fn random_gmm(rng: &mut ChaCha8Rng, c: usize) -> DiagonalGmm {
        let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.5..2.0)).collect();
        let s: f64 = raw.iter().sum();
        DiagonalGmm::new(
            raw.iter().map(|w| w / s).collect(),
            (0..c * FEATURE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect(),
            (0..c * FEATURE_DIM).map(|_| rng.random_range(0.5..1.5)).collect(),
            FEATURE_DIM,
        )
        .unwrap()
    }

    fn two_cluster_gmm() -> DiagonalGmm {
        let mut means = vec![0.0; 2 * FEATURE_DIM];
        means[FEATURE_DIM..].iter_mut().for_each(|m| *m = 50.0);
        DiagonalGmm::new(vec![0.5, 0.5], means, vec![1.0; 2 * FEATURE_DIM], FEATURE_DIM).unwrap()
    }

    #[test]
    fn frame_at_a_component_mean_collapses_posterior() {
        let ubm = two_cluster_gmm();
        let feat = FeatureMatrix::from_rows(ubm.mean(0).to_vec(), 0.01).unwrap();
        let st = compute_stats(&feat, &ubm).unwrap();
        assert!((st.n[0] - 1.0).abs() < 1e-6);
        assert!(st.n[1].abs() < 1e-6);
    }

    #[test]
    fn stats_match_a_literal_frame_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ubm = random_gmm(&mut rng, 8);
        let feat = random_feats(&mut rng, 100);
        let st = compute_stats(&feat, &ubm).unwrap();

        // Oracle: explicit densities, one frame at a time.
        let (c, d) = (8, FEATURE_DIM);
        let mut n = vec![0.0; c];
        let mut f = vec![0.0; c * d];
        for x in feat.rows() {
            let logp: Vec<f64> = (0..c)
                .map(|k| {
                    let mut lp = ubm.weights()[k].ln();
                    for j in 0..d {
                        let v = ubm.variances()[k * d + j];
                        let m = ubm.means()[k * d + j];
                        lp += -0.5 * (2.0 * PI * v).ln() - (x[j] - m).powi(2) / (2.0 * v);
                    }
                    lp
                })
                .collect();
            let mx = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = logp.iter().map(|l| (l - mx).exp()).sum();
            for k in 0..c {
                let g = (logp[k] - mx).exp() / z;
                n[k] += g;
                for j in 0..d {
                    f[k * d + j] += g * x[j];
                }
            }
        }
        for k in 0..c {
            assert!((st.n[k] - n[k]).abs() < 1e-9);
        }
        for i in 0..c * d {
            assert!((st.f[i] - f[i]).abs() < 1e-9);
        }
        assert!((st.total_mass() - 100.0).abs() < 1e-6);
    }

    #[test]
    fn stats_are_additive_over_concatenation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ubm = random_gmm(&mut rng, 4);
        let a = random_feats(&mut rng, 37);
        let b = random_feats(&mut rng, 61);
        let mut sum = compute_stats(&a, &ubm).unwrap();
        sum.add(&compute_stats(&b, &ubm).unwrap());
        let joint = compute_stats(&a.concat(&b), &ubm).unwrap();
        for (x, y) in sum.n.iter().zip(&joint.n).chain(sum.f.iter().zip(&joint.f)) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn dimension_mismatch_is_reported() {
        let ubm = DiagonalGmm::new(vec![1.0], vec![0.0; 3], vec![1.0; 3], 3).unwrap();
        let feat = FeatureMatrix::from_rows(vec![0.0; FEATURE_DIM], 0.01).unwrap();
        assert!(matches!(
            compute_stats(&feat, &ubm),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn map_with_empty_stats_returns_ubm_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ubm = random_gmm(&mut rng, 4);
        let sv = map_adapt_means(&SuffStats::zeros(4, FEATURE_DIM), &ubm, 16.0).unwrap();
        assert_eq!(sv.as_slice(), ubm.means());
    }

    #[test]
    fn map_at_relevance_mass_is_the_midpoint() {
        let ubm = two_cluster_gmm();
        let mut st = SuffStats::zeros(2, FEATURE_DIM);
        st.n[1] = 16.0;
        let data_mean = 42.0;
        st.f[FEATURE_DIM..].iter_mut().for_each(|f| *f = 16.0 * data_mean);
        let sv = map_adapt_means(&st, &ubm, 16.0).unwrap();
        for &v in &sv.as_slice()[FEATURE_DIM..] {
            assert_eq!(v, 0.5 * (50.0 + data_mean));
        }
    }

    #[test]
    fn map_with_huge_mass_returns_data_mean() {
        let ubm = two_cluster_gmm();
        let mut st = SuffStats::zeros(2, FEATURE_DIM);
        st.n[0] = 1e9;
        st.f[..FEATURE_DIM].iter_mut().for_each(|f| *f = 1e9 * 3.0);
        let sv = map_adapt_means(&st, &ubm, 16.0).unwrap();
        assert!(sv.as_slice()[..FEATURE_DIM].iter().all(|v| (v - 3.0).abs() < 1e-6));
        assert_eq!(sv.len(), 2 * FEATURE_DIM);
    }

    #[test]
    fn map_rejects_non_positive_relevance() {
        let ubm = two_cluster_gmm();
        assert!(map_adapt_means(&SuffStats::zeros(2, FEATURE_DIM), &ubm, 0.0).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn map_means_lie_between_ubm_and_data(seed in 0u64..10_000, r in 0.1f64..64.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let ubm = random_gmm(&mut rng, 4);
            let mut st = SuffStats::zeros(4, FEATURE_DIM);
            for k in 0..4 {
                st.n[k] = if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..500.0) };
                for j in 0..FEATURE_DIM {
                    st.f[k * FEATURE_DIM + j] = st.n[k] * rng.random_range(-5.0..5.0);
                }
            }
            let sv = map_adapt_means(&st, &ubm, r).unwrap();
            for k in 0..4 {
                for j in 0..FEATURE_DIM {
                    let i = k * FEATURE_DIM + j;
                    let m = ubm.means()[i];
                    let data = if st.n[k] > 0.0 { st.f[i] / st.n[k] } else { m };
                    let (lo, hi) = (m.min(data), m.max(data));
                    prop_assert!(sv.0[i] >= lo - 1e-12 && sv.0[i] <= hi + 1e-12);
                }
            }
        }
    }

    fn assert_monotone(trace: &[EmStep]) {
        for w in trace.windows(2) {
            if w[1].restructured || w[0].components != w[1].components {
                continue;
            }
            let tol = 1e-6 * w[0].log_likelihood.abs();
            assert!(
                w[1].log_likelihood >= w[0].log_likelihood - tol,
                "log-likelihood fell: {:?} -> {:?}",
                w[0],
                w[1]
            );
        }
    }

    #[test]
    fn recovers_two_separated_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut data = Vec::new();
        let mut label_means = [0.0f64; 2];
        let mut counts = [0usize; 2];
        for _ in 0..2_000 {
            let cls = rng.random_range(0..2usize);
            counts[cls] += 1;
            let centre = if cls == 0 { -10.0 } else { 10.0 };
            for _ in 0..FEATURE_DIM {
                let v = centre + normal.sample(&mut rng);
                label_means[cls] += v;
                data.push(v);
            }
        }
        let feats = vec![FeatureMatrix::from_rows(data, 0.01).unwrap()];
        let cfg = UbmConfig {
            components: 2,
            ..Default::default()
        };
        let fit = train_ubm(&feats, &cfg).unwrap();
        assert_monotone(&fit.trace);
        let gmm = &fit.gmm;
        let (neg, pos) = if gmm.mean(0)[0] < 0.0 { (0, 1) } else { (1, 0) };
        for (k, target, cls) in [(neg, -10.0, 0), (pos, 10.0, 1)] {
            assert!(gmm.mean(k).iter().all(|m| (m - target).abs() < 0.1));
            let expected_weight = counts[cls] as f64 / 2_000.0;
            assert!((gmm.weights()[k] - expected_weight).abs() < 1e-6);
            assert!((gmm.weights()[k] - 0.5).abs() < 0.05);
        }
    }

    #[test]
    fn single_component_is_the_sample_moments() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let feats = vec![random_feats(&mut rng, 500)];
        let cfg = UbmConfig {
            components: 1,
            ..Default::default()
        };
        let gmm = train_ubm(&feats, &cfg).unwrap().gmm;
        for j in 0..FEATURE_DIM {
            let col: Vec<f64> = feats[0].rows().map(|r| r[j]).collect();
            let m = col.iter().sum::<f64>() / 500.0;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 500.0;
            assert!((gmm.means()[j] - m).abs() < 1e-6);
            assert!((gmm.variances()[j] - v).abs() < 1e-6);
        }
    }

    #[test]
    fn larger_ubm_training_is_monotone_within_each_size() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let feats: Vec<_> = (0..4).map(|_| random_feats(&mut rng, 200)).collect();
        let cfg = UbmConfig {
            components: 16,
            ..Default::default()
        };
        let fit = train_ubm(&feats, &cfg).unwrap();
        assert_eq!(fit.gmm.num_components(), 16);
        assert!((fit.gmm.weights().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_monotone(&fit.trace);
    }

    #[test]
    fn rejects_too_little_data_and_bad_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let feats = vec![random_feats(&mut rng, 100)];
        let cfg = UbmConfig {
            components: 4,
            ..Default::default()
        };
        assert!(matches!(train_ubm(&feats, &cfg), Err(Error::InsufficientData(_))));
        let cfg = UbmConfig {
            components: 3,
            ..Default::default()
        };
        assert!(matches!(train_ubm(&feats, &cfg), Err(Error::InvalidConfig(_))));
    }
}
