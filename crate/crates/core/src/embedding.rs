//! PPCA supervector compression into i-vectors, plus centering and length
//! normalization.
//!
//! Extraction is a single affine map `eta = B (sv - m)` where `B` is the PPCA
//! posterior-mean operator `(WᵀW + σ²I)⁻¹ Wᵀ`. No per-utterance matrix is
//! inverted.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::error::{Error, Result};
use crate::gmm::Supervector;
use crate::linalg;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PpcaConfig {
    pub ivector_dim: usize,
    pub max_iterations: usize,
    /// Relative log-likelihood change below which EM stops early.
    pub tolerance: f64,
    pub seed: u64,
}

impl Default for PpcaConfig {
    fn default() -> Self {
        Self {
            ivector_dim: 800,
            max_iterations: 10,
            tolerance: 1e-6,
            seed: 0x5eed,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PpcaModel {
    mean_sv: Vec<f64>,
    /// `d x q` loading matrix `W`.
    loading: DMatrix<f64>,
    noise_variance: f64,
    /// Row-major `q x d` extraction operator.
    projection: Vec<f64>,
}

impl PpcaModel {
    /// Assembles a model from its parameters; the extraction operator is derived.
    pub fn from_parameters(mean_sv: Vec<f64>, loading: DMatrix<f64>, noise_variance: f64) -> Result<Self> {
        if loading.nrows() != mean_sv.len() {
            return Err(Error::DimensionMismatch {
                expected: mean_sv.len(),
                actual: loading.nrows(),
            });
        }
        if !(noise_variance > 0.0) {
            return Err(Error::InvalidConfig("PPCA noise variance must be positive".into()));
        }
        let q = loading.ncols();
        let m = loading.tr_mul(&loading) + DMatrix::identity(q, q) * noise_variance;
        let m_inv = linalg::spd_inverse(&m)
            .ok_or_else(|| Error::RankDeficient("PPCA loading is singular".into()))?;
        let projection = linalg::to_row_major(&(m_inv * loading.transpose()));
        Ok(Self {
            mean_sv,
            loading,
            noise_variance,
            projection,
        })
    }

    /// Restores a model with a stored extraction operator, bit for bit.
    pub fn from_stored(
        mean_sv: Vec<f64>,
        loading: DMatrix<f64>,
        noise_variance: f64,
        projection: Vec<f64>,
    ) -> Result<Self> {
        let (d, q) = loading.shape();
        if mean_sv.len() != d || projection.len() != q * d {
            return Err(Error::DimensionMismatch {
                expected: q * d,
                actual: projection.len(),
            });
        }
        Ok(Self {
            mean_sv,
            loading,
            noise_variance,
            projection,
        })
    }

    pub fn supervector_dim(&self) -> usize {
        self.mean_sv.len()
    }

    pub fn ivector_dim(&self) -> usize {
        self.loading.ncols()
    }

    pub fn mean_supervector(&self) -> &[f64] {
        &self.mean_sv
    }

    pub fn loading(&self) -> &DMatrix<f64> {
        &self.loading
    }

    pub fn noise_variance(&self) -> f64 {
        self.noise_variance
    }

    /// Row-major `q x d` posterior-mean projection.
    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    pub fn projection_row(&self, i: usize) -> &[f64] {
        let d = self.supervector_dim();
        &self.projection[i * d..(i + 1) * d]
    }

    /// Orthonormal basis of the principal subspace, `q x d` row-major.
    pub fn orthonormal_basis(&self) -> Vec<f64> {
        let q = self.loading.clone().qr().q();
        linalg::to_row_major(&q.transpose())
    }

    /// Orthogonal projection of `sv` onto the principal subspace, in supervector space.
    pub fn reconstruct(&self, sv: &[f64]) -> Vec<f64> {
        let d = self.supervector_dim();
        let basis = self.orthonormal_basis();
        let centered: Vec<f64> = sv.iter().zip(&self.mean_sv).map(|(a, b)| a - b).collect();
        let coords = linalg::matvec(&basis, d, &centered);
        let mut out = self.mean_sv.clone();
        for (row, c) in basis.chunks_exact(d).zip(&coords) {
            out.iter_mut().zip(row).for_each(|(o, r)| *o += c * r);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IVector {
    pub eta: Vec<f64>,
    pub normalized: bool,
}

impl IVector {
    pub fn raw(eta: Vec<f64>) -> Self {
        Self {
            eta,
            normalized: false,
        }
    }

    /// Wraps a vector and marks it normalized when its norm is one.
    pub fn normalized(eta: Vec<f64>) -> Result<Self> {
        let n = linalg::norm(&eta);
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::NotNormalized);
        }
        Ok(Self {
            eta,
            normalized: true,
        })
    }

    pub fn dim(&self) -> usize {
        self.eta.len()
    }
}

#[derive(Debug, Clone)]
pub struct PpcaFit {
    pub model: PpcaModel,
    /// Marginal log-likelihood before each update, then of the final model.
    pub log_likelihoods: Vec<f64>,
}

/// Fits PPCA by EM on a supervector population.
pub fn train_ppca(supervectors: &[Supervector], cfg: &PpcaConfig) -> Result<PpcaFit> {
    let rows: Vec<&[f64]> = supervectors.iter().map(|s| s.as_slice()).collect();
    train_ppca_rows(&rows, cfg)
}

pub fn train_ppca_rows(samples: &[&[f64]], cfg: &PpcaConfig) -> Result<PpcaFit> {
    let q = cfg.ivector_dim;
    let n = samples.len();
    if q == 0 {
        return Err(Error::InvalidConfig("i-vector dimension must be positive".into()));
    }
    let d = samples
        .first()
        .map(|s| s.len())
        .ok_or_else(|| Error::RankDeficient("no supervectors".into()))?;
    if let Some(bad) = samples.iter().find(|s| s.len() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: bad.len(),
        });
    }
    if n <= q || q > d {
        return Err(Error::RankDeficient(format!(
            "{n} samples of dimension {d} cannot support a {q}-dimensional subspace"
        )));
    }

    let mut mean = vec![0.0; d];
    for s in samples {
        mean.iter_mut().zip(s.iter()).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let y = DMatrix::from_fn(n, d, |i, j| samples[i][j] - mean[j]);
    let trace_yy: f64 = y.iter().map(|v| v * v).sum();
    if !(trace_yy > 0.0) {
        return Err(Error::RankDeficient("supervectors have zero variance".into()));
    }
    let sigma_floor = 1e-12 * trace_yy / (n * d) as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = (trace_yy / (n * d) as f64).sqrt();
    let mut w = DMatrix::from_fn(d, q, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        scale * z
    });
    let mut sigma2 = trace_yy / (n * d) as f64;

    let mut lls = Vec::with_capacity(cfg.max_iterations + 1);
    for iter in 0..cfg.max_iterations {
        let yw = &y * &w;
        let m = w.tr_mul(&w) + DMatrix::identity(q, q) * sigma2;
        let m_inv = linalg::spd_inverse(&m)
            .ok_or_else(|| Error::RankDeficient("PPCA posterior precision is singular".into()))?;
        let ll = ppca_log_likelihood(n, d, trace_yy, &yw, &m, &m_inv, sigma2)?;
        if let Some(&prev) = lls.last() {
            let prev: f64 = prev;
            if (ll - prev).abs() <= cfg.tolerance * prev.abs() {
                lls.push(ll);
                debug!(iter, "PPCA converged");
                return finish(mean, w, sigma2, lls);
            }
        }
        lls.push(ll);

        let x = &yw * &m_inv;
        let sxx = x.tr_mul(&x) + &m_inv * (n as f64 * sigma2);
        let syx = y.tr_mul(&x);
        let sxx_inv = linalg::spd_inverse(&sxx)
            .ok_or_else(|| Error::RankDeficient("latent second moment is singular".into()))?;
        let w_new = &syx * sxx_inv;
        let cross: f64 = syx.iter().zip(w_new.iter()).map(|(a, b)| a * b).sum();
        let wtw = w_new.tr_mul(&w_new);
        let quad: f64 = sxx.iter().zip(wtw.iter()).map(|(a, b)| a * b).sum();
        sigma2 = ((trace_yy - 2.0 * cross + quad) / (n * d) as f64).max(sigma_floor);
        w = w_new;
    }

    let yw = &y * &w;
    let m = w.tr_mul(&w) + DMatrix::identity(q, q) * sigma2;
    let m_inv = linalg::spd_inverse(&m)
        .ok_or_else(|| Error::RankDeficient("PPCA posterior precision is singular".into()))?;
    lls.push(ppca_log_likelihood(n, d, trace_yy, &yw, &m, &m_inv, sigma2)?);
    finish(mean, w, sigma2, lls)
}

fn finish(mean: Vec<f64>, w: DMatrix<f64>, sigma2: f64, lls: Vec<f64>) -> Result<PpcaFit> {
    Ok(PpcaFit {
        model: PpcaModel::from_parameters(mean, w, sigma2)?,
        log_likelihoods: lls,
    })
}

/// Marginal log-likelihood of centered data under `C = WWᵀ + σ²I`, evaluated
/// in the latent space via the determinant lemma and Woodbury identity.
fn ppca_log_likelihood(
    n: usize,
    d: usize,
    trace_yy: f64,
    yw: &DMatrix<f64>,
    m: &DMatrix<f64>,
    m_inv: &DMatrix<f64>,
    sigma2: f64,
) -> Result<f64> {
    let q = m.nrows();
    let log_det_m = linalg::spd_log_det(m)
        .ok_or_else(|| Error::RankDeficient("PPCA posterior precision is singular".into()))?;
    let log_det_c = (d - q) as f64 * sigma2.ln() + log_det_m;
    let explained: f64 = (yw * m_inv).iter().zip(yw.iter()).map(|(a, b)| a * b).sum();
    let quad = (trace_yy - explained) / sigma2;
    Ok(-0.5 * (n as f64 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det_c) + quad))
}

/// `eta = B (sv - mean_sv)`, one matrix-vector product parallel over rows.
pub fn extract_ivector(sv: &Supervector, model: &PpcaModel) -> Result<IVector> {
    let d = model.supervector_dim();
    if sv.len() != d {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: sv.len(),
        });
    }
    let centered: Vec<f64> = sv.0.iter().zip(&model.mean_sv).map(|(a, b)| a - b).collect();
    let eta = model
        .projection
        .par_chunks(d)
        .map(|row| linalg::dot(row, &centered))
        .collect();
    Ok(IVector::raw(eta))
}

/// Subtracts the training mean and scales to unit length.
pub fn center_and_normalize(eta: &IVector, global_mean: &[f64]) -> Result<IVector> {
    if eta.dim() != global_mean.len() {
        return Err(Error::DimensionMismatch {
            expected: global_mean.len(),
            actual: eta.dim(),
        });
    }
    let centered: Vec<f64> = eta.eta.iter().zip(global_mean).map(|(a, b)| a - b).collect();
    let n = linalg::norm(&centered);
    if n < 1e-12 {
        return Err(Error::ZeroVector);
    }
    Ok(IVector {
        eta: centered.into_iter().map(|v| v / n).collect(),
        normalized: true,
    })
}

/// Mean of a set of raw i-vectors.
pub fn mean_ivector(ivectors: &[IVector]) -> Result<Vec<f64>> {
    let first = ivectors
        .first()
        .ok_or_else(|| Error::InsufficientData("no i-vectors".into()))?;
    let mut mean = vec![0.0; first.dim()];
    for iv in ivectors {
        if iv.dim() != mean.len() {
            return Err(Error::DimensionMismatch {
                expected: mean.len(),
                actual: iv.dim(),
            });
        }
        mean.iter_mut().zip(&iv.eta).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= ivectors.len() as f64);
    Ok(mean)
}
