//! Simplified Gaussian PLDA: `η = μ + V y + ε`, `y ~ N(0, I)`, `ε ~ N(0, Σ)`.
//!
//! After training, `Σ` is whitened and the between-speaker covariance `VVᵀ`
//! diagonalized in the whitened space. The projection `P` maps an i-vector to
//! `D_spk` coordinates where both covariances are diagonal, so the two-cover
//! log-likelihood ratio decomposes as
//!
//! ```text
//! llr(e, t) = ẽᵀQ̃ẽ + t̃ᵀQ̃t̃ + 2 ẽᵀΛ̃t̃ + const,     x̃ = P (x − μ)
//! ```
//!
//! with diagonal `Q̃` and `Λ̃`. For identification against a fixed gallery the
//! probe self-term and the constant are shared by every row, which gives the
//! precomputed form `scores = ν + 2 D t̃` implemented by [`score_all`].

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::embedding::IVector;
use crate::error::{Error, Result};
use crate::linalg;

const ROW_BLOCK: usize = 2048;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PldaConfig {
    pub speaker_dim: usize,
    pub iterations: usize,
}

impl Default for PldaConfig {
    fn default() -> Self {
        Self {
            speaker_dim: 350,
            iterations: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PldaModel {
    mu: Vec<f64>,
    v: DMatrix<f64>,
    sigma: DMatrix<f64>,
    /// Row-major `D_spk x D_iv`.
    projection: Vec<f64>,
    q_diag: Vec<f64>,
    lambda_diag: Vec<f64>,
    score_const: f64,
}

impl PldaModel {
    /// Builds a model and its scoring matrices from `(μ, V, Σ)`.
    pub fn from_parameters(mu: Vec<f64>, v: DMatrix<f64>, sigma: DMatrix<f64>) -> Result<Self> {
        let d = mu.len();
        let k = v.ncols();
        if k == 0 {
            return Err(Error::InvalidConfig("speaker subspace must be non-empty".into()));
        }
        if v.nrows() != d || sigma.shape() != (d, d) {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: v.nrows(),
            });
        }
        if k > d {
            return Err(Error::InvalidConfig(format!(
                "speaker subspace {k} exceeds i-vector dimension {d}"
            )));
        }
        let mut sigma = sigma;
        linalg::symmetrize(&mut sigma);
        floor_covariance(&mut sigma);

        let chol = sigma
            .clone()
            .cholesky()
            .ok_or_else(|| Error::InvalidConfig("residual covariance is not positive definite".into()))?;
        let l = chol.l();
        // G = L⁻¹ V: the speaker loading in Σ-whitened coordinates.
        let g = l
            .solve_lower_triangular(&v)
            .ok_or_else(|| Error::InvalidConfig("singular residual covariance".into()))?;
        let mut gram = g.tr_mul(&g);
        linalg::symmetrize(&mut gram);
        let eig = SymmetricEigen::new(gram);

        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let phi: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i]).collect();
        if phi[k - 1] <= 1e-12 * phi[0].max(1e-300) {
            return Err(Error::RankDeficient(
                "speaker loading V does not have full column rank".into(),
            ));
        }
        // Orthonormal whitened directions U = G E Φ^{-1/2}, then P = Uᵀ L⁻¹.
        let mut u = DMatrix::zeros(d, k);
        for (col, &i) in order.iter().enumerate() {
            let e = eig.eigenvectors.column(i);
            let dir = &g * e / phi[col].sqrt();
            u.set_column(col, &dir);
        }
        let lt = l.transpose();
        let pt = lt
            .solve_upper_triangular(&u)
            .ok_or_else(|| Error::InvalidConfig("singular residual covariance".into()))?;
        let projection = linalg::to_row_major(&pt.transpose());

        let q_diag = phi
            .iter()
            .map(|&p| 0.5 * (1.0 / (1.0 + p) - (1.0 + p) / (1.0 + 2.0 * p)))
            .collect();
        let lambda_diag = phi.iter().map(|&p| 0.5 * p / (1.0 + 2.0 * p)).collect();
        let score_const = phi
            .iter()
            .map(|&p| (1.0 + p).ln() - 0.5 * (1.0 + 2.0 * p).ln())
            .sum();

        Ok(Self {
            mu,
            v,
            sigma,
            projection,
            q_diag,
            lambda_diag,
            score_const,
        })
    }

    /// Restores a model with its stored scoring matrices, bit for bit.
    #[allow(clippy::too_many_arguments)]
    pub fn from_stored(
        mu: Vec<f64>,
        v: DMatrix<f64>,
        sigma: DMatrix<f64>,
        projection: Vec<f64>,
        q_diag: Vec<f64>,
        lambda_diag: Vec<f64>,
        score_const: f64,
    ) -> Result<Self> {
        let (d, k) = (mu.len(), v.ncols());
        if v.nrows() != d
            || sigma.shape() != (d, d)
            || projection.len() != k * d
            || q_diag.len() != k
            || lambda_diag.len() != k
        {
            return Err(Error::ModelFormat("inconsistent PLDA dimensions".into()));
        }
        Ok(Self {
            mu,
            v,
            sigma,
            projection,
            q_diag,
            lambda_diag,
            score_const,
        })
    }

    pub fn ivector_dim(&self) -> usize {
        self.mu.len()
    }

    pub fn speaker_dim(&self) -> usize {
        self.v.ncols()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mu
    }

    pub fn speaker_loading(&self) -> &DMatrix<f64> {
        &self.v
    }

    pub fn residual_covariance(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    pub fn between_covariance(&self) -> DMatrix<f64> {
        &self.v * self.v.transpose()
    }

    /// Row-major `D_spk x D_iv` projection `P`.
    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    pub fn q_diag(&self) -> &[f64] {
        &self.q_diag
    }

    pub fn lambda_diag(&self) -> &[f64] {
        &self.lambda_diag
    }

    pub fn qtilde(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.q_diag))
    }

    pub fn lambda(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(&self.lambda_diag))
    }

    pub fn score_const(&self) -> f64 {
        self.score_const
    }

    /// `P (η − μ)`.
    pub fn project(&self, iv: &IVector) -> Result<Vec<f64>> {
        if iv.dim() != self.ivector_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.ivector_dim(),
                actual: iv.dim(),
            });
        }
        let centered: Vec<f64> = iv.eta.iter().zip(&self.mu).map(|(a, b)| a - b).collect();
        Ok(linalg::matvec(&self.projection, self.ivector_dim(), &centered))
    }

    fn self_term(&self, projected: &[f64]) -> f64 {
        projected
            .iter()
            .zip(&self.q_diag)
            .map(|(x, q)| q * x * x)
            .sum()
    }
}

/// Adds `1e-8 · tr(Σ)/D` to the diagonal when `Σ` has an eigenvalue below `1e-10`.
fn floor_covariance(sigma: &mut DMatrix<f64>) {
    let d = sigma.nrows();
    let shifted = &*sigma - DMatrix::identity(d, d) * 1e-10;
    if shifted.cholesky().is_none() {
        let bump = 1e-8 * sigma.trace() / d as f64;
        for i in 0..d {
            sigma[(i, i)] += bump.max(1e-10);
        }
    }
}

fn require_normalized(iv: &IVector) -> Result<()> {
    if iv.normalized {
        Ok(())
    } else {
        Err(Error::NotNormalized)
    }
}

/// Same-speaker versus different-speaker log-likelihood ratio.
pub fn score_pairwise(e: &IVector, t: &IVector, model: &PldaModel) -> Result<f64> {
    require_normalized(e)?;
    require_normalized(t)?;
    let pe = model.project(e)?;
    let pt = model.project(t)?;
    let cross: f64 = pe
        .iter()
        .zip(&pt)
        .zip(&model.lambda_diag)
        .map(|((a, b), l)| l * a * b)
        .sum();
    Ok(model.self_term(&pe) + model.self_term(&pt) + 2.0 * cross + model.score_const)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum IndexPrecision {
    #[default]
    F64,
    F32,
}

#[derive(Debug, Clone, PartialEq)]
enum Rows {
    F64(Vec<f64>),
    F32(Vec<f32>),
}

/// Precomputed gallery: `ν_i = ẽ_iᵀQ̃ẽ_i` and rows `D_i = ẽ_iᵀΛ̃`.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentificationIndex {
    nu: Vec<f64>,
    rows: Rows,
    utterance_ids: Vec<String>,
    speaker_dim: usize,
}

impl IdentificationIndex {
    /// Assembles an index from precomputed parts (row-major `d`).
    pub fn from_parts(
        nu: Vec<f64>,
        d: Vec<f64>,
        utterance_ids: Vec<String>,
        speaker_dim: usize,
        precision: IndexPrecision,
    ) -> Result<Self> {
        let n = nu.len();
        if utterance_ids.len() != n || d.len() != n * speaker_dim {
            return Err(Error::DimensionMismatch {
                expected: n * speaker_dim,
                actual: d.len(),
            });
        }
        let rows = match precision {
            IndexPrecision::F64 => Rows::F64(d),
            IndexPrecision::F32 => Rows::F32(d.into_iter().map(|x| x as f32).collect()),
        };
        Ok(Self {
            nu,
            rows,
            utterance_ids,
            speaker_dim,
        })
    }

    /// Same as [`Self::from_parts`] but takes rows already narrowed to `f32`.
    pub fn from_parts_f32(
        nu: Vec<f64>,
        d: Vec<f32>,
        utterance_ids: Vec<String>,
        speaker_dim: usize,
    ) -> Result<Self> {
        let n = nu.len();
        if utterance_ids.len() != n || d.len() != n * speaker_dim {
            return Err(Error::DimensionMismatch {
                expected: n * speaker_dim,
                actual: d.len(),
            });
        }
        Ok(Self {
            nu,
            rows: Rows::F32(d),
            utterance_ids,
            speaker_dim,
        })
    }

    pub fn len(&self) -> usize {
        self.nu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nu.is_empty()
    }

    pub fn speaker_dim(&self) -> usize {
        self.speaker_dim
    }

    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    pub fn utterance_ids(&self) -> &[String] {
        &self.utterance_ids
    }

    pub fn precision(&self) -> IndexPrecision {
        match self.rows {
            Rows::F64(_) => IndexPrecision::F64,
            Rows::F32(_) => IndexPrecision::F32,
        }
    }

    /// Row `i` of `D`, widened to `f64`.
    pub fn row(&self, i: usize) -> Vec<f64> {
        let k = self.speaker_dim;
        match &self.rows {
            Rows::F64(d) => d[i * k..(i + 1) * k].to_vec(),
            Rows::F32(d) => d[i * k..(i + 1) * k].iter().map(|&x| x as f64).collect(),
        }
    }

    /// All of `D`, widened to `f64`, row-major.
    pub fn rows_f64(&self) -> Vec<f64> {
        match &self.rows {
            Rows::F64(d) => d.clone(),
            Rows::F32(d) => d.iter().map(|&x| x as f64).collect(),
        }
    }

    /// `ν + 2 D t̃` for an already projected probe.
    pub fn score_projected(&self, projected: &[f64]) -> Result<Vec<f64>> {
        let k = self.speaker_dim;
        if projected.len() != k {
            return Err(Error::DimensionMismatch {
                expected: k,
                actual: projected.len(),
            });
        }
        let twice: Vec<f64> = projected.iter().map(|x| 2.0 * x).collect();
        let mut out = vec![0.0; self.len()];
        match &self.rows {
            Rows::F64(d) => out
                .par_chunks_mut(ROW_BLOCK)
                .zip(d.par_chunks(ROW_BLOCK * k))
                .zip(self.nu.par_chunks(ROW_BLOCK))
                .for_each(|((o, rows), nu)| {
                    for ((s, r), n) in o.iter_mut().zip(rows.chunks_exact(k)).zip(nu) {
                        *s = n + linalg::dot(r, &twice);
                    }
                }),
            Rows::F32(d) => out
                .par_chunks_mut(ROW_BLOCK)
                .zip(d.par_chunks(ROW_BLOCK * k))
                .zip(self.nu.par_chunks(ROW_BLOCK))
                .for_each(|((o, rows), nu)| {
                    for ((s, r), n) in o.iter_mut().zip(rows.chunks_exact(k)).zip(nu) {
                        *s = n + linalg::dot_f32(r, &twice);
                    }
                }),
        }
        Ok(out)
    }
}

/// Precomputes the enrollment side of every gallery trial.
pub fn build_index(
    enrollment: &[(String, IVector)],
    model: &PldaModel,
    precision: IndexPrecision,
) -> Result<IdentificationIndex> {
    if enrollment.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let k = model.speaker_dim();
    let projected: Vec<Vec<f64>> = enrollment
        .par_iter()
        .map(|(_, iv)| {
            require_normalized(iv)?;
            model.project(iv)
        })
        .collect::<Result<_>>()?;
    let mut nu = Vec::with_capacity(enrollment.len());
    let mut d = Vec::with_capacity(enrollment.len() * k);
    for p in &projected {
        nu.push(model.self_term(p));
        d.extend(p.iter().zip(&model.lambda_diag).map(|(x, l)| x * l));
    }
    let ids = enrollment.iter().map(|(id, _)| id.clone()).collect();
    IdentificationIndex::from_parts(nu, d, ids, k, precision)
}

/// Identification scores of one probe against the whole gallery.
///
/// Equals `score_pairwise(e_i, t)` minus the probe self-term and constant,
/// which are shared by all rows and do not affect the ranking.
pub fn score_all(t: &IVector, index: &IdentificationIndex, model: &PldaModel) -> Result<Vec<f64>> {
    require_normalized(t)?;
    if index.speaker_dim() != model.speaker_dim() {
        return Err(Error::DimensionMismatch {
            expected: model.speaker_dim(),
            actual: index.speaker_dim(),
        });
    }
    index.score_projected(&model.project(t)?)
}

#[derive(Debug, Clone)]
pub struct PldaFit {
    pub model: PldaModel,
    pub log_likelihoods: Vec<f64>,
}

struct SpeakerGroup {
    count: usize,
    sum: DVector<f64>,
}

/// EM estimation of `(μ, V, Σ)` from labeled i-vectors.
pub fn train_plda(data: &[(String, IVector)], cfg: &PldaConfig) -> Result<PldaFit> {
    let k = cfg.speaker_dim;
    if k == 0 {
        return Err(Error::InvalidConfig("speaker_dim must be at least 1".into()));
    }
    let d = data
        .first()
        .map(|(_, iv)| iv.dim())
        .ok_or_else(|| Error::InsufficientSpeakers("no training data".into()))?;
    if k > d {
        return Err(Error::InvalidConfig(format!(
            "speaker_dim {k} exceeds i-vector dimension {d}"
        )));
    }
    if let Some((_, bad)) = data.iter().find(|(_, iv)| iv.dim() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: bad.dim(),
        });
    }
    let n_total = data.len();

    let mut mu = vec![0.0; d];
    for (_, iv) in data {
        mu.iter_mut().zip(&iv.eta).for_each(|(m, v)| *m += v);
    }
    mu.iter_mut().for_each(|m| *m /= n_total as f64);

    let mut by_speaker: BTreeMap<&str, SpeakerGroup> = BTreeMap::new();
    let mut scatter = DMatrix::<f64>::zeros(d, d);
    for (label, iv) in data {
        let x = DVector::from_iterator(d, iv.eta.iter().zip(&mu).map(|(a, b)| a - b));
        scatter.ger(1.0, &x, &x, 1.0);
        let g = by_speaker.entry(label.as_str()).or_insert_with(|| SpeakerGroup {
            count: 0,
            sum: DVector::zeros(d),
        });
        g.count += 1;
        g.sum += &x;
    }
    let multi = by_speaker.values().filter(|g| g.count >= 2).count();
    if multi < k {
        return Err(Error::InsufficientSpeakers(format!(
            "{multi} speakers with two or more utterances, need at least {k}"
        )));
    }
    let groups: Vec<SpeakerGroup> = by_speaker.into_values().collect();

    // Initialization from between/within scatter.
    let mut between = DMatrix::<f64>::zeros(d, d);
    for g in &groups {
        between.ger(1.0 / g.count as f64, &g.sum, &g.sum, 1.0);
    }
    let mut sigma = (&scatter - &between) / n_total as f64;
    linalg::symmetrize(&mut sigma);
    floor_covariance(&mut sigma);
    between /= n_total as f64;
    linalg::symmetrize(&mut between);
    let eig = SymmetricEigen::new(between);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let floor_ev = 1e-6 * eig.eigenvalues[order[0]].abs().max(1e-12);
    let mut v = DMatrix::zeros(d, k);
    for (col, &i) in order.iter().take(k).enumerate() {
        let scale = eig.eigenvalues[i].max(floor_ev).sqrt();
        v.set_column(col, &(eig.eigenvectors.column(i) * scale));
    }

    let mut lls = Vec::with_capacity(cfg.iterations + 1);
    for iter in 0..=cfg.iterations {
        let e = e_step(&groups, &scatter, &v, &sigma, d, k)?;
        if let Some(&prev) = lls.last() {
            let prev: f64 = prev;
            if e.log_likelihood < prev - 1e-8 * prev.abs() {
                return Err(Error::NonConvergence(format!(
                    "PLDA log-likelihood fell from {prev} to {} at iteration {iter}",
                    e.log_likelihood
                )));
            }
        }
        lls.push(e.log_likelihood);
        if iter == cfg.iterations {
            break;
        }
        let r_inv = linalg::spd_inverse(&e.r)
            .ok_or_else(|| Error::NonConvergence("singular latent second moment".into()))?;
        v = e.t.transpose() * r_inv;
        sigma = (&scatter - &v * &e.t) / n_total as f64;
        linalg::symmetrize(&mut sigma);
        floor_covariance(&mut sigma);
        debug!(iter, ll = e.log_likelihood, "PLDA EM");
    }

    Ok(PldaFit {
        model: PldaModel::from_parameters(mu, v, sigma)?,
        log_likelihoods: lls,
    })
}

struct EStep {
    log_likelihood: f64,
    /// `Σ_s n_s E[y yᵀ]`
    r: DMatrix<f64>,
    /// `Σ_s E[y] f_sᵀ`
    t: DMatrix<f64>,
}

fn e_step(
    groups: &[SpeakerGroup],
    scatter: &DMatrix<f64>,
    v: &DMatrix<f64>,
    sigma: &DMatrix<f64>,
    d: usize,
    k: usize,
) -> Result<EStep> {
    let sigma_inv = linalg::spd_inverse(sigma)
        .ok_or_else(|| Error::NonConvergence("residual covariance lost definiteness".into()))?;
    let log_det_sigma = linalg::spd_log_det(sigma)
        .ok_or_else(|| Error::NonConvergence("residual covariance lost definiteness".into()))?;
    let vt_si = v.transpose() * &sigma_inv;
    let mut j = &vt_si * v;
    linalg::symmetrize(&mut j);

    // Posterior precision depends only on the utterance count.
    let mut per_count: BTreeMap<usize, (DMatrix<f64>, f64)> = BTreeMap::new();
    for g in groups {
        if !per_count.contains_key(&g.count) {
            let l = DMatrix::identity(k, k) + &j * g.count as f64;
            let inv = linalg::spd_inverse(&l)
                .ok_or_else(|| Error::NonConvergence("posterior precision singular".into()))?;
            let ld = linalg::spd_log_det(&l)
                .ok_or_else(|| Error::NonConvergence("posterior precision singular".into()))?;
            per_count.insert(g.count, (inv, ld));
        }
    }

    let n_total: usize = groups.iter().map(|g| g.count).sum();
    let quad_all: f64 = sigma_inv.iter().zip(scatter.iter()).map(|(a, b)| a * b).sum();
    let mut ll = -0.5
        * (n_total as f64 * (d as f64 * (2.0 * std::f64::consts::PI).ln() + log_det_sigma)
            + quad_all);

    let mut r = DMatrix::zeros(k, k);
    let mut t = DMatrix::zeros(k, d);
    for g in groups {
        let (l_inv, l_logdet) = &per_count[&g.count];
        let b = &vt_si * &g.sum;
        let y = l_inv * &b;
        ll += -0.5 * l_logdet + 0.5 * b.dot(&y);
        r += (l_inv + &y * y.transpose()) * g.count as f64;
        t.ger(1.0, &y, &g.sum, 1.0);
    }
    linalg::symmetrize(&mut r);
    Ok(EStep {
        log_likelihood: ll,
        r,
        t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normal(rng: &mut ChaCha8Rng) -> f64 {
        rng.sample(StandardNormal)
    }

    fn unit(v: Vec<f64>) -> IVector {
        let n = linalg::norm(&v);
        IVector::normalized(v.into_iter().map(|x| x / n).collect()).unwrap()
    }

    fn random_model(rng: &mut ChaCha8Rng, d: usize, k: usize) -> PldaModel {
        let v = DMatrix::from_fn(d, k, |_, _| 0.3 * normal(rng));
        let a = DMatrix::from_fn(d, d, |_, _| normal(rng));
        let sigma = &a * a.transpose() / d as f64 * 0.05 + DMatrix::identity(d, d) * 0.01;
        let mu = (0..d).map(|_| 0.01 * normal(rng)).collect();
        PldaModel::from_parameters(mu, v, sigma).unwrap()
    }

    fn log_gauss(x: &DVector<f64>, cov: &DMatrix<f64>) -> f64 {
        let n = x.len() as f64;
        let det = cov.determinant();
        let inv = cov.clone().try_inverse().unwrap();
        -0.5 * (n * (2.0 * std::f64::consts::PI).ln() + det.ln() + (x.transpose() * inv * x)[0])
    }

    #[test]
    fn toy_model_matches_explicit_joint_gaussian_llr() {
        let mu = vec![0.1, -0.2];
        let v = DMatrix::from_row_slice(2, 1, &[0.8, 0.3]);
        let sigma = DMatrix::from_row_slice(2, 2, &[0.2, 0.05, 0.05, 0.1]);
        let model = PldaModel::from_parameters(mu.clone(), v.clone(), sigma.clone()).unwrap();

        let b = &v * v.transpose();
        let tot = &b + &sigma;
        let mut same = DMatrix::zeros(4, 4);
        same.view_mut((0, 0), (2, 2)).copy_from(&tot);
        same.view_mut((2, 2), (2, 2)).copy_from(&tot);
        same.view_mut((0, 2), (2, 2)).copy_from(&b);
        same.view_mut((2, 0), (2, 2)).copy_from(&b);

        let utts = [
            unit(vec![0.6, 0.8]),
            unit(vec![-0.3, 0.9]),
            unit(vec![0.99, -0.1]),
        ];
        for e in &utts {
            for t in &utts {
                let x = DVector::from_iterator(
                    4,
                    e.eta.iter().zip(&mu).chain(t.eta.iter().zip(&mu)).map(|(a, m)| a - m),
                );
                let xe = DVector::from_row_slice(&x.as_slice()[..2]);
                let xt = DVector::from_row_slice(&x.as_slice()[2..]);
                let oracle = log_gauss(&x, &same) - log_gauss(&xe, &tot) - log_gauss(&xt, &tot);
                let llr = score_pairwise(e, t, &model).unwrap();
                assert!((llr - oracle).abs() < 1e-8, "{llr} vs {oracle}");
            }
        }
    }

    #[test]
    fn pairwise_scoring_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = random_model(&mut rng, 12, 4);
        for _ in 0..20 {
            let a = unit((0..12).map(|_| normal(&mut rng)).collect());
            let b = unit((0..12).map(|_| normal(&mut rng)).collect());
            let ab = score_pairwise(&a, &b, &model).unwrap();
            let ba = score_pairwise(&b, &a, &model).unwrap();
            assert!((ab - ba).abs() < 1e-10);
        }
    }

    #[test]
    fn pairwise_requires_normalized_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = random_model(&mut rng, 6, 2);
        let raw = IVector::raw(vec![1.0; 6]);
        let ok = unit(vec![1.0; 6]);
        assert!(matches!(score_pairwise(&raw, &ok, &model), Err(Error::NotNormalized)));
        let short = unit(vec![1.0; 5]);
        assert!(matches!(
            score_pairwise(&short, &ok, &model),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn gallery_scores_differ_from_pairwise_by_a_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = random_model(&mut rng, 30, 10);
        let gallery: Vec<(String, IVector)> = (0..100)
            .map(|i| (format!("u{i}"), unit((0..30).map(|_| normal(&mut rng)).collect())))
            .collect();
        let index = build_index(&gallery, &model, IndexPrecision::F64).unwrap();
        assert_eq!(index.len(), 100);
        for _ in 0..10 {
            let t = unit((0..30).map(|_| normal(&mut rng)).collect());
            let fast = score_all(&t, &index, &model).unwrap();
            let slow: Vec<f64> = gallery
                .iter()
                .map(|(_, e)| score_pairwise(e, &t, &model).unwrap())
                .collect();
            let offset = slow[0] - fast[0];
            for (f, s) in fast.iter().zip(&slow) {
                assert!((s - f - offset).abs() < 1e-8);
            }
            let mut a: Vec<usize> = (0..100).collect();
            let mut b = a.clone();
            a.sort_by(|&i, &j| fast[j].total_cmp(&fast[i]));
            b.sort_by(|&i, &j| slow[j].total_cmp(&slow[i]));
            assert_eq!(a, b);
        }
    }

    #[test]
    fn index_entries_match_hand_computation() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let model = random_model(&mut rng, 8, 3);
        let gallery: Vec<(String, IVector)> = (0..3)
            .map(|i| (format!("u{i}"), unit((0..8).map(|_| normal(&mut rng)).collect())))
            .collect();
        let index = build_index(&gallery, &model, IndexPrecision::F64).unwrap();
        let p = DMatrix::from_row_slice(3, 8, model.projection());
        for (i, (_, iv)) in gallery.iter().enumerate() {
            let x = DVector::from_iterator(8, iv.eta.iter().zip(model.mean()).map(|(a, m)| a - m));
            let proj = &p * x;
            let nu = (proj.transpose() * model.qtilde() * &proj)[0];
            let row = proj.transpose() * model.lambda();
            assert!((index.nu()[i] - nu).abs() < 1e-12);
            for (a, b) in index.row(i).iter().zip(row.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn probe_on_the_mean_scores_nu() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 6;
        let v = DMatrix::from_fn(d, 2, |_, _| normal(&mut rng));
        let mut mu = vec![0.0; d];
        mu[0] = 1.0;
        let model = PldaModel::from_parameters(mu.clone(), v, DMatrix::identity(d, d) * 0.5).unwrap();
        let gallery: Vec<(String, IVector)> = (0..5)
            .map(|i| (format!("u{i}"), unit((0..d).map(|_| normal(&mut rng)).collect())))
            .collect();
        let index = build_index(&gallery, &model, IndexPrecision::F64).unwrap();
        // t = μ is unit length here, and P(t − μ) = 0
        let t = IVector::normalized(mu).unwrap();
        assert_eq!(score_all(&t, &index, &model).unwrap(), index.nu());
    }

    #[test]
    fn zero_projection_enrollment_gives_zero_entries() {
        let d = 4;
        let mu = vec![1.0, 0.0, 0.0, 0.0];
        let v = DMatrix::from_row_slice(d, 1, &[0.0, 1.0, 0.0, 0.0]);
        let model = PldaModel::from_parameters(mu.clone(), v, DMatrix::identity(d, d)).unwrap();
        let gallery = vec![("only".to_string(), IVector::normalized(mu).unwrap())];
        let index = build_index(&gallery, &model, IndexPrecision::F64).unwrap();
        assert_eq!(index.nu(), &[0.0]);
        assert!(index.row(0).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn scoring_is_bit_identical_across_thread_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let model = random_model(&mut rng, 20, 8);
        let gallery: Vec<(String, IVector)> = (0..5000)
            .map(|i| (format!("u{i}"), unit((0..20).map(|_| normal(&mut rng)).collect())))
            .collect();
        let t = unit((0..20).map(|_| normal(&mut rng)).collect());
        let run = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| {
                    let index = build_index(&gallery, &model, IndexPrecision::F64).unwrap();
                    (score_all(&t, &index, &model).unwrap(), index)
                })
        };
        let (s1, i1) = run(1);
        let (s4, i4) = run(4);
        assert_eq!(s1, s4);
        assert_eq!(i1, i4);
    }

    #[test]
    fn single_precision_rows_stay_close() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let model = random_model(&mut rng, 20, 8);
        let gallery: Vec<(String, IVector)> = (0..200)
            .map(|i| (format!("u{i}"), unit((0..20).map(|_| normal(&mut rng)).collect())))
            .collect();
        let full = build_index(&gallery, &model, IndexPrecision::F64).unwrap();
        let half = build_index(&gallery, &model, IndexPrecision::F32).unwrap();
        let t = unit((0..20).map(|_| normal(&mut rng)).collect());
        let a = score_all(&t, &full, &model).unwrap();
        let b = score_all(&t, &half, &model).unwrap();
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-4));
    }

    #[test]
    fn empty_enrollment_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = random_model(&mut rng, 4, 2);
        assert!(matches!(
            build_index(&[], &model, IndexPrecision::F64),
            Err(Error::EmptyGallery)
        ));
    }

    /// Draws `speakers x per_speaker` vectors from a known PLDA generator and
    /// also returns the realized between and within covariances.
    fn generate(
        rng: &mut ChaCha8Rng,
        d: usize,
        k: usize,
        speakers: usize,
        per_speaker: usize,
    ) -> (Vec<(String, IVector)>, DMatrix<f64>, DMatrix<f64>) {
        let v = DMatrix::from_fn(d, k, |_, _| normal(rng));
        let a = DMatrix::from_fn(d, d, |_, _| normal(rng));
        let sigma = &a * a.transpose() / d as f64 * 0.5 + DMatrix::identity(d, d) * 0.2;
        let chol = sigma.clone().cholesky().unwrap().l();
        let mut data = Vec::new();
        let mut between = DMatrix::zeros(d, d);
        let mut within = DMatrix::zeros(d, d);
        for s in 0..speakers {
            let y = DVector::from_fn(k, |_, _| normal(rng));
            let offset = &v * y;
            between.ger(1.0 / speakers as f64, &offset, &offset, 1.0);
            for _ in 0..per_speaker {
                let eps = &chol * DVector::from_fn(d, |_, _| normal(rng));
                within.ger(1.0 / (speakers * per_speaker) as f64, &eps, &eps, 1.0);
                let x = &offset + eps;
                data.push((format!("spk{s:03}"), IVector::raw(x.as_slice().to_vec())));
            }
        }
        (data, between, within)
    }

    fn rel_frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
        (a - b).norm() / b.norm()
    }

    #[test]
    fn recovers_generator_covariances() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (data, between, within) = generate(&mut rng, 20, 5, 200, 10);
        let cfg = PldaConfig {
            speaker_dim: 5,
            iterations: 50,
        };
        let fit = train_plda(&data, &cfg).unwrap();
        let b = rel_frobenius(&fit.model.between_covariance(), &between);
        let w = rel_frobenius(fit.model.residual_covariance(), &within);
        assert!(b < 0.10, "between-speaker error {b}");
        assert!(w < 0.10, "within-speaker error {w}");
        for pair in fit.log_likelihoods.windows(2) {
            assert!(pair[1] >= pair[0] - 1e-8 * pair[0].abs());
        }
        let q = fit.model.qtilde();
        assert!((&q - q.transpose()).norm() < 1e-10);
    }

    #[test]
    fn same_speaker_trials_outscore_impostors() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let (data, _, _) = generate(&mut rng, 20, 5, 200, 10);
        let data: Vec<(String, IVector)> = data.into_iter().map(|(l, iv)| (l, unit(iv.eta))).collect();
        let model = train_plda(&data, &PldaConfig { speaker_dim: 5, iterations: 10 })
            .unwrap()
            .model;
        let mut target = Vec::new();
        let mut nontarget = Vec::new();
        for i in (0..data.len()).step_by(7) {
            for j in (i + 1..data.len()).step_by(13) {
                let s = score_pairwise(&data[i].1, &data[j].1, &model).unwrap();
                if data[i].0 == data[j].0 {
                    target.push(s);
                } else {
                    nontarget.push(s);
                }
            }
        }
        assert!(!target.is_empty() && !nontarget.is_empty());
        let wins: f64 = target
            .iter()
            .map(|t| {
                nontarget
                    .iter()
                    .map(|n| if t > n { 1.0 } else if t == n { 0.5 } else { 0.0 })
                    .sum::<f64>()
            })
            .sum();
        let auc = wins / (target.len() * nontarget.len()) as f64;
        assert!(auc > 0.9, "AUC {auc}");
    }

    #[test]
    fn degenerate_configs_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (data, _, _) = generate(&mut rng, 6, 2, 3, 2);
        let zero = PldaConfig { speaker_dim: 0, iterations: 1 };
        assert!(matches!(train_plda(&data, &zero), Err(Error::InvalidConfig(_))));
        let too_many = PldaConfig { speaker_dim: 5, iterations: 1 };
        assert!(matches!(train_plda(&data, &too_many), Err(Error::InsufficientSpeakers(_))));
    }
}
