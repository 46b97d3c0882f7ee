//! `VRK1` model container.
//!
//! Little-endian layout:
//!
//! ```text
//! "VRK1"  u32 version  u32 section_count
//! section_count x { [u8; 4] tag, u64 offset, u64 length }
//! payloads
//! ```
//!
//! Sections: `META` (JSON settings), `UBM `, `PPCA` (includes the global
//! i-vector mean), `PLDA`, and optionally `INDX` and `GALY` (JSON gallery).
//! Numeric payloads start with their dims as `u64` followed by row-major
//! `f64` arrays, so a round trip is bit-exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::embedding::PpcaModel;
use crate::error::{Error, Result};
use crate::features::FeatureConfig;
use crate::gallery::SpeakerRecord;
use crate::gmm::DiagonalGmm;
use crate::linalg;
use crate::plda::{IdentificationIndex, IndexPrecision, PldaModel};

pub const MAGIC: &[u8; 4] = b"VRK1";
pub const VERSION: u32 = 1;

const TAG_META: [u8; 4] = *b"META";
const TAG_UBM: [u8; 4] = *b"UBM ";
const TAG_PPCA: [u8; 4] = *b"PPCA";
const TAG_PLDA: [u8; 4] = *b"PLDA";
const TAG_INDEX: [u8; 4] = *b"INDX";
const TAG_GALLERY: [u8; 4] = *b"GALY";

/// Front-end and adaptation settings the models were trained with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub features: FeatureConfig,
    pub relevance: f64,
    pub seed: u64,
}

impl Default for ModelMeta {
    fn default() -> Self {
        Self {
            features: FeatureConfig::default(),
            relevance: 16.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle {
    pub meta: ModelMeta,
    pub ubm: DiagonalGmm,
    pub ppca: PpcaModel,
    pub global_mean: Vec<f64>,
    pub plda: PldaModel,
    pub index: Option<IdentificationIndex>,
    pub gallery: Option<Vec<SpeakerRecord>>,
}

impl ModelBundle {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sections: Vec<([u8; 4], Vec<u8>)> = vec![
            (TAG_META, serde_json::to_vec(&self.meta).map_err(json_err)?),
            (TAG_UBM, encode_ubm(&self.ubm)),
            (TAG_PPCA, encode_ppca(&self.ppca, &self.global_mean)),
            (TAG_PLDA, encode_plda(&self.plda)),
        ];
        if let Some(index) = &self.index {
            sections.push((TAG_INDEX, encode_index(index)));
        }
        if let Some(gallery) = &self.gallery {
            sections.push((TAG_GALLERY, serde_json::to_vec(gallery).map_err(json_err)?));
        }

        let header_len = 12 + sections.len() * 20;
        let total = header_len + sections.iter().map(|(_, p)| p.len()).sum::<usize>();
        let mut out = Vec::with_capacity(total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        let mut offset = header_len as u64;
        for (tag, payload) in &sections {
            out.extend_from_slice(tag);
            out.extend_from_slice(&offset.to_le_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            offset += payload.len() as u64;
        }
        for (_, payload) in &sections {
            out.extend_from_slice(payload);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..4] != MAGIC {
            return Err(Error::ModelFormat("missing VRK1 magic".into()));
        }
        let mut head = Reader::new(&bytes[4..12]);
        let version = head.u32()?;
        if version != VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {version}")));
        }
        let count = head.u32()? as usize;
        let table_end = 12usize
            .checked_add(count.checked_mul(20).ok_or_else(|| truncated("section table"))?)
            .ok_or_else(|| truncated("section table"))?;
        if bytes.len() < table_end {
            return Err(truncated("section table"));
        }
        let mut table = Reader::new(&bytes[12..table_end]);
        let mut found: Vec<([u8; 4], &[u8])> = Vec::with_capacity(count);
        for _ in 0..count {
            let tag: [u8; 4] = table.take(4)?.try_into().expect("four bytes");
            let offset = table.u64()? as usize;
            let len = table.u64()? as usize;
            let end = offset
                .checked_add(len)
                .filter(|&e| e <= bytes.len() && offset >= table_end)
                .ok_or_else(|| truncated(&String::from_utf8_lossy(&tag)))?;
            found.push((tag, &bytes[offset..end]));
        }
        let section = |tag: [u8; 4]| found.iter().find(|(t, _)| *t == tag).map(|(_, p)| *p);
        let required = |tag: [u8; 4]| {
            section(tag).ok_or_else(|| {
                Error::ModelFormat(format!("missing section {}", String::from_utf8_lossy(&tag)))
            })
        };

        let meta: ModelMeta = serde_json::from_slice(required(TAG_META)?).map_err(json_err)?;
        let ubm = decode_ubm(required(TAG_UBM)?)?;
        let (ppca, global_mean) = decode_ppca(required(TAG_PPCA)?)?;
        let plda = decode_plda(required(TAG_PLDA)?)?;
        let index = section(TAG_INDEX).map(decode_index).transpose()?;
        let gallery = section(TAG_GALLERY)
            .map(|p| serde_json::from_slice(p).map_err(json_err))
            .transpose()?;

        if ubm.supervector_dim() != ppca.supervector_dim() {
            return Err(Error::ModelFormat("UBM and PPCA dimensions disagree".into()));
        }
        if ppca.ivector_dim() != plda.ivector_dim() || global_mean.len() != plda.ivector_dim() {
            return Err(Error::ModelFormat("PPCA and PLDA dimensions disagree".into()));
        }
        if let Some(ix) = &index {
            if ix.speaker_dim() != plda.speaker_dim() {
                return Err(Error::ModelFormat("index and PLDA dimensions disagree".into()));
            }
        }
        Ok(Self {
            meta,
            ubm,
            ppca,
            global_mean,
            plda,
            index,
            gallery,
        })
    }

    /// Writes through a temporary sibling file so a failed write leaves no partial container.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("vrk1.partial");
        let result = (|| {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, path)
        })();
        if result.is_err() {
            let _ = fs::remove_file(&tmp);
        }
        Ok(result?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn json_err(e: serde_json::Error) -> Error {
    Error::ModelFormat(e.to_string())
}

fn truncated(what: &str) -> Error {
    Error::ModelFormat(format!("truncated {what}"))
}

fn put_u64(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u64).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vals: &[f64]) {
    out.reserve(vals.len() * 8);
    for v in vals {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_matrix(out: &mut Vec<u8>, m: &DMatrix<f64>) {
    put_f64s(out, &linalg::to_row_major(m));
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| truncated("payload"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("four bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn dim(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::ModelFormat("dimension overflow".into()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("eight bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or_else(|| truncated("array"))?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
            .collect())
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| truncated("array"))?)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
            .collect())
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
        let n = rows.checked_mul(cols).ok_or_else(|| truncated("matrix"))?;
        Ok(linalg::from_row_major(rows, cols, &self.f64s(n)?))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        String::from_utf8(self.take(len)?.to_vec())
            .map_err(|_| Error::ModelFormat("utterance id is not UTF-8".into()))
    }

    fn finish(&self) -> Result<()> {
        if self.pos == self.buf.len() {
            Ok(())
        } else {
            Err(Error::ModelFormat("trailing bytes in section".into()))
        }
    }
}

fn encode_ubm(ubm: &DiagonalGmm) -> Vec<u8> {
    let mut out = Vec::new();
    put_u64(&mut out, ubm.num_components());
    put_u64(&mut out, ubm.dim());
    put_f64s(&mut out, ubm.weights());
    put_f64s(&mut out, ubm.means());
    put_f64s(&mut out, ubm.variances());
    out
}

fn decode_ubm(p: &[u8]) -> Result<DiagonalGmm> {
    let mut r = Reader::new(p);
    let (c, f) = (r.dim()?, r.dim()?);
    let weights = r.f64s(c)?;
    let means = r.f64s(c * f)?;
    let variances = r.f64s(c * f)?;
    r.finish()?;
    DiagonalGmm::new(weights, means, variances, f)
}

fn encode_ppca(ppca: &PpcaModel, global_mean: &[f64]) -> Vec<u8> {
    let mut out = Vec::new();
    put_u64(&mut out, ppca.supervector_dim());
    put_u64(&mut out, ppca.ivector_dim());
    put_f64s(&mut out, &[ppca.noise_variance()]);
    put_f64s(&mut out, ppca.mean_supervector());
    put_matrix(&mut out, ppca.loading());
    put_f64s(&mut out, ppca.projection());
    put_f64s(&mut out, global_mean);
    out
}

fn decode_ppca(p: &[u8]) -> Result<(PpcaModel, Vec<f64>)> {
    let mut r = Reader::new(p);
    let (d, q) = (r.dim()?, r.dim()?);
    let noise = r.f64()?;
    let mean = r.f64s(d)?;
    let loading = r.matrix(d, q)?;
    let projection = r.f64s(q * d)?;
    let global_mean = r.f64s(q)?;
    r.finish()?;
    Ok((PpcaModel::from_stored(mean, loading, noise, projection)?, global_mean))
}

fn encode_plda(m: &PldaModel) -> Vec<u8> {
    let mut out = Vec::new();
    put_u64(&mut out, m.ivector_dim());
    put_u64(&mut out, m.speaker_dim());
    put_f64s(&mut out, m.mean());
    put_matrix(&mut out, m.speaker_loading());
    put_matrix(&mut out, m.residual_covariance());
    put_f64s(&mut out, m.projection());
    put_f64s(&mut out, m.q_diag());
    put_f64s(&mut out, m.lambda_diag());
    put_f64s(&mut out, &[m.score_const()]);
    out
}

fn decode_plda(p: &[u8]) -> Result<PldaModel> {
    let mut r = Reader::new(p);
    let (d, k) = (r.dim()?, r.dim()?);
    let mu = r.f64s(d)?;
    let v = r.matrix(d, k)?;
    let sigma = r.matrix(d, d)?;
    let projection = r.f64s(k * d)?;
    let q = r.f64s(k)?;
    let lambda = r.f64s(k)?;
    let c = r.f64()?;
    r.finish()?;
    PldaModel::from_stored(mu, v, sigma, projection, q, lambda, c)
}

fn encode_index(ix: &IdentificationIndex) -> Vec<u8> {
    let mut out = Vec::new();
    put_u64(&mut out, ix.len());
    put_u64(&mut out, ix.speaker_dim());
    out.push(match ix.precision() {
        IndexPrecision::F64 => 0,
        IndexPrecision::F32 => 1,
    });
    put_f64s(&mut out, ix.nu());
    match ix.precision() {
        IndexPrecision::F64 => put_f64s(&mut out, &ix.rows_f64()),
        IndexPrecision::F32 => {
            for v in ix.rows_f64() {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    for id in ix.utterance_ids() {
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
    }
    out
}

fn decode_index(p: &[u8]) -> Result<IdentificationIndex> {
    let mut r = Reader::new(p);
    let (n, k) = (r.dim()?, r.dim()?);
    let precision = r.take(1)?[0];
    let nu = r.f64s(n)?;
    let rows = n.checked_mul(k).ok_or_else(|| truncated("index"))?;
    let index = match precision {
        0 => {
            let d = r.f64s(rows)?;
            let ids = (0..n).map(|_| r.string()).collect::<Result<_>>()?;
            IdentificationIndex::from_parts(nu, d, ids, k, IndexPrecision::F64)?
        }
        1 => {
            let d = r.f32s(rows)?;
            let ids = (0..n).map(|_| r.string()).collect::<Result<_>>()?;
            IdentificationIndex::from_parts_f32(nu, d, ids, k)?
        }
        other => return Err(Error::ModelFormat(format!("unknown index precision {other}"))),
    };
    r.finish()?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::IVector;
    use crate::gallery::UtteranceRef;
    use crate::plda::{build_index, score_all};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn unit(rng: &mut ChaCha8Rng, d: usize) -> IVector {
        let v: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let n = linalg::norm(&v);
        IVector::normalized(v.into_iter().map(|x| x / n).collect()).unwrap()
    }

    fn bundle(seed: u64, precision: IndexPrecision) -> ModelBundle {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = |rng: &mut ChaCha8Rng| rng.sample::<f64, _>(StandardNormal);
        let (c, f, q, k) = (4, 3, 5, 2);
        let ubm = DiagonalGmm::new(
            vec![0.25; c],
            (0..c * f).map(|_| g(&mut rng)).collect(),
            (0..c * f).map(|_| 0.5 + g(&mut rng).abs()).collect(),
            f,
        )
        .unwrap();
        let ppca = PpcaModel::from_parameters(
            (0..c * f).map(|_| g(&mut rng)).collect(),
            DMatrix::from_fn(c * f, q, |_, _| g(&mut rng)),
            0.3,
        )
        .unwrap();
        let plda = PldaModel::from_parameters(
            (0..q).map(|_| 0.1 * g(&mut rng)).collect(),
            DMatrix::from_fn(q, k, |_, _| g(&mut rng)),
            DMatrix::identity(q, q) * 0.4,
        )
        .unwrap();
        let enroll: Vec<(String, IVector)> =
            (0..7).map(|i| (format!("utt-{i}-é"), unit(&mut rng, q))).collect();
        let index = build_index(&enroll, &plda, precision).unwrap();
        let gallery = vec![SpeakerRecord {
            speaker_id: "s".into(),
            display_name: "S".into(),
            utterances: vec![UtteranceRef {
                utterance_id: "utt-0-é".into(),
                video_id: "v".into(),
                clip_start_s: 0.0,
                clip_end_s: 1.0,
            }],
        }];
        ModelBundle {
            meta: ModelMeta {
                seed,
                ..ModelMeta::default()
            },
            ubm,
            ppca,
            global_mean: (0..q).map(|_| g(&mut rng)).collect(),
            plda,
            index: Some(index),
            gallery: Some(gallery),
        }
    }

    #[test]
    fn round_trip_is_bit_exact_and_scores_match() {
        for precision in [IndexPrecision::F64, IndexPrecision::F32] {
            let b = bundle(3, precision);
            let bytes = b.to_bytes().unwrap();
            assert_eq!(&bytes[..4], b"VRK1");
            let back = ModelBundle::from_bytes(&bytes).unwrap();
            assert_eq!(back, b);
            assert_eq!(back.to_bytes().unwrap(), bytes);
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let t = unit(&mut rng, 5);
            let before = score_all(&t, b.index.as_ref().unwrap(), &b.plda).unwrap();
            let after = score_all(&t, back.index.as_ref().unwrap(), &back.plda).unwrap();
            assert_eq!(
                before.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                after.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn optional_sections_may_be_absent() {
        let mut b = bundle(4, IndexPrecision::F64);
        b.index = None;
        b.gallery = None;
        let back = ModelBundle::from_bytes(&b.to_bytes().unwrap()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let bytes = bundle(5, IndexPrecision::F64).to_bytes().unwrap();
        assert!(matches!(ModelBundle::from_bytes(b"nope"), Err(Error::ModelFormat(_))));
        let mut wrong = bytes.clone();
        wrong[4] = 9;
        assert!(matches!(ModelBundle::from_bytes(&wrong), Err(Error::ModelFormat(_))));
        for cut in [11, 40, bytes.len() / 2, bytes.len() - 1] {
            assert!(ModelBundle::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
    }

    #[test]
    fn save_and_load_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.vrk1");
        let b = bundle(6, IndexPrecision::F64);
        b.save(&path).unwrap();
        assert_eq!(ModelBundle::load(&path).unwrap(), b);
        let leftovers: Vec<_> = fs::read_dir(dir.path()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn any_seed_round_trips(seed in any::<u64>()) {
            let b = bundle(seed, IndexPrecision::F64);
            let bytes = b.to_bytes().unwrap();
            let back = ModelBundle::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        }
    }
}
