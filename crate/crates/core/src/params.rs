//! Learnable model state, initialization and checkpoints.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::dataio::Schema;
use crate::error::{CheckpointError, Error, Result};
use crate::seeding::{stream_rng, Stream};

/// How per-modality Gaussian posteriors are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PoeMode {
    /// Elementwise formula weighting means by variances, taken literally.
    PaperLiteral,
    /// Product of Gaussian experts plus a unit-Gaussian prior expert.
    #[default]
    PrecisionWeighted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelHyper {
    /// Number of topics K.
    pub n_topics: usize,
    /// Topic embedding width L.
    pub embed_dim: usize,
    pub encoder_hidden: usize,
    /// Weight of the domain-deviation norm penalty.
    pub lambda_beta: f64,
    /// Contrastive temperature.
    pub kappa: f64,
    pub knn_k: usize,
    pub poe_mode: PoeMode,
    pub seed: u64,
}

impl Default for ModelHyper {
    fn default() -> Self {
        Self {
            n_topics: 50,
            embed_dim: 32,
            encoder_hidden: 128,
            lambda_beta: 0.01,
            kappa: 0.1,
            knn_k: 10,
            poe_mode: PoeMode::PrecisionWeighted,
            seed: 0,
        }
    }
}

impl ModelHyper {
    pub fn validate(&self) -> Result<()> {
        if self.n_topics == 0 || self.embed_dim == 0 || self.encoder_hidden == 0 {
            return Err(Error::Argument(
                "n_topics, embed_dim and encoder_hidden must be positive".into(),
            ));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::Argument(format!("kappa must be positive, got {}", self.kappa)));
        }
        if !(self.lambda_beta >= 0.0 && self.lambda_beta.is_finite()) {
            return Err(Error::Argument("lambda_beta must be non-negative".into()));
        }
        if self.knn_k == 0 {
            return Err(Error::Argument("knn_k must be positive".into()));
        }
        Ok(())
    }
}

/// Feed-forward encoder `V -> hidden -> hidden -> 2K` for one modality.
///
/// Weight matrices are stored `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

impl EncoderWeights {
    pub fn zeros(n_features: usize, hidden: usize, n_topics: usize) -> Self {
        Self {
            w1: Array2::zeros((hidden, n_features)),
            b1: Array1::zeros(hidden),
            w2: Array2::zeros((hidden, hidden)),
            b2: Array1::zeros(hidden),
            w3: Array2::zeros((2 * n_topics, hidden)),
            b3: Array1::zeros(2 * n_topics),
        }
    }

    pub fn n_topics(&self) -> usize {
        self.b3.len() / 2
    }

    pub fn n_features(&self) -> usize {
        self.w1.ncols()
    }
}

/// Every learnable tensor, indexed by positions in `schema`.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub schema: Schema,
    /// Global topic embedding, K x L.
    pub alpha: Array2<f64>,
    /// Per-domain deviation from `alpha`, K x L each.
    pub beta: Vec<Array2<f64>>,
    /// Per-modality feature embedding, L x V each.
    pub rho: Vec<Array2<f64>>,
    /// `lambda[d][i]` is the feature offset for the i-th available modality
    /// of domain d (order of `schema.domains[d].modalities`).
    pub lambda: Vec<Vec<Array1<f64>>>,
    pub prior_mean: Vec<Array1<f64>>,
    pub prior_logvar: Vec<Array1<f64>>,
    pub encoders: Vec<EncoderWeights>,
}

/// Name and shape of one tensor in declaration order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ModelParams {
    /// All-zero parameters shaped for `schema`.
    pub fn zeros(hyper: &ModelHyper, schema: &Schema) -> Self {
        let (k, l, h) = (hyper.n_topics, hyper.embed_dim, hyper.encoder_hidden);
        Self {
            schema: schema.clone(),
            alpha: Array2::zeros((k, l)),
            beta: schema.domains.iter().map(|_| Array2::zeros((k, l))).collect(),
            rho: schema
                .modalities
                .iter()
                .map(|m| Array2::zeros((l, m.n_features)))
                .collect(),
            lambda: schema
                .domains
                .iter()
                .map(|d| {
                    d.modalities
                        .iter()
                        .map(|&m| Array1::zeros(schema.modalities[m].n_features))
                        .collect()
                })
                .collect(),
            prior_mean: schema.domains.iter().map(|_| Array1::zeros(k)).collect(),
            prior_logvar: schema.domains.iter().map(|_| Array1::zeros(k)).collect(),
            encoders: schema
                .modalities
                .iter()
                .map(|m| EncoderWeights::zeros(m.n_features, h, k))
                .collect(),
        }
    }

    pub fn n_topics(&self) -> usize {
        self.alpha.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.alpha.ncols()
    }

    /// Effective topic embedding `alpha + beta[domain]`.
    pub fn omega(&self, domain: usize) -> Array2<f64> {
        &self.alpha + &self.beta[domain]
    }

    /// Offsets for `modality` in `domain`, if that pair is observed.
    pub fn lambda_for(&self, domain: usize, modality: usize) -> Option<&Array1<f64>> {
        let slot = self.schema.domains[domain]
            .modalities
            .iter()
            .position(|&m| m == modality)?;
        Some(&self.lambda[domain][slot])
    }

    /// Tensor names and shapes in declaration order.
    pub fn layout(&self) -> Vec<TensorSpec> {
        let spec = |name: String, shape: &[usize]| TensorSpec {
            name,
            shape: shape.to_vec(),
        };
        let s = &self.schema;
        let mut out = vec![spec("alpha".into(), self.alpha.shape())];
        for (d, b) in self.beta.iter().enumerate() {
            out.push(spec(format!("beta/{}", s.domains[d].id), b.shape()));
        }
        for (m, r) in self.rho.iter().enumerate() {
            out.push(spec(format!("rho/{}", s.modalities[m].id), r.shape()));
        }
        for (d, per) in self.lambda.iter().enumerate() {
            for (slot, lam) in per.iter().enumerate() {
                let m = s.domains[d].modalities[slot];
                out.push(spec(
                    format!("lambda/{}/{}", s.domains[d].id, s.modalities[m].id),
                    lam.shape(),
                ));
            }
        }
        for (d, p) in self.prior_mean.iter().enumerate() {
            out.push(spec(format!("prior_mean/{}", s.domains[d].id), p.shape()));
        }
        for (d, p) in self.prior_logvar.iter().enumerate() {
            out.push(spec(format!("prior_logvar/{}", s.domains[d].id), p.shape()));
        }
        for (m, e) in self.encoders.iter().enumerate() {
            let id = &s.modalities[m].id;
            out.push(spec(format!("encoder/{id}/w1"), e.w1.shape()));
            out.push(spec(format!("encoder/{id}/b1"), e.b1.shape()));
            out.push(spec(format!("encoder/{id}/w2"), e.w2.shape()));
            out.push(spec(format!("encoder/{id}/b2"), e.b2.shape()));
            out.push(spec(format!("encoder/{id}/w3"), e.w3.shape()));
            out.push(spec(format!("encoder/{id}/b3"), e.b3.shape()));
        }
        out
    }

    /// Contiguous views of every tensor in declaration order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = vec![slice(&self.alpha)];
        out.extend(self.beta.iter().map(slice));
        out.extend(self.rho.iter().map(slice));
        out.extend(self.lambda.iter().flatten().map(slice1));
        out.extend(self.prior_mean.iter().map(slice1));
        out.extend(self.prior_logvar.iter().map(slice1));
        for e in &self.encoders {
            out.extend([
                slice(&e.w1),
                slice1(&e.b1),
                slice(&e.w2),
                slice1(&e.b2),
                slice(&e.w3),
                slice1(&e.b3),
            ]);
        }
        out
    }

    /// Mutable counterpart of [`ModelParams::tensors`], same order.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = vec![slice_mut(&mut self.alpha)];
        out.extend(self.beta.iter_mut().map(slice_mut));
        out.extend(self.rho.iter_mut().map(slice_mut));
        out.extend(self.lambda.iter_mut().flatten().map(slice1_mut));
        out.extend(self.prior_mean.iter_mut().map(slice1_mut));
        out.extend(self.prior_logvar.iter_mut().map(slice1_mut));
        for e in &mut self.encoders {
            out.push(slice_mut(&mut e.w1));
            out.push(slice1_mut(&mut e.b1));
            out.push(slice_mut(&mut e.w2));
            out.push(slice1_mut(&mut e.b2));
            out.push(slice_mut(&mut e.w3));
            out.push(slice1_mut(&mut e.b3));
        }
        out
    }

    pub fn n_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Adds `scale * other` tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (a, b) in dst.iter_mut().zip(src) {
                *a += scale * b;
            }
        }
    }

    /// Zeroes every value in place, keeping shapes.
    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }
}

fn slice(a: &Array2<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice1(a: &Array1<f64>) -> &[f64] {
    a.as_slice().expect("standard layout")
}

fn slice_mut(a: &mut Array2<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

fn slice1_mut(a: &mut Array1<f64>) -> &mut [f64] {
    a.as_slice_mut().expect("standard layout")
}

/// Glorot-uniform bound for a tensor with the given fans.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn fill_uniform(a: &mut Array2<f64>, fan_in: usize, fan_out: usize, rng: &mut impl rand::Rng) {
    let bound = glorot_bound(fan_in, fan_out);
    a.mapv_inplace(|_| rng.random_range(-bound..bound));
}

/// Seeded initialization: `alpha`, `rho` and encoder weight matrices are
/// Glorot-uniform; biases, `beta`, `lambda` and the priors start at zero.
pub fn init_params(hyper: &ModelHyper, schema: &Schema) -> Result<ModelParams> {
    hyper.validate()?;
    schema.validate()?;
    let mut p = ModelParams::zeros(hyper, schema);
    let mut rng = stream_rng(hyper.seed, Stream::Init);
    let (k, l) = (hyper.n_topics, hyper.embed_dim);
    fill_uniform(&mut p.alpha, k, l, &mut rng);
    for (m, rho) in p.rho.iter_mut().enumerate() {
        fill_uniform(rho, l, schema.modalities[m].n_features, &mut rng);
    }
    for e in &mut p.encoders {
        for w in [&mut e.w1, &mut e.w2, &mut e.w3] {
            let (out, inp) = w.dim();
            fill_uniform(w, inp, out, &mut rng);
        }
    }
    Ok(p)
}

const MAGIC: &[u8; 8] = b"OMTCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    byte_order: String,
    dtype: String,
    hyper: ModelHyper,
    schema: Schema,
    schema_hash: String,
    tensors: Vec<TensorSpec>,
    blob_bytes: usize,
}

/// Serializes parameters and hyperparameters to bytes.
pub fn encode_checkpoint(params: &ModelParams, hyper: &ModelHyper) -> Vec<u8> {
    let tensors = params.layout();
    let n_values: usize = tensors.iter().map(TensorSpec::len).sum();
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        byte_order: "little".into(),
        dtype: "f64".into(),
        hyper: hyper.clone(),
        schema: params.schema.clone(),
        schema_hash: params.schema.hash(),
        tensors,
        blob_bytes: n_values * 8,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + n_values * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in params.tensors() {
        for x in t {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

/// Inverse of [`encode_checkpoint`].
pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelParams, ModelHyper), CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let need = |expected: usize| -> Result<(), CheckpointError> {
        if bytes.len() < expected {
            Err(CheckpointError::Truncated {
                expected,
                found: bytes.len(),
            })
        } else {
            Ok(())
        }
    };
    need(16)?;
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .ok_or_else(|| CheckpointError::Header("header length overflows".into()))?;
    need(header_end)?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: header.version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if header.byte_order != "little" || header.dtype != "f64" {
        return Err(CheckpointError::Header(format!(
            "unsupported encoding {} {}",
            header.byte_order, header.dtype
        )));
    }
    need(header_end + header.blob_bytes)?;
    if bytes.len() > header_end + header.blob_bytes {
        return Err(CheckpointError::Header("trailing bytes after tensor data".into()));
    }
    if header.schema.hash() != header.schema_hash {
        return Err(CheckpointError::Header("schema hash does not match schema".into()));
    }
    header
        .hyper
        .validate()
        .map_err(|e| CheckpointError::Header(e.to_string()))?;
    header
        .schema
        .validate()
        .map_err(|e| CheckpointError::Header(e.to_string()))?;

    let mut params = ModelParams::zeros(&header.hyper, &header.schema);
    let expected = params.layout();
    if expected != header.tensors {
        let first = expected
            .iter()
            .zip(&header.tensors)
            .find(|(a, b)| a != b)
            .map(|(a, b)| format!("{} should be {:?}, header says {} {:?}", a.name, a.shape, b.name, b.shape))
            .unwrap_or_else(|| "tensor count differs".into());
        return Err(CheckpointError::DimensionMismatch(first));
    }
    let n_values: usize = expected.iter().map(TensorSpec::len).sum();
    if n_values * 8 != header.blob_bytes {
        return Err(CheckpointError::DimensionMismatch(format!(
            "tensors need {} bytes, header declares {}",
            n_values * 8,
            header.blob_bytes
        )));
    }
    let mut chunks = bytes[header_end..].chunks_exact(8);
    for t in params.tensors_mut() {
        for (x, c) in t.iter_mut().zip(&mut chunks) {
            *x = f64::from_le_bytes(c.try_into().expect("8 bytes"));
        }
    }
    Ok((params, header.hyper))
}

pub fn save_checkpoint(params: &ModelParams, hyper: &ModelHyper, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params, hyper)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams, ModelHyper)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_checkpoint(&bytes)?)
}

/// Rejects a checkpoint whose schema differs from the dataset's.
pub fn check_schema(params: &ModelParams, schema: &Schema) -> Result<(), CheckpointError> {
    if params.schema.hash() == schema.hash() {
        Ok(())
    } else {
        Err(CheckpointError::SchemaMismatch)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::dataio::{DomainSchema, ModalitySchema};

    pub fn two_domain_schema() -> Schema {
        Schema {
            modalities: vec![
                ModalitySchema {
                    id: "GEX".into(),
                    n_features: 10,
                },
                ModalitySchema {
                    id: "ADT".into(),
                    n_features: 4,
                },
            ],
            domains: vec![
                DomainSchema {
                    id: "a".into(),
                    modalities: vec![0, 1],
                },
                DomainSchema {
                    id: "b".into(),
                    modalities: vec![1],
                },
            ],
        }
    }

    fn hyper() -> ModelHyper {
        ModelHyper {
            n_topics: 3,
            embed_dim: 8,
            encoder_hidden: 8,
            seed: 11,
            ..ModelHyper::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let s = two_domain_schema();
        let a = init_params(&hyper(), &s).unwrap();
        let b = init_params(&hyper(), &s).unwrap();
        assert_eq!(a, b);
        let c = init_params(&ModelHyper { seed: 12, ..hyper() }, &s).unwrap();
        assert_ne!(a.alpha, c.alpha);
    }

    #[test]
    fn beta_and_lambda_start_at_zero() {
        let p = init_params(&hyper(), &two_domain_schema()).unwrap();
        for d in 0..2 {
            assert_eq!(p.omega(d), p.alpha);
        }
        assert!(p.lambda.iter().flatten().all(|l| l.iter().all(|&x| x == 0.0)));
        assert!(p.lambda_for(1, 0).is_none());
        assert_eq!(p.lambda_for(1, 1).unwrap().len(), 4);
    }

    #[test]
    fn glorot_bound_for_ten_to_eight() {
        let a = glorot_bound(10, 8);
        assert!((a - (6.0f64 / 18.0).sqrt()).abs() < 1e-15);
        assert!((a - 0.5774).abs() < 1e-4);
        // The GEX encoder's first layer maps 10 features to 8 hidden units.
        let p = init_params(&hyper(), &two_domain_schema()).unwrap();
        let w1 = &p.encoders[0].w1;
        assert_eq!(w1.dim(), (8, 10));
        assert!(w1.iter().all(|x| x.abs() <= a));
        assert!(w1.iter().any(|x| x.abs() > a / 2.0));
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let p = init_params(&hyper(), &two_domain_schema()).unwrap();
        let bytes = encode_checkpoint(&p, &hyper());
        let (q, h) = decode_checkpoint(&bytes).unwrap();
        assert_eq!(h, hyper());
        for (a, b) in p.tensors().iter().zip(q.tensors()) {
            let a: Vec<u64> = a.iter().map(|x| x.to_bits()).collect();
            let b: Vec<u64> = b.iter().map(|x| x.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn truncated_checkpoint() {
        let p = init_params(&hyper(), &two_domain_schema()).unwrap();
        let bytes = encode_checkpoint(&p, &hyper());
        let err = decode_checkpoint(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, CheckpointError::Truncated { .. }), "{err}");
    }

    #[test]
    fn edited_topic_count_is_a_dimension_mismatch() {
        let p = init_params(&hyper(), &two_domain_schema()).unwrap();
        let bytes = encode_checkpoint(&p, &hyper());
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + header_len]).unwrap();
        let edited = header.replacen("\"n_topics\":3", "\"n_topics\":4", 1);
        assert_ne!(edited, header);
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(edited.len() as u64).to_le_bytes());
        out.extend_from_slice(edited.as_bytes());
        out.extend_from_slice(&bytes[16 + header_len..]);
        let err = decode_checkpoint(&out).unwrap_err();
        assert!(matches!(err, CheckpointError::DimensionMismatch(_)), "{err}");
    }

    #[test]
    fn version_and_magic_checks() {
        let p = init_params(&hyper(), &two_domain_schema()).unwrap();
        let bytes = encode_checkpoint(&p, &hyper());
        assert_eq!(decode_checkpoint(b"garbage!garbage!").unwrap_err(), CheckpointError::BadMagic);
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let header = std::str::from_utf8(&bytes[16..16 + header_len]).unwrap();
        let edited = header.replacen("\"version\":1", "\"version\":9", 1);
        let mut out = bytes[..8].to_vec();
        out.extend_from_slice(&(edited.len() as u64).to_le_bytes());
        out.extend_from_slice(edited.as_bytes());
        out.extend_from_slice(&bytes[16 + header_len..]);
        assert_eq!(
            decode_checkpoint(&out).unwrap_err(),
            CheckpointError::VersionMismatch {
                found: 9,
                expected: CHECKPOINT_VERSION
            }
        );
    }

    #[test]
    fn schema_mismatch_is_detected() {
        let p = init_params(&hyper(), &two_domain_schema()).unwrap();
        let mut other = two_domain_schema();
        other.modalities[0].n_features = 11;
        assert_eq!(check_schema(&p, &other), Err(CheckpointError::SchemaMismatch));
        assert!(check_schema(&p, &two_domain_schema()).is_ok());
    }
}
