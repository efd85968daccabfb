//! Two-tower text encoder: hashed bag-of-words features, a shared linear
//! projection, L2 normalization, and the InfoNCE contrastive loss with
//! exact analytic gradients.
//!
//! One tower encodes both queries and documents. All training-path math is
//! f64 so gradient checks and acceptance tolerances are meaningful.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{fnv1a64, standard_normal, tokenize};

/// Term-frequency transform applied to hashed token counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TfMode {
    Raw,
    Log1p,
}

/// Featurization settings. Identical text always hashes to the identical
/// feature vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureConfig {
    /// Number of hash buckets; must be a power of two.
    pub hash_dim: usize,
    pub tf_mode: TfMode,
    pub lowercase: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            hash_dim: 32_768,
            tf_mode: TfMode::Log1p,
            lowercase: true,
        }
    }
}

impl FeatureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hash_dim < 2 || !self.hash_dim.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "hash_dim must be a power of two >= 2, got {}",
                self.hash_dim
            )));
        }
        Ok(())
    }
}

/// Sparse feature vector with strictly increasing indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseVec {
    pub indices: Vec<u32>,
    pub values: Vec<f64>,
}

impl SparseVec {
    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Hash tokens into `hash_dim` buckets and apply the tf transform.
pub fn featurize(text: &str, cfg: &FeatureConfig) -> SparseVec {
    let mask = (cfg.hash_dim as u64) - 1;
    let mut counts: BTreeMap<u32, f64> = BTreeMap::new();
    for tok in tokenize(text, cfg.lowercase) {
        let idx = (fnv1a64(tok.as_bytes()) & mask) as u32;
        *counts.entry(idx).or_insert(0.0) += 1.0;
    }
    let mut indices = Vec::with_capacity(counts.len());
    let mut values = Vec::with_capacity(counts.len());
    for (idx, count) in counts {
        indices.push(idx);
        values.push(match cfg.tf_mode {
            TfMode::Raw => count,
            TfMode::Log1p => count.ln_1p(),
        });
    }
    SparseVec { indices, values }
}

/// Encoder parameters: the projection matrix (hash_dim x embed_dim) and the
/// softmax temperature.
#[derive(Debug, Clone)]
pub struct EncoderParams {
    pub projection: Array2<f64>,
    pub temperature: f64,
}

impl EncoderParams {
    /// Seeded Gaussian initialization.
    pub fn random(hash_dim: usize, embed_dim: usize, temperature: f64, seed: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let projection =
            Array2::from_shape_fn((hash_dim, embed_dim), |_| standard_normal(&mut rng));
        Self {
            projection,
            temperature,
        }
    }

    pub fn hash_dim(&self) -> usize {
        self.projection.nrows()
    }

    pub fn embed_dim(&self) -> usize {
        self.projection.ncols()
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim() < 2 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim must be >= 2, got {}",
                self.embed_dim()
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Unnormalized projection of a sparse feature vector.
fn project(x: &SparseVec, params: &EncoderParams) -> Array1<f64> {
    let mut u = Array1::zeros(params.embed_dim());
    for (&idx, &v) in x.indices.iter().zip(&x.values) {
        u.scaled_add(v, &params.projection.row(idx as usize));
    }
    u
}

/// Normalize in place; returns the pre-normalization norm. A zero vector
/// (empty text, or a degenerate projection) falls back to the first basis
/// vector and returns 0.0 to mark the fallback.
fn normalize(u: &mut Array1<f64>) -> f64 {
    let norm = u.dot(u).sqrt();
    if norm == 0.0 {
        log::warn!("zero embedding before normalization; using fixed basis vector");
        u.fill(0.0);
        u[0] = 1.0;
        return 0.0;
    }
    *u /= norm;
    norm
}

/// Encode a feature vector to a unit-norm embedding.
pub fn encode_features(x: &SparseVec, params: &EncoderParams) -> Array1<f64> {
    let mut u = project(x, params);
    normalize(&mut u);
    u
}

/// Encode text to a unit-norm embedding.
pub fn encode(text: &str, params: &EncoderParams, cfg: &FeatureConfig) -> Array1<f64> {
    encode_features(&featurize(text, cfg), params)
}

// ---------------------------------------------------------------------------
// InfoNCE loss over embeddings
// ---------------------------------------------------------------------------

/// A batch of already-encoded unit vectors.
#[derive(Debug, Clone)]
pub struct LossBatch {
    pub queries: Vec<Array1<f64>>,
    pub positives: Vec<Array1<f64>>,
    /// Explicit negatives per query; may be empty.
    pub negatives: Vec<Vec<Array1<f64>>>,
    /// When set, every other query's positive joins each query's negative
    /// set.
    pub in_batch_negatives: bool,
}

/// Softmax cross-entropy over one candidate set. `s_pos` and `s_others`
/// are similarity scores already divided by the temperature. Returns the
/// loss, the positive's probability, and the other candidates' probabilities
/// in input order. Stabilized by max-subtraction.
fn softmax_loss(s_pos: f64, s_others: &[f64]) -> (f64, f64, Vec<f64>) {
    let mut m = s_pos;
    for &s in s_others {
        if s > m {
            m = s;
        }
    }
    let e_pos = (s_pos - m).exp();
    let mut sum = e_pos;
    let mut e_others = Vec::with_capacity(s_others.len());
    for &s in s_others {
        let e = (s - m).exp();
        e_others.push(e);
        sum += e;
    }
    let lse = m + sum.ln();
    let loss = (lse - s_pos).max(0.0);
    let p_pos = e_pos / sum;
    for e in &mut e_others {
        *e /= sum;
    }
    (loss, p_pos, e_others)
}

/// Per-query InfoNCE loss and the batch mean, per the two-tower training
/// objective. Cosine similarity is the dot product of the unit vectors.
pub fn contrastive_loss(batch: &LossBatch, tau: f64) -> Result<(Vec<f64>, f64)> {
    if !(tau > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    let b = batch.queries.len();
    if batch.positives.len() != b || batch.negatives.len() != b {
        return Err(Error::InvalidInput(
            "queries, positives and negatives must have aligned lengths".into(),
        ));
    }
    let mut losses = Vec::with_capacity(b);
    for i in 0..b {
        let q = &batch.queries[i];
        let s_pos = q.dot(&batch.positives[i]) / tau;
        let mut s_others: Vec<f64> = batch.negatives[i].iter().map(|n| q.dot(n) / tau).collect();
        if batch.in_batch_negatives {
            for (j, p) in batch.positives.iter().enumerate() {
                if j != i {
                    s_others.push(q.dot(p) / tau);
                }
            }
        }
        let (loss, _, _) = softmax_loss(s_pos, &s_others);
        losses.push(loss);
    }
    let mean = if b == 0 {
        0.0
    } else {
        losses.iter().sum::<f64>() / b as f64
    };
    Ok((losses, mean))
}

// ---------------------------------------------------------------------------
// Training path: loss + gradient through featurized inputs
// ---------------------------------------------------------------------------

/// One featurized contrastive example.
#[derive(Debug, Clone)]
pub struct TrainExample {
    pub query: SparseVec,
    pub positive: SparseVec,
    pub negatives: Vec<SparseVec>,
}

/// A featurized batch. With `in_batch_negatives`, every other example's
/// positive joins each query's candidate set.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    pub examples: Vec<TrainExample>,
    pub in_batch_negatives: bool,
}

/// Cached forward state, sufficient to run the backward pass without
/// re-encoding.
pub struct ForwardPass {
    emb_q: Array2<f64>,
    emb_p: Array2<f64>,
    emb_n: Vec<Vec<Array1<f64>>>,
    norm_q: Vec<f64>,
    norm_p: Vec<f64>,
    norm_n: Vec<Vec<f64>>,
    /// probs[i][i] is the positive's softmax probability for query i;
    /// probs[i][j] (j != i) is the probability of example j's positive used
    /// as an in-batch negative (zero when in-batch is off).
    probs: Array2<f64>,
    probs_neg: Vec<Vec<f64>>,
    pub per_example_loss: Vec<f64>,
    tau: f64,
}

impl ForwardPass {
    pub fn mean_loss(&self) -> f64 {
        if self.per_example_loss.is_empty() {
            0.0
        } else {
            self.per_example_loss.iter().sum::<f64>() / self.per_example_loss.len() as f64
        }
    }
}

/// Encode all batch texts and compute per-example losses.
pub fn loss_forward(batch: &TrainBatch, params: &EncoderParams) -> Result<ForwardPass> {
    params.validate()?;
    let tau = params.temperature;
    let b = batch.examples.len();
    let d = params.embed_dim();

    let mut emb_q = Array2::zeros((b, d));
    let mut emb_p = Array2::zeros((b, d));
    let mut norm_q = Vec::with_capacity(b);
    let mut norm_p = Vec::with_capacity(b);
    let mut emb_n = Vec::with_capacity(b);
    let mut norm_n = Vec::with_capacity(b);
    for (i, ex) in batch.examples.iter().enumerate() {
        let mut u = project(&ex.query, params);
        norm_q.push(normalize(&mut u));
        emb_q.row_mut(i).assign(&u);
        let mut u = project(&ex.positive, params);
        norm_p.push(normalize(&mut u));
        emb_p.row_mut(i).assign(&u);
        let mut row_embs = Vec::with_capacity(ex.negatives.len());
        let mut row_norms = Vec::with_capacity(ex.negatives.len());
        for nx in &ex.negatives {
            let mut u = project(nx, params);
            row_norms.push(normalize(&mut u));
            row_embs.push(u);
        }
        emb_n.push(row_embs);
        norm_n.push(row_norms);
    }

    // Query-positive score matrix; only the diagonal is needed when
    // in-batch negatives are off, but the matmul covers both cases.
    let scores_qp = emb_q.dot(&emb_p.t()) / tau;

    let mut probs = Array2::zeros((b, b));
    let mut probs_neg = Vec::with_capacity(b);
    let mut per_example_loss = Vec::with_capacity(b);
    for i in 0..b {
        let s_pos = scores_qp[(i, i)];
        let mut s_others: Vec<f64> = emb_n[i]
            .iter()
            .map(|n| emb_q.row(i).dot(n) / tau)
            .collect();
        let n_explicit = s_others.len();
        if batch.in_batch_negatives {
            for j in 0..b {
                if j != i {
                    s_others.push(scores_qp[(i, j)]);
                }
            }
        }
        let (loss, p_pos, p_others) = softmax_loss(s_pos, &s_others);
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: 0,
                value: loss,
            });
        }
        per_example_loss.push(loss);
        probs[(i, i)] = p_pos;
        probs_neg.push(p_others[..n_explicit].to_vec());
        if batch.in_batch_negatives {
            let mut c = n_explicit;
            for j in 0..b {
                if j != i {
                    probs[(i, j)] = p_others[c];
                    c += 1;
                }
            }
        }
    }

    Ok(ForwardPass {
        emb_q,
        emb_p,
        emb_n,
        norm_q,
        norm_p,
        norm_n,
        probs,
        probs_neg,
        per_example_loss,
        tau,
    })
}

/// Backpropagate `sum_i weights[i] * loss_i / B` through the softmax, the
/// normalization and the projection. Instances are accumulated into the
/// gradient in a fixed order, so results are run-to-run deterministic.
pub fn loss_backward(
    batch: &TrainBatch,
    params: &EncoderParams,
    fwd: &ForwardPass,
    example_weights: &[f64],
) -> Array2<f64> {
    let b = batch.examples.len();
    assert_eq!(example_weights.len(), b, "one weight per example");
    let d = params.embed_dim();
    let mut grad = Array2::zeros((params.hash_dim(), d));
    if b == 0 {
        return grad;
    }
    let inv_btau = 1.0 / (b as f64 * fwd.tau);

    // d(objective)/d(score): softmax probabilities, minus one at the
    // positive, scaled per example.
    let mut g = fwd.probs.clone();
    for i in 0..b {
        g[(i, i)] -= 1.0;
        let scale = example_weights[i] * inv_btau;
        g.row_mut(i).mapv_inplace(|v| v * scale);
    }

    let mut d_emb_q = g.dot(&fwd.emb_p);
    let d_emb_p = g.t().dot(&fwd.emb_q);

    // Backprop through normalization, then scatter through the projection
    // rows selected by the sparse features.
    let mut scatter = |x: &SparseVec, de: ArrayView1<f64>, e: ArrayView1<f64>, norm: f64| {
        if norm == 0.0 {
            // Fallback embedding is a constant; no gradient flows.
            return;
        }
        let radial = de.dot(&e);
        let mut du = de.to_owned();
        du.scaled_add(-radial, &e);
        du /= norm;
        for (&idx, &v) in x.indices.iter().zip(&x.values) {
            grad.row_mut(idx as usize).scaled_add(v, &du);
        }
    };

    // Explicit negatives first (also accumulating their query-side pull),
    // then queries, then positives.
    for (i, ex) in batch.examples.iter().enumerate() {
        let scale = example_weights[i] * inv_btau;
        for (c, nx) in ex.negatives.iter().enumerate() {
            let gn = fwd.probs_neg[i][c] * scale;
            let de_n = fwd.emb_q.row(i).to_owned() * gn;
            {
                let en = &fwd.emb_n[i][c];
                let mut row = d_emb_q.row_mut(i);
                row.scaled_add(gn, &en.view());
            }
            scatter(nx, de_n.view(), fwd.emb_n[i][c].view(), fwd.norm_n[i][c]);
        }
    }
    for (i, ex) in batch.examples.iter().enumerate() {
        scatter(&ex.query, d_emb_q.row(i), fwd.emb_q.row(i), fwd.norm_q[i]);
    }
    for (i, ex) in batch.examples.iter().enumerate() {
        scatter(&ex.positive, d_emb_p.row(i), fwd.emb_p.row(i), fwd.norm_p[i]);
    }

    grad
}

/// Forward + backward in one call: per-example losses and the gradient of
/// the weighted mean loss with respect to the projection.
pub fn loss_gradient(
    batch: &TrainBatch,
    params: &EncoderParams,
    example_weights: &[f64],
) -> Result<(Vec<f64>, Array2<f64>)> {
    let fwd = loss_forward(batch, params)?;
    let grad = loss_backward(batch, params, &fwd, example_weights);
    Ok((fwd.per_example_loss.clone(), grad))
}

// ---------------------------------------------------------------------------
// Checkpoint io
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"ENCCKPT1";
const CKPT_VERSION: u32 = 1;

/// Write a checkpoint: header (magic, version, hash_dim, embed_dim,
/// temperature, tf_mode) followed by the projection as little-endian f64 in
/// row-major order. The write is atomic (temp file + rename).
pub fn save_checkpoint(path: &Path, params: &EncoderParams, cfg: &FeatureConfig) -> Result<()> {
    let tmp = path.with_extension("ckpt.tmp");
    {
        let file = std::fs::File::create(&tmp)?;
        let mut w = std::io::BufWriter::new(file);
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(&(params.hash_dim() as u64).to_le_bytes())?;
        w.write_all(&(params.embed_dim() as u64).to_le_bytes())?;
        w.write_all(&params.temperature.to_le_bytes())?;
        w.write_all(&[match cfg.tf_mode {
            TfMode::Raw => 0u8,
            TfMode::Log1p => 1u8,
        }])?;
        for row in params.projection.axis_iter(Axis(0)) {
            for &v in row {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(EncoderParams, FeatureConfig)> {
    let fail = |msg: &str| Error::Checkpoint {
        path: path.display().to_string(),
        msg: msg.to_string(),
    };
    let file = std::fs::File::open(path)?;
    let mut r = std::io::BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(fail("bad magic"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    if u32::from_le_bytes(b4) != CKPT_VERSION {
        return Err(fail("unsupported version"));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let hash_dim = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let embed_dim = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let temperature = f64::from_le_bytes(b8);
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b1)?;
    let tf_mode = match b1[0] {
        0 => TfMode::Raw,
        1 => TfMode::Log1p,
        _ => return Err(fail("unknown tf_mode byte")),
    };

    let mut data = Vec::with_capacity(hash_dim * embed_dim);
    for _ in 0..hash_dim * embed_dim {
        r.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(fail("trailing bytes after projection"));
    }
    let projection = Array2::from_shape_vec((hash_dim, embed_dim), data)
        .map_err(|e| fail(&format!("shape: {e}")))?;
    let params = EncoderParams {
        projection,
        temperature,
    };
    let cfg = FeatureConfig {
        hash_dim,
        tf_mode,
        lowercase: true,
    };
    Ok((params, cfg))
}
