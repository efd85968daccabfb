//! Training orchestration: step A trains the link-prediction embedding
//! model, step B trains the retriever with online group reweighting.
//! Also hosts the negative miners (Okapi BM25 and self-mined
//! nearest-neighbor negatives).
//!
//! Everything here is deterministic given the config seeds: batch order
//! comes from a seeded shuffle, gradients accumulate in a fixed order, and
//! checkpoints of two runs with equal seeds are bit-identical.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::clusterer::{embed_documents, GroupAssignment};
use crate::corpus::{ContrastivePair, Corpus, PairMode};
use crate::dro::{LossRecord, WeightState};
use crate::encoder::{
    featurize, loss_backward, loss_forward, EncoderParams, FeatureConfig, SparseVec, TrainBatch,
    TrainExample,
};
use crate::error::{Error, Result};
use crate::par::map_chunks;
use crate::text::fnv1a64;

/// Where explicit negatives come from during retriever training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeMode {
    /// No explicit negatives; in-batch only.
    InBatchOnly,
    /// Okapi BM25 lexical negatives in the first epoch, self-mined after.
    Bm25,
    /// Self-mined nearest-neighbor negatives from the start.
    SelfMined,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub model_lr: f64,
    pub negatives: NegativeMode,
    /// Explicit negatives per pair when mining.
    pub negatives_k: usize,
    /// Re-mine self-mined negatives every this many steps within an epoch;
    /// 0 means once at epoch start.
    pub negative_refresh_steps: usize,
    pub shuffle_seed: u64,
    pub dro_enabled: bool,
}

impl TrainConfig {
    /// Paper-default retriever settings.
    pub fn retriever_default() -> Self {
        Self {
            epochs: 2,
            batch_size: 768,
            model_lr: 3e-5,
            negatives: NegativeMode::Bm25,
            negatives_k: 4,
            negative_refresh_steps: 0,
            shuffle_seed: 0,
            dro_enabled: true,
        }
    }

    /// Paper-default embedding-model settings.
    pub fn embedder_default() -> Self {
        Self {
            epochs: 1,
            batch_size: 384,
            model_lr: 3e-5,
            negatives: NegativeMode::InBatchOnly,
            negatives_k: 0,
            negative_refresh_steps: 0,
            shuffle_seed: 0,
            dro_enabled: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "batch_size must be >= 2 when in-batch negatives are used".into(),
            ));
        }
        if !(self.model_lr >= 0.0 && self.model_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "model_lr must be finite and >= 0, got {}",
                self.model_lr
            )));
        }
        Ok(())
    }
}

/// One line of the training log; the jsonl artifact contains no wall-clock
/// fields so reruns are byte-identical.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TrainLogRecord {
    Step {
        step: usize,
        epoch: usize,
        mean_loss: f64,
        mean_weighted_loss: f64,
        weight_updated: bool,
    },
    Epoch {
        epoch: usize,
        steps: usize,
        mean_loss: f64,
    },
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub records: Vec<TrainLogRecord>,
}

impl TrainLog {
    pub fn steps(&self) -> impl Iterator<Item = &TrainLogRecord> {
        self.records
            .iter()
            .filter(|r| matches!(r, TrainLogRecord::Step { .. }))
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        for rec in &self.records {
            let line = serde_json::to_string(rec).expect("serialization cannot fail");
            w.write_all(line.as_bytes())?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

fn derive_seed(base: u64, tag: &str) -> u64 {
    base ^ fnv1a64(tag.as_bytes())
}

/// Featurized corpus and per-pair query features, computed once and reused
/// across epochs.
struct FeatureCache {
    doc_features: Vec<SparseVec>,
    query_features: Vec<SparseVec>,
}

impl FeatureCache {
    fn build(corpus: &Corpus, pairs: &[ContrastivePair], fcfg: &FeatureConfig) -> Self {
        let doc_features = corpus
            .docs()
            .iter()
            .map(|d| featurize(&d.text_repr(), fcfg))
            .collect();
        let query_features = pairs.iter().map(|p| featurize(&p.query_text, fcfg)).collect();
        Self {
            doc_features,
            query_features,
        }
    }

    fn example(
        &self,
        corpus: &Corpus,
        pairs: &[ContrastivePair],
        pair_idx: usize,
    ) -> Result<TrainExample> {
        let pair = &pairs[pair_idx];
        let pos = corpus.require(&pair.positive_doc_id)?;
        let negatives = pair
            .negative_doc_ids
            .iter()
            .map(|id| Ok(self.doc_features[corpus.require(id)?].clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainExample {
            query: self.query_features[pair_idx].clone(),
            positive: self.doc_features[pos].clone(),
            negatives,
        })
    }
}

/// Featurize whole pairs into one batch (in-batch negatives on). Used for
/// fixed evaluation batches, e.g. loss-landscape grids.
pub fn featurize_batch(
    pairs: &[ContrastivePair],
    corpus: &Corpus,
    fcfg: &FeatureConfig,
) -> Result<TrainBatch> {
    let cache = FeatureCache::build(corpus, pairs, fcfg);
    let examples = (0..pairs.len())
        .map(|i| cache.example(corpus, pairs, i))
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainBatch {
        examples,
        in_batch_negatives: true,
    })
}

fn shuffled_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        order.swap(i, j);
    }
    order
}

// ---------------------------------------------------------------------------
// Negative mining
// ---------------------------------------------------------------------------

/// Okapi BM25 parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Self { k1: 0.9, b: 0.4 }
    }
}

struct Bm25Index {
    /// term -> (document index, term frequency) postings, in doc order.
    postings: BTreeMap<String, Vec<(usize, f64)>>,
    doc_len: Vec<f64>,
    avg_len: f64,
    n_docs: usize,
}

impl Bm25Index {
    fn build(corpus: &Corpus, lowercase: bool) -> Self {
        let n_docs = corpus.len();
        let mut postings: BTreeMap<String, Vec<(usize, f64)>> = BTreeMap::new();
        let mut doc_len = Vec::with_capacity(n_docs);
        for (i, doc) in corpus.docs().iter().enumerate() {
            let tokens = crate::text::tokenize(&doc.text_repr(), lowercase);
            doc_len.push(tokens.len() as f64);
            let mut tf: BTreeMap<String, f64> = BTreeMap::new();
            for t in tokens {
                *tf.entry(t).or_insert(0.0) += 1.0;
            }
            for (t, f) in tf {
                postings.entry(t).or_default().push((i, f));
            }
        }
        let avg_len = if n_docs == 0 {
            0.0
        } else {
            doc_len.iter().sum::<f64>() / n_docs as f64
        };
        Self {
            postings,
            doc_len,
            avg_len,
            n_docs,
        }
    }

    /// Robertson IDF, clamped at zero so terms present in most documents
    /// cannot contribute negative scores.
    fn idf(&self, df: f64) -> f64 {
        let n = self.n_docs as f64;
        (((n - df + 0.5) / (df + 0.5)).ln()).max(0.0)
    }

    /// Scores for every document; unmatched documents stay at 0.
    fn score_all(&self, query: &str, params: &Bm25Params, lowercase: bool) -> Vec<f64> {
        let mut qtf: BTreeMap<String, f64> = BTreeMap::new();
        for t in crate::text::tokenize(query, lowercase) {
            *qtf.entry(t).or_insert(0.0) += 1.0;
        }
        let mut scores = vec![0.0; self.n_docs];
        for (term, q_count) in qtf {
            let Some(posting) = self.postings.get(&term) else {
                continue;
            };
            let idf = self.idf(posting.len() as f64);
            if idf == 0.0 {
                continue;
            }
            for &(doc, tf) in posting {
                let norm = params.k1 * (1.0 - params.b + params.b * self.doc_len[doc] / self.avg_len);
                scores[doc] += q_count * idf * tf * (params.k1 + 1.0) / (tf + norm);
            }
        }
        scores
    }
}

/// Top-k document indices by (score desc, doc_id asc), skipping `exclude`.
fn top_k_excluding(
    scores: &[f64],
    corpus: &Corpus,
    k: usize,
    exclude: usize,
) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).filter(|&i| i != exclude).collect();
    let key = |i: usize| (std::cmp::Reverse(ordered(scores[i])), &corpus.docs()[i].doc_id);
    let take = k.min(idx.len());
    if take < idx.len() {
        idx.select_nth_unstable_by(take, |&a, &b| key(a).cmp(&key(b)));
        idx.truncate(take);
    }
    idx.sort_by(|&a, &b| key(a).cmp(&key(b)));
    idx
}

/// Total order on finite scores.
fn ordered(v: f64) -> ordered_float_bits::OrderedF64 {
    ordered_float_bits::OrderedF64(v)
}

mod ordered_float_bits {
    /// Finite f64 with a total order; scores here are never NaN.
    #[derive(PartialEq, PartialOrd)]
    pub struct OrderedF64(pub f64);
    impl Eq for OrderedF64 {}
    #[allow(clippy::derive_ord_xor_partial_ord)]
    impl Ord for OrderedF64 {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.partial_cmp(other).expect("scores are finite")
        }
    }
}

/// Replace each pair's negatives with its top-k BM25-scored documents
/// (positive excluded). Fewer than k candidates yield fewer negatives.
pub fn mine_bm25_negatives(
    pairs: &[ContrastivePair],
    corpus: &Corpus,
    k: usize,
    params: &Bm25Params,
    threads: usize,
) -> Result<Vec<ContrastivePair>> {
    let index = Bm25Index::build(corpus, true);
    let positives: Vec<usize> = pairs
        .iter()
        .map(|p| corpus.require(&p.positive_doc_id))
        .collect::<Result<Vec<_>>>()?;
    let mined = map_chunks(pairs.len(), threads, |range| {
        range
            .map(|i| {
                let scores = index.score_all(&pairs[i].query_text, params, true);
                top_k_excluding(&scores, corpus, k, positives[i])
            })
            .collect::<Vec<_>>()
    });
    Ok(apply_mined(pairs, corpus, mined))
}

/// Replace each pair's negatives with the k nearest documents under the
/// current encoder (positive excluded).
pub fn mine_self_negatives(
    pairs: &[ContrastivePair],
    corpus: &Corpus,
    params: &EncoderParams,
    fcfg: &FeatureConfig,
    k: usize,
    threads: usize,
) -> Result<Vec<ContrastivePair>> {
    let doc_matrix = embed_documents(corpus, params, fcfg, threads);
    let positives: Vec<usize> = pairs
        .iter()
        .map(|p| corpus.require(&p.positive_doc_id))
        .collect::<Result<Vec<_>>>()?;
    let mined = map_chunks(pairs.len(), threads, |range| {
        range
            .map(|i| {
                let q = crate::encoder::encode(&pairs[i].query_text, params, fcfg);
                let scores: Vec<f64> = doc_matrix.dot(&q).to_vec();
                top_k_excluding(&scores, corpus, k, positives[i])
            })
            .collect::<Vec<_>>()
    });
    Ok(apply_mined(pairs, corpus, mined))
}

fn apply_mined(
    pairs: &[ContrastivePair],
    corpus: &Corpus,
    mined: Vec<Vec<Vec<usize>>>,
) -> Vec<ContrastivePair> {
    let mut out = Vec::with_capacity(pairs.len());
    let mut it = mined.into_iter().flatten();
    for pair in pairs {
        let negs = it.next().expect("one mined list per pair");
        let mut p = pair.clone();
        p.negative_doc_ids = negs
            .into_iter()
            .map(|i| corpus.docs()[i].doc_id.clone())
            .collect();
        out.push(p);
    }
    out
}

// ---------------------------------------------------------------------------
// Step A: embedding-model training
// ---------------------------------------------------------------------------

/// Train the link-prediction embedding model by gradient descent on the
/// mean contrastive loss with in-batch plus the pairs' explicit negatives.
pub fn train_embedder(
    pairs: &[ContrastivePair],
    corpus: &Corpus,
    cfg: &TrainConfig,
    fcfg: &FeatureConfig,
    embed_dim: usize,
    temperature: f64,
) -> Result<(EncoderParams, TrainLog)> {
    cfg.validate()?;
    fcfg.validate()?;
    if let Some(p) = pairs.iter().find(|p| p.mode != PairMode::LinkPrediction) {
        return Err(Error::InvalidInput(format!(
            "embedding-model training expects link-prediction pairs; {} has mode {:?}",
            p.pair_id, p.mode
        )));
    }
    let mut params = EncoderParams::random(
        fcfg.hash_dim,
        embed_dim,
        temperature,
        derive_seed(cfg.shuffle_seed, "embedder-init"),
    );
    let cache = FeatureCache::build(corpus, pairs, fcfg);
    let mut log = TrainLog::default();
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let order = shuffled_order(pairs.len(), cfg.shuffle_seed, epoch);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        for batch_ids in order.chunks(cfg.batch_size) {
            let examples = batch_ids
                .iter()
                .map(|&i| cache.example(corpus, pairs, i))
                .collect::<Result<Vec<_>>>()?;
            let batch = TrainBatch {
                examples,
                in_batch_negatives: true,
            };
            let fwd = loss_forward(&batch, &params)?;
            global_step += 1;
            let mean = fwd.mean_loss();
            if !mean.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: global_step,
                    value: mean,
                });
            }
            let weights = vec![1.0; batch.examples.len()];
            let grad = loss_backward(&batch, &params, &fwd, &weights);
            params.projection.scaled_add(-cfg.model_lr, &grad);
            epoch_loss += mean;
            epoch_steps += 1;
            log.records.push(TrainLogRecord::Step {
                step: global_step,
                epoch,
                mean_loss: mean,
                mean_weighted_loss: mean,
                weight_updated: false,
            });
        }
        let mean = if epoch_steps == 0 {
            0.0
        } else {
            epoch_loss / epoch_steps as f64
        };
        log.records.push(TrainLogRecord::Epoch {
            epoch,
            steps: epoch_steps,
            mean_loss: mean,
        });
        log::info!(
            "embedder epoch {epoch}: {epoch_steps} steps, mean loss {mean:.4}, {:.1}s",
            started.elapsed().as_secs_f64()
        );
    }
    Ok((params, log))
}

// ---------------------------------------------------------------------------
// Step B: retriever training with group reweighting
// ---------------------------------------------------------------------------

/// Train the retriever. Per step: per-example contrastive losses are
/// recorded into the weight state; at interval boundaries the group weights
/// update (before the reweighted loss is formed); the model then descends
/// the mean of `l_dr(p) * multiplier(group(p))`. Epochs after the first
/// reinitialize the group weights and switch to self-mined negatives.
///
/// With `dro_enabled` off (or `state` None, the degenerate all-residual
/// case) every multiplier is 1 and training is the plain unweighted
/// baseline.
#[allow(clippy::too_many_arguments)]
pub fn train_retriever(
    pairs: &[ContrastivePair],
    corpus: &Corpus,
    assignment: &GroupAssignment,
    cfg: &TrainConfig,
    fcfg: &FeatureConfig,
    embed_dim: usize,
    temperature: f64,
    mut state: Option<WeightState>,
    threads: usize,
) -> Result<(EncoderParams, TrainLog, Option<WeightState>)> {
    cfg.validate()?;
    fcfg.validate()?;
    // Assignment must cover every pair before anything trains.
    let groups: Vec<Option<usize>> = pairs
        .iter()
        .map(|p| {
            assignment.weighted_group_of(&p.pair_id).ok_or_else(|| {
                Error::InvalidInput(format!(
                    "pair {} missing from the group assignment",
                    p.pair_id
                ))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if cfg.dro_enabled && state.is_none() {
        log::warn!(
            "group weighting requested but no weight state exists (all groups merged?); \
             training degenerates to the unweighted baseline"
        );
    }

    let mut params = EncoderParams::random(
        fcfg.hash_dim,
        embed_dim,
        temperature,
        derive_seed(cfg.shuffle_seed, "retriever-init"),
    );
    let mut log = TrainLog::default();
    let mut global_step = 0usize;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        if epoch > 0 {
            if let Some(s) = state.as_mut() {
                s.reinit();
                log::info!("epoch {epoch}: group weights reinitialized");
            }
        }
        let mut active = match (cfg.negatives, epoch) {
            (NegativeMode::InBatchOnly, _) => strip_negatives(pairs),
            (NegativeMode::Bm25, 0) => {
                mine_bm25_negatives(pairs, corpus, cfg.negatives_k, &Bm25Params::default(), threads)?
            }
            _ => mine_self_negatives(pairs, corpus, &params, fcfg, cfg.negatives_k, threads)?,
        };
        let mut cache = FeatureCache::build(corpus, &active, fcfg);

        let order = shuffled_order(active.len(), cfg.shuffle_seed, epoch);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0usize;
        for batch_ids in order.chunks(cfg.batch_size) {
            // Optional mid-epoch refresh of self-mined negatives.
            let self_mined_now =
                cfg.negatives == NegativeMode::SelfMined || (cfg.negatives == NegativeMode::Bm25 && epoch > 0);
            if self_mined_now
                && cfg.negative_refresh_steps > 0
                && epoch_steps > 0
                && epoch_steps.is_multiple_of(cfg.negative_refresh_steps)
            {
                active = mine_self_negatives(
                    pairs,
                    corpus,
                    &params,
                    fcfg,
                    cfg.negatives_k,
                    threads,
                )?;
                cache = FeatureCache::build(corpus, &active, fcfg);
            }

            let examples = batch_ids
                .iter()
                .map(|&i| cache.example(corpus, &active, i))
                .collect::<Result<Vec<_>>>()?;
            let batch = TrainBatch {
                examples,
                in_batch_negatives: true,
            };
            let fwd = loss_forward(&batch, &params)?;
            global_step += 1;
            let mean = fwd.mean_loss();
            if !mean.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step: global_step,
                    value: mean,
                });
            }

            let mut weight_updated = false;
            if cfg.dro_enabled {
                if let Some(s) = state.as_mut() {
                    let report: Vec<LossRecord> = batch_ids
                        .iter()
                        .zip(&fwd.per_example_loss)
                        .map(|(&i, &loss)| LossRecord {
                            pair_id: active[i].pair_id.clone(),
                            group: groups[i],
                            loss,
                        })
                        .collect();
                    s.record_losses(&report)?;
                    // Weights are updated before the reweighted loss below.
                    if s.should_update() {
                        s.update_weights()?;
                        weight_updated = true;
                    }
                }
            }

            let multipliers: Vec<f64> = if cfg.dro_enabled {
                match state.as_ref() {
                    Some(s) => batch_ids
                        .iter()
                        .map(|&i| s.weighted_multiplier(groups[i]))
                        .collect::<Result<Vec<_>>>()?,
                    None => vec![1.0; batch_ids.len()],
                }
            } else {
                vec![1.0; batch_ids.len()]
            };

            let mean_weighted = fwd
                .per_example_loss
                .iter()
                .zip(&multipliers)
                .map(|(l, m)| l * m)
                .sum::<f64>()
                / batch_ids.len() as f64;
            #[cfg(debug_assertions)]
            {
                // Independent recomputation of the reweighted batch loss.
                let check = fwd
                    .per_example_loss
                    .iter()
                    .zip(&multipliers)
                    .rev()
                    .fold(0.0f64, |acc, (l, m)| acc + l * m)
                    / batch_ids.len() as f64;
                debug_assert!(
                    (check - mean_weighted).abs() <= 1e-9 * mean_weighted.abs().max(1.0),
                    "reweighted loss mismatch: {check} vs {mean_weighted}"
                );
            }

            let grad = loss_backward(&batch, &params, &fwd, &multipliers);
            params.projection.scaled_add(-cfg.model_lr, &grad);
            epoch_loss += mean;
            epoch_steps += 1;
            log.records.push(TrainLogRecord::Step {
                step: global_step,
                epoch,
                mean_loss: mean,
                mean_weighted_loss: mean_weighted,
                weight_updated,
            });
        }
        let mean = if epoch_steps == 0 {
            0.0
        } else {
            epoch_loss / epoch_steps as f64
        };
        log.records.push(TrainLogRecord::Epoch {
            epoch,
            steps: epoch_steps,
            mean_loss: mean,
        });
        log::info!(
            "retriever epoch {epoch}: {epoch_steps} steps, mean loss {mean:.4}, {:.1}s",
            started.elapsed().as_secs_f64()
        );
    }

    Ok((params, log, state))
}

fn strip_negatives(pairs: &[ContrastivePair]) -> Vec<ContrastivePair> {
    pairs
        .iter()
        .map(|p| {
            let mut p = p.clone();
            p.negative_doc_ids.clear();
            p
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{
        filter_anchors, generate_synthetic, make_anchor_pairs, make_link_pairs,
        AnchorFilterConfig, Document, SyntheticSpec,
    };
    use crate::encoder::TfMode;

    fn doc(id: &str, content: &str) -> Document {
        Document {
            doc_id: id.into(),
            url: format!("https://{id}.example.net/"),
            title: String::new(),
            content: content.into(),
        }
    }

    fn fcfg() -> FeatureConfig {
        FeatureConfig {
            hash_dim: 1024,
            tf_mode: TfMode::Log1p,
            lowercase: true,
        }
    }

    fn pair(id: &str, query: &str, positive: &str) -> ContrastivePair {
        ContrastivePair {
            pair_id: id.into(),
            query_text: query.into(),
            positive_doc_id: positive.into(),
            negative_doc_ids: vec![],
            mode: PairMode::AnchorRetrieval,
        }
    }

    #[test]
    fn bm25_ranks_exact_content_match_first_and_excludes_positive() {
        let corpus = Corpus::new(vec![
            doc("d0", "alpha alpha bravo"),
            doc("d1", "charlie delta echo unique tokens here"),
            doc("d2", "foxtrot golf hotel"),
            doc("d3", "november oscar papa"),
        ])
        .unwrap();
        // Query repeats d1's content verbatim; d1 tops the ranking when it
        // is not the positive.
        let pairs = vec![pair("p0", "charlie delta echo unique tokens here", "d0")];
        let mined = mine_bm25_negatives(&pairs, &corpus, 2, &Bm25Params::default(), 1).unwrap();
        assert_eq!(mined[0].negative_doc_ids[0], "d1");

        // As the positive, d1 is excluded entirely.
        let pairs = vec![pair("p0", "charlie delta echo unique tokens here", "d1")];
        let mined = mine_bm25_negatives(&pairs, &corpus, 3, &Bm25Params::default(), 1).unwrap();
        assert!(!mined[0].negative_doc_ids.contains(&"d1".to_string()));
        assert_eq!(mined[0].negative_doc_ids.len(), 3);
    }

    #[test]
    fn bm25_score_matches_hand_derived_okapi_value() {
        // Three documents, query "cherry" (df = 1, only d1, tf = 1).
        // Token counts come from text_repr = url + title + content; urls
        // and titles are empty here, so lengths are 3, 2, 3 (avg 8/3).
        //   idf   = ln((3 - 1 + 0.5) / (1 + 0.5)) = ln(5/3)
        //   norm  = 0.9 * (1 - 0.4 + 0.4 * (2 / (8/3))) = 0.81
        //   score = idf * tf * (k1 + 1) / (tf + norm) = idf * 1.9 / 1.81
        let mk = |id: &str, content: &str| Document {
            doc_id: id.into(),
            url: String::new(),
            title: String::new(),
            content: content.into(),
        };
        let corpus = Corpus::new(vec![
            mk("d0", "apple banana apple"),
            mk("d1", "apple cherry"),
            mk("d2", "durian elderberry fig"),
        ])
        .unwrap();
        let index = Bm25Index::build(&corpus, true);
        let scores = index.score_all("cherry", &Bm25Params::default(), true);
        let expected = (5.0f64 / 3.0).ln() * 1.9 / 1.81;
        assert!((scores[1] - expected).abs() < 1e-12, "{} vs {expected}", scores[1]);
        assert_eq!(scores[0], 0.0);
        assert_eq!(scores[2], 0.0);
    }

    #[test]
    fn bm25_zero_overlap_breaks_ties_by_doc_id() {
        let corpus = Corpus::new(vec![
            doc("zz", "one two"),
            doc("aa", "three four"),
            doc("mm", "five six"),
        ])
        .unwrap();
        let pairs = vec![pair("p0", "nomatchanywhere", "mm")];
        let mined = mine_bm25_negatives(&pairs, &corpus, 2, &Bm25Params::default(), 1).unwrap();
        // All scores are zero; ascending doc_id order decides, positive
        // excluded.
        assert_eq!(mined[0].negative_doc_ids, vec!["aa", "zz"]);
    }

    #[test]
    fn bm25_term_in_every_document_contributes_nothing() {
        // Robertson IDF of a term with df = N is ln(0.5/(N+0.5)) < 0,
        // clamped to 0 here.
        let corpus = Corpus::new(vec![
            doc("a", "common alpha"),
            doc("b", "common bravo"),
            doc("c", "common charlie"),
        ])
        .unwrap();
        let index = Bm25Index::build(&corpus, true);
        assert_eq!(index.idf(3.0), 0.0);
        let scores = index.score_all("common", &Bm25Params::default(), true);
        assert!(scores.iter().all(|&s| s == 0.0));
        // Hand-check the clamp input is negative.
        assert!(((3.0 - 3.0 + 0.5) / (3.0 + 0.5f64)).ln() < 0.0);
    }

    #[test]
    fn self_mining_excludes_positive_and_finds_duplicates() {
        let corpus = Corpus::new(vec![
            doc("orig", "gallop herd mare stallion"),
            doc("dupe", "gallop herd mare stallion"),
            doc("far", "quantum chromodynamics lattice"),
        ])
        .unwrap();
        let params = EncoderParams::random(1024, 8, 0.05, 3);
        // Query identical to the positive's content: the duplicate document
        // becomes the top negative (the documented hard-negative hazard).
        let pairs = vec![pair("p0", "gallop herd mare stallion", "orig")];
        let mined = mine_self_negatives(&pairs, &corpus, &params, &fcfg(), 1, 1).unwrap();
        assert_eq!(mined[0].negative_doc_ids, vec!["dupe"]);
    }

    #[test]
    fn self_mining_changes_after_training_moves_params() {
        let spec = SyntheticSpec {
            num_topics: 2,
            docs_per_topic: vec![25, 25],
            intra_topic_link_prob: 0.15,
            cross_topic_link_prob: 0.01,
            hard_topic_ids: Default::default(),
            vocab_size: 400,
            seed: 5,
        };
        let synth = generate_synthetic(&spec).unwrap();
        let corpus = Corpus::new(synth.docs).unwrap();
        let pairs = make_anchor_pairs(&corpus, &synth.edges, 0, 1).unwrap();
        let a = EncoderParams::random(1024, 8, 0.05, 1);
        let b = EncoderParams::random(1024, 8, 0.05, 2);
        let mined_a = mine_self_negatives(&pairs, &corpus, &a, &fcfg(), 2, 1).unwrap();
        let mined_b = mine_self_negatives(&pairs, &corpus, &b, &fcfg(), 2, 1).unwrap();
        let lists_a: Vec<_> = mined_a.iter().map(|p| p.negative_doc_ids.clone()).collect();
        let lists_b: Vec<_> = mined_b.iter().map(|p| p.negative_doc_ids.clone()).collect();
        assert_ne!(lists_a, lists_b, "different encoders should mine differently");
    }

    fn two_topic_corpus(seed: u64) -> (Corpus, Vec<crate::corpus::AnchorEdge>, Vec<usize>) {
        let spec = SyntheticSpec {
            num_topics: 2,
            docs_per_topic: vec![40, 40],
            intra_topic_link_prob: 0.12,
            cross_topic_link_prob: 0.005,
            hard_topic_ids: Default::default(),
            vocab_size: 600,
            seed,
        };
        let synth = generate_synthetic(&spec).unwrap();
        let corpus = Corpus::new(synth.docs).unwrap();
        let kept = filter_anchors(&corpus, &synth.edges, &AnchorFilterConfig::default());
        (corpus, kept, synth.topic_of_doc)
    }

    #[test]
    fn embedder_training_separates_topics() {
        let (corpus, edges, topics) = two_topic_corpus(9);
        let pairs = make_link_pairs(&corpus, &edges, 2, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            model_lr: 0.5,
            shuffle_seed: 4,
            ..TrainConfig::embedder_default()
        };
        let (params, _) = train_embedder(&pairs, &corpus, &cfg, &fcfg(), 16, 0.05).unwrap();
        let emb = embed_documents(&corpus, &params, &fcfg(), 1);
        let mut intra = (0.0, 0usize);
        let mut cross = (0.0, 0usize);
        for i in 0..corpus.len() {
            for j in (i + 1)..corpus.len() {
                let sim = emb.row(i).dot(&emb.row(j));
                if topics[i] == topics[j] {
                    intra = (intra.0 + sim, intra.1 + 1);
                } else {
                    cross = (cross.0 + sim, cross.1 + 1);
                }
            }
        }
        let intra_mean = intra.0 / intra.1 as f64;
        let cross_mean = cross.0 / cross.1 as f64;
        assert!(
            intra_mean > cross_mean,
            "intra {intra_mean} should exceed cross {cross_mean}"
        );
    }

    #[test]
    fn zero_epochs_returns_initial_params() {
        let (corpus, edges, _) = two_topic_corpus(2);
        let pairs = make_link_pairs(&corpus, &edges, 0, 3).unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            shuffle_seed: 11,
            ..TrainConfig::embedder_default()
        };
        let (params, log) = train_embedder(&pairs, &corpus, &cfg, &fcfg(), 8, 0.05).unwrap();
        let init = EncoderParams::random(1024, 8, 0.05, derive_seed(11, "embedder-init"));
        for (a, b) in params.projection.iter().zip(init.projection.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(log.records.is_empty());
    }

    #[test]
    fn training_loss_drops_on_fixed_validation_batch() {
        let (corpus, edges, _) = two_topic_corpus(6);
        let pairs = make_link_pairs(&corpus, &edges, 2, 3).unwrap();
        let (val, train): (Vec<_>, Vec<_>) = pairs
            .iter()
            .cloned()
            .enumerate()
            .partition(|(i, _)| i % 7 == 0);
        let train: Vec<_> = train.into_iter().map(|(_, p)| p).collect();
        let val: Vec<_> = val.into_iter().map(|(_, p)| p).collect();

        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            model_lr: 0.5,
            shuffle_seed: 13,
            ..TrainConfig::embedder_default()
        };
        let val_loss = |params: &EncoderParams| -> f64 {
            let cache = FeatureCache::build(&corpus, &val, &fcfg());
            let examples = (0..val.len())
                .map(|i| cache.example(&corpus, &val, i).unwrap())
                .collect();
            let batch = TrainBatch {
                examples,
                in_batch_negatives: true,
            };
            loss_forward(&batch, params).unwrap().mean_loss()
        };
        let init = EncoderParams::random(1024, 16, 0.05, derive_seed(13, "embedder-init"));
        let before = val_loss(&init);
        let (trained, _) = train_embedder(&train, &corpus, &cfg, &fcfg(), 16, 0.05).unwrap();
        let after = val_loss(&trained);
        assert!(after < before, "validation loss {before} -> {after}");
    }

    use crate::clusterer::{merge_small_groups, ClusterMethod};
    use crate::dro::init_weights;

    fn uniform_assignment(pairs: &[ContrastivePair], n_groups: usize, corpus: &Corpus) -> GroupAssignment {
        // Round-robin pair grouping with a fake doc_to_cluster map: build
        // directly instead of via merge to control sizes exactly.
        let mut pair_to_group = std::collections::BTreeMap::new();
        let mut group_sizes = vec![0usize; n_groups];
        for (i, p) in pairs.iter().enumerate() {
            let g = i % n_groups;
            pair_to_group.insert(p.pair_id.clone(), g);
            group_sizes[g] += 1;
        }
        let mut doc_to_group = std::collections::BTreeMap::new();
        for p in pairs {
            doc_to_group.insert(p.positive_doc_id.clone(), pair_to_group[&p.pair_id]);
        }
        let _ = corpus;
        GroupAssignment {
            pair_to_group,
            group_sizes,
            residual_group: None,
            method: ClusterMethod::External,
            doc_to_group,
        }
    }

    #[test]
    fn dro_off_equals_zero_lr_uniform_dro_bitwise() {
        let (corpus, edges, _) = two_topic_corpus(4);
        let pairs_all = make_anchor_pairs(&corpus, &edges, 2, 5).unwrap();
        // Trim to a multiple of 4 so round-robin groups are exactly uniform.
        let n = pairs_all.len() - (pairs_all.len() % 4);
        let pairs = &pairs_all[..n];
        let assignment = uniform_assignment(pairs, 4, &corpus);

        let base = TrainConfig {
            epochs: 1,
            batch_size: 8,
            model_lr: 0.3,
            negatives: NegativeMode::Bm25,
            negatives_k: 2,
            negative_refresh_steps: 0,
            shuffle_seed: 21,
            dro_enabled: false,
        };
        let (p_off, _, _) = train_retriever(
            pairs, &corpus, &assignment, &base, &fcfg(), 8, 0.05, None, 1,
        )
        .unwrap();

        let on = TrainConfig {
            dro_enabled: true,
            ..base
        };
        let state = init_weights(&assignment.weighted_group_sizes(), 0.0, 5).unwrap();
        let (p_on, _, final_state) = train_retriever(
            pairs,
            &corpus,
            &assignment,
            &on,
            &fcfg(),
            8,
            0.05,
            Some(state),
            1,
        )
        .unwrap();

        for (a, b) in p_off.projection.iter().zip(p_on.projection.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        // Weights never moved.
        let s = final_state.unwrap();
        assert!(s.weights.iter().all(|&w| w == 0.25));
    }

    #[test]
    fn one_step_changes_params_iff_lr_positive() {
        let (corpus, edges, _) = two_topic_corpus(8);
        let pairs = make_anchor_pairs(&corpus, &edges, 1, 5).unwrap();
        let pairs = &pairs[..8.min(pairs.len())];
        let assignment = uniform_assignment(pairs, 2, &corpus);
        for (lr, expect_change) in [(0.0, false), (0.2, true)] {
            let cfg = TrainConfig {
                epochs: 1,
                batch_size: 8,
                model_lr: lr,
                negatives: NegativeMode::InBatchOnly,
                negatives_k: 0,
                negative_refresh_steps: 0,
                shuffle_seed: 3,
                dro_enabled: false,
            };
            let (trained, _, _) = train_retriever(
                pairs, &corpus, &assignment, &cfg, &fcfg(), 8, 0.05, None, 1,
            )
            .unwrap();
            let init = EncoderParams::random(1024, 8, 0.05, derive_seed(3, "retriever-init"));
            let changed = trained
                .projection
                .iter()
                .zip(init.projection.iter())
                .any(|(a, b)| a.to_bits() != b.to_bits());
            assert_eq!(changed, expect_change, "lr={lr}");
        }
    }

    #[test]
    fn weight_updates_land_exactly_on_interval_boundaries() {
        let (corpus, edges, topics) = two_topic_corpus(3);
        let pairs = make_anchor_pairs(&corpus, &edges, 1, 5).unwrap();
        let _ = topics;
        let assignment = {
            let params = EncoderParams::random(1024, 8, 0.05, 40);
            let emb = embed_documents(&corpus, &params, &fcfg(), 1);
            let kcfg = crate::clusterer::KMeansConfig {
                k: 4,
                min_size: 2,
                batch_size: 32,
                max_iters: 30,
                seed: 7,
                init: crate::clusterer::KMeansInit::KmeansPlusPlus,
            };
            let fit = crate::clusterer::minibatch_kmeans(&emb, &kcfg).unwrap();
            merge_small_groups(&corpus, &fit.doc_to_cluster, &pairs, 2, ClusterMethod::EmbeddingKmeans)
                .unwrap()
        };
        let interval = 3usize;
        let state = init_weights(&assignment.weighted_group_sizes(), 0.1, interval).unwrap();
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 16,
            model_lr: 0.1,
            negatives: NegativeMode::InBatchOnly,
            negatives_k: 0,
            negative_refresh_steps: 0,
            shuffle_seed: 2,
            dro_enabled: true,
        };
        let (_, log, _) = train_retriever(
            &pairs,
            &corpus,
            &assignment,
            &cfg,
            &fcfg(),
            8,
            0.05,
            Some(state),
            1,
        )
        .unwrap();
        for rec in log.steps() {
            if let TrainLogRecord::Step {
                step,
                weight_updated,
                ..
            } = rec
            {
                assert_eq!(
                    *weight_updated,
                    step % interval == 0,
                    "update flag wrong at step {step}"
                );
            }
        }
    }

    #[test]
    fn equal_seeds_give_bit_identical_checkpoints() {
        let (corpus, edges, _) = two_topic_corpus(12);
        let pairs = make_anchor_pairs(&corpus, &edges, 2, 5).unwrap();
        let assignment = uniform_assignment(&pairs, 3, &corpus);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 12,
            model_lr: 0.2,
            negatives: NegativeMode::Bm25,
            negatives_k: 2,
            negative_refresh_steps: 0,
            shuffle_seed: 31,
            dro_enabled: true,
        };
        let run = || {
            let state = init_weights(&assignment.weighted_group_sizes(), 0.05, 4).unwrap();
            train_retriever(
                &pairs,
                &corpus,
                &assignment,
                &cfg,
                &fcfg(),
                8,
                0.05,
                Some(state),
                2,
            )
            .unwrap()
        };
        let (a, _, sa) = run();
        let (b, _, sb) = run();
        for (x, y) in a.projection.iter().zip(b.projection.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(sa.unwrap().weights, sb.unwrap().weights);
    }

    #[test]
    fn trained_encoder_beats_untrained_on_held_out_queries() {
        use crate::evalkit::{evaluate, EvalQuery, EvalSet};
        let mut wins = 0;
        for seed in [1u64, 2, 3, 4, 5] {
            let spec = SyntheticSpec {
                num_topics: 3,
                docs_per_topic: vec![40; 3],
                intra_topic_link_prob: 0.1,
                cross_topic_link_prob: 0.005,
                hard_topic_ids: Default::default(),
                vocab_size: 800,
                seed,
            };
            let synth = generate_synthetic(&spec).unwrap();
            let corpus = Corpus::new(synth.docs).unwrap();
            let (train_edges, eval_edges) = crate::corpus::split_edges(&synth.edges, 0.2, seed);
            let kept = filter_anchors(&corpus, &train_edges, &AnchorFilterConfig::default());
            let eval_kept = filter_anchors(&corpus, &eval_edges, &AnchorFilterConfig::default());
            let pairs = make_anchor_pairs(&corpus, &kept, 1, seed).unwrap();

            let mut queries = Vec::new();
            let mut qrels = std::collections::BTreeMap::new();
            for (i, e) in eval_kept.iter().enumerate() {
                let qid = format!("q{i}");
                queries.push(EvalQuery {
                    query_id: qid.clone(),
                    text: e.anchor_text.clone(),
                });
                qrels.insert(qid, [(e.target_doc_id.clone(), 1u32)].into_iter().collect());
            }
            let eval_set = EvalSet { queries, qrels };

            let assignment = uniform_assignment(&pairs, 2, &corpus);
            let cfg = TrainConfig {
                epochs: 2,
                batch_size: 32,
                model_lr: 20.0,
                negatives: NegativeMode::Bm25,
                negatives_k: 1,
                negative_refresh_steps: 0,
                shuffle_seed: seed,
                dro_enabled: false,
            };
            let (trained, _, _) = train_retriever(
                &pairs, &corpus, &assignment, &cfg, &fcfg(), 16, 0.05, None, 1,
            )
            .unwrap();
            let untrained =
                EncoderParams::random(1024, 16, 0.05, derive_seed(seed, "retriever-init"));
            let t = evaluate(&trained, &fcfg(), &corpus, &eval_set, None, 1).unwrap();
            let u = evaluate(&untrained, &fcfg(), &corpus, &eval_set, None, 1).unwrap();
            if t.mean_ndcg10 > u.mean_ndcg10 {
                wins += 1;
            }
        }
        assert_eq!(wins, 5, "training failed to beat the random projection");
    }

    #[test]
    fn mismatched_assignment_fails_before_training() {
        let (corpus, edges, _) = two_topic_corpus(15);
        let pairs = make_anchor_pairs(&corpus, &edges, 1, 5).unwrap();
        let assignment = uniform_assignment(&pairs[..pairs.len() - 1], 2, &corpus);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            model_lr: 0.1,
            negatives: NegativeMode::InBatchOnly,
            negatives_k: 0,
            negative_refresh_steps: 0,
            shuffle_seed: 1,
            dro_enabled: true,
        };
        let state = init_weights(&assignment.weighted_group_sizes(), 0.1, 5).unwrap();
        assert!(matches!(
            train_retriever(
                &pairs,
                &corpus,
                &assignment,
                &cfg,
                &fcfg(),
                8,
                0.05,
                Some(state),
                1
            ),
            Err(Error::InvalidInput(_))
        ));
    }
}
