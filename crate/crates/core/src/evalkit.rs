//! Exhaustive dense retrieval and nDCG@10 evaluation, with optional
//! per-group slicing of the mean.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::clusterer::embed_documents;
use crate::corpus::Corpus;
use crate::encoder::{encode, EncoderParams, FeatureConfig};
use crate::error::{Error, Result};
use crate::par::map_chunks;

/// Ranking depth for the headline metric.
pub const NDCG_DEPTH: usize = 10;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalQuery {
    pub query_id: String,
    pub text: String,
}

/// Queries plus graded relevance judgments.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub queries: Vec<EvalQuery>,
    /// query_id -> doc_id -> graded relevance (>= 1 for relevant).
    pub qrels: BTreeMap<String, BTreeMap<String, u32>>,
}

impl EvalSet {
    /// Check the invariants: every judged document exists in the corpus and
    /// every query has at least one positive judgment.
    pub fn validate(&self, corpus: &Corpus) -> Result<()> {
        for q in &self.queries {
            let Some(rels) = self.qrels.get(&q.query_id) else {
                return Err(Error::InvalidInput(format!(
                    "query {} has no relevance judgments",
                    q.query_id
                )));
            };
            if rels.values().all(|&r| r == 0) {
                return Err(Error::InvalidInput(format!(
                    "query {} has no positive judgment",
                    q.query_id
                )));
            }
            for doc_id in rels.keys() {
                corpus.require(doc_id)?;
            }
        }
        Ok(())
    }
}

/// Pre-encoded corpus for retrieval: ids in corpus order plus the embedding
/// matrix.
pub struct CorpusEmbeddings {
    pub doc_ids: Vec<String>,
    pub matrix: Array2<f64>,
}

impl CorpusEmbeddings {
    pub fn build(
        corpus: &Corpus,
        params: &EncoderParams,
        cfg: &FeatureConfig,
        threads: usize,
    ) -> Self {
        Self {
            doc_ids: corpus.docs().iter().map(|d| d.doc_id.clone()).collect(),
            matrix: embed_documents(corpus, params, cfg, threads),
        }
    }
}

/// Exhaustive top-`depth` retrieval by cosine similarity (dot product of
/// unit vectors). Ties break by ascending doc_id, which makes the ranking
/// invariant under corpus permutation.
pub fn retrieve(
    query_text: &str,
    params: &EncoderParams,
    cfg: &FeatureConfig,
    corpus_emb: &CorpusEmbeddings,
    depth: usize,
) -> Result<Vec<String>> {
    if corpus_emb.doc_ids.is_empty() {
        return Err(Error::InvalidInput("cannot retrieve from an empty corpus".into()));
    }
    let q = encode(query_text, params, cfg);
    let scores = corpus_emb.matrix.dot(&q);
    let mut idx: Vec<usize> = (0..corpus_emb.doc_ids.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("similarities are finite")
            .then_with(|| corpus_emb.doc_ids[a].cmp(&corpus_emb.doc_ids[b]))
    });
    idx.truncate(depth);
    Ok(idx.into_iter().map(|i| corpus_emb.doc_ids[i].clone()).collect())
}

/// nDCG at the given depth: gain `2^rel - 1`, discount `log2(rank + 1)`,
/// ideal DCG from the relevance-sorted judgments.
pub fn ndcg_at(ranked: &[String], qrels: &BTreeMap<String, u32>, depth: usize) -> Result<f64> {
    if qrels.values().all(|&r| r == 0) {
        return Err(Error::InvalidInput(
            "nDCG undefined: no positive relevance judgment".into(),
        ));
    }
    let gain = |rel: u32| -> f64 { ((1u64 << rel) - 1) as f64 };
    let mut dcg = 0.0;
    for (i, doc_id) in ranked.iter().take(depth).enumerate() {
        let rel = qrels.get(doc_id).copied().unwrap_or(0);
        if rel > 0 {
            dcg += gain(rel) / ((i + 2) as f64).log2();
        }
    }
    let mut rels: Vec<u32> = qrels.values().copied().filter(|&r| r > 0).collect();
    rels.sort_unstable_by(|a, b| b.cmp(a));
    let mut idcg = 0.0;
    for (i, &rel) in rels.iter().take(depth).enumerate() {
        idcg += gain(rel) / ((i + 2) as f64).log2();
    }
    Ok(dcg / idcg)
}

/// nDCG@10, the headline metric.
pub fn ndcg_at_10(ranked: &[String], qrels: &BTreeMap<String, u32>) -> Result<f64> {
    ndcg_at(ranked, qrels, NDCG_DEPTH)
}

/// One evaluation: per-query nDCG@10, the mean, and (when a document-group
/// map is supplied) per-group means sliced by each query's positive
/// document.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRun {
    pub depth: usize,
    pub mean_ndcg10: f64,
    pub per_query: Vec<(String, f64)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_group: Option<BTreeMap<usize, GroupSlice>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroupSlice {
    pub queries: usize,
    pub mean_ndcg10: f64,
}

impl EvalRun {
    pub fn save_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("serialization cannot fail");
        std::fs::write(path, json.as_bytes())?;
        Ok(())
    }
}

/// The query's "positive document" for slicing: highest relevance, ties by
/// ascending doc_id.
fn primary_positive(qrels: &BTreeMap<String, u32>) -> Option<&String> {
    qrels
        .iter()
        .filter(|(_, &r)| r > 0)
        .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(doc, _)| doc)
}

/// Evaluate a model over an eval set. `doc_to_group` enables the per-group
/// slice means (queries whose positive document has no group are left out
/// of the slices).
pub fn evaluate(
    params: &EncoderParams,
    cfg: &FeatureConfig,
    corpus: &Corpus,
    eval_set: &EvalSet,
    doc_to_group: Option<&BTreeMap<String, usize>>,
    threads: usize,
) -> Result<EvalRun> {
    eval_set.validate(corpus)?;
    let emb = CorpusEmbeddings::build(corpus, params, cfg, threads);
    let chunks = map_chunks(eval_set.queries.len(), threads, |range| {
        range
            .map(|i| {
                let q = &eval_set.queries[i];
                let qrels = &eval_set.qrels[&q.query_id];
                let ranked = retrieve(&q.text, params, cfg, &emb, NDCG_DEPTH)?;
                Ok((q.query_id.clone(), ndcg_at_10(&ranked, qrels)?))
            })
            .collect::<Result<Vec<_>>>()
    });
    let mut per_query = Vec::with_capacity(eval_set.queries.len());
    for chunk in chunks {
        per_query.extend(chunk?);
    }
    let mean = if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().map(|(_, v)| v).sum::<f64>() / per_query.len() as f64
    };

    let per_group = doc_to_group.map(|map| {
        let mut acc: BTreeMap<usize, (usize, f64)> = BTreeMap::new();
        for ((_, score), q) in per_query.iter().zip(&eval_set.queries) {
            let Some(pos) = primary_positive(&eval_set.qrels[&q.query_id]) else {
                continue;
            };
            if let Some(&g) = map.get(pos) {
                let entry = acc.entry(g).or_insert((0, 0.0));
                entry.0 += 1;
                entry.1 += score;
            }
        }
        acc.into_iter()
            .map(|(g, (count, total))| {
                (
                    g,
                    GroupSlice {
                        queries: count,
                        mean_ndcg10: total / count as f64,
                    },
                )
            })
            .collect()
    });

    Ok(EvalRun {
        depth: NDCG_DEPTH,
        mean_ndcg10: mean,
        per_query,
        per_group,
    })
}

// ---------------------------------------------------------------------------
// queries.jsonl / qrels.tsv io
// ---------------------------------------------------------------------------

pub fn load_queries(path: &Path) -> Result<Vec<EvalQuery>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let q: EvalQuery = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        out.push(q);
    }
    Ok(out)
}

pub fn save_queries(path: &Path, queries: &[EvalQuery]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for q in queries {
        let line = serde_json::to_string(q).expect("serialization cannot fail");
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Tab-separated `query_id doc_id relevance` triples.
pub fn load_qrels(path: &Path) -> Result<BTreeMap<String, BTreeMap<String, u32>>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut out: BTreeMap<String, BTreeMap<String, u32>> = BTreeMap::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::MalformedLine {
            path: path.display().to_string(),
            line: lineno + 1,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!("expected 3 tab-separated fields, got {}", fields.len())));
        }
        let rel: u32 = fields[2]
            .trim()
            .parse()
            .map_err(|e| err(format!("bad relevance: {e}")))?;
        out.entry(fields[0].to_string())
            .or_default()
            .insert(fields[1].to_string(), rel);
    }
    Ok(out)
}

pub fn save_qrels(path: &Path, qrels: &BTreeMap<String, BTreeMap<String, u32>>) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    for (query_id, docs) in qrels {
        for (doc_id, rel) in docs {
            writeln!(w, "{query_id}\t{doc_id}\t{rel}")?;
        }
    }
    w.flush()?;
    Ok(())
}
