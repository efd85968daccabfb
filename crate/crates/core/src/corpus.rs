//! Web-graph corpora: documents, anchor edges, contrastive pairs, and the
//! synthetic graph generator used for desk-scale experiments.
//!
//! On-disk formats are line-oriented JSON (`docs.jsonl`, `edges.jsonl`,
//! `pairs.jsonl`); see the `load_*`/`save_*` functions.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{fnv1a64, tokenize};

/// Separator between URL, title and content in the downstream text
/// representation of a document.
pub const TEXT_SEPARATOR: &str = "\n";

/// A web page: the unit of retrieval.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub url: String,
    pub title: String,
    pub content: String,
}

impl Document {
    /// Text representation used by the encoder and by BM25: URL, title and
    /// content joined with newlines.
    pub fn text_repr(&self) -> String {
        let mut s = String::with_capacity(
            self.url.len() + self.title.len() + self.content.len() + 2 * TEXT_SEPARATOR.len(),
        );
        s.push_str(&self.url);
        s.push_str(TEXT_SEPARATOR);
        s.push_str(&self.title);
        s.push_str(TEXT_SEPARATOR);
        s.push_str(&self.content);
        s
    }
}

/// A hyperlink: source page, target page, and the clickable anchor text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnchorEdge {
    #[serde(rename = "source")]
    pub source_doc_id: String,
    #[serde(rename = "target")]
    pub target_doc_id: String,
    #[serde(rename = "anchor")]
    pub anchor_text: String,
}

/// How the query side of a contrastive pair was built.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairMode {
    /// Query is the source page text; target page is the positive.
    LinkPrediction,
    /// Query is the anchor text; target page is the positive.
    AnchorRetrieval,
}

/// One training example: a query, its positive document, and zero or more
/// mined negative documents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContrastivePair {
    pub pair_id: String,
    #[serde(rename = "query")]
    pub query_text: String,
    #[serde(rename = "positive")]
    pub positive_doc_id: String,
    #[serde(rename = "negatives")]
    pub negative_doc_ids: Vec<String>,
    pub mode: PairMode,
}

/// An ordered document collection with unique ids and O(1) id lookup.
#[derive(Debug, Clone)]
pub struct Corpus {
    docs: Vec<Document>,
    index: HashMap<String, usize>,
}

impl Corpus {
    /// Build from documents, rejecting duplicate ids.
    pub fn new(docs: Vec<Document>) -> Result<Self> {
        let mut index = HashMap::with_capacity(docs.len());
        for (i, doc) in docs.iter().enumerate() {
            if doc.doc_id.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "document at position {i} has an empty doc_id"
                )));
            }
            if index.insert(doc.doc_id.clone(), i).is_some() {
                return Err(Error::DuplicateDoc {
                    doc_id: doc.doc_id.clone(),
                });
            }
        }
        Ok(Self { docs, index })
    }

    pub fn docs(&self) -> &[Document] {
        &self.docs
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    /// Position of a doc_id in corpus order.
    pub fn position(&self, doc_id: &str) -> Option<usize> {
        self.index.get(doc_id).copied()
    }

    pub fn get(&self, doc_id: &str) -> Option<&Document> {
        self.position(doc_id).map(|i| &self.docs[i])
    }

    /// Position of a doc_id, or a dangling-reference error naming it.
    pub fn require(&self, doc_id: &str) -> Result<usize> {
        self.position(doc_id).ok_or_else(|| Error::DanglingDoc {
            doc_id: doc_id.to_string(),
        })
    }
}

// ---------------------------------------------------------------------------
// JSONL / TSV io
// ---------------------------------------------------------------------------

fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut items = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            path: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?;
        items.push(item);
    }
    Ok(items)
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut writer = BufWriter::new(file);
    for item in items {
        let line = serde_json::to_string(item).expect("serialization cannot fail");
        writer.write_all(line.as_bytes())?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

/// Load `docs.jsonl`: one document object per line.
pub fn load_documents(path: &Path) -> Result<Vec<Document>> {
    read_jsonl(path)
}

/// Load `edges.jsonl`: one `{source, target, anchor}` object per line.
pub fn load_edges(path: &Path) -> Result<Vec<AnchorEdge>> {
    read_jsonl(path)
}

/// Load a corpus and its edge list, validating id uniqueness and that every
/// edge endpoint resolves to a document.
pub fn load_corpus(docs_path: &Path, edges_path: &Path) -> Result<(Corpus, Vec<AnchorEdge>)> {
    let corpus = Corpus::new(load_documents(docs_path)?)?;
    let edges = load_edges(edges_path)?;
    for edge in &edges {
        corpus.require(&edge.source_doc_id)?;
        corpus.require(&edge.target_doc_id)?;
    }
    Ok((corpus, edges))
}

pub fn save_documents(path: &Path, docs: &[Document]) -> Result<()> {
    write_jsonl(path, docs)
}

pub fn save_edges(path: &Path, edges: &[AnchorEdge]) -> Result<()> {
    write_jsonl(path, edges)
}

pub fn load_pairs(path: &Path) -> Result<Vec<ContrastivePair>> {
    read_jsonl(path)
}

pub fn save_pairs(path: &Path, pairs: &[ContrastivePair]) -> Result<()> {
    write_jsonl(path, pairs)
}

// ---------------------------------------------------------------------------
// Anchor filtering
// ---------------------------------------------------------------------------

/// Navigational anchor phrases dropped by default. The exact stoplist is a
/// documented superset guess and can be replaced from a file.
pub const DEFAULT_STOPLIST: &[&str] = &[
    "homepage",
    "login",
    "sign in",
    "click here",
    "next",
    "previous",
    "contact",
    "about",
];

#[derive(Debug, Clone)]
pub struct AnchorFilterConfig {
    /// Lowercased phrases; an anchor equal to any of them (case-insensitive,
    /// trimmed) is dropped.
    pub stoplist: BTreeSet<String>,
    /// Anchors with fewer tokens than this are dropped.
    pub min_tokens: usize,
    /// When set, keep only the top fraction of anchors by a heuristic
    /// quality score (token count plus lexical overlap with the target
    /// title). Off by default.
    pub quality_keep_fraction: Option<f64>,
}

impl Default for AnchorFilterConfig {
    fn default() -> Self {
        Self {
            stoplist: DEFAULT_STOPLIST.iter().map(|s| s.to_string()).collect(),
            min_tokens: 2,
            quality_keep_fraction: None,
        }
    }
}

impl AnchorFilterConfig {
    /// Load a stoplist from a file with one phrase per line.
    pub fn with_stoplist_file(mut self, path: &Path) -> Result<Self> {
        let content = std::fs::read_to_string(path)?;
        self.stoplist = content
            .lines()
            .map(|l| l.trim().to_lowercase())
            .filter(|l| !l.is_empty())
            .collect();
        Ok(self)
    }
}

/// Registrable domain of a URL, approximated as the last two labels of the
/// host (`en.wikipedia.org` -> `wikipedia.org`). No public-suffix list, so
/// e.g. `foo.co.uk` collapses to `co.uk`; documented limitation.
pub fn registrable_domain(url_str: &str) -> Option<String> {
    let parsed = url::Url::parse(url_str).ok()?;
    let host = parsed.host_str()?;
    let labels: Vec<&str> = host.split('.').filter(|l| !l.is_empty()).collect();
    match labels.len() {
        0 => None,
        1 => Some(labels[0].to_lowercase()),
        n => Some(format!(
            "{}.{}",
            labels[n - 2].to_lowercase(),
            labels[n - 1].to_lowercase()
        )),
    }
}

/// Drop uninformative anchors: stoplisted phrases, anchors shorter than
/// `min_tokens`, and in-domain links (source and target share a registrable
/// domain). Order is preserved; the filter is idempotent.
pub fn filter_anchors(
    corpus: &Corpus,
    edges: &[AnchorEdge],
    cfg: &AnchorFilterConfig,
) -> Vec<AnchorEdge> {
    let survives = |edge: &AnchorEdge| -> bool {
        let anchor_lower = edge.anchor_text.trim().to_lowercase();
        if cfg.stoplist.contains(&anchor_lower) {
            return false;
        }
        if tokenize(&edge.anchor_text, true).len() < cfg.min_tokens {
            return false;
        }
        let src_domain = corpus
            .get(&edge.source_doc_id)
            .and_then(|d| registrable_domain(&d.url));
        let tgt_domain = corpus
            .get(&edge.target_doc_id)
            .and_then(|d| registrable_domain(&d.url));
        if let (Some(s), Some(t)) = (src_domain, tgt_domain) {
            if s == t {
                return false;
            }
        }
        true
    };

    let kept: Vec<AnchorEdge> = edges.iter().filter(|e| survives(e)).cloned().collect();

    match cfg.quality_keep_fraction {
        None => kept,
        Some(fraction) => quality_cut(corpus, kept, fraction),
    }
}

/// Deterministic stand-in for a learned anchor-quality ranker: score each
/// anchor by token count plus overlap with the target title, keep the top
/// fraction, preserve input order.
fn quality_cut(corpus: &Corpus, edges: Vec<AnchorEdge>, fraction: f64) -> Vec<AnchorEdge> {
    let fraction = fraction.clamp(0.0, 1.0);
    let keep_n = ((edges.len() as f64) * fraction).ceil() as usize;
    if keep_n >= edges.len() {
        return edges;
    }
    let mut scored: Vec<(usize, usize)> = edges
        .iter()
        .enumerate()
        .map(|(i, edge)| {
            let anchor_tokens: BTreeSet<String> =
                tokenize(&edge.anchor_text, true).into_iter().collect();
            let title_tokens: BTreeSet<String> = corpus
                .get(&edge.target_doc_id)
                .map(|d| tokenize(&d.title, true).into_iter().collect())
                .unwrap_or_default();
            let overlap = anchor_tokens.intersection(&title_tokens).count();
            (i, anchor_tokens.len() + overlap)
        })
        .collect();
    // Rank by score descending, ties by original position.
    scored.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut keep_idx: Vec<usize> = scored[..keep_n].iter().map(|(i, _)| *i).collect();
    keep_idx.sort_unstable();
    keep_idx.into_iter().map(|i| edges[i].clone()).collect()
}

// ---------------------------------------------------------------------------
// Pair construction
// ---------------------------------------------------------------------------

/// One pair per edge, query = source page text, positive = target page,
/// negatives drawn uniformly (seeded per pair) from documents not linked
/// from the source.
pub fn make_link_pairs(
    corpus: &Corpus,
    edges: &[AnchorEdge],
    negatives_per_pair: usize,
    seed: u64,
) -> Result<Vec<ContrastivePair>> {
    make_pairs(
        corpus,
        edges,
        negatives_per_pair,
        seed,
        PairMode::LinkPrediction,
    )
}

/// One pair per edge, query = anchor text, positive = target page,
/// negatives as in [`make_link_pairs`].
pub fn make_anchor_pairs(
    corpus: &Corpus,
    edges: &[AnchorEdge],
    negatives_per_pair: usize,
    seed: u64,
) -> Result<Vec<ContrastivePair>> {
    make_pairs(
        corpus,
        edges,
        negatives_per_pair,
        seed,
        PairMode::AnchorRetrieval,
    )
}

fn make_pairs(
    corpus: &Corpus,
    edges: &[AnchorEdge],
    k: usize,
    seed: u64,
    mode: PairMode,
) -> Result<Vec<ContrastivePair>> {
    if corpus.len() < k + 1 {
        return Err(Error::InvalidInput(format!(
            "corpus has {} documents; need at least {} for {} negatives per pair",
            corpus.len(),
            k + 1,
            k
        )));
    }

    // Linked-from adjacency, used to exclude related documents from the
    // negative candidate set.
    let mut linked: HashMap<usize, HashSet<usize>> = HashMap::new();
    for edge in edges {
        let src = corpus.require(&edge.source_doc_id)?;
        let tgt = corpus.require(&edge.target_doc_id)?;
        linked.entry(src).or_default().insert(tgt);
    }

    let prefix = match mode {
        PairMode::LinkPrediction => "lp",
        PairMode::AnchorRetrieval => "ar",
    };
    let empty = HashSet::new();

    let mut pairs = Vec::with_capacity(edges.len());
    for (i, edge) in edges.iter().enumerate() {
        let pair_id = format!("{prefix}-{i:06}");
        let src = corpus.require(&edge.source_doc_id)?;
        let query_text = match mode {
            PairMode::LinkPrediction => corpus.docs()[src].text_repr(),
            PairMode::AnchorRetrieval => edge.anchor_text.clone(),
        };
        let exclude = linked.get(&src).unwrap_or(&empty);
        let mut candidates: Vec<usize> = (0..corpus.len())
            .filter(|d| *d != src && !exclude.contains(d))
            .collect();
        if candidates.len() < k {
            return Err(Error::NotEnoughCandidates {
                pair_id,
                needed: k,
                available: candidates.len(),
            });
        }
        // Seed per pair id so pair sets are reproducible under insertion of
        // other pairs.
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ fnv1a64(pair_id.as_bytes()));
        for j in 0..k {
            let pick = rng.random_range(j..candidates.len());
            candidates.swap(j, pick);
        }
        let negatives = candidates[..k]
            .iter()
            .map(|&d| corpus.docs()[d].doc_id.clone())
            .collect();
        pairs.push(ContrastivePair {
            pair_id,
            query_text,
            positive_doc_id: edge.target_doc_id.clone(),
            negative_doc_ids: negatives,
            mode,
        });
    }
    Ok(pairs)
}

// ---------------------------------------------------------------------------
// Synthetic corpus generator
// ---------------------------------------------------------------------------

/// Parameters of the synthetic web graph. Topics give documents their
/// vocabulary; links are drawn independently per ordered document pair with
/// a higher probability inside a topic than across topics. Hard topics get
/// anchors from a query vocabulary disjoint from every document vocabulary,
/// so their pairs carry no lexical overlap and must be learned from the
/// pairs themselves.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_topics: usize,
    pub docs_per_topic: Vec<usize>,
    pub intra_topic_link_prob: f64,
    pub cross_topic_link_prob: f64,
    pub hard_topic_ids: BTreeSet<usize>,
    pub vocab_size: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.num_topics == 0 {
            return Err(Error::InvalidConfig("num_topics must be >= 1".into()));
        }
        if self.docs_per_topic.len() != self.num_topics {
            return Err(Error::InvalidConfig(format!(
                "docs_per_topic has {} entries for {} topics",
                self.docs_per_topic.len(),
                self.num_topics
            )));
        }
        if let Some(t) = self.docs_per_topic.iter().position(|&n| n == 0) {
            return Err(Error::InvalidConfig(format!("topic {t} has zero documents")));
        }
        if !(self.intra_topic_link_prob > self.cross_topic_link_prob) {
            return Err(Error::InvalidConfig(
                "intra_topic_link_prob must exceed cross_topic_link_prob".into(),
            ));
        }
        for p in [self.intra_topic_link_prob, self.cross_topic_link_prob] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidConfig(format!("link probability {p} not in [0,1]")));
            }
        }
        if let Some(&t) = self.hard_topic_ids.iter().find(|&&t| t >= self.num_topics) {
            return Err(Error::InvalidConfig(format!(
                "hard topic id {t} out of range for {} topics",
                self.num_topics
            )));
        }
        Ok(())
    }
}

/// Token-id zones carved out of the vocabulary: a shared pool every easy
/// document samples from, per-topic document pools, and per-hard-topic
/// query pools disjoint from all document pools.
struct VocabLayout {
    shared: std::ops::Range<usize>,
    doc_pools: Vec<std::ops::Range<usize>>,
    query_pools: HashMap<usize, std::ops::Range<usize>>,
}

impl VocabLayout {
    fn build(spec: &SyntheticSpec) -> Result<VocabLayout> {
        let v = spec.vocab_size;
        let shared_n = (v * 15) / 100;
        let hard_n = if spec.hard_topic_ids.is_empty() {
            0
        } else {
            (v * 15) / 100
        };
        let doc_zone = v.saturating_sub(shared_n + hard_n);
        let per_topic = doc_zone / spec.num_topics;
        let per_hard = if spec.hard_topic_ids.is_empty() {
            0
        } else {
            hard_n / spec.hard_topic_ids.len()
        };
        if shared_n < 4 || per_topic < 8 || (!spec.hard_topic_ids.is_empty() && per_hard < 8) {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {v} too small for {} topics",
                spec.num_topics
            )));
        }
        let mut doc_pools = Vec::with_capacity(spec.num_topics);
        for t in 0..spec.num_topics {
            let start = shared_n + t * per_topic;
            doc_pools.push(start..start + per_topic);
        }
        let hard_base = shared_n + spec.num_topics * per_topic;
        let mut query_pools = HashMap::new();
        for (i, &t) in spec.hard_topic_ids.iter().enumerate() {
            let start = hard_base + i * per_hard;
            query_pools.insert(t, start..start + per_hard);
        }
        Ok(VocabLayout {
            shared: 0..shared_n,
            doc_pools,
            query_pools,
        })
    }
}

fn token(idx: usize) -> String {
    format!("w{idx}")
}

/// A generated corpus plus the gold topic label of every document, in
/// corpus order. Labels are the reference partition for clustering tests.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub docs: Vec<Document>,
    pub edges: Vec<AnchorEdge>,
    pub topic_of_doc: Vec<usize>,
}

/// Deterministically generate documents, links and anchors from the spec.
/// Equal seeds give byte-identical output.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let layout = VocabLayout::build(spec)?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);

    let total_docs: usize = spec.docs_per_topic.iter().sum();
    let mut docs = Vec::with_capacity(total_docs);
    let mut topic_of_doc = Vec::with_capacity(total_docs);
    // Topic-pool tokens actually present in each document, deduplicated;
    // anchors for easy topics sample from these so queries are about the
    // specific target page.
    let mut doc_topic_tokens: Vec<Vec<usize>> = Vec::with_capacity(total_docs);

    let mut global_idx = 0usize;
    for (t, &n_docs) in spec.docs_per_topic.iter().enumerate() {
        let pool = layout.doc_pools[t].clone();
        for local in 0..n_docs {
            let doc_id = format!("d{global_idx:05}");
            // Blocks of four documents share a registrable domain so the
            // in-domain filter has something to do on synthetic data.
            let url = format!("https://t{t}b{}.net/{doc_id}", local / 4);
            let title_tokens: Vec<String> = (0..4)
                .map(|_| token(rng.random_range(pool.clone())))
                .collect();
            let len = rng.random_range(30..=60);
            let mut content_tokens = Vec::with_capacity(len);
            let mut own_topic: BTreeSet<usize> = BTreeSet::new();
            for _ in 0..len {
                if rng.random_bool(0.3) {
                    content_tokens.push(token(rng.random_range(layout.shared.clone())));
                } else {
                    let idx = rng.random_range(pool.clone());
                    own_topic.insert(idx);
                    content_tokens.push(token(idx));
                }
            }
            docs.push(Document {
                doc_id,
                url,
                title: title_tokens.join(" "),
                content: content_tokens.join(" "),
            });
            topic_of_doc.push(t);
            doc_topic_tokens.push(own_topic.into_iter().collect());
            global_idx += 1;
        }
    }

    // Per-document signature inside the hard-query pool: six tokens laid
    // out modularly so each hard document gets a (mostly) private query
    // vocabulary that never appears in any document text.
    const SIG_LEN: usize = 6;
    let signature = |doc: usize| -> Vec<usize> {
        let t = topic_of_doc[doc];
        let pool = &layout.query_pools[&t];
        let topic_start: usize = spec.docs_per_topic[..t].iter().sum();
        let local = doc - topic_start;
        (0..SIG_LEN)
            .map(|s| pool.start + (local * SIG_LEN + s) % pool.len())
            .collect()
    };

    let mut edges = Vec::new();
    for src in 0..total_docs {
        for tgt in 0..total_docs {
            if src == tgt {
                continue;
            }
            let p = if topic_of_doc[src] == topic_of_doc[tgt] {
                spec.intra_topic_link_prob
            } else {
                spec.cross_topic_link_prob
            };
            if !rng.random_bool(p) {
                continue;
            }
            let anchor_len = rng.random_range(2..=4usize);
            let tgt_topic = topic_of_doc[tgt];
            let anchor_tokens: Vec<String> = if spec.hard_topic_ids.contains(&tgt_topic) {
                let sig = signature(tgt);
                let picks = crate::text::sample_distinct(&mut rng, sig.len(), anchor_len);
                picks.into_iter().map(|i| token(sig[i])).collect()
            } else {
                let own = &doc_topic_tokens[tgt];
                if own.is_empty() {
                    (0..anchor_len)
                        .map(|_| token(rng.random_range(layout.doc_pools[tgt_topic].clone())))
                        .collect()
                } else {
                    let k = anchor_len.min(own.len());
                    let picks = crate::text::sample_distinct(&mut rng, own.len(), k);
                    picks.into_iter().map(|i| token(own[i])).collect()
                }
            };
            edges.push(AnchorEdge {
                source_doc_id: docs[src].doc_id.clone(),
                target_doc_id: docs[tgt].doc_id.clone(),
                anchor_text: anchor_tokens.join(" "),
            });
        }
    }

    Ok(SyntheticCorpus {
        docs,
        edges,
        topic_of_doc,
    })
}

/// Split edges into train and held-out eval subsets (seeded). Eval anchors
/// become queries; their targets become relevance judgments.
pub fn split_edges(
    edges: &[AnchorEdge],
    eval_fraction: f64,
    seed: u64,
) -> (Vec<AnchorEdge>, Vec<AnchorEdge>) {
    let n_eval = ((edges.len() as f64) * eval_fraction.clamp(0.0, 1.0)).round() as usize;
    let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0x5eed_5eed);
    let mut picks = crate::text::sample_distinct(&mut rng, edges.len(), n_eval.min(edges.len()));
    picks.sort_unstable();
    let eval_set: HashSet<usize> = picks.iter().copied().collect();
    let mut train = Vec::with_capacity(edges.len() - eval_set.len());
    let mut eval = Vec::with_capacity(eval_set.len());
    for (i, e) in edges.iter().enumerate() {
        if eval_set.contains(&i) {
            eval.push(e.clone());
        } else {
            train.push(e.clone());
        }
    }
    (train, eval)
}
