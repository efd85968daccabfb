//! Document clustering and group assignment: mini-batch k-means over
//! encoder embeddings (with a full-batch Lloyd oracle), the MinSize merge
//! rule that pools small clusters into one residual group, and the
//! URL-domain clustering variant.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{registrable_domain, ContrastivePair, Corpus};
use crate::encoder::{encode, EncoderParams, FeatureConfig};
use crate::error::{Error, Result};
use crate::par::map_chunks;

/// How a group assignment was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMethod {
    EmbeddingKmeans,
    UrlDomain,
    External,
}

/// Pair-level grouping. Weighted groups are indexed `0..n`; when present,
/// the residual group (everything merged by the MinSize rule) sits at the
/// last index and is excluded from reweighting.
#[derive(Debug, Clone)]
pub struct GroupAssignment {
    pub pair_to_group: BTreeMap<String, usize>,
    pub group_sizes: Vec<usize>,
    pub residual_group: Option<usize>,
    pub method: ClusterMethod,
    /// Group of each positive document seen while lifting pairs; used for
    /// per-group evaluation slices. Not persisted.
    pub doc_to_group: BTreeMap<String, usize>,
}

impl GroupAssignment {
    /// Sizes of the weighted groups (the residual group, if any, removed).
    pub fn weighted_group_sizes(&self) -> Vec<usize> {
        match self.residual_group {
            None => self.group_sizes.clone(),
            Some(r) => self
                .group_sizes
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != r)
                .map(|(_, &s)| s)
                .collect(),
        }
    }

    /// Weighted-group index of a pair: `None` for the residual group.
    pub fn weighted_group_of(&self, pair_id: &str) -> Option<Option<usize>> {
        let g = *self.pair_to_group.get(pair_id)?;
        Some(match self.residual_group {
            Some(r) if g == r => None,
            _ => Some(g),
        })
    }

    /// Recompute `doc_to_group` from a pair list (after loading from disk).
    pub fn rebuild_doc_groups(&mut self, pairs: &[ContrastivePair]) {
        self.doc_to_group.clear();
        for p in pairs {
            if let Some(&g) = self.pair_to_group.get(&p.pair_id) {
                self.doc_to_group.insert(p.positive_doc_id.clone(), g);
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KMeansInit {
    KmeansPlusPlus,
    Random,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KMeansConfig {
    /// Target group count.
    pub k: usize,
    pub batch_size: usize,
    pub max_iters: usize,
    /// Groups smaller than this (measured in pairs) are merged.
    pub min_size: usize,
    pub seed: u64,
    pub init: KMeansInit,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            k: 500,
            batch_size: 1024,
            max_iters: 100,
            min_size: 128,
            seed: 0,
            init: KMeansInit::KmeansPlusPlus,
        }
    }
}

impl KMeansConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        if self.min_size < 1 {
            return Err(Error::InvalidConfig("min_size must be >= 1".into()));
        }
        if self.batch_size < 1 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Encode every document's text representation; row i is the unit-norm
/// embedding of document i in corpus order.
pub fn embed_documents(
    corpus: &Corpus,
    params: &EncoderParams,
    cfg: &FeatureConfig,
    threads: usize,
) -> Array2<f64> {
    let d = params.embed_dim();
    let chunks = map_chunks(corpus.len(), threads, |range| {
        range
            .map(|i| encode(&corpus.docs()[i].text_repr(), params, cfg))
            .collect::<Vec<_>>()
    });
    let mut out = Array2::zeros((corpus.len(), d));
    let mut row = 0;
    for chunk in chunks {
        for emb in chunk {
            out.row_mut(row).assign(&emb);
            row += 1;
        }
    }
    out
}

fn squared_distance(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

fn nearest_center(point: ndarray::ArrayView1<f64>, centers: &Array2<f64>) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, center) in centers.axis_iter(Axis(0)).enumerate() {
        let d = squared_distance(point, center);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

/// Seeded k-means++ (or uniform-random) center selection.
fn init_centers(data: &Array2<f64>, k: usize, init: KMeansInit, rng: &mut ChaCha12Rng) -> Array2<f64> {
    let n = data.nrows();
    let d = data.ncols();
    let mut centers = Array2::zeros((k, d));
    match init {
        KMeansInit::Random => {
            let picks = crate::text::sample_distinct(rng, n, k);
            for (c, &i) in picks.iter().enumerate() {
                centers.row_mut(c).assign(&data.row(i));
            }
        }
        KMeansInit::KmeansPlusPlus => {
            let first = rng.random_range(0..n);
            centers.row_mut(0).assign(&data.row(first));
            let mut dist2: Vec<f64> = (0..n)
                .map(|i| squared_distance(data.row(i), centers.row(0)))
                .collect();
            for c in 1..k {
                let total: f64 = dist2.iter().sum();
                let pick = if total > 0.0 {
                    let mut r = rng.random::<f64>() * total;
                    let mut chosen = n - 1;
                    for (i, &d2) in dist2.iter().enumerate() {
                        r -= d2;
                        if r <= 0.0 {
                            chosen = i;
                            break;
                        }
                    }
                    chosen
                } else {
                    // All remaining mass at zero distance: any point works.
                    rng.random_range(0..n)
                };
                centers.row_mut(c).assign(&data.row(pick));
                for i in 0..n {
                    let d2 = squared_distance(data.row(i), centers.row(c));
                    if d2 < dist2[i] {
                        dist2[i] = d2;
                    }
                }
            }
        }
    }
    centers
}

/// Result of a clustering run.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub centers: Array2<f64>,
    pub doc_to_cluster: Vec<usize>,
    /// Inertia after each assignment pass (Lloyd) or after the final pass
    /// (mini-batch, single entry).
    pub inertia_trace: Vec<f64>,
}

impl KMeansFit {
    pub fn inertia(&self) -> f64 {
        *self.inertia_trace.last().expect("at least one pass")
    }
}

/// Sum of squared distances from each point to its assigned center.
pub fn inertia(data: &Array2<f64>, centers: &Array2<f64>, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &c)| squared_distance(data.row(i), centers.row(c)))
        .sum()
}

/// Mini-batch k-means: sample a batch per iteration, assign to the nearest
/// center, move each touched center toward its points with a per-center
/// learning rate of 1/(times assigned). Ends with a full assignment pass.
/// Deterministic given the seed.
pub fn minibatch_kmeans(data: &Array2<f64>, cfg: &KMeansConfig) -> Result<KMeansFit> {
    cfg.validate()?;
    let n = data.nrows();
    if n < cfg.k {
        return Err(Error::InvalidInput(format!(
            "{n} documents cannot form {} clusters",
            cfg.k
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut centers = init_centers(data, cfg.k, cfg.init, &mut rng);
    let mut counts = vec![0u64; cfg.k];
    let mut batch_assign = vec![0usize; cfg.batch_size];

    for _ in 0..cfg.max_iters {
        let batch: Vec<usize> = (0..cfg.batch_size).map(|_| rng.random_range(0..n)).collect();
        for (slot, &i) in batch.iter().enumerate() {
            batch_assign[slot] = nearest_center(data.row(i), &centers).0;
        }
        for (slot, &i) in batch.iter().enumerate() {
            let c = batch_assign[slot];
            counts[c] += 1;
            let eta = 1.0 / counts[c] as f64;
            let point = data.row(i);
            let mut center = centers.row_mut(c);
            center.zip_mut_with(&point, |cv, &pv| *cv = (1.0 - eta) * *cv + eta * pv);
        }
    }

    let doc_to_cluster: Vec<usize> = (0..n)
        .map(|i| nearest_center(data.row(i), &centers).0)
        .collect();
    let final_inertia = inertia(data, &centers, &doc_to_cluster);
    Ok(KMeansFit {
        centers,
        doc_to_cluster,
        inertia_trace: vec![final_inertia],
    })
}

/// Full-batch Lloyd iterations; the test oracle for the mini-batch variant.
/// Inertia is non-increasing across iterations; stops at `max_iters` or
/// when the relative inertia change drops below 1e-6. Empty clusters keep
/// their center.
pub fn lloyd_kmeans(data: &Array2<f64>, cfg: &KMeansConfig) -> Result<KMeansFit> {
    cfg.validate()?;
    let n = data.nrows();
    if n < cfg.k {
        return Err(Error::InvalidInput(format!(
            "{n} documents cannot form {} clusters",
            cfg.k
        )));
    }
    let d = data.ncols();
    let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
    let mut centers = init_centers(data, cfg.k, cfg.init, &mut rng);
    let mut assignment = vec![0usize; n];
    let mut trace = Vec::new();

    for _ in 0..cfg.max_iters.max(1) {
        let mut total = 0.0;
        for i in 0..n {
            let (c, d2) = nearest_center(data.row(i), &centers);
            assignment[i] = c;
            total += d2;
        }
        trace.push(total);
        if trace.len() >= 2 {
            let prev = trace[trace.len() - 2];
            if prev - total <= 1e-6 * prev.max(f64::MIN_POSITIVE) {
                break;
            }
        }
        let mut sums = Array2::<f64>::zeros((cfg.k, d));
        let mut counts = vec![0usize; cfg.k];
        for (i, &c) in assignment.iter().enumerate() {
            counts[c] += 1;
            let mut row = sums.row_mut(c);
            row += &data.row(i);
        }
        for c in 0..cfg.k {
            if counts[c] > 0 {
                let mut row = centers.row_mut(c);
                row.assign(&(&sums.row(c) / counts[c] as f64));
            }
        }
    }

    Ok(KMeansFit {
        centers,
        doc_to_cluster: assignment,
        inertia_trace: trace,
    })
}

/// Lift document clusters to pair groups (a pair's group is its positive
/// document's cluster), merge every group smaller than `min_size` into one
/// residual group, and re-index survivors densely from 0. Clusters with no
/// pairs vanish. The residual group, when present, takes the last index.
pub fn merge_small_groups(
    corpus: &Corpus,
    doc_to_cluster: &[usize],
    pairs: &[ContrastivePair],
    min_size: usize,
    method: ClusterMethod,
) -> Result<GroupAssignment> {
    if doc_to_cluster.len() != corpus.len() {
        return Err(Error::InvalidInput(format!(
            "doc_to_cluster covers {} documents but the corpus has {}",
            doc_to_cluster.len(),
            corpus.len()
        )));
    }
    let n_clusters = doc_to_cluster.iter().copied().max().map_or(0, |m| m + 1);
    let mut pair_counts = vec![0usize; n_clusters];
    let mut pair_cluster = Vec::with_capacity(pairs.len());
    for p in pairs {
        let doc = corpus.require(&p.positive_doc_id)?;
        let c = doc_to_cluster[doc];
        pair_counts[c] += 1;
        pair_cluster.push(c);
    }

    // Survivors keep ascending cluster order; everything else with at least
    // one pair goes to the residual group.
    let mut remap: Vec<Option<usize>> = vec![None; n_clusters];
    let mut group_sizes = Vec::new();
    for (c, &count) in pair_counts.iter().enumerate() {
        if count >= min_size {
            remap[c] = Some(group_sizes.len());
            group_sizes.push(count);
        }
    }
    let residual_size: usize = pair_counts
        .iter()
        .filter(|&&c| c > 0 && c < min_size)
        .sum();
    let residual_group = if residual_size > 0 {
        let r = group_sizes.len();
        group_sizes.push(residual_size);
        Some(r)
    } else {
        None
    };

    let mut pair_to_group = BTreeMap::new();
    let mut doc_to_group = BTreeMap::new();
    for (p, &c) in pairs.iter().zip(&pair_cluster) {
        let g = remap[c].or(residual_group).expect("every pair lands somewhere");
        pair_to_group.insert(p.pair_id.clone(), g);
        doc_to_group.insert(p.positive_doc_id.clone(), g);
    }

    Ok(GroupAssignment {
        pair_to_group,
        group_sizes,
        residual_group,
        method,
        doc_to_group,
    })
}

/// Group pairs by the registrable domain of the positive document's URL,
/// then apply the MinSize merge. Pairs with unparsable URLs always land in
/// the residual group.
pub fn url_domain_clusters(
    corpus: &Corpus,
    pairs: &[ContrastivePair],
    min_size: usize,
) -> Result<GroupAssignment> {
    // Deterministic domain indexing: sorted lexicographically.
    let mut domains: BTreeMap<String, usize> = BTreeMap::new();
    let mut pair_domain: Vec<Option<String>> = Vec::with_capacity(pairs.len());
    for p in pairs {
        let doc = corpus.require(&p.positive_doc_id)?;
        let dom = registrable_domain(&corpus.docs()[doc].url);
        if let Some(d) = &dom {
            domains.entry(d.clone()).or_insert(0);
        }
        pair_domain.push(dom);
    }
    for (i, v) in domains.values_mut().enumerate() {
        *v = i;
    }

    let mut counts = vec![0usize; domains.len()];
    let mut unparsable = 0usize;
    for dom in &pair_domain {
        match dom {
            Some(d) => counts[domains[d]] += 1,
            None => unparsable += 1,
        }
    }

    let mut remap: Vec<Option<usize>> = vec![None; domains.len()];
    let mut group_sizes = Vec::new();
    for (c, &count) in counts.iter().enumerate() {
        if count >= min_size {
            remap[c] = Some(group_sizes.len());
            group_sizes.push(count);
        }
    }
    let residual_size =
        unparsable + counts.iter().filter(|&&c| c > 0 && c < min_size).sum::<usize>();
    let residual_group = if residual_size > 0 {
        let r = group_sizes.len();
        group_sizes.push(residual_size);
        Some(r)
    } else {
        None
    };

    let mut pair_to_group = BTreeMap::new();
    let mut doc_to_group = BTreeMap::new();
    for (p, dom) in pairs.iter().zip(&pair_domain) {
        let g = match dom {
            Some(d) => remap[domains[d]].or(residual_group),
            None => residual_group,
        }
        .expect("every pair lands somewhere");
        pair_to_group.insert(p.pair_id.clone(), g);
        doc_to_group.insert(p.positive_doc_id.clone(), g);
    }

    Ok(GroupAssignment {
        pair_to_group,
        group_sizes,
        residual_group,
        method: ClusterMethod::UrlDomain,
        doc_to_group,
    })
}

/// Adjusted Rand Index between two labelings of the same items. 1.0 means
/// identical partitions; ~0 means chance-level agreement.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len(), "labelings must align");
    let n = a.len();
    if n < 2 {
        return 1.0;
    }
    let mut contingency: HashMap<(usize, usize), f64> = HashMap::new();
    let mut row: HashMap<usize, f64> = HashMap::new();
    let mut col: HashMap<usize, f64> = HashMap::new();
    for (&x, &y) in a.iter().zip(b.iter()) {
        *contingency.entry((x, y)).or_insert(0.0) += 1.0;
        *row.entry(x).or_insert(0.0) += 1.0;
        *col.entry(y).or_insert(0.0) += 1.0;
    }
    let choose2 = |x: f64| x * (x - 1.0) / 2.0;
    let sum_ij: f64 = contingency.values().map(|&v| choose2(v)).sum();
    let sum_a: f64 = row.values().map(|&v| choose2(v)).sum();
    let sum_b: f64 = col.values().map(|&v| choose2(v)).sum();
    let total = choose2(n as f64);
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    if (max_index - expected).abs() < 1e-12 {
        return 1.0;
    }
    (sum_ij - expected) / (max_index - expected)
}

// ---------------------------------------------------------------------------
// groups.jsonl io
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct GroupLine {
    pair_id: String,
    group: usize,
}

#[derive(Serialize, Deserialize)]
struct GroupFooter {
    group_sizes: Vec<usize>,
    residual_group: Option<usize>,
    method: ClusterMethod,
    config: serde_json::Value,
}

/// Write `groups.jsonl`: one `{pair_id, group}` line per pair (sorted by
/// pair_id) followed by a footer object with sizes, residual index, method
/// and the producing configuration.
pub fn save_groups(
    path: &Path,
    assignment: &GroupAssignment,
    config: serde_json::Value,
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    for (pair_id, &group) in &assignment.pair_to_group {
        let line = serde_json::to_string(&GroupLine {
            pair_id: pair_id.clone(),
            group,
        })
        .expect("serialization cannot fail");
        w.write_all(line.as_bytes())?;
        w.write_all(b"\n")?;
    }
    let footer = serde_json::to_string(&GroupFooter {
        group_sizes: assignment.group_sizes.clone(),
        residual_group: assignment.residual_group,
        method: assignment.method,
        config,
    })
    .expect("serialization cannot fail");
    w.write_all(footer.as_bytes())?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Read `groups.jsonl`. The in-memory `doc_to_group` map is left empty;
/// call [`GroupAssignment::rebuild_doc_groups`] with the pair list if
/// per-group evaluation slices are needed.
pub fn load_groups(path: &Path) -> Result<GroupAssignment> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut pair_to_group = BTreeMap::new();
    let mut footer: Option<GroupFooter> = None;
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
        if let Ok(entry) = serde_json::from_str::<GroupLine>(&line) {
            pair_to_group.insert(entry.pair_id, entry.group);
        } else {
            let f: GroupFooter = serde_json::from_str(&line).map_err(|e| err(e.to_string()))?;
            footer = Some(f);
        }
    }
    let footer = footer.ok_or_else(|| Error::MalformedLine {
        path: path.display().to_string(),
        line: 0,
        msg: "missing footer object".into(),
    })?;
    Ok(GroupAssignment {
        pair_to_group,
        group_sizes: footer.group_sizes,
        residual_group: footer.residual_group,
        method: footer.method,
        doc_to_group: BTreeMap::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Document, PairMode};
    use crate::text::standard_normal;

    fn blob_data(
        centers: &[Vec<f64>],
        per_blob: usize,
        spread: f64,
        seed: u64,
    ) -> (Array2<f64>, Vec<usize>) {
        let d = centers[0].len();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let n = centers.len() * per_blob;
        let mut data = Array2::zeros((n, d));
        let mut labels = Vec::with_capacity(n);
        let mut row = 0;
        for (b, c) in centers.iter().enumerate() {
            for _ in 0..per_blob {
                for j in 0..d {
                    data[(row, j)] = c[j] + spread * standard_normal(&mut rng);
                }
                labels.push(b);
                row += 1;
            }
        }
        (data, labels)
    }

    fn cfg(k: usize, seed: u64) -> KMeansConfig {
        KMeansConfig {
            k,
            batch_size: 64,
            max_iters: 80,
            min_size: 1,
            seed,
            init: KMeansInit::KmeansPlusPlus,
        }
    }

    #[test]
    fn lloyd_k1_center_is_the_mean() {
        let (data, _) = blob_data(&[vec![2.0, -1.0]], 40, 1.0, 5);
        let fit = lloyd_kmeans(&data, &cfg(1, 0)).unwrap();
        let mean = data.mean_axis(Axis(0)).unwrap();
        for (a, b) in fit.centers.row(0).iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Mini-batch with enough sampling lands near the same center.
        let mb = minibatch_kmeans(&data, &cfg(1, 0)).unwrap();
        for (a, b) in mb.centers.row(0).iter().zip(mean.iter()) {
            assert!((a - b).abs() < 0.3, "{a} vs {b}");
        }
    }

    #[test]
    fn two_blobs_recovered_with_high_ari() {
        let (data, labels) = blob_data(&[vec![0.0, 0.0, 0.0], vec![8.0, 8.0, 8.0]], 150, 0.5, 7);
        let fit = minibatch_kmeans(&data, &cfg(2, 3)).unwrap();
        let ari = adjusted_rand_index(&fit.doc_to_cluster, &labels);
        assert!(ari >= 0.95, "ARI {ari}");
    }

    #[test]
    fn minibatch_is_deterministic_per_seed() {
        let (data, _) = blob_data(&[vec![0.0, 0.0], vec![5.0, 5.0]], 100, 0.8, 11);
        let a = minibatch_kmeans(&data, &cfg(2, 9)).unwrap();
        let b = minibatch_kmeans(&data, &cfg(2, 9)).unwrap();
        assert_eq!(a.doc_to_cluster, b.doc_to_cluster);
        for (x, y) in a.centers.iter().zip(b.centers.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn too_few_documents_is_an_error() {
        let (data, _) = blob_data(&[vec![0.0]], 3, 0.1, 0);
        assert!(minibatch_kmeans(&data, &cfg(5, 0)).is_err());
        assert!(lloyd_kmeans(&data, &cfg(5, 0)).is_err());
    }

    #[test]
    fn lloyd_inertia_is_monotone_on_random_data() {
        for seed in 0..15u64 {
            let mut rng = ChaCha12Rng::seed_from_u64(seed);
            let n = 60 + (seed as usize % 40);
            let mut data = Array2::zeros((n, 3));
            for i in 0..n {
                for j in 0..3 {
                    data[(i, j)] = standard_normal(&mut rng);
                }
            }
            let fit = lloyd_kmeans(&data, &cfg(4, seed)).unwrap();
            for w in fit.inertia_trace.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "inertia rose: {:?}", fit.inertia_trace);
            }
        }
    }

    #[test]
    fn identical_points_reach_zero_inertia_immediately() {
        let data = Array2::from_elem((30, 4), 1.5);
        let fit = lloyd_kmeans(&data, &cfg(3, 2)).unwrap();
        assert_eq!(fit.inertia_trace[0], 0.0);
    }

    #[test]
    fn minibatch_inertia_close_to_lloyd_on_blobs() {
        let (data, _) = blob_data(
            &[vec![0.0, 0.0], vec![6.0, 0.0], vec![0.0, 6.0]],
            120,
            0.6,
            13,
        );
        let mb = minibatch_kmeans(&data, &cfg(3, 1)).unwrap();
        let ll = lloyd_kmeans(&data, &cfg(3, 1)).unwrap();
        assert!(
            mb.inertia() <= 1.1 * ll.inertia(),
            "minibatch {} vs lloyd {}",
            mb.inertia(),
            ll.inertia()
        );
    }

    fn doc(id: &str, url: &str) -> Document {
        Document {
            doc_id: id.into(),
            url: url.into(),
            title: String::new(),
            content: String::new(),
        }
    }

    fn pair(id: &str, positive: &str) -> ContrastivePair {
        ContrastivePair {
            pair_id: id.into(),
            query_text: "q".into(),
            positive_doc_id: positive.into(),
            negative_doc_ids: vec![],
            mode: PairMode::AnchorRetrieval,
        }
    }

    /// Corpus of `counts.len()` clusters with the given per-cluster pair
    /// counts; one document per cluster.
    fn sized_groups(counts: &[usize]) -> (Corpus, Vec<usize>, Vec<ContrastivePair>) {
        let docs: Vec<Document> = (0..counts.len())
            .map(|i| doc(&format!("d{i}"), &format!("https://s{i}.net/")))
            .collect();
        let corpus = Corpus::new(docs).unwrap();
        let doc_to_cluster: Vec<usize> = (0..counts.len()).collect();
        let mut pairs = Vec::new();
        for (c, &count) in counts.iter().enumerate() {
            for j in 0..count {
                pairs.push(pair(&format!("p{c}-{j:04}"), &format!("d{c}")));
            }
        }
        (corpus, doc_to_cluster, pairs)
    }

    #[test]
    fn merge_applies_min_size_rule() {
        let (corpus, d2c, pairs) = sized_groups(&[200, 130, 5, 3]);
        let a = merge_small_groups(&corpus, &d2c, &pairs, 128, ClusterMethod::EmbeddingKmeans)
            .unwrap();
        assert_eq!(a.group_sizes, vec![200, 130, 8]);
        assert_eq!(a.residual_group, Some(2));
        assert_eq!(a.weighted_group_sizes(), vec![200, 130]);
        let total: usize = a.group_sizes.iter().sum();
        assert_eq!(total, pairs.len());
    }

    #[test]
    fn merge_without_small_groups_has_no_residual() {
        let (corpus, d2c, pairs) = sized_groups(&[150, 140]);
        let a = merge_small_groups(&corpus, &d2c, &pairs, 128, ClusterMethod::EmbeddingKmeans)
            .unwrap();
        assert_eq!(a.residual_group, None);
        assert_eq!(a.group_sizes, vec![150, 140]);
    }

    #[test]
    fn merge_all_small_gives_single_residual() {
        let (corpus, d2c, pairs) = sized_groups(&[5, 4, 3]);
        let a = merge_small_groups(&corpus, &d2c, &pairs, 128, ClusterMethod::EmbeddingKmeans)
            .unwrap();
        assert_eq!(a.group_sizes, vec![12]);
        assert_eq!(a.residual_group, Some(0));
        assert!(a.weighted_group_sizes().is_empty());
    }

    #[test]
    fn merge_is_idempotent_on_its_output() {
        let (corpus, d2c, pairs) = sized_groups(&[200, 90, 10, 300]);
        let a = merge_small_groups(&corpus, &d2c, &pairs, 100, ClusterMethod::EmbeddingKmeans)
            .unwrap();
        // Every surviving group already satisfies the rule, so a second
        // merge of the merged sizes is the identity.
        for (i, &s) in a.group_sizes.iter().enumerate() {
            if Some(i) != a.residual_group {
                assert!(s >= 100);
            }
        }
        // Pairs sharing a positive document share a group.
        let mut by_doc: HashMap<&str, usize> = HashMap::new();
        for p in &pairs {
            let g = a.pair_to_group[&p.pair_id];
            if let Some(&prev) = by_doc.get(p.positive_doc_id.as_str()) {
                assert_eq!(prev, g);
            }
            by_doc.insert(&p.positive_doc_id, g);
        }
    }

    #[test]
    fn url_domain_groups_by_registrable_domain() {
        let docs = vec![
            doc("en", "https://en.wikipedia.org/wiki/Horse"),
            doc("de", "https://de.wikipedia.org/wiki/Pferd"),
            doc("a", "https://a.com/x"),
            doc("b", "https://b.com/y"),
            doc("bad", "not a url"),
        ];
        let corpus = Corpus::new(docs).unwrap();
        let pairs = vec![
            pair("p0", "en"),
            pair("p1", "de"),
            pair("p2", "a"),
            pair("p3", "b"),
            pair("p4", "bad"),
        ];
        let a = url_domain_clusters(&corpus, &pairs, 2).unwrap();
        // wikipedia.org survives with two pairs; a.com, b.com and the
        // unparsable URL fall to the residual group.
        assert_eq!(a.pair_to_group["p0"], a.pair_to_group["p1"]);
        let residual = a.residual_group.unwrap();
        assert_eq!(a.pair_to_group["p4"], residual);
        assert_eq!(a.pair_to_group["p2"], residual);
        assert_eq!(a.pair_to_group["p3"], residual);
        assert_ne!(a.pair_to_group["p0"], residual);

        // With min_size 1, a.com and b.com are distinct groups.
        let b = url_domain_clusters(&corpus, &pairs, 1).unwrap();
        assert_ne!(b.pair_to_group["p2"], b.pair_to_group["p3"]);
    }

    #[test]
    fn url_domain_small_groups_merge_to_residual() {
        let docs = vec![doc("x", "https://tiny.org/1")];
        let corpus = Corpus::new(docs).unwrap();
        let pairs = vec![pair("p0", "x"), pair("p1", "x"), pair("p2", "x")];
        let a = url_domain_clusters(&corpus, &pairs, 128).unwrap();
        assert_eq!(a.group_sizes, vec![3]);
        assert_eq!(a.residual_group, Some(0));
    }

    #[test]
    fn groups_round_trip_through_jsonl() {
        let (corpus, d2c, pairs) = sized_groups(&[150, 3]);
        let a = merge_small_groups(&corpus, &d2c, &pairs, 100, ClusterMethod::EmbeddingKmeans)
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("groups.jsonl");
        save_groups(&path, &a, serde_json::json!({"k": 2})).unwrap();
        let mut loaded = load_groups(&path).unwrap();
        assert_eq!(loaded.pair_to_group, a.pair_to_group);
        assert_eq!(loaded.group_sizes, a.group_sizes);
        assert_eq!(loaded.residual_group, a.residual_group);
        assert_eq!(loaded.method, ClusterMethod::EmbeddingKmeans);
        loaded.rebuild_doc_groups(&pairs);
        assert_eq!(loaded.doc_to_group, a.doc_to_group);
    }

    #[test]
    fn ari_basics() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        let ari = adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]);
        assert!(ari < 0.1, "independent partitions should score near zero: {ari}");
    }

    #[test]
    fn embed_documents_rows_are_unit_norm_and_deterministic() {
        let docs: Vec<Document> = (0..10)
            .map(|i| Document {
                doc_id: format!("d{i}"),
                url: format!("https://s{i}.net/"),
                title: format!("title {i}"),
                content: format!("content body {i} horses"),
            })
            .collect();
        let corpus = Corpus::new(docs).unwrap();
        let params = EncoderParams::random(256, 8, 0.05, 4);
        let fcfg = FeatureConfig {
            hash_dim: 256,
            ..FeatureConfig::default()
        };
        let a = embed_documents(&corpus, &params, &fcfg, 1);
        let b = embed_documents(&corpus, &params, &fcfg, 4);
        assert_eq!(a.nrows(), 10);
        for i in 0..10 {
            let r = a.row(i);
            assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-6);
        }
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits(), "thread count changed results");
        }
    }

    #[test]
    fn duplicate_documents_embed_identically() {
        let docs = vec![
            Document {
                doc_id: "a".into(),
                url: "https://same.net/".into(),
                title: "same".into(),
                content: "same words".into(),
            },
            Document {
                doc_id: "b".into(),
                url: "https://same.net/".into(),
                title: "same".into(),
                content: "same words".into(),
            },
        ];
        let corpus = Corpus::new(docs).unwrap();
        let params = EncoderParams::random(128, 6, 0.05, 4);
        let fcfg = FeatureConfig {
            hash_dim: 128,
            ..FeatureConfig::default()
        };
        let m = embed_documents(&corpus, &params, &fcfg, 1);
        for j in 0..6 {
            assert_eq!(m[(0, j)].to_bits(), m[(1, j)].to_bits());
        }
    }
}
