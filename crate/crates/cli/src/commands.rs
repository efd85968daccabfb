//! One function per pipeline stage. Stages read artifacts, compute, and
//! write declared output files into the run's out-dir, plus the resolved
//! config.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use grouper_core::analysis;
use grouper_core::clusterer::{self, ClusterMethod, GroupAssignment};
use grouper_core::corpus::{self, AnchorFilterConfig, Corpus, SyntheticSpec};
use grouper_core::dro::{init_weights, WeightState};
use grouper_core::encoder::{load_checkpoint, save_checkpoint};
use grouper_core::evalkit::{self, EvalSet};
use grouper_core::trainer;
use ndarray_io::{load_embeddings, save_embeddings};
use rand::SeedableRng;

use crate::config::PipelineConfig;
use crate::{ClusterMethodArg, CliError, CliResult, PairModeArg, WhichArg};

pub struct Context {
    pub out_dir: PathBuf,
    pub threads: usize,
}

impl Context {
    fn artifact(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

fn require_input(path: &Path) -> CliResult<()> {
    if !path.exists() {
        return Err(CliError::missing_artifact(format!(
            "required input {} does not exist",
            path.display()
        )));
    }
    Ok(())
}

fn load_corpus_checked(docs: &Path) -> CliResult<Corpus> {
    require_input(docs)?;
    Ok(Corpus::new(corpus::load_documents(docs)?)?)
}

// ---------------------------------------------------------------------------
// generate
// ---------------------------------------------------------------------------

pub fn generate(ctx: &Context, cfg: &PipelineConfig) -> CliResult<()> {
    let spec = SyntheticSpec {
        num_topics: cfg.corpus.num_topics,
        docs_per_topic: cfg.corpus.docs_per_topic.clone(),
        intra_topic_link_prob: cfg.corpus.intra_link_prob,
        cross_topic_link_prob: cfg.corpus.cross_link_prob,
        hard_topic_ids: cfg.corpus.hard_topics.iter().copied().collect(),
        vocab_size: cfg.corpus.vocab_size,
        seed: cfg.seed,
    };
    let synth = corpus::generate_synthetic(&spec)?;
    let (train_edges, eval_edges) = corpus::split_edges(&synth.edges, cfg.corpus.eval_fraction, cfg.seed);

    corpus::save_documents(&ctx.artifact("docs.jsonl"), &synth.docs)?;
    corpus::save_edges(&ctx.artifact("edges.jsonl"), &train_edges)?;

    // Gold topic labels, for clustering-quality checks.
    {
        let file = std::fs::File::create(ctx.artifact("topics.jsonl"))
            .map_err(grouper_core::Error::from)?;
        let mut w = std::io::BufWriter::new(file);
        for (doc, &topic) in synth.docs.iter().zip(&synth.topic_of_doc) {
            let line = serde_json::json!({"doc_id": doc.doc_id, "topic": topic});
            writeln!(w, "{line}").map_err(grouper_core::Error::from)?;
        }
        w.flush().map_err(grouper_core::Error::from)?;
    }

    // Held-out anchors become eval queries after the same anchor filtering
    // the training edges will get.
    let corpus_idx = Corpus::new(synth.docs.clone())?;
    let filter_cfg = anchor_filter_config(cfg, None, false)?;
    let kept = corpus::filter_anchors(&corpus_idx, &eval_edges, &filter_cfg);
    let mut queries = Vec::with_capacity(kept.len());
    let mut qrels = std::collections::BTreeMap::new();
    for (i, edge) in kept.iter().enumerate() {
        let query_id = format!("q{i:05}");
        queries.push(evalkit::EvalQuery {
            query_id: query_id.clone(),
            text: edge.anchor_text.clone(),
        });
        qrels.insert(
            query_id,
            [(edge.target_doc_id.clone(), 1u32)].into_iter().collect(),
        );
    }
    evalkit::save_queries(&ctx.artifact("queries.jsonl"), &queries)?;
    evalkit::save_qrels(&ctx.artifact("qrels.tsv"), &qrels)?;

    cfg.write_resolved(&ctx.out_dir)?;
    log::info!(
        "generated {} docs, {} train edges, {} eval queries",
        synth.docs.len(),
        train_edges.len(),
        queries.len()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// filter
// ---------------------------------------------------------------------------

fn anchor_filter_config(
    cfg: &PipelineConfig,
    stoplist: Option<&Path>,
    quality_cut_flag: bool,
) -> CliResult<AnchorFilterConfig> {
    let mut filter_cfg = AnchorFilterConfig {
        min_tokens: cfg.corpus.min_anchor_tokens,
        ..AnchorFilterConfig::default()
    };
    let stoplist_path = stoplist
        .map(Path::to_path_buf)
        .or_else(|| cfg.corpus.stoplist_file.as_ref().map(PathBuf::from));
    if let Some(path) = stoplist_path {
        require_input(&path)?;
        filter_cfg = filter_cfg.with_stoplist_file(&path)?;
    }
    if quality_cut_flag {
        filter_cfg.quality_keep_fraction = Some(cfg.corpus.quality_cut.unwrap_or(0.25));
    } else {
        filter_cfg.quality_keep_fraction = cfg.corpus.quality_cut;
    }
    Ok(filter_cfg)
}

pub fn filter(
    ctx: &Context,
    cfg: &mut PipelineConfig,
    docs: &Path,
    edges: &Path,
    stoplist: Option<&Path>,
    quality_cut: bool,
) -> CliResult<()> {
    require_input(edges)?;
    let corpus = load_corpus_checked(docs)?;
    let edge_list = corpus::load_edges(edges)?;
    if quality_cut && cfg.corpus.quality_cut.is_none() {
        cfg.corpus.quality_cut = Some(0.25);
    }
    let filter_cfg = anchor_filter_config(cfg, stoplist, quality_cut)?;
    let kept = corpus::filter_anchors(&corpus, &edge_list, &filter_cfg);
    corpus::save_edges(&ctx.artifact("edges_filtered.jsonl"), &kept)?;
    cfg.write_resolved(&ctx.out_dir)?;
    log::info!("kept {} of {} edges", kept.len(), edge_list.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// pairs
// ---------------------------------------------------------------------------

pub fn pairs(
    ctx: &Context,
    cfg: &PipelineConfig,
    docs: &Path,
    edges: &Path,
    mode: PairModeArg,
) -> CliResult<()> {
    require_input(edges)?;
    let corpus = load_corpus_checked(docs)?;
    let edge_list = corpus::load_edges(edges)?;
    let pairs = match mode {
        PairModeArg::Link => {
            corpus::make_link_pairs(&corpus, &edge_list, cfg.corpus.negatives_k, cfg.seed)?
        }
        PairModeArg::Anchor => {
            corpus::make_anchor_pairs(&corpus, &edge_list, cfg.corpus.negatives_k, cfg.seed)?
        }
    };
    corpus::save_pairs(&ctx.artifact("pairs.jsonl"), &pairs)?;
    cfg.write_resolved(&ctx.out_dir)?;
    log::info!("materialized {} pairs", pairs.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// train-embedder / embed
// ---------------------------------------------------------------------------

pub fn train_embedder(
    ctx: &Context,
    cfg: &PipelineConfig,
    docs: &Path,
    pairs_path: &Path,
) -> CliResult<()> {
    require_input(pairs_path)?;
    let corpus = load_corpus_checked(docs)?;
    let pairs = corpus::load_pairs(pairs_path)?;
    let fcfg = cfg.encoder.feature_config();
    let tcfg = cfg.trainer.embedder_config(cfg.seed);
    let (params, log) = trainer::train_embedder(
        &pairs,
        &corpus,
        &tcfg,
        &fcfg,
        cfg.encoder.embed_dim,
        cfg.encoder.temperature,
    )?;
    save_checkpoint(&ctx.artifact("embedder.ckpt"), &params, &fcfg)?;
    log.save_jsonl(&ctx.artifact("train_log.jsonl"))?;
    cfg.write_resolved(&ctx.out_dir)?;
    Ok(())
}

pub fn embed(ctx: &Context, cfg: &PipelineConfig, docs: &Path, checkpoint: &Path) -> CliResult<()> {
    require_input(checkpoint)?;
    let corpus = load_corpus_checked(docs)?;
    let (params, fcfg) = load_checkpoint(checkpoint)?;
    let matrix = clusterer::embed_documents(&corpus, &params, &fcfg, ctx.threads);
    save_embeddings(&ctx.artifact("embeddings.bin"), &matrix)?;
    cfg.write_resolved(&ctx.out_dir)?;
    log::info!("embedded {} documents at dim {}", matrix.nrows(), matrix.ncols());
    Ok(())
}

/// Raw embedding-matrix file: magic, rows, cols, little-endian f64
/// row-major.
mod ndarray_io {
    use super::*;
    use ndarray::Array2;

    const MAGIC: &[u8; 8] = b"EMBMTX01";

    pub fn save_embeddings(path: &Path, matrix: &Array2<f64>) -> CliResult<()> {
        let file = std::fs::File::create(path).map_err(grouper_core::Error::from)?;
        let mut w = std::io::BufWriter::new(file);
        let put = |w: &mut std::io::BufWriter<std::fs::File>, bytes: &[u8]| {
            w.write_all(bytes).map_err(grouper_core::Error::from)
        };
        put(&mut w, MAGIC)?;
        put(&mut w, &(matrix.nrows() as u64).to_le_bytes())?;
        put(&mut w, &(matrix.ncols() as u64).to_le_bytes())?;
        for v in matrix.iter() {
            put(&mut w, &v.to_le_bytes())?;
        }
        w.flush().map_err(grouper_core::Error::from)?;
        Ok(())
    }

    pub fn load_embeddings(path: &Path) -> CliResult<Array2<f64>> {
        let file = std::fs::File::open(path).map_err(grouper_core::Error::from)?;
        let mut r = std::io::BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(grouper_core::Error::from)?;
        if &magic != MAGIC {
            return Err(CliError::runtime(format!(
                "{}: not an embeddings file",
                path.display()
            )));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8).map_err(grouper_core::Error::from)?;
        let rows = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8).map_err(grouper_core::Error::from)?;
        let cols = u64::from_le_bytes(b8) as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            r.read_exact(&mut b8).map_err(grouper_core::Error::from)?;
            data.push(f64::from_le_bytes(b8));
        }
        Array2::from_shape_vec((rows, cols), data)
            .map_err(|e| CliError::runtime(format!("{}: {e}", path.display())))
    }
}

// ---------------------------------------------------------------------------
// cluster
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
pub fn cluster(
    ctx: &Context,
    cfg: &PipelineConfig,
    docs: &Path,
    pairs_path: &Path,
    checkpoint: Option<&Path>,
    embeddings: Option<&Path>,
    method: ClusterMethodArg,
) -> CliResult<()> {
    require_input(pairs_path)?;
    let corpus = load_corpus_checked(docs)?;
    let pairs = corpus::load_pairs(pairs_path)?;

    let assignment = match method {
        ClusterMethodArg::UrlDomain => {
            clusterer::url_domain_clusters(&corpus, &pairs, cfg.clusterer.min_size)?
        }
        ClusterMethodArg::Embedding => {
            let matrix = match embeddings {
                Some(path) => {
                    require_input(path)?;
                    load_embeddings(path)?
                }
                None => {
                    let ckpt = checkpoint.ok_or_else(|| {
                        CliError::missing_artifact(
                            "embedding clustering needs --checkpoint (or --embeddings)".into(),
                        )
                    })?;
                    require_input(ckpt)?;
                    let (params, fcfg) = load_checkpoint(ckpt)?;
                    clusterer::embed_documents(&corpus, &params, &fcfg, ctx.threads)
                }
            };
            let kcfg = cfg.clusterer.kmeans_config(cfg.seed);
            let fit = clusterer::minibatch_kmeans(&matrix, &kcfg)?;
            clusterer::merge_small_groups(
                &corpus,
                &fit.doc_to_cluster,
                &pairs,
                cfg.clusterer.min_size,
                ClusterMethod::EmbeddingKmeans,
            )?
        }
    };
    let config_json = serde_json::json!({
        "k": cfg.clusterer.k,
        "batch_size": cfg.clusterer.batch_size,
        "max_iters": cfg.clusterer.max_iters,
        "min_size": cfg.clusterer.min_size,
        "seed": cfg.seed,
    });
    clusterer::save_groups(&ctx.artifact("groups.jsonl"), &assignment, config_json)?;
    cfg.write_resolved(&ctx.out_dir)?;
    log::info!(
        "{} weighted groups, residual {}",
        assignment.weighted_group_sizes().len(),
        assignment
            .residual_group
            .map(|r| assignment.group_sizes[r].to_string())
            .unwrap_or_else(|| "absent".into())
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// train-retriever
// ---------------------------------------------------------------------------

pub fn train_retriever(
    ctx: &Context,
    cfg: &PipelineConfig,
    docs: &Path,
    pairs_path: &Path,
    groups: &Path,
) -> CliResult<()> {
    require_input(pairs_path)?;
    require_input(groups)?;
    let corpus = load_corpus_checked(docs)?;
    let pairs = corpus::load_pairs(pairs_path)?;
    let assignment = clusterer::load_groups(groups)?;
    let fcfg = cfg.encoder.feature_config();
    let tcfg = cfg.trainer.retriever_config(cfg.seed, cfg.dro.enabled);

    let weighted_sizes = assignment.weighted_group_sizes();
    let state = if weighted_sizes.is_empty() {
        None
    } else {
        let mut state = init_weights(
            &weighted_sizes,
            cfg.dro.weight_lr,
            cfg.dro.update_interval,
        )?;
        state.per_group_mean = cfg.dro.per_group_mean;
        Some(state)
    };

    let (params, log, state) = trainer::train_retriever(
        &pairs,
        &corpus,
        &assignment,
        &tcfg,
        &fcfg,
        cfg.encoder.embed_dim,
        cfg.encoder.temperature,
        state,
        ctx.threads,
    )?;
    save_checkpoint(&ctx.artifact("retriever.ckpt"), &params, &fcfg)?;
    log.save_jsonl(&ctx.artifact("train_log.jsonl"))?;
    if let Some(state) = &state {
        state.save_json(&ctx.artifact("weights.json"))?;
        state.write_trajectory_csv(&ctx.artifact("weights_trajectory.csv"))?;
    }
    cfg.write_resolved(&ctx.out_dir)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
pub fn eval(
    ctx: &Context,
    cfg: &PipelineConfig,
    docs: &Path,
    checkpoint: &Path,
    queries: &Path,
    qrels: &Path,
    groups: Option<&Path>,
    pairs_path: Option<&Path>,
) -> CliResult<()> {
    require_input(checkpoint)?;
    require_input(queries)?;
    require_input(qrels)?;
    let corpus = load_corpus_checked(docs)?;
    let (params, fcfg) = load_checkpoint(checkpoint)?;
    let eval_set = EvalSet {
        queries: evalkit::load_queries(queries)?,
        qrels: evalkit::load_qrels(qrels)?,
    };
    let doc_to_group = match (groups, pairs_path) {
        (Some(g), Some(p)) => {
            require_input(g)?;
            require_input(p)?;
            let mut assignment = clusterer::load_groups(g)?;
            assignment.rebuild_doc_groups(&corpus::load_pairs(p)?);
            Some(assignment.doc_to_group)
        }
        (Some(_), None) => {
            return Err(CliError::missing_artifact(
                "--groups needs --pairs to map documents to groups".into(),
            ))
        }
        _ => None,
    };
    let run = evalkit::evaluate(
        &params,
        &fcfg,
        &corpus,
        &eval_set,
        doc_to_group.as_ref(),
        ctx.threads,
    )?;
    run.save_json(&ctx.artifact("evalrun.json"))?;
    cfg.write_resolved(&ctx.out_dir)?;
    println!("mean_ndcg10={}", run.mean_ndcg10);
    Ok(())
}

// ---------------------------------------------------------------------------
// landscape
// ---------------------------------------------------------------------------

pub fn landscape(
    ctx: &Context,
    cfg: &PipelineConfig,
    docs: &Path,
    pairs_path: &Path,
    checkpoint: &Path,
) -> CliResult<()> {
    require_input(pairs_path)?;
    require_input(checkpoint)?;
    let corpus = load_corpus_checked(docs)?;
    let pairs = corpus::load_pairs(pairs_path)?;
    let (params, fcfg) = load_checkpoint(checkpoint)?;

    // Fixed seeded evaluation batch.
    let sample_size = cfg.analysis.landscape_batch.min(pairs.len());
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(cfg.seed ^ 0x1a5d);
    let mut picks = grouper_core::text::sample_distinct(&mut rng, pairs.len(), sample_size);
    picks.sort_unstable();
    let sampled: Vec<_> = picks.into_iter().map(|i| pairs[i].clone()).collect();
    let batch = trainer::featurize_batch(&sampled, &corpus, &fcfg)?;

    let grid = analysis::loss_landscape(
        &params,
        &batch,
        cfg.analysis.resolution,
        cfg.analysis.range,
        cfg.seed,
        ctx.threads,
    )?;
    grid.save_csv(&ctx.artifact("landscape.csv"))?;
    cfg.write_resolved(&ctx.out_dir)?;
    println!(
        "center_loss={} flat_region_area={}",
        grid.center(),
        analysis::flat_region_area(&grid, cfg.analysis.flat_threshold)
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// rank-report / resample
// ---------------------------------------------------------------------------

fn load_state_and_groups(
    weights: &Path,
    groups: &Path,
) -> CliResult<(WeightState, GroupAssignment)> {
    require_input(weights)?;
    require_input(groups)?;
    Ok((WeightState::load_json(weights)?, clusterer::load_groups(groups)?))
}

pub fn rank_report(
    ctx: &Context,
    cfg: &PipelineConfig,
    weights: &Path,
    groups: &Path,
) -> CliResult<()> {
    let (state, assignment) = load_state_and_groups(weights, groups)?;
    let report = analysis::group_rank_report(&state, &assignment, cfg.analysis.top_m)?;
    report.save_json(&ctx.artifact("rank_report.json"))?;
    cfg.write_resolved(&ctx.out_dir)?;
    Ok(())
}

pub fn resample(
    ctx: &Context,
    cfg: &PipelineConfig,
    pairs_path: &Path,
    groups: &Path,
    weights: &Path,
    which: WhichArg,
    budget: usize,
) -> CliResult<()> {
    require_input(pairs_path)?;
    let (state, assignment) = load_state_and_groups(weights, groups)?;
    let pairs = corpus::load_pairs(pairs_path)?;
    let report = analysis::group_rank_report(&state, &assignment, cfg.analysis.top_m)?;
    let which = match which {
        WhichArg::Top => analysis::ResampleWhich::Top,
        WhichArg::Bottom => analysis::ResampleWhich::Bottom,
        WhichArg::Random => analysis::ResampleWhich::Random,
    };
    let sampled = analysis::resample_by_rank(&pairs, &assignment, &report, which, budget, cfg.seed)?;
    corpus::save_pairs(&ctx.artifact("resampled_pairs.jsonl"), &sampled)?;
    cfg.write_resolved(&ctx.out_dir)?;
    log::info!("sampled {} pairs", sampled.len());
    Ok(())
}

// ---------------------------------------------------------------------------
// convert-beir
// ---------------------------------------------------------------------------

/// Best-effort adapter from a BEIR-format directory (`corpus.jsonl`,
/// `queries.jsonl`, `qrels/test.tsv` or `qrels.tsv`) into the local
/// formats.
pub fn convert_beir(ctx: &Context, cfg: &PipelineConfig, input_dir: &Path) -> CliResult<()> {
    use std::io::BufRead;

    let corpus_path = input_dir.join("corpus.jsonl");
    let queries_path = input_dir.join("queries.jsonl");
    require_input(&corpus_path)?;
    require_input(&queries_path)?;
    let qrels_path = ["qrels/test.tsv", "qrels.tsv", "qrels/dev.tsv"]
        .iter()
        .map(|p| input_dir.join(p))
        .find(|p| p.exists())
        .ok_or_else(|| {
            CliError::missing_artifact(format!(
                "no qrels file under {} (tried qrels/test.tsv, qrels.tsv, qrels/dev.tsv)",
                input_dir.display()
            ))
        })?;

    let read_lines = |path: &Path| -> CliResult<Vec<serde_json::Value>> {
        let file = std::fs::File::open(path).map_err(grouper_core::Error::from)?;
        let mut out = Vec::new();
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(grouper_core::Error::from)?;
            if line.trim().is_empty() {
                continue;
            }
            let v: serde_json::Value = serde_json::from_str(&line).map_err(|e| {
                CliError::runtime(format!("{}:{}: {e}", path.display(), lineno + 1))
            })?;
            out.push(v);
        }
        Ok(out)
    };
    let text_of = |v: &serde_json::Value, keys: &[&str]| -> String {
        keys.iter()
            .find_map(|k| v.get(*k).and_then(|x| x.as_str()))
            .unwrap_or("")
            .to_string()
    };

    let docs: Vec<corpus::Document> = read_lines(&corpus_path)?
        .into_iter()
        .map(|v| corpus::Document {
            doc_id: text_of(&v, &["_id", "doc_id", "id"]),
            url: v
                .get("metadata")
                .and_then(|m| m.get("url"))
                .and_then(|u| u.as_str())
                .unwrap_or("")
                .to_string(),
            title: text_of(&v, &["title"]),
            content: text_of(&v, &["text", "content", "body"]),
        })
        .collect();
    let queries: Vec<evalkit::EvalQuery> = read_lines(&queries_path)?
        .into_iter()
        .map(|v| evalkit::EvalQuery {
            query_id: text_of(&v, &["_id", "query_id", "id"]),
            text: text_of(&v, &["text", "query"]),
        })
        .collect();

    let mut qrels: std::collections::BTreeMap<String, std::collections::BTreeMap<String, u32>> =
        Default::default();
    {
        let file = std::fs::File::open(&qrels_path).map_err(grouper_core::Error::from)?;
        for (lineno, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line.map_err(grouper_core::Error::from)?;
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 3 {
                continue;
            }
            // Skip the conventional header row.
            if lineno == 0 && fields[2].parse::<u32>().is_err() {
                continue;
            }
            let rel: u32 = fields[fields.len() - 1].trim().parse().unwrap_or(0);
            qrels
                .entry(fields[0].to_string())
                .or_default()
                .insert(fields[1].to_string(), rel);
        }
    }

    corpus::save_documents(&ctx.artifact("docs.jsonl"), &docs)?;
    evalkit::save_queries(&ctx.artifact("queries.jsonl"), &queries)?;
    evalkit::save_qrels(&ctx.artifact("qrels.tsv"), &qrels)?;
    cfg.write_resolved(&ctx.out_dir)?;
    log::info!(
        "converted {} docs, {} queries, {} judged queries",
        docs.len(),
        queries.len(),
        qrels.len()
    );
    Ok(())
}

