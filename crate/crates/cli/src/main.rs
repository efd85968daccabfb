//! `grouper` — pipeline CLI. Each subcommand is one stage; artifacts are
//! plain files handed between stages, so every stage can be rerun or tested
//! in isolation. All stages are pure functions of (inputs, config, seed).

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_MISSING_ARTIFACT: u8 = 3;
pub const EXIT_RUNTIME: u8 = 1;

#[derive(Debug)]
pub enum CliErrorKind {
    Config,
    MissingArtifact,
    Runtime,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: CliErrorKind,
    pub message: String,
}

pub type CliResult<T> = Result<T, CliError>;

impl CliError {
    pub fn config(message: String) -> Self {
        Self {
            kind: CliErrorKind::Config,
            message,
        }
    }

    pub fn missing_artifact(message: String) -> Self {
        Self {
            kind: CliErrorKind::MissingArtifact,
            message,
        }
    }

    pub fn runtime(message: String) -> Self {
        Self {
            kind: CliErrorKind::Runtime,
            message,
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self.kind {
            CliErrorKind::Config => EXIT_CONFIG,
            CliErrorKind::MissingArtifact => EXIT_MISSING_ARTIFACT,
            CliErrorKind::Runtime => EXIT_RUNTIME,
        }
    }

    /// One machine-parsable line for stderr.
    pub fn to_json_line(&self) -> String {
        let kind = match self.kind {
            CliErrorKind::Config => "config",
            CliErrorKind::MissingArtifact => "missing_artifact",
            CliErrorKind::Runtime => "runtime",
        };
        serde_json::json!({"kind": kind, "error": self.message}).to_string()
    }
}

impl From<grouper_core::Error> for CliError {
    fn from(e: grouper_core::Error) -> Self {
        match &e {
            grouper_core::Error::InvalidConfig(_) => CliError::config(e.to_string()),
            grouper_core::Error::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                CliError::missing_artifact(e.to_string())
            }
            _ => CliError::runtime(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(
    name = "grouper",
    version,
    about = "Group-robust contrastive training for web-anchor dense retrieval"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Global RNG seed (overrides the config file's seed).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Pipeline config file (TOML, one section per module).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Directory for output artifacts.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    /// Worker cap for the parallel stages.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PairModeArg {
    Link,
    Anchor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ClusterMethodArg {
    Embedding,
    UrlDomain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NegativesArg {
    InBatchOnly,
    Bm25,
    SelfMined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WhichArg {
    Top,
    Bottom,
    Random,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic web-graph corpus with held-out eval queries.
    Generate,
    /// Filter uninformative anchors out of an edge list.
    Filter {
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        edges: PathBuf,
        /// Stoplist file, one phrase per line (overrides the built-in list).
        #[arg(long)]
        stoplist: Option<PathBuf>,
        /// Enable the top-25% heuristic anchor-quality cut.
        #[arg(long)]
        quality_cut: bool,
    },
    /// Materialize contrastive pairs from documents and edges.
    Pairs {
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        edges: PathBuf,
        #[arg(long, value_enum)]
        mode: PairModeArg,
        #[arg(long)]
        negatives_k: Option<usize>,
    },
    /// Train the link-prediction embedding model (step A-1).
    TrainEmbedder {
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        model_lr: Option<f64>,
    },
    /// Encode all documents with a checkpoint into an embedding matrix.
    Embed {
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Cluster documents and lift pairs into groups (step A-2).
    Cluster {
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// Embedder checkpoint (required for the embedding method).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Precomputed embeddings.bin (skips re-encoding).
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = ClusterMethodArg::Embedding)]
        method: ClusterMethodArg,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        min_size: Option<usize>,
    },
    /// Train the retriever with group reweighting (step B).
    TrainRetriever {
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        groups: PathBuf,
        /// Group reweighting on or off (off reproduces the unweighted
        /// baseline).
        #[arg(long, value_enum)]
        dro: Option<OnOff>,
        #[arg(long)]
        weight_lr: Option<f64>,
        #[arg(long)]
        update_interval: Option<usize>,
        /// Experimental: per-group interval means instead of batch means.
        #[arg(long)]
        per_group_mean: bool,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        model_lr: Option<f64>,
        #[arg(long, value_enum)]
        negatives: Option<NegativesArg>,
        #[arg(long)]
        negatives_k: Option<usize>,
    },
    /// Evaluate a checkpoint with exhaustive retrieval and nDCG@10.
    Eval {
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        qrels: PathBuf,
        /// Optional group assignment for per-group slice means.
        #[arg(long)]
        groups: Option<PathBuf>,
        /// Pair list used to map judged documents to groups.
        #[arg(long)]
        pairs: Option<PathBuf>,
    },
    /// Evaluate the training-loss landscape around a checkpoint.
    Landscape {
        #[arg(long)]
        docs: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        resolution: Option<usize>,
        #[arg(long)]
        range: Option<f64>,
    },
    /// Rank groups by trained weight; report top and bottom sets.
    RankReport {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        groups: PathBuf,
        #[arg(long)]
        top_m: Option<usize>,
    },
    /// Sample pairs from top/bottom-ranked groups (or uniformly).
    Resample {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        groups: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long, value_enum)]
        which: WhichArg,
        #[arg(long)]
        budget: usize,
        #[arg(long)]
        top_m: Option<usize>,
    },
    /// Best-effort conversion of a BEIR-format directory into the local
    /// formats.
    ConvertBeir {
        #[arg(long)]
        input_dir: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.to_json_line());
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut cfg = match &cli.config {
        Some(path) => config::PipelineConfig::load(path)?,
        None => config::PipelineConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    std::fs::create_dir_all(&cli.out_dir)
        .map_err(|e| CliError::runtime(format!("creating {}: {e}", cli.out_dir.display())))?;

    let ctx = commands::Context {
        out_dir: cli.out_dir.clone(),
        threads: cli.threads,
    };

    match cli.command {
        Command::Generate => commands::generate(&ctx, &cfg),
        Command::Filter {
            docs,
            edges,
            stoplist,
            quality_cut,
        } => commands::filter(&ctx, &mut cfg, &docs, &edges, stoplist.as_deref(), quality_cut),
        Command::Pairs {
            docs,
            edges,
            mode,
            negatives_k,
        } => {
            if let Some(k) = negatives_k {
                cfg.corpus.negatives_k = k;
            }
            commands::pairs(&ctx, &cfg, &docs, &edges, mode)
        }
        Command::TrainEmbedder {
            docs,
            pairs,
            epochs,
            batch_size,
            model_lr,
        } => {
            if let Some(v) = epochs {
                cfg.trainer.embedder_epochs = v;
            }
            if let Some(v) = batch_size {
                cfg.trainer.embedder_batch_size = v;
            }
            if let Some(v) = model_lr {
                cfg.trainer.embedder_model_lr = v;
            }
            commands::train_embedder(&ctx, &cfg, &docs, &pairs)
        }
        Command::Embed { docs, checkpoint } => commands::embed(&ctx, &cfg, &docs, &checkpoint),
        Command::Cluster {
            docs,
            pairs,
            checkpoint,
            embeddings,
            method,
            k,
            min_size,
        } => {
            if let Some(v) = k {
                cfg.clusterer.k = v;
            }
            if let Some(v) = min_size {
                cfg.clusterer.min_size = v;
            }
            commands::cluster(
                &ctx,
                &cfg,
                &docs,
                &pairs,
                checkpoint.as_deref(),
                embeddings.as_deref(),
                method,
            )
        }
        Command::TrainRetriever {
            docs,
            pairs,
            groups,
            dro,
            weight_lr,
            update_interval,
            per_group_mean,
            epochs,
            batch_size,
            model_lr,
            negatives,
            negatives_k,
        } => {
            if let Some(v) = dro {
                cfg.dro.enabled = v == OnOff::On;
            }
            if let Some(v) = weight_lr {
                cfg.dro.weight_lr = v;
            }
            if let Some(v) = update_interval {
                cfg.dro.update_interval = v;
            }
            if per_group_mean {
                cfg.dro.per_group_mean = true;
            }
            if let Some(v) = epochs {
                cfg.trainer.epochs = v;
            }
            if let Some(v) = batch_size {
                cfg.trainer.batch_size = v;
            }
            if let Some(v) = model_lr {
                cfg.trainer.model_lr = v;
            }
            if let Some(v) = negatives {
                cfg.trainer.negatives = match v {
                    NegativesArg::InBatchOnly => grouper_core::trainer::NegativeMode::InBatchOnly,
                    NegativesArg::Bm25 => grouper_core::trainer::NegativeMode::Bm25,
                    NegativesArg::SelfMined => grouper_core::trainer::NegativeMode::SelfMined,
                };
            }
            if let Some(v) = negatives_k {
                cfg.trainer.negatives_k = v;
            }
            cfg.validate()?;
            commands::train_retriever(&ctx, &cfg, &docs, &pairs, &groups)
        }
        Command::Eval {
            docs,
            checkpoint,
            queries,
            qrels,
            groups,
            pairs,
        } => commands::eval(
            &ctx,
            &cfg,
            &docs,
            &checkpoint,
            &queries,
            &qrels,
            groups.as_deref(),
            pairs.as_deref(),
        ),
        Command::Landscape {
            docs,
            pairs,
            checkpoint,
            resolution,
            range,
        } => {
            if let Some(v) = resolution {
                cfg.analysis.resolution = v;
            }
            if let Some(v) = range {
                cfg.analysis.range = v;
            }
            cfg.validate()?;
            commands::landscape(&ctx, &cfg, &docs, &pairs, &checkpoint)
        }
        Command::RankReport {
            weights,
            groups,
            top_m,
        } => {
            if let Some(v) = top_m {
                cfg.analysis.top_m = v;
            }
            commands::rank_report(&ctx, &cfg, &weights, &groups)
        }
        Command::Resample {
            pairs,
            groups,
            weights,
            which,
            budget,
            top_m,
        } => {
            if let Some(v) = top_m {
                cfg.analysis.top_m = v;
            }
            commands::resample(&ctx, &cfg, &pairs, &groups, &weights, which, budget)
        }
        Command::ConvertBeir { input_dir } => commands::convert_beir(&ctx, &cfg, &input_dir),
    }
}
