//! Group-robust contrastive training for web-anchor dense retrieval.
//!
//! The pipeline has two steps. Step A trains a link-prediction embedding
//! model on web-graph edges and clusters documents with mini-batch k-means.
//! Step B trains a dense retriever on anchor-document pairs while a
//! group-DRO weight tracker reweights the clustered groups online, pushing
//! the model toward the groups it finds hardest.
//!
//! Modules follow the pipeline stages:
//!
//! * [`corpus`] — documents, anchor edges, contrastive pairs, synthetic graphs
//! * [`encoder`] — hashed bag-of-words two-tower encoder and InfoNCE loss
//! * [`clusterer`] — mini-batch k-means, the MinSize merge rule, URL grouping
//! * [`dro`] — group weight state: size factors, updates, multipliers
//! * [`trainer`] — step A / step B training loops and negative mining
//! * [`evalkit`] — exhaustive retrieval and nDCG@10 evaluation
//! * [`analysis`] — weight-rank reports, resampling, loss landscapes

pub mod analysis;
pub mod clusterer;
pub mod corpus;
pub mod dro;
pub mod encoder;
pub mod error;
pub mod evalkit;
pub mod text;
pub mod trainer;

pub(crate) mod par;

pub use error::{Error, Result};
