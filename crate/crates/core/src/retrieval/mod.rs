//! Exact cosine retrieval and Recall@K evaluation.

mod evaluate;
mod index;
mod metrics;

pub use evaluate::{combine_features, combine_queries, evaluate, EvalOptions};
pub use index::{build_index, GalleryIndex, QueryResult};
pub use metrics::{
    recall_at_k, recall_subset_at_k, MetricsReport, Protocol, FASHIONIQ_CATEGORIES, SUBSET_KS,
};
