//! k-means, optimal cluster-to-class matching and the clustering-accuracy
//! evaluation protocols.

pub mod hungarian;
pub mod kmeans;
pub mod metrics;

pub use hungarian::{assignment_cost, hungarian};
pub use kmeans::{kmeans, kmeans_pp_init, lloyd, KMeansOptions, KMeansResult};
pub use metrics::{
    clustering_accuracy, evaluate, score_clusters, ClusterAccuracy, EvalOptions, MetricsReport,
    PermutationScope, Protocol, SplitMode, SplitSpec,
};
