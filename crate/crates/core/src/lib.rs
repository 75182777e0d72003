//! Ground-level/aerial contrastive pre-training toolkit.
//!
//! The crate covers the three contrastive objectives (standard, many-to-one,
//! parameterized) and their aerial augmentation, the spatial block holdout
//! protocol, a synthetic multi-view corpus generator, a small MLP training
//! stack, the long-tailed evaluation metrics and k-means++.

pub mod augment;
pub mod embed;
pub mod error;
pub mod geo;
pub mod gradcheck;
pub mod kmeans;
pub mod loss;
pub mod metrics;
pub mod split;
pub mod synth;
pub mod train;

pub use embed::{cosine_similarity_matrix, l2_normalize, softmax_nll_rows, EmbeddingBatch, SimilarityMatrix};
pub use error::{CrispError, Result};
pub use geo::{block_of, haversine_m, BlockId, GeoPoint};
pub use kmeans::{kmeans_pp, KMeansConfig, KMeansResult};
pub use loss::{
    build_positive_mask, many_to_one_crisp_loss, parameterized_crisp_loss, standard_crisp_loss, LossResult,
    LossWeight, PairedBatch, Temperature,
};
pub use metrics::{
    binned_macro_accuracy, clustering_agreement, eco_accuracy, emit_report, topk_accuracy, topk_macro_accuracy,
    ClusteringScores, MetricReport, PredictionSet, ReportFormat,
};
pub use split::{bin_by_frequency, build_split, FrequencyBin, FrequencyBins, ObservationRecord, Split, SplitManifest};
pub use synth::{corpus_stats, generate, CorpusStats, SynthConfig, SynthCorpus};
