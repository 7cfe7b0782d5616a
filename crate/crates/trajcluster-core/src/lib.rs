//! Trajectory phenotyping for multivariate clinical time series.
//!
//! The pipeline covers cohort ingestion, physiologic preprocessing, two
//! clustering engines (recurrent representation learning and K-means under
//! dynamic time warping), silhouette-based model selection, and post-hoc
//! phenotype characterization with survival and comorbidity statistics.
//! A synthetic cohort generator with planted phenotypes provides ground
//! truth for end-to-end validation.

pub mod cluster_eval;
pub mod cohort;
pub mod crli;
pub mod dtw;
pub mod grid;
pub mod kmeans_dtw;
pub mod linalg;
pub mod outcome_stats;
pub mod preprocess;
pub mod special;
pub mod synth;

pub use grid::Grid;
