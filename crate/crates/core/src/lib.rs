//! Unsupervised out-of-distribution detection by kernel density estimation
//! over per-layer channel-mean features of a neural network.
//!
//! For each hooked layer a Gaussian KDE is fitted on a random subset of the
//! in-distribution training features, with a per-sample bandwidth equal to
//! the distance to the k-th nearest reference. `k` is picked per layer to
//! best separate training features from perturbed ones. The per-layer
//! densities are fused by logistic regression into a single confidence,
//! and [`metrics`] scores the result with FPR at 95% TPR, detection error,
//! AUROC and AUPR.
//!
//! ```
//! use kde_ood::{DistanceMetric, FeatureMatrix, LayerKdeModel};
//!
//! let reference = FeatureMatrix::from_rows(&[[0.0f32], [1.0], [3.0]])?;
//! let model = LayerKdeModel::fit("conv1", reference, 1, DistanceMetric::L1)?;
//! assert_eq!(model.bandwidths(), &[1.0, 1.0, 2.0]);
//! let inside = model.score(&[1.0])?;
//! let outside = model.score(&[40.0])?;
//! assert!(inside > outside);
//! # Ok::<(), kde_ood::Error>(())
//! ```
//!
//! The guide in `book/` walks through every stage.

pub mod bandwidth;
mod codec;
pub mod error;
pub mod feature_store;
pub mod fusion;
pub mod kde;
mod matrix;
pub mod metrics;
pub mod pipeline;
pub mod synthetic;

pub use bandwidth::{knn_bandwidths, select_k, KCandidateSet, KSelectionReport, SelectionData};
pub use codec::fnv1a64;
pub use error::{Error, Result};
pub use feature_store::{
    read_feature_file, subsample, write_feature_file, DatasetManifest, DatasetRole, Layer,
    LayerFeatureSet, ReferenceSubset,
};
pub use fusion::{train_fusion, FusionModel, ScoreTable, TrainConfig};
pub use kde::{distance, gaussian_kernel, DistanceMetric, LayerKdeModel, BANDWIDTH_FLOOR};
pub use matrix::FeatureMatrix;
pub use metrics::{auroc, aupr, detection_error, evaluate, fpr_at_tpr, roc_curve, EvalReport};
pub use pipeline::{NegativeRegime, PipelineConfig, PipelineModel};
