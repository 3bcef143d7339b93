//! Weak-supervision mask pipeline.
//!
//! Activation tensors exported from a pre-trained network are fused into a
//! foreground prior ([`prior_fusion`]), smoothed by a fully connected CRF
//! ([`dense_crf`]) and expanded into diverse candidate masks
//! ([`diverse_mbest`]) for human selection. [`weak_loss`] holds the
//! tag- and mask-supervised losses with analytic gradients and
//! [`seg_metrics`] the intersection-over-union evaluation.

pub mod config;
pub mod dense_crf;
pub mod diverse_mbest;
pub mod gradcheck;
pub mod manifest;
pub mod par;
pub mod prior_fusion;
pub mod seg_metrics;
pub mod tensor_store;
pub mod weak_loss;

pub use dense_crf::{BeliefField, PairwiseConfig, UnaryField};
pub use prior_fusion::HeatMap;
pub use tensor_store::{LabelMask, RgbImage, Tensor, IGNORE_LABEL};
