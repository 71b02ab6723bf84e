//! Residual-view synthetic-image detection with hypernetwork-generated adapters.
//!
//! A fixed bank of high-pass kernels turns an image into five residual views
//! plus the original. A frozen vision transformer scores each view through
//! low-rank adapters that a small hypernetwork emits per view, layer and
//! position; the per-view scores are added up into one verdict.

// `!(x >= y)` is the NaN-rejecting form throughout.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod backbone;
pub mod checkpoint;
pub mod dataset;
pub mod detector;
pub mod error;
pub mod evalkit;
pub mod filterbank;
pub mod hyperlora;
pub mod imaging;
pub mod model;
pub mod nn;
pub mod objective;
pub mod optim;
pub mod tensors;
pub mod toydata;
pub mod trainer;

pub use dataset::{Dataset, LabeledSample};
pub use detector::{DetectorModel, Label, MergeMode, Verdict};
pub use error::{Error, Result};
pub use evalkit::{evaluate, MetricsReport, Perturbation, Scorer};
pub use filterbank::{make_views, FilterBank, FilterGroup, ResidualView, ViewSource};
pub use hyperlora::{HyperConfig, HyperNetwork, LoRAWeights, Site};
pub use imaging::Image;
pub use model::{HyperDetModel, ModelConfig};
pub use trainer::{train, TrainConfig};
