//! Progressive metric learning: a generalized batch-hard triplet loss whose
//! hardness is set by order-statistic ranks `(k, p)`, combined with
//! cross-entropy, and scheduled over training by Gaussian-process Bayesian
//! optimization with an explore / restore / exploit loop.
//!
//! The crate also carries the desk-scale pieces needed to exercise that loop
//! end to end: a P×K identity sampler, a small two-head embedding model with
//! Adam, a synthetic identity-cluster generator, and retrieval metrics
//! (CMC, mAP) with PCA post-processing.

pub mod batch;
pub mod bayes;
pub mod data;
pub mod error;
pub mod eval;
pub mod loss;
pub mod model;
pub mod optim;
pub mod params;
pub mod sampler;
pub mod trainer;
pub mod tune;

pub use batch::{
    pairwise_distances, pairwise_distances_with, DistanceKind, DistanceMatrix, EmbeddingBatch,
    MetricConfig,
};
pub use data::{generate, split, LabeledDataset, SplitMode, SplitTag, SynthSpec};
pub use error::{PlaError, Result};
pub use eval::{evaluate, pca_reduce, Pca, QueryGallerySplit, RetrievalMetrics};
pub use loss::{
    batch_hard_loss, composite_loss, composite_loss_grad, cross_entropy_loss, gbh_loss, gbh_terms,
    lmnn_loss, CompositeGradient, LossBreakdown,
};
pub use model::{Checkpoint, EmbeddingHead, ForwardPass, ModelShape, ToyModel};
pub use optim::{lr_schedule, AdamState, OptimizerConfig};
pub use params::{HyperBox, HyperParams, Interval};
pub use sampler::{BatchSpec, PkSampler};
pub use trainer::{
    explore, init_checkpoint, run_pla, train_epochs, train_fixed, EpochLoss, Objective, PlaConfig,
    ReExplorePolicy, RunAborted, RunOutcome, RunReport, TrainMode, TrainSet,
};
pub use tune::{
    quadratic_minimum, quadratic_objective, trace_csv, tune_demo, TraceEntry, TuneSettings,
};
