//! Stochastic channel-based federated learning (SCBF) with optional APoZ
//! neuron pruning, plus a federated-averaging baseline, over a small
//! hand-written MLP.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`nn`]: dense matrices, the MLP, backprop and SGD.
//! - [`channel`]: channel norms, the quantile threshold and sparse updates.
//! - [`pruning`]: APoZ statistics and structural neuron removal.
//! - [`federation`]: rounds, aggregation, the wire codec and loopback transport.
//! - [`metrics`], [`data`], [`config`], [`cli`]: evaluation, datasets and the
//!   command-line front end.

pub mod channel;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod metrics;
pub mod nn;
pub mod pruning;
pub mod tensor;

pub use channel::{
    compute_channel_norms, quantile_threshold, select_channels, upload_fraction, ChannelNormTensor,
    SelectionConfig, SelectionMode, SparseEntry, SparseUpdate,
};
pub use data::{generate_synthetic, load_csv, split_and_partition, write_csv, Dataset, PartitionedDataset};
pub use error::{Error, Result};
pub use federation::{
    run_experiment, server_apply, Algorithm, ExperimentResult, FederationConfig, RoundReport, ServerState,
    Transport,
};
pub use metrics::{auc_pr, auc_roc, ScoredLabels};
pub use nn::{GradientSet, MlpConfig, MlpModel};
pub use pruning::{apply_prune, compute_apoz, plan_prune, ApozReport, PruneConfig, PruneDirective};
pub use tensor::DenseMatrix;
