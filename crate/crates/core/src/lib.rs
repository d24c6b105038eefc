//! Heterogeneous federated LoRA fine-tuning, simulated on a frozen linear
//! classifier.
//!
//! Clients either truncate the global adapter to their own rank or keep the
//! full rank and freeze the least important rank-1 terms; the server merges
//! uploads per rank-1 index with norm-based weights and tracks smoothed
//! per-element sensitivity to rank those terms for the next round.

pub mod aggregation;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod federation;
pub mod importance;
pub mod lora;
pub mod matrix;
pub mod model;
pub mod schemes;
pub mod seed;

pub use aggregation::{
    aggregate, aggregate_adaptive, aggregate_fedavg, aggregate_zero_padding, AggregationKind,
    AggregationPolicy, StaleIndexRule,
};
pub use config::ExperimentConfig;
pub use data::{generate_synthetic, load_tsv, partition_iid, Dataset, Sample, SyntheticSpec};
pub use error::{HaflError, Result};
pub use federation::{
    evaluate_distributed_clients, run_experiment, sample_clients, Federation, FederationConfig,
    FederationData, RoundReport, Scheme,
};
pub use importance::{ImportanceTracker, ScoreList};
pub use lora::{upload_size, GlobalLora, LoraAdapter};
pub use matrix::Matrix;
pub use model::{evaluate, forward, local_train, loss_and_grads, FrozenBase, TrainingConfig};
pub use schemes::{
    apply_freezing, apply_truncation, extract_upload, make_plan, topk_indices, trained_count,
    Capability, ClientCapability, ClientPlan, PlanMode, UploadPayload,
};
