//! Distributed skip-gram training of graph embeddings.
//!
//! The pipeline is decoupled into stages that each live in their own module:
//!
//! - [`graph`]: immutable CSR adjacency over typed vertices, loaded from edge lists.
//! - [`walk`]: random walks, windowed (input, context) pairs, non-edge noise and row sharding.
//! - [`embed`]: embedding tables, pairwise scoring, the sigmoid NCE loss and its gradients.
//! - [`server`]: per-vertex-type parameter servers, the wire protocol and the partition planner.
//! - [`worker`]: the fetch / train locally / overwrite loop run by every worker.
//! - [`eval`]: link-prediction accuracy on a held-out split.
//! - [`driver`]: orchestration of a whole local cluster run.

pub mod driver;
pub mod embed;
pub mod eval;
pub mod graph;
pub mod seed;
pub mod server;
pub mod synth;
pub mod walk;
pub mod worker;

pub use embed::{EmbeddingTable, Metric, TrainConfig};
pub use eval::{AccuracyReport, EvalSplit};
pub use graph::{Graph, VertexRef, VertexType};
pub use server::plan::{PartitionPlan, Strategy};
pub use server::routes::RouteTable;
pub use walk::{TrainingRow, TrainingShard, WalkParams};
pub use worker::{LocalIndexMap, WorkerConfig, WorkerReport};
