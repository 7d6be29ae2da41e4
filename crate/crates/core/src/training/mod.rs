//! Training built from ordinary graph pieces: optimizers, sharded
//! embeddings, sampled softmax and replica coordination.

pub mod coord;
pub mod embedding;
pub mod optim;
pub mod sampled;

pub use coord::{build_replicated, train, ParamInit, ParamSpec, ReplicaSpec, Replicated, SyncConfig, SyncMode, TrainStats};
pub use embedding::{build_sharded_embedding, ShardedEmbedding};
pub use optim::{apply_gradients, OptimizerSpec};
pub use sampled::{build_full_softmax, build_sampled_softmax, build_sampled_softmax_with, FullSoftmax, SampledSoftmax, SoftmaxCost};

/// `t_b / t_0 × n_base / (n_base + b)`: step time with `b` backup workers
/// relative to none, discounted by the extra workers used.
pub fn normalized_speedup(t_b: f64, t_0: f64, b: usize, n_base: usize) -> f64 {
    t_b / t_0 * n_base as f64 / (n_base + b) as f64
}

