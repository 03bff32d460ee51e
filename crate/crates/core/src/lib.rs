pub mod data;
pub mod ensemble;
pub mod error;
pub mod metrics;
pub mod network;
pub mod pool_store;
pub mod pruner;
pub mod tensor;

pub use data::{Dataset, SplitSpec};
pub use ensemble::{EliminationTrace, Ensemble, ModelPool, VoteMatrix};
pub use error::{Error, Result};
pub use metrics::{Clock, ModelMetrics, MonotonicClock, ScriptedClock};
pub use network::{ReluNetwork, TrainConfig};
pub use pool_store::{ModelBundle, StoredModel};
pub use pruner::{PruneConfig, PrunedModel};
pub use tensor::{DenseMatrix, SparseMatrix};
