//! Latency-aware depth compression for sequential CNNs.
//!
//! The crate has two halves. The planner (`cost`, `dp`) selects which
//! activation layers to keep and where to cut the network into merge
//! segments under a latency budget, using exact dynamic programming over
//! per-block latency and importance tables. The merge engine (`merge`)
//! executes a plan numerically: it folds batch norm, composes consecutive
//! convolution kernels into one, fuses residual adds, reorders zero
//! padding, and verifies that the merged network computes the same
//! function as the original.
//!
//! See the `examples/` directory for runnable entry points covering each
//! capability, and the `netfold` binary for the file-based pipeline
//! (`gen-tables` -> `plan` -> `apply` -> `verify`).

pub mod cli;
pub mod cost;
pub mod dp;
pub mod merge;
pub mod net;

pub use cost::{BaseImportance, CostTable, ExtImportance, LatencyModelParams, TickTable};
pub use dp::{solve_base, solve_extended, LatencyDp};
pub use merge::{Kernel4, NetworkWeights, Tensor4};
pub use net::{ActivationKind, ConvLayer, NetworkSpec, Plan, SkipConnection};
