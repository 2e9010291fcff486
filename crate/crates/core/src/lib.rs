//! Multi-agent tree-search reinforcement learning over verifiable toy tasks.
//!
//! Several tabular softmax policies expand one shared search tree per task,
//! chosen by two-stage Thompson sampling. Every node is scored by its task,
//! rewards are shaped against parent and sibling baselines, and each policy
//! is updated with a clipped surrogate on the nodes it produced. A parallel
//! sampling baseline with group-relative advantages runs through the same
//! machinery.

pub mod credit;
pub mod env;
pub mod error;
pub mod metrics;
pub mod policy;
pub mod rng;
pub mod selector;
pub mod trainer;
pub mod tree;

pub use error::{Error, Result};
