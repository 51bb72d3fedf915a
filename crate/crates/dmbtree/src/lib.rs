//! A B+-tree for disaggregated memory, simulated at desk scale.
//!
//! Compute servers keep a swizzling page cache of tree nodes and own
//! disjoint logical key ranges; memory servers hold the actual node bytes
//! and can execute pushed-down sub-tree operations. The fabric layer
//! emulates one-sided verbs and two-sided RPC with full traffic accounting,
//! so verb-count behavior can be measured without real RDMA hardware.

pub mod bulk;
pub mod cache;
pub mod fabric;
pub mod node;
pub mod offload;
pub mod oracle;
pub mod partition;
pub mod tree;
