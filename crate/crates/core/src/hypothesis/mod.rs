//! Branch hypotheses: bounded future subgraphs assembled from chained
//! patterns, and the size-K beam that holds the most valuable ones.

mod beam;
mod catalog;
mod generate;
mod graph;

pub use beam::{beam_order, refresh_beam, Beam, Ranked};
pub use catalog::{ToolCatalog, ToolProfile};
pub use generate::{build_hypothesis, generate_hypotheses, ChainStep};
pub use graph::{BranchHypothesis, FutureNode, FutureSubgraph, GraphError, NodeKind, SafetyLevel};
