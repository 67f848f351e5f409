//! Branch-level speculative scheduling for LLM-agent tool workloads.
//!
//! The pipeline: traces are mined into `(context, next tool, bindings,
//! confidence)` patterns ([`mining`]); at runtime, patterns are chained into
//! bounded future subgraphs held in a size-K beam ([`hypothesis`]); each
//! branch is scored by expected critical-path reduction ([`scoring`]); a
//! four-phase scheduler admits high-value branch prefixes on slack capacity
//! and preempts them whenever authoritative work needs room ([`scheduler`]);
//! speculative side effects stay in copy-on-write sandboxes until the agent
//! confirms them ([`sandbox`]). [`sim`] drives all of it with a deterministic
//! discrete-event simulator.
//!
//! The math is generic over [`Scalar`] (`f32` or `f64`); the scheduler and
//! simulator run on `f64` milliseconds via the aliases below.

pub mod hypothesis;
pub mod mining;
pub mod resource;
pub mod sandbox;
mod scalar;
pub mod scheduler;
pub mod scoring;
pub mod sim;
pub mod trace;

pub use scalar::Scalar;

/// Milliseconds.
pub type Ms = f64;
pub type Profile = resource::ResourceProfile<f64>;
pub type Hypothesis = hypothesis::BranchHypothesis<f64>;
pub type Node = hypothesis::FutureNode<f64>;
pub type Subgraph = hypothesis::FutureSubgraph<f64>;
pub type Catalog = hypothesis::ToolCatalog<f64>;
pub type Interference = scoring::InterferenceModel<f64>;
pub type Utility = scoring::UtilityBreakdown<f64>;
