//! Expected critical-path reduction: overlap, unlock and interference terms
//! over a pluggable co-run slowdown model.

mod interference;
mod utility;

pub use interference::{InterferenceConfig, InterferenceMode, InterferenceModel};
pub use utility::{corun_latency, overlap_gain, solo_latency, unlock_gain, Scorer, UtilityBreakdown};
