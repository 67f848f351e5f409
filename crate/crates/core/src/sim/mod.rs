//! Deterministic discrete-event simulation of an agent session: synthetic
//! workloads, a seeded tool model, and serial, mined-pattern and oracle
//! scheduling modes.

mod engine;
mod model;
mod workload;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use engine::{simulate_session, Mode, RunRecord};
pub use model::{
    generate_corpus, generate_session, serial_timeline, session_trace, SessionStep, ToolModel, INPUT, OUTPUT,
    TRAIN_SEED_BASE,
};
pub use workload::{Distribution, ToolSpec, WorkloadError, WorkloadSpec, END, START};

use crate::mining::PatternLibrary;
use crate::scheduler::Policy;
use crate::Ms;

/// A completion later than the serial one by more than this counts as an
/// authoritative QoS violation. Covers floating-point accumulation only.
pub const QOS_TOLERANCE_MS: Ms = 1e-6;

/// Metrics of one simulated run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub mode: Mode,
    pub seed: u64,
    pub steps: usize,
    pub makespan: Ms,
    pub serial_makespan: Ms,
    pub speedup: f64,
    /// Fraction of admitted branches whose work the agent used.
    pub promotion_rate: f64,
    /// Fraction of calls served by a warmed-up preparation.
    pub prefix_reuse_rate: f64,
    /// Fraction of calls served by a finished or promoted branch node.
    pub hit_rate: f64,
    pub wasted_spec_ms: Ms,
    pub auth_qos_violations: usize,
    /// Mean wall/solo ratio of speculative work; 1 when nothing ran.
    pub corun_slowdown: f64,
    /// Relative makespan reduction against the serial timeline.
    pub critical_path_reduction: f64,
    pub auth_work_ms: Ms,
    pub replaced_work_ms: Ms,
    pub admitted: u64,
    pub preempted: u64,
    pub squashed: u64,
    pub final_digest: String,
    pub completions: Vec<Ms>,
}

impl RunResult {
    pub fn from_record(rec: &RunRecord) -> Self {
        let n = rec.session.len();
        let makespan = rec.return_t.last().copied().unwrap_or(0.0);
        let serial_makespan = rec.serial_return_t.last().copied().unwrap_or(0.0);
        let violations = rec
            .return_t
            .iter()
            .zip(&rec.serial_return_t)
            .filter(|(b, s)| **b > **s + QOS_TOLERANCE_MS)
            .count();
        let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
        let c = rec.runtime.as_ref().map(|rt| rt.counters.clone()).unwrap_or_default();
        let (auth_work_ms, replaced_work_ms) = match rec.runtime {
            Some(_) => (c.auth_work_ms, c.replaced_work_ms),
            None => (serial_work(rec), 0.0),
        };
        Self {
            mode: rec.mode,
            seed: rec.seed,
            steps: n,
            makespan,
            serial_makespan,
            speedup: if makespan > 0.0 { serial_makespan / makespan } else { 1.0 },
            promotion_rate: ratio(c.useful_executions as f64, c.admitted as f64),
            prefix_reuse_rate: ratio(c.prefix_resumed as f64, n as f64),
            hit_rate: ratio((c.reused + c.promoted) as f64, n as f64),
            wasted_spec_ms: c.wasted_ms,
            auth_qos_violations: violations,
            corun_slowdown: if c.spec_solo_ms > 0.0 { c.spec_wall_ms / c.spec_solo_ms } else { 1.0 },
            critical_path_reduction: ratio(serial_makespan - makespan, serial_makespan),
            auth_work_ms,
            replaced_work_ms,
            admitted: c.admitted,
            preempted: c.preempted,
            squashed: c.squashed,
            final_digest: rec.final_digest.clone(),
            completions: rec.return_t.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("result serializes");
        s.push('\n');
        s
    }
}

fn serial_work(rec: &RunRecord) -> Ms {
    let mut prev = 0.0;
    let mut total = 0.0;
    for (s, r) in rec.session.iter().zip(&rec.return_t) {
        total += r - (prev + s.gap);
        prev = *r;
    }
    total
}

/// Runs one session and derives its metrics.
pub fn run_simulation(
    workload: &WorkloadSpec,
    policy: &Policy,
    library: Arc<PatternLibrary>,
    mode: Mode,
    seed: u64,
) -> RunResult {
    let model = ToolModel::new(workload.clone());
    RunResult::from_record(&simulate_session(&model, policy, library, mode, seed))
}

/// Mines a pattern library from `count` training sessions whose seeds start
/// at [`TRAIN_SEED_BASE`].
pub fn train_library(
    workload: &WorkloadSpec,
    count: usize,
    min_support: u64,
    window: usize,
    binding_threshold: f64,
) -> Result<PatternLibrary, crate::mining::MiningError> {
    let model = ToolModel::new(workload.clone());
    let corpus = generate_corpus(&model, count, TRAIN_SEED_BASE);
    PatternLibrary::build(&corpus, min_support, window, binding_threshold)
}
