use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::hypothesis::{build_hypothesis, ChainStep};
use crate::mining::{BindingFn, PatternLibrary};
use crate::scheduler::{
    BranchSource, CallOutcome, Invocation, LibrarySource, NodeEvent, Policy, Runtime, SourceContext, ToolEnvironment,
};
use crate::trace::EventSignature;
use crate::{Catalog, Hypothesis, Ms};

use super::model::{generate_session, serial_timeline, SessionStep, ToolModel};

/// Scheduling mode of a simulated run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// No speculation.
    Serial,
    /// Speculation from mined patterns.
    Bpaste,
    /// Speculation from the session's true future.
    Oracle,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Serial => "serial",
            Mode::Bpaste => "bpaste",
            Mode::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "serial" => Ok(Mode::Serial),
            "bpaste" => Ok(Mode::Bpaste),
            "oracle" => Ok(Mode::Oracle),
            other => Err(format!("unknown mode `{other}` (serial, bpaste, oracle)")),
        }
    }
}

/// Feeds the scheduler the session's actual next calls with probability 1,
/// constant bindings and true latencies.
struct OracleSource {
    model: ToolModel,
    catalog: Arc<Catalog>,
    session: Vec<SessionStep>,
}

impl BranchSource for OracleSource {
    fn generate(&self, ctx: &SourceContext<'_>) -> Vec<Hypothesis> {
        let from = ctx.history.len();
        let to = (from + ctx.horizon_h).min(self.session.len());
        let steps: Vec<ChainStep<f64>> = self.session[from..to]
            .iter()
            .map(|s| {
                let inv = self.model.invoke(&s.call.tool, &s.call.args);
                ChainStep {
                    signature: EventSignature::new(&s.call.tool, inv.outcome, &s.call.args),
                    bindings: s
                        .call
                        .args
                        .iter()
                        .map(|(k, v)| BindingFn::constant(k.clone(), v.clone()))
                        .collect(),
                    context_width: 0,
                    confidence: 1.0,
                    latency_est: Some(inv.warm_latency()),
                }
            })
            .collect();
        build_hypothesis(&steps, &self.catalog, ctx.horizon_h, ctx.history.to_vec())
            .into_iter()
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Event {
    ToolReturn(usize),
    ReasonEnd(usize),
    NodeDone { exec: u64, version: u64 },
}

impl Event {
    fn priority(self) -> u8 {
        match self {
            Event::ToolReturn(_) => 0,
            Event::ReasonEnd(_) => 1,
            Event::NodeDone { .. } => 2,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Queued {
    t: Ms,
    seq: u64,
    event: Event,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Queued {}

impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Queued {
    // Reversed: BinaryHeap pops the earliest (time, priority, seq) first.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .t
            .total_cmp(&self.t)
            .then(other.event.priority().cmp(&self.event.priority()))
            .then(other.seq.cmp(&self.seq))
    }
}

#[derive(Default)]
struct Agenda {
    heap: BinaryHeap<Queued>,
    seq: u64,
}

impl Agenda {
    fn push(&mut self, t: Ms, event: Event) {
        self.seq += 1;
        self.heap.push(Queued { t, seq: self.seq, event });
    }

    fn pop(&mut self) -> Option<Queued> {
        self.heap.pop()
    }
}

/// Everything a run produced before metrics are derived.
pub struct RunRecord {
    pub mode: Mode,
    pub seed: u64,
    pub session: Vec<SessionStep>,
    pub call_t: Vec<Ms>,
    pub return_t: Vec<Ms>,
    pub serial_return_t: Vec<Ms>,
    pub runtime: Option<Runtime>,
    pub final_digest: String,
    /// Scheduler invariant violations observed after any event.
    pub invariant_failures: Vec<String>,
}

/// Runs one session under `mode`.
pub fn simulate_session(
    model: &ToolModel,
    policy: &Policy,
    library: Arc<PatternLibrary>,
    mode: Mode,
    seed: u64,
) -> RunRecord {
    let session = generate_session(model, seed);
    let (_, serial_return_t) = serial_timeline(model, &session);
    let catalog = Arc::new(model.workload().catalog());
    let mut runtime = match mode {
        Mode::Serial => None,
        Mode::Bpaste => Some(Runtime::new(
            policy.clone(),
            Arc::clone(&library),
            Arc::clone(&catalog),
            Box::new(LibrarySource {
                library: Arc::clone(&library),
                catalog: Arc::clone(&catalog),
            }),
        )),
        Mode::Oracle => Some(Runtime::new(
            policy.clone(),
            Arc::clone(&library),
            Arc::clone(&catalog),
            Box::new(OracleSource {
                model: model.clone(),
                catalog: Arc::clone(&catalog),
                session: session.clone(),
            }),
        )),
    };
    let mut base = crate::sandbox::AuthoritativeState::new();
    let n = session.len();
    let mut call_t = vec![0.0; n];
    let mut return_t = vec![0.0; n];
    let mut results: Vec<Option<Invocation>> = vec![None; n];
    let mut current = 0usize;
    let mut agenda = Agenda::default();
    let mut invariant_failures = Vec::new();
    if let Some(rt) = runtime.as_mut() {
        rt.start(model);
        for (t, exec, version) in rt.wakeups() {
            agenda.push(t, Event::NodeDone { exec, version });
        }
    }
    if n > 0 {
        agenda.push(session[0].gap, Event::ReasonEnd(0));
    }
    while let Some(Queued { t, event, .. }) = agenda.pop() {
        if let Some(rt) = runtime.as_mut() {
            rt.advance_to(t);
        }
        match event {
            Event::ReasonEnd(i) => {
                current = i;
                call_t[i] = t;
                let call = session[i].call.clone();
                match runtime.as_mut() {
                    None => {
                        let inv = model.invoke(&call.tool, &call.args);
                        agenda.push(t + inv.latency, Event::ToolReturn(i));
                        results[i] = Some(inv);
                    }
                    Some(rt) => match rt.on_reason_end(t, call, model) {
                        CallOutcome::Reused(inv) => {
                            results[i] = Some(inv);
                            agenda.push(t, Event::ToolReturn(i));
                        }
                        CallOutcome::Promoted { .. } => {}
                        CallOutcome::Run { start, latency, invocation } => {
                            results[i] = Some(invocation);
                            agenda.push(start + latency, Event::ToolReturn(i));
                        }
                    },
                }
            }
            Event::ToolReturn(i) => {
                return_t[i] = t;
                let inv = results[i].clone().expect("returned call has a result");
                match runtime.as_mut() {
                    None => base.apply_authoritative(&inv.effect),
                    Some(rt) => rt.on_tool_return(t, &session[i].call, &inv, model),
                }
                if i + 1 == n {
                    break;
                }
                agenda.push(t + session[i + 1].gap, Event::ReasonEnd(i + 1));
            }
            Event::NodeDone { exec, version } => {
                let rt = runtime.as_mut().expect("node events only with speculation");
                match rt.on_node_done(t, exec, version, model) {
                    NodeEvent::Stale => continue,
                    NodeEvent::Progress => {}
                    NodeEvent::Authoritative(inv) => {
                        results[current] = Some(inv);
                        agenda.push(t, Event::ToolReturn(current));
                    }
                }
            }
        }
        if let Some(rt) = runtime.as_mut() {
            if let Err(e) = rt.check_invariants() {
                invariant_failures.push(e);
            }
            for (wt, exec, version) in rt.wakeups() {
                agenda.push(wt, Event::NodeDone { exec, version });
            }
        }
    }
    if let Some(rt) = runtime.as_mut() {
        rt.finish();
    }
    let final_digest = match &runtime {
        Some(rt) => rt.base.digest(),
        None => base.digest(),
    };
    RunRecord {
        mode,
        seed,
        session,
        call_t,
        return_t,
        serial_return_t,
        runtime,
        final_digest,
        invariant_failures,
    }
}
