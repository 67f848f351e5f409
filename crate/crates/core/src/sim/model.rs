use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::hypothesis::SafetyLevel;
use crate::mining::TEMPLATE_HOLE;
use crate::sandbox::{Effect, Space};
use crate::scheduler::{Invocation, ToolCall, ToolEnvironment};
use crate::trace::{AgentTrace, ArgMap, EventKind, OutcomeClass, TraceEvent};
use crate::Ms;

use super::workload::{WorkloadSpec, END, START};

/// The argument every simulated tool takes.
pub const INPUT: &str = "input";
/// The result field every simulated tool returns.
pub const OUTPUT: &str = "out";

/// Deterministic tool behaviour: result, latency and outcome are functions
/// of the workload seed, tool name and arguments.
#[derive(Debug, Clone)]
pub struct ToolModel {
    workload: WorkloadSpec,
}

impl ToolModel {
    pub fn new(workload: WorkloadSpec) -> Self {
        Self { workload }
    }

    pub fn workload(&self) -> &WorkloadSpec {
        &self.workload
    }

    fn digest(&self, tool: &str, args: &ArgMap) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(self.workload.seed.to_le_bytes());
        h.update(tool.as_bytes());
        for (k, v) in args {
            h.update([0u8]);
            h.update(k.as_bytes());
            h.update([1u8]);
            h.update(v.as_bytes());
        }
        h.finalize().into()
    }
}

impl ToolEnvironment for ToolModel {
    fn warmup(&self, tool: &str) -> Ms {
        self.workload.tools.get(tool).map_or(0.0, |t| t.warmup)
    }

    fn invoke(&self, tool: &str, args: &ArgMap) -> Invocation {
        let digest = self.digest(tool, args);
        let mut rng = ChaCha8Rng::from_seed(digest);
        let spec = self.workload.tools.get(tool);
        let work = self
            .workload
            .tool_latency
            .get(tool)
            .map_or(0.0, |d| d.sample(&mut rng));
        let warmup = spec.map_or(0.0, |s| s.warmup);
        let failed = spec.is_some_and(|s| rng.random::<f64>() < s.fail_rate);
        let out: String = digest[..6].iter().map(|b| format!("{b:02x}")).collect();
        let key = args.get(INPUT).cloned().unwrap_or_default();
        let effect = match spec.map(|s| s.safety) {
            Some(SafetyLevel::Level2Staged) => Effect::write(Space::Files, key, out.clone()),
            Some(SafetyLevel::NonSpeculative) => Effect::write(Space::Memory, format!("{tool}:{key}"), out.clone()),
            _ => Effect::read(Space::Files, key),
        };
        let mut result = ArgMap::new();
        result.insert(OUTPUT.to_owned(), out);
        Invocation {
            result,
            outcome: if failed { OutcomeClass::Failure } else { OutcomeClass::Success },
            latency: warmup + work,
            warmup,
            effect,
        }
    }
}

/// One agent step: think for `gap` ms, then issue `call`.
#[derive(Debug, Clone, PartialEq)]
pub struct SessionStep {
    pub gap: Ms,
    pub call: ToolCall,
}

fn session_rng(workload_seed: u64, seed: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"session");
    h.update(workload_seed.to_le_bytes());
    h.update(seed.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

fn next_tool<R: Rng>(w: &WorkloadSpec, state: &str, rng: &mut R) -> String {
    let mut state = state.to_owned();
    for _ in 0..2 {
        let Some(row) = w.motif_library.get(&state) else {
            state = START.to_owned();
            continue;
        };
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = row.keys().last().expect("validated row");
        for (to, p) in row {
            acc += p;
            if u < acc {
                pick = to;
                break;
            }
        }
        if pick != END {
            return pick.clone();
        }
        state = START.to_owned();
    }
    panic!("motif walk from `{START}` reached `{END}` immediately")
}

/// Samples one session: a motif walk over tools whose arguments derive from
/// the previous result, except with probability `binding_noise`.
pub fn generate_session(model: &ToolModel, seed: u64) -> Vec<SessionStep> {
    let w = model.workload();
    let mut rng = session_rng(w.seed, seed);
    let n = w.session_length.sample(&mut rng).round().max(1.0) as usize;
    let mut steps = Vec::with_capacity(n);
    let mut state = START.to_owned();
    let mut prev_out: Option<String> = None;
    for _ in 0..n {
        let tool = next_tool(w, &state, &mut rng);
        let fresh = rng.random::<f64>() < w.binding_noise;
        let value = match (&prev_out, fresh) {
            (Some(prev), false) => match w.tools.get(&tool).and_then(|t| t.template.as_deref()) {
                Some(t) => t.replacen(TEMPLATE_HOLE, prev, 1),
                None => prev.clone(),
            },
            _ => format!("n{:08x}", rng.random::<u32>()),
        };
        let gap = w.reasoning_gap.sample(&mut rng);
        let mut args = ArgMap::new();
        args.insert(INPUT.to_owned(), value);
        let inv = model.invoke(&tool, &args);
        prev_out = inv.result.get(OUTPUT).cloned();
        steps.push(SessionStep {
            gap,
            call: ToolCall {
                step: steps.len(),
                tool: tool.clone(),
                args,
            },
        });
        state = tool;
    }
    steps
}

/// Trace of a session with the given call and return times.
pub fn session_trace(
    model: &ToolModel,
    session: &[SessionStep],
    call_t: &[Ms],
    return_t: &[Ms],
) -> AgentTrace {
    let mut events = Vec::with_capacity(session.len() * 4);
    let mut prev = 0.0;
    for (i, s) in session.iter().enumerate() {
        let inv = model.invoke(&s.call.tool, &s.call.args);
        events.push(TraceEvent::reason(prev, EventKind::ReasonStart));
        events.push(TraceEvent::reason(call_t[i], EventKind::ReasonEnd));
        events.push(TraceEvent::call(call_t[i], &s.call.tool, s.call.args.clone()));
        events.push(TraceEvent::ret(return_t[i], &s.call.tool, inv.outcome, inv.result));
        prev = return_t[i];
    }
    AgentTrace::from_events(events).expect("simulated timelines are ordered and paired")
}

/// Serial call and return times of a session.
pub fn serial_timeline(model: &ToolModel, session: &[SessionStep]) -> (Vec<Ms>, Vec<Ms>) {
    let mut calls = Vec::with_capacity(session.len());
    let mut returns = Vec::with_capacity(session.len());
    let mut t = 0.0;
    for s in session {
        let call = t + s.gap;
        t = call + model.invoke(&s.call.tool, &s.call.args).latency;
        calls.push(call);
        returns.push(t);
    }
    (calls, returns)
}

/// First session seed of training corpora; disjoint from evaluation seeds.
pub const TRAIN_SEED_BASE: u64 = 1_000_000;

/// Serial traces of `count` sessions seeded `base_seed..base_seed + count`.
pub fn generate_corpus(model: &ToolModel, count: usize, base_seed: u64) -> Vec<AgentTrace> {
    (0..count as u64)
        .map(|i| {
            let session = generate_session(model, base_seed + i);
            let (calls, returns) = serial_timeline(model, &session);
            session_trace(model, &session, &calls, &returns)
        })
        .collect()
}
