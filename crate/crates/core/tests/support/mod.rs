//! Independent reference implementations and random instance generators
//! shared by the integration suites.
#![allow(dead_code)]

use std::collections::BTreeMap;

use branchspec_core::hypothesis::{build_hypothesis, ChainStep, SafetyLevel, ToolProfile};
use branchspec_core::mining::{BindingFn, PatternLibrary};
use branchspec_core::sandbox::{AuthoritativeState, Effect, EffectOp, SandboxError, SandboxState, Space};
use branchspec_core::scheduler::Policy;
use branchspec_core::scoring::InterferenceConfig;
use branchspec_core::trace::{AgentTrace, ArgMap, EventSignature, OutcomeClass, TraceEvent};
use branchspec_core::{Catalog, Hypothesis, Profile};
use rand::Rng;

/// (support, context_support, distinct_next) per (context, next).
pub type PatternCounts = BTreeMap<(Vec<EventSignature>, EventSignature), (u64, u64, u64)>;

/// Counts every contiguous window directly: for each context of length
/// 1..=w and each position where it is followed by an event.
pub fn brute_force_patterns(streams: &[Vec<EventSignature>], min_support: u64, w: usize) -> PatternCounts {
    let mut pair: BTreeMap<(Vec<EventSignature>, EventSignature), u64> = BTreeMap::new();
    for s in streams {
        for len in 1..=w {
            for start in 0..s.len() {
                let end = start + len;
                if end >= s.len() {
                    break;
                }
                *pair.entry((s[start..end].to_vec(), s[end].clone())).or_default() += 1;
            }
        }
    }
    let mut ctx_total: BTreeMap<Vec<EventSignature>, (u64, u64)> = BTreeMap::new();
    for ((ctx, _), n) in &pair {
        let e = ctx_total.entry(ctx.clone()).or_default();
        e.0 += n;
        e.1 += 1;
    }
    pair.into_iter()
        .filter(|(_, n)| *n >= min_support)
        .map(|((ctx, next), n)| {
            let (cs, d) = ctx_total[&ctx];
            ((ctx, next), (n, cs, d))
        })
        .collect()
}

pub fn mined_counts(lib: &PatternLibrary) -> PatternCounts {
    lib.patterns
        .iter()
        .map(|p| {
            (
                (p.context.clone(), p.predicted.clone()),
                (p.support, p.context_support, p.distinct_next),
            )
        })
        .collect()
}

pub fn sig(tool: &str) -> EventSignature {
    EventSignature::with_fields(tool, OutcomeClass::Success, [])
}

pub fn chain_trace(tools: &[String]) -> AgentTrace {
    let mut events = Vec::new();
    let mut t = 0.0;
    for tool in tools {
        events.push(TraceEvent::call(t, tool, ArgMap::new()));
        t += 1.0;
        events.push(TraceEvent::ret(t, tool, OutcomeClass::Success, ArgMap::new()));
        t += 1.0;
    }
    AgentTrace::from_events(events).expect("ordered trace")
}

/// Up to `max_traces` traces of up to `max_len` calls over a small alphabet.
pub fn random_corpus<R: Rng>(rng: &mut R, max_traces: usize, max_len: usize) -> Vec<AgentTrace> {
    let alphabet = ["a", "b", "c", "d"];
    let size = rng.random_range(2..=alphabet.len());
    let n = rng.random_range(1..=max_traces);
    (0..n)
        .map(|_| {
            let len = rng.random_range(0..=max_len);
            let tools: Vec<String> = (0..len)
                .map(|_| alphabet[rng.random_range(0..size)].to_string())
                .collect();
            chain_trace(&tools)
        })
        .collect()
}

fn profile<R: Rng>(rng: &mut R) -> Profile {
    Profile::new(
        rng.random_range(0.05..0.7),
        rng.random_range(0.05..0.5),
        rng.random_range(0.05..0.5),
        rng.random_range(0.1..0.8),
    )
    .expect("valid profile")
}

/// A random admission instance.
pub struct BeamInstance {
    pub policy: Policy,
    pub catalog: Catalog,
    pub candidates: Vec<Hypothesis>,
    pub residual: Profile,
    pub gap: f64,
    pub interference_capacity: Profile,
}

pub fn random_beam<R: Rng>(rng: &mut R, max_k: usize) -> BeamInstance {
    let tools = ["t0", "t1", "t2", "t3", "t4", "t5"];
    let mut catalog = Catalog::new();
    let mut max_safety = BTreeMap::new();
    for t in tools {
        let safety = if rng.random_bool(0.25) {
            SafetyLevel::Level2Staged
        } else {
            SafetyLevel::Level1Readonly
        };
        if safety == SafetyLevel::Level2Staged && rng.random_bool(0.5) {
            max_safety.insert(t.to_string(), SafetyLevel::Level2Staged);
        }
        let warmup = if rng.random_bool(0.3) { rng.random_range(2.0..20.0) } else { 0.0 };
        catalog.insert(
            t,
            ToolProfile {
                latency_est: rng.random_range(10.0..120.0),
                warmup_est: warmup,
                rho: profile(rng),
                safety,
            },
        );
    }
    let k = rng.random_range(1..=max_k);
    let candidates = (0..k)
        .map(|_| {
            let len = rng.random_range(1..=3);
            let steps: Vec<ChainStep<f64>> = (0..len)
                .map(|_| ChainStep {
                    signature: sig(tools[rng.random_range(0..tools.len())]),
                    bindings: Vec::<BindingFn>::new(),
                    context_width: 0,
                    confidence: rng.random_range(0.2..1.0),
                    latency_est: None,
                })
                .collect();
            build_hypothesis(&steps, &catalog, 3, Vec::new()).expect("valid chain")
        })
        .collect();
    let cap = Profile::new(4.0, 4.0, 4.0, 8.0).unwrap();
    let interference_capacity = Profile::new(
        rng.random_range(0.4..1.5),
        rng.random_range(0.4..1.5),
        rng.random_range(0.4..1.5),
        rng.random_range(0.8..3.0),
    )
    .unwrap();
    let policy = Policy {
        beam_k: max_k,
        budget_b: cap,
        lambda: 1.0,
        mu: rng.random_range(0.0..3.0),
        horizon_h: 3,
        fanout_limit: 2,
        max_safety,
        preempt_cost_eps: 0.0,
        binding_threshold: 0.8,
        capacity: cap,
        interference: InterferenceConfig {
            mode: "proportional_share".into(),
            capacity: interference_capacity,
            coefficients: None,
        },
    };
    BeamInstance {
        policy,
        catalog,
        candidates,
        residual: Profile::new(
            rng.random_range(0.1..1.5),
            rng.random_range(0.1..1.5),
            rng.random_range(0.1..1.5),
            rng.random_range(0.2..2.5),
        )
        .unwrap(),
        gap: rng.random_range(0.0..150.0),
        interference_capacity,
    }
}

/// One-tool hypothesis with a given probability, latency and cpu demand.
pub fn single(tool: &str, q: f64, latency: f64, cpu: f64) -> (Hypothesis, Catalog) {
    let catalog = Catalog::new().with(
        tool,
        ToolProfile {
            latency_est: latency,
            warmup_est: 0.0,
            rho: Profile::new(cpu, 0.0, 0.0, 0.0).unwrap(),
            safety: SafetyLevel::Level1Readonly,
        },
    );
    let step = ChainStep {
        signature: sig(tool),
        bindings: Vec::new(),
        context_width: 0,
        confidence: q,
        latency_est: None,
    };
    (build_hypothesis(&[step], &catalog, 1, Vec::new()).unwrap(), catalog)
}

fn random_effect<R: Rng>(rng: &mut R) -> Effect {
    let space = [Space::Memory, Space::Files, Space::Env][rng.random_range(0..3)];
    let key = format!("k{}", rng.random_range(0..6));
    match rng.random_range(0..3) {
        0 => Effect::read(space, key),
        1 => Effect::write(space, key, format!("v{}", rng.random_range(0..100))),
        _ => Effect::delete(space, key),
    }
}

fn random_level<R: Rng>(rng: &mut R) -> SafetyLevel {
    [
        SafetyLevel::Level0Prep,
        SafetyLevel::Level1Readonly,
        SafetyLevel::Level2Staged,
        SafetyLevel::NonSpeculative,
    ][rng.random_range(0..4)]
}

/// The serial-replay reference: a fresh state whose maps are edited
/// directly, by authoritative effects and, at commit time, by the effects a
/// committed branch recorded.
struct Reference(AuthoritativeState);

impl Reference {
    fn apply(&mut self, e: &Effect) {
        let map = match e.space {
            Space::Memory => &mut self.0.memory_m,
            Space::Files => &mut self.0.files_f,
            Space::Env => &mut self.0.env_e,
        };
        match &e.op {
            EffectOp::Write(v) => {
                map.insert(e.key.clone(), v.clone());
            }
            EffectOp::Delete => {
                map.remove(&e.key);
            }
            EffectOp::Read => {}
        }
    }

    fn matches(&self, base: &AuthoritativeState) -> bool {
        self.0.memory_m == base.memory_m && self.0.files_f == base.files_f && self.0.env_e == base.env_e
    }
}

/// Runs one random interleaving of sandbox operations and checks squash
/// isolation and commit against the serial replay.
pub fn fuzz_sandbox_sequence<R: Rng>(rng: &mut R, ops: usize) -> Result<(), String> {
    let mut base = AuthoritativeState::new();
    let mut reference = Reference(AuthoritativeState::new());
    let mut boxes: Vec<SandboxState> = Vec::new();
    let mut next_id = 0u64;
    for _ in 0..ops {
        match rng.random_range(0..10) {
            0 => {
                let e = random_effect(rng);
                base.apply_authoritative(&e);
                reference.apply(&e);
            }
            1 | 2 if boxes.len() < 4 => {
                next_id += 1;
                boxes.push(SandboxState::fork(next_id, &base));
            }
            3 if !boxes.is_empty() => {
                let i = rng.random_range(0..boxes.len());
                let mut b = boxes.swap_remove(i);
                let before = base.digest();
                b.squash().map_err(|e| e.to_string())?;
                if base.digest() != before {
                    return Err("squash touched the base".into());
                }
            }
            4 if !boxes.is_empty() => {
                let i = rng.random_range(0..boxes.len());
                let mut b = boxes.swap_remove(i);
                let expected = b.replay_onto(&base).digest();
                let before = base.digest();
                match b.commit(&mut base, true) {
                    Ok(()) => {
                        if base.digest() != expected {
                            return Err("commit differs from replay".into());
                        }
                        for h in &b.history_h {
                            let applies = match h.level {
                                SafetyLevel::Level0Prep => h.effect.space == Space::Env,
                                SafetyLevel::Level2Staged => true,
                                _ => false,
                            };
                            if applies {
                                reference.apply(&h.effect);
                            }
                        }
                    }
                    Err(SandboxError::Divergence { .. }) => {
                        if base.digest() != before {
                            return Err("failed commit touched the base".into());
                        }
                    }
                    Err(e) => return Err(e.to_string()),
                }
            }
            _ if !boxes.is_empty() => {
                let i = rng.random_range(0..boxes.len());
                let e = random_effect(rng);
                let level = random_level(rng);
                let before = base.digest();
                let r = boxes[i].apply_effect(e, level);
                if level == SafetyLevel::NonSpeculative && r.is_ok() {
                    return Err("non-speculative effect accepted".into());
                }
                if base.digest() != before {
                    return Err("sandbox effect leaked into the base".into());
                }
            }
            _ => {}
        }
        if !reference.matches(&base) {
            return Err("base diverged from the serial replay".into());
        }
    }
    for mut b in boxes {
        b.squash().map_err(|e| e.to_string())?;
    }
    if reference.0.digest() == base.digest() {
        Ok(())
    } else {
        Err("final base differs from the serial replay".into())
    }
}

/// One branch whose interference ruins two medium branches that together
/// are worth more: greedy takes the single branch (100), the optimum is the
/// pair (60 + 60).
pub fn anti_greedy() -> BeamInstance {
    let (x, cx) = single("x", 1.0, 100.0, 1.0);
    let (y, cy) = single("y", 1.0, 60.0, 0.5);
    let (z, cz) = single("z", 1.0, 60.0, 0.5);
    let mut catalog = Catalog::new();
    for c in [cx, cy, cz] {
        for (name, p) in c.iter() {
            catalog.insert(name.clone(), p.clone());
        }
    }
    let cap = Profile::uniform(2.0).unwrap();
    let interference_capacity = Profile::new(1.0, 1.0, 1.0, 1.0).unwrap();
    let policy = Policy {
        beam_k: 3,
        budget_b: cap,
        lambda: 1.0,
        mu: 3.0,
        horizon_h: 1,
        fanout_limit: 1,
        max_safety: BTreeMap::new(),
        preempt_cost_eps: 0.0,
        binding_threshold: 0.8,
        capacity: cap,
        interference: InterferenceConfig {
            mode: "proportional_share".into(),
            capacity: interference_capacity,
            coefficients: None,
        },
    };
    BeamInstance {
        policy,
        catalog,
        candidates: vec![x, y, z],
        residual: cap,
        gap: 0.0,
        interference_capacity,
    }
}
