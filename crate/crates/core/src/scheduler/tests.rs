use std::collections::BTreeMap;
use std::sync::Arc;

use super::*;
use crate::hypothesis::{build_hypothesis, ChainStep, SafetyLevel, ToolProfile};
use crate::mining::{BindingFn, BindingSource, FieldPath, Transform};
use crate::sandbox::{Effect, Space};
use crate::scoring::InterferenceConfig;
use crate::trace::{ArgMap, OutcomeClass};

/// name -> (warmup, work, safety)
struct FakeEnv(BTreeMap<&'static str, (f64, f64, SafetyLevel)>);

impl FakeEnv {
    fn new() -> Self {
        let mut m = BTreeMap::new();
        m.insert("a", (0.0, 40.0, SafetyLevel::Level1Readonly));
        m.insert("b", (10.0, 50.0, SafetyLevel::Level1Readonly));
        m.insert("w", (0.0, 30.0, SafetyLevel::Level2Staged));
        m.insert("z", (0.0, 20.0, SafetyLevel::Level1Readonly));
        m.insert("s", (0.0, 80.0, SafetyLevel::Level1Readonly));
        Self(m)
    }

    fn catalog(&self) -> Catalog {
        let mut c = Catalog::new();
        for (name, (warm, work, safety)) in &self.0 {
            c.insert(
                *name,
                ToolProfile {
                    latency_est: *work,
                    warmup_est: *warm,
                    rho: Profile::new(0.3, 0.1, 0.1, 0.4).unwrap(),
                    safety: *safety,
                },
            );
        }
        c
    }
}

impl ToolEnvironment for FakeEnv {
    fn warmup(&self, tool: &str) -> Ms {
        self.0[tool].0
    }

    fn invoke(&self, tool: &str, args: &ArgMap) -> Invocation {
        let (warmup, work, safety) = self.0[tool];
        let input = args.get("input").cloned().unwrap_or_default();
        let mut result = ArgMap::new();
        result.insert("out".into(), format!("{tool}({input})"));
        let effect = if safety == SafetyLevel::Level2Staged {
            Effect::write(Space::Files, input.clone(), format!("by-{tool}"))
        } else {
            Effect::read(Space::Files, input.clone())
        };
        Invocation {
            result,
            outcome: OutcomeClass::Success,
            latency: warmup + work,
            warmup,
            effect,
        }
    }
}

fn args(v: &str) -> ArgMap {
    let mut a = ArgMap::new();
    a.insert("input".into(), v.into());
    a
}

fn call(step: usize, tool: &str, v: &str) -> ToolCall {
    ToolCall {
        step,
        tool: tool.into(),
        args: args(v),
    }
}

fn from_prev_result() -> BindingFn {
    BindingFn {
        arg: "input".into(),
        source: BindingSource {
            position: 0,
            field: FieldPath::Result("out".into()),
        },
        transform: Transform::FieldExtract,
    }
}

fn step(tool: &str, binding: BindingFn, width: usize) -> ChainStep<f64> {
    ChainStep {
        signature: EventSignature::with_fields(tool, OutcomeClass::Success, ["input"]),
        bindings: vec![binding],
        context_width: width,
        confidence: 0.9,
        latency_est: None,
    }
}

/// Offers one fixed chain whenever the history has `at` entries.
struct Scripted {
    at: usize,
    chain: Vec<ChainStep<f64>>,
    catalog: Catalog,
}

impl BranchSource for Scripted {
    fn generate(&self, ctx: &SourceContext<'_>) -> Vec<Hypothesis> {
        if ctx.history.len() != self.at {
            return Vec::new();
        }
        build_hypothesis(&self.chain, &self.catalog, 4, ctx.history.to_vec())
            .into_iter()
            .collect()
    }
}

fn policy(budget: f64) -> Policy {
    let mut max_safety = BTreeMap::new();
    max_safety.insert("w".to_string(), SafetyLevel::Level2Staged);
    Policy {
        beam_k: 4,
        budget_b: Profile::new(budget, budget, budget, 2.0 * budget).unwrap(),
        lambda: 1.0,
        mu: 1.0,
        horizon_h: 4,
        fanout_limit: 2,
        max_safety,
        preempt_cost_eps: 0.0,
        binding_threshold: 0.8,
        capacity: Profile::new(1.0, 1.0, 1.0, 2.0).unwrap(),
        interference: InterferenceConfig {
            mode: "proportional_share".into(),
            capacity: Profile::new(1.0, 1.0, 1.0, 2.0).unwrap(),
            coefficients: None,
        },
    }
}

fn runtime(policy: Policy, chain: Vec<ChainStep<f64>>) -> (Runtime, FakeEnv) {
    let env = FakeEnv::new();
    let catalog = Arc::new(env.catalog());
    let source = Scripted {
        at: 0,
        chain,
        catalog: (*catalog).clone(),
    };
    let rt = Runtime::new(policy, Arc::new(PatternLibrary::empty()), catalog, Box::new(source));
    (rt, env)
}

/// Runs node events until nothing is running, as the simulator would.
fn drain(rt: &mut Runtime, env: &FakeEnv, until: Ms) -> Option<Invocation> {
    loop {
        let mut wake = rt.wakeups();
        wake.sort_by(|x, y| x.0.total_cmp(&y.0));
        let &(t, exec, version) = wake.first()?;
        if t > until {
            return None;
        }
        if let NodeEvent::Authoritative(inv) = rt.on_node_done(t, exec, version, env) {
            return Some(inv);
        }
    }
}

#[test]
fn completed_node_is_reused_and_chain_continues() {
    let chain = vec![
        step("a", BindingFn::constant("input", "x"), 0),
        step("z", from_prev_result(), 1),
    ];
    let (mut rt, env) = runtime(policy(0.5), chain);
    rt.start(&env);
    assert_eq!(rt.executions.len(), 1);
    drain(&mut rt, &env, 1000.0);
    let first = rt.on_reason_end(100.0, call(0, "a", "x"), &env);
    let CallOutcome::Reused(inv) = first else { panic!("{first:?}") };
    assert_eq!(inv.result["out"], "a(x)");
    rt.on_tool_return(100.0, &call(0, "a", "x"), &inv, &env);
    let second = rt.on_reason_end(150.0, call(1, "z", "a(x)"), &env);
    assert!(matches!(second, CallOutcome::Reused(_)), "{second:?}");
    assert_eq!(rt.counters.reused, 2);
    let actions: Vec<_> = rt.log.iter().map(|d| d.action).collect();
    assert_eq!(actions, [Action::Admit, Action::Reuse, Action::Reuse]);
}

#[test]
fn running_node_is_promoted_and_finishes_at_full_speed() {
    let (mut rt, env) = runtime(policy(0.5), vec![step("a", BindingFn::constant("input", "x"), 0)]);
    rt.start(&env);
    rt.wakeups();
    let out = rt.on_reason_end(10.0, call(0, "a", "x"), &env);
    assert!(matches!(out, CallOutcome::Promoted { .. }), "{out:?}");
    let inv = drain(&mut rt, &env, 1000.0).expect("promoted call completes");
    assert_eq!(rt.clock(), 40.0);
    assert_eq!(inv.result["out"], "a(x)");
    assert!(rt.executions.is_empty());
    assert_eq!(rt.counters.auth_work_ms + rt.counters.replaced_work_ms, 40.0);
}

#[test]
fn argument_mismatch_squashes() {
    let (mut rt, env) = runtime(policy(0.5), vec![step("a", BindingFn::constant("input", "x"), 0)]);
    rt.start(&env);
    drain(&mut rt, &env, 1000.0);
    let out = rt.on_reason_end(100.0, call(0, "a", "other"), &env);
    let CallOutcome::Run { start, latency, .. } = out else { panic!("{out:?}") };
    assert_eq!((start, latency), (100.0, 40.0));
    assert_eq!(rt.counters.squashed, 1);
    assert!(rt.log.iter().any(|d| d.action == Action::Squash && d.phase == 1));
}

#[test]
fn finished_preparation_resumes_warm() {
    // The tool's binding needs a result that never exists, so only the
    // preparation runs.
    let (mut rt, env) = runtime(policy(0.5), vec![step("b", from_prev_result(), 1)]);
    rt.start(&env);
    drain(&mut rt, &env, 1000.0);
    let out = rt.on_reason_end(100.0, call(0, "b", "q"), &env);
    let CallOutcome::Run { latency, .. } = out else { panic!("{out:?}") };
    assert_eq!(latency, 50.0);
    assert_eq!(rt.counters.prefix_resumed, 1);
    assert_eq!(rt.counters.replaced_work_ms, 10.0);
}

#[test]
fn zero_budget_admits_nothing() {
    let (mut rt, env) = runtime(policy(0.0), vec![step("a", BindingFn::constant("input", "x"), 0)]);
    rt.start(&env);
    assert!(rt.executions.is_empty());
    assert!(rt.log.is_empty());
}

#[test]
fn unmatched_call_squashes_every_branch() {
    let mut p = policy(1.0);
    p.preempt_cost_eps = 2.5;
    let (mut rt, env) = runtime(
        p,
        vec![
            step("a", BindingFn::constant("input", "x"), 0),
            step("z", from_prev_result(), 1),
        ],
    );
    rt.start(&env);
    // A second branch headed by another tool.
    let extra = build_hypothesis(
        &[step("z", BindingFn::constant("input", "y"), 0)],
        &env.catalog(),
        4,
        Vec::new(),
    )
    .unwrap();
    rt.beam.hypotheses.push(crate::hypothesis::Ranked {
        hypothesis: extra,
        score: 1.0,
    });
    rt.pump(&env);
    rt.wakeups();
    let reserved = rt.spec_reserved();
    assert!(reserved.get(crate::resource::Dim::Cpu) > 0.5, "{reserved:?}");
    assert_eq!(rt.executions.len(), 2);
    // Both are squashed at phase 1, so nothing is left to preempt and no
    // preemption delay is charged.
    let out = rt.on_reason_end(5.0, call(0, "b", "q"), &env);
    assert!(matches!(out, CallOutcome::Run { start: 5.0, .. }), "{out:?}");
    assert_eq!(rt.counters.squashed, 2);
    rt.check_invariants().unwrap();
}

#[test]
fn phase2_preempts_until_there_is_room() {
    let mut p = policy(1.0);
    p.preempt_cost_eps = 2.5;
    let (mut rt, env) = runtime(p, vec![step("a", BindingFn::constant("input", "x"), 0)]);
    rt.start(&env);
    rt.wakeups();
    rt.executions[0].reserved = Profile::new(0.8, 0.1, 0.1, 0.4).unwrap();
    rt.auth_demand = Profile::new(0.5, 0.1, 0.1, 0.4).unwrap();
    assert_eq!(rt.phase2_protect(), 1);
    assert_eq!(rt.executions[0].status, ExecStatus::Preempted);
    assert_eq!(rt.log.last().unwrap().action, Action::Preempt);
    assert!(rt.spec_reserved().is_zero());
}

#[test]
fn staged_write_waits_for_barrier_and_commits_on_reuse() {
    let chain = vec![
        step("a", BindingFn::constant("input", "x"), 0),
        step("w", from_prev_result(), 1),
    ];
    let (mut rt, env) = runtime(policy(0.5), chain);
    rt.start(&env);
    drain(&mut rt, &env, 1000.0);
    let e = &rt.executions[0];
    assert_eq!(e.frontier(), Frontier::Barrier(1));
    assert_eq!(rt.base.epoch, 0);
    let CallOutcome::Reused(inv) = rt.on_reason_end(100.0, call(0, "a", "x"), &env) else {
        panic!()
    };
    rt.on_tool_return(100.0, &call(0, "a", "x"), &inv, &env);
    drain(&mut rt, &env, 1000.0);
    assert!(rt.executions[0].sandbox.has_staged_writes());
    assert_eq!(rt.base.get(Space::Files, "a(x)"), None);
    let CallOutcome::Reused(_) = rt.on_reason_end(300.0, call(1, "w", "a(x)"), &env) else {
        panic!()
    };
    assert_eq!(rt.base.get(Space::Files, "a(x)"), Some("by-w"));
    assert!(matches!(
        rt.base.mutations().last().unwrap().0,
        crate::sandbox::MutationSource::Commit(_)
    ));
}

#[test]
fn disallowed_level_stops_the_prefix() {
    let mut p = policy(0.5);
    p.max_safety.clear();
    let chain = vec![
        step("a", BindingFn::constant("input", "x"), 0),
        step("w", from_prev_result(), 1),
    ];
    let (mut rt, env) = runtime(p, chain);
    rt.start(&env);
    let e = &rt.executions[0];
    assert_eq!(e.steps.len(), 1);
    assert_eq!(e.steps[0].tool, "a");
}

#[test]
fn stronger_match_wins() {
    let env = FakeEnv::new();
    let cat = env.catalog();
    let base = crate::sandbox::AuthoritativeState::new();
    let h = build_hypothesis(&[step("a", BindingFn::constant("input", "x"), 0)], &cat, 4, Vec::new()).unwrap();
    let mk = |id| {
        BranchExecution::new(
            id,
            h.clone(),
            crate::sandbox::SandboxState::fork(id, &base),
            Utility::zero(),
            0.0,
        )
    };
    let mut running = mk(1);
    running.start_next(&env, &[]);
    let mut done = mk(2);
    done.start_next(&env, &[]);
    done.complete_running().unwrap();
    let c = call(0, "a", "x");
    assert_eq!(
        match_authoritative(&[running.clone()], &c, &base),
        MatchOutcome::Running { exec: 1, part: Part::Tool }
    );
    assert_eq!(
        match_authoritative(&[running, done], &c, &base),
        MatchOutcome::Completed { exec: 2 }
    );
}

#[test]
fn node_done_before_the_call_costs_nothing() {
    let (mut rt, env) = runtime(policy(0.5), vec![step("s", BindingFn::constant("input", "x"), 0)]);
    rt.start(&env);
    assert!(drain(&mut rt, &env, 100.0).is_none());
    assert_eq!(rt.clock(), 80.0);
    let out = rt.on_reason_end(100.0, call(0, "s", "x"), &env);
    assert!(matches!(out, CallOutcome::Reused(_)), "{out:?}");
    assert_eq!(rt.counters.replaced_work_ms, 80.0);
    assert_eq!(rt.counters.auth_work_ms, 0.0);
}

#[test]
fn promotion_pays_only_the_remainder() {
    let (mut rt, env) = runtime(policy(0.5), vec![step("s", BindingFn::constant("input", "x"), 0)]);
    rt.start(&env);
    rt.wakeups();
    // 60% of the 80 ms node is done at t=48.
    let out = rt.on_reason_end(48.0, call(0, "s", "x"), &env);
    assert!(matches!(out, CallOutcome::Promoted { .. }), "{out:?}");
    drain(&mut rt, &env, 1000.0).expect("promoted call completes");
    assert_eq!(rt.clock(), 80.0);
    assert_eq!(rt.counters.auth_work_ms, 32.0);
    assert_eq!(rt.counters.replaced_work_ms, 48.0);
}

#[test]
fn promoted_work_is_never_preempted() {
    let (mut rt, env) = runtime(policy(0.5), vec![step("s", BindingFn::constant("input", "x"), 0)]);
    rt.start(&env);
    rt.wakeups();
    let CallOutcome::Promoted { exec } = rt.on_reason_end(10.0, call(0, "s", "x"), &env) else {
        panic!()
    };
    rt.auth_demand = rt.policy.capacity;
    assert_eq!(rt.phase2_protect(), 0);
    let e = rt.executions.iter().find(|e| e.id == exec).unwrap();
    assert_eq!(e.status, ExecStatus::Promoted);
}

#[test]
fn preempted_branch_keeps_its_finished_steps() {
    let chain = vec![
        step("a", BindingFn::constant("input", "x"), 0),
        step("z", from_prev_result(), 1),
        step("w", from_prev_result(), 1),
    ];
    let (mut rt, env) = runtime(policy(1.0), chain);
    rt.start(&env);
    drain(&mut rt, &env, 1000.0);
    assert_eq!(rt.executions[0].frontier(), Frontier::Barrier(2));
    rt.auth_demand = rt.policy.capacity;
    assert_eq!(rt.phase2_protect(), 1);
    rt.auth_demand = Profile::zero();
    let first = rt.on_reason_end(100.0, call(0, "a", "x"), &env);
    let CallOutcome::Reused(inv) = first else { panic!("{first:?}") };
    rt.on_tool_return(100.0, &call(0, "a", "x"), &inv, &env);
    let second = rt.on_reason_end(120.0, call(1, "z", "a(x)"), &env);
    let CallOutcome::Reused(inv) = second else { panic!("{second:?}") };
    rt.on_tool_return(120.0, &call(1, "z", "a(x)"), &inv, &env);
    assert_eq!(rt.counters.reused, 2);
    // The preempted branch never resumes its staged write; a fresh branch
    // admitted after the second reuse is already running it.
    let third = rt.on_reason_end(140.0, call(2, "w", "z(a(x))"), &env);
    assert!(matches!(third, CallOutcome::Promoted { exec: 2 }), "{third:?}");
    assert!(rt.log.iter().any(|d| d.action == Action::Squash && d.branch == 1));
    rt.check_invariants().unwrap();
}
