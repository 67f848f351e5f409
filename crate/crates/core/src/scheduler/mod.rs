//! The four-phase speculative scheduler: confirm or promote branches that
//! match an authoritative call, preempt speculation the authoritative job
//! needs room for, dispatch authoritative work, then admit new branch
//! prefixes on the remaining slack.

mod admission;
mod env;
mod execution;
mod log;
mod policy;

use std::collections::BTreeSet;
use std::sync::Arc;

pub use admission::{
    brute_force_admit, feasible, greedy_admit, prefix_options, select_prefix, set_value, AdmissionInput, Admitted,
    BRUTE_FORCE_LIMIT,
};
pub use env::{Invocation, ToolCall, ToolEnvironment};
pub use execution::{BranchExecution, ExecStatus, Frontier, NodeRun, Part, RunState, StepRun};
pub use log::{Action, Decision};
pub use policy::{Policy, PolicyError};

use crate::hypothesis::{generate_hypotheses, refresh_beam, Beam};
use crate::mining::{ContextEvent, PatternLibrary};
use crate::sandbox::{AuthoritativeState, SandboxState};
use crate::scoring::Scorer;
use crate::trace::EventSignature;
use crate::{Catalog, Hypothesis, Interference, Ms, Profile, Utility};

/// How a speculative execution relates to an authoritative call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatchOutcome {
    /// The call's node already finished with identical arguments.
    Completed { exec: u64 },
    /// The call's node (or its preparation) is in flight.
    Running { exec: u64, part: Part },
    /// The preparation finished; the tool itself has not started.
    Prefix { exec: u64 },
    None,
}

impl MatchOutcome {
    fn strength(self) -> u8 {
        match self {
            MatchOutcome::Completed { .. } => 3,
            MatchOutcome::Running { .. } => 2,
            MatchOutcome::Prefix { .. } => 1,
            MatchOutcome::None => 0,
        }
    }
}

fn match_one(e: &BranchExecution, call: &ToolCall, base: &AuthoritativeState) -> MatchOutcome {
    if !matches!(e.status, ExecStatus::Active | ExecStatus::Preempted) || e.sandbox.is_stale(base) {
        return MatchOutcome::None;
    }
    let Some(step) = e.cursor_step() else {
        return MatchOutcome::None;
    };
    if step.tool != call.tool {
        return MatchOutcome::None;
    }
    let exec = e.id;
    if let Some(t) = &step.tool_run {
        match t.state {
            RunState::Done | RunState::Running => {
                if t.args.as_ref() != Some(&call.args) {
                    return MatchOutcome::None;
                }
                return if t.state == RunState::Done {
                    MatchOutcome::Completed { exec }
                } else {
                    MatchOutcome::Running { exec, part: Part::Tool }
                };
            }
            RunState::Pending | RunState::Dropped => {}
        }
    }
    match step.prep.as_ref().map(|p| p.state) {
        Some(RunState::Done) => MatchOutcome::Prefix { exec },
        Some(RunState::Running) => MatchOutcome::Running { exec, part: Part::Prep },
        _ => MatchOutcome::None,
    }
}

/// Strongest match of `call` over `execs`; ties go to the lowest id. Stale
/// sandboxes never match.
pub fn match_authoritative(execs: &[BranchExecution], call: &ToolCall, base: &AuthoritativeState) -> MatchOutcome {
    let mut best = MatchOutcome::None;
    for e in execs {
        let m = match_one(e, call, base);
        if m.strength() > best.strength() {
            best = m;
        }
    }
    best
}

/// Produces candidate branches from the agent's history.
pub trait BranchSource {
    fn generate(&self, ctx: &SourceContext<'_>) -> Vec<Hypothesis>;
}

/// What a [`BranchSource`] may look at.
pub struct SourceContext<'a> {
    /// Signatures of every returned authoritative call, oldest first.
    pub history: &'a [EventSignature],
    pub horizon_h: usize,
    pub fanout_limit: usize,
}

/// Chains mined patterns forward from the recent history.
pub struct LibrarySource {
    pub library: Arc<PatternLibrary>,
    pub catalog: Arc<Catalog>,
}

impl BranchSource for LibrarySource {
    fn generate(&self, ctx: &SourceContext<'_>) -> Vec<Hypothesis> {
        let w = self.library.max_context_w.min(ctx.history.len());
        let window = &ctx.history[ctx.history.len() - w..];
        generate_hypotheses(window, &self.library, &self.catalog, ctx.horizon_h, ctx.fanout_limit)
    }
}

/// Effect of a node completion event.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeEvent {
    Stale,
    Progress,
    /// A promoted branch finished the authoritative call.
    Authoritative(Invocation),
}

/// How the runtime served an authoritative call.
#[derive(Debug, Clone, PartialEq)]
pub enum CallOutcome {
    /// A completed branch node supplied the result; it returns now.
    Reused(Invocation),
    /// A branch became the authoritative job; its completion arrives as a
    /// node event.
    Promoted { exec: u64 },
    /// The call runs authoritatively for `latency` ms starting at `start`.
    Run { start: Ms, latency: Ms, invocation: Invocation },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Served {
    Reused,
    Promoted,
    Run,
}

/// Running totals the simulator turns into metrics.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Counters {
    pub admitted: u64,
    pub reused: u64,
    pub promoted: u64,
    pub prefix_resumed: u64,
    pub preempted: u64,
    pub squashed: u64,
    /// Executions with at least one node the agent used.
    pub useful_executions: u64,
    pub wasted_ms: Ms,
    pub spec_solo_ms: Ms,
    pub spec_wall_ms: Ms,
    /// Authoritative work actually executed.
    pub auth_work_ms: Ms,
    /// Authoritative work speculation supplied instead.
    pub replaced_work_ms: Ms,
}

/// Scheduler state for one agent session.
pub struct Runtime {
    pub policy: Policy,
    model: Interference,
    library: Arc<PatternLibrary>,
    catalog: Arc<Catalog>,
    source: Box<dyn BranchSource + Send>,
    pub base: AuthoritativeState,
    pub executions: Vec<BranchExecution>,
    pub beam: Beam<f64>,
    history: Vec<(ToolCall, Invocation)>,
    signatures: Vec<EventSignature>,
    inflight: Option<(ToolCall, Served)>,
    /// Demand of the authoritative job in flight, if any.
    auth_demand: Profile,
    pub log: Vec<Decision>,
    pub counters: Counters,
    clock: Ms,
    promoted_at: Ms,
    next_exec: u64,
    next_sandbox: u64,
}

impl Runtime {
    pub fn new(
        policy: Policy,
        library: Arc<PatternLibrary>,
        catalog: Arc<Catalog>,
        source: Box<dyn BranchSource + Send>,
    ) -> Self {
        let model = policy.interference_model();
        Self {
            policy,
            model,
            library,
            catalog,
            source,
            base: AuthoritativeState::new(),
            executions: Vec::new(),
            beam: Beam::default(),
            history: Vec::new(),
            signatures: Vec::new(),
            inflight: None,
            auth_demand: Profile::zero(),
            log: Vec::new(),
            counters: Counters::default(),
            clock: 0.0,
            promoted_at: 0.0,
            next_exec: 0,
            next_sandbox: 0,
        }
    }

    pub fn with_base(mut self, base: AuthoritativeState) -> Self {
        self.base = base;
        self
    }

    fn scorer(&self) -> Scorer<'_, f64> {
        Scorer {
            model: &self.model,
            library: &self.library,
            catalog: &self.catalog,
            horizon: self.policy.horizon_h,
            lambda: self.policy.lambda,
            mu: self.policy.mu,
        }
    }

    pub fn clock(&self) -> Ms {
        self.clock
    }

    /// Builds the initial beam from an empty history and admits from it.
    pub fn start(&mut self, env: &dyn ToolEnvironment) {
        self.regenerate(Vec::new());
        self.pump(env);
    }

    fn regenerate(&mut self, state: Vec<EventSignature>) {
        let fresh = self.source.generate(&SourceContext {
            history: &self.signatures,
            horizon_h: self.policy.horizon_h,
            fanout_limit: self.policy.fanout_limit,
        });
        let gap = self.gap_estimate();
        let scorer = self.scorer();
        self.beam = refresh_beam(&self.beam, fresh, self.policy.beam_k, state, |h| {
            scorer.expected_utility(h, &[], gap).eu
        });
    }

    /// Moves every running node forward to `now`.
    pub fn advance_to(&mut self, now: Ms) {
        let dt = now - self.clock;
        if dt > 0.0 {
            for e in &mut self.executions {
                e.advance(dt);
            }
            self.clock = now;
        }
    }

    fn fork(&mut self) -> SandboxState {
        self.next_sandbox += 1;
        SandboxState::fork(self.next_sandbox, &self.base)
    }

    fn record(&mut self, phase: u8, action: Action, branch: u64, utility: Utility) {
        self.log.push(Decision {
            t: self.clock,
            phase,
            action,
            branch,
            utility,
        });
    }

    fn gap_estimate(&self) -> Ms {
        let last = self.signatures.last();
        let gap = self.library.gaps.gap_after(last);
        match &self.inflight {
            Some((call, Served::Run)) => gap + self.catalog.profile(&call.tool).total_latency(),
            _ => gap,
        }
    }

    /// Finishes an execution: unused work becomes waste, staged effects of
    /// an unconfirmed branch are dropped.
    fn retire(&mut self, idx: usize, phase: u8, log_squash: bool) {
        let mut e = self.executions.remove(idx);
        let (solo, wall) = e.speculative_time();
        self.counters.spec_solo_ms += solo;
        self.counters.spec_wall_ms += wall;
        self.counters.wasted_ms += e.unused_wall();
        if e.runs().any(|(_, _, r)| r.used) {
            self.counters.useful_executions += 1;
        }
        if !e.sandbox.status.is_terminal() {
            let _ = e.sandbox.squash();
        }
        if log_squash {
            self.counters.squashed += 1;
            self.record(phase, Action::Squash, e.id, e.utility);
        }
    }

    fn position(&self, id: u64) -> Option<usize> {
        self.executions.iter().position(|e| e.id == id)
    }

    /// Confirms a completed node: its staged writes commit and the branch
    /// continues from a fresh sandbox.
    fn confirm_completed(&mut self, idx: usize) -> Invocation {
        let e = &mut self.executions[idx];
        let step = e.cursor;
        e.mark_used(step, Part::Prep);
        e.mark_used(step, Part::Tool);
        let inv = e.steps[step]
            .tool_run
            .as_ref()
            .and_then(|r| r.invocation.clone())
            .expect("completed node has a result");
        e.cursor += 1;
        if e.sandbox.has_staged_writes() {
            e.sandbox
                .commit(&mut self.base, true)
                .expect("fresh sandbox commits");
            self.next_sandbox += 1;
            let e = &mut self.executions[idx];
            e.sandbox = SandboxState::fork(self.next_sandbox, &self.base);
            e.sandbox.demand = e.reserved;
        }
        inv
    }

    /// Phases 1 to 4 for a call the agent just issued.
    pub fn on_reason_end(&mut self, now: Ms, call: ToolCall, env: &dyn ToolEnvironment) -> CallOutcome {
        self.advance_to(now);
        let m = match_authoritative(&self.executions, &call, &self.base);
        let keep = match m {
            MatchOutcome::Completed { exec }
            | MatchOutcome::Running { exec, .. }
            | MatchOutcome::Prefix { exec } => Some(exec),
            MatchOutcome::None => None,
        };
        let mut i = 0;
        while i < self.executions.len() {
            if Some(self.executions[i].id) != keep {
                self.retire(i, 1, true);
            } else {
                i += 1;
            }
        }
        let demand = self.catalog.profile(&call.tool).rho;
        let outcome = match m {
            MatchOutcome::Completed { exec } => {
                let idx = self.position(exec).expect("matched execution");
                let inv = self.confirm_completed(idx);
                self.counters.reused += 1;
                self.counters.replaced_work_ms += inv.latency;
                let u = self.executions[idx].utility;
                self.record(1, Action::Reuse, exec, u);
                if self.executions[idx].cursor >= self.executions[idx].steps.len() {
                    self.retire(idx, 1, false);
                }
                self.inflight = Some((call.clone(), Served::Reused));
                CallOutcome::Reused(inv)
            }
            MatchOutcome::Running { exec, .. } => {
                let idx = self.position(exec).expect("matched execution");
                let e = &mut self.executions[idx];
                e.status = ExecStatus::Promoted;
                e.slowdown = 1.0;
                e.bind_promoted_call(&call.args);
                e.truncate_after_cursor();
                e.reserved = Profile::zero();
                let u = e.utility;
                self.counters.promoted += 1;
                self.record(1, Action::Promote, exec, u);
                self.auth_demand = demand;
                self.promoted_at = now;
                self.inflight = Some((call.clone(), Served::Promoted));
                CallOutcome::Promoted { exec }
            }
            MatchOutcome::Prefix { .. } | MatchOutcome::None => {
                let inv = env.invoke(&call.tool, &call.args);
                let latency = if let MatchOutcome::Prefix { exec } = m {
                    let idx = self.position(exec).expect("matched execution");
                    let step = self.executions[idx].cursor;
                    self.executions[idx].mark_used(step, Part::Prep);
                    let u = self.executions[idx].utility;
                    self.record(1, Action::Reuse, exec, u);
                    self.retire(idx, 1, false);
                    self.counters.prefix_resumed += 1;
                    self.counters.replaced_work_ms += inv.warmup;
                    inv.warm_latency()
                } else {
                    inv.latency
                };
                self.counters.auth_work_ms += latency;
                self.auth_demand = demand;
                self.inflight = Some((call.clone(), Served::Run));
                let preempted = self.phase2_protect();
                CallOutcome::Run {
                    start: now + preempted as f64 * self.policy.preempt_cost_eps,
                    latency,
                    invocation: inv,
                }
            }
        };
        if matches!(outcome, CallOutcome::Promoted { .. }) {
            self.phase2_protect();
        }
        let advanced = self.beam.advance(&call.tool);
        let state = self.beam.generation_state.clone();
        let gap = self.gap_estimate();
        let scorer = self.scorer();
        self.beam = refresh_beam(&Beam::default(), advanced, self.policy.beam_k, state, |h| {
            scorer.expected_utility(h, &[], gap).eu
        });
        self.pump(env);
        outcome
    }

    /// Phase 2: preempts the lowest-utility branches until speculative
    /// reservations fit beside authoritative demand. Returns how many were
    /// preempted.
    fn phase2_protect(&mut self) -> usize {
        let mut count = 0;
        loop {
            let room = self.policy.capacity.saturating_sub(&self.auth_demand);
            if self.spec_reserved().fits_within(&room) {
                return count;
            }
            let victim = self
                .executions
                .iter()
                .filter(|e| e.status == ExecStatus::Active && !e.reserved.is_zero())
                .min_by(|a, b| a.utility.eu.total_cmp(&b.utility.eu).then(a.id.cmp(&b.id)))
                .map(|e| e.id);
            let Some(id) = victim else {
                return count;
            };
            let idx = self.position(id).expect("victim exists");
            let e = &mut self.executions[idx];
            e.drop_running();
            e.status = ExecStatus::Preempted;
            let _ = e.sandbox.preempt();
            let u = e.utility;
            self.counters.preempted += 1;
            self.record(2, Action::Preempt, id, u);
            count += 1;
        }
    }

    /// Sum of reservations held by active speculative branches.
    pub fn spec_reserved(&self) -> Profile {
        Profile::sum(
            self.executions
                .iter()
                .filter(|e| e.status == ExecStatus::Active)
                .map(|e| &e.reserved),
        )
    }

    /// Authoritative demand currently in flight.
    pub fn auth_demand(&self) -> Profile {
        self.auth_demand
    }

    /// Slack phase 4 may hand out: `min(capacity - auth, budget) - reserved`.
    pub fn residual(&self) -> Profile {
        self.policy
            .capacity
            .saturating_sub(&self.auth_demand)
            .meet(&self.policy.budget_b)
            .saturating_sub(&self.spec_reserved())
    }

    /// The agent received the result of `call`.
    pub fn on_tool_return(&mut self, now: Ms, call: &ToolCall, inv: &Invocation, env: &dyn ToolEnvironment) {
        self.advance_to(now);
        if let Some((_, Served::Run)) = &self.inflight {
            self.base.apply_authoritative(&inv.effect);
        }
        self.inflight = None;
        self.auth_demand = Profile::zero();
        self.history.push((call.clone(), inv.clone()));
        self.signatures
            .push(EventSignature::new(&call.tool, inv.outcome, &call.args));
        let w = self.library.max_context_w.min(self.signatures.len());
        let state = self.signatures[self.signatures.len() - w..].to_vec();
        self.regenerate(state);
        self.pump(env);
    }

    /// A node finished. Stale events (superseded by a later wake-up) are
    /// ignored.
    pub fn on_node_done(&mut self, now: Ms, exec: u64, version: u64, env: &dyn ToolEnvironment) -> NodeEvent {
        self.advance_to(now);
        let Some(idx) = self.position(exec) else {
            return NodeEvent::Stale;
        };
        if self.executions[idx].version != version {
            return NodeEvent::Stale;
        }
        let done = self.executions[idx]
            .complete_running()
            .expect("speculative effects stay within the safety level");
        let mut out = NodeEvent::Progress;
        let e = &mut self.executions[idx];
        if e.status == ExecStatus::Promoted && done == Some((e.cursor, Part::Tool)) {
            let step = e.cursor;
            e.mark_used(step, Part::Prep);
            e.mark_used(step, Part::Tool);
            let run = e.steps[step].tool_run.as_ref().expect("promoted tool run");
            let inv = run.invocation.clone().expect("finished run has a result");
            let auth_ms = now - self.promoted_at;
            self.counters.auth_work_ms += auth_ms;
            self.counters.replaced_work_ms += inv.latency - auth_ms;
            if e.sandbox.has_staged_writes() {
                // A base that moved since the fork leaves the staged copy
                // behind; the authoritative effect below still lands.
                let _ = e.sandbox.commit(&mut self.base, true);
            }
            self.base.apply_authoritative(&inv.effect);
            out = NodeEvent::Authoritative(inv);
            self.retire(idx, 1, false);
        }
        self.pump(env);
        out
    }

    /// Starts whatever can run, drops finished branches, then admits.
    fn pump(&mut self, env: &dyn ToolEnvironment) {
        let history: Vec<ContextEvent<'_>> = self
            .history
            .iter()
            .map(|(c, i)| ContextEvent {
                args: &c.args,
                result: Some(&i.result),
            })
            .chain(self.inflight.iter().map(|(c, _)| ContextEvent {
                args: &c.args,
                result: None,
            }))
            .collect();
        for e in &mut self.executions {
            if e.status == ExecStatus::Active && e.sandbox.history_h.is_empty() && e.sandbox.is_stale(&self.base) {
                self.next_sandbox += 1;
                e.sandbox = SandboxState::fork(self.next_sandbox, &self.base);
                e.sandbox.demand = e.reserved;
            }
            e.start_next(env, &history);
            if e.status == ExecStatus::Active {
                e.reserved = e.remaining_demand();
                e.sandbox.demand = e.reserved;
            }
        }
        drop(history);
        self.phase4_admit(env);
    }

    /// Phase 4: greedy admission of branch prefixes onto the slack.
    fn phase4_admit(&mut self, env: &dyn ToolEnvironment) {
        if self.policy.speculation_disabled() || self.beam.is_empty() {
            return;
        }
        let candidates: Vec<Hypothesis> = self.beam.iter().cloned().collect();
        let busy: BTreeSet<String> = self
            .executions
            .iter()
            .filter(|e| match e.status {
                ExecStatus::Active => true,
                // A finished result waiting at the cursor is worth more than a rerun.
                ExecStatus::Preempted => e
                    .cursor_step()
                    .and_then(|s| s.tool_run.as_ref())
                    .is_some_and(|r| r.state == RunState::Done),
                _ => false,
            })
            .filter_map(|e| e.cursor_tool().map(str::to_owned))
            .collect();
        let active: Vec<&Hypothesis> = self
            .executions
            .iter()
            .filter(|e| e.status == ExecStatus::Active && e.is_running())
            .map(|e| &e.hypothesis)
            .collect();
        let gap = self.gap_estimate();
        let gap_fn = move |_: &Hypothesis| gap;
        let input = AdmissionInput {
            candidates: &candidates,
            active: &active,
            busy_tools: &busy,
            residual: self.residual(),
            policy: &self.policy,
            scorer: self.scorer(),
            gap_est: &gap_fn,
        };
        let admitted = greedy_admit(&input);
        drop(active);
        if admitted.is_empty() {
            return;
        }
        for a in admitted {
            let head = Some(a.prefix.entry_signature().tool.clone());
            let mut i = 0;
            while i < self.executions.len() {
                let e = &self.executions[i];
                if e.status == ExecStatus::Preempted && e.cursor_tool().map(str::to_owned) == head {
                    self.retire(i, 4, true);
                } else {
                    i += 1;
                }
            }
            self.next_exec += 1;
            let id = self.next_exec;
            let sandbox = self.fork();
            let exec = BranchExecution::new(id, a.prefix, sandbox, a.utility, self.clock);
            self.record(4, Action::Admit, id, a.utility);
            self.counters.admitted += 1;
            self.executions.push(exec);
        }
        let history: Vec<ContextEvent<'_>> = self
            .history
            .iter()
            .map(|(c, i)| ContextEvent {
                args: &c.args,
                result: Some(&i.result),
            })
            .chain(self.inflight.iter().map(|(c, _)| ContextEvent {
                args: &c.args,
                result: None,
            }))
            .collect();
        for e in &mut self.executions {
            if e.version == 0 {
                e.start_next(env, &history);
            }
        }
    }

    /// Recomputes co-run slowdowns and returns `(finish time, exec, version)`
    /// for every running node. Earlier wake-ups become stale.
    pub fn wakeups(&mut self) -> Vec<(Ms, u64, u64)> {
        let running: Vec<(u64, Profile)> = self
            .executions
            .iter()
            .filter(|e| e.status == ExecStatus::Active && e.is_running())
            .map(|e| (e.id, e.reserved))
            .collect();
        let auth = if self.inflight.is_some() { Some(self.auth_demand) } else { None };
        let mut out = Vec::new();
        for e in &mut self.executions {
            if !e.is_running() {
                continue;
            }
            if e.status == ExecStatus::Active {
                let others: Vec<Profile> = running
                    .iter()
                    .filter(|(id, _)| *id != e.id)
                    .map(|(_, p)| *p)
                    .chain(auth)
                    .collect();
                e.slowdown = self.model.slowdown(&e.reserved, &others);
            }
            e.version += 1;
            if let Some(ttc) = e.time_to_completion() {
                out.push((self.clock + ttc, e.id, e.version));
            }
        }
        out
    }

    /// Checks the budget and safety invariants that must hold between
    /// events. Returns a description of the first violation.
    pub fn check_invariants(&self) -> Result<(), String> {
        const TOL: f64 = 1e-9;
        let spec = self.spec_reserved();
        let room = self.policy.capacity.saturating_sub(&self.auth_demand);
        for (d, v) in spec.iter() {
            if v > self.policy.budget_b.get(d) + TOL {
                return Err(format!("t={}: speculative {} {v} exceeds budget", self.clock, d.name()));
            }
            if v > room.get(d) + TOL {
                return Err(format!(
                    "t={}: speculative {} {v} exceeds capacity left by authoritative work",
                    self.clock,
                    d.name()
                ));
            }
        }
        for e in self.executions.iter().filter(|e| e.status == ExecStatus::Active) {
            for (_, _, r) in e.runs() {
                if r.state == RunState::Pending {
                    continue;
                }
                let Some(i) = r.node else { continue };
                let n = &e.hypothesis.graph.nodes[i];
                if !self.policy.allows(&n.signature.tool, n.safety) {
                    return Err(format!("branch {} ran {} beyond its safety cap", e.id, n.node_id));
                }
            }
        }
        Ok(())
    }

    /// Retires everything still live; call once the session ends.
    pub fn finish(&mut self) {
        while !self.executions.is_empty() {
            self.retire(0, 1, false);
        }
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }
}

#[cfg(test)]
mod tests;
