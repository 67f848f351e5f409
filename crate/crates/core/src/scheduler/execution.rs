use crate::hypothesis::{NodeKind, SafetyLevel};
use crate::mining::{ArgValue, ContextEvent};
use crate::sandbox::{Effect, SandboxError, SandboxState, Space};
use crate::trace::ArgMap;
use crate::{Hypothesis, Ms, Profile, Utility};

use super::env::{Invocation, ToolEnvironment};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunState {
    Pending,
    Running,
    Done,
    Dropped,
}

/// Progress of one graph node inside an execution.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeRun {
    /// Index into the hypothesis graph; `None` for a tool node added at
    /// promotion time because the admitted prefix stopped before it.
    pub node: Option<usize>,
    pub state: RunState,
    pub solo_ms: Ms,
    /// Solo-equivalent milliseconds of work done.
    pub progress: Ms,
    pub wall_ms: Ms,
    pub args: Option<ArgMap>,
    pub invocation: Option<Invocation>,
    /// Work the agent ended up using.
    pub used: bool,
}

impl NodeRun {
    fn pending(node: Option<usize>) -> Self {
        Self {
            node,
            state: RunState::Pending,
            solo_ms: 0.0,
            progress: 0.0,
            wall_ms: 0.0,
            args: None,
            invocation: None,
            used: false,
        }
    }

    fn is_live(&self) -> bool {
        matches!(self.state, RunState::Pending | RunState::Running)
    }
}

/// One predicted tool call with its optional preparation and barrier.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRun {
    pub tool: String,
    pub prep: Option<NodeRun>,
    pub barrier: bool,
    pub tool_run: Option<NodeRun>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    Prep,
    Tool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecStatus {
    Active,
    /// Resources released. Completed steps stay reusable until the next
    /// authoritative call decides the branch's fate.
    Preempted,
    /// Reclassified as the authoritative job for `ExecutionView::cursor`.
    Promoted,
    Finished,
}

/// Where an execution stands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frontier {
    Run(usize, Part),
    /// Waiting for the agent to confirm every step before `usize`.
    Barrier(usize),
    Idle,
}

/// A running or paused speculative branch.
#[derive(Debug, Clone)]
pub struct BranchExecution {
    pub id: u64,
    pub hypothesis: Hypothesis,
    pub steps: Vec<StepRun>,
    /// Index of the first step the agent has not confirmed.
    pub cursor: usize,
    pub sandbox: SandboxState,
    pub status: ExecStatus,
    pub reserved: Profile,
    pub utility: Utility,
    pub admitted_at: Ms,
    /// Current co-run slowdown; 1 once promoted.
    pub slowdown: f64,
    /// Bumped whenever a pending completion event becomes stale.
    pub version: u64,
}

impl BranchExecution {
    /// Groups the prefix's nodes into steps. Model nodes are never run.
    pub fn new(id: u64, hypothesis: Hypothesis, sandbox: SandboxState, utility: Utility, now: Ms) -> Self {
        let mut steps: Vec<StepRun> = Vec::new();
        for i in hypothesis.order() {
            let node = &hypothesis.graph.nodes[i];
            let tool = node.signature.tool.clone();
            let open = steps
                .last_mut()
                .filter(|s| s.tool_run.is_none() && s.tool == tool);
            match node.kind {
                NodeKind::Model => {}
                NodeKind::Preparation => steps.push(StepRun {
                    tool,
                    prep: Some(NodeRun::pending(Some(i))),
                    barrier: false,
                    tool_run: None,
                }),
                NodeKind::Barrier => match open {
                    Some(s) => s.barrier = true,
                    None => steps.push(StepRun {
                        tool,
                        prep: None,
                        barrier: true,
                        tool_run: None,
                    }),
                },
                NodeKind::Tool => match open {
                    Some(s) => s.tool_run = Some(NodeRun::pending(Some(i))),
                    None => steps.push(StepRun {
                        tool,
                        prep: None,
                        barrier: false,
                        tool_run: Some(NodeRun::pending(Some(i))),
                    }),
                },
            }
        }
        let mut exec = Self {
            id,
            hypothesis,
            steps,
            cursor: 0,
            sandbox,
            status: ExecStatus::Active,
            reserved: Profile::zero(),
            utility,
            admitted_at: now,
            slowdown: 1.0,
            version: 0,
        };
        exec.reserved = exec.remaining_demand();
        exec.sandbox.demand = exec.reserved;
        exec
    }

    pub fn cursor_step(&self) -> Option<&StepRun> {
        self.steps.get(self.cursor)
    }

    pub fn cursor_tool(&self) -> Option<&str> {
        self.cursor_step().map(|s| s.tool.as_str())
    }

    pub fn is_live(&self) -> bool {
        matches!(self.status, ExecStatus::Active | ExecStatus::Promoted)
    }

    pub fn run(&self, step: usize, part: Part) -> Option<&NodeRun> {
        let s = self.steps.get(step)?;
        match part {
            Part::Prep => s.prep.as_ref(),
            Part::Tool => s.tool_run.as_ref(),
        }
    }

    fn run_mut(&mut self, step: usize, part: Part) -> Option<&mut NodeRun> {
        let s = self.steps.get_mut(step)?;
        match part {
            Part::Prep => s.prep.as_mut(),
            Part::Tool => s.tool_run.as_mut(),
        }
    }

    /// All runs in execution order.
    pub fn runs(&self) -> impl Iterator<Item = (usize, Part, &NodeRun)> {
        self.steps.iter().enumerate().flat_map(|(i, s)| {
            s.prep
                .iter()
                .map(move |r| (i, Part::Prep, r))
                .chain(s.tool_run.iter().map(move |r| (i, Part::Tool, r)))
        })
    }

    pub fn frontier(&self) -> Frontier {
        for (i, s) in self.steps.iter().enumerate() {
            if let Some(p) = &s.prep {
                if p.is_live() {
                    return Frontier::Run(i, Part::Prep);
                }
            }
            match &s.tool_run {
                Some(t) if t.is_live() => {
                    if s.barrier && self.cursor < i && t.state == RunState::Pending {
                        return Frontier::Barrier(i);
                    }
                    return Frontier::Run(i, Part::Tool);
                }
                Some(t) if t.state == RunState::Dropped => return Frontier::Idle,
                Some(_) => {}
                None => return Frontier::Idle,
            }
        }
        Frontier::Idle
    }

    pub fn running(&self) -> Option<(usize, Part)> {
        match self.frontier() {
            Frontier::Run(s, p) if self.run(s, p).map(|r| r.state) == Some(RunState::Running) => Some((s, p)),
            _ => None,
        }
    }

    pub fn is_running(&self) -> bool {
        self.running().is_some()
    }

    /// Peak demand over the nodes still to run.
    pub fn remaining_demand(&self) -> Profile {
        self.runs()
            .filter(|(_, _, r)| r.is_live())
            .filter_map(|(_, _, r)| r.node)
            .fold(Profile::zero(), |acc, i| acc.join(&self.hypothesis.graph.nodes[i].rho))
    }

    fn safety_of(&self, step: usize, part: Part) -> SafetyLevel {
        match self.run(step, part).and_then(|r| r.node) {
            Some(i) => self.hypothesis.graph.nodes[i].safety,
            None => SafetyLevel::NonSpeculative,
        }
    }

    /// Resolves a tool node's arguments against the authoritative history
    /// followed by this branch's unconfirmed results. `Err(true)` means an
    /// input is still in flight.
    fn resolve_args(&self, step: usize, history: &[ContextEvent<'_>]) -> Result<ArgMap, bool> {
        let Some(run) = self.run(step, Part::Tool) else {
            return Err(false);
        };
        if let Some(args) = &run.args {
            return Ok(args.clone());
        }
        let node = &self.hypothesis.graph.nodes[run.node.expect("prefix tool node")];
        let mut window: Vec<ContextEvent<'_>> = history.to_vec();
        for s in &self.steps[self.cursor..step] {
            let Some(t) = &s.tool_run else { return Err(false) };
            match (&t.args, &t.invocation) {
                (Some(a), Some(inv)) if t.state == RunState::Done => window.push(ContextEvent {
                    args: a,
                    result: Some(&inv.result),
                }),
                _ => return Err(true),
            }
        }
        let mut args = ArgMap::new();
        let pending = window.iter().any(|e| e.result.is_none());
        for b in &node.bindings {
            match b.apply_suffix(&window, node.context_width) {
                ArgValue::Bound(v) => {
                    args.insert(b.arg.clone(), v);
                }
                ArgValue::Unresolved => return Err(pending),
            }
        }
        if args.len() != node.signature.arg_shape.fields().count() {
            return Err(pending);
        }
        Ok(args)
    }

    /// Starts the next node if the execution is idle and can proceed.
    /// Unresolvable bindings drop the rest of the branch.
    pub fn start_next(&mut self, env: &dyn ToolEnvironment, history: &[ContextEvent<'_>]) {
        if !self.is_live() {
            return;
        }
        let Frontier::Run(step, part) = self.frontier() else {
            return;
        };
        if self.run(step, part).map(|r| r.state) != Some(RunState::Pending) {
            return;
        }
        let tool = self.steps[step].tool.clone();
        match part {
            Part::Prep => {
                let solo = env.warmup(&tool);
                let r = self.run_mut(step, part).expect("frontier run");
                r.solo_ms = solo;
                r.state = RunState::Running;
            }
            Part::Tool => {
                let args = match self.resolve_args(step, history) {
                    Ok(a) => a,
                    Err(true) => return,
                    Err(false) => {
                        self.drop_from(step);
                        return;
                    }
                };
                let inv = env.invoke(&tool, &args);
                let warm = self.steps[step]
                    .prep
                    .as_ref()
                    .is_some_and(|p| p.state == RunState::Done);
                let solo = if warm { inv.warm_latency() } else { inv.latency };
                let r = self.run_mut(step, part).expect("frontier run");
                r.solo_ms = solo.max(0.0);
                r.args = Some(args);
                r.invocation = Some(inv);
                r.state = RunState::Running;
            }
        }
        self.version += 1;
    }

    /// True when the next tool node's arguments wait on an in-flight call.
    pub fn waiting_on_input(&self, history: &[ContextEvent<'_>]) -> bool {
        match self.frontier() {
            Frontier::Run(step, Part::Tool) => {
                self.run(step, Part::Tool).map(|r| r.state) == Some(RunState::Pending)
                    && self.resolve_args(step, history) == Err(true)
            }
            _ => false,
        }
    }

    fn drop_from(&mut self, step: usize) {
        for s in &mut self.steps[step..] {
            for r in s.prep.iter_mut().chain(s.tool_run.iter_mut()) {
                if r.is_live() {
                    r.state = RunState::Dropped;
                }
            }
        }
        self.version += 1;
    }

    /// Drops everything after the cursor step; used on promotion.
    pub fn truncate_after_cursor(&mut self) {
        if self.cursor + 1 < self.steps.len() {
            self.drop_from(self.cursor + 1);
        }
    }

    pub fn advance(&mut self, dt: Ms) {
        if dt <= 0.0 {
            return;
        }
        let rate = if self.status == ExecStatus::Promoted { 1.0 } else { 1.0 / self.slowdown };
        if let Some((s, p)) = self.running() {
            let r = self.run_mut(s, p).expect("running node");
            r.progress = (r.progress + dt * rate).min(r.solo_ms);
            r.wall_ms += dt;
        }
    }

    /// Wall time until the running node finishes at the current rate.
    pub fn time_to_completion(&self) -> Option<Ms> {
        let (s, p) = self.running()?;
        let r = self.run(s, p)?;
        let rate_inv = if self.status == ExecStatus::Promoted { 1.0 } else { self.slowdown };
        Some(((r.solo_ms - r.progress) * rate_inv).max(0.0))
    }

    /// Finishes the running node. Preparation registers a warm session in
    /// the sandbox; a tool node stages its effect at the node's level.
    /// Returns the finished node.
    pub fn complete_running(&mut self) -> Result<Option<(usize, Part)>, SandboxError> {
        let Some((s, p)) = self.running() else {
            return Ok(None);
        };
        let level = self.safety_of(s, p);
        let tool = self.steps[s].tool.clone();
        let promoted_target = self.status == ExecStatus::Promoted && s == self.cursor && p == Part::Tool;
        let effect = {
            let r = self.run_mut(s, p).expect("running node");
            r.progress = r.solo_ms;
            r.state = RunState::Done;
            match p {
                Part::Prep => Some(Effect::write(Space::Env, format!("session:{tool}"), "warm")),
                Part::Tool => r.invocation.as_ref().map(|i| i.effect.clone()),
            }
        };
        if !promoted_target {
            if let Some(e) = effect {
                let level = if p == Part::Prep { SafetyLevel::Level0Prep } else { level };
                self.sandbox.apply_effect(e, level)?;
            }
        }
        self.version += 1;
        self.reserved = self.remaining_demand();
        self.sandbox.demand = self.reserved;
        Ok(Some((s, p)))
    }

    /// Wall time of work that was never used.
    pub fn unused_wall(&self) -> Ms {
        self.runs().filter(|(_, _, r)| !r.used).map(|(_, _, r)| r.wall_ms).sum()
    }

    /// Solo and wall time of speculative work done so far.
    pub fn speculative_time(&self) -> (Ms, Ms) {
        self.runs()
            .filter(|(_, _, r)| r.wall_ms > 0.0)
            .fold((0.0, 0.0), |(s, w), (_, _, r)| (s + r.progress, w + r.wall_ms))
    }

    pub(crate) fn mark_used(&mut self, step: usize, part: Part) {
        if let Some(r) = self.run_mut(step, part) {
            r.used = true;
        }
    }

    pub(crate) fn drop_running(&mut self) {
        if let Some((s, p)) = self.running() {
            let r = self.run_mut(s, p).expect("running node");
            r.state = RunState::Dropped;
        }
        self.drop_from(0);
        self.reserved = Profile::zero();
        self.sandbox.demand = Profile::zero();
    }

    /// Installs the authoritative call on the cursor step at promotion.
    pub(crate) fn bind_promoted_call(&mut self, args: &ArgMap) {
        let step = &mut self.steps[self.cursor];
        match &mut step.tool_run {
            Some(r) if r.state == RunState::Pending => r.args = Some(args.clone()),
            Some(_) => {}
            None => {
                let mut r = NodeRun::pending(None);
                r.args = Some(args.clone());
                step.tool_run = Some(r);
            }
        }
        step.barrier = false;
    }
}
