use crate::sandbox::Effect;
use crate::trace::{ArgMap, OutcomeClass};
use crate::Ms;

/// What running a tool call produces. Deterministic in (tool, args).
#[derive(Debug, Clone, PartialEq)]
pub struct Invocation {
    pub result: ArgMap,
    pub outcome: OutcomeClass,
    /// Cold latency: warm-up plus work.
    pub latency: Ms,
    pub warmup: Ms,
    pub effect: Effect,
}

impl Invocation {
    pub fn warm_latency(&self) -> Ms {
        self.latency - self.warmup
    }
}

/// The tools the scheduler runs, authoritatively or inside sandboxes.
pub trait ToolEnvironment {
    fn warmup(&self, tool: &str) -> Ms;
    fn invoke(&self, tool: &str, args: &ArgMap) -> Invocation;
}

/// One authoritative tool call issued by the agent.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolCall {
    pub step: usize,
    pub tool: String,
    pub args: ArgMap,
}
