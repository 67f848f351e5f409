//! Agent execution traces and their line-delimited file format.
//!
//! One event per line:
//!
//! ```text
//! t=<ms> kind=<k> tool=<name> outcome=<o> args={k:v,...} result={k:v,...}
//! ```
//!
//! Fields that do not apply to an event kind are omitted. Map values that
//! contain whitespace or any of `,{}:"\` are written double-quoted with
//! backslash escapes. Blank lines and lines starting with `#` are ignored.

mod format;
mod signature;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub use format::{parse_trace, write_trace};
pub use signature::{ArgShape, EventSignature, OutcomeClass};

pub type ArgMap = BTreeMap<String, String>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EventKind {
    ReasonStart,
    ReasonEnd,
    ToolCall,
    ToolReturn,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::ReasonStart => "reason_start",
            EventKind::ReasonEnd => "reason_end",
            EventKind::ToolCall => "tool_call",
            EventKind::ToolReturn => "tool_return",
        }
    }

    pub fn is_tool(self) -> bool {
        matches!(self, EventKind::ToolCall | EventKind::ToolReturn)
    }
}

impl fmt::Display for EventKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EventKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reason_start" => Ok(EventKind::ReasonStart),
            "reason_end" => Ok(EventKind::ReasonEnd),
            "tool_call" => Ok(EventKind::ToolCall),
            "tool_return" => Ok(EventKind::ToolReturn),
            other => Err(format!("unknown event kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub timestamp: f64,
    pub kind: EventKind,
    pub tool: Option<String>,
    /// Filled for both halves of a call/return pair once the trace is validated.
    pub signature: Option<EventSignature>,
    /// Only meaningful on `tool_return`.
    pub outcome: Option<OutcomeClass>,
    pub args: ArgMap,
    pub result: Option<ArgMap>,
}

impl TraceEvent {
    pub fn reason(timestamp: f64, kind: EventKind) -> Self {
        Self {
            timestamp,
            kind,
            tool: None,
            signature: None,
            outcome: None,
            args: ArgMap::new(),
            result: None,
        }
    }

    pub fn call(timestamp: f64, tool: &str, args: ArgMap) -> Self {
        Self {
            timestamp,
            kind: EventKind::ToolCall,
            tool: Some(tool.to_string()),
            signature: None,
            outcome: None,
            args,
            result: None,
        }
    }

    pub fn ret(timestamp: f64, tool: &str, outcome: OutcomeClass, result: ArgMap) -> Self {
        Self {
            timestamp,
            kind: EventKind::ToolReturn,
            tool: Some(tool.to_string()),
            signature: None,
            outcome: Some(outcome),
            args: ArgMap::new(),
            result: Some(result),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TraceError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: timestamp {t} precedes previous timestamp {prev}")]
    TimestampRegression { line: usize, t: f64, prev: f64 },
    #[error("unmatched call to `{tool}` at t={t}")]
    UnmatchedCall { tool: String, t: f64 },
    #[error("line {line}: return from `{tool}` without a pending call")]
    UnmatchedReturn { line: usize, tool: String },
}

/// A completed tool invocation extracted from a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct ToolStep {
    pub signature: EventSignature,
    pub args: ArgMap,
    pub result: ArgMap,
    pub call_t: f64,
    pub return_t: f64,
    /// Time between the previous tool's return (or trace start) and this call.
    pub gap_before: f64,
}

/// A validated, time-ordered event list for one agent session.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AgentTrace {
    pub events: Vec<TraceEvent>,
}

impl AgentTrace {
    /// Validates ordering and call/return pairing, filling in signatures.
    pub fn from_events(mut events: Vec<TraceEvent>) -> Result<Self, TraceError> {
        let mut prev = f64::NEG_INFINITY;
        for (i, ev) in events.iter().enumerate() {
            if ev.timestamp < prev {
                return Err(TraceError::TimestampRegression {
                    line: i + 1,
                    t: ev.timestamp,
                    prev,
                });
            }
            prev = ev.timestamp;
        }

        // FIFO pairing per tool name.
        let mut pending: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut pairs = Vec::new();
        for (i, ev) in events.iter().enumerate() {
            match ev.kind {
                EventKind::ToolCall => {
                    let tool = ev.tool.clone().ok_or_else(|| TraceError::Parse {
                        line: i + 1,
                        message: "tool_call without tool".into(),
                    })?;
                    pending.entry(tool).or_default().push(i);
                }
                EventKind::ToolReturn => {
                    let tool = ev.tool.clone().ok_or_else(|| TraceError::Parse {
                        line: i + 1,
                        message: "tool_return without tool".into(),
                    })?;
                    let queue = pending.get_mut(&tool).filter(|q| !q.is_empty()).ok_or(
                        TraceError::UnmatchedReturn {
                            line: i + 1,
                            tool: tool.clone(),
                        },
                    )?;
                    let call = queue.remove(0);
                    pairs.push((call, i));
                }
                _ => {}
            }
        }
        if let Some(&call) = pending.values().flatten().min() {
            let ev = &events[call];
            return Err(TraceError::UnmatchedCall {
                tool: ev.tool.clone().unwrap_or_default(),
                t: ev.timestamp,
            });
        }
        for (call, ret) in pairs {
            let outcome = events[ret].outcome.unwrap_or(OutcomeClass::Success);
            let sig = EventSignature::new(
                events[call].tool.clone().unwrap_or_default(),
                outcome,
                &events[call].args,
            );
            events[call].signature = Some(sig.clone());
            events[ret].signature = Some(sig);
        }
        Ok(Self { events })
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Completed tool invocations ordered by call time.
    pub fn steps(&self) -> Vec<ToolStep> {
        let mut open: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        let mut steps: Vec<(usize, ToolStep)> = Vec::new();
        for (i, ev) in self.events.iter().enumerate() {
            let Some(tool) = ev.tool.as_deref() else {
                continue;
            };
            match ev.kind {
                EventKind::ToolCall => open.entry(tool).or_default().push(i),
                EventKind::ToolReturn => {
                    if let Some(q) = open.get_mut(tool).filter(|q| !q.is_empty()) {
                        let c = q.remove(0);
                        let call = &self.events[c];
                        steps.push((
                            c,
                            ToolStep {
                                signature: call.signature.clone().unwrap_or_else(|| {
                                    EventSignature::new(
                                        tool,
                                        ev.outcome.unwrap_or(OutcomeClass::Success),
                                        &call.args,
                                    )
                                }),
                                args: call.args.clone(),
                                result: ev.result.clone().unwrap_or_default(),
                                call_t: call.timestamp,
                                return_t: ev.timestamp,
                                gap_before: 0.0,
                            },
                        ));
                    }
                }
                _ => {}
            }
        }
        steps.sort_by_key(|(c, _)| *c);
        let start = self.events.first().map_or(0.0, |e| e.timestamp);
        let mut prev_return = start;
        steps
            .into_iter()
            .map(|(_, mut s)| {
                s.gap_before = (s.call_t - prev_return).max(0.0);
                prev_return = s.return_t;
                s
            })
            .collect()
    }

    /// The tool-signature stream used for mining.
    pub fn signature_stream(&self) -> Vec<EventSignature> {
        self.steps().into_iter().map(|s| s.signature).collect()
    }
}
