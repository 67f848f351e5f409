//! Offline mining of `(context, next tool, bindings, confidence)` regularities
//! from agent traces.
//!
//! Contexts are contiguous windows of the tool-signature stream. The miner
//! grows window prefixes over a pseudo-projected database (a list of
//! occurrence end positions), pruning any extension whose window count falls
//! below the support floor.

mod binding;
mod library;

use std::collections::BTreeMap;

use thiserror::Error;

use crate::scalar::Scalar;
use crate::trace::{AgentTrace, EventSignature};

pub use binding::{
    binding_accuracy, infer_bindings, ArgValue, BindingFn, BindingSource, ContextEvent, FieldPath,
    Transform, TEMPLATE_HOLE,
};
pub use library::{GapTable, LibraryError, PatternLibrary};

pub const MAX_CONTEXT_W: usize = 8;
pub const DEFAULT_BINDING_THRESHOLD: f64 = 0.8;

#[derive(Debug, Error, PartialEq)]
pub enum MiningError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("min_support must be at least 1")]
    ZeroSupport,
    #[error("context window {0} outside 1..={MAX_CONTEXT_W}")]
    Window(usize),
}

/// A mined regularity: after `context`, the agent next called `predicted`.
#[derive(Debug, Clone, PartialEq)]
pub struct PatternTuple {
    pub context: Vec<EventSignature>,
    pub predicted: EventSignature,
    pub bindings: Vec<BindingFn>,
    /// Windows `context ++ [predicted]` in the corpus.
    pub support: u64,
    /// Windows equal to `context` that are followed by some tool.
    pub context_support: u64,
    /// Distinct tools observed right after `context`.
    pub distinct_next: u64,
}

impl PatternTuple {
    /// Laplace-smoothed confidence as an exact ratio.
    pub fn confidence_ratio(&self) -> (u64, u64) {
        (self.support + 1, self.context_support + self.distinct_next)
    }

    pub fn confidence<S: Scalar>(&self) -> S {
        let (n, d) = self.confidence_ratio();
        S::from_count(n) / S::from_count(d)
    }

    pub fn confidence_p(&self) -> f64 {
        self.confidence::<f64>()
    }
}

/// Mines every contiguous-context pattern with support at least `min_support`
/// and context length at most `max_context_w`. Bindings are left empty; see
/// [`infer_bindings`] and [`PatternLibrary::build`].
pub fn mine_patterns(
    corpus: &[AgentTrace],
    min_support: u64,
    max_context_w: usize,
) -> Result<Vec<PatternTuple>, MiningError> {
    if corpus.is_empty() {
        return Err(MiningError::EmptyCorpus);
    }
    if min_support == 0 {
        return Err(MiningError::ZeroSupport);
    }
    if !(1..=MAX_CONTEXT_W).contains(&max_context_w) {
        return Err(MiningError::Window(max_context_w));
    }
    let streams: Vec<Vec<EventSignature>> = corpus.iter().map(AgentTrace::signature_stream).collect();
    Ok(mine_streams(&streams, min_support, max_context_w))
}

pub(crate) fn mine_streams(
    streams: &[Vec<EventSignature>],
    min_support: u64,
    max_context_w: usize,
) -> Vec<PatternTuple> {
    // Length-1 projections: every position of every symbol.
    let mut roots: BTreeMap<&EventSignature, Vec<(usize, usize)>> = BTreeMap::new();
    for (t, stream) in streams.iter().enumerate() {
        for (i, sym) in stream.iter().enumerate() {
            roots.entry(sym).or_default().push((t, i + 1));
        }
    }
    let mut out = Vec::new();
    let mut prefix = Vec::new();
    for (sym, occ) in roots {
        if (occ.len() as u64) < min_support {
            continue;
        }
        prefix.push(sym.clone());
        grow(streams, &mut prefix, &occ, min_support, max_context_w, &mut out);
        prefix.pop();
    }
    out.sort_by(|a, b| {
        (a.context.len(), &a.context, &a.predicted).cmp(&(b.context.len(), &b.context, &b.predicted))
    });
    out
}

/// `occ` holds `(trace, end)` for every window equal to `prefix`.
fn grow(
    streams: &[Vec<EventSignature>],
    prefix: &mut Vec<EventSignature>,
    occ: &[(usize, usize)],
    min_support: u64,
    max_w: usize,
    out: &mut Vec<PatternTuple>,
) {
    let mut next: BTreeMap<&EventSignature, Vec<(usize, usize)>> = BTreeMap::new();
    for &(t, end) in occ {
        if let Some(sym) = streams[t].get(end) {
            next.entry(sym).or_default().push((t, end + 1));
        }
    }
    let context_support: u64 = next.values().map(|v| v.len() as u64).sum();
    let distinct_next = next.len() as u64;
    for (sym, ext) in next {
        let support = ext.len() as u64;
        if support < min_support {
            continue;
        }
        out.push(PatternTuple {
            context: prefix.clone(),
            predicted: sym.clone(),
            bindings: Vec::new(),
            support,
            context_support,
            distinct_next,
        });
        if prefix.len() < max_w {
            prefix.push(sym.clone());
            grow(streams, prefix, &ext, min_support, max_w, out);
            prefix.pop();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{ArgMap, OutcomeClass, TraceEvent};

    fn chain_trace(tools: &[&str]) -> AgentTrace {
        let mut events = Vec::new();
        let mut t = 0.0;
        for tool in tools {
            events.push(TraceEvent::call(t, tool, ArgMap::new()));
            t += 1.0;
            events.push(TraceEvent::ret(t, tool, OutcomeClass::Success, ArgMap::new()));
            t += 1.0;
        }
        AgentTrace::from_events(events).unwrap()
    }

    fn sig(tool: &str) -> EventSignature {
        EventSignature::with_fields(tool, OutcomeClass::Success, [])
    }

    fn find<'a>(ps: &'a [PatternTuple], ctx: &[&str], next: &str) -> Option<&'a PatternTuple> {
        let ctx: Vec<_> = ctx.iter().map(|t| sig(t)).collect();
        ps.iter().find(|p| p.context == ctx && p.predicted == sig(next))
    }

    #[test]
    fn identical_traces_single_successor() {
        let corpus: Vec<_> = (0..10).map(|_| chain_trace(&["A", "B", "C"])).collect();
        let ps = mine_patterns(&corpus, 5, 1).unwrap();
        let ab = find(&ps, &["A"], "B").unwrap();
        assert_eq!(ab.support, 10);
        assert_eq!(ab.confidence_ratio(), (11, 11));
        assert_eq!(ab.confidence_p(), 1.0);
    }

    #[test]
    fn mixed_successors_are_smoothed() {
        let mut corpus: Vec<_> = (0..7).map(|_| chain_trace(&["A", "B"])).collect();
        corpus.extend((0..3).map(|_| chain_trace(&["A", "D"])));
        let ps = mine_patterns(&corpus, 1, 1).unwrap();
        let ab = find(&ps, &["A"], "B").unwrap();
        assert_eq!(ab.confidence_ratio(), (8, 12));
        assert!((ab.confidence_p() - 0.6667).abs() < 1e-4);
        let ad = find(&ps, &["A"], "D").unwrap();
        assert_eq!(ad.confidence_ratio(), (4, 12));
    }

    #[test]
    fn support_floor_prunes() {
        let mut corpus: Vec<_> = (0..7).map(|_| chain_trace(&["A", "B"])).collect();
        corpus.extend((0..3).map(|_| chain_trace(&["A", "D"])));
        let ps = mine_patterns(&corpus, 5, 2).unwrap();
        assert!(find(&ps, &["A"], "D").is_none());
        // Confidence still counts the pruned successor class.
        assert_eq!(find(&ps, &["A"], "B").unwrap().confidence_ratio(), (8, 12));
    }

    #[test]
    fn preconditions() {
        assert_eq!(mine_patterns(&[], 1, 1).unwrap_err(), MiningError::EmptyCorpus);
        let c = vec![chain_trace(&["A"])];
        assert_eq!(mine_patterns(&c, 0, 1).unwrap_err(), MiningError::ZeroSupport);
        assert_eq!(mine_patterns(&c, 1, 9).unwrap_err(), MiningError::Window(9));
        assert_eq!(mine_patterns(&c, 1, 0).unwrap_err(), MiningError::Window(0));
    }

    #[test]
    fn longer_contexts() {
        let corpus = vec![chain_trace(&["A", "B", "C", "A", "B", "D"])];
        let ps = mine_patterns(&corpus, 1, 2).unwrap();
        let abc = find(&ps, &["A", "B"], "C").unwrap();
        assert_eq!((abc.support, abc.context_support, abc.distinct_next), (1, 2, 2));
        assert_eq!(find(&ps, &["B", "C"], "A").unwrap().support, 1);
        assert!(find(&ps, &["A", "B", "C"], "A").is_none());
    }
}
