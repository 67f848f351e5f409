//! Late-binding argument functions: derive a predicted call's arguments from
//! the arguments and results of the events in its context window.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::trace::{AgentTrace, ArgMap, EventSignature, ToolStep};

use super::PatternTuple;

/// Placeholder substituted by [`Transform::TemplateSubstitute`].
pub const TEMPLATE_HOLE: &str = "{x}";

/// Where a binding reads its input: an argument or a result field of one
/// context event. `position` indexes the pattern's context window (0 = oldest).
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BindingSource {
    pub position: usize,
    pub field: FieldPath,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FieldPath {
    Arg(String),
    Result(String),
}

impl fmt::Display for FieldPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FieldPath::Arg(k) => write!(f, "args.{k}"),
            FieldPath::Result(k) => write!(f, "result.{k}"),
        }
    }
}

impl std::str::FromStr for FieldPath {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some(k) = s.strip_prefix("args.") {
            Ok(FieldPath::Arg(k.to_string()))
        } else if let Some(k) = s.strip_prefix("result.") {
            Ok(FieldPath::Result(k.to_string()))
        } else {
            Err(format!("field path `{s}` must start with `args.` or `result.`"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Transform {
    /// Pass a context event's argument through unchanged.
    Identity,
    /// Copy a context event's result field.
    FieldExtract,
    /// Substitute a context result field into `{x}` of the template.
    TemplateSubstitute(String),
    /// A value known ahead of time; never produced by inference.
    Constant(String),
}

impl Transform {
    pub fn name(&self) -> &'static str {
        match self {
            Transform::Identity => "identity",
            Transform::FieldExtract => "field_extract",
            Transform::TemplateSubstitute(_) => "template_substitute",
            Transform::Constant(_) => "constant",
        }
    }
}

/// Derives one argument of the predicted tool.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BindingFn {
    pub arg: String,
    pub source: BindingSource,
    pub transform: Transform,
}

/// A context event as seen by binding resolution.
#[derive(Debug, Clone, Copy)]
pub struct ContextEvent<'a> {
    pub args: &'a ArgMap,
    /// `None` while the event has not returned yet.
    pub result: Option<&'a ArgMap>,
}

impl<'a> From<&'a ToolStep> for ContextEvent<'a> {
    fn from(s: &'a ToolStep) -> Self {
        ContextEvent {
            args: &s.args,
            result: Some(&s.result),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArgValue {
    Bound(String),
    Unresolved,
}

impl ArgValue {
    pub fn bound(&self) -> Option<&str> {
        match self {
            ArgValue::Bound(v) => Some(v),
            ArgValue::Unresolved => None,
        }
    }
}

impl BindingFn {
    pub fn constant(arg: impl Into<String>, value: impl Into<String>) -> Self {
        Self {
            arg: arg.into(),
            source: BindingSource {
                position: 0,
                field: FieldPath::Arg(String::new()),
            },
            transform: Transform::Constant(value.into()),
        }
    }

    /// Applies the binding to a context window (oldest first) of exactly the
    /// pattern's width. Missing events or fields yield [`ArgValue::Unresolved`].
    pub fn apply(&self, window: &[ContextEvent<'_>]) -> ArgValue {
        if let Transform::Constant(v) = &self.transform {
            return ArgValue::Bound(v.clone());
        }
        let Some(ev) = window.get(self.source.position) else {
            return ArgValue::Unresolved;
        };
        let value = match &self.source.field {
            FieldPath::Arg(k) => ev.args.get(k),
            FieldPath::Result(k) => ev.result.and_then(|r| r.get(k)),
        };
        let Some(value) = value else {
            return ArgValue::Unresolved;
        };
        match &self.transform {
            Transform::Identity | Transform::FieldExtract => ArgValue::Bound(value.clone()),
            Transform::TemplateSubstitute(t) => ArgValue::Bound(t.replacen(TEMPLATE_HOLE, value, 1)),
            Transform::Constant(_) => unreachable!(),
        }
    }

    /// Same as [`BindingFn::apply`], where `history` may be longer than the
    /// context window; the window is its last `width` entries.
    pub fn apply_suffix(&self, history: &[ContextEvent<'_>], width: usize) -> ArgValue {
        if let Transform::Constant(v) = &self.transform {
            return ArgValue::Bound(v.clone());
        }
        if history.len() < width {
            return ArgValue::Unresolved;
        }
        self.apply(&history[history.len() - width..])
    }
}

/// Every occurrence of `pattern` in `corpus`: (context window, predicted step).
pub(crate) fn occurrences<'a>(
    steps: &'a [Vec<ToolStep>],
    context: &[EventSignature],
    predicted: &EventSignature,
) -> Vec<(&'a [ToolStep], &'a ToolStep)> {
    let w = context.len();
    let mut out = Vec::new();
    for trace in steps {
        for j in w..trace.len() {
            if &trace[j].signature == predicted
                && trace[j - w..j]
                    .iter()
                    .zip(context)
                    .all(|(s, c)| &s.signature == c)
            {
                out.push((&trace[j - w..j], &trace[j]));
            }
        }
    }
    out
}

fn hit_count<'a>(
    binding: &BindingFn,
    occs: &[(&'a [ToolStep], &'a ToolStep)],
) -> usize {
    occs.iter()
        .filter(|(ctx, target)| {
            let window: Vec<ContextEvent<'_>> = ctx.iter().map(ContextEvent::from).collect();
            match (binding.apply(&window), target.args.get(&binding.arg)) {
                (ArgValue::Bound(v), Some(want)) => &v == want,
                _ => false,
            }
        })
        .count()
}

/// Infers, for each argument of the pattern's predicted tool, the first
/// binding (identity, then field extraction, then template substitution) that
/// reproduces the observed value in at least `threshold` of the occurrences.
pub fn infer_bindings(corpus: &[AgentTrace], pattern: &PatternTuple, threshold: f64) -> Vec<BindingFn> {
    let steps: Vec<Vec<ToolStep>> = corpus.iter().map(AgentTrace::steps).collect();
    infer_bindings_in(&steps, pattern, threshold)
}

pub(crate) fn infer_bindings_in(
    steps: &[Vec<ToolStep>],
    pattern: &PatternTuple,
    threshold: f64,
) -> Vec<BindingFn> {
    let occs = occurrences(steps, &pattern.context, &pattern.predicted);
    if occs.is_empty() {
        return Vec::new();
    }
    let w = pattern.context.len();
    let mut bindings = Vec::new();
    for arg in pattern.predicted.arg_shape.fields() {
        let with_arg = occs
            .iter()
            .filter(|(_, t)| t.args.contains_key(arg))
            .count();
        if with_arg == 0 {
            continue;
        }
        let passes = |hits: usize| (hits as f64) / (with_arg as f64) >= threshold && hits > 0;

        // Most recent context position first.
        let positions: Vec<usize> = (0..w).rev().collect();
        let mut found = None;

        'classes: for class in 0..3 {
            let mut best: Option<(usize, BindingFn)> = None;
            for &p in &positions {
                let mut candidates: Vec<BindingFn> = Vec::new();
                match class {
                    0 => {
                        for k in pattern.context[p].arg_shape.fields() {
                            candidates.push(BindingFn {
                                arg: arg.to_string(),
                                source: BindingSource {
                                    position: p,
                                    field: FieldPath::Arg(k.to_string()),
                                },
                                transform: Transform::Identity,
                            });
                        }
                    }
                    1 | 2 => {
                        let keys: std::collections::BTreeSet<&String> =
                            occs.iter().flat_map(|(ctx, _)| ctx[p].result.keys()).collect();
                        for k in keys {
                            let source = BindingSource {
                                position: p,
                                field: FieldPath::Result(k.clone()),
                            };
                            if class == 1 {
                                candidates.push(BindingFn {
                                    arg: arg.to_string(),
                                    source,
                                    transform: Transform::FieldExtract,
                                });
                                continue;
                            }
                            let mut templates: BTreeMap<String, usize> = BTreeMap::new();
                            for (ctx, target) in &occs {
                                let (Some(v), Some(want)) = (ctx[p].result.get(k), target.args.get(arg)) else {
                                    continue;
                                };
                                if v.is_empty() || want == v || want.contains(TEMPLATE_HOLE) {
                                    continue;
                                }
                                if let Some(at) = want.find(v.as_str()) {
                                    let t = format!("{}{}{}", &want[..at], TEMPLATE_HOLE, &want[at + v.len()..]);
                                    *templates.entry(t).or_default() += 1;
                                }
                            }
                            for t in templates.into_keys() {
                                candidates.push(BindingFn {
                                    arg: arg.to_string(),
                                    source: source.clone(),
                                    transform: Transform::TemplateSubstitute(t),
                                });
                            }
                        }
                    }
                    _ => unreachable!(),
                }
                for c in candidates {
                    let hits = hit_count(&c, &occs);
                    if passes(hits) && best.as_ref().is_none_or(|(h, _)| hits > *h) {
                        best = Some((hits, c));
                    }
                }
            }
            if let Some((_, b)) = best {
                found = Some(b);
                break 'classes;
            }
        }
        bindings.extend(found);
    }
    bindings
}

/// Fraction of the pattern's occurrences whose observed argument the binding reproduces.
pub fn binding_accuracy(corpus: &[AgentTrace], pattern: &PatternTuple, binding: &BindingFn) -> f64 {
    let steps: Vec<Vec<ToolStep>> = corpus.iter().map(AgentTrace::steps).collect();
    let occs: Vec<_> = occurrences(&steps, &pattern.context, &pattern.predicted)
        .into_iter()
        .filter(|(_, t)| t.args.contains_key(&binding.arg))
        .collect();
    if occs.is_empty() {
        return 0.0;
    }
    hit_count(binding, &occs) as f64 / occs.len() as f64
}
