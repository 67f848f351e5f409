use std::collections::BTreeMap;

use crate::mining::{BindingFn, PatternLibrary};
use crate::scalar::Scalar;
use crate::trace::EventSignature;

use super::{BranchHypothesis, FutureNode, FutureSubgraph, NodeKind, SafetyLevel, ToolCatalog};

/// One predicted tool of a chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainStep<S: Scalar> {
    pub signature: EventSignature,
    pub bindings: Vec<BindingFn>,
    pub context_width: usize,
    pub confidence: S,
    /// Overrides the catalog's execution-time estimate.
    pub latency_est: Option<S>,
}

/// Expands a tool chain into graph nodes: a preparation node for tools with
/// warm-up, a barrier in front of every staged-write tool, then the tool.
pub fn build_hypothesis<S: Scalar>(
    steps: &[ChainStep<S>],
    catalog: &ToolCatalog<S>,
    horizon_h: usize,
    generation_context: Vec<EventSignature>,
) -> Option<BranchHypothesis<S>> {
    if steps.is_empty() {
        return None;
    }
    let mut nodes = Vec::new();
    for (k, step) in steps.iter().enumerate() {
        let profile = catalog.profile(&step.signature.tool);
        if profile.warmup_est > S::zero() {
            nodes.push(FutureNode {
                node_id: format!("t{k}.prep"),
                kind: NodeKind::Preparation,
                signature: step.signature.clone(),
                bindings: Vec::new(),
                context_width: 0,
                safety: SafetyLevel::Level0Prep,
                latency_est: profile.warmup_est,
                rho: profile.rho,
            });
        }
        if profile.safety == SafetyLevel::Level2Staged {
            nodes.push(FutureNode::barrier(format!("t{k}.barrier"), step.signature.clone()));
        }
        nodes.push(FutureNode {
            node_id: format!("t{k}"),
            kind: NodeKind::Tool,
            signature: step.signature.clone(),
            bindings: step.bindings.clone(),
            context_width: step.context_width,
            safety: profile.safety,
            latency_est: step.latency_est.unwrap_or(profile.latency_est),
            rho: profile.rho,
        });
    }
    let graph = FutureSubgraph::chain(nodes, horizon_h.max(steps.len())).ok()?;
    let id = steps
        .iter()
        .map(|s| s.signature.to_string())
        .collect::<Vec<_>>()
        .join(" > ");
    Some(BranchHypothesis::new(
        id,
        graph,
        steps.iter().map(|s| s.confidence).collect(),
        generation_context,
    ))
}

/// Chains matching patterns forward from `context` up to `horizon_h` tools,
/// following at most `fanout_limit` successors per step. Every root-to-node
/// chain becomes one hypothesis whose probability is the product of the
/// chained confidences. Duplicate chains keep the highest probability.
pub fn generate_hypotheses<S: Scalar>(
    context: &[EventSignature],
    library: &PatternLibrary,
    catalog: &ToolCatalog<S>,
    horizon_h: usize,
    fanout_limit: usize,
) -> Vec<BranchHypothesis<S>> {
    let mut found: BTreeMap<String, BranchHypothesis<S>> = BTreeMap::new();
    if horizon_h == 0 || fanout_limit == 0 || library.is_empty() {
        return Vec::new();
    }
    let mut chain = Vec::new();
    let mut window = context.to_vec();
    expand(
        library,
        catalog,
        context,
        horizon_h,
        fanout_limit,
        &mut window,
        &mut chain,
        &mut found,
    );
    found.into_values().collect()
}

#[allow(clippy::too_many_arguments)]
fn expand<S: Scalar>(
    library: &PatternLibrary,
    catalog: &ToolCatalog<S>,
    context: &[EventSignature],
    horizon_h: usize,
    fanout_limit: usize,
    window: &mut Vec<EventSignature>,
    chain: &mut Vec<ChainStep<S>>,
    found: &mut BTreeMap<String, BranchHypothesis<S>>,
) {
    let successors: Vec<_> = library
        .successors(window)
        .into_iter()
        .take(fanout_limit)
        .cloned()
        .collect();
    for p in successors {
        chain.push(ChainStep {
            signature: p.predicted.clone(),
            bindings: p.bindings.clone(),
            context_width: p.context.len(),
            confidence: p.confidence::<S>(),
            latency_est: None,
        });
        if let Some(h) = build_hypothesis(chain, catalog, horizon_h, context.to_vec()) {
            match found.get(&h.id) {
                Some(prev) if prev.prob_q >= h.prob_q => {}
                _ => {
                    found.insert(h.id.clone(), h);
                }
            }
        }
        if chain.len() < horizon_h {
            window.push(p.predicted.clone());
            expand(library, catalog, context, horizon_h, fanout_limit, window, chain, found);
            window.pop();
        }
        chain.pop();
    }
}
