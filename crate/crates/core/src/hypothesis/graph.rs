use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::mining::BindingFn;
use crate::resource::ResourceProfile;
use crate::scalar::Scalar;
use crate::trace::EventSignature;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NodeKind {
    /// A real external tool invocation.
    Tool,
    /// Warm-up for the tool named in the node's signature.
    Preparation,
    /// A future reasoning boundary; shapes estimates, never dispatched.
    Model,
    /// Commit barrier in front of state-mutating work.
    Barrier,
}

/// How far speculative execution of a node may go. Ordered from least to
/// most dangerous.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SafetyLevel {
    Level0Prep,
    Level1Readonly,
    Level2Staged,
    NonSpeculative,
}

impl SafetyLevel {
    pub fn as_str(self) -> &'static str {
        match self {
            SafetyLevel::Level0Prep => "level0_prep",
            SafetyLevel::Level1Readonly => "level1_readonly",
            SafetyLevel::Level2Staged => "level2_staged",
            SafetyLevel::NonSpeculative => "non_speculative",
        }
    }
}

impl fmt::Display for SafetyLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SafetyLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "level0_prep" => Ok(SafetyLevel::Level0Prep),
            "level1_readonly" => Ok(SafetyLevel::Level1Readonly),
            "level2_staged" => Ok(SafetyLevel::Level2Staged),
            "non_speculative" => Ok(SafetyLevel::NonSpeculative),
            other => Err(format!("unknown safety level `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FutureNode<S: Scalar> {
    pub node_id: String,
    pub kind: NodeKind,
    pub signature: EventSignature,
    pub bindings: Vec<BindingFn>,
    /// Width of the context window the bindings index into.
    pub context_width: usize,
    pub safety: SafetyLevel,
    pub latency_est: S,
    pub rho: ResourceProfile<S>,
}

impl<S: Scalar> FutureNode<S> {
    pub fn barrier(node_id: impl Into<String>, signature: EventSignature) -> Self {
        Self {
            node_id: node_id.into(),
            kind: NodeKind::Barrier,
            signature,
            bindings: Vec::new(),
            context_width: 0,
            safety: SafetyLevel::Level0Prep,
            latency_est: S::zero(),
            rho: ResourceProfile::zero(),
        }
    }

    pub fn is_tool(&self) -> bool {
        self.kind == NodeKind::Tool
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("graph has no nodes")]
    Empty,
    #[error("edge ({0}, {1}) references a missing node")]
    DanglingEdge(usize, usize),
    #[error("graph contains a cycle")]
    Cycle,
    #[error("node {0} is not reachable from the entry")]
    Unreachable(usize),
    #[error("node {0} has incoming edges but is the entry")]
    EntryHasParent(usize),
    #[error("tool depth {depth} exceeds bound {bound}")]
    TooDeep { depth: usize, bound: usize },
    #[error("staged node {0} is reachable without passing a barrier")]
    UnguardedStaged(usize),
    #[error("barrier node {0} must have zero latency and demand")]
    CostlyBarrier(usize),
}

/// A bounded future execution subgraph with a single entry.
#[derive(Debug, Clone, PartialEq)]
pub struct FutureSubgraph<S: Scalar> {
    pub nodes: Vec<FutureNode<S>>,
    pub edges: Vec<(usize, usize)>,
    pub depth_bound: usize,
    pub entry: usize,
}

impl<S: Scalar> FutureSubgraph<S> {
    pub fn new(
        nodes: Vec<FutureNode<S>>,
        edges: Vec<(usize, usize)>,
        depth_bound: usize,
        entry: usize,
    ) -> Result<Self, GraphError> {
        let g = Self {
            nodes,
            edges,
            depth_bound,
            entry,
        };
        g.validate()?;
        Ok(g)
    }

    /// Linear chain in the given order.
    pub fn chain(nodes: Vec<FutureNode<S>>, depth_bound: usize) -> Result<Self, GraphError> {
        let edges = (1..nodes.len()).map(|i| (i - 1, i)).collect();
        Self::new(nodes, edges, depth_bound, 0)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn parents(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |(_, b)| *b == v).map(|(a, _)| *a)
    }

    fn children(&self, v: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |(a, _)| *a == v).map(|(_, b)| *b)
    }

    /// Kahn order, smallest index first among ready nodes. `None` on a cycle.
    pub fn topo_order(&self) -> Option<Vec<usize>> {
        let n = self.nodes.len();
        let mut indeg = vec![0usize; n];
        for &(_, b) in &self.edges {
            indeg[b] += 1;
        }
        let mut ready: BTreeSet<usize> = (0..n).filter(|&v| indeg[v] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(v) = ready.pop_first() {
            order.push(v);
            for c in self.children(v) {
                indeg[c] -= 1;
                if indeg[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    pub fn validate(&self) -> Result<(), GraphError> {
        let n = self.nodes.len();
        if n == 0 {
            return Err(GraphError::Empty);
        }
        for &(a, b) in &self.edges {
            if a >= n || b >= n {
                return Err(GraphError::DanglingEdge(a, b));
            }
        }
        if self.entry >= n {
            return Err(GraphError::Unreachable(self.entry));
        }
        if self.parents(self.entry).next().is_some() {
            return Err(GraphError::EntryHasParent(self.entry));
        }
        let order = self.topo_order().ok_or(GraphError::Cycle)?;
        let mut reach = vec![false; n];
        reach[self.entry] = true;
        // Max tool count on any path ending at v, and whether every path to v
        // has crossed a barrier.
        let mut depth = vec![0usize; n];
        let mut guarded = vec![false; n];
        for &v in &order {
            let node = &self.nodes[v];
            if node.kind == NodeKind::Barrier && (node.latency_est != S::zero() || !node.rho.is_zero()) {
                return Err(GraphError::CostlyBarrier(v));
            }
            if v != self.entry {
                let ps: Vec<usize> = self.parents(v).collect();
                reach[v] = ps.iter().any(|&p| reach[p]);
                if !reach[v] {
                    return Err(GraphError::Unreachable(v));
                }
                depth[v] = ps.iter().map(|&p| depth[p]).max().unwrap_or(0);
                guarded[v] = ps.iter().all(|&p| guarded[p] || self.nodes[p].kind == NodeKind::Barrier);
            }
            if node.is_tool() {
                depth[v] += 1;
            }
            if depth[v] > self.depth_bound {
                return Err(GraphError::TooDeep {
                    depth: depth[v],
                    bound: self.depth_bound,
                });
            }
            if node.safety == SafetyLevel::Level2Staged && node.kind != NodeKind::Barrier && !guarded[v] {
                return Err(GraphError::UnguardedStaged(v));
            }
        }
        Ok(())
    }

    /// Longest latency-weighted path from the entry. Model nodes count;
    /// barriers weigh nothing by construction.
    pub fn longest_path(&self) -> S {
        let order = self.topo_order().unwrap_or_else(|| (0..self.nodes.len()).collect());
        let mut best = vec![S::zero(); self.nodes.len()];
        let mut overall = S::zero();
        for &v in &order {
            let incoming = self
                .parents(v)
                .map(|p| best[p])
                .fold(S::zero(), Scalar::max_of);
            best[v] = incoming + self.nodes[v].latency_est;
            overall = overall.max_of(best[v]);
        }
        overall
    }

    /// Sub-graph induced by `keep` (indices into `nodes`), entry preserved.
    pub fn induced(&self, keep: &[usize]) -> Option<Self> {
        if !keep.contains(&self.entry) {
            return None;
        }
        let mut map = vec![None; self.nodes.len()];
        let mut nodes = Vec::with_capacity(keep.len());
        let mut sorted = keep.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        for (new, &old) in sorted.iter().enumerate() {
            map[old] = Some(new);
            nodes.push(self.nodes[old].clone());
        }
        let edges = self
            .edges
            .iter()
            .filter_map(|&(a, b)| Some((map[a]?, map[b]?)))
            .collect();
        Some(Self {
            nodes,
            edges,
            depth_bound: self.depth_bound,
            entry: map[self.entry]?,
        })
    }
}

/// A branch hypothesis: a bounded future subgraph with the probability the
/// agent follows it, its bindings, peak demand and highest safety level.
#[derive(Debug, Clone, PartialEq)]
pub struct BranchHypothesis<S: Scalar> {
    pub id: String,
    pub graph: FutureSubgraph<S>,
    pub prob_q: S,
    /// Confidence of each chained pattern, in chain order.
    pub chain_confidences: Vec<S>,
    /// Tool-signature window the hypothesis was generated from.
    pub generation_context: Vec<EventSignature>,
    pub profile_rho: ResourceProfile<S>,
    pub safety_sigma: SafetyLevel,
}

impl<S: Scalar> BranchHypothesis<S> {
    pub fn new(
        id: impl Into<String>,
        graph: FutureSubgraph<S>,
        chain_confidences: Vec<S>,
        generation_context: Vec<EventSignature>,
    ) -> Self {
        let prob_q = chain_confidences.iter().fold(S::one(), |acc, c| acc * *c);
        let profile_rho = graph
            .nodes
            .iter()
            .fold(ResourceProfile::zero(), |acc, n| acc.join(&n.rho));
        let safety_sigma = graph
            .nodes
            .iter()
            .filter(|n| n.kind != NodeKind::Barrier)
            .map(|n| n.safety)
            .max()
            .unwrap_or(SafetyLevel::Level0Prep);
        Self {
            id: id.into(),
            graph,
            prob_q,
            chain_confidences,
            generation_context,
            profile_rho,
            safety_sigma,
        }
    }

    /// Aggregate bindings over every node.
    pub fn bindings(&self) -> impl Iterator<Item = (&FutureNode<S>, &BindingFn)> {
        self.graph
            .nodes
            .iter()
            .flat_map(|n| n.bindings.iter().map(move |b| (n, b)))
    }

    /// Node indices in execution order.
    pub fn order(&self) -> Vec<usize> {
        self.graph
            .topo_order()
            .unwrap_or_else(|| (0..self.graph.len()).collect())
    }

    pub fn tool_nodes(&self) -> Vec<usize> {
        self.order()
            .into_iter()
            .filter(|&i| self.graph.nodes[i].is_tool())
            .collect()
    }

    pub fn tool_chain(&self) -> Vec<&EventSignature> {
        self.tool_nodes()
            .into_iter()
            .map(|i| &self.graph.nodes[i].signature)
            .collect()
    }

    pub fn entry_tool(&self) -> Option<&EventSignature> {
        self.tool_chain().into_iter().next()
    }

    pub fn exit_tool(&self) -> Option<&EventSignature> {
        self.tool_chain().into_iter().last()
    }

    pub fn entry_signature(&self) -> &EventSignature {
        &self.graph.nodes[self.graph.entry].signature
    }

    pub fn total_latency_est(&self) -> S {
        self.graph
            .nodes
            .iter()
            .fold(S::zero(), |acc, n| acc + n.latency_est)
    }

    /// Restricts the hypothesis to an entry-anchored node subset, keeping
    /// its probability. Used to score a prefix.
    pub fn restricted(&self, keep: &[usize]) -> Option<Self> {
        let graph = self.graph.induced(keep)?;
        let mut h = Self::new(
            self.id.clone(),
            graph,
            self.chain_confidences.clone(),
            self.generation_context.clone(),
        );
        h.prob_q = self.prob_q;
        Some(h)
    }

    /// The hypothesis that remains once the agent has issued the entry tool:
    /// the entry tool (and its preparation/barrier nodes) is removed and the
    /// probability is conditioned on it. Only meaningful for chains.
    pub fn advance_past_head(&self) -> Option<Self> {
        let order = self.order();
        let head = order.iter().position(|&i| self.graph.nodes[i].is_tool())?;
        let rest: Vec<usize> = order[head + 1..].to_vec();
        if !rest.iter().any(|&i| self.graph.nodes[i].is_tool()) {
            return None;
        }
        let nodes: Vec<FutureNode<S>> = rest.iter().map(|&i| self.graph.nodes[i].clone()).collect();
        let graph = FutureSubgraph::chain(nodes, self.graph.depth_bound).ok()?;
        let mut context = self.generation_context.clone();
        context.push(self.graph.nodes[order[head]].signature.clone());
        let confidences = self.chain_confidences.iter().skip(1).copied().collect::<Vec<_>>();
        let id = self
            .tool_chain()
            .iter()
            .skip(1)
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join(" > ");
        Some(Self::new(id, graph, confidences, context))
    }
}
