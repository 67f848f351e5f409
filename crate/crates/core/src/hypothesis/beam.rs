use std::cmp::Ordering;
use std::collections::BTreeMap;

use crate::scalar::Scalar;
use crate::trace::EventSignature;

use super::BranchHypothesis;

/// A scored beam entry.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranked<S: Scalar> {
    pub hypothesis: BranchHypothesis<S>,
    /// Expected utility against an empty admitted set.
    pub score: S,
}

/// The size-bounded control-flow beam, sorted by descending score.
#[derive(Debug, Clone, PartialEq)]
pub struct Beam<S: Scalar> {
    pub hypotheses: Vec<Ranked<S>>,
    pub generation_state: Vec<EventSignature>,
}

impl<S: Scalar> Default for Beam<S> {
    fn default() -> Self {
        Self::empty(Vec::new())
    }
}

impl<S: Scalar> Beam<S> {
    pub fn empty(generation_state: Vec<EventSignature>) -> Self {
        Self {
            hypotheses: Vec::new(),
            generation_state,
        }
    }

    pub fn len(&self) -> usize {
        self.hypotheses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hypotheses.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &BranchHypothesis<S>> {
        self.hypotheses.iter().map(|r| &r.hypothesis)
    }

    /// Re-roots the beam after the agent issued a call to `tool`: hypotheses
    /// headed by that tool keep their remainder, all others are dropped.
    pub fn advance(&self, tool: &str) -> Vec<BranchHypothesis<S>> {
        self.iter()
            .filter(|h| h.entry_tool().is_some_and(|s| s.tool == tool))
            .filter_map(BranchHypothesis::advance_past_head)
            .collect()
    }
}

/// Beam ordering: score, then higher q, then lower total latency estimate,
/// then entry-node signature, then id.
pub fn beam_order<S: Scalar>(a: &Ranked<S>, b: &Ranked<S>) -> Ordering {
    let (ha, hb) = (&a.hypothesis, &b.hypothesis);
    desc(a.score, b.score)
        .then_with(|| desc(ha.prob_q, hb.prob_q))
        .then_with(|| asc(ha.total_latency_est(), hb.total_latency_est()))
        .then_with(|| ha.entry_signature().cmp(hb.entry_signature()))
        .then_with(|| ha.id.cmp(&hb.id))
}

fn desc<S: Scalar>(a: S, b: S) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

fn asc<S: Scalar>(a: S, b: S) -> Ordering {
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

/// Merges surviving hypotheses of `old` (those generated from the current
/// context `state`) with `fresh`, de-duplicates by subgraph identity keeping
/// the highest probability, scores each, and keeps the best `k`.
pub fn refresh_beam<S, F>(
    old: &Beam<S>,
    fresh: Vec<BranchHypothesis<S>>,
    k: usize,
    state: Vec<EventSignature>,
    mut scorer: F,
) -> Beam<S>
where
    S: Scalar,
    F: FnMut(&BranchHypothesis<S>) -> S,
{
    assert!(k >= 1, "beam width must be at least 1");
    let survivors = old
        .iter()
        .filter(|h| h.generation_context == state)
        .cloned();
    let mut unique: BTreeMap<String, BranchHypothesis<S>> = BTreeMap::new();
    for h in survivors.chain(fresh) {
        match unique.get(&h.id) {
            Some(prev) if prev.prob_q >= h.prob_q => {}
            _ => {
                unique.insert(h.id.clone(), h);
            }
        }
    }
    let mut ranked: Vec<Ranked<S>> = unique
        .into_values()
        .map(|hypothesis| Ranked {
            score: scorer(&hypothesis),
            hypothesis,
        })
        .collect();
    ranked.sort_by(beam_order);
    ranked.truncate(k);
    Beam {
        hypotheses: ranked,
        generation_state: state,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hypothesis::{FutureNode, FutureSubgraph, NodeKind, SafetyLevel};
    use crate::resource::ResourceProfile;
    use crate::trace::OutcomeClass;

    fn hyp(tool: &str, q: f64, ms: f64) -> BranchHypothesis<f64> {
        let node = FutureNode {
            node_id: "t0".into(),
            kind: NodeKind::Tool,
            signature: EventSignature::with_fields(tool, OutcomeClass::Success, []),
            bindings: Vec::new(),
            context_width: 0,
            safety: SafetyLevel::Level1Readonly,
            latency_est: ms,
            rho: ResourceProfile::zero(),
        };
        BranchHypothesis::new(tool, FutureSubgraph::chain(vec![node], 1).unwrap(), vec![q], Vec::new())
    }

    #[test]
    fn under_capacity_keeps_everything() {
        let b = refresh_beam(&Beam::empty(vec![]), vec![hyp("a", 0.5, 1.0), hyp("b", 0.5, 1.0)], 5, vec![], |h| h.prob_q);
        assert_eq!(b.len(), 2);
    }

    #[test]
    fn keeps_the_top_k_by_score() {
        let scores = [3.0, 9.0, 1.0, 7.0, 5.0, 8.0, 2.0];
        let fresh: Vec<_> = scores
            .iter()
            .enumerate()
            .map(|(i, _)| hyp(&format!("t{i}"), 0.5, 10.0))
            .collect();
        let score = |h: &BranchHypothesis<f64>| scores[h.id[1..].parse::<usize>().unwrap()];
        let b = refresh_beam(&Beam::empty(vec![]), fresh.clone(), 3, vec![], score);
        let mut oracle: Vec<(f64, String)> = fresh.iter().map(|h| (score(h), h.id.clone())).collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0));
        let want: Vec<String> = oracle.into_iter().take(3).map(|(_, id)| id).collect();
        let got: Vec<String> = b.iter().map(|h| h.id.clone()).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn ties_prefer_lower_latency_then_survivors_from_the_same_state() {
        let b = refresh_beam(&Beam::empty(vec![]), vec![hyp("slow", 0.5, 90.0), hyp("fast", 0.5, 30.0)], 1, vec![], |_| 1.0);
        assert_eq!(b.iter().next().unwrap().id, "fast");

        let ctx = vec![EventSignature::with_fields("x", OutcomeClass::Success, [])];
        let kept = refresh_beam(&b, vec![], 3, vec![], |_| 1.0);
        assert_eq!(kept.len(), 1);
        let dropped = refresh_beam(&b, vec![], 3, ctx, |_| 1.0);
        assert!(dropped.is_empty());
    }

    #[test]
    fn duplicates_keep_the_higher_probability() {
        let b = refresh_beam(&Beam::empty(vec![]), vec![hyp("a", 0.3, 1.0), hyp("a", 0.6, 1.0)], 4, vec![], |h| h.prob_q);
        assert_eq!(b.len(), 1);
        assert_eq!(b.iter().next().unwrap().prob_q, 0.6);
    }
}
