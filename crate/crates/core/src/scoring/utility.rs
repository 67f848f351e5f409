use crate::hypothesis::{BranchHypothesis, ToolCatalog};
use crate::mining::PatternLibrary;
use crate::resource::ResourceProfile;
use crate::scalar::Scalar;
use crate::trace::EventSignature;

use super::InterferenceModel;

/// Components of a branch's expected critical-path reduction, in ms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UtilityBreakdown<S: Scalar> {
    pub q: S,
    pub overlap_d_o: S,
    pub unlock_d_u: S,
    pub interference_d_i: S,
    pub lambda: S,
    pub mu: S,
    pub eu: S,
}

impl<S: Scalar> UtilityBreakdown<S> {
    pub fn from_components(q: S, d_o: S, d_u: S, d_i: S, lambda: S, mu: S) -> Self {
        Self {
            q,
            overlap_d_o: d_o,
            unlock_d_u: d_u,
            interference_d_i: d_i,
            lambda,
            mu,
            eu: q * (d_o + lambda * d_u - mu * d_i),
        }
    }

    /// Recomputes `eu` from the stored components.
    pub fn recomputed(&self) -> S {
        self.q * (self.overlap_d_o + self.lambda * self.unlock_d_u - self.mu * self.interference_d_i)
    }

    pub fn zero() -> Self {
        Self::from_components(S::zero(), S::zero(), S::zero(), S::zero(), S::one(), S::one())
    }
}

/// Latency of the branch run alone: its longest estimated path.
pub fn solo_latency<S: Scalar>(h: &BranchHypothesis<S>) -> S {
    h.graph.longest_path()
}

/// Latency of the branch co-running with `admitted`.
pub fn corun_latency<S: Scalar>(
    h: &BranchHypothesis<S>,
    admitted: &[&BranchHypothesis<S>],
    model: &InterferenceModel<S>,
) -> S {
    let others: Vec<ResourceProfile<S>> = admitted.iter().map(|a| a.profile_rho).collect();
    solo_latency(h) * model.slowdown(&h.profile_rho, &others)
}

/// Latency hidden by running the branch ahead of its authoritative call,
/// `gap_est` ms before that call would arrive.
pub fn overlap_gain<S: Scalar>(
    h: &BranchHypothesis<S>,
    admitted: &[&BranchHypothesis<S>],
    model: &InterferenceModel<S>,
    gap_est: S,
) -> S {
    let co = corun_latency(h, admitted, model);
    co.min_of(gap_est + solo_latency(h)).max_of(S::zero())
}

/// Probability-weighted upward rank of the work the branch's exit unlocks:
/// the sum, over the continuation tree of mined successors up to `horizon`
/// steps past the branch, of path probability times the unlocked tool's
/// estimated cold latency.
pub fn unlock_gain<S: Scalar>(
    h: &BranchHypothesis<S>,
    library: &PatternLibrary,
    catalog: &ToolCatalog<S>,
    horizon: usize,
) -> S {
    if horizon == 0 || library.is_empty() {
        return S::zero();
    }
    let chain = h.tool_chain();
    if chain.is_empty() {
        return S::zero();
    }
    let mut window: Vec<EventSignature> = h.generation_context.clone();
    window.extend(chain.into_iter().cloned());
    continuation(&mut window, library, catalog, horizon, S::one())
}

fn continuation<S: Scalar>(
    window: &mut Vec<EventSignature>,
    library: &PatternLibrary,
    catalog: &ToolCatalog<S>,
    depth: usize,
    path_p: S,
) -> S {
    if depth == 0 {
        return S::zero();
    }
    let succ: Vec<(EventSignature, S)> = library
        .successors(window)
        .into_iter()
        .map(|p| (p.predicted.clone(), p.confidence::<S>()))
        .collect();
    let mut total = S::zero();
    for (sig, p) in succ {
        let reach = path_p * p;
        total = total + reach * catalog.profile(&sig.tool).total_latency();
        window.push(sig);
        total = total + continuation(window, library, catalog, depth - 1, reach);
        window.pop();
    }
    total
}

/// Everything expected-utility evaluation needs besides the branch, the
/// admitted set and the gap estimate.
#[derive(Debug, Clone, Copy)]
pub struct Scorer<'a, S: Scalar> {
    pub model: &'a InterferenceModel<S>,
    pub library: &'a PatternLibrary,
    pub catalog: &'a ToolCatalog<S>,
    pub horizon: usize,
    pub lambda: S,
    pub mu: S,
}

impl<S: Scalar> Scorer<'_, S> {
    /// Expected critical-path reduction of `h` given the admitted set.
    pub fn expected_utility(
        &self,
        h: &BranchHypothesis<S>,
        admitted: &[&BranchHypothesis<S>],
        gap_est: S,
    ) -> UtilityBreakdown<S> {
        let solo = solo_latency(h);
        let co = corun_latency(h, admitted, self.model);
        let d_o = co.min_of(gap_est + solo).max_of(S::zero());
        let d_u = unlock_gain(h, self.library, self.catalog, self.horizon);
        let d_i = (co - solo).max_of(S::zero());
        UtilityBreakdown::from_components(h.prob_q, d_o, d_u, d_i, self.lambda, self.mu)
    }
}
