use std::cmp::Ordering;
use std::collections::BTreeSet;

use crate::hypothesis::NodeKind;
use crate::scoring::{solo_latency, Scorer};
use crate::{Hypothesis, Ms, Profile, Utility};

use super::policy::Policy;

/// Largest entry-anchored node prefix of `h` that the policy's safety caps
/// allow and whose every node fits `residual`. Model nodes are skipped and a
/// trailing barrier is dropped. `None` when not even the first node fits.
pub fn select_prefix(h: &Hypothesis, policy: &Policy, residual: &Profile) -> Option<Vec<usize>> {
    let mut keep = Vec::new();
    for i in h.order() {
        let node = &h.graph.nodes[i];
        let ok = match node.kind {
            NodeKind::Model => continue,
            NodeKind::Barrier => true,
            NodeKind::Preparation | NodeKind::Tool => {
                policy.allows(&node.signature.tool, node.safety) && node.rho.fits_within(residual)
            }
        };
        if !ok {
            break;
        }
        keep.push(i);
    }
    while keep
        .last()
        .is_some_and(|&i| h.graph.nodes[i].kind == NodeKind::Barrier)
    {
        keep.pop();
    }
    (!keep.is_empty()).then_some(keep)
}

/// Every admissible cut of [`select_prefix`]'s result, shortest first.
pub fn prefix_options(h: &Hypothesis, policy: &Policy, residual: &Profile) -> Vec<Vec<usize>> {
    let Some(full) = select_prefix(h, policy, residual) else {
        return Vec::new();
    };
    (1..=full.len())
        .filter(|&n| h.graph.nodes[full[n - 1]].kind != NodeKind::Barrier)
        .map(|n| full[..n].to_vec())
        .collect()
}

/// Inputs shared by greedy and exhaustive admission.
pub struct AdmissionInput<'a> {
    pub candidates: &'a [Hypothesis],
    /// Branches already running; they interfere with new admissions.
    pub active: &'a [&'a Hypothesis],
    /// Tools some live execution is already about to run next.
    pub busy_tools: &'a BTreeSet<String>,
    /// Slack left for new reservations.
    pub residual: Profile,
    pub policy: &'a Policy,
    pub scorer: Scorer<'a, f64>,
    pub gap_est: &'a dyn Fn(&Hypothesis) -> Ms,
}

/// One admission decision.
#[derive(Debug, Clone)]
pub struct Admitted {
    pub candidate: usize,
    pub prefix: Hypothesis,
    pub utility: Utility,
}

fn head_tool(h: &Hypothesis) -> Option<&str> {
    Some(h.entry_signature().tool.as_str())
}

fn better(a: &(Utility, f64, usize, &str), b: &(Utility, f64, usize, &str)) -> bool {
    let ord = b
        .0
        .eu
        .total_cmp(&a.0.eu)
        .then(b.0.q.total_cmp(&a.0.q))
        .then(a.1.total_cmp(&b.1))
        .then(a.3.cmp(b.3))
        .then(a.2.cmp(&b.2));
    ord == Ordering::Less
}

/// Greedy admission: repeatedly admits the candidate prefix with the largest
/// positive marginal expected utility given everything admitted so far, until
/// no candidate fits or none has positive value. Ties prefer higher
/// probability, then lower solo latency, then id.
pub fn greedy_admit(input: &AdmissionInput<'_>) -> Vec<Admitted> {
    let mut out: Vec<Admitted> = Vec::new();
    let mut residual = input.residual;
    let mut busy = input.busy_tools.clone();
    loop {
        let admitted: Vec<&Hypothesis> = input
            .active
            .iter()
            .copied()
            .chain(out.iter().map(|a| &a.prefix))
            .collect();
        let mut best: Option<(Utility, f64, usize, &str, Hypothesis)> = None;
        for (ci, h) in input.candidates.iter().enumerate() {
            if out.iter().any(|a| a.candidate == ci) {
                continue;
            }
            match head_tool(h) {
                Some(t) if !busy.contains(t) => {}
                _ => continue,
            }
            let Some(keep) = select_prefix(h, input.policy, &residual) else {
                continue;
            };
            let Some(prefix) = h.restricted(&keep) else { continue };
            let utility = input
                .scorer
                .expected_utility(&prefix, &admitted, (input.gap_est)(h));
            if utility.eu <= 0.0 {
                continue;
            }
            let key = (utility, solo_latency(&prefix), ci, h.id.as_str());
            if best
                .as_ref()
                .is_none_or(|b| better(&key, &(b.0, b.1, b.2, b.3)))
            {
                best = Some((key.0, key.1, key.2, key.3, prefix));
            }
        }
        let Some((utility, _, candidate, _, prefix)) = best else {
            break;
        };
        residual = residual.saturating_sub(&prefix.profile_rho);
        busy.insert(head_tool(&prefix).unwrap_or_default().to_owned());
        out.push(Admitted {
            candidate,
            prefix,
            utility,
        });
    }
    out
}

/// Value of a set of branches: each member's expected utility given every
/// other member and the already-active branches.
pub fn set_value(input: &AdmissionInput<'_>, chosen: &[(usize, &Hypothesis)]) -> f64 {
    chosen
        .iter()
        .enumerate()
        .map(|(k, (ci, h))| {
            let others: Vec<&Hypothesis> = input
                .active
                .iter()
                .copied()
                .chain(chosen.iter().enumerate().filter(|(j, _)| *j != k).map(|(_, (_, o))| *o))
                .collect();
            input
                .scorer
                .expected_utility(h, &others, (input.gap_est)(&input.candidates[*ci]))
                .eu
        })
        .sum()
}

/// Feasibility of a chosen set: distinct head tools not already busy, and
/// summed peak demand within the residual.
pub fn feasible(input: &AdmissionInput<'_>, chosen: &[&Hypothesis]) -> bool {
    let mut heads = BTreeSet::new();
    for h in chosen {
        match head_tool(h) {
            Some(t) if !input.busy_tools.contains(t) && heads.insert(t) => {}
            _ => return false,
        }
    }
    Profile::sum(chosen.iter().map(|h| &h.profile_rho)).fits_within(&input.residual)
}

/// Largest option space [`brute_force_admit`] will enumerate.
pub const BRUTE_FORCE_LIMIT: usize = 1 << 20;

/// Exhaustive search over every feasible set of candidate prefixes for the
/// one with the highest [`set_value`]. `None` if the option space exceeds
/// [`BRUTE_FORCE_LIMIT`].
pub fn brute_force_admit(input: &AdmissionInput<'_>) -> Option<(Vec<(usize, Hypothesis)>, f64)> {
    let options: Vec<Vec<Hypothesis>> = input
        .candidates
        .iter()
        .map(|h| {
            prefix_options(h, input.policy, &input.residual)
                .into_iter()
                .filter_map(|keep| h.restricted(&keep))
                .collect()
        })
        .collect();
    let space = options
        .iter()
        .try_fold(1usize, |acc, o| acc.checked_mul(o.len() + 1))?;
    if space > BRUTE_FORCE_LIMIT {
        return None;
    }
    let mut best: (Vec<(usize, Hypothesis)>, f64) = (Vec::new(), 0.0);
    let mut pick = vec![0usize; options.len()];
    for _ in 0..space {
        let chosen: Vec<(usize, &Hypothesis)> = pick
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0)
            .map(|(ci, &p)| (ci, &options[ci][p - 1]))
            .collect();
        let hs: Vec<&Hypothesis> = chosen.iter().map(|(_, h)| *h).collect();
        if feasible(input, &hs) {
            let v = set_value(input, &chosen);
            if v > best.1 {
                best = (chosen.iter().map(|(ci, h)| (*ci, (*h).clone())).collect(), v);
            }
        }
        for (slot, p) in pick.iter_mut().enumerate() {
            *p += 1;
            if *p <= options[slot].len() {
                break;
            }
            *p = 0;
        }
    }
    Some(best)
}
