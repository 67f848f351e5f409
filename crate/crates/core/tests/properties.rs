mod support;

use std::collections::BTreeSet;
use std::sync::{Arc, OnceLock};

use branchspec_core::hypothesis::{beam_order, generate_hypotheses, refresh_beam, Beam, Ranked};
use branchspec_core::mining::{mine_patterns, PatternLibrary};
use branchspec_core::scheduler::{
    brute_force_admit, feasible, greedy_admit, set_value, AdmissionInput, Policy,
};
use branchspec_core::scoring::{solo_latency, InterferenceModel, Scorer};
use branchspec_core::sim::{run_simulation, train_library, Mode, WorkloadSpec, QOS_TOLERANCE_MS};
use branchspec_core::trace::{parse_trace, write_trace, AgentTrace, ArgMap, OutcomeClass, TraceEvent};
use branchspec_core::{Catalog, Hypothesis, Profile};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const REGULAR: &str = include_str!("../../../configs/workload_regular.toml");
const EDGE: &str = include_str!("../../../configs/policy_edge.toml");

fn profile() -> impl Strategy<Value = Profile> {
    (0.0..2.0f64, 0.0..2.0f64, 0.0..2.0f64, 0.0..4.0f64)
        .prop_map(|(c, m, i, s)| Profile::new(c, m, i, s).unwrap())
}

fn regular() -> &'static (WorkloadSpec, Arc<PatternLibrary>) {
    static CELL: OnceLock<(WorkloadSpec, Arc<PatternLibrary>)> = OnceLock::new();
    CELL.get_or_init(|| {
        let w = WorkloadSpec::from_toml(REGULAR).unwrap();
        let lib = Arc::new(train_library(&w, 20, 2, 3, 0.8).unwrap());
        (w, lib)
    })
}

proptest! {
    #[test]
    fn join_is_an_upper_bound_and_meet_a_lower_bound(a in profile(), b in profile()) {
        let j = a.join(&b);
        let m = a.meet(&b);
        prop_assert_eq!(j, b.join(&a));
        prop_assert!(a.fits_within(&j) && b.fits_within(&j));
        prop_assert!(m.fits_within(&a) && m.fits_within(&b));
        prop_assert!(a.saturating_sub(&b).fits_within(&a));
    }

    #[test]
    fn slowdown_is_one_alone_and_monotone_in_co_runners(
        cap in profile(), own in profile(), x in profile(), y in profile(),
    ) {
        let cap = cap.join(&Profile::uniform(0.1).unwrap());
        let model = InterferenceModel::proportional(cap);
        prop_assert_eq!(model.slowdown(&own, &[]), 1.0);
        let one = model.slowdown(&own, &[x]);
        let two = model.slowdown(&own, &[x, y]);
        prop_assert!(one >= 1.0);
        prop_assert!(two >= one);
    }

    #[test]
    fn expected_utility_matches_its_components(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = support::random_beam(&mut rng, 4);
        let model = InterferenceModel::proportional(inst.interference_capacity);
        let lib = PatternLibrary::empty();
        let scorer = Scorer {
            model: &model,
            library: &lib,
            catalog: &inst.catalog,
            horizon: 3,
            lambda: 1.0,
            mu: inst.policy.mu,
        };
        let (h, rest) = inst.candidates.split_first().unwrap();
        let alone = scorer.expected_utility(h, &[], inst.gap);
        prop_assert_eq!(alone.interference_d_i, 0.0);
        let others: Vec<&Hypothesis> = rest.iter().collect();
        let u = scorer.expected_utility(h, &others, inst.gap);
        prop_assert_eq!(u.eu, u.recomputed());
        prop_assert!(u.interference_d_i >= 0.0);
        prop_assert!(u.overlap_d_o <= inst.gap + solo_latency(h) + 1e-9);
        if inst.policy.mu >= 1.0 {
            prop_assert!(u.eu <= alone.eu + 1e-9);
        }
    }

    #[test]
    fn greedy_is_feasible_positive_and_bounded_by_the_optimum(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inst = support::random_beam(&mut rng, 4);
        let model = inst.policy.interference_model();
        let lib = PatternLibrary::empty();
        let busy = BTreeSet::new();
        let gap = inst.gap;
        let input = AdmissionInput {
            candidates: &inst.candidates,
            active: &[],
            busy_tools: &busy,
            residual: inst.residual,
            policy: &inst.policy,
            scorer: Scorer {
                model: &model,
                library: &lib,
                catalog: &inst.catalog,
                horizon: 3,
                lambda: 1.0,
                mu: inst.policy.mu,
            },
            gap_est: &move |_| gap,
        };
        let picked = greedy_admit(&input);
        let hs: Vec<&Hypothesis> = picked.iter().map(|a| &a.prefix).collect();
        prop_assert!(feasible(&input, &hs));
        prop_assert!(picked.iter().all(|a| a.utility.eu > 0.0));
        let chosen: Vec<(usize, &Hypothesis)> = picked.iter().map(|a| (a.candidate, &a.prefix)).collect();
        let (_, best) = brute_force_admit(&input).unwrap();
        prop_assert!(set_value(&input, &chosen) <= best + 1e-9);
    }

    #[test]
    fn sandbox_commit_equals_replay(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        prop_assert_eq!(support::fuzz_sandbox_sequence(&mut rng, 60), Ok(()));
    }

    #[test]
    fn mining_matches_window_enumeration(seed in any::<u64>(), min_support in 1u64..4, w in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corpus = support::random_corpus(&mut rng, 8, 10);
        let streams: Vec<_> = corpus.iter().map(AgentTrace::signature_stream).collect();
        let mined = mine_patterns(&corpus, min_support, w).unwrap();
        let lib = PatternLibrary::new(w, min_support, 0.8, mined, Default::default());
        prop_assert_eq!(support::mined_counts(&lib), support::brute_force_patterns(&streams, min_support, w));
    }

    #[test]
    fn confidences_stay_in_the_unit_interval(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corpus = support::random_corpus(&mut rng, 10, 12);
        for p in mine_patterns(&corpus, 1, 3).unwrap() {
            let c = p.confidence_p();
            prop_assert!(c > 0.0 && c <= 1.0);
            prop_assert!(p.support <= p.context_support);
            prop_assert!(p.distinct_next >= 1);
        }
    }

    #[test]
    fn beam_is_bounded_sorted_and_unique(seed in any::<u64>(), k in 1usize..6, h in 1usize..4, f in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let corpus = support::random_corpus(&mut rng, 10, 12);
        let lib = PatternLibrary::build(&corpus, 1, 2, 0.8).unwrap();
        let catalog: Catalog = Catalog::new();
        let ctx = vec![support::sig("a")];
        let fresh = generate_hypotheses(&ctx, &lib, &catalog, h, f);
        for hyp in &fresh {
            prop_assert!(hyp.tool_chain().len() <= h);
            prop_assert!(hyp.prob_q > 0.0 && hyp.prob_q <= 1.0);
            prop_assert!(hyp.graph.validate().is_ok());
        }
        let beam = refresh_beam(&Beam::empty(Vec::new()), fresh, k, ctx, |x: &Hypothesis| x.prob_q);
        prop_assert!(beam.len() <= k);
        let ids: BTreeSet<_> = beam.iter().map(|x| x.id.clone()).collect();
        prop_assert_eq!(ids.len(), beam.len());
        let ranked: Vec<Ranked<f64>> = beam.iter().map(|x| Ranked { score: x.prob_q, hypothesis: x.clone() }).collect();
        for pair in ranked.windows(2) {
            prop_assert!(beam_order(&pair[0], &pair[1]) != std::cmp::Ordering::Greater);
        }
    }

    #[test]
    fn trace_text_round_trips(
        calls in prop::collection::vec(("[a-z]{1,6}", "[a-z0-9]{0,8}", 0.0..50.0f64, prop::bool::ANY), 0..10),
    ) {
        let mut events = Vec::new();
        let mut t = 0.0;
        for (tool, arg, dt, ok) in &calls {
            let args: ArgMap = [("path".to_string(), arg.clone())].into();
            events.push(TraceEvent::call(t, tool, args));
            t += dt;
            let outcome = if *ok { OutcomeClass::Success } else { OutcomeClass::Failure };
            events.push(TraceEvent::ret(t, tool, outcome, [("out".to_string(), arg.clone())].into()));
        }
        let trace = AgentTrace::from_events(events).unwrap();
        let back = parse_trace(&write_trace(&trace)).unwrap();
        prop_assert_eq!(back, trace);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn budgets_hold_and_eps_zero_never_delays_authoritative_work(
        seed in 0u64..10_000,
        cpu in 0.1..1.0f64,
        slots in 0.0..2.0f64,
        k in 1usize..8,
    ) {
        let (w, lib) = regular();
        let mut p = Policy::from_toml(EDGE).unwrap();
        p.beam_k = k;
        p.budget_b = Profile::new(cpu, cpu, cpu, slots).unwrap();
        let r = run_simulation(w, &p, lib.clone(), Mode::Bpaste, seed);
        prop_assert_eq!(r.auth_qos_violations, 0);
        prop_assert!(r.makespan <= r.serial_makespan + QOS_TOLERANCE_MS);
        let cold: f64 = r.auth_work_ms + r.replaced_work_ms;
        prop_assert!(cold > 0.0);
    }
}
