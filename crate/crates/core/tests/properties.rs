use proptest::prelude::*;

use fedreft_core::aggregation::{sum_of_distances, weiszfeld, ParamVector, WeiszfeldConfig};
use fedreft_core::client::{extract_shared, fused_bundle};
use fedreft_core::intervention::{param_count, Group, InitScheme, InterventionSchedule, ParamBundle};
use fedreft_core::numeric::Rng;
use fedreft_core::orchestrator::{uplink_scalars, SharingStrategy};

fn point_set() -> impl Strategy<Value = Vec<Vec<f64>>> {
    (1usize..6).prop_flat_map(|dim| prop::collection::vec(prop::collection::vec(-50.0f64..50.0, dim), 1..10))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    // The median beats every candidate a naive aggregator could pick.
    #[test]
    fn median_beats_mean_and_inputs(points in point_set()) {
        let refs: Vec<&[f64]> = points.iter().map(|p| p.as_slice()).collect();
        let (m, diag) = weiszfeld(&refs, &WeiszfeldConfig::default()).unwrap();
        let f = sum_of_distances(&m, &refs);
        prop_assert!((f - diag.final_objective()).abs() <= 1e-9 * f.max(1.0));
        let slack = 1e-9 * f.max(1.0);
        prop_assert!(f <= diag.objective_trace[0] + slack);
        for p in &refs {
            prop_assert!(f <= sum_of_distances(p, &refs) + slack);
        }
    }

    #[test]
    fn fused_w_and_b_are_affine_in_alpha(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
        let s = InterventionSchedule::new(vec![0, 1], 1, 1, true, 4).unwrap();
        let mut rng = Rng::new(seed);
        let local = ParamBundle::init(s.clone(), 2, 6, &mut rng, InitScheme::Gaussian).unwrap();
        let other = ParamBundle::init(s, 2, 6, &mut rng, InitScheme::Gaussian).unwrap();
        let abm: ParamVector = extract_shared(&other, SharingStrategy::Full);
        let fused = fused_bundle(&local, &abm, alpha).unwrap();
        for ((f, l), o) in fused.params().iter().zip(local.params()).zip(other.params()) {
            for g in [Group::W, Group::B] {
                for ((x, a), b) in f.group(g).iter().zip(l.group(g)).zip(o.group(g)) {
                    prop_assert!((x - (a + alpha * (b - a))).abs() <= 1e-12);
                }
            }
            prop_assert!(f.r.orthonormality_defect() <= 1e-8);
        }
    }

    #[test]
    fn strategy_costs_partition_the_full_payload(
        layers in 1usize..40, r in 1usize..16, extra in 0usize..64, tied in any::<bool>(),
    ) {
        let d = r + extra;
        let s = InterventionSchedule::new((0..layers).collect(), 2, 2, tied, 8).unwrap();
        let full = uplink_scalars(&s, r, d, SharingStrategy::Full);
        let no_w = uplink_scalars(&s, r, d, SharingStrategy::NoW);
        let no_b = uplink_scalars(&s, r, d, SharingStrategy::NoBias);
        prop_assert_eq!(full, param_count(&s, r, d));
        // R appears in both partial payloads
        prop_assert_eq!(no_w + no_b, full + s.slot_count() * r * d);
        prop_assert!(no_w < full && no_b < full);
    }
}
