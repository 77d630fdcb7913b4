//! Greedy nearest-feasible route constructor.
//!
//! Walks the environment directly: always move to the nearest mask-legal
//! customer; when none exists, detour to a recharge station that unlocks
//! at least one customer (or, failing that, the nearest escape station),
//! otherwise return to the depot and open a fresh vehicle. Serves as the
//! VNS initializer and as a sanity floor for learned methods.

use crate::env::{self, EnvState};
use crate::model::{check_solution, ConstraintSet, Instance, Solution};

fn nearest(instance: &Instance, from: usize, ids: impl Iterator<Item = usize>) -> Option<usize> {
    ids.min_by(|&a, &b| {
        instance
            .dist(from, a)
            .partial_cmp(&instance.dist(from, b))
            .unwrap()
            .then(a.cmp(&b))
    })
}

/// True when visiting station `s` from `state` makes some customer legal.
fn station_unlocks_customer(instance: &Instance, state: &EnvState, s: usize) -> bool {
    let (next, _) = env::step(instance, state, s).expect("station was mask-legal");
    let mask = env::feasible_actions(instance, &next);
    instance.customer_ids().any(|c| mask[c])
}

pub fn greedy_construct(instance: &Instance, constraints: ConstraintSet) -> Solution {
    let mut state = env::reset(instance, constraints, None)
        .expect("reset without a forced start cannot fail");
    while !state.terminal {
        let mask = env::feasible_actions(instance, &state);
        let action = nearest(
            instance,
            state.position,
            instance.customer_ids().filter(|&c| mask[c]),
        )
        .or_else(|| {
            nearest(
                instance,
                state.position,
                instance
                    .station_ids()
                    .filter(|&s| mask[s] && station_unlocks_customer(instance, &state, s)),
            )
        })
        .or_else(|| if mask[0] { Some(0) } else { None })
        .or_else(|| {
            // Battery escape: no customer is reachable and the depot is
            // not either, but mask soundness guarantees a station is.
            nearest(
                instance,
                state.position,
                instance.station_ids().filter(|&s| mask[s]),
            )
        });
        match action {
            Some(a) => {
                let (next, _) = env::step(instance, &state, a).expect("action came from the mask");
                state = next;
            }
            None => {
                let (next, _) =
                    env::mark_infeasible(instance, &state).expect("mask was all-false");
                state = next;
            }
        }
    }
    if state.infeasible {
        return Solution::infeasible_marker(state.unserved_count(instance));
    }
    check_solution(instance, &state.all_routes(), constraints)
        .expect("environment rollouts have valid route structure")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instancegen::{generate, ClassSpec, GenConfig};
    use crate::model::test_util::manual_instance;

    #[test]
    fn single_vehicle_nearest_neighbor_tour() {
        // Three light customers on a line; capacity holds all of them and
        // phase A ignores battery and windows: one nearest-neighbor tour.
        let inst = manual_instance(
            &[
                (0.6, 0.5, 1, 0.0, 4.0),
                (0.7, 0.5, 1, 0.0, 4.0),
                (0.8, 0.5, 1, 0.0, 4.0),
            ],
            &[],
            30,
            10.0,
            4.0,
        );
        let sol = greedy_construct(&inst, ConstraintSet::PHASE_A);
        assert!(sol.feasible);
        assert_eq!(sol.routes, vec![vec![0, 1, 2, 3, 0]]);
        assert_eq!(sol.fleet_size, 1);
    }

    #[test]
    fn demand_pigeonhole_forces_two_vehicles() {
        let inst = manual_instance(
            &[(0.6, 0.5, 20, 0.0, 4.0), (0.4, 0.5, 20, 0.0, 4.0)],
            &[],
            30,
            10.0,
            4.0,
        );
        let sol = greedy_construct(&inst, ConstraintSet::PHASE_A);
        assert!(sol.feasible);
        assert_eq!(sol.fleet_size, 2);
    }

    #[test]
    fn feasible_outputs_pass_check_solution_over_seeds() {
        let mut feasible = 0;
        for seed in 0..1000u64 {
            let inst = generate(&GenConfig::new(
                6,
                2,
                ClassSpec::parse("RC").unwrap(),
                seed,
            ))
            .unwrap();
            let sol = greedy_construct(&inst, ConstraintSet::PHASE_C);
            if sol.feasible {
                feasible += 1;
                let re = check_solution(&inst, &sol.routes, ConstraintSet::PHASE_C).unwrap();
                assert!(re.feasible);
                assert!((re.cost - sol.cost).abs() < 1e-9);
            } else {
                assert!(sol.cost.is_infinite());
            }
        }
        assert!(feasible > 500, "only {feasible}/1000 feasible");
    }

    #[test]
    fn deterministic_construction() {
        let inst = generate(&GenConfig::new(8, 2, ClassSpec::parse("R").unwrap(), 7)).unwrap();
        let a = greedy_construct(&inst, ConstraintSet::PHASE_C);
        let b = greedy_construct(&inst, ConstraintSet::PHASE_C);
        assert_eq!(a.routes, b.routes);
    }
}
