//! Exact depth-first branch-and-bound over mask-legal constructions.
//!
//! Search states are environment states; children are exactly the
//! actions the environment mask allows (plus a configurable cap on
//! station visits per route). Pruning combines three lower bounds —
//! accumulated cost, a fleet bound from remaining demand, and a minimum
//! spanning tree over the unvisited customers plus the current position
//! and depot — with componentwise label dominance at equal (visited,
//! position). Exhausting the search yields an optimality certificate;
//! ties are broken toward the lexicographically smallest route list.
//!
//! Also hosts the brute-force enumeration oracle used to cross-check the
//! solver on tiny instances.

use crate::env::{self, EnvState};
use crate::model::{
    check_solution, routes_lex_less, ConstraintSet, Instance, Solution, EPS,
};
use std::collections::HashMap;
use std::time::Instant;

#[derive(Debug, Clone)]
pub struct ExactConfig {
    pub time_limit_s: f64,
    /// Station visits allowed per route. Unlimited by default — a station
    /// must directly follow a customer, so visits are naturally bounded by
    /// the customers in the route; lower it to trade optimality for speed.
    pub max_stations_per_route: usize,
}

impl Default for ExactConfig {
    fn default() -> ExactConfig {
        ExactConfig { time_limit_s: 600.0, max_stations_per_route: usize::MAX }
    }
}

#[derive(Debug, Clone)]
pub struct ExactResult {
    pub solution: Solution,
    /// True iff the search space was exhausted within the time limit, so
    /// the result (or infeasibility verdict) is proven optimal.
    pub certificate: bool,
}

struct Search<'a> {
    instance: &'a Instance,
    config: &'a ExactConfig,
    deadline: Instant,
    expansions: u64,
    timed_out: bool,
    incumbent: Option<(f64, Vec<Vec<usize>>)>,
    /// Non-dominated labels per (visited, position):
    /// (clock, battery, load, cost, stations in current route).
    labels: HashMap<(u128, usize), Vec<(f64, f64, u32, f64, usize)>>,
}

fn mst_lower_bound(instance: &Instance, vertices: &[usize]) -> f64 {
    if vertices.len() <= 1 {
        return 0.0;
    }
    let mut in_tree = vec![false; vertices.len()];
    let mut best = vec![f64::INFINITY; vertices.len()];
    best[0] = 0.0;
    let mut total = 0.0;
    for _ in 0..vertices.len() {
        let mut u = usize::MAX;
        for i in 0..vertices.len() {
            if !in_tree[i] && (u == usize::MAX || best[i] < best[u]) {
                u = i;
            }
        }
        in_tree[u] = true;
        total += best[u];
        for i in 0..vertices.len() {
            if !in_tree[i] {
                let d = instance.dist(vertices[u], vertices[i]);
                if d < best[i] {
                    best[i] = d;
                }
            }
        }
    }
    total
}

impl<'a> Search<'a> {
    fn lower_bound(&self, state: &EnvState, cost_so_far: f64) -> f64 {
        let unvisited: Vec<usize> = self
            .instance
            .customer_ids()
            .filter(|&c| !state.visited_customer(c))
            .collect();
        let mut vertices = vec![0usize];
        if state.position != 0 {
            vertices.push(state.position);
        }
        vertices.extend(&unvisited);
        let dist_lb = mst_lower_bound(self.instance, &vertices);

        let rem_demand: u64 = unvisited
            .iter()
            .map(|&c| self.instance.nodes[c].demand as u64)
            .sum();
        let q = self.instance.capacity as u64;
        let mut fleet_lb = 0u64;
        if state.position != 0 {
            // The open route must eventually close and pay its penalty.
            fleet_lb += 1;
            let rem_cap = q - state.load_used.min(self.instance.capacity) as u64;
            let overflow = rem_demand.saturating_sub(rem_cap);
            fleet_lb += overflow.div_ceil(q);
        } else {
            fleet_lb += rem_demand.div_ceil(q);
        }
        cost_so_far + dist_lb + self.instance.fleet_penalty * fleet_lb as f64
    }

    fn stations_in_current_route(&self, state: &EnvState) -> usize {
        state
            .current_route
            .iter()
            .filter(|&&id| self.instance.is_station(id))
            .count()
    }

    fn dominated(&mut self, state: &EnvState, cost: f64) -> bool {
        let key = (state.visited, state.position);
        let label = (
            state.clock,
            state.battery,
            state.load_used,
            cost,
            self.stations_in_current_route(state),
        );
        let entry = self.labels.entry(key).or_default();
        for l in entry.iter() {
            if l.0 <= label.0 + 1e-12
                && l.1 >= label.1 - 1e-12
                && l.2 <= label.2
                && l.3 <= label.3 + 1e-12
                && l.4 <= label.4
            {
                return true;
            }
        }
        entry.retain(|l| {
            !(label.0 <= l.0 + 1e-12
                && label.1 >= l.1 - 1e-12
                && label.2 <= l.2
                && label.3 <= l.3 + 1e-12
                && label.4 <= l.4)
        });
        entry.push(label);
        false
    }

    fn offer(&mut self, cost: f64, routes: Vec<Vec<usize>>) {
        match &self.incumbent {
            Some((best, best_routes)) => {
                if cost < best - EPS
                    || ((cost - best).abs() <= EPS && routes_lex_less(&routes, best_routes))
                {
                    self.incumbent = Some((cost, routes));
                }
            }
            None => self.incumbent = Some((cost, routes)),
        }
    }

    fn dfs(&mut self, state: &EnvState, cost_so_far: f64) {
        if self.timed_out {
            return;
        }
        self.expansions += 1;
        if self.expansions % 1024 == 0 && Instant::now() >= self.deadline {
            self.timed_out = true;
            return;
        }
        let mut mask = env::feasible_actions(self.instance, state);
        if self.stations_in_current_route(state) >= self.config.max_stations_per_route {
            for s in self.instance.station_ids() {
                mask[s] = false;
            }
        }
        for action in 0..mask.len() {
            if !mask[action] {
                continue;
            }
            let (child, outcome) =
                env::step(self.instance, state, action).expect("action from mask");
            let cost = cost_so_far - outcome.reward;
            if child.terminal {
                self.offer(cost, child.all_routes());
                continue;
            }
            if let Some((best, _)) = &self.incumbent {
                if self.lower_bound(&child, cost) > best + EPS {
                    continue;
                }
            }
            if self.dominated(&child, cost) {
                continue;
            }
            self.dfs(&child, cost);
        }
    }
}

pub fn exact_solve(
    instance: &Instance,
    constraints: ConstraintSet,
    time_limit_s: f64,
) -> ExactResult {
    exact_solve_with(
        instance,
        constraints,
        &ExactConfig { time_limit_s, ..ExactConfig::default() },
    )
}

pub fn exact_solve_with(
    instance: &Instance,
    constraints: ConstraintSet,
    config: &ExactConfig,
) -> ExactResult {
    let started = Instant::now();
    let mut search = Search {
        instance,
        config,
        deadline: started + std::time::Duration::from_secs_f64(config.time_limit_s.max(0.001)),
        expansions: 0,
        timed_out: false,
        incumbent: None,
        labels: HashMap::new(),
    };
    let root = env::reset(instance, constraints, None).expect("unforced reset");
    search.dfs(&root, 0.0);

    let certificate = !search.timed_out;
    let solution = match search.incumbent {
        Some((_, routes)) => check_solution(instance, &routes, constraints)
            .expect("incumbent routes are structurally valid"),
        None => Solution::infeasible_marker(instance.n_customers),
    };
    ExactResult { solution, certificate }
}

/// Brute-force oracle: enumerates every partition of the customers into
/// ordered routes, with up to `max_stations_per_route` station visits
/// inserted after customers, and evaluates each candidate through
/// `check_solution`. Only usable for tiny instances.
pub fn enumerate_optimal(
    instance: &Instance,
    constraints: ConstraintSet,
    max_stations_per_route: usize,
) -> Option<Solution> {
    let customers: Vec<usize> = instance.customer_ids().collect();
    let mut best: Option<Solution> = None;
    let mut routes: Vec<Vec<usize>> = Vec::new();
    enumerate_partitions(instance, constraints, &customers, &mut routes, &mut best, max_stations_per_route);
    best
}

/// Recursively assigns each customer to an existing route position or a
/// new route, enumerating every "set of lists".
fn enumerate_partitions(
    instance: &Instance,
    constraints: ConstraintSet,
    remaining: &[usize],
    routes: &mut Vec<Vec<usize>>,
    best: &mut Option<Solution>,
    max_stations: usize,
) {
    if remaining.is_empty() {
        evaluate_with_stations(instance, constraints, routes, best, max_stations);
        return;
    }
    let c = remaining[0];
    let rest = &remaining[1..];
    for r in 0..routes.len() {
        for pos in 0..=routes[r].len() {
            routes[r].insert(pos, c);
            enumerate_partitions(instance, constraints, rest, routes, best, max_stations);
            routes[r].remove(pos);
        }
    }
    routes.push(vec![c]);
    enumerate_partitions(instance, constraints, rest, routes, best, max_stations);
    routes.pop();
}

/// Expands customer-only routes with every station insertion pattern (at
/// most `max_stations` per route, inserted after some customer) and
/// keeps the cheapest feasible candidate.
fn evaluate_with_stations(
    instance: &Instance,
    constraints: ConstraintSet,
    routes: &[Vec<usize>],
    best: &mut Option<Solution>,
    max_stations: usize,
) {
    // Station visits are mask-legal only when battery is active.
    let per_route_options: Vec<Vec<Vec<usize>>> = routes
        .iter()
        .map(|r| route_station_variants(instance, r, if constraints.battery { max_stations } else { 0 }))
        .collect();
    let mut choice = vec![0usize; routes.len()];
    loop {
        let candidate: Vec<Vec<usize>> = per_route_options
            .iter()
            .zip(&choice)
            .map(|(opts, &i)| {
                let mut full = vec![0];
                full.extend(&opts[i]);
                full.push(0);
                full
            })
            .collect();
        if let Ok(sol) = check_solution(instance, &candidate, constraints) {
            if sol.feasible {
                let better = match best {
                    None => true,
                    Some(b) => {
                        sol.cost < b.cost - EPS
                            || ((sol.cost - b.cost).abs() <= EPS
                                && routes_lex_less(&sol.routes, &b.routes))
                    }
                };
                if better {
                    *best = Some(sol);
                }
            }
        }
        // Next mixed-radix choice vector.
        let mut i = 0;
        loop {
            if i == choice.len() {
                return;
            }
            choice[i] += 1;
            if choice[i] < per_route_options[i].len() {
                break;
            }
            choice[i] = 0;
            i += 1;
        }
    }
}

/// All ways to insert up to `max_stations` station visits into one route,
/// each directly after a customer (a station can never follow the depot:
/// the battery is full at route start).
fn route_station_variants(
    instance: &Instance,
    route: &[usize],
    max_stations: usize,
) -> Vec<Vec<usize>> {
    let stations: Vec<usize> = instance.station_ids().collect();
    if stations.is_empty() || max_stations == 0 {
        return vec![route.to_vec()];
    }
    // Consecutive stations are never representable, so each customer
    // position carries one slot: empty, or one of the stations. Walk the
    // mixed-radix space of slot assignments.
    let cust_pos: Vec<usize> = route
        .iter()
        .enumerate()
        .filter(|&(_, &id)| instance.is_customer(id))
        .map(|(i, _)| i)
        .collect();
    let mut variants = Vec::new();
    let mut choice = vec![0usize; cust_pos.len()];
    loop {
        let used = choice.iter().filter(|&&c| c > 0).count();
        if used <= max_stations {
            let mut v = Vec::with_capacity(route.len() + used);
            for (i, &id) in route.iter().enumerate() {
                v.push(id);
                if let Some(k) = cust_pos.iter().position(|&p| p == i) {
                    if choice[k] > 0 {
                        v.push(stations[choice[k] - 1]);
                    }
                }
            }
            variants.push(v);
        }
        let mut k = 0;
        loop {
            if k == choice.len() {
                return variants;
            }
            choice[k] += 1;
            if choice[k] <= stations.len() {
                break;
            }
            choice[k] = 0;
            k += 1;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::greedy_construct;
    use crate::instancegen::{generate, ClassSpec, GenConfig};
    use crate::model::test_util::manual_instance;

    #[test]
    fn single_customer_round_trip() {
        let inst = manual_instance(&[(0.5, 0.9, 3, 0.0, 4.0)], &[], 30, 2.0, 4.0);
        let res = exact_solve(&inst, ConstraintSet::PHASE_C, 10.0);
        assert!(res.certificate);
        assert!(res.solution.feasible);
        assert!((res.solution.cost - (2.0 * 0.4 + 100.0)).abs() < 1e-9);
        assert_eq!(res.solution.routes, vec![vec![0, 1, 0]]);
    }

    #[test]
    fn symmetric_tie_breaks_lexicographically() {
        let inst = manual_instance(
            &[(0.4, 0.5, 1, 0.0, 4.0), (0.6, 0.5, 1, 0.0, 4.0)],
            &[],
            30,
            2.0,
            4.0,
        );
        let res = exact_solve(&inst, ConstraintSet::PHASE_C, 10.0);
        assert!(res.certificate);
        // Both single-route orders cost 0.1 + 0.2 + 0.1 + lambda; the
        // lexicographically smaller [0,1,2,0] must win.
        assert_eq!(res.solution.routes, vec![vec![0, 1, 2, 0]]);
    }

    #[test]
    fn matches_enumeration_on_small_instances() {
        for seed in 0..12u64 {
            let inst =
                generate(&GenConfig::new(4, 2, ClassSpec::parse("R").unwrap(), 600 + seed))
                    .unwrap();
            for constraints in [
                ConstraintSet::PHASE_A,
                ConstraintSet::PHASE_B,
                ConstraintSet::PHASE_C,
            ] {
                let res = exact_solve(&inst, constraints, 30.0);
                let oracle = enumerate_optimal(&inst, constraints, usize::MAX);
                assert!(res.certificate, "seed {seed} did not certify");
                match oracle {
                    Some(opt) => {
                        assert!(res.solution.feasible);
                        assert!(
                            (res.solution.cost - opt.cost).abs() < 1e-9,
                            "seed {seed}: bnb {} vs oracle {}",
                            res.solution.cost,
                            opt.cost
                        );
                    }
                    None => assert!(!res.solution.feasible),
                }
            }
        }
    }

    #[test]
    fn phase_a_is_capacity_only_cvrp() {
        // Battery and windows off: station insertions are never used and
        // enumeration over pure customer partitions agrees.
        let inst = generate(&GenConfig::new(5, 2, ClassSpec::parse("C").unwrap(), 77)).unwrap();
        let res = exact_solve(&inst, ConstraintSet::PHASE_A, 30.0);
        let oracle = enumerate_optimal(&inst, ConstraintSet::PHASE_A, 0).unwrap();
        assert!(res.certificate);
        assert!((res.solution.cost - oracle.cost).abs() < 1e-9);
        assert!(res
            .solution
            .routes
            .iter()
            .flatten()
            .all(|&id| !inst.is_station(id)));
    }

    #[test]
    fn certified_result_never_beaten_by_heuristics() {
        for seed in 0..10u64 {
            let inst =
                generate(&GenConfig::new(5, 2, ClassSpec::parse("Rm").unwrap(), 900 + seed))
                    .unwrap();
            let res = exact_solve(&inst, ConstraintSet::PHASE_C, 30.0);
            assert!(res.certificate);
            let greedy = greedy_construct(&inst, ConstraintSet::PHASE_C);
            if greedy.feasible {
                assert!(res.solution.feasible);
                assert!(greedy.cost >= res.solution.cost - 1e-9);
            }
        }
    }

    #[test]
    fn timeout_returns_uncertified_incumbent() {
        // Phase A on a larger instance has a search space far beyond a
        // millisecond budget.
        let inst = generate(&GenConfig::new(12, 3, ClassSpec::parse("R").unwrap(), 5)).unwrap();
        let res = exact_solve(&inst, ConstraintSet::PHASE_A, 0.001);
        assert!(!res.certificate);
    }

    #[test]
    fn solver_is_deterministic() {
        let inst = generate(&GenConfig::new(5, 2, ClassSpec::parse("RC").unwrap(), 3)).unwrap();
        let a = exact_solve(&inst, ConstraintSet::PHASE_C, 30.0);
        let b = exact_solve(&inst, ConstraintSet::PHASE_C, 30.0);
        assert_eq!(a.solution.routes, b.solution.routes);
        assert_eq!(a.certificate, b.certificate);
    }
}
