//! The EVRPTW Markov decision process: rollout state, phase-gated action
//! masks, transition dynamics and reward.
//!
//! The battery mask uses a one-step-escape lookahead: a customer is only
//! offered if the vehicle can reach it and still make it to the nearest
//! station or the depot afterwards. This prevents most dead ends without
//! full (NP-hard) feasibility lookahead; an all-false mask is still a
//! legal outcome and is resolved by `mark_infeasible`.

use crate::model::{ConstraintSet, Instance, NodeKind, EPS};
use serde::Serialize;

/// Per-unserved-customer penalty factor applied on infeasible termination,
/// as a multiple of the fleet penalty.
pub const INFEASIBLE_PENALTY_FACTOR: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EnvState {
    pub constraints: ConstraintSet,
    pub position: usize,
    pub load_used: u32,
    pub battery: f64,
    pub clock: f64,
    /// Customer bitmask; bit c-1 set means customer c served.
    pub visited: u128,
    pub fleet_count: usize,
    pub current_route: Vec<usize>,
    pub current_arrivals: Vec<f64>,
    pub current_batteries: Vec<f64>,
    pub finished_routes: Vec<Vec<usize>>,
    pub finished_arrivals: Vec<Vec<f64>>,
    pub finished_batteries: Vec<Vec<f64>>,
    pub terminal: bool,
    pub infeasible: bool,
    /// POMO multi-start: restricts the very first mask to this customer.
    pub forced_start: Option<usize>,
    pub steps: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepOutcome {
    pub reward: f64,
    pub terminal: bool,
    pub info: StepInfo,
}

#[derive(Debug, Clone, Serialize)]
pub struct StepInfo {
    pub closed_route: bool,
    pub waited: f64,
    pub recharged: f64,
    pub unserved: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("invalid start customer {0}")]
    InvalidStart(usize),
    #[error("action {0} violates the feasibility mask")]
    MaskViolation(usize),
    #[error("step on terminal state")]
    Terminal,
    #[error("mark_infeasible called with a non-empty mask")]
    MaskNotEmpty,
}

impl EnvState {
    pub fn visited_customer(&self, c: usize) -> bool {
        self.visited >> (c - 1) & 1 == 1
    }

    pub fn all_served(&self, instance: &Instance) -> bool {
        self.visited.count_ones() as usize == instance.n_customers
    }

    pub fn unserved_count(&self, instance: &Instance) -> usize {
        instance.n_customers - self.visited.count_ones() as usize
    }

    /// Routes including the in-progress one (closed with a depot return).
    pub fn all_routes(&self) -> Vec<Vec<usize>> {
        let mut routes = self.finished_routes.clone();
        if self.current_route.len() > 1 {
            routes.push(self.current_route.clone());
        }
        routes
    }

    /// Short digest for trace export.
    pub fn digest(&self) -> String {
        format!(
            "pos={} load={} bat={:.6} clock={:.6} visited={:x} fleet={}",
            self.position, self.load_used, self.battery, self.clock, self.visited, self.fleet_count
        )
    }
}

pub fn reset(
    instance: &Instance,
    constraints: ConstraintSet,
    start_customer: Option<usize>,
) -> Result<EnvState, EnvError> {
    if let Some(c) = start_customer {
        if !instance.is_customer(c) {
            return Err(EnvError::InvalidStart(c));
        }
    }
    Ok(EnvState {
        constraints,
        position: 0,
        load_used: 0,
        battery: instance.battery_capacity,
        clock: 0.0,
        visited: 0,
        fleet_count: 0,
        current_route: vec![0],
        current_arrivals: vec![0.0],
        current_batteries: vec![instance.battery_capacity],
        finished_routes: Vec::new(),
        finished_arrivals: Vec::new(),
        finished_batteries: Vec::new(),
        terminal: false,
        infeasible: false,
        forced_start: start_customer,
        steps: 0,
    })
}

/// Cheapest escape after serving node `j`: distance to the nearest
/// station (excluding `j` itself) or the depot.
fn escape_distance(instance: &Instance, j: usize) -> f64 {
    let mut best = instance.dist(j, 0);
    for s in instance.station_ids() {
        if s != j {
            best = best.min(instance.dist(j, s));
        }
    }
    best
}

fn customer_allowed(instance: &Instance, state: &EnvState, c: usize) -> bool {
    if state.visited_customer(c) {
        return false;
    }
    let node = &instance.nodes[c];
    if state.load_used as u64 + node.demand as u64 > instance.capacity as u64 {
        return false;
    }
    let d = instance.dist(state.position, c);
    if state.constraints.battery {
        let need = instance.consume_rate * (d + escape_distance(instance, c));
        if need > state.battery + EPS {
            return false;
        }
    }
    if state.constraints.time_windows {
        let arrival = state.clock + instance.travel_time(state.position, c);
        if arrival > node.tw_close + EPS {
            return false;
        }
        let depart = arrival.max(node.tw_open) + node.service_time;
        if depart + instance.travel_time(c, 0) > instance.horizon + EPS {
            return false;
        }
    }
    true
}

fn station_allowed(instance: &Instance, state: &EnvState, s: usize) -> bool {
    if !state.constraints.battery || s == state.position {
        return false;
    }
    if state.battery >= instance.battery_capacity - EPS {
        return false;
    }
    instance.consume_rate * instance.dist(state.position, s) <= state.battery + EPS
}

fn depot_allowed(instance: &Instance, state: &EnvState) -> bool {
    if state.position == 0 {
        return false;
    }
    if state.constraints.battery
        && instance.consume_rate * instance.dist(state.position, 0) > state.battery + EPS
    {
        return false;
    }
    if state.constraints.time_windows
        && state.clock + instance.travel_time(state.position, 0) > instance.horizon + EPS
    {
        return false;
    }
    state.current_route.len() > 1 || state.all_served(instance)
}

/// Boolean mask over node ids. All-false is a legal output (dead end).
pub fn feasible_actions(instance: &Instance, state: &EnvState) -> Vec<bool> {
    let n = instance.n_nodes();
    let mut mask = vec![false; n];
    if state.terminal {
        return mask;
    }
    mask[0] = depot_allowed(instance, state);
    for c in instance.customer_ids() {
        mask[c] = customer_allowed(instance, state, c);
    }
    for s in instance.station_ids() {
        mask[s] = station_allowed(instance, state, s);
    }
    if state.steps == 0 {
        if let Some(fc) = state.forced_start {
            let keep = mask[fc];
            mask.iter_mut().for_each(|m| *m = false);
            mask[fc] = keep;
        }
    }
    mask
}

pub fn step(
    instance: &Instance,
    state: &EnvState,
    action: usize,
) -> Result<(EnvState, StepOutcome), EnvError> {
    if state.terminal {
        return Err(EnvError::Terminal);
    }
    let mask = feasible_actions(instance, state);
    if action >= mask.len() || !mask[action] {
        return Err(EnvError::MaskViolation(action));
    }

    let mut next = state.clone();
    let d = instance.dist(state.position, action);
    next.clock += instance.travel_time(state.position, action);
    if next.constraints.battery {
        next.battery -= instance.consume_rate * d;
    }
    next.position = action;
    next.steps += 1;
    next.current_route.push(action);
    next.current_arrivals.push(next.clock);
    next.current_batteries.push(next.battery);

    let mut reward = -d;
    let mut closed_route = false;
    let mut waited = 0.0;
    let mut recharged = 0.0;

    match instance.nodes[action].kind {
        NodeKind::Customer => {
            let node = &instance.nodes[action];
            if next.clock < node.tw_open {
                waited = node.tw_open - next.clock;
                next.clock = node.tw_open;
            }
            next.clock += node.service_time;
            next.load_used += node.demand;
            next.visited |= 1u128 << (action - 1);
        }
        NodeKind::Station => {
            recharged = instance.battery_capacity - next.battery;
            next.clock += recharged / instance.recharge_rate;
            next.battery = instance.battery_capacity;
        }
        NodeKind::Depot => {
            closed_route = next
                .current_route
                .iter()
                .any(|&id| instance.is_customer(id));
            if closed_route {
                next.fleet_count += 1;
                reward -= instance.fleet_penalty;
            }
            next.finished_routes.push(std::mem::take(&mut next.current_route));
            next.finished_arrivals.push(std::mem::take(&mut next.current_arrivals));
            next.finished_batteries.push(std::mem::take(&mut next.current_batteries));
            // Fresh vehicle for the next route.
            next.clock = 0.0;
            next.battery = instance.battery_capacity;
            next.load_used = 0;
            next.current_route = vec![0];
            next.current_arrivals = vec![0.0];
            next.current_batteries = vec![instance.battery_capacity];
            if next.all_served(instance) {
                next.terminal = true;
            }
        }
    }

    let outcome = StepOutcome {
        reward,
        terminal: next.terminal,
        info: StepInfo {
            closed_route,
            waited,
            recharged,
            unserved: next.unserved_count(instance),
        },
    };
    Ok((next, outcome))
}

/// Resolves an all-false mask: terminal, infeasible, penalised per
/// unserved customer.
pub fn mark_infeasible(
    instance: &Instance,
    state: &EnvState,
) -> Result<(EnvState, StepOutcome), EnvError> {
    let mask = feasible_actions(instance, state);
    if mask.iter().any(|&m| m) {
        return Err(EnvError::MaskNotEmpty);
    }
    let mut next = state.clone();
    next.terminal = true;
    next.infeasible = true;
    let unserved = state.unserved_count(instance);
    let reward = -INFEASIBLE_PENALTY_FACTOR * instance.fleet_penalty * unserved as f64;
    Ok((
        next,
        StepOutcome {
            reward,
            terminal: true,
            info: StepInfo {
                closed_route: false,
                waited: 0.0,
                recharged: 0.0,
                unserved,
            },
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_util::*;
    use crate::model::{check_solution, objective};

    fn three_customer_instance() -> Instance {
        manual_instance(
            &[
                (0.3, 0.6, 4, 0.0, 3.5),
                (0.7, 0.4, 5, 0.0, 3.5),
                (0.5, 0.8, 6, 0.0, 3.5),
            ],
            &[(0.5, 0.3)],
            30,
            2.0,
            4.0,
        )
    }

    #[test]
    fn reset_contract() {
        let inst = three_customer_instance();
        let s = reset(&inst, ConstraintSet::PHASE_A, None).unwrap();
        assert_eq!(s.position, 0);
        assert_eq!(s.clock, 0.0);
        assert_eq!(s.battery, inst.battery_capacity);
        let mask = feasible_actions(&inst, &s);
        assert!(!mask[0], "cannot move depot to depot");
        assert!(mask[1] && mask[2] && mask[3]);
        let s2 = reset(&inst, ConstraintSet::PHASE_A, None).unwrap();
        assert_eq!(s, s2);
    }

    #[test]
    fn reset_forced_start() {
        let inst = three_customer_instance();
        let s = reset(&inst, ConstraintSet::PHASE_A, Some(3)).unwrap();
        let mask = feasible_actions(&inst, &s);
        assert_eq!(mask, vec![false, false, false, true, false]);
        assert!(reset(&inst, ConstraintSet::PHASE_A, Some(4)).is_err());
    }

    #[test]
    fn phase_a_mask_is_capacity_only() {
        let inst = three_customer_instance();
        let s = reset(&inst, ConstraintSet::PHASE_A, None).unwrap();
        let mask = feasible_actions(&inst, &s);
        // Stations never enter the mask while battery is off.
        assert!(!mask[4]);
    }

    #[test]
    fn one_step_escape_arithmetic() {
        // Depot (0,0), customer (0,0.6), station (0,0.3); battery 0.65 at
        // depot: 0.6 to reach + 0.3 escape = 0.9 > 0.65, so the customer
        // is masked while the station stays reachable.
        let mut inst = manual_instance_at(
            (0.0, 0.0),
            &[(0.0, 0.6, 1, 0.0, 4.0)],
            &[(0.0, 0.3)],
            30,
            1.0,
            4.0,
        );
        inst.battery_capacity = 1.0;
        let mut s = reset(&inst, ConstraintSet::PHASE_B, None).unwrap();
        s.battery = 0.65;
        let mask = feasible_actions(&inst, &s);
        assert!(!mask[1], "customer fails one-step escape");
        assert!(mask[2], "station reachable");
    }

    #[test]
    fn expired_window_masked() {
        let inst = three_customer_instance();
        let mut s = reset(&inst, ConstraintSet::PHASE_C, None).unwrap();
        s.clock = 3.6; // beyond every tw_close of 3.5
        let mask = feasible_actions(&inst, &s);
        assert!(!mask[1] && !mask[2] && !mask[3]);
    }

    #[test]
    fn waiting_and_service() {
        let inst = manual_instance_at(
            (0.0, 0.0),
            &[(0.0, 1.0, 1, 1.5, 3.0)],
            &[],
            30,
            4.0,
            4.0,
        );
        let s = reset(&inst, ConstraintSet::PHASE_C, None).unwrap();
        let (s2, o) = step(&inst, &s, 1).unwrap();
        assert!((o.info.waited - 0.5).abs() < EPS);
        assert!((s2.clock - 1.55).abs() < EPS);
    }

    #[test]
    fn station_recharge_time() {
        let inst = manual_instance_at(
            (0.0, 0.0),
            &[(0.4, 0.0, 1, 0.0, 4.0)],
            &[(0.3, 0.0)],
            30,
            1.0,
            4.0,
        );
        let s = reset(&inst, ConstraintSet::PHASE_B, None).unwrap();
        let (s1, _) = step(&inst, &s, 1).unwrap();
        assert!((s1.battery - 0.6).abs() < EPS);
        let (s2, _) = step(&inst, &s1, 2).unwrap();
        // battery 0.6 - 0.1 = 0.5 on arrival, recharge 0.5 at rate 5.
        assert!((s2.battery - 1.0).abs() < EPS);
        // travel 0.4, service 0.05, travel 0.1, recharge 0.5 / 5.
        assert!((s2.clock - (0.4 + 0.05 + 0.1 + 0.5 / 5.0)).abs() < EPS);
    }

    #[test]
    fn full_episode_reward_matches_objective() {
        let inst = three_customer_instance();
        let mut s = reset(&inst, ConstraintSet::PHASE_C, None).unwrap();
        let mut total = 0.0;
        while !s.terminal {
            let mask = feasible_actions(&inst, &s);
            // Greedy: nearest allowed customer, else depot.
            let mut action = None;
            let mut best = f64::INFINITY;
            for c in inst.customer_ids() {
                if mask[c] && inst.dist(s.position, c) < best {
                    best = inst.dist(s.position, c);
                    action = Some(c);
                }
            }
            let a = action.unwrap_or(0);
            assert!(mask[a]);
            let (s2, o) = step(&inst, &s, a).unwrap();
            total += o.reward;
            s = s2;
        }
        let routes = s.finished_routes.clone();
        let j = objective(&routes, &inst).unwrap();
        assert!((total + j).abs() < EPS);
        let sol = check_solution(&inst, &routes, ConstraintSet::PHASE_C).unwrap();
        assert!(sol.feasible);
    }

    #[test]
    fn mask_violation_is_hard_error() {
        let inst = three_customer_instance();
        let s = reset(&inst, ConstraintSet::PHASE_A, None).unwrap();
        assert!(matches!(step(&inst, &s, 0), Err(EnvError::MaskViolation(0))));
    }

    #[test]
    fn infeasible_penalty() {
        // Customer out of battery range with no stations in reach.
        let inst = manual_instance_at(
            (0.0, 0.0),
            &[(0.0, 0.9, 1, 0.0, 4.0), (0.9, 0.0, 1, 0.0, 4.0)],
            &[(0.9, 0.9)],
            30,
            1.0,
            4.0,
        );
        let s = reset(&inst, ConstraintSet::PHASE_B, None).unwrap();
        let mask = feasible_actions(&inst, &s);
        assert!(mask.iter().all(|&m| !m));
        let (s2, o) = mark_infeasible(&inst, &s).unwrap();
        assert!(s2.terminal && s2.infeasible);
        assert!((o.reward - (-400.0)).abs() < EPS, "2 unserved at 2 * lambda each");
    }

    #[test]
    fn mark_infeasible_precondition() {
        let inst = three_customer_instance();
        let s = reset(&inst, ConstraintSet::PHASE_A, None).unwrap();
        assert!(matches!(
            mark_infeasible(&inst, &s),
            Err(EnvError::MaskNotEmpty)
        ));
    }

    #[test]
    fn replay_agrees_with_check_solution() {
        let inst = three_customer_instance();
        let mut s = reset(&inst, ConstraintSet::PHASE_C, None).unwrap();
        let order = [2usize, 0, 1, 3, 0];
        for &a in &order {
            let (s2, _) = step(&inst, &s, a).unwrap();
            s = s2;
        }
        assert!(s.terminal && !s.infeasible);
        let sol = check_solution(&inst, &s.finished_routes, ConstraintSet::PHASE_C).unwrap();
        assert!(sol.feasible);
        for (r, route) in s.finished_routes.iter().enumerate() {
            assert_eq!(&sol.routes[r], route);
            for (k, _) in route.iter().enumerate() {
                assert!((sol.arrival_times[r][k] - s.finished_arrivals[r][k]).abs() < EPS);
                assert!((sol.battery_levels[r][k] - s.finished_batteries[r][k]).abs() < EPS);
            }
        }
    }
}
