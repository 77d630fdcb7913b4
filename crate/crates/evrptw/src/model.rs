//! Core domain types, the objective function, and an independent solution
//! validator shared by every other module.
//!
//! `check_solution` replays routes with the full transition semantics and
//! is deliberately independent of the environment's step logic; the two
//! are cross-checked against each other in tests.

use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

/// Numeric slack used for all feasibility comparisons.
pub const EPS: f64 = 1e-9;

pub const INSTANCE_FORMAT: &str = "evrptw-instance/1";
pub const SOLUTION_FORMAT: &str = "evrptw-solution/1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeKind {
    Depot,
    Customer,
    Station,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub kind: NodeKind,
    pub x: f64,
    pub y: f64,
    pub demand: u32,
    pub service_time: f64,
    pub tw_open: f64,
    pub tw_close: f64,
}

/// Immutable problem description. Node order is fixed: depot (id 0),
/// then `n_customers` customers, then `n_stations` stations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub n_customers: usize,
    pub n_stations: usize,
    pub capacity: u32,
    pub battery_capacity: f64,
    pub consume_rate: f64,
    pub recharge_rate: f64,
    pub speed: f64,
    pub horizon: f64,
    pub fleet_penalty: f64,
    pub class_label: String,
    pub seed: u64,
    pub nodes: Vec<Node>,
}

impl Instance {
    pub fn n_nodes(&self) -> usize {
        1 + self.n_customers + self.n_stations
    }

    /// Exact Euclidean distance, never rounded.
    pub fn dist(&self, i: usize, j: usize) -> f64 {
        let a = &self.nodes[i];
        let b = &self.nodes[j];
        let dx = a.x - b.x;
        let dy = a.y - b.y;
        (dx * dx + dy * dy).sqrt()
    }

    pub fn travel_time(&self, i: usize, j: usize) -> f64 {
        self.dist(i, j) / self.speed
    }

    pub fn is_customer(&self, id: usize) -> bool {
        (1..=self.n_customers).contains(&id)
    }

    pub fn is_station(&self, id: usize) -> bool {
        id > self.n_customers && id < self.n_nodes()
    }

    pub fn customer_ids(&self) -> std::ops::Range<usize> {
        1..1 + self.n_customers
    }

    pub fn station_ids(&self) -> std::ops::Range<usize> {
        1 + self.n_customers..self.n_nodes()
    }

    pub fn total_demand(&self) -> u64 {
        self.customer_ids().map(|i| self.nodes[i].demand as u64).sum()
    }

    /// ceil(total demand / capacity): minimum number of vehicles.
    pub fn fleet_lower_bound(&self) -> u64 {
        let total = self.total_demand();
        (total + self.capacity as u64 - 1) / self.capacity as u64
    }

    /// Maximum distance coverable on a full charge.
    pub fn range(&self) -> f64 {
        self.battery_capacity / self.consume_rate
    }
}

/// Phase-gated feasibility flags. Capacity is active in every phase and
/// time windows imply battery (the phases are nested).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub capacity: bool,
    pub battery: bool,
    pub time_windows: bool,
}

impl ConstraintSet {
    pub const PHASE_A: ConstraintSet = ConstraintSet {
        capacity: true,
        battery: false,
        time_windows: false,
    };
    pub const PHASE_B: ConstraintSet = ConstraintSet {
        capacity: true,
        battery: true,
        time_windows: false,
    };
    pub const PHASE_C: ConstraintSet = ConstraintSet {
        capacity: true,
        battery: true,
        time_windows: true,
    };

    pub fn is_valid(&self) -> bool {
        self.capacity && (!self.time_windows || self.battery)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViolationKind {
    Capacity,
    Battery,
    TimeWindow,
    Coverage,
    Structure,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub kind: ViolationKind,
    pub route: Option<usize>,
    pub node: Option<usize>,
    pub magnitude: f64,
}

/// Ordered routes with their replayed schedules and the cost breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub routes: Vec<Vec<usize>>,
    pub arrival_times: Vec<Vec<f64>>,
    pub battery_levels: Vec<Vec<f64>>,
    pub total_distance: f64,
    pub fleet_size: usize,
    pub cost: f64,
    pub feasible: bool,
    pub violations: Vec<Violation>,
}

impl Solution {
    /// Marker used when a method fails to produce any complete solution.
    pub fn infeasible_marker(unserved: usize) -> Solution {
        Solution {
            routes: Vec::new(),
            arrival_times: Vec::new(),
            battery_levels: Vec::new(),
            total_distance: 0.0,
            fleet_size: 0,
            cost: f64::INFINITY,
            feasible: false,
            violations: vec![Violation {
                kind: ViolationKind::Coverage,
                route: None,
                node: None,
                magnitude: unserved as f64,
            }],
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("route {route} references invalid node id {id}")]
    InvalidNodeId { route: usize, id: usize },
    #[error("route {0} must start and end at the depot and visit it nowhere else")]
    BadRouteShape(usize),
    #[error("io error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("bad file format at {path}: {detail}")]
    Format { path: String, detail: String },
}

fn check_route_structure(routes: &[Vec<usize>], instance: &Instance) -> Result<(), ModelError> {
    for (r, route) in routes.iter().enumerate() {
        if route.is_empty() {
            continue;
        }
        for &id in route {
            if id >= instance.n_nodes() {
                return Err(ModelError::InvalidNodeId { route: r, id });
            }
        }
        if route.len() < 2 || route[0] != 0 || *route.last().unwrap() != 0 {
            return Err(ModelError::BadRouteShape(r));
        }
        if route[1..route.len() - 1].contains(&0) {
            return Err(ModelError::BadRouteShape(r));
        }
    }
    Ok(())
}

/// Total operational cost J: summed edge distances plus the fleet
/// activation penalty for every route serving at least one customer.
pub fn objective(routes: &[Vec<usize>], instance: &Instance) -> Result<f64, ModelError> {
    check_route_structure(routes, instance)?;
    let mut dist = 0.0;
    let mut fleet = 0usize;
    for route in routes {
        if route.is_empty() {
            continue;
        }
        for w in route.windows(2) {
            dist += instance.dist(w[0], w[1]);
        }
        if route.iter().any(|&id| instance.is_customer(id)) {
            fleet += 1;
        }
    }
    Ok(dist + instance.fleet_penalty * fleet as f64)
}

/// Replays every route under the given constraint set and reports each
/// violation of an active flag. Coverage is checked regardless of phase.
///
/// Dynamics mirror the environment: waiting at early arrivals, full
/// recharge at stations, and a fresh vehicle (full battery, zero clock and
/// load) per route. Battery is only drained when the battery flag is on,
/// so phase-A replays agree with phase-A rollouts.
pub fn check_solution(
    instance: &Instance,
    routes: &[Vec<usize>],
    constraints: ConstraintSet,
) -> Result<Solution, ModelError> {
    check_route_structure(routes, instance)?;
    let mut violations = Vec::new();

    // Coverage: every customer exactly once across all routes.
    let mut counts = vec![0u32; instance.n_nodes()];
    for route in routes {
        for &id in route {
            counts[id] += 1;
        }
    }
    for c in instance.customer_ids() {
        if counts[c] != 1 {
            violations.push(Violation {
                kind: ViolationKind::Coverage,
                route: None,
                node: Some(c),
                magnitude: (counts[c] as f64 - 1.0).abs(),
            });
        }
    }

    let mut arrival_times = Vec::with_capacity(routes.len());
    let mut battery_levels = Vec::with_capacity(routes.len());
    let mut total_distance = 0.0;
    let mut fleet_size = 0usize;

    for (r, route) in routes.iter().enumerate() {
        let mut arrivals = Vec::with_capacity(route.len());
        let mut batteries = Vec::with_capacity(route.len());
        if route.is_empty() {
            arrival_times.push(arrivals);
            battery_levels.push(batteries);
            continue;
        }
        let mut clock = 0.0f64;
        let mut battery = instance.battery_capacity;
        let mut route_demand = 0u64;
        let mut capacity_hit: Option<usize> = None;
        arrivals.push(0.0);
        batteries.push(battery);

        for w in route.windows(2) {
            let (prev, cur) = (w[0], w[1]);
            let d = instance.dist(prev, cur);
            total_distance += d;
            clock += instance.travel_time(prev, cur);
            if constraints.battery {
                battery -= instance.consume_rate * d;
            }
            arrivals.push(clock);
            batteries.push(battery);
            if constraints.battery && battery < -EPS {
                violations.push(Violation {
                    kind: ViolationKind::Battery,
                    route: Some(r),
                    node: Some(cur),
                    magnitude: -battery,
                });
            }
            let node = &instance.nodes[cur];
            match node.kind {
                NodeKind::Customer => {
                    if constraints.time_windows && clock > node.tw_close + EPS {
                        violations.push(Violation {
                            kind: ViolationKind::TimeWindow,
                            route: Some(r),
                            node: Some(cur),
                            magnitude: clock - node.tw_close,
                        });
                    }
                    clock = clock.max(node.tw_open) + node.service_time;
                    route_demand += node.demand as u64;
                    if route_demand > instance.capacity as u64 && capacity_hit.is_none() {
                        capacity_hit = Some(cur);
                    }
                }
                NodeKind::Station => {
                    if constraints.battery {
                        // The mask forbids heading to a station while the battery
                        // is full, and it is full at the route-start depot and at
                        // every station; keep the checker aligned with the
                        // mask-reachable route space.
                        if instance.nodes[prev].kind != NodeKind::Customer {
                            violations.push(Violation {
                                kind: ViolationKind::Structure,
                                route: Some(r),
                                node: Some(cur),
                                magnitude: 1.0,
                            });
                        }
                        clock += (instance.battery_capacity - battery) / instance.recharge_rate;
                        battery = instance.battery_capacity;
                    }
                }
                NodeKind::Depot => {
                    // Route end; depot closing time is the horizon.
                    if constraints.time_windows && clock > instance.horizon + EPS {
                        violations.push(Violation {
                            kind: ViolationKind::TimeWindow,
                            route: Some(r),
                            node: Some(0),
                            magnitude: clock - instance.horizon,
                        });
                    }
                }
            }
        }
        if constraints.capacity {
            if let Some(node) = capacity_hit {
                violations.push(Violation {
                    kind: ViolationKind::Capacity,
                    route: Some(r),
                    node: Some(node),
                    magnitude: (route_demand - instance.capacity as u64) as f64,
                });
            }
        }
        if route.iter().any(|&id| instance.is_customer(id)) {
            fleet_size += 1;
        }
        arrival_times.push(arrivals);
        battery_levels.push(batteries);
    }

    let feasible = violations.is_empty();
    let cost = total_distance + instance.fleet_penalty * fleet_size as f64;
    Ok(Solution {
        routes: routes.to_vec(),
        arrival_times,
        battery_levels,
        total_distance,
        fleet_size,
        cost,
        feasible,
        violations,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InstanceViolationKind {
    Structure,
    DemandOverCapacity,
    BatteryUnreachable,
    WindowOverHorizon,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceViolation {
    pub kind: InstanceViolationKind,
    pub node: usize,
    pub magnitude: f64,
}

/// True iff customer `i` can be served on a full-recharge leg structure:
/// directly, or with one station detour after the visit. Detours before the
/// first customer are excluded: the vehicle leaves the depot fully charged,
/// and the action mask forbids recharge stops from a full battery.
fn battery_reachable(instance: &Instance, i: usize) -> bool {
    let range = instance.range();
    let d0 = instance.dist(0, i);
    if 2.0 * d0 <= range + EPS {
        return true;
    }
    // depot -> i -> station
    let out_direct = d0 <= range + EPS;
    for s in instance.station_ids() {
        let escape = instance.dist(i, s);
        if out_direct && d0 + escape <= range + EPS && instance.dist(s, 0) <= range + EPS {
            return true;
        }
    }
    false
}

/// Structural and logistical sanity of an instance; the generator uses an
/// empty result as its post-condition.
pub fn validate_instance(instance: &Instance) -> Vec<InstanceViolation> {
    let mut out = Vec::new();
    let push_struct = |out: &mut Vec<InstanceViolation>, node: usize, magnitude: f64| {
        out.push(InstanceViolation {
            kind: InstanceViolationKind::Structure,
            node,
            magnitude,
        });
    };

    if instance.nodes.len() != instance.n_nodes() {
        push_struct(&mut out, 0, instance.nodes.len() as f64);
        return out;
    }
    for (idx, node) in instance.nodes.iter().enumerate() {
        let expected = if idx == 0 {
            NodeKind::Depot
        } else if idx <= instance.n_customers {
            NodeKind::Customer
        } else {
            NodeKind::Station
        };
        if node.id != idx || node.kind != expected {
            push_struct(&mut out, idx, 0.0);
        }
        if !(0.0..=1.0).contains(&node.x) || !(0.0..=1.0).contains(&node.y) {
            push_struct(&mut out, idx, 0.0);
        }
        if node.tw_open > node.tw_close + EPS {
            push_struct(&mut out, idx, node.tw_open - node.tw_close);
        }
        if node.kind != NodeKind::Customer && (node.demand != 0 || node.service_time != 0.0) {
            push_struct(&mut out, idx, node.demand as f64 + node.service_time);
        }
    }
    if !out.is_empty() {
        return out;
    }

    for c in instance.customer_ids() {
        let node = &instance.nodes[c];
        if node.demand as u64 > instance.capacity as u64 {
            out.push(InstanceViolation {
                kind: InstanceViolationKind::DemandOverCapacity,
                node: c,
                magnitude: (node.demand - instance.capacity) as f64,
            });
        }
        if !battery_reachable(instance, c) {
            out.push(InstanceViolation {
                kind: InstanceViolationKind::BatteryUnreachable,
                node: c,
                magnitude: 2.0 * instance.dist(0, c) - instance.range(),
            });
        }
        let latest_return = node.tw_close + node.service_time + instance.travel_time(c, 0);
        if latest_return > instance.horizon + EPS {
            out.push(InstanceViolation {
                kind: InstanceViolationKind::WindowOverHorizon,
                node: c,
                magnitude: latest_return - instance.horizon,
            });
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct InstanceDoc {
    format: String,
    #[serde(flatten)]
    instance: Instance,
}

#[derive(Serialize, Deserialize)]
struct SolutionDoc {
    format: String,
    #[serde(flatten)]
    solution: Solution,
}

pub fn instance_to_json(instance: &Instance) -> String {
    serde_json::to_string_pretty(&InstanceDoc {
        format: INSTANCE_FORMAT.to_string(),
        instance: instance.clone(),
    })
    .expect("instance serialization cannot fail")
}

pub fn write_instance(instance: &Instance, path: &Path) -> Result<(), ModelError> {
    fs::write(path, instance_to_json(instance)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_instance(path: &Path) -> Result<Instance, ModelError> {
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let doc: InstanceDoc = serde_json::from_str(&text).map_err(|e| ModelError::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    if doc.format != INSTANCE_FORMAT {
        return Err(ModelError::Format {
            path: path.display().to_string(),
            detail: format!("unsupported format {:?}", doc.format),
        });
    }
    Ok(doc.instance)
}

pub fn solution_to_json(solution: &Solution) -> String {
    serde_json::to_string_pretty(&SolutionDoc {
        format: SOLUTION_FORMAT.to_string(),
        solution: solution.clone(),
    })
    .expect("solution serialization cannot fail")
}

pub fn write_solution(solution: &Solution, path: &Path) -> Result<(), ModelError> {
    fs::write(path, solution_to_json(solution)).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_solution(path: &Path) -> Result<Solution, ModelError> {
    let text = fs::read_to_string(path).map_err(|source| ModelError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let doc: SolutionDoc = serde_json::from_str(&text).map_err(|e| ModelError::Format {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    if doc.format != SOLUTION_FORMAT {
        return Err(ModelError::Format {
            path: path.display().to_string(),
            detail: format!("unsupported format {:?}", doc.format),
        });
    }
    Ok(doc.solution)
}

/// Routes compared first by cost, then lexicographically; used as the
/// global tie-breaking rule so every solver is deterministic.
pub fn routes_lex_less(a: &[Vec<usize>], b: &[Vec<usize>]) -> bool {
    a < b
}

#[cfg(test)]
pub mod test_util {
    use super::*;

    /// Hand-built instance for unit tests: depot at origin-style layouts.
    pub fn manual_instance(
        customers: &[(f64, f64, u32, f64, f64)],
        stations: &[(f64, f64)],
        capacity: u32,
        battery_capacity: f64,
        horizon: f64,
    ) -> Instance {
        manual_instance_at((0.5, 0.5), customers, stations, capacity, battery_capacity, horizon)
    }

    /// Customers are (x, y, demand, tw_open, tw_close); service time 0.05.
    pub fn manual_instance_at(
        depot: (f64, f64),
        customers: &[(f64, f64, u32, f64, f64)],
        stations: &[(f64, f64)],
        capacity: u32,
        battery_capacity: f64,
        horizon: f64,
    ) -> Instance {
        let mut nodes = vec![Node {
            id: 0,
            kind: NodeKind::Depot,
            x: depot.0,
            y: depot.1,
            demand: 0,
            service_time: 0.0,
            tw_open: 0.0,
            tw_close: horizon,
        }];
        for (i, &(x, y, q, e, l)) in customers.iter().enumerate() {
            nodes.push(Node {
                id: 1 + i,
                kind: NodeKind::Customer,
                x,
                y,
                demand: q,
                service_time: 0.05,
                tw_open: e,
                tw_close: l,
            });
        }
        for (j, &(x, y)) in stations.iter().enumerate() {
            nodes.push(Node {
                id: 1 + customers.len() + j,
                kind: NodeKind::Station,
                x,
                y,
                demand: 0,
                service_time: 0.0,
                tw_open: 0.0,
                tw_close: horizon,
            });
        }
        Instance {
            n_customers: customers.len(),
            n_stations: stations.len(),
            capacity,
            battery_capacity,
            consume_rate: 1.0,
            recharge_rate: 5.0,
            speed: 1.0,
            horizon,
            fleet_penalty: 100.0,
            class_label: "R".to_string(),
            seed: 0,
            nodes,
        }
    }
}
