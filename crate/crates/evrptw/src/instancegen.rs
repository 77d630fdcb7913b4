//! Seeded generator for the nine spatiotemporal instance classes.
//!
//! Every random draw comes from a per-entity ChaCha8 substream derived
//! from the top-level seed, so adding stations never perturbs customer
//! draws and identical configs reproduce identical instances on any
//! platform.

use crate::model::{
    validate_instance, Instance, InstanceViolation, Node, NodeKind,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Spatial {
    Clustered,
    Random,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tightness {
    Wide,
    Medium,
    Tight,
}

/// One of the nine class codes C, Cm, Ct, R, Rm, Rt, RC, RCm, RCt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub spatial: Spatial,
    pub tightness: Tightness,
}

pub const ALL_CLASSES: [&str; 9] = ["C", "Cm", "Ct", "R", "Rm", "Rt", "RC", "RCm", "RCt"];

#[derive(Debug, thiserror::Error)]
pub enum GenError {
    #[error("unknown instance class code {0:?}")]
    UnknownClass(String),
    #[error("invalid generation config: {0}")]
    BadConfig(String),
    #[error("retry budget exhausted; instance still fails {check} for node {node}")]
    RetryExhausted { check: String, node: usize },
}

impl ClassSpec {
    pub fn parse(code: &str) -> Result<ClassSpec, GenError> {
        let (prefix, suffix) = if let Some(p) = code.strip_suffix('m') {
            (p, Tightness::Medium)
        } else if let Some(p) = code.strip_suffix('t') {
            (p, Tightness::Tight)
        } else {
            (code, Tightness::Wide)
        };
        let spatial = match prefix {
            "C" => Spatial::Clustered,
            "R" => Spatial::Random,
            "RC" => Spatial::Mixed,
            _ => return Err(GenError::UnknownClass(code.to_string())),
        };
        Ok(ClassSpec { spatial, tightness: suffix })
    }

    pub fn code(&self) -> String {
        let prefix = match self.spatial {
            Spatial::Clustered => "C",
            Spatial::Random => "R",
            Spatial::Mixed => "RC",
        };
        let suffix = match self.tightness {
            Tightness::Wide => "",
            Tightness::Medium => "m",
            Tightness::Tight => "t",
        };
        format!("{prefix}{suffix}")
    }

    /// Window width as a fraction of the horizon.
    pub fn width_fraction(&self) -> f64 {
        match self.tightness {
            Tightness::Wide => 1.0,
            Tightness::Medium => 0.4,
            Tightness::Tight => 0.15,
        }
    }
}

/// Default parameters; all overridable per config.
pub const DEFAULT_SPEED: f64 = 1.0;
pub const DEFAULT_HORIZON: f64 = 4.0;
pub const DEFAULT_CAPACITY: u32 = 30;
pub const DEFAULT_BATTERY: f64 = 1.0;
pub const DEFAULT_CONSUME_RATE: f64 = 1.0;
pub const DEFAULT_RECHARGE_RATE: f64 = 5.0;
pub const DEFAULT_FLEET_PENALTY: f64 = 100.0;
pub const DEFAULT_SERVICE_TIME: f64 = 0.05;
const CLUSTER_SIGMA: f64 = 0.07;
const N_CLUSTERS: usize = 3;
const MAX_RETRIES: usize = 200;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenConfig {
    pub n_customers: usize,
    pub n_stations: usize,
    pub class_spec: ClassSpec,
    pub seed: u64,
    pub capacity: Option<u32>,
    pub battery_capacity: Option<f64>,
    pub horizon: Option<f64>,
    pub fleet_penalty: Option<f64>,
    pub demand_max: Option<u32>,
}

impl GenConfig {
    pub fn new(n_customers: usize, n_stations: usize, class_spec: ClassSpec, seed: u64) -> Self {
        GenConfig {
            n_customers,
            n_stations,
            class_spec,
            seed,
            capacity: None,
            battery_capacity: None,
            horizon: None,
            fleet_penalty: None,
            demand_max: None,
        }
    }
}

/// SplitMix64 step; used to derive independent substream seeds.
fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

fn substream(seed: u64, tags: &[u64]) -> ChaCha8Rng {
    let mut s = splitmix64(seed);
    for &t in tags {
        s = splitmix64(s ^ t);
    }
    ChaCha8Rng::seed_from_u64(s)
}

// Stream tags.
const TAG_CLUSTER: u64 = 1;
const TAG_CUSTOMER: u64 = 2;
const TAG_STATION: u64 = 3;

/// Box-Muller from two uniform draws; rand_distr is avoided so the draw
/// sequence stays pinned by this crate alone.
fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen::<f64>();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

struct CustomerDraw {
    x: f64,
    y: f64,
    demand: u32,
    tw_open: f64,
    tw_close: f64,
}

fn draw_customer(
    cfg: &GenConfig,
    clusters: &[(f64, f64)],
    idx: usize,
    attempt: usize,
    horizon: f64,
    speed: f64,
    depot: (f64, f64),
) -> CustomerDraw {
    let mut rng = substream(cfg.seed, &[TAG_CUSTOMER, idx as u64, attempt as u64]);
    let clustered = match cfg.class_spec.spatial {
        Spatial::Clustered => true,
        Spatial::Random => false,
        Spatial::Mixed => idx < cfg.n_customers / 2,
    };
    let (x, y) = if clustered {
        let c = clusters[rng.gen_range(0..clusters.len())];
        let x = (c.0 + CLUSTER_SIGMA * gauss(&mut rng)).clamp(0.0, 1.0);
        let y = (c.1 + CLUSTER_SIGMA * gauss(&mut rng)).clamp(0.0, 1.0);
        (x, y)
    } else {
        (rng.gen::<f64>(), rng.gen::<f64>())
    };
    let demand_max = cfg.demand_max.unwrap_or(9).max(1);
    let demand = rng.gen_range(1..=demand_max);

    let t0 = ((x - depot.0).powi(2) + (y - depot.1).powi(2)).sqrt() / speed;
    let latest = horizon - t0 - DEFAULT_SERVICE_TIME;
    let w = cfg.class_spec.width_fraction() * horizon;
    let (tw_open, tw_close) = if latest - t0 >= w {
        // Center chosen so the window fits unclipped at exact width.
        let u = rng.gen_range(t0 + w / 2.0..=latest - w / 2.0);
        (u - w / 2.0, u + w / 2.0)
    } else {
        (t0, latest.max(t0))
    };
    CustomerDraw { x, y, demand, tw_open, tw_close }
}

/// Deterministic seeded generation; the returned instance always passes
/// `validate_instance` (offending customers and stations are redrawn up
/// to a bounded retry count).
pub fn generate(cfg: &GenConfig) -> Result<Instance, GenError> {
    if cfg.n_customers < 1 || cfg.n_stations < 1 {
        return Err(GenError::BadConfig(
            "need at least one customer and one station".to_string(),
        ));
    }
    let horizon = cfg.horizon.unwrap_or(DEFAULT_HORIZON);
    let capacity = cfg.capacity.unwrap_or(DEFAULT_CAPACITY);
    let battery = cfg.battery_capacity.unwrap_or(DEFAULT_BATTERY);
    let fleet_penalty = cfg.fleet_penalty.unwrap_or(DEFAULT_FLEET_PENALTY);
    let speed = DEFAULT_SPEED;
    let depot = (0.5, 0.5);

    let mut crng = substream(cfg.seed, &[TAG_CLUSTER]);
    let clusters: Vec<(f64, f64)> = (0..N_CLUSTERS)
        .map(|_| (crng.gen::<f64>(), crng.gen::<f64>()))
        .collect();

    let mut stations: Vec<(f64, f64)> = (0..cfg.n_stations)
        .map(|j| {
            let mut rng = substream(cfg.seed, &[TAG_STATION, j as u64, 0]);
            (rng.gen::<f64>(), rng.gen::<f64>())
        })
        .collect();
    let mut customers: Vec<CustomerDraw> = (0..cfg.n_customers)
        .map(|i| draw_customer(cfg, &clusters, i, 0, horizon, speed, depot))
        .collect();
    let mut attempts = vec![0usize; cfg.n_customers + cfg.n_stations];

    for round in 0..MAX_RETRIES {
        let inst = assemble(
            cfg, &customers, &stations, capacity, battery, fleet_penalty, horizon, speed, depot,
        );
        let violations = validate_instance(&inst);
        if violations.is_empty() {
            return Ok(inst);
        }
        if round + 1 == MAX_RETRIES {
            let v = &violations[0];
            return Err(GenError::RetryExhausted {
                check: format!("{:?}", v.kind),
                node: v.node,
            });
        }
        redraw_offenders(
            cfg, &clusters, &violations, &mut customers, &mut stations, &mut attempts, horizon,
            speed, depot,
        );
    }
    unreachable!("retry loop always returns")
}

#[allow(clippy::too_many_arguments)]
fn redraw_offenders(
    cfg: &GenConfig,
    clusters: &[(f64, f64)],
    violations: &[InstanceViolation],
    customers: &mut [CustomerDraw],
    stations: &mut [(f64, f64)],
    attempts: &mut [usize],
    horizon: f64,
    speed: f64,
    depot: (f64, f64),
) {
    for v in violations {
        if v.node >= 1 && v.node <= cfg.n_customers {
            let i = v.node - 1;
            attempts[i] += 1;
            customers[i] = draw_customer(cfg, clusters, i, attempts[i], horizon, speed, depot);
        } else if v.node > cfg.n_customers {
            let j = v.node - 1 - cfg.n_customers;
            let slot = cfg.n_customers + j;
            attempts[slot] += 1;
            let mut rng = substream(cfg.seed, &[TAG_STATION, j as u64, attempts[slot] as u64]);
            stations[j] = (rng.gen::<f64>(), rng.gen::<f64>());
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    cfg: &GenConfig,
    customers: &[CustomerDraw],
    stations: &[(f64, f64)],
    capacity: u32,
    battery: f64,
    fleet_penalty: f64,
    horizon: f64,
    speed: f64,
    depot: (f64, f64),
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
    for (i, c) in customers.iter().enumerate() {
        nodes.push(Node {
            id: 1 + i,
            kind: NodeKind::Customer,
            x: c.x,
            y: c.y,
            demand: c.demand,
            service_time: DEFAULT_SERVICE_TIME,
            tw_open: c.tw_open,
            tw_close: c.tw_close,
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
        n_customers: cfg.n_customers,
        n_stations: cfg.n_stations,
        capacity,
        battery_capacity: battery,
        consume_rate: DEFAULT_CONSUME_RATE,
        recharge_rate: DEFAULT_RECHARGE_RATE,
        speed,
        horizon,
        fleet_penalty,
        class_label: cfg.class_spec.code(),
        seed: cfg.seed,
        nodes,
    }
}

/// The Table-1 size ladder: (N, M) cells C5S2 through C100S12.
pub const DEFAULT_SIZE_LADDER: [(usize, usize); 7] =
    [(5, 2), (10, 3), (20, 3), (30, 4), (40, 5), (50, 6), (100, 12)];

#[derive(Debug, Clone)]
pub struct SuiteCell {
    pub n_customers: usize,
    pub n_stations: usize,
    pub class_spec: ClassSpec,
    pub instances: Vec<Instance>,
}

impl SuiteCell {
    /// Row label in the paper's style, e.g. "C10S3".
    pub fn label(&self) -> String {
        format!(
            "{}{}S{}",
            self.class_spec.code(),
            self.n_customers,
            self.n_stations
        )
    }
}

/// Generates `instances_per_cell` instances for every (size, class) cell
/// with deterministically derived per-instance seeds.
pub fn benchmark_suite(
    sizes: &[(usize, usize)],
    classes: &[ClassSpec],
    instances_per_cell: usize,
    seed: u64,
) -> Result<Vec<SuiteCell>, GenError> {
    let mut cells = Vec::new();
    for &(n, m) in sizes {
        for class_spec in classes {
            let mut instances = Vec::with_capacity(instances_per_cell);
            for k in 0..instances_per_cell {
                let cell_seed = splitmix64(
                    splitmix64(seed ^ (n as u64) << 32 ^ (m as u64) << 16)
                        ^ class_tag(class_spec)
                        ^ k as u64,
                );
                let cfg = GenConfig::new(n, m, *class_spec, cell_seed);
                instances.push(generate(&cfg)?);
            }
            cells.push(SuiteCell {
                n_customers: n,
                n_stations: m,
                class_spec: *class_spec,
                instances,
            });
        }
    }
    Ok(cells)
}

fn class_tag(c: &ClassSpec) -> u64 {
    let s = match c.spatial {
        Spatial::Clustered => 0u64,
        Spatial::Random => 1,
        Spatial::Mixed => 2,
    };
    let t = match c.tightness {
        Tightness::Wide => 0u64,
        Tightness::Medium => 1,
        Tightness::Tight => 2,
    };
    0x100 + s * 3 + t
}

pub fn parse_classes(codes: &[&str]) -> Result<Vec<ClassSpec>, GenError> {
    codes.iter().map(|c| ClassSpec::parse(c)).collect()
}

pub fn all_classes() -> Vec<ClassSpec> {
    ALL_CLASSES
        .iter()
        .map(|c| ClassSpec::parse(c).unwrap())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{instance_to_json, EPS};

    #[test]
    fn class_codes_round_trip() {
        for code in ALL_CLASSES {
            assert_eq!(ClassSpec::parse(code).unwrap().code(), code);
        }
        assert!(ClassSpec::parse("X").is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenConfig::new(10, 3, ClassSpec::parse("RCm").unwrap(), 42);
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(instance_to_json(&a), instance_to_json(&b));
    }

    #[test]
    fn generated_instances_validate() {
        for code in ALL_CLASSES {
            for seed in 0..5 {
                let cfg = GenConfig::new(10, 3, ClassSpec::parse(code).unwrap(), seed);
                let inst = generate(&cfg).unwrap();
                assert!(validate_instance(&inst).is_empty(), "class {code} seed {seed}");
            }
        }
    }

    #[test]
    fn coordinates_in_unit_square() {
        let cfg = GenConfig::new(30, 4, ClassSpec::parse("C").unwrap(), 7);
        let inst = generate(&cfg).unwrap();
        for n in &inst.nodes {
            assert!((0.0..=1.0).contains(&n.x) && (0.0..=1.0).contains(&n.y));
        }
    }

    #[test]
    fn tight_windows_have_decision_width() {
        let cfg = GenConfig::new(20, 3, ClassSpec::parse("Ct").unwrap(), 3);
        let inst = generate(&cfg).unwrap();
        for c in inst.customer_ids() {
            let n = &inst.nodes[c];
            let width = n.tw_close - n.tw_open;
            assert!(
                (width - 0.15 * inst.horizon).abs() < 1e-9,
                "customer {c} width {width}"
            );
        }
    }

    #[test]
    fn windows_are_reachable() {
        for code in ["R", "Rm", "Rt"] {
            let cfg = GenConfig::new(15, 3, ClassSpec::parse(code).unwrap(), 11);
            let inst = generate(&cfg).unwrap();
            for c in inst.customer_ids() {
                let n = &inst.nodes[c];
                assert!(n.tw_open >= inst.travel_time(0, c) - EPS);
                assert!(
                    n.tw_close + n.service_time + inst.travel_time(c, 0) <= inst.horizon + EPS
                );
            }
        }
    }

    #[test]
    fn stations_do_not_perturb_customers() {
        let a = generate(&GenConfig::new(8, 2, ClassSpec::parse("R").unwrap(), 5)).unwrap();
        let b = generate(&GenConfig::new(8, 4, ClassSpec::parse("R").unwrap(), 5)).unwrap();
        for c in 1..=8 {
            // Identical unless a retry was forced by reachability.
            assert_eq!(a.nodes[c].x, b.nodes[c].x);
            assert_eq!(a.nodes[c].y, b.nodes[c].y);
        }
    }

    #[test]
    fn suite_ladder_shape() {
        let classes = vec![ClassSpec::parse("C").unwrap()];
        let suite = benchmark_suite(&DEFAULT_SIZE_LADDER[..2], &classes, 3, 1).unwrap();
        assert_eq!(suite.len(), 2);
        assert_eq!(suite[0].label(), "C5S2");
        assert_eq!(suite[1].label(), "C10S3");
        assert_eq!(suite[0].instances.len(), 3);
    }

    #[test]
    fn empty_suite() {
        let classes = vec![ClassSpec::parse("R").unwrap()];
        let suite = benchmark_suite(&DEFAULT_SIZE_LADDER[..1], &classes, 0, 1).unwrap();
        assert!(suite[0].instances.is_empty());
    }

    #[test]
    fn suite_seeds_distinct_and_valid() {
        let classes = vec![ClassSpec::parse("R").unwrap()];
        let suite = benchmark_suite(&[(20, 3)], &classes, 50, 9).unwrap();
        let mut seeds: Vec<u64> = suite[0].instances.iter().map(|i| i.seed).collect();
        seeds.sort_unstable();
        seeds.dedup();
        assert_eq!(seeds.len(), 50);
        for inst in &suite[0].instances {
            assert!(validate_instance(inst).is_empty());
        }
    }
}
