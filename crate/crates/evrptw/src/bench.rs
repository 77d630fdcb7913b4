//! Benchmark harness: runs solvers over generated suites, aggregates
//! per-cell metrics (mean distance, fleet, objective, optimality gap,
//! success rate, runtime), renders tables, and plots routes as SVG.
//!
//! The gap baseline follows a fixed precedence per cell: the exact
//! solver where it certified every instance, else the heuristic, else
//! the best mean objective found by any completed method.

use crate::baselines::{self, VNSConfig};
use crate::instancegen::SuiteCell;
use crate::model::{check_solution, ConstraintSet, Instance, ModelError, NodeKind, Solution};
use crate::policy::{self, DecodeMode, PolicyError, PolicyParams};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;
use std::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Exact,
    Vns,
    Greedy,
    /// Checkpoint trained without the curriculum (standard PPO).
    Ppo,
    /// Checkpoint trained with the curriculum.
    Cbdrl,
}

impl Method {
    pub fn parse(s: &str) -> Option<Method> {
        match s.trim().to_ascii_lowercase().as_str() {
            "exact" => Some(Method::Exact),
            "vns" => Some(Method::Vns),
            "greedy" => Some(Method::Greedy),
            "ppo" => Some(Method::Ppo),
            "cbdrl" => Some(Method::Cbdrl),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Method::Exact => "exact",
            Method::Vns => "vns",
            Method::Greedy => "greedy",
            Method::Ppo => "ppo",
            Method::Cbdrl => "cbdrl",
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("gap baseline must be positive, got {0}")]
    NonPositiveBaseline(f64),
    #[error("method {} needs a checkpoint", .0.name())]
    MissingCheckpoint(Method),
    #[error("unknown method {0:?}")]
    UnknownMethod(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error("io at {path}: {detail}")]
    Io { path: String, detail: String },
}

/// Relative cost excess over a baseline, in percent (unrounded; callers
/// round to one decimal for display).
pub fn gap_percent(j_rl: f64, j_base: f64) -> Result<f64, BenchError> {
    if j_base <= 0.0 {
        return Err(BenchError::NonPositiveBaseline(j_base));
    }
    Ok((j_rl - j_base) / j_base * 100.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodStats {
    pub method: Method,
    /// Means over feasible instances; None when none were feasible.
    pub mean_distance: Option<f64>,
    pub mean_fleet: Option<f64>,
    pub mean_j: Option<f64>,
    pub gap: Option<f64>,
    /// Percent of instances solved feasibly.
    pub success_rate: f64,
    pub mean_runtime_s: f64,
    /// Some instance exceeded the per-instance time limit; rendered "-".
    pub incomplete: bool,
    /// Exact only: every instance carried an optimality certificate.
    pub certified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub label: String,
    pub n_instances: usize,
    pub methods: Vec<MethodStats>,
}

#[derive(Debug, Clone)]
pub struct BenchSetup {
    pub time_limit_s: f64,
    pub seed: u64,
    pub constraints: ConstraintSet,
    pub vns: VNSConfig,
    pub checkpoint_ppo: Option<PolicyParams>,
    pub checkpoint_cbdrl: Option<PolicyParams>,
}

impl Default for BenchSetup {
    fn default() -> BenchSetup {
        BenchSetup {
            time_limit_s: 600.0,
            seed: 0,
            constraints: ConstraintSet::PHASE_C,
            vns: VNSConfig::default(),
            checkpoint_ppo: None,
            checkpoint_cbdrl: None,
        }
    }
}

struct InstanceOutcome {
    feasible: bool,
    distance: f64,
    fleet: usize,
    cost: f64,
    runtime_s: f64,
    certified: bool,
}

fn solve_one(
    method: Method,
    instance: &Instance,
    setup: &BenchSetup,
) -> Result<InstanceOutcome, BenchError> {
    let started = Instant::now();
    let (solution, certified): (Solution, bool) = match method {
        Method::Exact => {
            let res = baselines::exact_solve(instance, setup.constraints, setup.time_limit_s);
            (res.solution, res.certificate)
        }
        Method::Vns => {
            let cfg = VNSConfig {
                time_limit_s: setup.time_limit_s.min(setup.vns.time_limit_s),
                seed: setup.seed ^ instance.seed,
                ..setup.vns.clone()
            };
            (baselines::vns_solve(instance, setup.constraints, &cfg), false)
        }
        Method::Greedy => (
            baselines::greedy_construct(instance, setup.constraints),
            false,
        ),
        Method::Ppo | Method::Cbdrl => {
            let params = match method {
                Method::Ppo => setup.checkpoint_ppo.as_ref(),
                _ => setup.checkpoint_cbdrl.as_ref(),
            }
            .ok_or(BenchError::MissingCheckpoint(method))?;
            let r = policy::rollout(
                instance,
                params,
                setup.constraints,
                DecodeMode::Greedy,
                instance.n_customers,
                setup.seed,
            )?;
            (r.best, false)
        }
    };
    let runtime_s = started.elapsed().as_secs_f64();

    // Never trust self-reported costs: re-validate before aggregation.
    let outcome = if solution.feasible {
        let checked = check_solution(instance, &solution.routes, setup.constraints)?;
        InstanceOutcome {
            feasible: checked.feasible,
            distance: checked.total_distance,
            fleet: checked.fleet_size,
            cost: checked.cost,
            runtime_s,
            certified,
        }
    } else {
        InstanceOutcome {
            feasible: false,
            distance: 0.0,
            fleet: 0,
            cost: f64::INFINITY,
            runtime_s,
            certified,
        }
    };
    Ok(outcome)
}

fn aggregate(method: Method, outcomes: &[InstanceOutcome], time_limit_s: f64) -> MethodStats {
    let feasible: Vec<&InstanceOutcome> = outcomes.iter().filter(|o| o.feasible).collect();
    let mean = |f: &dyn Fn(&InstanceOutcome) -> f64| -> Option<f64> {
        if feasible.is_empty() {
            None
        } else {
            Some(feasible.iter().map(|o| f(o)).sum::<f64>() / feasible.len() as f64)
        }
    };
    MethodStats {
        method,
        mean_distance: mean(&|o| o.distance),
        mean_fleet: mean(&|o| o.fleet as f64),
        mean_j: mean(&|o| o.cost),
        gap: None,
        success_rate: feasible.len() as f64 / outcomes.len().max(1) as f64 * 100.0,
        mean_runtime_s: outcomes.iter().map(|o| o.runtime_s).sum::<f64>()
            / outcomes.len().max(1) as f64,
        incomplete: outcomes.iter().any(|o| o.runtime_s > time_limit_s),
        certified: !outcomes.is_empty() && outcomes.iter().all(|o| o.certified),
    }
}

/// Gap baseline precedence for one cell: exact where fully certified,
/// else the heuristic, else the best mean J across completed methods.
fn cell_baseline(stats: &[MethodStats]) -> Option<f64> {
    if let Some(e) = stats
        .iter()
        .find(|s| s.method == Method::Exact && s.certified && !s.incomplete)
    {
        if e.mean_j.is_some() {
            return e.mean_j;
        }
    }
    if let Some(v) = stats
        .iter()
        .find(|s| s.method == Method::Vns && !s.incomplete)
    {
        if v.mean_j.is_some() {
            return v.mean_j;
        }
    }
    stats
        .iter()
        .filter(|s| !s.incomplete)
        .filter_map(|s| s.mean_j)
        .min_by(|a, b| a.partial_cmp(b).unwrap())
}

pub fn run_benchmark(
    suite: &[SuiteCell],
    methods: &[Method],
    setup: &BenchSetup,
) -> Result<Vec<CellResult>, BenchError> {
    let mut results = Vec::with_capacity(suite.len());
    for cell in suite {
        let mut stats = Vec::with_capacity(methods.len());
        for &method in methods {
            let outcomes = cell
                .instances
                .par_iter()
                .map(|inst| solve_one(method, inst, setup))
                .collect::<Result<Vec<_>, _>>()?;
            stats.push(aggregate(method, &outcomes, setup.time_limit_s));
        }
        let baseline = cell_baseline(&stats);
        if let Some(base) = baseline {
            for s in stats.iter_mut() {
                if let Some(j) = s.mean_j {
                    if !s.incomplete {
                        s.gap = Some(gap_percent(j, base)?);
                    }
                }
            }
        }
        results.push(CellResult {
            label: cell.label(),
            n_instances: cell.instances.len(),
            methods: stats,
        });
    }
    Ok(results)
}

/// Zero-shot evaluation of one checkpoint across a suite (greedy
/// multistart decoding, one start per customer).
pub fn eval_checkpoint(
    params: &PolicyParams,
    suite: &[SuiteCell],
    setup: &BenchSetup,
) -> Result<Vec<CellResult>, BenchError> {
    let eval_setup = BenchSetup { checkpoint_cbdrl: Some(params.clone()), ..setup.clone() };
    run_benchmark(suite, &[Method::Cbdrl], &eval_setup)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TableFormat {
    Text,
    Markdown,
    Csv,
}

fn fmt_opt(v: Option<f64>, decimals: usize, incomplete: bool) -> String {
    if incomplete {
        return "-".to_string();
    }
    match v {
        Some(x) => format!("{x:.decimals$}"),
        None => "-".to_string(),
    }
}

/// Renders a Table-1-shaped block (D, K, J, Δ%) and a Table-2-shaped
/// block (success rate, mean time). Markdown bolds the best J and best
/// success rate per cell. Csv emits one machine-readable table that
/// `parse_csv` reads back exactly.
pub fn emit_tables(results: &[CellResult], format: TableFormat) -> String {
    match format {
        TableFormat::Csv => emit_csv(results),
        TableFormat::Text => emit_pretty(results, false),
        TableFormat::Markdown => emit_pretty(results, true),
    }
}

fn emit_csv(results: &[CellResult]) -> String {
    let mut out = String::from(
        "cell,n_instances,method,mean_distance,mean_fleet,mean_j,gap_percent,success_rate,mean_runtime_s,incomplete,certified\n",
    );
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for r in results {
        for s in &r.methods {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{}\n",
                r.label,
                r.n_instances,
                s.method.name(),
                cell(s.mean_distance),
                cell(s.mean_fleet),
                cell(s.mean_j),
                cell(s.gap),
                s.success_rate,
                s.mean_runtime_s,
                s.incomplete,
                s.certified
            ));
        }
    }
    out
}

/// Parses `emit_csv` output back into cell results (gap and means read
/// with full precision).
pub fn parse_csv(text: &str) -> Result<Vec<CellResult>, BenchError> {
    let bad = |detail: &str| BenchError::Io {
        path: "<csv>".to_string(),
        detail: detail.to_string(),
    };
    let mut results: Vec<CellResult> = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 11 {
            return Err(bad(&format!("line {i}: expected 11 fields, got {}", f.len())));
        }
        let opt = |s: &str| -> Result<Option<f64>, BenchError> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse::<f64>().map(Some).map_err(|e| bad(&e.to_string()))
            }
        };
        let stats = MethodStats {
            method: Method::parse(f[2]).ok_or_else(|| bad("bad method"))?,
            mean_distance: opt(f[3])?,
            mean_fleet: opt(f[4])?,
            mean_j: opt(f[5])?,
            gap: opt(f[6])?,
            success_rate: f[7].parse().map_err(|_| bad("bad success rate"))?,
            mean_runtime_s: f[8].parse().map_err(|_| bad("bad runtime"))?,
            incomplete: f[9].parse().map_err(|_| bad("bad incomplete"))?,
            certified: f[10].parse().map_err(|_| bad("bad certified"))?,
        };
        let n_instances: usize = f[1].parse().map_err(|_| bad("bad count"))?;
        match results.last_mut() {
            Some(last) if last.label == f[0] => last.methods.push(stats),
            _ => results.push(CellResult {
                label: f[0].to_string(),
                n_instances,
                methods: vec![stats],
            }),
        }
    }
    Ok(results)
}

fn emit_pretty(results: &[CellResult], markdown: bool) -> String {
    let mut out = String::new();
    let sep = if markdown { " | " } else { "  " };
    let bold = |s: String, is_best: bool| {
        if markdown && is_best {
            format!("**{s}**")
        } else {
            s
        }
    };

    // Cost table (Table-1 shape).
    out.push_str(if markdown {
        "### Cost breakdown\n\n| Cell | Method | D | K | J | Δ% |\n|---|---|---|---|---|---|\n"
    } else {
        "Cost breakdown\nCell  Method  D  K  J  Dpct\n"
    });
    for r in results {
        let best_j = r
            .methods
            .iter()
            .filter(|s| !s.incomplete)
            .filter_map(|s| s.mean_j)
            .min_by(|a, b| a.partial_cmp(b).unwrap());
        for s in &r.methods {
            let is_best = !s.incomplete && s.mean_j.is_some() && s.mean_j == best_j;
            let row = [
                r.label.clone(),
                s.method.name().to_string(),
                fmt_opt(s.mean_distance, 2, s.incomplete),
                fmt_opt(s.mean_fleet, 2, s.incomplete),
                bold(fmt_opt(s.mean_j, 2, s.incomplete), is_best),
                fmt_opt(s.gap, 1, s.incomplete),
            ];
            if markdown {
                out.push_str(&format!("| {} |\n", row.join(" | ")));
            } else {
                out.push_str(&row.join(sep));
                out.push('\n');
            }
        }
    }

    // Success/time table (Table-2 shape).
    out.push_str(if markdown {
        "\n### Success and runtime\n\n| Cell | Method | Succ. % | Time s |\n|---|---|---|---|\n"
    } else {
        "\nSuccess and runtime\nCell  Method  SuccPct  TimeS\n"
    });
    for r in results {
        let best_succ = r
            .methods
            .iter()
            .filter(|s| !s.incomplete)
            .map(|s| s.success_rate)
            .max_by(|a, b| a.partial_cmp(b).unwrap());
        for s in &r.methods {
            let is_best = !s.incomplete && Some(s.success_rate) == best_succ;
            let succ = if s.incomplete {
                "-".to_string()
            } else {
                format!("{:.1}", s.success_rate)
            };
            let time = if s.incomplete {
                "-".to_string()
            } else {
                format!("{:.3}", s.mean_runtime_s)
            };
            let row = [
                r.label.clone(),
                s.method.name().to_string(),
                bold(succ, is_best),
                time,
            ];
            if markdown {
                out.push_str(&format!("| {} |\n", row.join(" | ")));
            } else {
                out.push_str(&row.join(sep));
                out.push('\n');
            }
        }
    }
    out
}

const ROUTE_COLORS: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

/// Plots an instance and its routes: depot square, customer circles,
/// station triangles, one color per route, legend with J/K/D.
pub fn emit_route_svg(
    instance: &Instance,
    solution: &Solution,
    path: &Path,
) -> Result<(), BenchError> {
    let text = route_svg_string(instance, solution);
    fs::write(path, text).map_err(|e| BenchError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

pub fn route_svg_string(instance: &Instance, solution: &Solution) -> String {
    let size = 640.0;
    let margin = 40.0;
    let px = |v: f64| margin + v * (size - 2.0 * margin);
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n"
    ));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");

    for (r, route) in solution.routes.iter().enumerate() {
        if route.len() < 2 {
            continue;
        }
        let color = ROUTE_COLORS[r % ROUTE_COLORS.len()];
        let points: Vec<String> = route
            .iter()
            .map(|&id| {
                let n = &instance.nodes[id];
                format!("{:.2},{:.2}", px(n.x), px(n.y))
            })
            .collect();
        s.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            points.join(" ")
        ));
    }

    for node in &instance.nodes {
        let (x, y) = (px(node.x), px(node.y));
        match node.kind {
            NodeKind::Depot => s.push_str(&format!(
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"12\" height=\"12\" fill=\"black\"/>\n",
                x - 6.0,
                y - 6.0
            )),
            NodeKind::Customer => s.push_str(&format!(
                "<circle cx=\"{x:.2}\" cy=\"{y:.2}\" r=\"5\" fill=\"#1668a0\"/>\n"
            )),
            NodeKind::Station => s.push_str(&format!(
                "<polygon points=\"{:.2},{:.2} {:.2},{:.2} {:.2},{:.2}\" fill=\"#2a9d2a\"/>\n",
                x,
                y - 7.0,
                x - 6.0,
                y + 5.0,
                x + 6.0,
                y + 5.0
            )),
        }
    }

    let legend = if solution.routes.is_empty() {
        "no routes".to_string()
    } else {
        format!(
            "J={:.2} K={} D={:.2}",
            solution.cost, solution.fleet_size, solution.total_distance
        )
    };
    s.push_str(&format!(
        "<text x=\"{margin}\" y=\"{:.1}\" font-family=\"monospace\" font-size=\"14\">{legend}</text>\n",
        size - margin / 2.0
    ));
    s.push_str("</svg>\n");
    s
}

/// Run-directory manifest: configuration, seed, and a git-describable
/// version string (falls back to the crate version).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: String,
    pub seed: u64,
    pub config: serde_json::Value,
}

pub fn version_string() -> String {
    let base = format!("evrptw {}", env!("CARGO_PKG_VERSION"));
    match std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
    {
        Ok(out) if out.status.success() => {
            let desc = String::from_utf8_lossy(&out.stdout).trim().to_string();
            format!("{base} ({desc})")
        }
        _ => base,
    }
}

pub fn write_manifest(
    dir: &Path,
    seed: u64,
    config: serde_json::Value,
) -> Result<(), BenchError> {
    let manifest = Manifest { version: version_string(), seed, config };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text).map_err(|e| BenchError::Io {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}
