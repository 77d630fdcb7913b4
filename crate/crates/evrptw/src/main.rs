//! Command-line entry points: instance generation, single-instance
//! solving, training, benchmarking, and route plotting.

use clap::{Parser, Subcommand};
use evrptw::baselines::{self, VNSConfig};
use evrptw::bench::{self, BenchSetup, Method, TableFormat};
use evrptw::instancegen::{self, ClassSpec, GenConfig, SuiteCell};
use evrptw::model::{self, ConstraintSet, Instance};
use evrptw::policy;
use evrptw::ppo::{self, TrainConfig};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "evrptw", version, about = "EVRPTW curriculum-RL workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate instances for one (N, M, class) cell.
    Gen {
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        m: usize,
        #[arg(long, default_value = "R")]
        class: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Output directory for instance JSON files.
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve one instance with a baseline method.
    Solve {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long, value_parser = ["exact", "vns", "greedy"])]
        method: String,
        #[arg(long, default_value = "C", value_parser = ["A", "B", "C"])]
        phase: String,
        #[arg(long, default_value_t = 600.0)]
        time_limit: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output solution JSON path.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Print per-route arrival and battery traces.
        #[arg(long)]
        trace: bool,
    },
    /// Train a policy (curriculum by default).
    Train {
        /// JSON training config; missing fields use documented defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Pin phase C from epoch 0 (the standard-PPO baseline).
        #[arg(long)]
        no_curriculum: bool,
        /// Resume from OUT/final.json.
        #[arg(long)]
        resume: bool,
    },
    /// Run the benchmark harness over a directory of instances.
    Bench {
        /// Directory of instance JSON files (grouped into cells by
        /// class and size).
        #[arg(long)]
        suite: PathBuf,
        #[arg(long, default_value = "exact,vns,greedy")]
        methods: String,
        /// Curriculum-trained checkpoint (method "cbdrl").
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Flat-trained checkpoint (method "ppo").
        #[arg(long)]
        checkpoint_ppo: Option<PathBuf>,
        #[arg(long, default_value_t = 600.0)]
        time_limit: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a solved instance as an SVG route plot.
    Plot {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        solution: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn phase_constraints(phase: &str) -> ConstraintSet {
    match phase {
        "A" => ConstraintSet::PHASE_A,
        "B" => ConstraintSet::PHASE_B,
        _ => ConstraintSet::PHASE_C,
    }
}

fn load_suite(dir: &Path) -> Result<Vec<SuiteCell>, String> {
    let mut groups: BTreeMap<(String, usize, usize), Vec<Instance>> = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| format!("{}: {e}", dir.display()))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    for path in paths {
        let inst = model::read_instance(&path).map_err(|e| e.to_string())?;
        groups
            .entry((inst.class_label.clone(), inst.n_customers, inst.n_stations))
            .or_default()
            .push(inst);
    }
    if groups.is_empty() {
        return Err(format!("no instance JSON files in {}", dir.display()));
    }
    groups
        .into_iter()
        .map(|((class, n, m), instances)| {
            Ok(SuiteCell {
                n_customers: n,
                n_stations: m,
                class_spec: ClassSpec::parse(&class).map_err(|e| e.to_string())?,
                instances,
            })
        })
        .collect()
}

fn run() -> Result<(), String> {
    match Cli::parse().command {
        Command::Gen { n, m, class, seed, count, out } => {
            let spec = ClassSpec::parse(&class).map_err(|e| e.to_string())?;
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            for k in 0..count {
                let cfg = GenConfig::new(n, m, spec, seed.wrapping_add(k as u64));
                let inst = instancegen::generate(&cfg).map_err(|e| e.to_string())?;
                let path = out.join(format!("{}{}S{}_{:04}.json", spec.code(), n, m, k));
                model::write_instance(&inst, &path).map_err(|e| e.to_string())?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Solve { instance, method, phase, time_limit, seed, out, trace } => {
            let inst = model::read_instance(&instance).map_err(|e| e.to_string())?;
            let constraints = phase_constraints(&phase);
            let solution = match method.as_str() {
                "exact" => {
                    let res = baselines::exact_solve(&inst, constraints, time_limit);
                    println!(
                        "certificate: {}",
                        if res.certificate { "optimal" } else { "time limit" }
                    );
                    res.solution
                }
                "vns" => {
                    let cfg = VNSConfig { time_limit_s: time_limit, seed, ..VNSConfig::default() };
                    baselines::vns_solve(&inst, constraints, &cfg)
                }
                _ => baselines::greedy_construct(&inst, constraints),
            };
            if solution.feasible {
                println!(
                    "J = {:.4}  K = {}  D = {:.4}",
                    solution.cost, solution.fleet_size, solution.total_distance
                );
            } else {
                println!("infeasible (no complete solution found)");
            }
            if trace {
                for (r, route) in solution.routes.iter().enumerate() {
                    println!("route {r}: {route:?}");
                    for (i, &id) in route.iter().enumerate() {
                        println!(
                            "  node {id}: arrival {:.4}  battery {:.4}",
                            solution.arrival_times[r][i], solution.battery_levels[r][i]
                        );
                    }
                }
            }
            if let Some(path) = out {
                model::write_solution(&solution, &path).map_err(|e| e.to_string())?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Train { config, seed, epochs, out, no_curriculum, resume } => {
            let mut cfg: TrainConfig = match config {
                Some(path) => {
                    let text =
                        std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
                    serde_json::from_str(&text).map_err(|e| e.to_string())?
                }
                None => TrainConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if no_curriculum {
                cfg.no_curriculum = true;
            }
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            let init = if resume {
                Some(policy::load_checkpoint(&out.join("final.json")).map_err(|e| e.to_string())?)
            } else {
                None
            };
            bench::write_manifest(
                &out,
                cfg.seed,
                serde_json::to_value(&cfg).map_err(|e| e.to_string())?,
            )
            .map_err(|e| e.to_string())?;
            let (_, journal) = ppo::train(&cfg, Some(&out), init).map_err(|e| e.to_string())?;
            if let Some(last) = journal.records.last() {
                println!(
                    "trained {} epochs; final phase {} feasibility {:.1}%",
                    journal.records.len(),
                    last.phase,
                    last.feasibility_rate * 100.0
                );
            }
            println!("artifacts in {}", out.display());
            Ok(())
        }
        Command::Bench {
            suite,
            methods,
            checkpoint,
            checkpoint_ppo,
            time_limit,
            seed,
            out,
        } => {
            let cells = load_suite(&suite)?;
            let methods: Vec<Method> = methods
                .split(',')
                .map(|s| Method::parse(s).ok_or_else(|| format!("unknown method {s:?}")))
                .collect::<Result<_, _>>()?;
            let setup = BenchSetup {
                time_limit_s: time_limit,
                seed,
                checkpoint_cbdrl: checkpoint
                    .as_deref()
                    .map(policy::load_checkpoint)
                    .transpose()
                    .map_err(|e| e.to_string())?,
                checkpoint_ppo: checkpoint_ppo
                    .as_deref()
                    .map(policy::load_checkpoint)
                    .transpose()
                    .map_err(|e| e.to_string())?,
                ..BenchSetup::default()
            };
            let results = bench::run_benchmark(&cells, &methods, &setup).map_err(|e| e.to_string())?;
            std::fs::create_dir_all(&out).map_err(|e| e.to_string())?;
            for (name, format) in [
                ("tables.txt", TableFormat::Text),
                ("tables.md", TableFormat::Markdown),
                ("results.csv", TableFormat::Csv),
            ] {
                let rendered = bench::emit_tables(&results, format);
                std::fs::write(out.join(name), rendered).map_err(|e| e.to_string())?;
            }
            bench::write_manifest(
                &out,
                seed,
                serde_json::json!({
                    "suite": suite.display().to_string(),
                    "methods": methods.iter().map(|m| m.name()).collect::<Vec<_>>(),
                    "time_limit_s": time_limit,
                }),
            )
            .map_err(|e| e.to_string())?;
            print!("{}", bench::emit_tables(&results, TableFormat::Text));
            println!("artifacts in {}", out.display());
            Ok(())
        }
        Command::Plot { instance, solution, out } => {
            let inst = model::read_instance(&instance).map_err(|e| e.to_string())?;
            let sol = model::read_solution(&solution).map_err(|e| e.to_string())?;
            bench::emit_route_svg(&inst, &sol, &out).map_err(|e| e.to_string())?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
