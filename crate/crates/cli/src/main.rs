use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use merge_stack::reachability::{feasible_set_report, feedback_invariant_set, SetBounds, TerminalSet};
use merge_stack::scenario::{load_scenario_file, CavKinematics, LonWeights, ScenarioConfig};
use merge_stack::sequencer::{solve_fifo, solve_milp, SequencingProblem, SequencingResult};
use merge_stack::sim::{
    compute_metrics, ensemble_means, load_accel_profile, run_ensemble, run_scenario, write_outputs, AccelProfile,
    SequencerChoice,
};
use merge_stack::stability::{classify_string_stability, explicit_gains};
use serde_json::json;

/// Exit status when a run finished but some controller fell back to a
/// degraded mode.
const EXIT_DEGRADED: u8 = 2;

#[derive(Parser)]
#[command(name = "merge-stack", version, about = "Cooperative on-ramp merging simulator and analysis tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Sequencer {
    Milp,
    Fifo,
}

impl From<Sequencer> for SequencerChoice {
    fn from(s: Sequencer) -> Self {
        match s {
            Sequencer::Milp => SequencerChoice::Milp,
            Sequencer::Fifo => SequencerChoice::Fifo,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Variant {
    Zero,
    Invariant,
    Proposed,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario and write its logs.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long, value_enum, default_value = "milp")]
        sequencer: Sequencer,
        /// Simulated seconds (defaults to the scenario's duration).
        #[arg(long)]
        duration: Option<f64>,
        /// Seed of the initial-state perturbation (defaults to the scenario's).
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run seeds 1..=n under both sequencers and compare them.
    Ensemble {
        #[arg(long)]
        seeds: u64,
        #[arg(long, default_value = "scenarios/scenario1.toml")]
        scenario: PathBuf,
        #[arg(long)]
        duration: Option<f64>,
        /// Write one log directory per sequencer and seed here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve the merging sequence for a scenario's initial state.
    Sequence {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Also report this sequencer's result for comparison.
        #[arg(long, value_enum)]
        baseline: Option<Sequencer>,
        /// Write the per-pair diagnostics to this JSON file.
        #[arg(long)]
        dump_diagnostics: Option<PathBuf>,
    },
    /// Explicit unconstrained MPC gains and their string-stability verdict.
    Gains {
        /// Take weights, horizon and time step from a scenario.
        #[arg(long)]
        scenario: Option<PathBuf>,
        /// Diagonal of the state weight over (Δd, Δv, a).
        #[arg(long, num_args = 3, value_delimiter = ',')]
        q: Option<Vec<f64>>,
        #[arg(long)]
        r: Option<f64>,
        #[arg(long)]
        beta: Option<f64>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        time_step: Option<f64>,
    },
    /// Initial feasible sets of terminal-constraint designs.
    FeasibleSet {
        #[arg(long, value_enum, required = true, num_args = 1.., value_delimiter = ',')]
        variant: Vec<Variant>,
        #[arg(long, default_value_t = 10)]
        np: usize,
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 0.1)]
        time_step: f64,
        /// Write `feasible_set.json` and the point cloud `cloud.csv` here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load(path: &Path) -> anyhow::Result<(ScenarioConfig, Option<AccelProfile>)> {
    let config = load_scenario_file(path)?;
    let profile = match config.profile_path(path.parent()) {
        Some(p) => {
            let prof = load_accel_profile(&p, config.simulation.time_step, config.limits.a_min, config.limits.a_max)
                .with_context(|| format!("loading leader profile {}", p.display()))?;
            Some(prof)
        }
        None => None,
    };
    Ok((config, profile))
}

fn print_json(value: &serde_json::Value) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    match writeln!(std::io::stdout().lock(), "{text}") {
        // A reader such as `head` closing the pipe early is not a failure.
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn exit_for(degraded: usize) -> ExitCode {
    if degraded > 0 {
        ExitCode::from(EXIT_DEGRADED)
    } else {
        ExitCode::SUCCESS
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Run {
            scenario,
            sequencer,
            duration,
            seed,
            out,
        } => {
            let (config, profile) = load(&scenario)?;
            let duration = duration.unwrap_or(config.simulation.duration);
            let seed = seed.unwrap_or(config.simulation.seed);
            let log = run_scenario(&config, sequencer.into(), duration, seed, profile.as_ref())?;
            let metrics = compute_metrics(&log, &config.weights.lon);
            write_outputs(&log, &metrics, &out)?;
            print_json(&json!({
                "scenario": log.metadata.scenario,
                "seed": seed,
                "steps": log.metadata.steps,
                "sequence": log.sequence_events.first().map(|e| &e.order),
                "resequencing_events": log.sequence_events.len(),
                "collisions": metrics.collisions,
                "degraded_events": log.degraded_events,
                "out": out,
            }))?;
            Ok(exit_for(log.degraded_events))
        }
        Command::Ensemble {
            seeds,
            scenario,
            duration,
            out,
        } => {
            if seeds == 0 {
                bail!("--seeds must be at least 1");
            }
            let (config, profile) = load(&scenario)?;
            let duration = duration.unwrap_or(config.simulation.duration);
            let list: Vec<u64> = (1..=seeds).collect();
            let mut summary = serde_json::Map::new();
            let mut degraded = 0;
            for choice in [SequencerChoice::Milp, SequencerChoice::Fifo] {
                let members = run_ensemble(&config, choice, duration, &list, profile.as_ref())?;
                let (time, cost) = ensemble_means(&members);
                degraded += members.iter().map(|m| m.log.degraded_events).sum::<usize>();
                if let Some(dir) = &out {
                    for m in &members {
                        let name = format!("{}-seed{}", json!(choice).as_str().unwrap_or("run"), m.seed);
                        write_outputs(&m.log, &m.metrics, dir.join(name))?;
                    }
                }
                let key = json!(choice).as_str().unwrap_or("run").to_string();
                summary.insert(
                    key,
                    json!({
                        "mean_convergence_time": time,
                        "mean_accumulated_cost": cost,
                        "collisions": members.iter().map(|m| m.metrics.collisions).sum::<usize>(),
                        "degraded_events": members.iter().map(|m| m.log.degraded_events).sum::<usize>(),
                        "runs": members.iter().map(|m| json!({"seed": m.seed, "metrics": m.metrics})).collect::<Vec<_>>(),
                    }),
                );
            }
            print_json(&serde_json::Value::Object(summary))?;
            Ok(exit_for(degraded))
        }
        Command::Sequence {
            scenario,
            seed,
            baseline,
            dump_diagnostics,
        } => {
            let (config, _) = load(&scenario)?;
            let (mainline, ramp) = config.realize(seed.unwrap_or(config.simulation.seed));
            let kin = |l: &[merge_stack::scenario::VehicleSpec]| l.iter().map(|s| s.kinematics).collect::<Vec<CavKinematics>>();
            let problem = SequencingProblem::new(
                &kin(&mainline),
                &kin(&ramp),
                config.desired_spacing.clone(),
                config.weights.seq.clone(),
                (config.geometry.mainline_control_length, config.geometry.ramp_control_length),
            )?;
            let result = solve_milp(&problem)?;
            let mut value = sequence_json(&result);
            if let Some(b) = baseline {
                let other = match b {
                    Sequencer::Milp => solve_milp(&problem)?,
                    Sequencer::Fifo => solve_fifo(&problem)?,
                };
                value["baseline"] = sequence_json(&other);
                value["baseline"]["solver"] = json!(SequencerChoice::from(b));
            }
            if let Some(path) = dump_diagnostics {
                let f = BufWriter::new(File::create(&path).with_context(|| format!("creating {}", path.display()))?);
                serde_json::to_writer_pretty(f, &result.breakdown)?;
            }
            print_json(&value)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Gains {
            scenario,
            q,
            r,
            beta,
            horizon,
            time_step,
        } => {
            let (mut weights, mut n, mut t) = (LonWeights::default(), 12, 0.1);
            if let Some(path) = scenario {
                let (config, _) = load(&path)?;
                weights = config.weights.lon.clone();
                n = config.simulation.horizon;
                t = config.simulation.time_step;
            }
            if let Some(q) = q {
                weights.q = [q[0], q[1], q[2]];
            }
            weights.r = r.unwrap_or(weights.r);
            weights.beta = beta.unwrap_or(weights.beta);
            let n = horizon.unwrap_or(n);
            let t = time_step.unwrap_or(t);
            let g = explicit_gains(&weights, n, t)?;
            let v = classify_string_stability(&g);
            print_json(&json!({
                "K_b": g.k_b(),
                "K_f": g.feedforward,
                "k_f": g.k_f,
                "p": v.p,
                "q": v.q,
                "stable": v.stable,
                "worst_omega": v.worst_omega,
                "worst_magnitude": v.worst_magnitude,
            }))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::FeasibleSet {
            variant,
            np,
            samples,
            seed,
            time_step,
            out,
        } => {
            let bounds = SetBounds::default();
            let mut variants = Vec::new();
            for v in &variant {
                variants.push(match v {
                    Variant::Zero => TerminalSet::ZeroTerminal,
                    Variant::Proposed => TerminalSet::ProposedConstantSpeedLeader,
                    Variant::Invariant => {
                        let g = explicit_gains(&LonWeights::default(), np, time_step)?;
                        TerminalSet::InvariantSet(feedback_invariant_set(&bounds, g.k_b(), time_step, 1000)?)
                    }
                });
            }
            let report = feasible_set_report(&bounds, np, time_step, &variants, samples, seed)?;
            let value = json!({
                "bounds": bounds,
                "np": np,
                "time_step": time_step,
                "variants": report,
            });
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("feasible_set.json"))?), &value)?;
                let mut w = BufWriter::new(File::create(dir.join("cloud.csv"))?);
                writeln!(w, "variant,delta_d,delta_v,accel")?;
                for e in &report {
                    for p in &e.cloud {
                        writeln!(w, "{},{},{},{}", e.variant, p[0], p[1], p[2])?;
                    }
                }
                w.flush()?;
            }
            print_json(&value)?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn sequence_json(r: &SequencingResult) -> serde_json::Value {
    // One-based CAV ids: mainline nearest-first, then ramp nearest-first.
    let permutation: Vec<usize> = r.assignment.order().iter().map(|i| i + 1).collect();
    json!({
        "permutation": permutation,
        "objective": r.objective,
        "pair_cost": r.breakdown.pair_cost,
        "priority_cost": r.breakdown.priority_cost,
        "pairs": r.breakdown.pairs,
        "nodes": r.nodes,
    })
}
