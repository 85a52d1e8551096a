//! Closed-loop simulation of the full stack.
//!
//! Every control step the coordinator (re)assigns the merging sequence when
//! a vehicle has entered the control area, the virtual platoon solves its
//! longitudinal problems in sequence order, each vehicle solves its lateral
//! problem, and the plant advances by one Euler step. Vehicles upstream of
//! the control area cruise and are not sequenced.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lateral::{
    bicycle_step, build_reference, solve_lat_mpc, tracking_errors, LatControl, LatSettings, LateralRecord, Pose,
};
use crate::longitudinal::{
    leader_controls, safety_coefficient, serial_platoon_step, stage_cost, BroadcastRecord, LeaderInput, LonSettings,
    LonState, PlatoonMember,
};
use crate::scenario::{emit_scenario, CavId, CavKinematics, DesiredSpacing, LeaderSetting, LonWeights, RoadSide, ScenarioConfig};
use crate::sequencer::{solve_fifo, solve_milp, solve_milp_with_prefix, SequencingProblem, SequencingResult};
use crate::stability::l2_ratio;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SequencerChoice {
    Milp,
    Fifo,
}

impl std::str::FromStr for SequencerChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "milp" => Ok(Self::Milp),
            "fifo" => Ok(Self::Fifo),
            other => Err(Error::InvalidArgument(format!("unknown sequencer `{other}` (expected milp or fifo)"))),
        }
    }
}

/// One row of the tidy trajectory table: a vehicle at a step, with the
/// control it applied during that step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub cav_id: usize,
    pub road: RoadSide,
    /// One-based sequence position; empty while upstream of the control area.
    pub seq_position: Option<usize>,
    pub predecessor: Option<usize>,
    pub z_position: f64,
    pub velocity: f64,
    pub acceleration: f64,
    pub delta_d: Option<f64>,
    pub delta_v: Option<f64>,
    pub gamma: f64,
    /// Coefficient of the safety term, zero when inactive.
    pub safety: f64,
    pub degraded: bool,
    pub x: Option<f64>,
    pub y: Option<f64>,
    pub theta: Option<f64>,
    pub lateral_dev: Option<f64>,
    pub heading_dev: Option<f64>,
    pub delta: Option<f64>,
    pub lateral_degraded: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceEvent {
    pub step: usize,
    /// CAV ids in sequence order.
    pub order: Vec<usize>,
    pub objective: f64,
    /// Leading slots kept from the previous assignment.
    pub frozen: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub scenario: String,
    pub sequencer: SequencerChoice,
    pub seed: u64,
    /// SHA-256 of the normalized scenario document.
    pub config_hash: String,
    pub version: String,
    pub time_step: f64,
    pub steps: usize,
    /// Desired spacing per one-based sequence position (index 0 unused).
    pub desired_spacing: Vec<f64>,
    pub profile_warnings: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationLog {
    pub metadata: RunMetadata,
    pub records: Vec<StepRecord>,
    pub broadcasts: Vec<BroadcastRecord>,
    pub lateral: Vec<LateralRecord>,
    pub sequence_events: Vec<SequenceEvent>,
    /// Longitudinal plus lateral degraded-mode solves.
    pub degraded_events: usize,
}

impl SimulationLog {
    pub fn cav_ids(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = self.records.iter().map(|r| r.cav_id).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Records of one vehicle in step order.
    pub fn vehicle(&self, cav_id: usize) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter(move |r| r.cav_id == cav_id)
    }
}

/// Acceleration trace resampled to the control step.
#[derive(Debug, Clone, PartialEq)]
pub struct AccelProfile {
    pub accel: Vec<f64>,
    /// Samples clipped to the acceleration limits.
    pub clipped: usize,
}

/// Reads a `time_s,accel_mps2` CSV, linearly interpolates it onto
/// `0, t, 2t, …` up to the last time stamp and clips to `[a_min, a_max]`.
pub fn load_accel_profile(path: impl AsRef<Path>, t: f64, a_min: f64, a_max: f64) -> Result<AccelProfile> {
    let path = path.as_ref();
    let mut reader = csv::Reader::from_path(path)?;
    let mut samples: Vec<(f64, f64)> = Vec::new();
    for row in reader.deserialize::<ProfileRow>() {
        let row = row?;
        if let Some(&(prev, _)) = samples.last() {
            if !(row.time_s > prev) {
                return Err(Error::Profile(format!(
                    "{}: time column must be strictly increasing ({} after {prev})",
                    path.display(),
                    row.time_s
                )));
            }
        }
        samples.push((row.time_s, row.accel_mps2));
    }
    if samples.is_empty() {
        return Err(Error::Profile(format!("{}: no samples", path.display())));
    }
    if !(t > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {t}")));
    }
    let end = samples.last().expect("non-empty").0;
    let n = (end / t + 1e-9).floor() as usize + 1;
    let mut clipped = 0;
    let mut j = 0;
    let accel = (0..n)
        .map(|k| {
            let tk = k as f64 * t;
            while j + 1 < samples.len() && samples[j + 1].0 < tk {
                j += 1;
            }
            let a = if tk <= samples[0].0 {
                samples[0].1
            } else if j + 1 >= samples.len() {
                samples[j].1
            } else {
                let ((t0, a0), (t1, a1)) = (samples[j], samples[j + 1]);
                a0 + (a1 - a0) * (tk - t0) / (t1 - t0)
            };
            let c = a.clamp(a_min, a_max);
            if c != a {
                clipped += 1;
            }
            c
        })
        .collect();
    if clipped > 0 {
        log::warn!("{}: {clipped} samples clipped to [{a_min}, {a_max}]", path.display());
    }
    Ok(AccelProfile { accel, clipped })
}

#[derive(Debug, Serialize, Deserialize)]
struct ProfileRow {
    time_s: f64,
    accel_mps2: f64,
}

/// Writes `(time_s, accel_mps2)` rows; values round-trip exactly.
pub fn save_accel_profile(path: impl AsRef<Path>, samples: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for &(time_s, accel_mps2) in samples {
        w.serialize(ProfileRow { time_s, accel_mps2 })?;
    }
    w.flush()?;
    Ok(())
}

/// Sinusoidal burst of amplitude 1.5 m/s² over 10 s (two 5 s periods)
/// sampled every 0.1 s. Net speed change is zero.
pub fn synthetic_disturbance() -> Vec<(f64, f64)> {
    (0..=100)
        .map(|k| {
            let t = k as f64 / 10.0;
            (t, 1.5 * (2.0 * std::f64::consts::PI * t / 5.0).sin())
        })
        .collect()
}

struct Vehicle {
    id: CavId,
    side: RoadSide,
    kin: CavKinematics,
    pose: Option<Pose>,
    delta: f64,
    entered: bool,
}

fn control_length(config: &ScenarioConfig, side: RoadSide) -> f64 {
    match side {
        RoadSide::Mainline => config.geometry.mainline_control_length,
        RoadSide::Ramp => config.geometry.ramp_control_length,
    }
}

fn config_hash(config: &ScenarioConfig) -> String {
    let digest = Sha256::digest(emit_scenario(config).as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Runs one closed-loop simulation from the configuration's initial state
/// perturbed with `seed`. `profile` supplies the leader's acceleration trace
/// when the scenario asks for one.
pub fn run_scenario(
    config: &ScenarioConfig,
    sequencer: SequencerChoice,
    duration: f64,
    seed: u64,
    profile: Option<&AccelProfile>,
) -> Result<SimulationLog> {
    let sim = &config.simulation;
    let t = sim.time_step;
    let steps = if config.vehicle_count() == 0 {
        0
    } else {
        (duration / t + 1e-9).floor() as usize
    };
    let mut log = SimulationLog {
        metadata: RunMetadata {
            scenario: config.name.clone(),
            sequencer,
            seed,
            config_hash: config_hash(config),
            version: env!("CARGO_PKG_VERSION").to_string(),
            time_step: t,
            steps,
            desired_spacing: Vec::new(),
            profile_warnings: profile.map_or(0, |p| p.clipped),
        },
        records: Vec::new(),
        broadcasts: Vec::new(),
        lateral: Vec::new(),
        sequence_events: Vec::new(),
        degraded_events: 0,
    };
    if steps == 0 {
        return Ok(log);
    }
    if matches!(sim.leader, LeaderSetting::Profile(_)) && profile.is_none() {
        return Err(Error::Profile("scenario requests a leader profile but none was loaded".into()));
    }

    let (mainline, ramp) = config.realize(seed);
    let mut vehicles: Vec<Vehicle> = Vec::with_capacity(config.vehicle_count());
    for (side, list) in [(RoadSide::Mainline, &mainline), (RoadSide::Ramp, &ramp)] {
        for spec in list.iter() {
            let pose = sim.lateral.then(|| {
                let foot = config.geometry.pose_at(side, spec.kinematics.z_position);
                let (s, c) = foot.heading.sin_cos();
                Pose::new(
                    foot.x - spec.lateral_offset * s,
                    foot.y + spec.lateral_offset * c,
                    foot.heading + spec.heading_offset,
                )
            });
            vehicles.push(Vehicle {
                id: CavId(vehicles.len() + 1),
                side,
                kin: spec.kinematics,
                pose,
                delta: 0.0,
                entered: false,
            });
        }
    }

    let lon = LonSettings::new(sim.horizon, t, config.weights.lon.clone(), config.limits.clone());
    let lat = LatSettings {
        time_step: t,
        weights: config.weights.lat.clone(),
        limits: config.limits.clone(),
        wheelbase: config.vehicle.wheelbase,
    };
    let mut spacing = config.desired_spacing.clone();
    let mut order: Vec<usize> = Vec::new();

    for step in 0..steps {
        // Entry events trigger a new assignment.
        let mut entered_now = false;
        for v in vehicles.iter_mut() {
            if !v.entered && v.kin.z_position >= -control_length(config, v.side) {
                v.entered = true;
                entered_now = true;
            }
        }
        if entered_now {
            let (new_order, event) = assign(&vehicles, &order, &spacing, config, sequencer, step)?;
            if step == 0 && sim.equilibrium_start {
                let mut per = Vec::with_capacity(new_order.len().saturating_sub(1));
                for w in new_order.windows(2) {
                    per.push(vehicles[w[0]].kin.z_position - vehicles[w[1]].kin.z_position);
                }
                spacing = DesiredSpacing {
                    default: config.desired_spacing.default,
                    per_follower: per,
                };
            }
            order = new_order;
            log.sequence_events.push(event);
        }

        let mut gamma = vec![0.0; vehicles.len()];
        let mut speeds: Vec<Vec<f64>> = vec![Vec::new(); vehicles.len()];
        let mut rel: Vec<Option<(LonState, f64, bool)>> = vec![None; vehicles.len()];
        let mut position = vec![None; vehicles.len()];
        let mut predecessor = vec![None; vehicles.len()];

        if !order.is_empty() {
            let members: Vec<PlatoonMember> = order
                .iter()
                .enumerate()
                .map(|(j, &i)| PlatoonMember {
                    id: vehicles[i].id,
                    side: vehicles[i].side,
                    kinematics: vehicles[i].kin,
                    d_star: if j == 0 { 0.0 } else { spacing.for_position(j + 1) },
                })
                .collect();
            let trace;
            let leader = match profile {
                Some(p) if matches!(sim.leader, LeaderSetting::Profile(_)) => {
                    trace = &p.accel[step.min(p.accel.len())..];
                    LeaderInput::Trace(trace)
                }
                _ => LeaderInput::ConstantSpeed,
            };
            let out = serial_platoon_step(&members, leader, &lon, step)?;
            for (j, &i) in order.iter().enumerate() {
                gamma[i] = out.gammas[j];
                speeds[i] = out.broadcasts[j].vel_seq.clone();
                position[i] = Some(j + 1);
                if j > 0 {
                    let pred = order[j - 1];
                    predecessor[i] = Some(vehicles[pred].id.0);
                    let x = LonState::relative(&vehicles[pred].kin, &vehicles[i].kin, members[j].d_star);
                    let plan = out.plans[j].as_ref().expect("followers carry plans");
                    let safety = if plan.safety_active {
                        safety_coefficient(x, &config.weights.lon)
                    } else {
                        0.0
                    };
                    rel[i] = Some((x, safety, plan.degraded.is_some()));
                    if plan.degraded.is_some() {
                        log.degraded_events += 1;
                    }
                }
            }
            log.broadcasts.extend(out.broadcasts);
        }
        // Vehicles upstream of the control area hold their speed.
        for (i, v) in vehicles.iter().enumerate() {
            if !v.entered {
                let g = leader_controls(&v.kin, LeaderInput::ConstantSpeed, &lon);
                gamma[i] = g[0];
                let mut vel = Vec::with_capacity(g.len());
                let (mut vk, mut ak) = (v.kin.velocity, v.kin.acceleration);
                for gk in &g {
                    vel.push(vk);
                    vk += t * ak;
                    ak += t * gk;
                }
                speeds[i] = vel;
            }
        }

        // Lateral solves, then records, then the plant update.
        for (i, v) in vehicles.iter_mut().enumerate() {
            let mut lateral_degraded = false;
            let mut lat_fields = None;
            if let Some(pose) = v.pose {
                let reference = build_reference(&config.geometry, v.side, &pose, &speeds[i], t, lat.wheelbase)?;
                let plan = solve_lat_mpc(&pose, &reference, v.delta, &lat)?;
                if plan.degraded {
                    lateral_degraded = true;
                    log.degraded_events += 1;
                }
                v.delta = plan.first_steering();
                let (dev, hd) = tracking_errors(&config.geometry, v.side, &pose);
                lat_fields = Some((pose, dev, hd));
                log.lateral.push(LateralRecord {
                    cav_id: v.id.0,
                    step,
                    x: pose.x,
                    y: pose.y,
                    theta: pose.theta,
                    lateral_dev: dev,
                    heading_dev: hd,
                    delta: v.delta,
                });
            }
            let r = rel[i];
            log.records.push(StepRecord {
                step,
                time: step as f64 * t,
                cav_id: v.id.0,
                road: v.side,
                seq_position: position[i],
                predecessor: predecessor[i],
                z_position: v.kin.z_position,
                velocity: v.kin.velocity,
                acceleration: v.kin.acceleration,
                delta_d: r.map(|r| r.0.delta_d),
                delta_v: r.map(|r| r.0.delta_v),
                gamma: gamma[i],
                safety: r.map_or(0.0, |r| r.1),
                degraded: r.is_some_and(|r| r.2),
                x: lat_fields.map(|f| f.0.x),
                y: lat_fields.map(|f| f.0.y),
                theta: lat_fields.map(|f| f.0.theta),
                lateral_dev: lat_fields.map(|f| f.1),
                heading_dev: lat_fields.map(|f| f.2),
                delta: lat_fields.map(|_| v.delta),
                lateral_degraded,
            });

            let k = v.kin;
            if let Some(pose) = v.pose {
                let mu = LatControl {
                    v: k.velocity,
                    delta: v.delta,
                };
                v.pose = Some(bicycle_step(&pose, &mu, lat.wheelbase, t)?);
            }
            v.kin = CavKinematics::new(
                k.z_position + t * k.velocity,
                k.velocity + t * k.acceleration,
                k.acceleration + t * gamma[i],
            );
            let finite = [v.kin.z_position, v.kin.velocity, v.kin.acceleration].iter().all(|x| x.is_finite())
                && v.pose.is_none_or(|p| p.x.is_finite() && p.y.is_finite() && p.theta.is_finite());
            if !finite {
                return Err(Error::NonFinite { cav: v.id.0, step });
            }
        }
    }
    log.metadata.desired_spacing = (0..=vehicles.len())
        .map(|p| if p < 2 { 0.0 } else { spacing.for_position(p) })
        .collect();
    Ok(log)
}

/// Sequences the vehicles inside the control area. Vehicles at the front of
/// the previous order that have passed the merge point keep their slots.
fn assign(
    vehicles: &[Vehicle],
    previous: &[usize],
    spacing: &DesiredSpacing,
    config: &ScenarioConfig,
    choice: SequencerChoice,
    step: usize,
) -> Result<(Vec<usize>, SequenceEvent)> {
    let mut lists: [Vec<usize>; 2] = [Vec::new(), Vec::new()];
    for (i, v) in vehicles.iter().enumerate() {
        if v.entered {
            lists[(v.side == RoadSide::Ramp) as usize].push(i);
        }
    }
    for l in lists.iter_mut() {
        l.sort_by(|&a, &b| vehicles[b].kin.z_position.total_cmp(&vehicles[a].kin.z_position));
    }
    let index: Vec<usize> = lists[0].iter().chain(&lists[1]).copied().collect();
    let kin = |l: &[usize]| l.iter().map(|&i| vehicles[i].kin).collect::<Vec<_>>();
    let problem = SequencingProblem::new(
        &kin(&lists[0]),
        &kin(&lists[1]),
        spacing.clone(),
        config.weights.seq.clone(),
        (config.geometry.mainline_control_length, config.geometry.ramp_control_length),
    )?;
    let prefix: Vec<usize> = previous
        .iter()
        .take_while(|&&i| vehicles[i].kin.z_position >= 0.0)
        .filter_map(|&i| index.iter().position(|&k| k == i))
        .collect();
    let result: SequencingResult = match choice {
        SequencerChoice::Fifo => solve_fifo(&problem)?,
        SequencerChoice::Milp if prefix.is_empty() => solve_milp(&problem)?,
        SequencerChoice::Milp => match solve_milp_with_prefix(&problem, &prefix) {
            Ok(r) => r,
            Err(e) => {
                log::warn!("step {step}: frozen prefix rejected ({e}); resequencing all vehicles");
                solve_milp(&problem)?
            }
        },
    };
    let order: Vec<usize> = result.assignment.order().iter().map(|&k| index[k]).collect();
    let event = SequenceEvent {
        step,
        order: order.iter().map(|&i| vehicles[i].id.0).collect(),
        objective: result.objective,
        frozen: if choice == SequencerChoice::Milp { prefix.len() } else { 0 },
    };
    Ok((order, event))
}

/// Per-vehicle outcome of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleMetrics {
    pub cav_id: usize,
    /// First time after which `|Δd| ≤ Δd_safe` for the rest of the run;
    /// `None` if that never happens (or the vehicle never followed).
    pub convergence_time: Option<f64>,
    /// Stage cost summed over the steps before convergence (the whole run
    /// when it never converges).
    pub accumulated_cost: f64,
    /// Same as `convergence_time` for `max(|Δd|, |Δv|, |a|) < 0.05`.
    pub settling_time: Option<f64>,
    pub max_abs_delta_d: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRatio {
    pub predecessor: usize,
    pub follower: usize,
    /// `‖Δd_follower‖₂ / ‖Δd_predecessor‖₂`; `None` when the predecessor's
    /// deviation is identically zero.
    pub ratio: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeMetrics {
    pub vehicles: Vec<VehicleMetrics>,
    pub l2_ratios: Vec<PairRatio>,
    /// Steps at which some gap to a vehicle ahead on the same road (or to
    /// the sequence predecessor after merging) was not positive.
    pub collisions: usize,
    pub min_gap: f64,
    pub degraded_events: usize,
}

/// Tolerance of the settling-time metric.
pub const SETTLE_TOL: f64 = 0.05;

/// First index after which `ok` holds for every remaining sample.
fn first_stable(ok: &[bool]) -> Option<usize> {
    match ok.iter().rposition(|&b| !b) {
        None => Some(0),
        Some(i) if i + 1 < ok.len() => Some(i + 1),
        Some(_) => None,
    }
}

pub fn compute_metrics(log: &SimulationLog, weights: &LonWeights) -> MergeMetrics {
    let t = log.metadata.time_step;
    let mut vehicles = Vec::new();
    for id in log.cav_ids() {
        let rows: Vec<&StepRecord> = log.vehicle(id).filter(|r| r.delta_d.is_some()).collect();
        if rows.is_empty() {
            continue;
        }
        let state = |r: &StepRecord| LonState::new(r.delta_d.unwrap_or(0.0), r.delta_v.unwrap_or(0.0), r.acceleration);
        let conv = first_stable(&rows.iter().map(|r| state(r).delta_d.abs() <= weights.dd_safe).collect::<Vec<_>>());
        let settle = first_stable(&rows.iter().map(|r| state(r).inf_norm() < SETTLE_TOL).collect::<Vec<_>>());
        let upto = conv.unwrap_or(rows.len());
        let accumulated_cost = rows[..upto].iter().map(|r| stage_cost(state(r), r.gamma, weights, r.safety)).sum();
        vehicles.push(VehicleMetrics {
            cav_id: id,
            convergence_time: conv.map(|i| rows[i].time),
            accumulated_cost,
            settling_time: settle.map(|i| rows[i].time),
            max_abs_delta_d: rows.iter().map(|r| state(r).delta_d.abs()).fold(0.0, f64::max),
        });
    }

    // l2 ratios between consecutive followers, over the steps where they
    // are adjacent in the sequence.
    let mut pairs: Vec<(usize, usize)> = log
        .records
        .iter()
        .filter(|r| r.delta_d.is_some())
        .filter_map(|r| r.predecessor.map(|p| (p, r.cav_id)))
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    let mut by_step: std::collections::HashMap<(usize, usize), &StepRecord> = std::collections::HashMap::new();
    for r in &log.records {
        by_step.insert((r.step, r.cav_id), r);
    }
    let mut l2_ratios = Vec::new();
    for (pred, follower) in pairs {
        let mut fs = Vec::new();
        let mut ps = Vec::new();
        for r in log.vehicle(follower) {
            if r.predecessor != Some(pred) {
                continue;
            }
            let Some(p) = by_step.get(&(r.step, pred)).and_then(|p| p.delta_d) else {
                continue;
            };
            fs.push(r.delta_d.unwrap_or(0.0));
            ps.push(p);
        }
        if fs.len() < 2 {
            continue;
        }
        l2_ratios.push(PairRatio {
            predecessor: pred,
            follower,
            ratio: l2_ratio(&fs, &ps, t).ok(),
        });
    }

    let (collisions, min_gap) = collision_scan(log);
    MergeMetrics {
        vehicles,
        l2_ratios,
        collisions,
        min_gap,
        degraded_events: log.degraded_events,
    }
}

/// Counts steps with a non-positive gap. A gap counts between consecutive
/// vehicles on the same road, and between sequence neighbours once the
/// follower has passed the merge point.
fn collision_scan(log: &SimulationLog) -> (usize, f64) {
    let mut collisions = 0;
    let mut min_gap = f64::INFINITY;
    let mut start = 0;
    while start < log.records.len() {
        let step = log.records[start].step;
        let end = start + log.records[start..].iter().take_while(|r| r.step == step).count();
        let rows = &log.records[start..end];
        let mut gaps = Vec::new();
        for side in [RoadSide::Mainline, RoadSide::Ramp] {
            let mut z: Vec<f64> = rows.iter().filter(|r| r.road == side).map(|r| r.z_position).collect();
            z.sort_by(|a, b| b.total_cmp(a));
            gaps.extend(z.windows(2).map(|w| w[0] - w[1]));
        }
        for r in rows {
            if let Some(p) = r.predecessor {
                let Some(pred) = rows.iter().find(|q| q.cav_id == p) else {
                    continue;
                };
                if r.z_position >= 0.0 && pred.road != r.road {
                    gaps.push(pred.z_position - r.z_position);
                }
            }
        }
        if let Some(g) = gaps.iter().copied().reduce(f64::min) {
            min_gap = min_gap.min(g);
            if g <= 0.0 {
                collisions += 1;
            }
        }
        start = end;
    }
    (collisions, min_gap)
}

#[derive(Debug, Clone, Serialize)]
pub struct EnsembleMember {
    pub seed: u64,
    pub metrics: MergeMetrics,
    #[serde(skip)]
    pub log: SimulationLog,
}

/// Runs one simulation per seed in parallel; results are in seed order.
pub fn run_ensemble(
    config: &ScenarioConfig,
    sequencer: SequencerChoice,
    duration: f64,
    seeds: &[u64],
    profile: Option<&AccelProfile>,
) -> Result<Vec<EnsembleMember>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let log = run_scenario(config, sequencer, duration, seed, profile)?;
            let metrics = compute_metrics(&log, &config.weights.lon);
            Ok(EnsembleMember { seed, metrics, log })
        })
        .collect()
}

/// Mean convergence time (never-converged vehicles count as the run
/// duration) and mean accumulated cost over all followers of all members.
pub fn ensemble_means(members: &[EnsembleMember]) -> (f64, f64) {
    let mut times = Vec::new();
    let mut costs = Vec::new();
    for m in members {
        let horizon = m.log.metadata.steps as f64 * m.log.metadata.time_step;
        for v in &m.metrics.vehicles {
            times.push(v.convergence_time.unwrap_or(horizon));
            costs.push(v.accumulated_cost);
        }
    }
    let mean = |x: &[f64]| if x.is_empty() { 0.0 } else { x.iter().sum::<f64>() / x.len() as f64 };
    (mean(&times), mean(&costs))
}

/// Column order of `trajectory.csv`.
pub const TRAJECTORY_COLUMNS: [&str; 21] = [
    "step",
    "time",
    "cav_id",
    "road",
    "seq_position",
    "predecessor",
    "z_position",
    "velocity",
    "acceleration",
    "delta_d",
    "delta_v",
    "gamma",
    "safety",
    "degraded",
    "x",
    "y",
    "theta",
    "lateral_dev",
    "heading_dev",
    "delta",
    "lateral_degraded",
];

pub fn write_trajectory_csv(log: &SimulationLog, out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if log.records.is_empty() {
        w.write_record(TRAJECTORY_COLUMNS)?;
    }
    for r in &log.records {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn write_jsonl<T: Serialize>(items: &[T], out: impl Write) -> Result<()> {
    let mut w = BufWriter::new(out);
    for item in items {
        serde_json::to_writer(&mut w, item)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `trajectory.csv`, `broadcast.jsonl`, `lateral.jsonl`,
/// `sequence.jsonl`, `metrics.json` and `run.json` into `dir`.
pub fn write_outputs(log: &SimulationLog, metrics: &MergeMetrics, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir)?;
    write_trajectory_csv(log, BufWriter::new(File::create(dir.join("trajectory.csv"))?))?;
    write_jsonl(&log.broadcasts, File::create(dir.join("broadcast.jsonl"))?)?;
    write_jsonl(&log.lateral, File::create(dir.join("lateral.jsonl"))?)?;
    write_jsonl(&log.sequence_events, File::create(dir.join("sequence.jsonl"))?)?;
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("metrics.json"))?), metrics)?;
    serde_json::to_writer_pretty(BufWriter::new(File::create(dir.join("run.json"))?), &log.metadata)?;
    Ok(())
}
