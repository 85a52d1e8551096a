//! Shared vehicle and scenario types, road geometry, the virtual Z-axis, and
//! scenario configuration documents.
//!
//! Every vehicle, mainline or ramp, is located by a single coordinate `z` on
//! the virtual Z-axis: the merge point is the origin, upstream positions are
//! negative (minus the arc length still to travel before the merge), and
//! downstream positions are the positive distance travelled along the
//! mainline past the merge point.
//!
//! Scenario documents are TOML. See the book chapter on configuration for the
//! full field reference; [`load_scenario`] and [`emit_scenario`] round-trip.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One-based identifier of a CAV. Mainline vehicles take `1..=m` nearest the
/// merge point first, ramp vehicles follow. Ids say nothing about the merged order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CavId(pub usize);

impl CavId {
    pub fn new(index: usize) -> Result<Self> {
        if index == 0 {
            return Err(Error::InvalidArgument("CAV ids are 1-based".into()));
        }
        Ok(CavId(index))
    }
}

impl std::fmt::Display for CavId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "CAV{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoadSide {
    Mainline,
    Ramp,
}

/// Position, velocity and acceleration of one vehicle on the virtual Z-axis.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CavKinematics {
    pub z_position: f64,
    pub velocity: f64,
    pub acceleration: f64,
}

impl CavKinematics {
    pub fn new(z_position: f64, velocity: f64, acceleration: f64) -> Self {
        Self {
            z_position,
            velocity,
            acceleration,
        }
    }
}

/// Where a vehicle sits along its road relative to the merge point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PathLocation {
    /// Arc length (m) still to travel before reaching the merge point.
    Upstream(f64),
    /// Distance (m) travelled along the mainline past the merge point.
    Downstream(f64),
}

/// Maps a location on either road onto the shared virtual Z-axis.
///
/// Both roads share the same convention, so the side only matters for
/// documentation at the call site; the mapping is the arc length, negated
/// upstream of the merge point.
pub fn map_to_virtual_axis(_side: RoadSide, location: PathLocation) -> f64 {
    match location {
        PathLocation::Upstream(arc) => -arc,
        PathLocation::Downstream(dist) => dist,
    }
}

/// Physical and actuator limits (defaults are the values of the simulation
/// parameter table).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Limits {
    pub dd_min: f64,
    pub dd_max: f64,
    pub v_min: f64,
    pub v_max: f64,
    pub a_min: f64,
    pub a_max: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub delta_min: f64,
    pub delta_max: f64,
    pub ddelta_min: f64,
    pub ddelta_max: f64,
}

impl Default for Limits {
    fn default() -> Self {
        Self {
            dd_min: -30.0,
            dd_max: 30.0,
            v_min: 0.0,
            v_max: 30.0,
            a_min: -5.0,
            a_max: 5.0,
            gamma_min: -5.0,
            gamma_max: 5.0,
            delta_min: -0.8,
            delta_max: 0.8,
            ddelta_min: -0.04,
            ddelta_max: 0.04,
        }
    }
}

/// Longitudinal MPC weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LonWeights {
    /// Diagonal of `Q_lon` over (Δd, Δv, a).
    pub q: [f64; 3],
    pub r: f64,
    /// Safety-cost weight `P_lon`.
    pub p_safety: f64,
    /// Terminal-stage magnification.
    pub beta: f64,
    /// Safety distance threshold `Δd_safe` (m).
    pub dd_safe: f64,
}

impl Default for LonWeights {
    fn default() -> Self {
        Self {
            q: [0.01, 0.02, 0.01],
            r: 0.01,
            p_safety: 0.1,
            beta: 1600.0,
            dd_safe: 5.0,
        }
    }
}

impl LonWeights {
    /// Uniformly rescales every cost term.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            q: self.q.map(|q| q * factor),
            r: self.r * factor,
            p_safety: self.p_safety * factor,
            ..self.clone()
        }
    }
}

/// Upper-level sequencing weights. Big-M constants are derived per instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequencerWeights {
    pub q_u: f64,
    pub r_u: f64,
}

impl Default for SequencerWeights {
    fn default() -> Self {
        Self { q_u: 1.0, r_u: 1.0 }
    }
}

/// Lateral MPC weights: `Q_lat` diagonal over (X, Y, θ) and `R_lat` diagonal
/// over (v, δ).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatWeights {
    pub q: [f64; 3],
    pub r: [f64; 2],
}

impl Default for LatWeights {
    fn default() -> Self {
        Self {
            q: [1.0, 1.0, 2.0],
            r: [0.0, 0.5],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Weights {
    pub lon: LonWeights,
    pub seq: SequencerWeights,
    pub lat: LatWeights,
}

/// First-order driveline model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DrivelineParams {
    pub eta: f64,
    pub mass: f64,
    pub tire_radius: f64,
    pub time_lag: f64,
    pub f_roll: f64,
    pub gravity: f64,
    pub air_density: f64,
    pub drag_coefficient: f64,
    pub frontal_area: f64,
}

impl Default for DrivelineParams {
    fn default() -> Self {
        Self {
            eta: 0.8,
            mass: 1500.0,
            tire_radius: 0.25,
            time_lag: 0.4,
            f_roll: 0.015,
            gravity: 9.8,
            air_density: 1.2,
            drag_coefficient: 0.25,
            frontal_area: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleParams {
    pub driveline: DrivelineParams,
    pub wheelbase: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            driveline: DrivelineParams::default(),
            wheelbase: 2.7,
        }
    }
}

/// A point on a road centerline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathPoint {
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub curvature: f64,
    /// The requested arc length fell outside the modelled road and was
    /// clamped to its terminus.
    pub clamped: bool,
}

/// Foot of a projection onto a centerline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub z: f64,
    /// Signed distance, positive to the left of the direction of travel.
    pub lateral_offset: f64,
    pub foot: PathPoint,
}

/// Mainline is the X-axis travelled in +X with the merge point at the
/// origin. The ramp is a straight segment joined (C0 in curvature) to a
/// right-turning circular arc that ends tangent to the mainline at the merge
/// point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoadGeometry {
    pub ramp_straight_length: f64,
    pub arc_radius: f64,
    /// Heading change across the arc (rad).
    pub arc_sweep: f64,
    pub mainline_upstream_length: f64,
    pub mainline_downstream_length: f64,
    /// Control-area lengths used to estimate traffic density per road.
    pub mainline_control_length: f64,
    pub ramp_control_length: f64,
}

impl Default for RoadGeometry {
    fn default() -> Self {
        Self {
            ramp_straight_length: 97.5,
            arc_radius: 47.75,
            arc_sweep: PI / 12.0,
            mainline_upstream_length: 600.0,
            mainline_downstream_length: 600.0,
            mainline_control_length: 400.0,
            ramp_control_length: 400.0,
        }
    }
}

impl RoadGeometry {
    pub fn arc_length(&self) -> f64 {
        self.arc_radius * self.arc_sweep
    }

    /// Total ramp length upstream of the merge point.
    pub fn ramp_length(&self) -> f64 {
        self.ramp_straight_length + self.arc_length()
    }

    fn arc_center(&self) -> (f64, f64) {
        (0.0, -self.arc_radius)
    }

    fn arc_point(&self, remaining_angle: f64) -> (f64, f64) {
        let (cx, cy) = self.arc_center();
        let r = self.arc_radius;
        (cx - r * remaining_angle.sin(), cy + r * remaining_angle.cos())
    }

    /// Centerline pose at virtual coordinate `z` on the given road.
    pub fn pose_at(&self, side: RoadSide, z: f64) -> PathPoint {
        if z >= 0.0 || side == RoadSide::Mainline {
            let lo = -self.mainline_upstream_length;
            let hi = self.mainline_downstream_length;
            let zc = z.clamp(lo, hi);
            return PathPoint {
                x: zc,
                y: 0.0,
                heading: 0.0,
                curvature: 0.0,
                clamped: zc != z,
            };
        }
        let upstream = -z;
        let arc_len = self.arc_length();
        if upstream <= arc_len {
            let s = upstream / self.arc_radius;
            let (x, y) = self.arc_point(s);
            return PathPoint {
                x,
                y,
                heading: s,
                curvature: -1.0 / self.arc_radius,
                clamped: false,
            };
        }
        let mut along = upstream - arc_len;
        let clamped = along > self.ramp_straight_length;
        if clamped {
            along = self.ramp_straight_length;
        }
        let phi = self.arc_sweep;
        let (ax, ay) = self.arc_point(phi);
        PathPoint {
            x: ax - along * phi.cos(),
            y: ay - along * phi.sin(),
            heading: phi,
            curvature: 0.0,
            clamped,
        }
    }

    /// Projects a planar point onto the centerline of `side` (ramp vehicles
    /// may also project onto the mainline downstream of the merge).
    pub fn project(&self, side: RoadSide, x: f64, y: f64) -> Projection {
        let mut candidates: Vec<(f64, f64)> = Vec::with_capacity(3);

        // Mainline: upstream part only for mainline vehicles.
        let lo = if side == RoadSide::Mainline {
            -self.mainline_upstream_length
        } else {
            0.0
        };
        let zm = x.clamp(lo, self.mainline_downstream_length);
        candidates.push((zm, (x - zm).hypot(y)));

        if side == RoadSide::Ramp {
            let (cx, cy) = self.arc_center();
            let (wx, wy) = (x - cx, y - cy);
            let s = (-wx).atan2(wy).clamp(0.0, self.arc_sweep);
            let (fx, fy) = self.arc_point(s);
            candidates.push((-self.arc_radius * s, (x - fx).hypot(y - fy)));

            let phi = self.arc_sweep;
            let (ax, ay) = self.arc_point(phi);
            let (dx, dy) = (phi.cos(), phi.sin());
            let t = ((x - ax) * dx + (y - ay) * dy).clamp(-self.ramp_straight_length, 0.0);
            let (fx, fy) = (ax + t * dx, ay + t * dy);
            candidates.push((-self.arc_length() + t, (x - fx).hypot(y - fy)));
        }

        let (z, _) = candidates
            .into_iter()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .expect("at least one candidate");
        let foot = self.pose_at(side, z);
        let lateral_offset = -(x - foot.x) * foot.heading.sin() + (y - foot.y) * foot.heading.cos();
        Projection {
            z,
            lateral_offset,
            foot,
        }
    }
}

/// Desired spacing `d*` per follower, indexed by virtual sequence position.
#[derive(Debug, Clone, PartialEq)]
pub struct DesiredSpacing {
    pub default: f64,
    /// Overrides for sequence positions 2, 3, ... (position 1 is the leader).
    pub per_follower: Vec<f64>,
}

impl Default for DesiredSpacing {
    fn default() -> Self {
        Self {
            default: 20.0,
            per_follower: Vec::new(),
        }
    }
}

impl DesiredSpacing {
    pub fn uniform(d: f64) -> Self {
        Self {
            default: d,
            per_follower: Vec::new(),
        }
    }

    /// Desired spacing of the follower at one-based sequence `position ≥ 2`.
    pub fn for_position(&self, position: usize) -> f64 {
        position
            .checked_sub(2)
            .and_then(|i| self.per_follower.get(i))
            .copied()
            .unwrap_or(self.default)
    }

    /// Vector `d*` of length `n`, index `j` (0-based) holding the spacing of
    /// the follower at position `j + 1`; entry 0 is unused and zero.
    pub fn as_vector(&self, n: usize) -> Vec<f64> {
        (0..n)
            .map(|j| if j == 0 { 0.0 } else { self.for_position(j + 1) })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LeaderSetting {
    ConstantSpeed,
    /// Acceleration trace, path relative to the scenario document.
    Profile(PathBuf),
}

/// Uniform half-widths of the initial-state randomization.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Perturbation {
    pub position: f64,
    pub velocity: f64,
    pub acceleration: f64,
}

impl Perturbation {
    pub fn is_zero(&self) -> bool {
        self.position == 0.0 && self.velocity == 0.0 && self.acceleration == 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSettings {
    pub time_step: f64,
    pub horizon: usize,
    pub seed: u64,
    pub duration: f64,
    pub leader: LeaderSetting,
    pub perturbation: Perturbation,
    pub lateral: bool,
    /// Replace `d*` by the realized initial gaps once the sequence is known,
    /// so every follower starts at equilibrium.
    pub equilibrium_start: bool,
}

impl Default for SimulationSettings {
    fn default() -> Self {
        Self {
            time_step: 0.1,
            horizon: 12,
            seed: 0,
            duration: 60.0,
            leader: LeaderSetting::ConstantSpeed,
            perturbation: Perturbation::default(),
            lateral: false,
            equilibrium_start: false,
        }
    }
}

/// Initial condition of one vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct VehicleSpec {
    pub kinematics: CavKinematics,
    pub lateral_offset: f64,
    pub heading_offset: f64,
}

/// A fully validated scenario.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScenarioConfig {
    pub name: String,
    pub simulation: SimulationSettings,
    pub desired_spacing: DesiredSpacing,
    pub limits: Limits,
    pub weights: Weights,
    pub vehicle: VehicleParams,
    pub geometry: RoadGeometry,
    /// Nearest-first.
    pub mainline: Vec<VehicleSpec>,
    /// Nearest-first.
    pub ramp: Vec<VehicleSpec>,
}

impl ScenarioConfig {
    pub fn vehicle_count(&self) -> usize {
        self.mainline.len() + self.ramp.len()
    }

    /// Initial vehicle states after the seeded uniform perturbation.
    ///
    /// The generator is ChaCha8 seeded with `seed`; for each mainline vehicle
    /// then each ramp vehicle it draws position, velocity and acceleration
    /// offsets uniformly from `[-w, w]`.
    pub fn realize(&self, seed: u64) -> (Vec<VehicleSpec>, Vec<VehicleSpec>) {
        let p = self.simulation.perturbation;
        if p.is_zero() {
            return (self.mainline.clone(), self.ramp.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |w: f64| if w > 0.0 { rng.random_range(-w..=w) } else { 0.0 };
        let mut jitter = |list: &[VehicleSpec]| {
            list.iter()
                .map(|spec| {
                    let mut s = *spec;
                    s.kinematics.z_position += draw(p.position);
                    s.kinematics.velocity += draw(p.velocity);
                    s.kinematics.acceleration += draw(p.acceleration);
                    s
                })
                .collect::<Vec<_>>()
        };
        let mainline = jitter(&self.mainline);
        let ramp = jitter(&self.ramp);
        (mainline, ramp)
    }

    /// Resolves the leader profile path against the directory of the
    /// scenario document.
    pub fn profile_path(&self, config_dir: Option<&Path>) -> Option<PathBuf> {
        match &self.simulation.leader {
            LeaderSetting::ConstantSpeed => None,
            LeaderSetting::Profile(p) if p.is_absolute() => Some(p.clone()),
            LeaderSetting::Profile(p) => Some(match config_dir {
                Some(dir) => dir.join(p),
                None => p.clone(),
            }),
        }
    }
}

/// Information vectors `P` and `V`: mainline vehicles nearest-first, then
/// ramp vehicles nearest-first.
pub fn build_info_vectors(
    mainline: &[CavKinematics],
    ramp: &[CavKinematics],
) -> Result<(Vec<f64>, Vec<f64>)> {
    if mainline.is_empty() && ramp.is_empty() {
        return Err(Error::EmptyScenario);
    }
    check_nearest_first(mainline, "vehicles.mainline")?;
    check_nearest_first(ramp, "vehicles.ramp")?;
    let all = mainline.iter().chain(ramp);
    let p = all.clone().map(|k| k.z_position).collect();
    let v = all.map(|k| k.velocity).collect();
    Ok((p, v))
}

fn check_nearest_first(list: &[CavKinematics], path: &str) -> Result<()> {
    for (i, w) in list.windows(2).enumerate() {
        if w[1].z_position >= w[0].z_position {
            return Err(Error::config(
                format!("{path}.z[{}]", i + 1),
                format!(
                    "vehicles must be listed nearest-first (strictly decreasing z), got {} after {}",
                    w[1].z_position, w[0].z_position
                ),
            ));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Document format
// ---------------------------------------------------------------------------

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    #[serde(default)]
    name: String,
    #[serde(default)]
    simulation: SimulationSection,
    #[serde(default)]
    limits: Limits,
    #[serde(default)]
    weights: WeightsSection,
    #[serde(default)]
    vehicle: VehicleSection,
    #[serde(default)]
    geometry: RoadGeometry,
    #[serde(default)]
    vehicles: VehiclesSection,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SimulationSection {
    time_step: f64,
    horizon: i64,
    seed: u64,
    duration: f64,
    desired_spacing: f64,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    desired_spacing_per_follower: Vec<f64>,
    equilibrium_start: bool,
    leader: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    leader_profile: Option<String>,
    perturb_position: f64,
    perturb_velocity: f64,
    perturb_acceleration: f64,
    lateral: bool,
}

impl Default for SimulationSection {
    fn default() -> Self {
        let s = SimulationSettings::default();
        Self {
            time_step: s.time_step,
            horizon: s.horizon as i64,
            seed: s.seed,
            duration: s.duration,
            desired_spacing: DesiredSpacing::default().default,
            desired_spacing_per_follower: Vec::new(),
            equilibrium_start: false,
            leader: "constant-speed".into(),
            leader_profile: None,
            perturb_position: 0.0,
            perturb_velocity: 0.0,
            perturb_acceleration: 0.0,
            lateral: false,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct WeightsSection {
    q_lon: [f64; 3],
    r_lon: f64,
    p_lon: f64,
    beta: f64,
    dd_safe: f64,
    q_u: f64,
    r_u: f64,
    q_lat: [f64; 3],
    r_lat: [f64; 2],
}

impl Default for WeightsSection {
    fn default() -> Self {
        Weights::default().into()
    }
}

impl From<Weights> for WeightsSection {
    fn from(w: Weights) -> Self {
        Self {
            q_lon: w.lon.q,
            r_lon: w.lon.r,
            p_lon: w.lon.p_safety,
            beta: w.lon.beta,
            dd_safe: w.lon.dd_safe,
            q_u: w.seq.q_u,
            r_u: w.seq.r_u,
            q_lat: w.lat.q,
            r_lat: w.lat.r,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct VehicleSection {
    eta: f64,
    mass: f64,
    tire_radius: f64,
    time_lag: f64,
    f_roll: f64,
    gravity: f64,
    air_density: f64,
    drag_coefficient: f64,
    frontal_area: f64,
    wheelbase: f64,
}

impl Default for VehicleSection {
    fn default() -> Self {
        VehicleParams::default().into()
    }
}

impl From<VehicleParams> for VehicleSection {
    fn from(p: VehicleParams) -> Self {
        let d = p.driveline;
        Self {
            eta: d.eta,
            mass: d.mass,
            tire_radius: d.tire_radius,
            time_lag: d.time_lag,
            f_roll: d.f_roll,
            gravity: d.gravity,
            air_density: d.air_density,
            drag_coefficient: d.drag_coefficient,
            frontal_area: d.frontal_area,
            wheelbase: p.wheelbase,
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct VehiclesSection {
    mainline: VehicleGroup,
    ramp: VehicleGroup,
}

/// Either explicit arrays or a regular layout (`count`, `first`, `spacing`,
/// `v0`, `v_step`).
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct VehicleGroup {
    #[serde(skip_serializing_if = "Option::is_none")]
    z: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    count: Option<i64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    first: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    spacing: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    v: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    v0: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    v_step: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    a: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    lateral_offset: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    heading_offset: Option<Vec<f64>>,
}

impl VehicleGroup {
    fn resolve(&self, path: &str) -> Result<Vec<VehicleSpec>> {
        let z = match (&self.z, self.count) {
            (Some(_), Some(_)) => {
                return Err(Error::config(
                    path,
                    "give either `z` or a `count`/`first`/`spacing` layout, not both",
                ))
            }
            (Some(z), None) => z.clone(),
            (None, Some(count)) => {
                if count < 0 {
                    return Err(Error::config(format!("{path}.count"), "must be non-negative"));
                }
                let first = self
                    .first
                    .ok_or_else(|| Error::config(format!("{path}.first"), "required with `count`"))?;
                let spacing = self.spacing.ok_or_else(|| {
                    Error::config(format!("{path}.spacing"), "required with `count`")
                })?;
                if spacing <= 0.0 {
                    return Err(Error::config(format!("{path}.spacing"), "must be positive"));
                }
                (0..count as usize).map(|i| first - spacing * i as f64).collect()
            }
            (None, None) => Vec::new(),
        };
        let n = z.len();
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::config(format!("{path}.z"), "positions must be finite"));
        }

        let v = match (&self.v, self.v0) {
            (Some(_), Some(_)) => {
                return Err(Error::config(path, "give either `v` or `v0`/`v_step`, not both"))
            }
            (Some(v), None) => v.clone(),
            (None, Some(v0)) => {
                let step = self.v_step.unwrap_or(0.0);
                (0..n).map(|i| v0 + step * i as f64).collect()
            }
            (None, None) if n == 0 => Vec::new(),
            (None, None) => return Err(Error::config(format!("{path}.v"), "missing velocities")),
        };
        let a = self.a.clone().unwrap_or_else(|| vec![0.0; n]);
        let lat = self.lateral_offset.clone().unwrap_or_else(|| vec![0.0; n]);
        let head = self.heading_offset.clone().unwrap_or_else(|| vec![0.0; n]);
        for (name, len) in [
            ("v", v.len()),
            ("a", a.len()),
            ("lateral_offset", lat.len()),
            ("heading_offset", head.len()),
        ] {
            if len != n {
                return Err(Error::config(
                    format!("{path}.{name}"),
                    format!("expected {n} entries, got {len}"),
                ));
            }
        }
        Ok((0..n)
            .map(|i| VehicleSpec {
                kinematics: CavKinematics::new(z[i], v[i], a[i]),
                lateral_offset: lat[i],
                heading_offset: head[i],
            })
            .collect())
    }

    fn from_specs(specs: &[VehicleSpec]) -> Self {
        let col = |f: fn(&VehicleSpec) -> f64| specs.iter().map(f).collect::<Vec<_>>();
        let nonzero = |v: Vec<f64>| if v.iter().all(|x| *x == 0.0) { None } else { Some(v) };
        Self {
            z: Some(col(|s| s.kinematics.z_position)),
            v: Some(col(|s| s.kinematics.velocity)),
            a: Some(col(|s| s.kinematics.acceleration)),
            lateral_offset: nonzero(col(|s| s.lateral_offset)),
            heading_offset: nonzero(col(|s| s.heading_offset)),
            ..Default::default()
        }
    }
}

/// Parses and validates a scenario document. Omitted fields take the
/// simulation-table defaults.
pub fn load_scenario(text: &str) -> Result<ScenarioConfig> {
    let file: ScenarioFile = toml::from_str(text).map_err(|e| {
        let span = e
            .span()
            .map(|s| locate(text, s.start))
            .unwrap_or_else(|| "document".to_string());
        Error::config(span, e.message().to_string())
    })?;
    file.validate()
}

/// Reads a scenario document from disk.
pub fn load_scenario_file(path: impl AsRef<Path>) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path)?;
    load_scenario(&text)
}

fn locate(text: &str, offset: usize) -> String {
    let line = text[..offset.min(text.len())].matches('\n').count() + 1;
    format!("line {line}")
}

/// Serializes a configuration back to a document that [`load_scenario`]
/// reads to an equal value.
pub fn emit_scenario(config: &ScenarioConfig) -> String {
    let s = &config.simulation;
    let (leader, leader_profile) = match &s.leader {
        LeaderSetting::ConstantSpeed => ("constant-speed".to_string(), None),
        LeaderSetting::Profile(p) => ("profile".to_string(), Some(p.to_string_lossy().into_owned())),
    };
    let file = ScenarioFile {
        name: config.name.clone(),
        simulation: SimulationSection {
            time_step: s.time_step,
            horizon: s.horizon as i64,
            seed: s.seed,
            duration: s.duration,
            desired_spacing: config.desired_spacing.default,
            desired_spacing_per_follower: config.desired_spacing.per_follower.clone(),
            equilibrium_start: s.equilibrium_start,
            leader,
            leader_profile,
            perturb_position: s.perturbation.position,
            perturb_velocity: s.perturbation.velocity,
            perturb_acceleration: s.perturbation.acceleration,
            lateral: s.lateral,
        },
        limits: config.limits.clone(),
        weights: config.weights.clone().into(),
        vehicle: config.vehicle.clone().into(),
        geometry: config.geometry.clone(),
        vehicles: VehiclesSection {
            mainline: VehicleGroup::from_specs(&config.mainline),
            ramp: VehicleGroup::from_specs(&config.ramp),
        },
    };
    toml::to_string(&file).expect("scenario documents always serialize")
}

impl ScenarioFile {
    fn validate(self) -> Result<ScenarioConfig> {
        let sim = &self.simulation;
        positive("simulation.time_step", sim.time_step)?;
        if sim.horizon < 3 {
            return Err(Error::config(
                "simulation.horizon",
                format!("prediction horizon must be at least 3, got {}", sim.horizon),
            ));
        }
        positive("simulation.duration", sim.duration)?;
        positive("simulation.desired_spacing", sim.desired_spacing)?;
        for (i, d) in sim.desired_spacing_per_follower.iter().enumerate() {
            positive(&format!("simulation.desired_spacing_per_follower[{i}]"), *d)?;
        }
        for (name, w) in [
            ("simulation.perturb_position", sim.perturb_position),
            ("simulation.perturb_velocity", sim.perturb_velocity),
            ("simulation.perturb_acceleration", sim.perturb_acceleration),
        ] {
            if !(w >= 0.0) {
                return Err(Error::config(name, "must be non-negative"));
            }
        }
        let leader = match (sim.leader.as_str(), &sim.leader_profile) {
            ("constant-speed", _) => LeaderSetting::ConstantSpeed,
            ("profile", Some(p)) => LeaderSetting::Profile(PathBuf::from(p)),
            ("profile", None) => {
                return Err(Error::config(
                    "simulation.leader_profile",
                    "required when leader = \"profile\"",
                ))
            }
            (other, _) => {
                return Err(Error::config(
                    "simulation.leader",
                    format!("expected \"constant-speed\" or \"profile\", got {other:?}"),
                ))
            }
        };

        let l = &self.limits;
        for (name, lo, hi) in [
            ("dd", l.dd_min, l.dd_max),
            ("v", l.v_min, l.v_max),
            ("a", l.a_min, l.a_max),
            ("gamma", l.gamma_min, l.gamma_max),
            ("delta", l.delta_min, l.delta_max),
            ("ddelta", l.ddelta_min, l.ddelta_max),
        ] {
            if !(lo < hi) {
                return Err(Error::config(
                    format!("limits.{name}_min"),
                    format!("must be strictly below {name}_max ({lo} >= {hi})"),
                ));
            }
        }
        if l.delta_max >= PI / 2.0 || l.delta_min <= -PI / 2.0 {
            return Err(Error::config("limits.delta_max", "steering limits must lie inside ±π/2"));
        }

        let w = &self.weights;
        for (i, q) in w.q_lon.iter().enumerate() {
            positive(&format!("weights.q_lon[{i}]"), *q)?;
        }
        positive("weights.r_lon", w.r_lon)?;
        non_negative("weights.p_lon", w.p_lon)?;
        if !(w.beta >= 1.0) {
            return Err(Error::config("weights.beta", "must be at least 1"));
        }
        positive("weights.dd_safe", w.dd_safe)?;
        non_negative("weights.q_u", w.q_u)?;
        non_negative("weights.r_u", w.r_u)?;
        for (i, q) in w.q_lat.iter().enumerate() {
            non_negative(&format!("weights.q_lat[{i}]"), *q)?;
        }
        for (i, r) in w.r_lat.iter().enumerate() {
            non_negative(&format!("weights.r_lat[{i}]"), *r)?;
        }
        if w.r_lat[1] <= 0.0 && w.q_lat.iter().all(|q| *q == 0.0) {
            return Err(Error::config("weights.r_lat", "lateral cost must not vanish"));
        }

        let v = &self.vehicle;
        for (name, x) in [
            ("eta", v.eta),
            ("mass", v.mass),
            ("tire_radius", v.tire_radius),
            ("time_lag", v.time_lag),
            ("f_roll", v.f_roll),
            ("gravity", v.gravity),
            ("air_density", v.air_density),
            ("drag_coefficient", v.drag_coefficient),
            ("frontal_area", v.frontal_area),
            ("wheelbase", v.wheelbase),
        ] {
            positive(&format!("vehicle.{name}"), x)?;
        }

        let g = &self.geometry;
        positive("geometry.arc_radius", g.arc_radius)?;
        non_negative("geometry.arc_sweep", g.arc_sweep)?;
        if g.arc_sweep >= PI {
            return Err(Error::config("geometry.arc_sweep", "must be below π"));
        }
        non_negative("geometry.ramp_straight_length", g.ramp_straight_length)?;
        positive("geometry.mainline_upstream_length", g.mainline_upstream_length)?;
        positive("geometry.mainline_downstream_length", g.mainline_downstream_length)?;
        positive("geometry.mainline_control_length", g.mainline_control_length)?;
        positive("geometry.ramp_control_length", g.ramp_control_length)?;

        let mainline = self.vehicles.mainline.resolve("vehicles.mainline")?;
        let ramp = self.vehicles.ramp.resolve("vehicles.ramp")?;
        let kin = |v: &[VehicleSpec]| v.iter().map(|s| s.kinematics).collect::<Vec<_>>();
        check_nearest_first(&kin(&mainline), "vehicles.mainline")?;
        check_nearest_first(&kin(&ramp), "vehicles.ramp")?;
        for (path, list) in [("vehicles.mainline", &mainline), ("vehicles.ramp", &ramp)] {
            for (i, s) in list.iter().enumerate() {
                let k = s.kinematics;
                if !(k.velocity >= l.v_min && k.velocity <= l.v_max) {
                    return Err(Error::config(
                        format!("{path}.v[{i}]"),
                        format!("velocity {} outside [{}, {}]", k.velocity, l.v_min, l.v_max),
                    ));
                }
                if !(k.acceleration >= l.a_min && k.acceleration <= l.a_max) {
                    return Err(Error::config(
                        format!("{path}.a[{i}]"),
                        format!("acceleration {} outside [{}, {}]", k.acceleration, l.a_min, l.a_max),
                    ));
                }
            }
        }

        Ok(ScenarioConfig {
            name: self.name,
            simulation: SimulationSettings {
                time_step: sim.time_step,
                horizon: sim.horizon as usize,
                seed: sim.seed,
                duration: sim.duration,
                leader,
                perturbation: Perturbation {
                    position: sim.perturb_position,
                    velocity: sim.perturb_velocity,
                    acceleration: sim.perturb_acceleration,
                },
                lateral: sim.lateral,
                equilibrium_start: sim.equilibrium_start,
            },
            desired_spacing: DesiredSpacing {
                default: sim.desired_spacing,
                per_follower: sim.desired_spacing_per_follower.clone(),
            },
            limits: self.limits,
            weights: Weights {
                lon: LonWeights {
                    q: w.q_lon,
                    r: w.r_lon,
                    p_safety: w.p_lon,
                    beta: w.beta,
                    dd_safe: w.dd_safe,
                },
                seq: SequencerWeights {
                    q_u: w.q_u,
                    r_u: w.r_u,
                },
                lat: LatWeights {
                    q: w.q_lat,
                    r: w.r_lat,
                },
            },
            vehicle: VehicleParams {
                driveline: DrivelineParams {
                    eta: v.eta,
                    mass: v.mass,
                    tire_radius: v.tire_radius,
                    time_lag: v.time_lag,
                    f_roll: v.f_roll,
                    gravity: v.gravity,
                    air_density: v.air_density,
                    drag_coefficient: v.drag_coefficient,
                    frontal_area: v.frontal_area,
                },
                wheelbase: v.wheelbase,
            },
            geometry: self.geometry,
            mainline,
            ramp,
        })
    }
}

fn positive(path: &str, x: f64) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::config(path, format!("must be positive and finite, got {x}")))
    }
}

fn non_negative(path: &str, x: f64) -> Result<()> {
    if x >= 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::config(path, format!("must be non-negative and finite, got {x}")))
    }
}
