//! Distributed longitudinal MPC.
//!
//! Each follower regulates `x = (Δd, Δv, a)` relative to its sequence
//! predecessor, where `Δd` is the gap minus the desired gap `d*`,
//! `Δv = v_pred − v` and `a` is its own acceleration, with the jerk `γ` as
//! input:
//!
//! ```text
//! x_{k+1} = A x_k + B γ_k + D a_pred,k
//! A = [1 T 0; 0 1 −T; 0 0 1],  B = (0, 0, T),  D = (0, T, 0)
//! ```
//!
//! Followers solve in sequence order, each consuming the plan its
//! predecessor just broadcast. The horizon problem is condensed onto the
//! `N_p + 1` jerks and handed to the dense QP solver.

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qp::{QpProblem, QpStatus};
use crate::scenario::{CavId, CavKinematics, DrivelineParams, Limits, LonWeights, RoadSide};

/// Weight of the soft terminal penalty relative to `β` in the fallback
/// problem.
pub const SOFT_TERMINAL_FACTOR: f64 = 1e3;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LonState {
    pub delta_d: f64,
    pub delta_v: f64,
    pub accel: f64,
}

impl LonState {
    pub fn new(delta_d: f64, delta_v: f64, accel: f64) -> Self {
        Self {
            delta_d,
            delta_v,
            accel,
        }
    }

    /// State of `follower` relative to `pred` for desired gap `d_star`.
    pub fn relative(pred: &CavKinematics, follower: &CavKinematics, d_star: f64) -> Self {
        Self {
            delta_d: pred.z_position - follower.z_position - d_star,
            delta_v: pred.velocity - follower.velocity,
            accel: follower.acceleration,
        }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.delta_d, self.delta_v, self.accel)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn inf_norm(&self) -> f64 {
        self.delta_d.abs().max(self.delta_v.abs()).max(self.accel.abs())
    }
}

pub fn system_matrices(t: f64) -> (Matrix3<f64>, Vector3<f64>, Vector3<f64>) {
    let a = Matrix3::new(1.0, t, 0.0, 0.0, 1.0, -t, 0.0, 0.0, 1.0);
    let b = Vector3::new(0.0, 0.0, t);
    let d = Vector3::new(0.0, t, 0.0);
    (a, b, d)
}

/// One Euler step of the relative dynamics.
pub fn step_dynamics(x: LonState, gamma: f64, a_prev: f64, t: f64) -> LonState {
    LonState {
        delta_d: x.delta_d + t * x.delta_v,
        delta_v: x.delta_v - t * x.accel + t * a_prev,
        accel: x.accel + t * gamma,
    }
}

/// Rate of change of acceleration produced by the first-order driveline.
pub fn driveline_accel_rate(t_des: f64, t_actual: f64, v: f64, p: &DrivelineParams) -> f64 {
    p.eta / (p.mass * p.tire_radius * p.time_lag) * (t_des - t_actual)
        - p.f_roll * p.mass * p.gravity
        - 0.5 * p.air_density * p.drag_coefficient * p.frontal_area * v * v
}

/// Torque command that makes [`driveline_accel_rate`] return `gamma`.
pub fn desired_torque(gamma: f64, t_actual: f64, v: f64, p: &DrivelineParams) -> f64 {
    let resist = p.f_roll * p.mass * p.gravity + 0.5 * p.air_density * p.drag_coefficient * p.frontal_area * v * v;
    t_actual + (gamma + resist) * p.mass * p.tire_radius * p.time_lag / p.eta
}

/// Predicted motion broadcast by a vehicle, `N_p + 1` samples each.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredecessorPlan {
    pub accel_seq: Vec<f64>,
    pub pos_seq: Vec<f64>,
    pub vel_seq: Vec<f64>,
}

impl PredecessorPlan {
    /// Integrates an acceleration sequence forward from `(p0, v0)`.
    pub fn from_accelerations(p0: f64, v0: f64, accel_seq: Vec<f64>, t: f64) -> Self {
        let n = accel_seq.len();
        let mut pos_seq = Vec::with_capacity(n);
        let mut vel_seq = Vec::with_capacity(n);
        let (mut p, mut v) = (p0, v0);
        for a in &accel_seq {
            pos_seq.push(p);
            vel_seq.push(v);
            p += t * v;
            v += t * a;
        }
        Self {
            accel_seq,
            pos_seq,
            vel_seq,
        }
    }

    pub fn len(&self) -> usize {
        self.accel_seq.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accel_seq.is_empty()
    }

    /// Largest violation of `p_{k+1} = p_k + T v_k` and `v_{k+1} = v_k + T a_k`.
    pub fn consistency_error(&self, t: f64) -> f64 {
        (1..self.len())
            .map(|k| {
                let ep = self.pos_seq[k] - self.pos_seq[k - 1] - t * self.vel_seq[k - 1];
                let ev = self.vel_seq[k] - self.vel_seq[k - 1] - t * self.accel_seq[k - 1];
                ep.abs().max(ev.abs())
            })
            .fold(0.0, f64::max)
    }

    fn check(&self, horizon: usize) -> Result<()> {
        let n = horizon + 1;
        if self.accel_seq.len() != n || self.pos_seq.len() != n || self.vel_seq.len() != n {
            return Err(Error::DimensionMismatch(format!(
                "predecessor plan must hold {n} samples per sequence"
            )));
        }
        Ok(())
    }
}

/// Earliest step at which a follower on the other road reaches the merge
/// point, assuming it keeps its current gap `spacing` to the predecessor.
/// `Some(0)` on the same road, `None` when it never does within the plan.
pub fn compute_k_star(pred_pos_seq: &[f64], spacing: f64, same_road: bool) -> Option<usize> {
    if same_road {
        return Some(0);
    }
    pred_pos_seq.iter().position(|p| p - spacing >= 0.0)
}

/// Safety cost gate: closing in, already too close, and merging within the
/// horizon.
pub fn safety_active(x0: LonState, k_star: Option<usize>, horizon: usize, dd_safe: f64) -> bool {
    x0.delta_v <= 0.0 && x0.delta_d <= -dd_safe && k_star.is_some_and(|k| k <= horizon)
}

/// Coefficient multiplying `Δv_k²` when the safety cost is active.
pub fn safety_coefficient(x0: LonState, weights: &LonWeights) -> f64 {
    weights.p_safety * (x0.delta_d / -weights.dd_safe).exp()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LonSettings {
    pub horizon: usize,
    pub time_step: f64,
    pub weights: LonWeights,
    pub limits: Limits,
    /// Impose `Δv_N = 0` and `a_N = a*_N`.
    pub terminal_constraints: bool,
}

impl LonSettings {
    pub fn new(horizon: usize, time_step: f64, weights: LonWeights, limits: Limits) -> Self {
        Self {
            horizon,
            time_step,
            weights,
            limits,
            terminal_constraints: true,
        }
    }
}

/// Stage cost `xᵀQx + Rγ² + c_safe·Δv²`.
pub fn stage_cost(x: LonState, gamma: f64, weights: &LonWeights, safety: f64) -> f64 {
    let q = weights.q;
    q[0] * x.delta_d * x.delta_d
        + (q[1] + safety) * x.delta_v * x.delta_v
        + q[2] * x.accel * x.accel
        + weights.r * gamma * gamma
}

/// Condensed horizon problem in the jerks `Γ = (γ_0, …, γ_N)`.
#[derive(Debug, Clone)]
pub struct CondensedQp {
    pub qp: QpProblem,
    /// Cost constant so that `J(Γ) = ½ΓᵀHΓ + gᵀΓ + constant`.
    pub constant: f64,
    /// `x_k = free[k] + forced[k]·Γ`.
    pub free: Vec<Vector3<f64>>,
    pub forced: Vec<DMatrix<f64>>,
    pub safety: f64,
    pub k_star: Option<usize>,
}

/// Assembles the condensed QP.
///
/// State responses are generated by pushing unit jerks through
/// [`step_dynamics`], so the construction is independent of the closed-form
/// batch matrices used by the stability analysis.
pub fn build_mpc_qp(
    x0: LonState,
    plan: &PredecessorPlan,
    d_star: f64,
    same_road: bool,
    s: &LonSettings,
) -> Result<CondensedQp> {
    let n = s.horizon;
    plan.check(n)?;
    let t = s.time_step;
    let w = &s.weights;
    let lim = &s.limits;
    let nv = n + 1;

    let mut free = Vec::with_capacity(nv);
    let mut forced = Vec::with_capacity(nv);
    let mut x = x0;
    let mut m = DMatrix::<f64>::zeros(3, nv);
    for k in 0..nv {
        free.push(x.to_vector());
        forced.push(m.clone());
        if k + 1 < nv {
            x = step_dynamics(x, 0.0, plan.accel_seq[k], t);
            let mut next = DMatrix::zeros(3, nv);
            for j in 0..nv {
                let col = LonState::new(m[(0, j)], m[(1, j)], m[(2, j)]);
                let unit = if j == k { 1.0 } else { 0.0 };
                let y = step_dynamics(col, unit, 0.0, t);
                next[(0, j)] = y.delta_d;
                next[(1, j)] = y.delta_v;
                next[(2, j)] = y.accel;
            }
            m = next;
        }
    }

    let spacing = x0.delta_d + d_star;
    let k_star = compute_k_star(&plan.pos_seq, spacing, same_road);
    let safety = if safety_active(x0, k_star, n, w.dd_safe) {
        safety_coefficient(x0, w)
    } else {
        0.0
    };
    let qdiag = Matrix3::from_diagonal(&Vector3::new(w.q[0], w.q[1] + safety, w.q[2]));

    let mut h = DMatrix::<f64>::zeros(nv, nv);
    let mut g = DVector::<f64>::zeros(nv);
    let mut constant = 0.0;
    for k in 0..nv {
        let wk = if k == n { w.beta } else { 1.0 };
        let mk = &forced[k];
        let ck = &free[k];
        let q = DMatrix::from_fn(3, 3, |i, j| qdiag[(i, j)]);
        let c = DVector::from_column_slice(ck.as_slice());
        h += (mk.transpose() * &q * mk) * (2.0 * wk);
        g += (mk.transpose() * &q * &c) * (2.0 * wk);
        constant += wk * (ck.transpose() * qdiag * ck)[0];
        h[(k, k)] += 2.0 * wk * w.r;
    }
    h = (&h + h.transpose()) * 0.5;

    // Inequalities on x_1..x_N and on every jerk.
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    for k in 1..nv {
        let mk = &forced[k];
        let ck = &free[k];
        let vs = plan.vel_seq[k];
        let bounds = [
            (0, lim.dd_min, lim.dd_max),
            (1, vs - lim.v_max, vs - lim.v_min),
            (2, lim.a_min, lim.a_max),
        ];
        for (i, lo, hi) in bounds {
            let a = mk.row(i).transpose();
            rows.push((a.clone(), hi - ck[i]));
            rows.push((-a, ck[i] - lo));
        }
    }
    for k in 0..nv {
        let mut e = DVector::zeros(nv);
        e[k] = 1.0;
        rows.push((e.clone(), lim.gamma_max));
        rows.push((-e, -lim.gamma_min));
    }
    let a_in = DMatrix::from_fn(rows.len(), nv, |i, j| rows[i].0[j]);
    let b_in = DVector::from_iterator(rows.len(), rows.iter().map(|r| r.1));

    let mut qp = QpProblem::new(h, g).with_inequalities(a_in, b_in);
    if s.terminal_constraints {
        let mn = &forced[n];
        let cn = &free[n];
        let a_eq = DMatrix::from_fn(2, nv, |i, j| mn[(i + 1, j)]);
        let b_eq = DVector::from_vec(vec![-cn[1], plan.accel_seq[n] - cn[2]]);
        qp = qp.with_equalities(a_eq, b_eq);
    }
    Ok(CondensedQp {
        qp,
        constant,
        free,
        forced,
        safety,
        k_star,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DegradedMode {
    /// Terminal constraints relaxed into penalties.
    SoftTerminal,
    /// No feasible plan; braking toward `a_min`.
    EmergencyBrake,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LonPlan {
    pub control_seq: Vec<f64>,
    pub state_traj: Vec<LonState>,
    pub accel_seq: Vec<f64>,
    pub pos_seq: Vec<f64>,
    pub vel_seq: Vec<f64>,
    pub objective: f64,
    pub safety_active: bool,
    pub k_star: Option<usize>,
    pub degraded: Option<DegradedMode>,
}

impl LonPlan {
    pub fn first_control(&self) -> f64 {
        self.control_seq[0]
    }

    pub fn broadcast(&self) -> PredecessorPlan {
        PredecessorPlan {
            accel_seq: self.accel_seq.clone(),
            pos_seq: self.pos_seq.clone(),
            vel_seq: self.vel_seq.clone(),
        }
    }
}

/// Cost of a jerk sequence under the horizon objective.
pub fn horizon_cost(traj: &[LonState], controls: &[f64], weights: &LonWeights, safety: f64) -> f64 {
    let n = traj.len() - 1;
    traj.iter()
        .zip(controls)
        .enumerate()
        .map(|(k, (x, g))| {
            let wk = if k == n { weights.beta } else { 1.0 };
            wk * stage_cost(*x, *g, weights, safety)
        })
        .sum()
}

fn rollout(x0: LonState, controls: &[f64], plan: &PredecessorPlan, t: f64) -> Vec<LonState> {
    let mut traj = Vec::with_capacity(controls.len());
    let mut x = x0;
    for (k, &g) in controls.iter().enumerate() {
        traj.push(x);
        if k + 1 < controls.len() {
            x = step_dynamics(x, g, plan.accel_seq[k], t);
        }
    }
    traj
}

fn assemble(
    x0: LonState,
    controls: Vec<f64>,
    plan: &PredecessorPlan,
    d_star: f64,
    s: &LonSettings,
    cq: &CondensedQp,
    degraded: Option<DegradedMode>,
) -> LonPlan {
    let t = s.time_step;
    let state_traj = rollout(x0, &controls, plan, t);
    let accel_seq: Vec<f64> = state_traj.iter().map(|x| x.accel).collect();
    let p0 = plan.pos_seq[0] - x0.delta_d - d_star;
    let v0 = plan.vel_seq[0] - x0.delta_v;
    let own = PredecessorPlan::from_accelerations(p0, v0, accel_seq, t);
    let objective = horizon_cost(&state_traj, &controls, &s.weights, cq.safety);
    LonPlan {
        control_seq: controls,
        state_traj,
        accel_seq: own.accel_seq,
        pos_seq: own.pos_seq,
        vel_seq: own.vel_seq,
        objective,
        safety_active: cq.safety > 0.0,
        k_star: cq.k_star,
        degraded,
    }
}

/// Solves one follower's horizon problem.
///
/// When the problem is infeasible the terminal constraints are replaced by
/// penalties of weight `β·10³`; if that is still infeasible the plan brakes
/// toward `a_min` at the largest admissible jerk. Both cases set
/// [`LonPlan::degraded`].
pub fn solve_lon_mpc(
    x0: LonState,
    plan: &PredecessorPlan,
    d_star: f64,
    same_road: bool,
    s: &LonSettings,
) -> Result<LonPlan> {
    let cq = build_mpc_qp(x0, plan, d_star, same_road, s)?;
    let sol = cq.qp.solve()?;
    if sol.status == QpStatus::Optimal {
        return Ok(assemble(x0, sol.primal.iter().copied().collect(), plan, d_star, s, &cq, None));
    }
    log::debug!("longitudinal QP {:?}; relaxing terminal constraints", sol.status);

    let soft = soften_terminal(&cq, plan, s);
    let sol = soft.qp.solve()?;
    if sol.status == QpStatus::Optimal {
        let controls = sol.primal.iter().copied().collect();
        return Ok(assemble(x0, controls, plan, d_star, s, &cq, Some(DegradedMode::SoftTerminal)));
    }
    log::warn!("longitudinal QP {:?} after relaxation; emergency braking", sol.status);

    let lim = &s.limits;
    let mut a = x0.accel;
    let controls = (0..=s.horizon)
        .map(|_| {
            let g = ((lim.a_min - a) / s.time_step).clamp(lim.gamma_min, lim.gamma_max);
            a += s.time_step * g;
            g
        })
        .collect();
    Ok(assemble(x0, controls, plan, d_star, s, &cq, Some(DegradedMode::EmergencyBrake)))
}

fn soften_terminal(cq: &CondensedQp, plan: &PredecessorPlan, s: &LonSettings) -> CondensedQp {
    let n = s.horizon;
    let weight = s.weights.beta * SOFT_TERMINAL_FACTOR;
    let mn = &cq.forced[n];
    let cn = &cq.free[n];
    let mut qp = cq.qp.clone();
    let targets = [(1, 0.0), (2, plan.accel_seq[n])];
    for (i, target) in targets {
        let row = mn.row(i).transpose();
        let offset = cn[i] - target;
        qp.h += &row * row.transpose() * (2.0 * weight);
        qp.g += &row * (2.0 * weight * offset);
    }
    let nv = qp.dim();
    qp.a_eq = DMatrix::zeros(0, nv);
    qp.b_eq = DVector::zeros(0);
    CondensedQp {
        qp,
        constant: cq.constant,
        free: cq.free.clone(),
        forced: cq.forced.clone(),
        safety: cq.safety,
        k_star: cq.k_star,
    }
}

/// Proposition-style lower bound on the terminal weight for tolerance `ε`.
///
/// The ball radius uses the largest magnitude of each bound, with the
/// speed-difference radius taken as `v_max − v_min`.
pub fn beta_lower_bound(epsilon: f64, limits: &Limits, weights: &LonWeights, horizon: usize, t: f64) -> Result<f64> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be positive, got {epsilon}")));
    }
    let dd_r = limits.dd_min.abs().max(limits.dd_max.abs());
    let dv_r = limits.v_max - limits.v_min;
    let a_r = limits.a_min.abs().max(limits.a_max.abs());
    let g_r = limits.gamma_min.abs().max(limits.gamma_max.abs());
    let r = (dd_r * dd_r + dv_r * dv_r + a_r * a_r + g_r * g_r).sqrt();
    let rho = weights.q.iter().copied().fold(weights.r.abs(), |m, q| m.max(q.abs()));
    let alpha_l = 2.0 * r * rho;
    let (a, b, _) = system_matrices(t);
    let mut ab = Matrix3x4::zeros();
    ab.fixed_view_mut::<3, 3>(0, 0).copy_from(&a);
    ab.set_column(3, &b);
    let alpha_f = ab.singular_values().max();
    let span = limits.gamma_max - limits.gamma_min;
    let mut total = 0.0;
    for k in 0..horizon {
        let inner: f64 = (0..=k).map(|j| alpha_f.powi((k - j) as i32)).sum();
        total += alpha_l * inner * span;
    }
    Ok(total / epsilon)
}

/// Leader behaviour.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LeaderInput<'a> {
    /// Hold speed: any residual acceleration is removed at the largest
    /// admissible jerk.
    ConstantSpeed,
    /// Follow an acceleration trace; `trace[k]` is the target at step
    /// `current + k`, beyond its end the target is zero.
    Trace(&'a [f64]),
}

/// One member of a virtual platoon, in sequence order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlatoonMember {
    pub id: CavId,
    pub side: RoadSide,
    pub kinematics: CavKinematics,
    /// Desired gap to the predecessor (ignored for the leader).
    pub d_star: f64,
}

/// Per-step broadcast record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BroadcastRecord {
    pub cav_id: usize,
    pub step: usize,
    pub gamma_seq: Vec<f64>,
    pub pos_seq: Vec<f64>,
    pub vel_seq: Vec<f64>,
    pub accel_seq: Vec<f64>,
    pub degraded_flag: bool,
}

#[derive(Debug, Clone)]
pub struct PlatoonStep {
    /// Jerk applied by each member this step.
    pub gammas: Vec<f64>,
    /// Follower plans; `None` for the leader.
    pub plans: Vec<Option<LonPlan>>,
    pub broadcasts: Vec<BroadcastRecord>,
}

impl PlatoonStep {
    pub fn any_degraded(&self) -> bool {
        self.broadcasts.iter().any(|b| b.degraded_flag)
    }
}

/// Leader jerk sequence over the horizon.
pub fn leader_controls(kin: &CavKinematics, input: LeaderInput<'_>, s: &LonSettings) -> Vec<f64> {
    let t = s.time_step;
    let lim = &s.limits;
    let mut a = kin.acceleration;
    (0..=s.horizon)
        .map(|k| {
            let target = match input {
                LeaderInput::ConstantSpeed => 0.0,
                LeaderInput::Trace(trace) => trace.get(k + 1).copied().unwrap_or(0.0),
            };
            let g = ((target - a) / t).clamp(lim.gamma_min, lim.gamma_max);
            a += t * g;
            g
        })
        .collect()
}

/// Runs the serial distributed update for one control step: the leader
/// applies its policy, then each follower solves against the plan its
/// predecessor has just broadcast.
pub fn serial_platoon_step(
    members: &[PlatoonMember],
    leader: LeaderInput<'_>,
    s: &LonSettings,
    step: usize,
) -> Result<PlatoonStep> {
    let Some(first) = members.first() else {
        return Err(Error::EmptyScenario);
    };
    let t = s.time_step;
    let mut gammas = Vec::with_capacity(members.len());
    let mut plans = Vec::with_capacity(members.len());
    let mut broadcasts = Vec::with_capacity(members.len());

    let controls = leader_controls(&first.kinematics, leader, s);
    let mut accel = Vec::with_capacity(controls.len());
    let mut a = first.kinematics.acceleration;
    for g in &controls {
        accel.push(a);
        a += t * g;
    }
    let mut pred_plan =
        PredecessorPlan::from_accelerations(first.kinematics.z_position, first.kinematics.velocity, accel, t);
    gammas.push(controls[0]);
    plans.push(None);
    broadcasts.push(BroadcastRecord {
        cav_id: first.id.0,
        step,
        gamma_seq: controls,
        pos_seq: pred_plan.pos_seq.clone(),
        vel_seq: pred_plan.vel_seq.clone(),
        accel_seq: pred_plan.accel_seq.clone(),
        degraded_flag: false,
    });

    for w in members.windows(2) {
        let (pred, me) = (&w[0], &w[1]);
        let x0 = LonState::relative(&pred.kinematics, &me.kinematics, me.d_star);
        let same_road = pred.side == me.side;
        let plan = solve_lon_mpc(x0, &pred_plan, me.d_star, same_road, s)?;
        gammas.push(plan.first_control());
        broadcasts.push(BroadcastRecord {
            cav_id: me.id.0,
            step,
            gamma_seq: plan.control_seq.clone(),
            pos_seq: plan.pos_seq.clone(),
            vel_seq: plan.vel_seq.clone(),
            accel_seq: plan.accel_seq.clone(),
            degraded_flag: plan.degraded.is_some(),
        });
        pred_plan = plan.broadcast();
        plans.push(Some(plan));
    }
    Ok(PlatoonStep {
        gammas,
        plans,
        broadcasts,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn settings() -> LonSettings {
        LonSettings::new(12, 0.1, LonWeights::default(), Limits::default())
    }

    fn cruise(p0: f64, v0: f64, n: usize) -> PredecessorPlan {
        PredecessorPlan::from_accelerations(p0, v0, vec![0.0; n + 1], 0.1)
    }

    #[test]
    fn dynamics_examples() {
        let t = 0.1;
        assert_eq!(step_dynamics(LonState::default(), 0.0, 0.0, t), LonState::default());
        let x = step_dynamics(LonState::new(0.0, 1.0, 0.0), 0.0, 0.0, t);
        assert_abs_diff_eq!(x.delta_d, 0.1, epsilon = 1e-15);
        assert_eq!((x.delta_v, x.accel), (1.0, 0.0));
        let x = step_dynamics(LonState::new(2.0, -1.0, 0.5), 1.0, 0.3, t);
        assert_abs_diff_eq!(x.delta_d, 1.9, epsilon = 1e-12);
        assert_abs_diff_eq!(x.delta_v, -1.02, epsilon = 1e-12);
        assert_abs_diff_eq!(x.accel, 0.6, epsilon = 1e-12);
    }

    #[test]
    fn dynamics_match_matrix_form() {
        let (a, b, d) = system_matrices(0.1);
        let x = LonState::new(2.0, -1.0, 0.5);
        let y = a * x.to_vector() + b * 1.0 + d * 0.3;
        let z = step_dynamics(x, 1.0, 0.3, 0.1).to_vector();
        assert_abs_diff_eq!(y, z, epsilon = 1e-15);
    }

    #[test]
    fn driveline_rolling_resistance_at_rest() {
        let p = DrivelineParams::default();
        assert_abs_diff_eq!(driveline_accel_rate(100.0, 100.0, 0.0, &p), -220.5, epsilon = 1e-9);
    }

    #[test]
    fn driveline_balance_at_cruise() {
        let p = DrivelineParams::default();
        let dt = (220.5 + 0.5 * 1.2 * 0.25 * 2.0 * 225.0) * (1500.0 * 0.25 * 0.4 / 0.8);
        assert_abs_diff_eq!(driveline_accel_rate(dt, 0.0, 15.0, &p), 0.0, epsilon = 1e-9);
        assert_abs_diff_eq!(desired_torque(0.0, 0.0, 15.0, &p), dt, epsilon = 1e-9);
    }

    #[test]
    fn torque_round_trip() {
        let p = DrivelineParams::default();
        for (g, v) in [(1.3, 0.0), (-2.0, 15.0), (0.4, 30.0)] {
            let td = desired_torque(g, 250.0, v, &p);
            assert_abs_diff_eq!(driveline_accel_rate(td, 250.0, v, &p), g, epsilon = 1e-10);
        }
    }

    #[test]
    fn k_star_examples() {
        assert_eq!(compute_k_star(&[-100.0; 13], 10.0, true), Some(0));
        assert_eq!(compute_k_star(&[-50.0; 13], 10.0, false), None);
        let p: Vec<f64> = (0..13).map(|k| -10.0 + 5.0 * k as f64).collect();
        assert_eq!(compute_k_star(&p, 4.0, false), Some(3));
    }

    #[test]
    fn safety_gate_examples() {
        let x = LonState::new(-6.0, -0.5, 0.0);
        assert!(safety_active(x, Some(4), 12, 5.0));
        assert!(!safety_active(LonState::new(-6.0, 0.5, 0.0), Some(4), 12, 5.0));
        assert!(!safety_active(x, None, 12, 5.0));
    }

    #[test]
    fn equilibrium_needs_no_control() {
        let s = settings();
        let plan = cruise(0.0, 20.0, 12);
        let x0 = LonState::default();
        let p = solve_lon_mpc(x0, &plan, 20.0, true, &s).unwrap();
        assert!(p.degraded.is_none());
        assert!(p.control_seq.iter().all(|g| g.abs() < 1e-10));
        assert!(p.objective.abs() < 1e-12);
    }

    #[test]
    fn safety_term_raises_cost() {
        let s = settings();
        let plan = cruise(0.0, 20.0, 12);
        let x0 = LonState::new(-6.0, -0.5, 0.0);
        let on = build_mpc_qp(x0, &plan, 20.0, true, &s).unwrap();
        assert_abs_diff_eq!(on.safety, 0.1 * (6.0f64 / 5.0).exp(), epsilon = 1e-14);
        // Same state, pretend the follower never merges: no safety term.
        let off = build_mpc_qp(x0, &cruise(-500.0, 20.0, 12), 20.0, false, &s).unwrap();
        assert_eq!(off.safety, 0.0);
        let gamma = DVector::from_element(13, 0.1);
        let j_on = on.qp.objective(&gamma) + on.constant;
        let j_off = off.qp.objective(&gamma) + off.constant;
        assert!(j_on > j_off);
        let eig = nalgebra::SymmetricEigen::new(on.qp.h.clone()).eigenvalues.min();
        assert!(eig > 0.0);
    }

    #[test]
    fn condensed_cost_matches_rollout() {
        let s = settings();
        let plan = PredecessorPlan::from_accelerations(0.0, 20.0, (0..13).map(|k| 0.1 * k as f64).collect(), 0.1);
        let x0 = LonState::new(3.0, -1.0, 0.2);
        let cq = build_mpc_qp(x0, &plan, 20.0, true, &s).unwrap();
        let gamma: Vec<f64> = (0..13).map(|k| (k as f64 * 0.7).sin()).collect();
        let traj = rollout(x0, &gamma, &plan, 0.1);
        let direct = horizon_cost(&traj, &gamma, &s.weights, 0.0);
        let condensed = cq.qp.objective(&DVector::from_vec(gamma)) + cq.constant;
        assert_abs_diff_eq!(direct, condensed, epsilon = 1e-9 * direct.abs().max(1.0));
    }

    #[test]
    fn plan_satisfies_terminal_constraints() {
        let s = settings();
        let plan = cruise(-300.0, 15.0, 12);
        let x0 = LonState::new(-4.0, 1.0, 0.0);
        let p = solve_lon_mpc(x0, &plan, 20.0, true, &s).unwrap();
        assert!(p.degraded.is_none());
        let last = p.state_traj[12];
        assert_abs_diff_eq!(last.delta_v, 0.0, epsilon = 1e-8);
        assert_abs_diff_eq!(last.accel, plan.accel_seq[12], epsilon = 1e-8);
        assert!(p.broadcast().consistency_error(0.1) < 1e-9);
    }

    #[test]
    fn unreachable_terminal_acceleration_degrades() {
        let s = settings();
        let mut accel = vec![0.0; 13];
        // Far beyond what N·T·γ_max = 6 m/s² of jerk can reach.
        accel[12] = 4.9;
        let plan = PredecessorPlan::from_accelerations(0.0, 15.0, accel, 0.1);
        let x0 = LonState::new(0.0, 0.0, -4.9);
        let p = solve_lon_mpc(x0, &plan, 20.0, true, &s).unwrap();
        assert!(p.degraded.is_some());
    }

    #[test]
    fn beta_bound_scales_inversely_with_epsilon() {
        let l = Limits::default();
        let w = LonWeights::default();
        let b1 = beta_lower_bound(0.5, &l, &w, 12, 0.1).unwrap();
        let b2 = beta_lower_bound(1.0, &l, &w, 12, 0.1).unwrap();
        assert_abs_diff_eq!(b1, 2.0 * b2, epsilon = 1e-9 * b1);
        let flat = Limits {
            gamma_min: 0.0,
            gamma_max: 0.0,
            ..Limits::default()
        };
        assert_eq!(beta_lower_bound(0.5, &flat, &w, 12, 0.1).unwrap(), 0.0);
        assert!(beta_lower_bound(0.0, &l, &w, 12, 0.1).is_err());
    }

    #[test]
    fn equilibrium_platoon_stays_put() {
        let s = settings();
        let members: Vec<PlatoonMember> = (0..4)
            .map(|i| PlatoonMember {
                id: CavId(i + 1),
                side: RoadSide::Mainline,
                kinematics: CavKinematics::new(-20.0 * i as f64, 15.0, 0.0),
                d_star: 20.0,
            })
            .collect();
        let step = serial_platoon_step(&members, LeaderInput::ConstantSpeed, &s, 0).unwrap();
        assert!(step.gammas.iter().all(|g| g.abs() < 1e-10));
        assert_eq!(step.broadcasts.len(), 4);
        assert!(!step.any_degraded());
    }

    #[test]
    fn follower_sees_leader_trace() {
        let s = settings();
        let members = [
            PlatoonMember {
                id: CavId(1),
                side: RoadSide::Mainline,
                kinematics: CavKinematics::new(0.0, 15.0, 0.0),
                d_star: 0.0,
            },
            PlatoonMember {
                id: CavId(2),
                side: RoadSide::Mainline,
                kinematics: CavKinematics::new(-20.0, 15.0, 0.0),
                d_star: 20.0,
            },
        ];
        let trace: Vec<f64> = (0..20).map(|k| 0.05 * k as f64).collect();
        let step = serial_platoon_step(&members, LeaderInput::Trace(&trace), &s, 0).unwrap();
        let lead = &step.broadcasts[0];
        assert_abs_diff_eq!(lead.accel_seq[5], 0.25, epsilon = 1e-12);
        // Leader speeds up, so the follower must too.
        assert!(step.gammas[1] > 0.0);
    }
}
