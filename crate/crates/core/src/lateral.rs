//! Kinematic bicycle model and the lateral tracking MPC.
//!
//! The pose `χ = (X, Y, θ)` of the rear axle evolves as
//!
//! ```text
//! Ẋ = v cos θ,   Ẏ = v sin θ,   θ̇ = v tan δ / L
//! ```
//!
//! with `μ = (v, δ)` as input. The controller linearizes around reference
//! poses on the centerline, pins `v` to the longitudinal plan and optimizes
//! the steering sequence.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix3x2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::qp::{QpProblem, QpStatus};
use crate::scenario::{LatWeights, Limits, RoadGeometry, RoadSide};

/// Wraps an angle to `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI { r - 2.0 * PI } else { r }
}

/// Shortest signed rotation from `b` to `a`.
pub fn angle_diff(a: f64, b: f64) -> f64 {
    wrap_angle(a - b)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose {
    pub x: f64,
    pub y: f64,
    /// Heading from the X-axis, kept in `(−π, π]`.
    pub theta: f64,
}

impl Pose {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn to_vector(self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.theta)
    }

    /// `self − other` with the heading difference wrapped.
    pub fn deviation(&self, other: &Pose) -> Vector3<f64> {
        Vector3::new(self.x - other.x, self.y - other.y, angle_diff(self.theta, other.theta))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LatControl {
    pub v: f64,
    pub delta: f64,
}

fn check_steering(delta: f64) -> Result<()> {
    if !delta.is_finite() || delta.abs() >= PI / 2.0 - 1e-9 {
        return Err(Error::SteeringSingular(delta));
    }
    Ok(())
}

/// Continuous-time pose derivative.
pub fn bicycle_derivative(pose: &Pose, mu: &LatControl, wheelbase: f64) -> Result<Vector3<f64>> {
    if !(wheelbase > 0.0) {
        return Err(Error::InvalidArgument(format!("wheelbase must be positive, got {wheelbase}")));
    }
    check_steering(mu.delta)?;
    Ok(Vector3::new(
        mu.v * pose.theta.cos(),
        mu.v * pose.theta.sin(),
        mu.v * mu.delta.tan() / wheelbase,
    ))
}

/// One forward-Euler step of the nonlinear model.
pub fn bicycle_step(pose: &Pose, mu: &LatControl, wheelbase: f64, t: f64) -> Result<Pose> {
    let d = bicycle_derivative(pose, mu, wheelbase)?;
    Ok(Pose::new(pose.x + t * d[0], pose.y + t * d[1], pose.theta + t * d[2]))
}

/// `χ(k+1) = A χ(k) + B μ(k) + D`, exact at the expansion point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinearModel {
    pub a: Matrix3<f64>,
    pub b: Matrix3x2<f64>,
    pub d: Vector3<f64>,
}

/// Euler-discretized linearization around `(χ_s, μ_s)`.
///
/// The affine term is `D = T·(v_s sin θ_s·θ_s, −v_s cos θ_s·θ_s,
/// −v_s δ_s / (L cos² δ_s))`, which makes `A χ_s + B μ_s + D` equal one
/// Euler step of the nonlinear model.
pub fn linearize(chi_s: &Pose, mu_s: &LatControl, t: f64, wheelbase: f64) -> Result<LinearModel> {
    if !(wheelbase > 0.0) {
        return Err(Error::InvalidArgument(format!("wheelbase must be positive, got {wheelbase}")));
    }
    check_steering(mu_s.delta)?;
    let (s, c) = chi_s.theta.sin_cos();
    let (v, dl) = (mu_s.v, mu_s.delta);
    let cos2 = dl.cos().powi(2);
    if cos2 < 1e-12 {
        return Err(Error::SteeringSingular(dl));
    }
    let a = Matrix3::new(1.0, 0.0, -v * t * s, 0.0, 1.0, v * t * c, 0.0, 0.0, 1.0);
    let b = Matrix3x2::new(t * c, 0.0, t * s, 0.0, t * dl.tan() / wheelbase, t * v / (wheelbase * cos2));
    let d = t * Vector3::new(v * s * chi_s.theta, -v * c * chi_s.theta, -v * dl / (wheelbase * cos2));
    Ok(LinearModel { a, b, d })
}

/// Centerline poses the controller tracks and linearizes around.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTrajectory {
    /// `χ_s(0..=N)`; heading is left unwrapped along the path.
    pub poses: Vec<Pose>,
    /// `μ_s(0..=N)` with `δ_s = atan(L κ)`.
    pub controls: Vec<LatControl>,
    /// Path coordinate of each reference pose.
    pub z: Vec<f64>,
    /// Some reference ran past the modelled road and was clamped.
    pub clamped: bool,
}

impl ReferenceTrajectory {
    pub fn horizon(&self) -> usize {
        self.poses.len().saturating_sub(1)
    }
}

/// Projects `pose` onto the centerline of `side` and advances along it by
/// `Σ v_k T`.
pub fn build_reference(
    geometry: &RoadGeometry,
    side: RoadSide,
    pose: &Pose,
    speeds: &[f64],
    t: f64,
    wheelbase: f64,
) -> Result<ReferenceTrajectory> {
    if speeds.is_empty() {
        return Err(Error::InvalidArgument("reference needs at least one predicted speed".into()));
    }
    let proj = geometry.project(side, pose.x, pose.y);
    let mut z = proj.z;
    let mut out = ReferenceTrajectory {
        poses: Vec::with_capacity(speeds.len()),
        controls: Vec::with_capacity(speeds.len()),
        z: Vec::with_capacity(speeds.len()),
        clamped: false,
    };
    for &v in speeds {
        let p = geometry.pose_at(side, z);
        out.clamped |= p.clamped;
        out.poses.push(Pose {
            x: p.x,
            y: p.y,
            theta: p.heading,
        });
        out.controls.push(LatControl {
            v,
            delta: (wheelbase * p.curvature).atan(),
        });
        out.z.push(z);
        z += v * t;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatSettings {
    pub time_step: f64,
    pub weights: LatWeights,
    pub limits: Limits,
    pub wheelbase: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatPlan {
    /// `δ(0..=N)`; `delta_seq[0]` is actuated.
    pub delta_seq: Vec<f64>,
    /// `v(0..=N)`, equal to the supplied longitudinal speeds.
    pub velocity_seq: Vec<f64>,
    /// Poses predicted by the linear model.
    pub predicted: Vec<Pose>,
    pub objective: f64,
    /// The QP failed and the previous steering angle is held.
    pub degraded: bool,
}

impl LatPlan {
    pub fn first_steering(&self) -> f64 {
        self.delta_seq[0]
    }
}

/// Tracking MPC over the steering sequence.
///
/// Works in deviation coordinates `e = χ − χ_s` (heading wrapped), where the
/// linear model reads `e(k+1) = A e(k) + B (μ − μ_s) + r(k)` with `r` the
/// mismatch between one Euler step from `χ_s(k)` and `χ_s(k+1)`. The cost is
/// `Σ_{k=0}^{N} e_kᵀ Q e_k + μ_kᵀ R μ_k`. The first rate bound is anchored
/// to `prev_delta`.
pub fn solve_lat_mpc(pose: &Pose, reference: &ReferenceTrajectory, prev_delta: f64, s: &LatSettings) -> Result<LatPlan> {
    let n = reference.horizon();
    if n == 0 || reference.controls.len() != n + 1 {
        return Err(Error::DimensionMismatch(format!(
            "reference with {} poses and {} controls",
            reference.poses.len(),
            reference.controls.len()
        )));
    }
    let t = s.time_step;
    let nv = n + 1;

    // e_k = c_k + G_k u, u_k = δ_k − δ_s,k.
    let mut c = vec![pose.deviation(&reference.poses[0])];
    let mut g = vec![DMatrix::<f64>::zeros(3, nv)];
    for k in 0..n {
        let (chi, mu) = (&reference.poses[k], &reference.controls[k]);
        let m = linearize(chi, mu, t, s.wheelbase)?;
        let euler = bicycle_step(chi, mu, s.wheelbase, t)?;
        let next = &reference.poses[k + 1];
        let r = Vector3::new(euler.x - next.x, euler.y - next.y, angle_diff(euler.theta, next.theta));
        let bd = m.b.column(1).into_owned();
        c.push(m.a * c[k] + r);
        let a_dyn = DMatrix::from_column_slice(3, 3, m.a.as_slice());
        let mut gk = a_dyn * &g[k];
        for i in 0..3 {
            gk[(i, k)] += bd[i];
        }
        g.push(gk);
    }

    let q = Matrix3::from_diagonal(&Vector3::from(s.weights.q));
    let [r_v, r_d] = s.weights.r;
    let mut h = DMatrix::<f64>::zeros(nv, nv);
    let mut lin = DVector::<f64>::zeros(nv);
    let mut constant = 0.0;
    for k in 0..=n {
        let qg = q * &g[k];
        h += g[k].transpose() * &qg * 2.0;
        lin += qg.transpose() * c[k] * 2.0;
        constant += c[k].dot(&(q * c[k]));
        let ds = reference.controls[k].delta;
        h[(k, k)] += 2.0 * r_d;
        lin[k] += 2.0 * r_d * ds;
        constant += r_d * ds * ds + r_v * reference.controls[k].v.powi(2);
    }

    // Steering and steering-rate bounds on δ = δ_s + u.
    let lim = &s.limits;
    let mut rows: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
    for k in 0..=n {
        let ds = reference.controls[k].delta;
        rows.push((vec![(k, 1.0)], lim.delta_max - ds));
        rows.push((vec![(k, -1.0)], ds - lim.delta_min));
        let prev_ds = if k == 0 { prev_delta } else { reference.controls[k - 1].delta };
        let base = ds - prev_ds;
        let mut terms = vec![(k, 1.0)];
        if k > 0 {
            terms.push((k - 1, -1.0));
        }
        let neg: Vec<(usize, f64)> = terms.iter().map(|&(i, v)| (i, -v)).collect();
        rows.push((terms, lim.ddelta_max - base));
        rows.push((neg, base - lim.ddelta_min));
    }
    let mut a_in = DMatrix::zeros(rows.len(), nv);
    let mut b_in = DVector::zeros(rows.len());
    for (i, (terms, rhs)) in rows.iter().enumerate() {
        for &(j, v) in terms {
            a_in[(i, j)] = v;
        }
        b_in[i] = *rhs;
    }
    let qp = QpProblem::new(h, lin).with_inequalities(a_in, b_in);
    let sol = qp.solve()?;
    let velocity_seq: Vec<f64> = reference.controls.iter().map(|m| m.v).collect();
    if sol.status != QpStatus::Optimal {
        log::warn!("lateral QP {:?}; holding steering at {prev_delta}", sol.status);
        return Ok(LatPlan {
            delta_seq: vec![prev_delta; nv],
            velocity_seq,
            predicted: vec![*pose; nv],
            objective: f64::NAN,
            degraded: true,
        });
    }
    let u = &sol.primal;
    let delta_seq = (0..nv).map(|k| reference.controls[k].delta + u[k]).collect();
    let predicted = (0..nv)
        .map(|k| {
            let e = c[k] + &g[k] * u;
            let r = &reference.poses[k];
            Pose::new(r.x + e[0], r.y + e[1], r.theta + e[2])
        })
        .collect();
    Ok(LatPlan {
        delta_seq,
        velocity_seq,
        predicted,
        objective: sol.objective + constant,
        degraded: false,
    })
}

/// Signed lateral offset (left positive) and heading error of `pose`
/// relative to the centerline of `side`.
pub fn tracking_errors(geometry: &RoadGeometry, side: RoadSide, pose: &Pose) -> (f64, f64) {
    let p = geometry.project(side, pose.x, pose.y);
    (p.lateral_offset, angle_diff(pose.theta, p.foot.heading))
}

/// Per-step lateral log record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LateralRecord {
    pub cav_id: usize,
    pub step: usize,
    #[serde(rename = "X")]
    pub x: f64,
    #[serde(rename = "Y")]
    pub y: f64,
    pub theta: f64,
    pub lateral_dev: f64,
    pub heading_dev: f64,
    pub delta: f64,
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    const L: f64 = 2.7;

    fn settings() -> LatSettings {
        LatSettings {
            time_step: 0.1,
            weights: LatWeights::default(),
            limits: Limits::default(),
            wheelbase: L,
        }
    }

    #[test]
    fn derivative_examples() {
        let d = bicycle_derivative(&Pose::default(), &LatControl { v: 15.0, delta: 0.0 }, L).unwrap();
        assert_eq!(d, Vector3::new(15.0, 0.0, 0.0));
        let d = bicycle_derivative(&Pose::new(1.0, 2.0, 0.3), &LatControl { v: 0.0, delta: 0.2 }, L).unwrap();
        assert_eq!(d, Vector3::zeros());
        let delta = (L / 47.75f64).atan();
        let d = bicycle_derivative(&Pose::default(), &LatControl { v: 15.0, delta }, L).unwrap();
        assert_abs_diff_eq!(d[2], 15.0 / 47.75, epsilon = 1e-12);
        assert!(bicycle_derivative(&Pose::default(), &LatControl { v: 1.0, delta: PI / 2.0 }, L).is_err());
    }

    #[test]
    fn hand_evaluated_matrices() {
        let m = linearize(&Pose::default(), &LatControl { v: 15.0, delta: 0.0 }, 0.1, L).unwrap();
        assert_abs_diff_eq!(m.a, Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 1.5, 0.0, 0.0, 1.0), epsilon = 1e-12);
        assert_abs_diff_eq!(m.b[(2, 0)], 0.0);
        assert_abs_diff_eq!(m.b[(2, 1)], 1.5 / L, epsilon = 1e-12);
    }

    #[test]
    fn linear_model_exact_at_expansion_point() {
        let chi = Pose::new(3.0, -2.0, 0.7);
        let mu = LatControl { v: 12.0, delta: -0.3 };
        let m = linearize(&chi, &mu, 0.1, L).unwrap();
        let lin = m.a * chi.to_vector() + m.b * nalgebra::Vector2::new(mu.v, mu.delta) + m.d;
        let nl = bicycle_step(&chi, &mu, L, 0.1).unwrap();
        assert_abs_diff_eq!(lin, nl.to_vector(), epsilon = 1e-12);
    }

    #[test]
    fn reference_advances_along_straight() {
        let g = RoadGeometry::default();
        let pose = Pose::new(-100.0, 0.0, 0.0);
        let r = build_reference(&g, RoadSide::Mainline, &pose, &[15.0; 5], 0.1, L).unwrap();
        for (k, p) in r.poses.iter().enumerate() {
            assert_abs_diff_eq!(p.x, -100.0 + 1.5 * k as f64, epsilon = 1e-12);
            assert_eq!(p.y, 0.0);
        }
        assert!(r.controls.iter().all(|c| c.delta == 0.0));
    }

    #[test]
    fn reference_on_arc_rotates() {
        let g = RoadGeometry::default();
        let p = g.pose_at(RoadSide::Ramp, -8.0);
        let pose = Pose::new(p.x, p.y, p.heading);
        let r = build_reference(&g, RoadSide::Ramp, &pose, &[15.0; 4], 0.1, L).unwrap();
        for w in r.poses.windows(2) {
            assert_abs_diff_eq!(w[1].theta - w[0].theta, -1.5 / 47.75, epsilon = 1e-9);
        }
        assert_abs_diff_eq!(r.controls[0].delta, -(L / 47.75f64).atan(), epsilon = 1e-12);
    }

    #[test]
    fn projection_of_offset_pose() {
        let g = RoadGeometry::default();
        let p = g.pose_at(RoadSide::Ramp, -60.0);
        let (s, c) = p.heading.sin_cos();
        let pose = Pose::new(p.x - 0.42 * s, p.y + 0.42 * c, p.heading);
        let (dev, hd) = tracking_errors(&g, RoadSide::Ramp, &pose);
        assert_abs_diff_eq!(dev, 0.42, epsilon = 1e-9);
        assert_abs_diff_eq!(hd, 0.0, epsilon = 1e-12);
    }

    #[test]
    fn centered_on_straight_gives_zero_steering() {
        let g = RoadGeometry::default();
        let pose = Pose::new(-200.0, 0.0, 0.0);
        let r = build_reference(&g, RoadSide::Mainline, &pose, &[15.0; 13], 0.1, L).unwrap();
        let plan = solve_lat_mpc(&pose, &r, 0.0, &settings()).unwrap();
        assert!(!plan.degraded);
        assert!(plan.delta_seq.iter().all(|d| d.abs() < 1e-9));
        assert_eq!(plan.velocity_seq, vec![15.0; 13]);
    }

    #[test]
    fn steering_respects_bounds_and_rate() {
        let g = RoadGeometry::default();
        let pose = Pose::new(-200.0, 0.42, 0.2);
        let r = build_reference(&g, RoadSide::Mainline, &pose, &[15.0; 13], 0.1, L).unwrap();
        let s = settings();
        let plan = solve_lat_mpc(&pose, &r, 0.0, &s).unwrap();
        let mut prev = 0.0;
        for &d in &plan.delta_seq {
            assert!(d.abs() <= 0.8 + 1e-9);
            assert!((d - prev).abs() <= 0.04 + 1e-9);
            prev = d;
        }
        assert!(plan.first_steering() < 0.0);
    }

    #[test]
    fn wrap_is_half_open() {
        assert_abs_diff_eq!(wrap_angle(-PI), PI, epsilon = 1e-15);
        assert_abs_diff_eq!(wrap_angle(3.0 * PI + 0.1), -PI + 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(angle_diff(PI - 0.1, -PI + 0.1), -0.2, epsilon = 1e-12);
    }
}
