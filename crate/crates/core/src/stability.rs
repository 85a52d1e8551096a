//! Explicit unconstrained MPC law and string-stability analysis.
//!
//! Stacking the predicted states `X = S_x x_0 + S_u Γ + S_a Ã` turns the
//! unconstrained horizon cost into `ΓᵀHΓ + 2x_0ᵀFΓ + 2ÃᵀLΓ + const` with
//!
//! ```text
//! H = S_uᵀ Q̃ S_u + R̃,   F = S_xᵀ Q̃ S_u,   L = S_aᵀ Q̃ S_u
//! ```
//!
//! so `Γ* = −H⁻¹Fᵀx_0 − H⁻¹LᵀÃ`. The first rows give a feedback gain
//! `K_b = (k_Δd, k_Δv, k_a)` on the relative state and feedforward gains
//! `K_f` on the predecessor's predicted accelerations, summed into `k_f`.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::longitudinal::system_matrices;
use crate::scenario::LonWeights;

/// Lower end of the frequency sweep (rad/s).
pub const SWEEP_MIN: f64 = 1e-3;
/// Upper end of the frequency sweep (rad/s).
pub const SWEEP_MAX: f64 = 1e3;
/// Number of logarithmically spaced sweep points.
pub const SWEEP_POINTS: usize = 10_000;
/// Slack on `|G| ≤ 1` when judging the sweep.
pub const SWEEP_SLACK: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct BatchMatrices {
    pub s_x: DMatrix<f64>,
    pub s_u: DMatrix<f64>,
    pub s_a: DMatrix<f64>,
    pub q_tilde: DMatrix<f64>,
    pub r_tilde: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub f: DMatrix<f64>,
    pub l: DMatrix<f64>,
}

/// Assembles the stacked prediction and cost matrices for states
/// `x_0..x_N` and inputs `γ_0..γ_N`.
pub fn batch_matrices(weights: &LonWeights, horizon: usize, t: f64) -> Result<BatchMatrices> {
    if horizon < 1 {
        return Err(Error::InvalidArgument("horizon must be at least 1".into()));
    }
    let n = horizon + 1;
    let (a, b, d) = system_matrices(t);
    let mut powers = vec![Matrix3::identity()];
    for k in 1..n {
        powers.push(a * powers[k - 1]);
    }
    let mut s_x = DMatrix::zeros(3 * n, 3);
    let mut s_u = DMatrix::zeros(3 * n, n);
    let mut s_a = DMatrix::zeros(3 * n, n);
    for k in 0..n {
        s_x.view_mut((3 * k, 0), (3, 3)).copy_from(&powers[k]);
        for j in 0..k {
            let ab: Vector3<f64> = powers[k - 1 - j] * b;
            let ad: Vector3<f64> = powers[k - 1 - j] * d;
            s_u.view_mut((3 * k, j), (3, 1)).copy_from(&ab);
            s_a.view_mut((3 * k, j), (3, 1)).copy_from(&ad);
        }
    }
    let mut q_tilde = DMatrix::zeros(3 * n, 3 * n);
    let mut r_tilde = DMatrix::zeros(n, n);
    for k in 0..n {
        let w = if k == horizon { weights.beta } else { 1.0 };
        for i in 0..3 {
            q_tilde[(3 * k + i, 3 * k + i)] = w * weights.q[i];
        }
        r_tilde[(k, k)] = w * weights.r;
    }
    let qs = &q_tilde * &s_u;
    let h = s_u.transpose() * &qs + &r_tilde;
    let f = s_x.transpose() * &qs;
    let l = s_a.transpose() * &qs;
    Ok(BatchMatrices {
        s_x,
        s_u,
        s_a,
        q_tilde,
        r_tilde,
        h,
        f,
        l,
    })
}

impl BatchMatrices {
    fn solve_h(&self, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let chol = self.h.clone().cholesky().ok_or(Error::Singular("batch Hessian"))?;
        let cond = {
            let e = nalgebra::SymmetricEigen::new(self.h.clone()).eigenvalues;
            e.max() / e.min()
        };
        if cond > 1e10 {
            log::warn!("batch Hessian condition number {cond:e}");
        }
        Ok(chol.solve(rhs))
    }
}

/// Unconstrained optimal jerk sequence for initial state `x0` and predicted
/// predecessor accelerations `pred_accel` (length `N_p + 1`).
pub fn explicit_solution(x0: &Vector3<f64>, pred_accel: &DVector<f64>, m: &BatchMatrices) -> Result<DVector<f64>> {
    if pred_accel.len() != m.h.nrows() {
        return Err(Error::DimensionMismatch(format!(
            "predecessor acceleration has {} samples, expected {}",
            pred_accel.len(),
            m.h.nrows()
        )));
    }
    let x = DVector::from_column_slice(x0.as_slice());
    let rhs = m.f.transpose() * x + m.l.transpose() * pred_accel;
    let sol = m.solve_h(&DMatrix::from_column_slice(rhs.len(), 1, rhs.as_slice()))?;
    Ok(-sol.column(0).into_owned())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainSet {
    pub k_delta_d: f64,
    pub k_delta_v: f64,
    pub k_a: f64,
    #[serde(rename = "K_f")]
    pub feedforward: Vec<f64>,
    pub k_f: f64,
}

impl GainSet {
    /// Builds a gain set from the feedback row and the summed feedforward
    /// gain only.
    pub fn from_scalars(k_delta_d: f64, k_delta_v: f64, k_a: f64, k_f: f64) -> Self {
        Self {
            k_delta_d,
            k_delta_v,
            k_a,
            feedforward: vec![k_f],
            k_f,
        }
    }

    pub fn k_b(&self) -> [f64; 3] {
        [self.k_delta_d, self.k_delta_v, self.k_a]
    }
}

/// Feedback and feedforward gains of the unconstrained law.
pub fn explicit_gains(weights: &LonWeights, horizon: usize, t: f64) -> Result<GainSet> {
    let m = batch_matrices(weights, horizon, t)?;
    let kb = -m.solve_h(&m.f.transpose())?;
    let kf = -m.solve_h(&m.l.transpose())?;
    let feedforward: Vec<f64> = kf.row(0).iter().copied().collect();
    Ok(GainSet {
        k_delta_d: kb[(0, 0)],
        k_delta_v: kb[(0, 1)],
        k_a: kb[(0, 2)],
        k_f: feedforward.iter().sum(),
        feedforward,
    })
}

/// `|G(jω)|` of the spacing-error propagation between consecutive
/// followers under the continuous-time reading of the gains.
pub fn transfer_magnitude(g: &GainSet, omega: f64) -> f64 {
    let w2 = omega * omega;
    let num_re = -w2 * g.k_f + g.k_delta_d;
    let num_im = omega * g.k_delta_v;
    let den_re = w2 * g.k_a + g.k_delta_d;
    let den_im = -w2 * omega + g.k_delta_v * omega;
    let den = den_re * den_re + den_im * den_im;
    if den == 0.0 {
        return f64::INFINITY;
    }
    ((num_re * num_re + num_im * num_im) / den).sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StringStabilityVerdict {
    pub p: f64,
    pub q: f64,
    /// Analytic verdict from the sign conditions on `p` and `q`.
    pub stable: bool,
    pub worst_omega: f64,
    pub worst_magnitude: f64,
}

impl StringStabilityVerdict {
    /// Verdict of the numerical sweep alone.
    pub fn sweep_stable(&self) -> bool {
        self.worst_magnitude <= 1.0 + SWEEP_SLACK
    }
}

/// The `ω²` roots at which `|G| = 1`.
pub fn analytic_condition(p: f64, q: f64) -> bool {
    let disc = p * p - q;
    if disc <= 0.0 {
        return true;
    }
    let s = disc.sqrt();
    (-p + s) / 2.0 <= 0.0 && (-p - s) / 2.0 <= 0.0
}

pub fn sweep(g: &GainSet) -> (f64, f64) {
    let (lo, hi) = (SWEEP_MIN.log10(), SWEEP_MAX.log10());
    let mut worst = (SWEEP_MIN, f64::NEG_INFINITY);
    for i in 0..SWEEP_POINTS {
        let e = lo + (hi - lo) * i as f64 / (SWEEP_POINTS - 1) as f64;
        let w = 10f64.powf(e);
        let m = transfer_magnitude(g, w);
        if m > worst.1 {
            worst = (w, m);
        }
    }
    worst
}

pub fn classify_string_stability(g: &GainSet) -> StringStabilityVerdict {
    let p = g.k_a * g.k_a - g.k_f * g.k_f - 2.0 * g.k_delta_v;
    let q = 8.0 * g.k_delta_d * (g.k_a + g.k_f);
    let (worst_omega, worst_magnitude) = sweep(g);
    StringStabilityVerdict {
        p,
        q,
        stable: analytic_condition(p, q),
        worst_omega,
        worst_magnitude,
    }
}

/// Ratio of the l2 norms of a follower's and its predecessor's spacing
/// deviations, both sampled every `t` seconds.
pub fn l2_ratio(follower: &[f64], predecessor: &[f64], t: f64) -> Result<f64> {
    if follower.len() != predecessor.len() || follower.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "series must have equal length ≥ 2 (got {} and {})",
            follower.len(),
            predecessor.len()
        )));
    }
    let norm = |s: &[f64]| (s.iter().map(|x| x * x * t).sum::<f64>()).sqrt();
    let den = norm(predecessor);
    if den == 0.0 {
        return Err(Error::InvalidArgument("predecessor spacing deviation is identically zero".into()));
    }
    Ok(norm(follower) / den)
}
