//! Merging-sequence assignment.
//!
//! Vehicles are indexed as in the information vectors: mainline `0..m`
//! nearest-first, then ramp `m..m+r` nearest-first. A sequence is an order
//! of those indices, position 0 being the platoon leader. Vehicles never
//! overtake on their own road, so only order-preserving interleavings of
//! the two queues are admissible; there are `C(m+r, m)` of them.
//!
//! The objective of a sequence sums, over consecutive pairs, a spacing term
//! `Q_u·|P_pred − P_follower − d*|`, a direction term `R_u·|s_d − s_v|`
//! that penalizes a follower whose relative velocity opens an already wrong
//! gap, and a priority term from the density matrix `S` that defers
//! vehicles of the less busy road.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::scenario::{build_info_vectors, CavKinematics, DesiredSpacing, RoadSide, SequencerWeights};

/// Largest `m + r` accepted by [`enumerate_interleavings`].
pub const ENUMERATION_LIMIT: usize = 12;

/// A permutation assigning vehicles to sequence positions.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct AssignmentMatrix {
    /// `order[j]` is the vehicle at position `j`.
    order: Vec<usize>,
}

impl AssignmentMatrix {
    pub fn from_order(order: Vec<usize>) -> Result<Self> {
        let n = order.len();
        let mut seen = vec![false; n];
        for &i in &order {
            if i >= n || seen[i] {
                return Err(Error::InfeasibleAssignment(format!(
                    "{order:?} is not a permutation of 0..{n}"
                )));
            }
            seen[i] = true;
        }
        Ok(Self { order })
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// Position (0-based) of vehicle `i`.
    pub fn position_of(&self, i: usize) -> Option<usize> {
        self.order.iter().position(|&k| k == i)
    }

    /// Binary matrix with `M[j, i] = 1` when vehicle `i` holds position `j`.
    pub fn to_matrix(&self) -> DMatrix<f64> {
        let n = self.order.len();
        let mut m = DMatrix::zeros(n, n);
        for (j, &i) in self.order.iter().enumerate() {
            m[(j, i)] = 1.0;
        }
        m
    }

    /// Checks that each road's vehicles keep their relative order.
    pub fn preserves_road_order(&self, m: usize) -> bool {
        let mut next_main = 0;
        let mut next_ramp = m;
        for &i in &self.order {
            if i < m {
                if i != next_main {
                    return false;
                }
                next_main += 1;
            } else {
                if i != next_ramp {
                    return false;
                }
                next_ramp += 1;
            }
        }
        true
    }
}

/// Priority matrix: the column of every vehicle on the less dense road is
/// `[0.5^0, 0.5^1, …, 0.5^(n-1)]`, all other columns are zero. Equal
/// densities give no penalty.
pub fn build_s_matrix(m: usize, r: usize, mainline_length: f64, ramp_length: f64) -> DMatrix<f64> {
    let n = m + r;
    let rho_m = m as f64 / mainline_length;
    let rho_r = r as f64 / ramp_length;
    let penalized: Box<dyn Fn(usize) -> bool> = if rho_m < rho_r {
        Box::new(move |i| i < m)
    } else if rho_r < rho_m {
        Box::new(move |i| i >= m)
    } else {
        Box::new(|_| false)
    };
    let mut s = DMatrix::zeros(n, n);
    for i in (0..n).filter(|&i| penalized(i)) {
        for j in 0..n {
            s[(j, i)] = 0.5f64.powi(j as i32);
        }
    }
    s
}

/// Sign with zero mapped to `+1`.
fn canonical_sign(x: f64) -> f64 {
    if x < 0.0 {
        -1.0
    } else {
        1.0
    }
}

/// One sequencing instance.
#[derive(Debug, Clone)]
pub struct SequencingProblem {
    pub p: Vec<f64>,
    pub v: Vec<f64>,
    pub m: usize,
    pub r: usize,
    pub desired_spacing: DesiredSpacing,
    pub weights: SequencerWeights,
    pub s: DMatrix<f64>,
}

impl SequencingProblem {
    pub fn new(
        mainline: &[CavKinematics],
        ramp: &[CavKinematics],
        desired_spacing: DesiredSpacing,
        weights: SequencerWeights,
        control_lengths: (f64, f64),
    ) -> Result<Self> {
        let (p, v) = build_info_vectors(mainline, ramp)?;
        let (m, r) = (mainline.len(), ramp.len());
        Ok(Self {
            p,
            v,
            m,
            r,
            desired_spacing,
            weights,
            s: build_s_matrix(m, r, control_lengths.0, control_lengths.1),
        })
    }

    pub fn len(&self) -> usize {
        self.m + self.r
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn side(&self, i: usize) -> RoadSide {
        if i < self.m {
            RoadSide::Mainline
        } else {
            RoadSide::Ramp
        }
    }

    /// Big-M constant sized to the instance; used to report how far each
    /// pair sits from the linearization limits.
    pub fn big_m(&self) -> f64 {
        let (lo, hi) = self
            .p
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
        let dmax = (1..self.len())
            .map(|j| self.desired_spacing.for_position(j + 1))
            .fold(0.0, f64::max);
        10.0 * ((hi - lo) + dmax)
    }

    /// Cost of placing `follower` directly behind `pred` at follower
    /// position `pos` (≥ 1).
    fn pair(&self, pos: usize, pred: usize, follower: usize) -> PairDiagnostic {
        let d_star = self.desired_spacing.for_position(pos + 1);
        let deviation = self.p[pred] - self.p[follower] - d_star;
        let s_d = canonical_sign(deviation);
        let s_v = canonical_sign(self.v[follower] - self.v[pred]);
        let f = (s_d - s_v).abs();
        let cost = self.weights.q_u * deviation.abs() + self.weights.r_u * f;
        PairDiagnostic {
            position: pos,
            predecessor: pred,
            follower,
            desired_spacing: d_star,
            spacing_error: deviation.abs(),
            s_d,
            s_v,
            direction_penalty: f,
            cost,
            big_m_slack: f64::NAN,
        }
    }

    fn priority(&self, pos: usize, i: usize) -> f64 {
        self.s[(pos, i)]
    }

    /// Objective and per-pair breakdown of a complete sequence.
    pub fn evaluate(&self, a: &AssignmentMatrix) -> Result<CostBreakdown> {
        if a.len() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "assignment has {} positions for {} vehicles",
                a.len(),
                self.len()
            )));
        }
        let order = a.order();
        let big_m = self.big_m();
        let pairs: Vec<_> = (1..order.len())
            .map(|j| {
                let mut d = self.pair(j, order[j - 1], order[j]);
                d.big_m_slack = big_m - d.spacing_error;
                d
            })
            .collect();
        let pair_cost: f64 = pairs.iter().map(|d| d.cost).sum();
        let priority_cost: f64 = order.iter().enumerate().map(|(j, &i)| self.priority(j, i)).sum();
        Ok(CostBreakdown {
            total: pair_cost + priority_cost,
            pair_cost,
            priority_cost,
            pairs,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairDiagnostic {
    /// Sequence position of the follower (0-based).
    pub position: usize,
    pub predecessor: usize,
    pub follower: usize,
    pub desired_spacing: f64,
    pub spacing_error: f64,
    pub s_d: f64,
    pub s_v: f64,
    pub direction_penalty: f64,
    pub cost: f64,
    /// Distance of `|Δd|` from the big-M bound; negative would mean the
    /// linearized model is too tight for this instance.
    pub big_m_slack: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostBreakdown {
    pub total: f64,
    pub pair_cost: f64,
    pub priority_cost: f64,
    pub pairs: Vec<PairDiagnostic>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SequencingResult {
    pub assignment: AssignmentMatrix,
    pub objective: f64,
    pub breakdown: CostBreakdown,
    /// Search nodes visited (1 for FIFO).
    pub nodes: usize,
}

/// All order-preserving interleavings of `m` mainline and `r` ramp
/// vehicles, mainline-first in lexicographic order.
pub fn enumerate_interleavings(m: usize, r: usize) -> Result<Vec<Vec<usize>>> {
    if m + r > ENUMERATION_LIMIT {
        return Err(Error::EnumerationTooLarge {
            requested: m + r,
            limit: ENUMERATION_LIMIT,
        });
    }
    fn rec(m: usize, r: usize, im: usize, ir: usize, cur: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if im == m && ir == r {
            out.push(cur.clone());
            return;
        }
        if im < m {
            cur.push(im);
            rec(m, r, im + 1, ir, cur, out);
            cur.pop();
        }
        if ir < r {
            cur.push(m + ir);
            rec(m, r, im, ir + 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(m, r, 0, 0, &mut Vec::with_capacity(m + r), &mut out);
    Ok(out)
}

/// Exhaustive search over [`enumerate_interleavings`]; ties keep the
/// earliest interleaving.
pub fn solve_by_enumeration(problem: &SequencingProblem) -> Result<SequencingResult> {
    let all = enumerate_interleavings(problem.m, problem.r)?;
    let mut best: Option<(AssignmentMatrix, CostBreakdown)> = None;
    for order in &all {
        let a = AssignmentMatrix { order: order.clone() };
        let c = problem.evaluate(&a)?;
        if best.as_ref().map_or(true, |(_, b)| c.total < b.total) {
            best = Some((a, c));
        }
    }
    let (assignment, breakdown) = best.ok_or(Error::EmptyScenario)?;
    Ok(SequencingResult {
        objective: breakdown.total,
        assignment,
        breakdown,
        nodes: all.len(),
    })
}

/// Optimal sequence by depth-first branch-and-bound over interleavings.
///
/// The bound is the cost accumulated so far, which never exceeds the cost
/// of any completion because every term is non-negative. Mainline branches
/// are explored first, and a leaf replaces the incumbent only when strictly
/// cheaper, so ties resolve exactly as in [`solve_by_enumeration`].
pub fn solve_milp(problem: &SequencingProblem) -> Result<SequencingResult> {
    solve_milp_with_prefix(problem, &[])
}

/// As [`solve_milp`], with the first positions fixed to `prefix` (vehicles
/// already past the merge point keep their slots).
pub fn solve_milp_with_prefix(problem: &SequencingProblem, prefix: &[usize]) -> Result<SequencingResult> {
    if problem.is_empty() {
        return Err(Error::EmptyScenario);
    }
    let (m, r) = (problem.m, problem.r);
    let mut im = 0;
    let mut ir = 0;
    for &i in prefix {
        if i == im && im < m {
            im += 1;
        } else if i == m + ir && ir < r {
            ir += 1;
        } else {
            return Err(Error::InfeasibleAssignment(format!(
                "frozen prefix {prefix:?} does not respect road order"
            )));
        }
    }
    let mut partial = 0.0;
    for (j, &i) in prefix.iter().enumerate() {
        if j > 0 {
            partial += problem.pair(j, prefix[j - 1], i).cost;
        }
        partial += problem.priority(j, i);
    }

    let mut search = Search {
        problem,
        best: None,
        best_cost: f64::INFINITY,
        nodes: 0,
        order: prefix.to_vec(),
    };
    search.dfs(im, ir, partial)?;
    let (assignment, breakdown) = search.best.ok_or_else(|| {
        Error::InfeasibleAssignment("no admissible interleaving found".into())
    })?;
    Ok(SequencingResult {
        objective: breakdown.total,
        assignment,
        breakdown,
        nodes: search.nodes,
    })
}

struct Search<'a> {
    problem: &'a SequencingProblem,
    best: Option<(AssignmentMatrix, CostBreakdown)>,
    best_cost: f64,
    nodes: usize,
    order: Vec<usize>,
}

impl Search<'_> {
    fn dfs(&mut self, im: usize, ir: usize, partial: f64) -> Result<()> {
        self.nodes += 1;
        let p = self.problem;
        // Conservative margin so rounding in the running sum never prunes a
        // branch whose exact cost ties the incumbent.
        if partial > self.best_cost + 1e-9 * (1.0 + self.best_cost.abs()) {
            return Ok(());
        }
        if im == p.m && ir == p.r {
            let a = AssignmentMatrix {
                order: self.order.clone(),
            };
            let c = p.evaluate(&a)?;
            if c.total < self.best_cost {
                self.best_cost = c.total;
                self.best = Some((a, c));
            }
            return Ok(());
        }
        let pos = self.order.len();
        let mut children = [None, None];
        if im < p.m {
            children[0] = Some((im, im + 1, ir));
        }
        if ir < p.r {
            children[1] = Some((p.m + ir, im, ir + 1));
        }
        for (i, nim, nir) in children.into_iter().flatten() {
            let mut cost = partial + p.priority(pos, i);
            if let Some(&pred) = self.order.last() {
                cost += p.pair(pos, pred, i).cost;
            }
            self.order.push(i);
            self.dfs(nim, nir, cost)?;
            self.order.pop();
        }
        Ok(())
    }
}

/// First-in-first-out baseline: sort by position on the virtual axis,
/// nearest to the merge first, ties to the mainline.
pub fn solve_fifo(problem: &SequencingProblem) -> Result<SequencingResult> {
    if problem.is_empty() {
        return Err(Error::EmptyScenario);
    }
    let mut order: Vec<usize> = (0..problem.len()).collect();
    // Stable sort keeps mainline (lower indices) ahead on ties.
    order.sort_by(|&a, &b| problem.p[b].total_cmp(&problem.p[a]));
    let assignment = AssignmentMatrix { order };
    let breakdown = problem.evaluate(&assignment)?;
    Ok(SequencingResult {
        objective: breakdown.total,
        assignment,
        breakdown,
        nodes: 1,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn kin(z: f64, v: f64) -> CavKinematics {
        CavKinematics::new(z, v, 0.0)
    }

    fn problem(main: &[(f64, f64)], ramp: &[(f64, f64)]) -> SequencingProblem {
        let m: Vec<_> = main.iter().map(|&(z, v)| kin(z, v)).collect();
        let r: Vec<_> = ramp.iter().map(|&(z, v)| kin(z, v)).collect();
        SequencingProblem::new(&m, &r, DesiredSpacing::uniform(20.0), SequencerWeights::default(), (400.0, 400.0))
            .unwrap()
    }

    #[test]
    fn s_matrix_penalizes_sparser_road() {
        let s = build_s_matrix(3, 2, 400.0, 400.0);
        for j in 0..5 {
            assert_eq!(s[(j, 0)], 0.0);
            assert_eq!(s[(j, 3)], 0.5f64.powi(j as i32));
            assert_eq!(s[(j, 4)], 0.5f64.powi(j as i32));
        }
        let eq = build_s_matrix(2, 2, 400.0, 400.0);
        assert_eq!(eq.amax(), 0.0);
        // Same counts but a longer ramp control area makes the ramp sparser.
        let s = build_s_matrix(2, 2, 400.0, 800.0);
        assert_eq!(s[(0, 2)], 1.0);
        assert_eq!(s[(0, 0)], 0.0);
    }

    #[test]
    fn direction_penalty_for_open_gap_and_slow_follower() {
        // Spacing 30 m > 20 m and follower slower: the gap keeps opening.
        let p = problem(&[(0.0, 15.0)], &[(-30.0, 14.0)]);
        let d = p.pair(1, 0, 1);
        assert_eq!(d.s_d, 1.0);
        assert_eq!(d.s_v, -1.0);
        assert_eq!(d.direction_penalty, 2.0);
        assert_abs_diff_eq!(d.cost, 10.0 + 2.0);
    }

    #[test]
    fn zero_differences_count_as_positive() {
        let p = problem(&[(0.0, 15.0)], &[(-20.0, 15.0)]);
        let d = p.pair(1, 0, 1);
        assert_eq!((d.s_d, d.s_v, d.direction_penalty), (1.0, 1.0, 0.0));
    }

    #[test]
    fn interleaving_count_is_binomial() {
        assert_eq!(enumerate_interleavings(3, 2).unwrap().len(), 10);
        assert_eq!(enumerate_interleavings(0, 4).unwrap().len(), 1);
        assert_eq!(enumerate_interleavings(6, 6).unwrap().len(), 924);
        assert!(matches!(
            enumerate_interleavings(7, 6),
            Err(Error::EnumerationTooLarge { requested: 13, .. })
        ));
        let first = &enumerate_interleavings(2, 2).unwrap()[0];
        assert_eq!(first, &vec![0, 1, 2, 3]);
    }

    #[test]
    fn fifo_breaks_ties_toward_mainline() {
        let p = problem(&[(-300.0, 15.0), (-330.0, 16.0)], &[(-300.0, 15.0)]);
        let f = solve_fifo(&p).unwrap();
        assert_eq!(f.assignment.order(), &[0, 2, 1]);
    }

    #[test]
    fn branch_and_bound_matches_enumeration_on_small_case() {
        let p = problem(
            &[(-300.0, 15.0), (-330.0, 16.0), (-360.0, 17.0)],
            &[(-300.0, 15.0), (-330.0, 14.0)],
        );
        let a = solve_milp(&p).unwrap();
        let b = solve_by_enumeration(&p).unwrap();
        assert_eq!(a.assignment, b.assignment);
        assert_eq!(a.objective, b.objective);
        assert!(a.assignment.preserves_road_order(3));
    }

    #[test]
    fn frozen_prefix_is_kept() {
        let p = problem(&[(10.0, 15.0), (-30.0, 15.0)], &[(-5.0, 15.0)]);
        let s = solve_milp_with_prefix(&p, &[0]).unwrap();
        assert_eq!(s.assignment.order()[0], 0);
        assert!(solve_milp_with_prefix(&p, &[1]).is_err());
    }

    #[test]
    fn assignment_matrix_is_a_permutation() {
        let a = AssignmentMatrix::from_order(vec![2, 0, 1]).unwrap();
        let mtx = a.to_matrix();
        for k in 0..3 {
            assert_eq!(mtx.row(k).sum(), 1.0);
            assert_eq!(mtx.column(k).sum(), 1.0);
        }
        assert!(AssignmentMatrix::from_order(vec![0, 0, 1]).is_err());
    }

    #[test]
    fn big_m_covers_every_pair() {
        let p = problem(&[(-300.0, 15.0), (-360.0, 17.0)], &[(-310.0, 14.0)]);
        let s = solve_milp(&p).unwrap();
        assert!(s.breakdown.pairs.iter().all(|d| d.big_m_slack > 0.0));
    }
}
