//! Three-dimensional polytopes, one-step precursor sets and N-step
//! controllable sets for the relative longitudinal dynamics.
//!
//! Polytopes are kept in H-representation (`n·x ≤ h` rows plus optional
//! equality rows for lower-dimensional sets). Vertices are enumerated on
//! demand by intersecting halfspaces inside the affine hull, which is cheap
//! in three dimensions. Hulls are rebuilt from vertex sets by testing
//! candidate supporting planes and keeping those touched by a two-dimensional
//! face.

use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};

/// Tolerance for treating normals as duplicates after normalization.
pub const DEDUP_TOL: f64 = 1e-7;
const MEMBER_TOL: f64 = 1e-9;
/// Relative distance below which two points or a point and a plane coincide.
const GEOM_TOL: f64 = 1e-7;

/// `normal · x ≤ offset` (or `=` for equality rows).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Halfspace {
    pub normal: [f64; 3],
    pub offset: f64,
}

impl Halfspace {
    pub fn new(normal: Vector3<f64>, offset: f64) -> Self {
        Self {
            normal: [normal[0], normal[1], normal[2]],
            offset,
        }
    }

    pub fn n(&self) -> Vector3<f64> {
        Vector3::from(self.normal)
    }

    fn value(&self, x: &Vector3<f64>) -> f64 {
        self.n().dot(x)
    }

    /// Unit normal, or `None` for a vanishing one.
    fn normalized(&self) -> Option<Self> {
        let len = self.n().norm();
        if len <= 1e-14 {
            return None;
        }
        Some(Self::new(self.n() / len, self.offset / len))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InputInterval {
    pub gamma_min: f64,
    pub gamma_max: f64,
}

impl InputInterval {
    pub fn new(gamma_min: f64, gamma_max: f64) -> Result<Self> {
        if !(gamma_min <= gamma_max) {
            return Err(Error::InvalidArgument(format!(
                "input interval [{gamma_min}, {gamma_max}] is empty"
            )));
        }
        Ok(Self { gamma_min, gamma_max })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Polytope {
    pub halfspaces: Vec<Halfspace>,
    pub equalities: Vec<Halfspace>,
    empty: bool,
    vertices: OnceLock<Vec<Vector3<f64>>>,
}

impl Polytope {
    pub fn new(halfspaces: Vec<Halfspace>, equalities: Vec<Halfspace>) -> Self {
        let mut p = Self {
            halfspaces: Vec::new(),
            equalities: Vec::new(),
            empty: false,
            vertices: OnceLock::new(),
        };
        for h in halfspaces {
            match h.normalized() {
                Some(h) => p.halfspaces.push(h),
                None if h.offset < -MEMBER_TOL => p.empty = true,
                None => {}
            }
        }
        for h in equalities {
            match h.normalized() {
                Some(h) => p.equalities.push(h),
                None if h.offset.abs() > MEMBER_TOL => p.empty = true,
                None => {}
            }
        }
        p
    }

    pub fn empty() -> Self {
        Self {
            empty: true,
            ..Self::default()
        }
    }

    /// Axis-aligned box `lo ≤ x ≤ hi`.
    pub fn from_box(lo: [f64; 3], hi: [f64; 3]) -> Self {
        let mut rows = Vec::with_capacity(6);
        for i in 0..3 {
            let mut e = Vector3::zeros();
            e[i] = 1.0;
            rows.push(Halfspace::new(e, hi[i]));
            rows.push(Halfspace::new(-e, -lo[i]));
        }
        Self::new(rows, Vec::new())
    }

    pub fn point(p: Vector3<f64>) -> Self {
        Self::from_points(&[p], &[])
    }

    /// Convex hull of a finite point set.
    pub fn hull(points: &[Vector3<f64>]) -> Self {
        Self::from_points(points, &[])
    }

    pub fn is_empty(&self) -> bool {
        self.empty || self.vertices().is_empty()
    }

    pub fn contains(&self, x: &Vector3<f64>) -> bool {
        if self.empty {
            return false;
        }
        self.halfspaces
            .iter()
            .all(|h| h.value(x) <= h.offset + MEMBER_TOL * (1.0 + h.offset.abs()))
            && self
                .equalities
                .iter()
                .all(|h| (h.value(x) - h.offset).abs() <= MEMBER_TOL * (1.0 + h.offset.abs()))
    }

    /// Vertices, enumerated once and cached.
    pub fn vertices(&self) -> &[Vector3<f64>] {
        self.vertices.get_or_init(|| {
            if self.empty {
                Vec::new()
            } else {
                enumerate_vertices(&self.halfspaces, &self.equalities)
            }
        })
    }

    /// Dimension of the affine hull, `None` when empty.
    pub fn dimension(&self) -> Option<usize> {
        let v = self.vertices();
        if v.is_empty() {
            None
        } else {
            Some(affine_basis(v).0)
        }
    }

    /// Smallest and largest value of each coordinate.
    pub fn axis_extents(&self) -> Option<[(f64, f64); 3]> {
        let v = self.vertices();
        if v.is_empty() {
            return None;
        }
        let mut ext = [(f64::INFINITY, f64::NEG_INFINITY); 3];
        for p in v {
            for i in 0..3 {
                ext[i].0 = ext[i].0.min(p[i]);
                ext[i].1 = ext[i].1.max(p[i]);
            }
        }
        Some(ext)
    }

    pub fn intersect(&self, other: &Polytope) -> Polytope {
        if self.empty || other.empty {
            return Polytope::empty();
        }
        let mut h = self.halfspaces.clone();
        h.extend_from_slice(&other.halfspaces);
        let mut e = self.equalities.clone();
        e.extend_from_slice(&other.equalities);
        Polytope::new(h, e).reduce()
    }

    /// Drops redundant rows and duplicate normals. Membership is unchanged.
    pub fn reduce(&self) -> Polytope {
        if self.empty {
            return Polytope::empty();
        }
        let v = self.vertices();
        if v.is_empty() {
            return Polytope::empty();
        }
        let candidates: Vec<Vector3<f64>> = self.halfspaces.iter().map(|h| h.n()).collect();
        let full = affine_basis(v).0 == 3;
        Polytope::from_points(v, if full { &candidates } else { &[] })
    }

    /// Builds the H-representation of `conv(points)`. For full-dimensional
    /// hulls every facet normal must appear in `candidates`; pass an empty
    /// slice to try all point triples instead.
    fn from_points(points: &[Vector3<f64>], candidates: &[Vector3<f64>]) -> Polytope {
        let pts = dedup_points(points);
        if pts.is_empty() {
            return Polytope::empty();
        }
        let (dim, basis, centroid) = affine_basis(&pts);
        let mut ineq = Vec::new();
        let mut eq = Vec::new();
        match dim {
            0 => {
                for i in 0..3 {
                    let mut e = Vector3::zeros();
                    e[i] = 1.0;
                    eq.push(Halfspace::new(e, centroid[i]));
                }
            }
            1 => {
                let u = basis[0];
                for w in [basis[1], basis[2]] {
                    eq.push(Halfspace::new(w, w.dot(&centroid)));
                }
                let (lo, hi) = min_max(pts.iter().map(|p| u.dot(p)));
                ineq.push(Halfspace::new(u, hi));
                ineq.push(Halfspace::new(-u, -lo));
            }
            2 => {
                let (u, w, n) = (basis[0], basis[1], basis[2]);
                eq.push(Halfspace::new(n, n.dot(&centroid)));
                let flat: Vec<(f64, f64)> = pts.iter().map(|p| (u.dot(p), w.dot(p))).collect();
                let hull = convex_hull_2d(&flat);
                for k in 0..hull.len() {
                    let a = flat[hull[k]];
                    let b = flat[hull[(k + 1) % hull.len()]];
                    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
                    let normal = u * dy - w * dx;
                    ineq.push(Halfspace::new(normal, normal.dot(&pts[hull[k]])));
                }
            }
            _ => {
                let scale = pts.iter().map(|p| (p - centroid).norm()).fold(0.0, f64::max).max(1.0);
                let mut cands: Vec<Vector3<f64>> = candidates.to_vec();
                if cands.is_empty() {
                    for i in 0..pts.len() {
                        for j in i + 1..pts.len() {
                            for k in j + 1..pts.len() {
                                let n = (pts[j] - pts[i]).cross(&(pts[k] - pts[i]));
                                cands.push(n);
                                cands.push(-n);
                            }
                        }
                    }
                }
                let mut kept: Vec<Vector3<f64>> = Vec::new();
                for n in cands {
                    let len = n.norm();
                    if len <= 1e-12 * scale * scale {
                        continue;
                    }
                    let n = n / len;
                    if kept.iter().any(|k| (k - n).norm() < DEDUP_TOL) {
                        continue;
                    }
                    let h = pts.iter().map(|p| n.dot(p)).fold(f64::NEG_INFINITY, f64::max);
                    let tol = GEOM_TOL * scale;
                    let on: Vec<Vector3<f64>> = pts.iter().filter(|p| h - n.dot(p) <= tol).copied().collect();
                    if spans_plane(&on, scale) {
                        kept.push(n);
                        ineq.push(Halfspace::new(n, h));
                    }
                }
            }
        }
        let verts = if dim == 3 { corner_points(&pts, &ineq) } else { pts };
        let p = Polytope::new(ineq, eq);
        let _ = p.vertices.set(verts);
        p
    }
}

/// Points lying on three facets with independent normals, so interior and
/// edge points do not inflate later candidate sets.
fn corner_points(pts: &[Vector3<f64>], facets: &[Halfspace]) -> Vec<Vector3<f64>> {
    let scale = pts.iter().map(|p| p.amax()).fold(1.0, f64::max);
    pts.iter()
        .filter(|p| {
            let normals: Vec<Vector3<f64>> = facets
                .iter()
                .filter(|h| h.offset - h.value(p) <= GEOM_TOL * scale)
                .map(|h| h.n())
                .collect();
            normals.iter().enumerate().any(|(i, a)| {
                normals[i + 1..].iter().enumerate().any(|(j, b)| {
                    let c = a.cross(b);
                    normals[i + j + 2..].iter().any(|n| c.dot(n).abs() > 1e-6)
                })
            })
        })
        .copied()
        .collect()
}

fn min_max(it: impl Iterator<Item = f64>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
}

fn dedup_points(points: &[Vector3<f64>]) -> Vec<Vector3<f64>> {
    let scale = points.iter().map(|p| p.amax()).fold(1.0, f64::max);
    let mut out: Vec<Vector3<f64>> = Vec::with_capacity(points.len());
    for p in points {
        if !out.iter().any(|q| (p - q).amax() <= GEOM_TOL * scale) {
            out.push(*p);
        }
    }
    out
}

/// Affine dimension, an orthonormal basis whose first `dim` vectors span the
/// hull's direction space, and the centroid.
fn affine_basis(points: &[Vector3<f64>]) -> (usize, [Vector3<f64>; 3], Vector3<f64>) {
    let n = points.len();
    let centroid = points.iter().fold(Vector3::zeros(), |a, p| a + p) / n as f64;
    // Pad to at least three rows so the SVD returns a full 3×3 Vᵀ.
    let rows = n.max(3);
    let m = DMatrix::from_fn(rows, 3, |i, j| if i < n { points[i][j] - centroid[j] } else { 0.0 });
    let svd = m.svd(false, true);
    let v_t = svd.v_t.expect("requested");
    let mut idx = [0usize, 1, 2];
    idx.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let smax = svd.singular_values.max();
    let scale = points.iter().map(|p| p.amax()).fold(1.0, f64::max);
    let tol = 1e-9 * smax.max(1e-9 * scale);
    let dim = if smax <= 1e-12 * scale {
        0
    } else {
        idx.iter().filter(|&&i| svd.singular_values[i] > tol).count()
    };
    let basis = idx.map(|i| Vector3::new(v_t[(i, 0)], v_t[(i, 1)], v_t[(i, 2)]));
    (dim, basis, centroid)
}

fn spans_plane(points: &[Vector3<f64>], scale: f64) -> bool {
    if points.len() < 3 {
        return false;
    }
    let p0 = points[0];
    let Some(p1) = points.iter().copied().max_by(|a, b| (a - p0).norm().total_cmp(&(b - p0).norm())) else {
        return false;
    };
    let e = p1 - p0;
    if e.norm() <= GEOM_TOL * scale {
        return false;
    }
    let area = points.iter().map(|p| e.cross(&(p - p0)).norm()).fold(0.0, f64::max);
    area > GEOM_TOL * scale * e.norm()
}

/// Counter-clockwise hull indices (Andrew's monotone chain).
fn convex_hull_2d(pts: &[(f64, f64)]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..pts.len()).collect();
    idx.sort_by(|&a, &b| pts[a].0.total_cmp(&pts[b].0).then(pts[a].1.total_cmp(&pts[b].1)));
    if idx.len() < 3 {
        return idx;
    }
    let cross = |o: usize, a: usize, b: usize| {
        (pts[a].0 - pts[o].0) * (pts[b].1 - pts[o].1) - (pts[a].1 - pts[o].1) * (pts[b].0 - pts[o].0)
    };
    let scale = pts.iter().map(|p| p.0.abs().max(p.1.abs())).fold(1.0, f64::max);
    let eps = 1e-12 * scale * scale;
    let mut lower: Vec<usize> = Vec::new();
    for &i in &idx {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], i) <= eps {
            lower.pop();
        }
        lower.push(i);
    }
    let mut upper: Vec<usize> = Vec::new();
    for &i in idx.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], i) <= eps {
            upper.pop();
        }
        upper.push(i);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Vertices of `{x : eq rows hold, ineq rows hold}` (assumed bounded).
fn enumerate_vertices(ineq: &[Halfspace], eq: &[Halfspace]) -> Vec<Vector3<f64>> {
    // Particular solution and null space of the equality rows.
    let (x0, null) = if eq.is_empty() {
        (Vector3::zeros(), DMatrix::identity(3, 3))
    } else {
        let e = DMatrix::from_fn(eq.len(), 3, |i, j| eq[i].normal[j]);
        let f = DVector::from_iterator(eq.len(), eq.iter().map(|h| h.offset));
        let svd = e.clone().svd(true, true);
        let Ok(sol) = svd.solve(&f, 1e-9) else {
            return Vec::new();
        };
        if (&e * &sol - &f).amax() > 1e-7 * (1.0 + f.amax()) {
            return Vec::new();
        }
        let x0 = Vector3::new(sol[0], sol[1], sol[2]);
        // Unit rows, so EᵀE has eigenvalues in [0, k]; its kernel is E's.
        let gram = e.transpose() * &e;
        let eig = nalgebra::SymmetricEigen::new(gram);
        let cols: Vec<DVector<f64>> = (0..3)
            .filter(|&i| eig.eigenvalues[i] <= 1e-9)
            .map(|i| eig.eigenvectors.column(i).into_owned())
            .collect();
        let mut n = DMatrix::zeros(3, cols.len());
        for (j, c) in cols.iter().enumerate() {
            n.set_column(j, c);
        }
        (x0, n)
    };
    let d = null.ncols();
    let lift = |z: &DVector<f64>| -> Vector3<f64> {
        let v = &null * z;
        x0 + Vector3::new(v[0], v[1], v[2])
    };

    // Inequalities in the reduced coordinates.
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    for h in ineq {
        let a = null.transpose() * DVector::from_column_slice(&h.normal);
        let b = h.offset - h.value(&x0);
        if a.norm() <= 1e-12 {
            if b < -MEMBER_TOL * (1.0 + h.offset.abs()) {
                return Vec::new();
            }
            continue;
        }
        rows.push((a, b));
    }
    let feasible = |z: &DVector<f64>| {
        rows.iter()
            .all(|(a, b)| a.dot(z) <= b + MEMBER_TOL * (1.0 + b.abs()).max(1.0) * 10.0)
    };

    if d == 0 {
        let z = DVector::zeros(0);
        return if feasible(&z) { vec![x0] } else { Vec::new() };
    }

    let mut out: Vec<Vector3<f64>> = Vec::new();
    let m = rows.len();
    let mut combo: Vec<usize> = (0..d).collect();
    if m < d {
        return out;
    }
    loop {
        let a = DMatrix::from_fn(d, d, |i, j| rows[combo[i]].0[j]);
        let b = DVector::from_iterator(d, combo.iter().map(|&i| rows[i].1));
        if let Some(lu) = Some(a.full_piv_lu()).filter(|lu| lu.is_invertible()) {
            if let Some(z) = lu.solve(&b) {
                if z.iter().all(|v| v.is_finite()) && feasible(&z) {
                    let x = lift(&z);
                    let scale = x.amax().max(1.0);
                    if !out.iter().any(|q| (q - x).amax() <= GEOM_TOL * scale) {
                        out.push(x);
                    }
                }
            }
        }
        // Next combination.
        let mut i = d;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if combo[i] < m - d + i {
                combo[i] += 1;
                for j in i + 1..d {
                    combo[j] = combo[j - 1] + 1;
                }
                break;
            }
        }
    }
}

/// `S ⊕ {t·direction : t ∈ [lo, hi]}`.
pub fn minkowski_sum_segment(s: &Polytope, direction: Vector3<f64>, lo: f64, hi: f64) -> Result<Polytope> {
    if !(lo <= hi) {
        return Err(Error::InvalidArgument(format!("segment [{lo}, {hi}] is empty")));
    }
    let v = s.vertices();
    if v.is_empty() {
        return Err(Error::InvalidArgument("Minkowski sum of an empty set".into()));
    }
    let mut pts = Vec::with_capacity(2 * v.len());
    for p in v {
        pts.push(p + direction * lo);
        pts.push(p + direction * hi);
    }
    let full = affine_basis(v).0 == 3;
    if !full {
        return Ok(Polytope::from_points(&pts, &[]));
    }
    // Facets of the sum are translated facets of S, or planes containing
    // the segment direction and an edge of S.
    let mut cands: Vec<Vector3<f64>> = s.halfspaces.iter().map(|h| h.n()).collect();
    for i in 0..v.len() {
        for j in i + 1..v.len() {
            let n = (v[j] - v[i]).cross(&direction);
            cands.push(n);
            cands.push(-n);
        }
    }
    Ok(Polytope::from_points(&pts, &cands))
}

/// `{x : A x ∈ S}`.
pub fn preimage_linear(s: &Polytope, a: &Matrix3<f64>) -> Polytope {
    if s.empty {
        return Polytope::empty();
    }
    let map = |h: &Halfspace| Halfspace::new(a.transpose() * h.n(), h.offset);
    Polytope::new(s.halfspaces.iter().map(map).collect(), s.equalities.iter().map(map).collect())
}

/// States from which one admissible input reaches `S`:
/// `{x : ∃γ ∈ [γ_min, γ_max], A x + B γ ∈ S}`.
pub fn pre_set(s: &Polytope, a: &Matrix3<f64>, b: &Vector3<f64>, inputs: InputInterval) -> Result<Polytope> {
    if s.is_empty() {
        return Ok(Polytope::empty());
    }
    let swept = minkowski_sum_segment(s, -b, inputs.gamma_min, inputs.gamma_max)?;
    Ok(preimage_linear(&swept, a).reduce())
}

#[derive(Debug, Clone)]
pub struct ControllableSet {
    pub set: Polytope,
    /// Step at which the recursion produced an empty set.
    pub empty_at: Option<usize>,
}

/// `κ_0 = target`, `κ_j = Pre(κ_{j−1}) ∩ χ_b`.
pub fn controllable_set(
    target: &Polytope,
    steps: usize,
    a: &Matrix3<f64>,
    b: &Vector3<f64>,
    inputs: InputInterval,
    state_box: &Polytope,
) -> Result<ControllableSet> {
    let mut k = target.clone();
    if k.is_empty() {
        return Ok(ControllableSet {
            set: Polytope::empty(),
            empty_at: Some(0),
        });
    }
    for j in 1..=steps {
        k = pre_set(&k, a, b, inputs)?.intersect(state_box);
        if k.is_empty() {
            return Ok(ControllableSet {
                set: Polytope::empty(),
                empty_at: Some(j),
            });
        }
    }
    Ok(ControllableSet {
        set: k,
        empty_at: None,
    })
}

/// Largest set inside `constraints` that stays inside under `x⁺ = A x`.
pub fn invariant_set(a: &Matrix3<f64>, constraints: &Polytope, max_iter: usize) -> Result<Polytope> {
    let mut omega = constraints.reduce();
    for _ in 0..max_iter {
        let next = preimage_linear(&omega, a);
        let verts = omega.vertices();
        if verts.iter().all(|v| next.contains(v)) {
            return Ok(omega);
        }
        omega = omega.intersect(&next);
        if omega.is_empty() {
            return Ok(omega);
        }
    }
    Err(Error::InvalidArgument(format!(
        "invariant set recursion did not converge in {max_iter} iterations"
    )))
}

/// Maximal positively invariant set of `x⁺ = (A + B K) x` inside the state
/// box of `bounds` with the feedback `γ = K x` inside the input range.
pub fn feedback_invariant_set(bounds: &SetBounds, k: [f64; 3], t: f64, max_iter: usize) -> Result<Polytope> {
    let (a, b, _) = crate::longitudinal::system_matrices(t);
    let kv = Vector3::from(k);
    let closed = a + b * kv.transpose();
    let mut rows = bounds.state_box().halfspaces;
    rows.push(Halfspace::new(kv, bounds.gamma_max));
    rows.push(Halfspace::new(-kv, -bounds.gamma_min));
    invariant_set(&closed, &Polytope::new(rows, Vec::new()), max_iter)
}

/// Terminal constraint designs compared by the feasible-set report.
#[derive(Debug, Clone)]
pub enum TerminalSet {
    /// `x_N = 0`.
    ZeroTerminal,
    /// A caller-supplied invariant set.
    InvariantSet(Polytope),
    /// `Δv_N = 0`, `a_N = 0` with free `Δd_N` (constant-speed leader).
    ProposedConstantSpeedLeader,
}

impl TerminalSet {
    pub fn name(&self) -> &'static str {
        match self {
            TerminalSet::ZeroTerminal => "zero",
            TerminalSet::InvariantSet(_) => "invariant",
            TerminalSet::ProposedConstantSpeedLeader => "proposed",
        }
    }
}

/// State box and input range of a feasible-set comparison.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SetBounds {
    pub lo: [f64; 3],
    pub hi: [f64; 3],
    pub gamma_min: f64,
    pub gamma_max: f64,
}

impl Default for SetBounds {
    /// `Δd ∈ [−30, 30]`, `Δv ∈ [−3, 3]`, `a ∈ [−3, 3]`, `γ ∈ [−5, 5]`.
    fn default() -> Self {
        Self {
            lo: [-30.0, -3.0, -3.0],
            hi: [30.0, 3.0, 3.0],
            gamma_min: -5.0,
            gamma_max: 5.0,
        }
    }
}

impl SetBounds {
    pub fn state_box(&self) -> Polytope {
        Polytope::from_box(self.lo, self.hi)
    }

    pub fn inputs(&self) -> InputInterval {
        InputInterval {
            gamma_min: self.gamma_min,
            gamma_max: self.gamma_max,
        }
    }

    pub fn box_volume(&self) -> f64 {
        (0..3).map(|i| self.hi[i] - self.lo[i]).product()
    }
}

pub fn terminal_set_variant(kind: &TerminalSet, bounds: &SetBounds) -> Polytope {
    match kind {
        TerminalSet::ZeroTerminal => Polytope::point(Vector3::zeros()),
        TerminalSet::InvariantSet(p) => p.clone(),
        TerminalSet::ProposedConstantSpeedLeader => Polytope::hull(&[
            Vector3::new(bounds.lo[0], 0.0, 0.0),
            Vector3::new(bounds.hi[0], 0.0, 0.0),
        ]),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct VolumeEstimate {
    pub volume: f64,
    /// Half-width of the 95 % binomial confidence interval.
    pub half_width: f64,
    pub samples: usize,
    pub hits: usize,
}

/// Monte Carlo volume of `set` inside `bounds`' state box. Chunks draw from
/// independent ChaCha8 streams of `seed`, so the estimate does not depend on
/// thread count.
pub fn estimate_volume(set: &Polytope, bounds: &SetBounds, samples: usize, seed: u64) -> (VolumeEstimate, Vec<[f64; 3]>) {
    const CHUNK: usize = 1 << 14;
    const CLOUD: usize = 20_000;
    let chunks = samples.div_ceil(CHUNK);
    let per_chunk: Vec<(usize, Vec<[f64; 3]>)> = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(c as u64);
            let n = CHUNK.min(samples - c * CHUNK);
            let mut hits = 0;
            let mut cloud = Vec::new();
            for _ in 0..n {
                let x = Vector3::new(
                    rng.random_range(bounds.lo[0]..bounds.hi[0]),
                    rng.random_range(bounds.lo[1]..bounds.hi[1]),
                    rng.random_range(bounds.lo[2]..bounds.hi[2]),
                );
                if set.contains(&x) {
                    hits += 1;
                    if cloud.len() < CLOUD / chunks.max(1) + 1 {
                        cloud.push([x[0], x[1], x[2]]);
                    }
                }
            }
            (hits, cloud)
        })
        .collect();
    let hits: usize = per_chunk.iter().map(|c| c.0).sum();
    let cloud = per_chunk.into_iter().flat_map(|c| c.1).collect();
    let p = hits as f64 / samples.max(1) as f64;
    let vol = bounds.box_volume();
    let half_width = 1.96 * (p * (1.0 - p) / samples.max(1) as f64).sqrt() * vol;
    (
        VolumeEstimate {
            volume: p * vol,
            half_width,
            samples,
            hits,
        },
        cloud,
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct AxisExtent {
    pub min: f64,
    pub max: f64,
}

impl AxisExtent {
    pub fn span(&self) -> f64 {
        self.max - self.min
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FeasibleSetEntry {
    pub variant: String,
    pub halfspaces: Vec<Halfspace>,
    pub equalities: Vec<Halfspace>,
    /// Extents along Δd, Δv and a; `None` when the set is empty.
    pub extents: Option<[AxisExtent; 3]>,
    pub volume: VolumeEstimate,
    pub empty_at: Option<usize>,
    #[serde(skip)]
    pub set: Polytope,
    #[serde(skip)]
    pub cloud: Vec<[f64; 3]>,
}

/// Initial feasible sets `κ_N(χ_f)` of each terminal design with their
/// volumes and axis extents.
pub fn feasible_set_report(
    bounds: &SetBounds,
    horizon: usize,
    t: f64,
    variants: &[TerminalSet],
    samples: usize,
    seed: u64,
) -> Result<Vec<FeasibleSetEntry>> {
    if variants.is_empty() {
        return Err(Error::InvalidArgument("no terminal set variants requested".into()));
    }
    let (a, b, _) = crate::longitudinal::system_matrices(t);
    let state_box = bounds.state_box();
    variants
        .iter()
        .map(|v| {
            let target = terminal_set_variant(v, bounds);
            let k = controllable_set(&target, horizon, &a, &b, bounds.inputs(), &state_box)?;
            let (volume, cloud) = estimate_volume(&k.set, bounds, samples, seed);
            let extents = k.set.axis_extents().map(|e| e.map(|(min, max)| AxisExtent { min, max }));
            Ok(FeasibleSetEntry {
                variant: v.name().to_string(),
                halfspaces: k.set.halfspaces.clone(),
                equalities: k.set.equalities.clone(),
                extents,
                volume,
                empty_at: k.empty_at,
                set: k.set,
                cloud,
            })
        })
        .collect()
}

/// Exact one-step oracle: is there `γ ∈ [γ_min, γ_max]` with
/// `A x + B γ ∈ S`? Each row of `S` bounds `γ` to a half-line.
pub fn one_step_reachable(s: &Polytope, a: &Matrix3<f64>, b: &Vector3<f64>, inputs: InputInterval, x: &Vector3<f64>) -> bool {
    let ax = a * x;
    let (mut lo, mut hi) = (inputs.gamma_min, inputs.gamma_max);
    for h in &s.halfspaces {
        let cb = h.n().dot(b);
        let rest = h.offset - h.n().dot(&ax);
        if cb.abs() < 1e-14 {
            if rest < -MEMBER_TOL * (1.0 + h.offset.abs()) {
                return false;
            }
        } else if cb > 0.0 {
            hi = hi.min(rest / cb);
        } else {
            lo = lo.max(rest / cb);
        }
    }
    for h in &s.equalities {
        let cb = h.n().dot(b);
        let rest = h.offset - h.n().dot(&ax);
        if cb.abs() < 1e-14 {
            if rest.abs() > MEMBER_TOL * (1.0 + h.offset.abs()) {
                return false;
            }
        } else {
            lo = lo.max(rest / cb);
            hi = hi.min(rest / cb);
        }
    }
    lo <= hi + 1e-9
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit_cube() -> Polytope {
        Polytope::from_box([0.0; 3], [1.0; 3])
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_vec(r: &mut ChaCha8Rng, s: f64) -> Vector3<f64> {
        Vector3::new(r.random_range(-s..s), r.random_range(-s..s), r.random_range(-s..s))
    }

    #[test]
    fn cube_has_eight_vertices() {
        let c = unit_cube();
        assert_eq!(c.vertices().len(), 8);
        assert_eq!(c.dimension(), Some(3));
    }

    #[test]
    fn hull_of_cube_points_recovers_six_facets() {
        let h = Polytope::hull(unit_cube().vertices());
        assert_eq!(h.halfspaces.len(), 6);
        assert!(h.contains(&Vector3::new(0.5, 0.5, 0.5)));
        assert!(!h.contains(&Vector3::new(1.1, 0.5, 0.5)));
    }

    #[test]
    fn degenerate_hulls() {
        let p = Polytope::point(Vector3::new(1.0, 2.0, 3.0));
        assert_eq!(p.dimension(), Some(0));
        assert!(p.contains(&Vector3::new(1.0, 2.0, 3.0)));
        let s = Polytope::hull(&[Vector3::zeros(), Vector3::new(1.0, 1.0, 0.0)]);
        assert_eq!(s.dimension(), Some(1));
        assert!(s.contains(&Vector3::new(0.5, 0.5, 0.0)));
        assert!(!s.contains(&Vector3::new(0.5, 0.4, 0.0)));
        let sq = Polytope::hull(&[
            Vector3::zeros(),
            Vector3::new(1.0, 0.0, 0.0),
            Vector3::new(0.0, 1.0, 0.0),
            Vector3::new(1.0, 1.0, 0.0),
        ]);
        assert_eq!(sq.dimension(), Some(2));
        assert_eq!(sq.vertices().len(), 4);
        assert!(!sq.contains(&Vector3::new(0.5, 0.5, 0.1)));
    }

    #[test]
    fn zero_length_segment_is_identity() {
        let c = unit_cube();
        let s = minkowski_sum_segment(&c, Vector3::z(), 0.0, 0.0).unwrap();
        assert_eq!(s.halfspaces.len(), 6);
        let mut r = rng(1);
        for _ in 0..1000 {
            let x = rand_vec(&mut r, 1.5);
            assert_eq!(s.contains(&x), c.contains(&x));
        }
    }

    #[test]
    fn axis_segment_stretches_box() {
        let s = minkowski_sum_segment(&unit_cube(), Vector3::z(), 0.0, 1.0).unwrap();
        let e = s.axis_extents().unwrap();
        assert_eq!(e[2], (0.0, 2.0));
        assert_eq!(e[0], (0.0, 1.0));
    }

    #[test]
    fn minkowski_membership_matches_interval_oracle() {
        let mut r = rng(2);
        let pts: Vec<_> = (0..12).map(|_| rand_vec(&mut r, 1.0)).collect();
        let s = Polytope::hull(&pts);
        let d = Vector3::new(0.3, -0.2, 0.9);
        let sum = minkowski_sum_segment(&s, d, -0.5, 1.0).unwrap();
        for _ in 0..5000 {
            let x = rand_vec(&mut r, 2.0);
            // x ∈ S ⊕ seg ⟺ some t ∈ [lo, hi] has x − t d ∈ S.
            let (mut lo, mut hi) = (-0.5f64, 1.0f64);
            for h in &s.halfspaces {
                let cd = -h.n().dot(&d);
                let rest = h.offset - h.n().dot(&x);
                if cd > 0.0 {
                    hi = hi.min(rest / cd);
                } else if cd < 0.0 {
                    lo = lo.max(rest / cd);
                } else if rest < 0.0 {
                    hi = f64::NEG_INFINITY;
                }
            }
            let oracle = lo <= hi;
            let margin = (hi - lo).abs();
            if margin > 1e-6 {
                assert_eq!(sum.contains(&x), oracle, "x = {x:?}");
            }
        }
    }

    #[test]
    fn preimage_examples() {
        let c = Polytope::from_box([-1.0; 3], [1.0; 3]);
        let same = preimage_linear(&c, &Matrix3::identity());
        assert_eq!(same.halfspaces, c.halfspaces);
        let half = preimage_linear(&c, &(Matrix3::identity() * 2.0));
        let e = half.axis_extents().unwrap();
        for (lo, hi) in e {
            assert_abs_diff_eq!(lo, -0.5, epsilon = 1e-12);
            assert_abs_diff_eq!(hi, 0.5, epsilon = 1e-12);
        }
        let mut r = rng(3);
        let a = Matrix3::from_fn(|_, _| r.random_range(-1.0..1.0)) + Matrix3::identity() * 2.0;
        let pre = preimage_linear(&c, &a);
        for _ in 0..2000 {
            let x = rand_vec(&mut r, 1.0);
            assert_eq!(pre.contains(&x), c.contains(&(a * x)));
        }
    }

    #[test]
    fn pre_set_of_origin_is_a_segment() {
        let (a, b, _) = crate::longitudinal::system_matrices(0.1);
        let u = InputInterval::new(-5.0, 5.0).unwrap();
        let p = pre_set(&Polytope::point(Vector3::zeros()), &a, &b, u).unwrap();
        assert_eq!(p.dimension(), Some(1));
        // x = −A⁻¹Bγ reaches the origin; A⁻¹B = (−T³, T², T).
        assert!(p.contains(&Vector3::new(-0.005, 0.05, 0.5)));
        assert!(!p.contains(&Vector3::new(-0.006, 0.06, 0.6)));
        assert!(!p.contains(&Vector3::new(0.0, 0.0, 0.5)));
    }

    #[test]
    fn pre_set_contains_preimage_of_box() {
        let (a, b, _) = crate::longitudinal::system_matrices(0.1);
        let u = InputInterval::new(-5.0, 5.0).unwrap();
        let bx = SetBounds::default().state_box();
        let pre = pre_set(&bx, &a, &b, u).unwrap();
        let plain = preimage_linear(&bx, &a);
        let mut r = rng(4);
        for _ in 0..2000 {
            let x = rand_vec(&mut r, 30.0);
            if plain.contains(&x) {
                assert!(pre.contains(&x));
            }
        }
    }

    #[test]
    fn zero_steps_returns_target() {
        let (a, b, _) = crate::longitudinal::system_matrices(0.1);
        let bounds = SetBounds::default();
        let t = unit_cube();
        let k = controllable_set(&t, 0, &a, &b, bounds.inputs(), &bounds.state_box()).unwrap();
        assert_eq!(k.set.halfspaces, t.halfspaces);
    }

    #[test]
    fn redundancy_reduction_keeps_membership() {
        let mut rows = unit_cube().halfspaces.clone();
        rows.push(Halfspace::new(Vector3::new(1.0, 1.0, 1.0), 5.0));
        rows.push(Halfspace::new(Vector3::x(), 2.0));
        let p = Polytope::new(rows, Vec::new());
        let q = p.reduce();
        assert_eq!(q.halfspaces.len(), 6);
        let mut r = rng(5);
        for _ in 0..2000 {
            let x = rand_vec(&mut r, 1.5);
            assert_eq!(p.contains(&x), q.contains(&x));
        }
    }

    #[test]
    fn empty_propagates() {
        let e = Polytope::empty();
        assert!(e.is_empty());
        let (a, b, _) = crate::longitudinal::system_matrices(0.1);
        let u = InputInterval::new(-1.0, 1.0).unwrap();
        assert!(pre_set(&e, &a, &b, u).unwrap().is_empty());
        assert!(preimage_linear(&e, &a).is_empty());
        let disjoint = unit_cube().intersect(&Polytope::from_box([2.0; 3], [3.0; 3]));
        assert!(disjoint.is_empty());
    }

    #[test]
    fn proposed_terminal_contains_zero_terminal() {
        let b = SetBounds::default();
        let z = terminal_set_variant(&TerminalSet::ZeroTerminal, &b);
        let p = terminal_set_variant(&TerminalSet::ProposedConstantSpeedLeader, &b);
        assert_eq!(z.vertices().len(), 1);
        assert_eq!(p.dimension(), Some(1));
        assert!(p.contains(&Vector3::zeros()));
        assert!(p.contains(&Vector3::new(-30.0, 0.0, 0.0)));
        assert!(!z.contains(&Vector3::new(1.0, 0.0, 0.0)));
    }
}
