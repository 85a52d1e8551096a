use merge_stack::lateral::{build_reference, solve_lat_mpc, wrap_angle, LatSettings, Pose};
use merge_stack::longitudinal::system_matrices;
use merge_stack::qp::{QpProblem, QpStatus};
use merge_stack::reachability::{one_step_reachable, pre_set, Polytope, SetBounds};
use merge_stack::scenario::{
    CavKinematics, DesiredSpacing, LatWeights, Limits, RoadGeometry, RoadSide, SequencerWeights,
};
use merge_stack::sequencer::{solve_by_enumeration, solve_fifo, solve_milp, SequencingProblem};
use nalgebra::{DMatrix, DVector, Vector3};
use proptest::prelude::*;

fn road(first: f64, gaps: &[f64], speeds: &[f64]) -> Vec<CavKinematics> {
    let mut z = first;
    gaps.iter()
        .zip(speeds)
        .map(|(g, &v)| {
            let k = CavKinematics::new(z, v, 0.0);
            z -= g;
            k
        })
        .collect()
}

fn instance() -> impl Strategy<Value = (Vec<CavKinematics>, Vec<CavKinematics>, f64)> {
    (0usize..=4, 0usize..=4, -60.0..0.0f64, -60.0..0.0f64, 10.0..30.0f64)
        .prop_filter("at least one vehicle", |t| t.0 + t.1 > 0)
        .prop_flat_map(|(m, r, fm, fr, d)| {
        (
            prop::collection::vec(5.0..50.0f64, m),
            prop::collection::vec(10.0..20.0f64, m),
            prop::collection::vec(5.0..50.0f64, r),
            prop::collection::vec(10.0..20.0f64, r),
        )
            .prop_map(move |(gm, vm, gr, vr)| (road(fm, &gm, &vm), road(fr, &gr, &vr), d))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn milp_matches_enumeration_and_keeps_road_order((main, ramp, d) in instance()) {
        let p = SequencingProblem::new(&main, &ramp, DesiredSpacing::uniform(d), SequencerWeights::default(), (400.0, 400.0)).unwrap();
        let milp = solve_milp(&p).unwrap();
        let brute = solve_by_enumeration(&p).unwrap();
        prop_assert_eq!(milp.objective, brute.objective);
        prop_assert!(milp.assignment.preserves_road_order(main.len()));
        let fifo = solve_fifo(&p).unwrap();
        prop_assert!(fifo.assignment.preserves_road_order(main.len()));
        prop_assert!(milp.objective <= fifo.objective);
    }

    #[test]
    fn qp_solutions_satisfy_kkt(seed in prop::collection::vec(-1.0..1.0f64, 4 * 4 + 4 + 6 * 4 + 6)) {
        let n = 4;
        let l = DMatrix::from_column_slice(n, n, &seed[..16]);
        let h = &l * l.transpose() + DMatrix::identity(n, n) * 0.1;
        let g = DVector::from_column_slice(&seed[16..20]);
        let a = DMatrix::from_column_slice(6, n, &seed[20..44]);
        // b ≥ 0 keeps the origin feasible.
        let b = DVector::from_iterator(6, seed[44..50].iter().map(|v| v.abs()));
        let p = QpProblem::new(h, g).with_inequalities(a, b);
        let sol = p.solve().unwrap();
        prop_assert_eq!(sol.status, QpStatus::Optimal);
        prop_assert!(sol.kkt_residual < 1e-8, "{}", sol.kkt_residual);
        prop_assert!(sol.dual_in.iter().all(|&z| z >= -1e-12));
    }

    #[test]
    fn precursor_set_matches_scalar_oracle(
        lo in (-20.0..0.0f64, -3.0..0.0f64, -3.0..0.0f64),
        size in (0.5..20.0f64, 0.1..3.0f64, 0.1..3.0f64),
        probes in prop::collection::vec((-40.0..40.0f64, -6.0..6.0f64, -8.0..8.0f64), 50),
    ) {
        let (a, b, _) = system_matrices(0.1);
        let bounds = SetBounds::default();
        let s = Polytope::from_box([lo.0, lo.1, lo.2], [lo.0 + size.0, lo.1 + size.1, lo.2 + size.2]);
        let pre = pre_set(&s, &a, &b, bounds.inputs()).unwrap();
        for (x, y, z) in probes {
            let p = Vector3::new(x, y, z);
            prop_assert_eq!(pre.contains(&p), one_step_reachable(&s, &a, &b, bounds.inputs(), &p));
        }
    }

    #[test]
    fn steering_plans_respect_limits(
        lateral in -1.0..1.0f64,
        heading in -0.3..0.3f64,
        z in -100.0..-5.0f64,
        prev in -0.8..0.8f64,
        speed in 5.0..25.0f64,
    ) {
        let geometry = RoadGeometry::default();
        let p = geometry.pose_at(RoadSide::Ramp, z);
        let pose = Pose::new(
            p.x - lateral * p.heading.sin(),
            p.y + lateral * p.heading.cos(),
            p.heading + heading,
        );
        let s = LatSettings { time_step: 0.1, weights: LatWeights::default(), limits: Limits::default(), wheelbase: 2.7 };
        let reference = build_reference(&geometry, RoadSide::Ramp, &pose, &[speed; 11], 0.1, 2.7).unwrap();
        let plan = solve_lat_mpc(&pose, &reference, prev, &s).unwrap();
        prop_assert!(!plan.degraded);
        let lim = &s.limits;
        let mut last = prev;
        for &d in &plan.delta_seq {
            prop_assert!(d >= lim.delta_min - 1e-9 && d <= lim.delta_max + 1e-9);
            prop_assert!(d - last >= lim.ddelta_min - 1e-9 && d - last <= lim.ddelta_max + 1e-9);
            last = d;
        }
    }

    #[test]
    fn wrapped_angles_stay_in_range(a in -100.0..100.0f64) {
        let w = wrap_angle(a);
        prop_assert!(w > -std::f64::consts::PI && w <= std::f64::consts::PI);
        prop_assert!(((a - w) / std::f64::consts::TAU - ((a - w) / std::f64::consts::TAU).round()).abs() < 1e-9);
    }
}
