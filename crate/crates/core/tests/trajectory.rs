//! Kinematic projection contract and trajectory file round trips.

use std::f64::consts::PI;

use dynacq::trajectory::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-7;
const ITERS: usize = 200_000;

fn desk_bounds() -> KinematicBounds {
    kinematic_bounds(&PhysicsConfig::default()).unwrap()
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Velocity and acceleration norms computed directly from the samples.
fn kinematics(c: &[f64]) -> (f64, f64) {
    let m = c.len() / 2;
    let p = |i: usize| (c[2 * i], c[2 * i + 1]);
    let mut v: f64 = 0.0;
    let mut a: f64 = 0.0;
    for i in 1..m {
        let (x1, y1) = p(i);
        let (x0, y0) = p(i - 1);
        v = v.max((x1 - x0).hypot(y1 - y0));
        if i + 1 < m {
            let (x2, y2) = p(i + 1);
            a = a.max((x2 - 2.0 * x1 + x0).hypot(y2 - 2.0 * y1 + y0));
        }
    }
    (v, a)
}

#[test]
fn desk_scale_bounds() {
    let b = desk_bounds();
    // 2 pi gamma G dt fov / H and 2 pi gamma S dt^2 fov / H on a 32 grid
    let alpha = 2.0 * PI * 42.576e6 * 40e-3 * 1e-5 * 0.2 / 32.0;
    let beta = 2.0 * PI * 42.576e6 * 200.0 * 1e-10 * 0.2 / 32.0;
    assert!((b.alpha - alpha).abs() < 1e-15 && (b.beta - beta).abs() < 1e-15);
    assert!((b.alpha - 0.6688).abs() < 1e-3);
}

#[test]
fn random_curves_become_feasible_and_stay_put() {
    let b = desk_bounds();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let raw: Vec<f64> = (0..4 * 2 * 32 * 2).map(|_| rng.gen_range(-PI..PI)).collect();
    let k = Trajectory::from_coords(4, 2, 32, raw, true).unwrap();
    let p = project_kinematic(&k, &b, TOL, ITERS).unwrap();
    let (v, a) = feasibility_report(&p, &b);
    assert!(v <= 1e-6 && a <= 1e-6, "violations {} {}", v, a);
    for f in 0..4 {
        for s in 0..2 {
            let (vv, aa) = kinematics(p.shot(f, s));
            assert!(vv <= b.alpha + 1e-6 && aa <= b.beta + 1e-6);
        }
    }
    assert!(p.coords().iter().all(|c| c.abs() <= PI));
    let again = project_kinematic(&p, &b, TOL, ITERS).unwrap();
    assert!(max_diff(p.coords(), again.coords()) < 1e-9);
}

#[test]
fn feasible_input_is_a_fixed_point() {
    let b = desk_bounds();
    let k = init_radial(2, 4, 64, DEFAULT_SPAN).unwrap();
    let (v, a) = feasibility_report(&k, &b);
    assert!(v <= 0.0 && a <= 0.0);
    let p = project_kinematic(&k, &b, TOL, ITERS).unwrap();
    assert!(max_diff(k.coords(), p.coords()) < 1e-9);
}

#[test]
fn projection_is_nearest_on_a_simple_case() {
    // two points further apart than alpha, no curvature: split the excess symmetrically
    let b = KinematicBounds { alpha: 0.5, beta: 10.0 };
    let out = project_coords(&[-1.0, 0.0, 1.0, 0.0], 2, &b, 1e-10, ITERS).unwrap();
    assert!((out[0] + 0.25).abs() < 1e-8 && (out[2] - 0.25).abs() < 1e-8, "{:?}", out);
    assert!(out[1].abs() < 1e-8 && out[3].abs() < 1e-8);
}

#[test]
fn out_of_box_input_is_clipped_inside() {
    let b = desk_bounds();
    let out = project_coords(&[4.0, 0.0, 4.2, 0.1], 2, &b, TOL, ITERS).unwrap();
    assert!(out.iter().all(|v| v.abs() <= PI + 1e-12));
}

#[test]
fn projection_rejects_bad_input() {
    let b = desk_bounds();
    assert!(project_coords(&[0.0; 6], 2, &b, TOL, ITERS).is_err());
    assert!(project_coords(&[f64::NAN, 0.0, 0.0, 0.0], 2, &b, TOL, ITERS).is_err());
    assert!(project_coords(&[0.0; 4], 2, &b, 0.0, ITERS).is_err());
    let bad = KinematicBounds { alpha: -1.0, beta: 1.0 };
    assert!(project_coords(&[0.0; 4], 2, &bad, TOL, ITERS).is_err());
}

#[test]
fn file_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let raw: Vec<f64> = (0..8 * 3 * 5 * 2).map(|_| rng.gen_range(-PI..PI)).collect();
    let k = Trajectory::from_coords(8, 3, 5, raw, true).unwrap();
    let b = desk_bounds();
    export_trajectory(&k, Some(&b), dir.path()).unwrap();
    let (back, header) = import_trajectory(dir.path()).unwrap();
    assert_eq!(back, k);
    assert_eq!(header.bounds, Some(b));
    let csv = std::fs::read_to_string(dir.path().join("traj.csv")).unwrap();
    let frames: std::collections::BTreeSet<&str> =
        csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(frames.len(), 8);
}

#[test]
fn stacking_tiles_frames() {
    let k = init_golden_angle(4, 2, 8, DEFAULT_SPAN).unwrap();
    let s = stack_trajectories(&k, 10).unwrap();
    assert_eq!(s.frames(), 10);
    for t in 0..10 {
        assert_eq!(s.frame(t), k.frame(t % 4));
    }
    assert!(stack_trajectories(&k, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn projection_contract(seed in 0u64..10_000, points in 3usize..24, spread in 0.1f64..3.0) {
        let b = desk_bounds();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let raw: Vec<f64> = (0..points * 2).map(|_| rng.gen_range(-spread..spread)).collect();
        let p = project_coords(&raw, points, &b, TOL, ITERS).unwrap();
        let (v, a) = kinematics(&p);
        prop_assert!(v <= b.alpha + 1e-6 && a <= b.beta + 1e-6);
        let q = project_coords(&p, points, &b, TOL, ITERS).unwrap();
        prop_assert!(max_diff(&p, &q) < 1e-9);
    }
}
