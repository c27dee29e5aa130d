use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slam_mhe::models::{
    dynamics_jacobian_noise, dynamics_jacobian_state, dynamics_step, landmark_measurement_jacobians,
    predict_landmark, ControlInput, EgoState, LandmarkState, ProcessNoise, SensorKind,
};

const H: f64 = 1e-6;
const TOL: f64 = 1e-6;

fn random_point(rng: &mut ChaCha8Rng) -> (EgoState, ControlInput, LandmarkState) {
    let x = EgoState::new(
        rng.random_range(-5.0..5.0),
        rng.random_range(-5.0..5.0),
        rng.random_range(-3.0..3.0),
    );
    let u = ControlInput::new(rng.random_range(-1.0..1.0), rng.random_range(-0.5..0.5));
    // keep the landmark away from the degenerate bearing point
    let r = rng.random_range(0.5..4.0);
    let a: f64 = rng.random_range(-3.2..3.2);
    let l = LandmarkState::new(x.px + r * a.cos(), x.py + r * a.sin());
    (x, u, l)
}

fn fd_dynamics_state(x: &EgoState, u: &ControlInput) -> Matrix3<f64> {
    let f = |v: Vector3<f64>| {
        // unwrapped heading so the difference quotient is well defined
        let s = dynamics_step(&EgoState { px: v[0], py: v[1], theta: v[2] }, u, &ProcessNoise::default());
        Vector3::new(s.px, s.py, v[2] + u.v_ang)
    };
    let mut j = Matrix3::zeros();
    for c in 0..3 {
        let mut e = Vector3::zeros();
        e[c] = H;
        let col = (f(x.to_vector() + e) - f(x.to_vector() - e)) / (2.0 * H);
        j.set_column(c, &col);
    }
    j
}

fn fd_measurement(x: &EgoState, l: &LandmarkState, kind: SensorKind) -> (Matrix2x3<f64>, Matrix2<f64>) {
    let h = |x: &EgoState, l: &LandmarkState| predict_landmark(x, l, kind).unwrap();
    let mut je = Matrix2x3::zeros();
    for c in 0..3 {
        let mut e = Vector3::zeros();
        e[c] = H;
        let xp = EgoState { px: x.px + e[0], py: x.py + e[1], theta: x.theta + e[2] };
        let xm = EgoState { px: x.px - e[0], py: x.py - e[1], theta: x.theta - e[2] };
        je.set_column(c, &((h(&xp, l) - h(&xm, l)) / (2.0 * H)));
    }
    let mut jl = Matrix2::zeros();
    for c in 0..2 {
        let mut e = Vector2::zeros();
        e[c] = H;
        let lp = LandmarkState::from_vector(&(l.to_vector() + e));
        let lm = LandmarkState::from_vector(&(l.to_vector() - e));
        jl.set_column(c, &((h(x, &lp) - h(x, &lm)) / (2.0 * H)));
    }
    (je, jl)
}

#[test]
fn dynamics_state_jacobian_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..100 {
        let (x, u, _) = random_point(&mut rng);
        let err = (dynamics_jacobian_state(&x, &u) - fd_dynamics_state(&x, &u)).amax();
        assert!(err <= TOL, "err {err} at {x:?} {u:?}");
    }
}

#[test]
fn dynamics_noise_jacobian_is_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let (x, u, _) = random_point(&mut rng);
        let mut j = Matrix3::zeros();
        for c in 0..3 {
            let mut e = Vector3::zeros();
            e[c] = H;
            let p = dynamics_step(&x, &u, &ProcessNoise::from_vector(&e));
            let m = dynamics_step(&x, &u, &ProcessNoise::from_vector(&-e));
            j.set_column(c, &(p.difference(&m) / (2.0 * H)));
        }
        assert!((j - dynamics_jacobian_noise()).amax() <= TOL);
    }
}

#[test]
fn landmark_jacobians_match_finite_differences() {
    for (seed, kind) in [(12, SensorKind::BearingOnly), (13, SensorKind::Range)] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..100 {
            let (x, _, l) = random_point(&mut rng);
            let j = landmark_measurement_jacobians(&x, &l, kind).unwrap();
            let (je, jl) = fd_measurement(&x, &l, kind);
            let err = (j.wrt_ego - je).amax().max((j.wrt_landmark - jl).amax());
            assert!(err <= TOL, "{kind:?}: err {err} at {x:?} {l:?}");
        }
    }
}

#[test]
fn bearing_jacobian_fails_at_degenerate_point() {
    let x = EgoState::new(1.0, 2.0, 0.3);
    let l = LandmarkState::new(1.0, 2.0);
    assert!(landmark_measurement_jacobians(&x, &l, SensorKind::BearingOnly).is_err());
    assert!(landmark_measurement_jacobians(&x, &l, SensorKind::Range).is_ok());
}

proptest! {
    #[test]
    fn bearing_jacobian_annihilates_the_ray(
        px in -5.0..5.0f64, py in -5.0..5.0f64, th in -3.0..3.0f64,
        r in 0.2..5.0f64, a in -3.2..3.2f64,
    ) {
        // moving the landmark along the line of sight leaves the bearing unchanged
        let x = EgoState::new(px, py, th);
        let ray = Vector2::new(a.cos(), a.sin());
        let l = LandmarkState::from_vector(&(x.position() + r * ray));
        let j = landmark_measurement_jacobians(&x, &l, SensorKind::BearingOnly).unwrap();
        prop_assert!((j.wrt_landmark * ray).norm() < 1e-12);
        prop_assert!((j.wrt_ego.fixed_columns::<2>(0) + j.wrt_landmark).amax() < 1e-12);
    }
}
