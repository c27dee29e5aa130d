//! Planar robot dynamics, ego and landmark measurement models, the visibility
//! predicate and the analytic Jacobians consumed by the least-squares solvers.
//!
//! Conventions: the ego state is `(px, py, theta)`, landmarks are planar points,
//! and landmark measurements are expressed in the robot body frame
//! `R(-theta) (l - p) / alpha` where `alpha` is the distance for a bearing-only
//! sensor and `1` for a range sensor.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle to `(-pi, pi]`.
pub fn wrap_angle(angle: f64) -> f64 {
    let r = angle.rem_euclid(TAU);
    if r > PI {
        r - TAU
    } else {
        r
    }
}

/// Planar rotation matrix `R(phi)`.
pub fn rotation(phi: f64) -> Matrix2<f64> {
    let (s, c) = phi.sin_cos();
    Matrix2::new(c, -s, s, c)
}

/// Robot pose in the world frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EgoState {
    pub px: f64,
    pub py: f64,
    pub theta: f64,
}

impl EgoState {
    pub fn new(px: f64, py: f64, theta: f64) -> Self {
        Self {
            px,
            py,
            theta: wrap_angle(theta),
        }
    }

    pub fn position(&self) -> Vector2<f64> {
        Vector2::new(self.px, self.py)
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.px, self.py, self.theta)
    }

    /// Builds a state from a raw vector, wrapping the heading.
    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    /// Difference `self - other` with the heading component wrapped.
    pub fn difference(&self, other: &EgoState) -> Vector3<f64> {
        Vector3::new(
            self.px - other.px,
            self.py - other.py,
            wrap_angle(self.theta - other.theta),
        )
    }

    pub fn is_finite(&self) -> bool {
        self.px.is_finite() && self.py.is_finite() && self.theta.is_finite()
    }
}

/// Linear and angular velocity applied over one step.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlInput {
    pub v_lin: f64,
    pub v_ang: f64,
}

impl ControlInput {
    pub fn new(v_lin: f64, v_ang: f64) -> Self {
        Self { v_lin, v_ang }
    }
}

/// Additive process noise on position and heading.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ProcessNoise {
    pub v1: f64,
    pub v2: f64,
    pub v_theta: f64,
}

impl ProcessNoise {
    pub fn new(v1: f64, v2: f64, v_theta: f64) -> Self {
        Self { v1, v2, v_theta }
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.v1, self.v2, self.v_theta)
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

/// Static landmark position.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LandmarkState {
    pub px: f64,
    pub py: f64,
}

impl LandmarkState {
    pub fn new(px: f64, py: f64) -> Self {
        Self { px, py }
    }

    pub fn to_vector(&self) -> Vector2<f64> {
        Vector2::new(self.px, self.py)
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        Self::new(v[0], v[1])
    }

    pub fn distance(&self, other: &LandmarkState) -> f64 {
        (self.to_vector() - other.to_vector()).norm()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorKind {
    /// Unit direction vector to the landmark (monocular camera).
    BearingOnly,
    /// Relative position of the landmark (lidar, stereo camera).
    Range,
}

/// Landmark sensor: measurement model plus the visibility annulus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorModel {
    pub kind: SensorKind,
    pub r_min: f64,
    pub r_max: f64,
}

impl SensorModel {
    pub const DEFAULT_R_MIN: f64 = 1e-3;

    pub fn new(kind: SensorKind, r_min: f64, r_max: f64) -> Result<Self> {
        let model = Self { kind, r_min, r_max };
        model.validate()?;
        Ok(model)
    }

    /// Sensor with the default minimum range.
    pub fn with_range(kind: SensorKind, r_max: f64) -> Result<Self> {
        Self::new(kind, Self::DEFAULT_R_MIN, r_max)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.r_min.is_finite() && self.r_max.is_finite()) {
            return Err(Error::InvalidParam("sensor range must be finite".into()));
        }
        if self.r_min <= 0.0 || self.r_max <= self.r_min {
            return Err(Error::InvalidParam(format!(
                "sensor range requires 0 < r_min < r_max, got r_min={} r_max={}",
                self.r_min, self.r_max
            )));
        }
        Ok(())
    }
}

/// One step of the planar robot:
/// `p' = p + u1 (cos th, sin th) + (v1, v2)`, `th' = wrap(th + u2 + v_th)`.
pub fn dynamics_step(x: &EgoState, u: &ControlInput, v: &ProcessNoise) -> EgoState {
    let (s, c) = x.theta.sin_cos();
    EgoState {
        px: x.px + u.v_lin * c + v.v1,
        py: x.py + u.v_lin * s + v.v2,
        theta: wrap_angle(x.theta + u.v_ang + v.v_theta),
    }
}

/// Ego measurement `x + xi`. The heading is left unwrapped.
pub fn ego_measurement(x: &EgoState, xi: &Vector3<f64>) -> Vector3<f64> {
    x.to_vector() + xi
}

/// Landmark measurement in the body frame, without the visibility factor.
pub fn landmark_measurement(
    x: &EgoState,
    lm: &LandmarkState,
    xi: &Vector2<f64>,
    model: &SensorModel,
) -> Result<Vector2<f64>> {
    Ok(predict_landmark(x, lm, model.kind)? + xi)
}

/// Noise-free landmark measurement.
pub fn predict_landmark(x: &EgoState, lm: &LandmarkState, kind: SensorKind) -> Result<Vector2<f64>> {
    let d = lm.to_vector() - x.position();
    let n = d.norm();
    if !(n > 0.0) {
        return Err(Error::DegenerateGeometry);
    }
    let body = rotation(-x.theta) * d;
    Ok(match kind {
        SensorKind::BearingOnly => body / n,
        SensorKind::Range => body,
    })
}

/// `true` iff the landmark lies inside the sensing annulus `[r_min, r_max]`.
pub fn visibility(x: &EgoState, lm: &LandmarkState, model: &SensorModel) -> bool {
    let n = (lm.to_vector() - x.position()).norm();
    n >= model.r_min && n <= model.r_max
}

/// Partial derivative of the dynamics with respect to the state.
pub fn dynamics_jacobian_state(x: &EgoState, u: &ControlInput) -> Matrix3<f64> {
    let (s, c) = x.theta.sin_cos();
    Matrix3::new(
        1.0, 0.0, -u.v_lin * s, //
        0.0, 1.0, u.v_lin * c, //
        0.0, 0.0, 1.0,
    )
}

/// Partial derivative of the dynamics with respect to the process noise.
pub fn dynamics_jacobian_noise() -> Matrix3<f64> {
    Matrix3::identity()
}

/// Jacobians of the landmark measurement with respect to the ego state and the
/// landmark position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementJacobians {
    pub wrt_ego: Matrix2x3<f64>,
    pub wrt_landmark: Matrix2<f64>,
}

pub fn landmark_measurement_jacobians(
    x: &EgoState,
    lm: &LandmarkState,
    kind: SensorKind,
) -> Result<MeasurementJacobians> {
    let d = lm.to_vector() - x.position();
    let n = d.norm();
    if kind == SensorKind::BearingOnly && !(n > 0.0) {
        return Err(Error::DegenerateGeometry);
    }
    let (s, c) = x.theta.sin_cos();
    let rot = Matrix2::new(c, s, -s, c);
    // d/dtheta of R(-theta)
    let drot = Matrix2::new(-s, c, -c, -s);
    let (wrt_landmark, dtheta) = match kind {
        SensorKind::Range => (rot, drot * d),
        SensorKind::BearingOnly => {
            let u = d / n;
            let proj = (Matrix2::identity() - u * u.transpose()) / n;
            (rot * proj, drot * u)
        }
    };
    let wrt_pos = -wrt_landmark;
    let wrt_ego = Matrix2x3::new(
        wrt_pos[(0, 0)],
        wrt_pos[(0, 1)],
        dtheta[0],
        wrt_pos[(1, 0)],
        wrt_pos[(1, 1)],
        dtheta[1],
    );
    Ok(MeasurementJacobians {
        wrt_ego,
        wrt_landmark,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use std::f64::consts::FRAC_PI_2;

    fn range_sensor(r_min: f64, r_max: f64) -> SensorModel {
        SensorModel::new(SensorKind::Range, r_min, r_max).unwrap()
    }

    #[test]
    fn wrap_angle_half_open_interval() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert_relative_eq!(wrap_angle(3.0 * PI / 2.0), -FRAC_PI_2, epsilon = 1e-15);
        assert_relative_eq!(wrap_angle(0.1 + 4.0 * TAU), 0.1, epsilon = 1e-12);
    }

    #[test]
    fn dynamics_examples() {
        let x = dynamics_step(
            &EgoState::default(),
            &ControlInput::new(1.0, FRAC_PI_2),
            &ProcessNoise::default(),
        );
        assert_relative_eq!(x.px, 1.0);
        assert_relative_eq!(x.py, 0.0);
        assert_relative_eq!(x.theta, FRAC_PI_2);

        let x = dynamics_step(
            &EgoState::new(0.0, 0.0, PI),
            &ControlInput::new(2.0, 0.0),
            &ProcessNoise::default(),
        );
        assert_relative_eq!(x.px, -2.0);
        assert_relative_eq!(x.py, 0.0, epsilon = 1e-15);
        assert_relative_eq!(x.theta, PI);
    }

    #[test]
    fn ego_measurement_is_additive_and_unwrapped() {
        let y = ego_measurement(&EgoState::new(1.0, 2.0, 0.5), &Vector3::zeros());
        assert_eq!(y, Vector3::new(1.0, 2.0, 0.5));
        let y = ego_measurement(&EgoState::default(), &Vector3::new(0.01, -0.01, 0.0));
        assert_eq!(y, Vector3::new(0.01, -0.01, 0.0));
        let y = ego_measurement(&EgoState::new(1.0, 0.0, PI), &Vector3::new(0.0, 0.0, 0.1));
        assert_relative_eq!(y[2], PI + 0.1);
    }

    #[test]
    fn landmark_measurement_examples() {
        let sensor = range_sensor(0.001, 3.0);
        let y = landmark_measurement(
            &EgoState::default(),
            &LandmarkState::new(1.0, 0.0),
            &Vector2::zeros(),
            &sensor,
        )
        .unwrap();
        assert_relative_eq!(y, Vector2::new(1.0, 0.0));

        let bearing = SensorModel::new(SensorKind::BearingOnly, 0.001, 3.0).unwrap();
        let y = landmark_measurement(
            &EgoState::new(0.0, 0.0, FRAC_PI_2),
            &LandmarkState::new(0.0, 2.0),
            &Vector2::zeros(),
            &bearing,
        )
        .unwrap();
        assert_relative_eq!(y, Vector2::new(1.0, 0.0), epsilon = 1e-15);

        let err = landmark_measurement(
            &EgoState::new(1.0, 1.0, 0.0),
            &LandmarkState::new(1.0, 1.0),
            &Vector2::zeros(),
            &sensor,
        );
        assert!(matches!(err, Err(Error::DegenerateGeometry)));
        assert!(matches!(
            landmark_measurement_jacobians(
                &EgoState::new(1.0, 1.0, 0.0),
                &LandmarkState::new(1.0, 1.0),
                SensorKind::BearingOnly
            ),
            Err(Error::DegenerateGeometry)
        ));
    }

    #[test]
    fn visibility_examples() {
        let x = EgoState::default();
        assert!(visibility(&x, &LandmarkState::new(1.0, 0.0), &range_sensor(0.1, 2.0)));
        assert!(!visibility(&x, &LandmarkState::new(5.0, 0.0), &range_sensor(0.1, 2.0)));
        assert!(!visibility(&x, &LandmarkState::new(0.05, 0.0), &range_sensor(0.1, 2.0)));
    }

    #[test]
    fn sensor_validation() {
        assert!(SensorModel::new(SensorKind::Range, 0.0, 1.0).is_err());
        assert!(SensorModel::new(SensorKind::Range, 2.0, 1.0).is_err());
        assert!(SensorModel::with_range(SensorKind::BearingOnly, 2.0).is_ok());
    }

    #[test]
    fn state_jacobian_example() {
        let j = dynamics_jacobian_state(&EgoState::default(), &ControlInput::new(1.0, 0.3));
        assert_eq!(j, Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0));
        let jm = landmark_measurement_jacobians(
            &EgoState::default(),
            &LandmarkState::new(2.0, -1.0),
            SensorKind::Range,
        )
        .unwrap();
        assert_eq!(jm.wrt_landmark, Matrix2::identity());
    }

    proptest! {
        #[test]
        fn zero_input_is_identity(px in -10.0..10.0f64, py in -10.0..10.0f64, th in -3.0..3.0f64) {
            let x = EgoState::new(px, py, th);
            let y = dynamics_step(&x, &ControlInput::default(), &ProcessNoise::default());
            prop_assert_eq!(x, y);
        }

        #[test]
        fn measurements_are_rotation_equivariant(
            px in -5.0..5.0f64, py in -5.0..5.0f64, th in -3.0..3.0f64,
            lx in -5.0..5.0f64, ly in -5.0..5.0f64, phi in -3.0..3.0f64,
        ) {
            let x = EgoState::new(px, py, th);
            let lm = LandmarkState::new(lx, ly);
            prop_assume!((lm.to_vector() - x.position()).norm() > 1e-3);
            let r = rotation(phi);
            let p2 = r * x.position();
            let l2 = r * lm.to_vector();
            let x2 = EgoState::new(p2[0], p2[1], th + phi);
            let lm2 = LandmarkState::from_vector(&l2);
            for kind in [SensorKind::Range, SensorKind::BearingOnly] {
                let a = predict_landmark(&x, &lm, kind).unwrap();
                let b = predict_landmark(&x2, &lm2, kind).unwrap();
                prop_assert!((a - b).norm() < 1e-9);
            }
            let bearing = predict_landmark(&x, &lm, SensorKind::BearingOnly).unwrap();
            prop_assert!((bearing.norm() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn theta_always_wrapped(th in -100.0..100.0f64, u2 in -10.0..10.0f64) {
            let x = dynamics_step(&EgoState { px: 0.0, py: 0.0, theta: th }, &ControlInput::new(0.3, u2), &ProcessNoise::new(0.0, 0.0, 0.2));
            prop_assert!(x.theta > -PI && x.theta <= PI);
        }
    }
}
