//! Seeded forward simulation of the planar robot, its ego measurements and
//! its landmark measurements, plus the circular and corridor scenario builders.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{
    dynamics_step, ego_measurement, landmark_measurement, visibility, ControlInput, EgoState,
    LandmarkState, ProcessNoise, SensorKind, SensorModel,
};

/// Per-channel Gaussian noise standard deviations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub std_process: [f64; 3],
    pub std_ego_meas: [f64; 3],
    pub std_lm_meas: [f64; 2],
}

impl NoiseSpec {
    /// Same standard deviation on every channel.
    pub fn uniform(std: f64) -> Self {
        Self {
            std_process: [std; 3],
            std_ego_meas: [std; 3],
            std_lm_meas: [std; 2],
        }
    }

    pub fn zero() -> Self {
        Self::uniform(0.0)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            std_process: self.std_process.map(|s| s * factor),
            std_ego_meas: self.std_ego_meas.map(|s| s * factor),
            std_lm_meas: self.std_lm_meas.map(|s| s * factor),
        }
    }

    fn validate(&self) -> Result<()> {
        let all = self
            .std_process
            .iter()
            .chain(&self.std_ego_meas)
            .chain(&self.std_lm_meas);
        for &s in all {
            if !(s.is_finite() && s >= 0.0) {
                return Err(Error::InvalidParam(format!(
                    "noise standard deviations must be finite and >= 0, got {s}"
                )));
            }
        }
        Ok(())
    }
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self::uniform(0.01)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlSchedule {
    Constant(ControlInput),
    /// One input per step; must cover every simulated step.
    Sequence(Vec<ControlInput>),
}

impl ControlSchedule {
    pub fn at(&self, k: usize) -> ControlInput {
        match self {
            ControlSchedule::Constant(u) => *u,
            ControlSchedule::Sequence(us) => us[k.min(us.len() - 1)],
        }
    }
}

/// A static environment, a control schedule and the sensing setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub landmarks: Vec<LandmarkState>,
    pub controls: ControlSchedule,
    pub sensor: SensorModel,
    pub noise: NoiseSpec,
    #[serde(rename = "T")]
    pub steps: usize,
    pub seed: u64,
    #[serde(default)]
    pub initial_pose: EgoState,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.landmarks.is_empty() {
            return Err(Error::InvalidParam("scenario needs at least one landmark".into()));
        }
        if self.steps == 0 {
            return Err(Error::InvalidParam("scenario needs at least one step".into()));
        }
        if let ControlSchedule::Sequence(us) = &self.controls {
            if us.len() < self.steps {
                return Err(Error::InvalidParam(format!(
                    "control sequence has {} entries for {} steps",
                    us.len(),
                    self.steps
                )));
            }
        }
        if self
            .landmarks
            .iter()
            .any(|l| !(l.px.is_finite() && l.py.is_finite()))
            || !self.initial_pose.is_finite()
        {
            return Err(Error::InvalidParam("scenario coordinates must be finite".into()));
        }
        self.sensor.validate()?;
        self.noise.validate()
    }

    pub fn num_landmarks(&self) -> usize {
        self.landmarks.len()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut text = String::new();
        std::fs::File::open(path)?.read_to_string(&mut text)?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

/// Geometry of the circular scenario: the robot drives a regular polygon
/// inscribed in a circle, landmarks sit evenly on a concentric circle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CircularParams {
    pub num_landmarks: usize,
    pub trajectory_radius: f64,
    pub landmark_radius: f64,
    /// Heading change per step (rad).
    pub angular_rate: f64,
    pub sensor_range: f64,
    pub sensor_kind: SensorKind,
    pub noise: NoiseSpec,
    pub steps: usize,
    pub seed: u64,
}

impl Default for CircularParams {
    fn default() -> Self {
        Self {
            num_landmarks: 50,
            trajectory_radius: 2.0,
            landmark_radius: 2.5,
            angular_rate: 0.05,
            sensor_range: 2.0,
            sensor_kind: SensorKind::BearingOnly,
            noise: NoiseSpec::default(),
            steps: 1000,
            seed: 0,
        }
    }
}

pub fn build_circular_scenario(p: &CircularParams) -> Result<Scenario> {
    if !(p.trajectory_radius > 0.0 && p.landmark_radius > 0.0 && p.sensor_range > 0.0) {
        return Err(Error::InvalidParam("circular scenario radii must be positive".into()));
    }
    if !(p.angular_rate != 0.0 && p.angular_rate.is_finite()) {
        return Err(Error::InvalidParam("circular trajectory needs a nonzero turn rate".into()));
    }
    let l = p.num_landmarks;
    let landmarks = (0..l)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / l.max(1) as f64;
            LandmarkState::new(p.landmark_radius * a.cos(), p.landmark_radius * a.sin())
        })
        .collect();
    let w = p.angular_rate;
    // chord length of the inscribed polygon
    let u1 = 2.0 * p.trajectory_radius * (w / 2.0).sin().abs();
    let heading = if w > 0.0 {
        std::f64::consts::FRAC_PI_2 + w / 2.0
    } else {
        -std::f64::consts::FRAC_PI_2 + w / 2.0
    };
    let scenario = Scenario {
        landmarks,
        controls: ControlSchedule::Constant(ControlInput::new(u1, w)),
        sensor: SensorModel::with_range(p.sensor_kind, p.sensor_range)?,
        noise: p.noise,
        steps: p.steps,
        seed: p.seed,
        initial_pose: EgoState::new(p.trajectory_radius, 0.0, heading),
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Geometry of the corridor scenario: two rows of landmarks flanking a
/// straight trajectory along the x axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorridorParams {
    pub num_landmarks: usize,
    pub corridor_length: f64,
    /// Rows are placed at `y = +-row_offset`.
    pub row_offset: f64,
    /// Distance travelled per step.
    pub speed: f64,
    pub start_x: f64,
    pub sensor_range: f64,
    pub sensor_kind: SensorKind,
    pub noise: NoiseSpec,
    pub steps: usize,
    pub seed: u64,
}

impl Default for CorridorParams {
    fn default() -> Self {
        Self {
            num_landmarks: 50,
            corridor_length: 25.0,
            row_offset: 1.5,
            speed: 0.1,
            start_x: 0.5,
            sensor_range: 3.0,
            sensor_kind: SensorKind::BearingOnly,
            noise: NoiseSpec::default(),
            steps: 300,
            seed: 0,
        }
    }
}

pub fn build_corridor_scenario(p: &CorridorParams) -> Result<Scenario> {
    if !(p.corridor_length > 0.0 && p.row_offset > 0.0 && p.sensor_range > 0.0) {
        return Err(Error::InvalidParam("corridor dimensions must be positive".into()));
    }
    if !p.speed.is_finite() || !p.start_x.is_finite() {
        return Err(Error::InvalidParam("corridor speed and start must be finite".into()));
    }
    let per_row = p.num_landmarks.div_ceil(2).max(1);
    let spacing = p.corridor_length / per_row as f64;
    let landmarks = (0..p.num_landmarks)
        .map(|i| {
            let col = (i / 2) as f64;
            let y = if i % 2 == 0 { p.row_offset } else { -p.row_offset };
            LandmarkState::new(spacing * (col + 1.0), y)
        })
        .collect();
    let scenario = Scenario {
        landmarks,
        controls: ControlSchedule::Constant(ControlInput::new(p.speed, 0.0)),
        sensor: SensorModel::with_range(p.sensor_kind, p.sensor_range)?,
        noise: p.noise,
        steps: p.steps,
        seed: p.seed,
        initial_pose: EgoState::new(p.start_x, 0.0, 0.0),
    };
    scenario.validate()?;
    Ok(scenario)
}

/// Measurements available at one step.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementFrame {
    pub k: usize,
    pub y_s: Vector3<f64>,
    /// Measurements of visible landmarks, sorted by id.
    pub y_e: Vec<(usize, Vector2<f64>)>,
    pub visible: Vec<bool>,
    /// Input applied at step `k`, driving the state to step `k + 1`.
    pub u: ControlInput,
}

impl MeasurementFrame {
    pub fn measurement(&self, id: usize) -> Option<&Vector2<f64>> {
        self.y_e
            .binary_search_by_key(&id, |(i, _)| *i)
            .ok()
            .map(|i| &self.y_e[i].1)
    }
}

/// Ground truth and measurements of one simulated run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub scenario: Scenario,
    /// States `x_0 .. x_T`.
    pub truth: Vec<EgoState>,
    /// Process noise injected between consecutive states.
    pub process_noise: Vec<ProcessNoise>,
    /// Frames `0 .. T-1`.
    pub frames: Vec<MeasurementFrame>,
}

impl TrajectoryLog {
    pub fn landmarks(&self) -> &[LandmarkState] {
        &self.scenario.landmarks
    }

    pub fn steps(&self) -> usize {
        self.frames.len()
    }

    /// One row per frame: step, true pose, ego measurement, visibility mask
    /// and the visible landmark measurements as `id:x:y` joined by `;`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "k", "px", "py", "theta", "ys_px", "ys_py", "ys_theta", "visibility", "measurements",
        ])?;
        for (f, x) in self.frames.iter().zip(&self.truth) {
            let mask: String = f.visible.iter().map(|&v| if v { '1' } else { '0' }).collect();
            let meas = f
                .y_e
                .iter()
                .map(|(id, y)| format!("{id}:{}:{}", y[0], y[1]))
                .collect::<Vec<_>>()
                .join(";");
            w.write_record([
                f.k.to_string(),
                x.px.to_string(),
                x.py.to_string(),
                x.theta.to_string(),
                f.y_s[0].to_string(),
                f.y_s[1].to_string(),
                f.y_s[2].to_string(),
                mask,
                meas,
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let z: f64 = rng.sample(StandardNormal);
    std * z
}

/// Simulates the scenario. Noise for every landmark channel is drawn at every
/// step, visible or not, so the random stream does not depend on geometry.
pub fn run(scenario: &Scenario) -> Result<TrajectoryLog> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let n = scenario.steps;
    let l = scenario.landmarks.len();
    let ns = scenario.noise;
    let mut truth = Vec::with_capacity(n + 1);
    let mut frames = Vec::with_capacity(n);
    let mut process_noise = Vec::with_capacity(n);
    let mut x = scenario.initial_pose;
    truth.push(x);
    for k in 0..n {
        let xi_s = Vector3::from_fn(|i, _| gaussian(&mut rng, ns.std_ego_meas[i]));
        let xi_e: Vec<Vector2<f64>> = (0..l)
            .map(|_| Vector2::from_fn(|i, _| gaussian(&mut rng, ns.std_lm_meas[i])))
            .collect();
        let v = ProcessNoise::from_vector(&Vector3::from_fn(|i, _| {
            gaussian(&mut rng, ns.std_process[i])
        }));
        let u = scenario.controls.at(k);

        let visible: Vec<bool> = scenario
            .landmarks
            .iter()
            .map(|lm| visibility(&x, lm, &scenario.sensor))
            .collect();
        let mut y_e = Vec::new();
        for (id, lm) in scenario.landmarks.iter().enumerate() {
            if visible[id] {
                y_e.push((id, landmark_measurement(&x, lm, &xi_e[id], &scenario.sensor)?));
            }
        }
        frames.push(MeasurementFrame {
            k,
            y_s: ego_measurement(&x, &xi_s),
            y_e,
            visible,
            u,
        });
        x = dynamics_step(&x, &u, &v);
        process_noise.push(v);
        truth.push(x);
    }
    Ok(TrajectoryLog {
        scenario: scenario.clone(),
        truth,
        process_noise,
        frames,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::wrap_angle;

    #[test]
    fn circular_defaults_follow_the_preset() {
        let s = build_circular_scenario(&CircularParams::default()).unwrap();
        assert_eq!(s.landmarks.len(), 50);
        assert_eq!(s.sensor.r_max, 2.0);
        assert_eq!(s.sensor.kind, SensorKind::BearingOnly);
    }

    #[test]
    fn corridor_defaults_follow_the_preset() {
        let s = build_corridor_scenario(&CorridorParams::default()).unwrap();
        assert_eq!(s.landmarks.len(), 50);
        assert_eq!(s.sensor.r_max, 3.0);
        assert!(s.landmarks.iter().all(|l| l.py.abs() == 1.5));
    }

    #[test]
    fn minimal_scenario() {
        let s = build_circular_scenario(&CircularParams {
            num_landmarks: 1,
            steps: 1,
            ..Default::default()
        })
        .unwrap();
        let log = run(&s).unwrap();
        assert_eq!(log.landmarks().len(), 1);
        assert_eq!(log.frames.len(), 1);
        assert_eq!(log.truth.len(), 2);
    }

    #[test]
    fn invalid_parameters_are_rejected() {
        assert!(build_circular_scenario(&CircularParams {
            trajectory_radius: 0.0,
            ..Default::default()
        })
        .is_err());
        assert!(build_circular_scenario(&CircularParams {
            num_landmarks: 0,
            ..Default::default()
        })
        .is_err());
        assert!(build_corridor_scenario(&CorridorParams {
            corridor_length: -1.0,
            ..Default::default()
        })
        .is_err());
        assert!(build_corridor_scenario(&CorridorParams {
            steps: 0,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn same_seed_same_log() {
        let s = build_corridor_scenario(&CorridorParams {
            steps: 50,
            seed: 7,
            ..Default::default()
        })
        .unwrap();
        assert_eq!(run(&s).unwrap(), run(&s).unwrap());
        let other = Scenario { seed: 8, ..s.clone() };
        assert_ne!(run(&s).unwrap().frames, run(&other).unwrap().frames);
    }

    #[test]
    fn noiseless_circle_matches_closed_form() {
        let p = CircularParams {
            noise: NoiseSpec::zero(),
            steps: 500,
            ..Default::default()
        };
        let log = run(&build_circular_scenario(&p).unwrap()).unwrap();
        for (k, x) in log.truth.iter().enumerate() {
            let a = p.angular_rate * k as f64;
            assert!((x.px - p.trajectory_radius * a.cos()).abs() < 1e-12);
            assert!((x.py - p.trajectory_radius * a.sin()).abs() < 1e-12);
            let th = std::f64::consts::FRAC_PI_2 + p.angular_rate / 2.0 + a;
            assert!(wrap_angle(x.theta - th).abs() < 1e-12);
        }
    }

    #[test]
    fn straight_trajectory_keeps_heading() {
        let mut noise = NoiseSpec::uniform(0.01);
        noise.std_process[2] = 0.0;
        let log = run(&build_corridor_scenario(&CorridorParams {
            noise,
            ..Default::default()
        })
        .unwrap())
        .unwrap();
        assert_eq!(log.truth.last().unwrap().theta, log.truth[0].theta);
    }

    #[test]
    fn far_landmark_is_never_visible() {
        let mut s = build_corridor_scenario(&CorridorParams {
            num_landmarks: 4,
            steps: 100,
            ..Default::default()
        })
        .unwrap();
        s.landmarks.push(LandmarkState::new(5.0, 20.0));
        let log = run(&s).unwrap();
        assert!(log.frames.iter().all(|f| !f.visible[4] && f.measurement(4).is_none()));
    }

    #[test]
    fn json_round_trip() {
        let s = build_circular_scenario(&CircularParams::default()).unwrap();
        let text = s.to_json().unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        for key in ["landmarks", "controls", "sensor", "noise", "T", "seed"] {
            assert!(v.get(key).is_some(), "missing key {key}");
        }
        assert_eq!(Scenario::from_json(&text).unwrap(), s);
    }

    #[test]
    fn short_control_sequence_is_rejected() {
        let mut s = build_circular_scenario(&CircularParams::default()).unwrap();
        s.controls = ControlSchedule::Sequence(vec![ControlInput::default(); 3]);
        assert!(s.validate().is_err());
    }

    #[test]
    fn csv_export_has_one_row_per_step() {
        let s = build_corridor_scenario(&CorridorParams {
            steps: 20,
            ..Default::default()
        })
        .unwrap();
        let log = run(&s).unwrap();
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 21);
        let first = text.lines().nth(1).unwrap();
        assert!(first.starts_with("0,"));
    }
}
