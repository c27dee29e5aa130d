//! Coupled baseline: one moving-horizon problem over the augmented state
//! `(x^s, l_1, .., l_L)` with static landmarks. Every landmark is updated at
//! every step; there is no informativity gating.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, Matrix3xX, Vector2, Vector3};

use crate::ego_mhe::EgoMheConfig;
use crate::error::{Error, Result};
use crate::landmark_mhe::LandmarkMheConfig;
use crate::models::{
    dynamics_jacobian_state, dynamics_step, landmark_measurement_jacobians, predict_landmark,
    wrap_angle, ControlInput, EgoState, LandmarkState, ProcessNoise, SensorKind,
};
use crate::nls::{self, NlsProblem, ResidualBlock, ResidualModel, SolveReport};
use crate::simulator::MeasurementFrame;

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedState {
    pub ego: EgoState,
    pub landmarks: Vec<LandmarkState>,
}

impl AugmentedState {
    pub fn dim(&self) -> usize {
        3 + 2 * self.landmarks.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledSample {
    pub u: ControlInput,
    pub y_s: Vector3<f64>,
    pub y_e: Vec<(usize, Vector2<f64>)>,
}

impl From<&MeasurementFrame> for CoupledSample {
    fn from(f: &MeasurementFrame) -> Self {
        Self {
            u: f.u,
            y_s: f.y_s,
            y_e: f.y_e.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledWindow {
    pub samples: VecDeque<CoupledSample>,
    pub anchor: AugmentedState,
}

/// Weights shared with the decoupled estimators.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledConfig {
    pub ego: EgoMheConfig,
    pub landmark: LandmarkMheConfig,
    pub kind: SensorKind,
}

impl CoupledConfig {
    pub fn validate(&self) -> Result<()> {
        self.ego.validate()?;
        self.landmark.validate()
    }

    pub fn horizon(&self) -> usize {
        self.ego.horizon
    }
}

struct CoupledModel<'a> {
    window: &'a CoupledWindow,
    kind: SensorKind,
    num_landmarks: usize,
}

impl CoupledModel<'_> {
    fn noise_col(&self, i: usize) -> usize {
        3 + 2 * self.num_landmarks + 3 * i
    }

    fn landmark(&self, z: &DVector<f64>, l: usize) -> LandmarkState {
        LandmarkState::new(z[3 + 2 * l], z[4 + 2 * l])
    }

    fn noise(&self, z: &DVector<f64>, i: usize) -> ProcessNoise {
        let c = self.noise_col(i);
        ProcessNoise::new(z[c], z[c + 1], z[c + 2])
    }

    fn terminal(&self, z: &DVector<f64>) -> EgoState {
        let mut s = EgoState::new(z[0], z[1], z[2]);
        for (i, smp) in self.window.samples.iter().enumerate() {
            s = dynamics_step(&s, &smp.u, &self.noise(z, i));
        }
        s
    }

    fn second_state(&self, z: &DVector<f64>) -> EgoState {
        let s = EgoState::new(z[0], z[1], z[2]);
        match self.window.samples.front() {
            Some(smp) => dynamics_step(&s, &smp.u, &self.noise(z, 0)),
            None => s,
        }
    }
}

impl ResidualModel for CoupledModel<'_> {
    fn evaluate(
        &self,
        z: &DVector<f64>,
        r: &mut DVector<f64>,
        mut jac: Option<&mut DMatrix<f64>>,
    ) -> Result<()> {
        let dim = z.len();
        let nl = self.num_landmarks;
        let mut s = EgoState::new(z[0], z[1], z[2]);
        let mut sens = Matrix3xX::<f64>::zeros(dim);
        sens.view_mut((0, 0), (3, 3)).fill_with_identity();

        r.fixed_rows_mut::<3>(0)
            .copy_from(&s.difference(&self.window.anchor.ego));
        for l in 0..nl {
            let d = self.landmark(z, l).to_vector() - self.window.anchor.landmarks[l].to_vector();
            r.fixed_rows_mut::<2>(3 + 2 * l).copy_from(&d);
        }
        if let Some(j) = jac.as_deref_mut() {
            j.view_mut((0, 0), (3 + 2 * nl, 3 + 2 * nl)).fill_with_identity();
        }
        let mut row = 3 + 2 * nl;
        for (i, smp) in self.window.samples.iter().enumerate() {
            let v = self.noise(z, i);
            let vcol = self.noise_col(i);
            r.fixed_rows_mut::<3>(row).copy_from(&v.to_vector());
            let fit = Vector3::new(
                s.px - smp.y_s[0],
                s.py - smp.y_s[1],
                wrap_angle(s.theta - smp.y_s[2]),
            );
            r.fixed_rows_mut::<3>(row + 3).copy_from(&fit);
            if let Some(j) = jac.as_deref_mut() {
                j.view_mut((row, vcol), (3, 3)).fill_with_identity();
                j.view_mut((row + 3, 0), (3, dim)).copy_from(&sens);
            }
            row += 6;
            for (id, y) in &smp.y_e {
                let lm = self.landmark(z, *id);
                let h = predict_landmark(&s, &lm, self.kind)?;
                r.fixed_rows_mut::<2>(row).copy_from(&(y - h));
                if let Some(j) = jac.as_deref_mut() {
                    let mj = landmark_measurement_jacobians(&s, &lm, self.kind)?;
                    let ego_part = -(mj.wrt_ego * &sens);
                    j.view_mut((row, 0), (2, dim)).copy_from(&ego_part);
                    let c = 3 + 2 * id;
                    j.fixed_view_mut::<2, 2>(row, c)
                        .copy_from(&(-mj.wrt_landmark));
                }
                row += 2;
            }
            if jac.is_some() {
                let f = dynamics_jacobian_state(&s, &smp.u);
                sens = f * &sens;
                sens.view_mut((0, vcol), (3, 3)).fill_with_identity();
            }
            s = dynamics_step(&s, &smp.u, &v);
        }
        if !s.is_finite() {
            return Err(Error::NumericalFailure("augmented trajectory diverged".into()));
        }
        Ok(())
    }
}

fn build_blocks(window: &CoupledWindow, cfg: &CoupledConfig) -> Vec<ResidualBlock> {
    let n = window.samples.len();
    let eta = cfg.ego.eta;
    let prior = 2.0 * eta.powi(n as i32);
    let mut blocks = vec![ResidualBlock::new(cfg.ego.u_bar.clone(), prior)];
    for _ in &window.anchor.landmarks {
        blocks.push(ResidualBlock::new(cfg.landmark.u_bar.clone(), prior));
    }
    let q = cfg.ego.q.view((0, 0), (3, 3)).into_owned();
    for (i, smp) in window.samples.iter().enumerate() {
        let d = eta.powi((n - i - 1) as i32);
        blocks.push(ResidualBlock::new(q.clone(), 2.0 * d));
        blocks.push(ResidualBlock::new(cfg.ego.r.clone(), d));
        for _ in &smp.y_e {
            blocks.push(ResidualBlock::new(cfg.landmark.r.clone(), d));
        }
    }
    blocks
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoupledSolution {
    pub estimate: AugmentedState,
    pub report: SolveReport,
    /// Smoothed ego state at window index 1 (warm start for the next window).
    pub second: EgoState,
}

/// Solves the augmented window problem.
pub fn coupled_update(
    window: &CoupledWindow,
    cfg: &CoupledConfig,
    warm_start: Option<&DVector<f64>>,
) -> Result<CoupledSolution> {
    if window.samples.is_empty() {
        return Err(Error::InvalidParam("coupled window is empty".into()));
    }
    let nl = window.anchor.landmarks.len();
    for smp in &window.samples {
        if let Some((id, _)) = smp.y_e.iter().find(|(id, _)| *id >= nl) {
            return Err(Error::InvalidParam(format!("measurement of unknown landmark {id}")));
        }
    }
    let n = window.samples.len();
    let dim = 3 + 2 * nl + 3 * n;
    let x0 = match warm_start {
        Some(z) if z.len() == dim => z.clone(),
        _ => {
            let mut z = DVector::zeros(dim);
            z.fixed_rows_mut::<3>(0).copy_from(&window.anchor.ego.to_vector());
            for (l, lm) in window.anchor.landmarks.iter().enumerate() {
                z.fixed_rows_mut::<2>(3 + 2 * l).copy_from(&lm.to_vector());
            }
            z
        }
    };
    let model = CoupledModel {
        window,
        kind: cfg.kind,
        num_landmarks: nl,
    };
    let problem = NlsProblem::new(dim, build_blocks(window, cfg), model);
    let report = nls::solve(&problem, &x0, &cfg.ego.solver)
        .map_err(|e| Error::SolverFailure(format!("coupled window: {e}")))?;
    let z = &report.solution;
    let estimate = AugmentedState {
        ego: problem.model.terminal(z),
        landmarks: (0..nl).map(|l| problem.model.landmark(z, l)).collect(),
    };
    let second = problem.model.second_state(z);
    Ok(CoupledSolution {
        estimate,
        report,
        second,
    })
}

/// Rolling coupled estimator.
#[derive(Debug, Clone)]
pub struct CoupledMhe {
    cfg: CoupledConfig,
    window: VecDeque<CoupledSample>,
    history: VecDeque<AugmentedState>,
    warm: Option<(DVector<f64>, EgoState)>,
    failures: usize,
}

impl CoupledMhe {
    pub fn new(cfg: CoupledConfig, initial: AugmentedState) -> Result<Self> {
        cfg.validate()?;
        let mut history = VecDeque::with_capacity(cfg.horizon() + 2);
        history.push_back(initial);
        Ok(Self {
            window: VecDeque::with_capacity(cfg.horizon() + 1),
            history,
            warm: None,
            failures: 0,
            cfg,
        })
    }

    pub fn estimate(&self) -> &AugmentedState {
        self.history.back().expect("history is never empty")
    }

    pub fn failures(&self) -> usize {
        self.failures
    }

    /// Incorporates the previous step's frame and estimates the current augmented state.
    pub fn step(&mut self, frame: &MeasurementFrame) -> Result<CoupledSolution> {
        let shifted = self.window.len() == self.cfg.horizon();
        if shifted {
            self.window.pop_front();
        }
        self.window.push_back(CoupledSample::from(frame));
        while self.history.len() > self.window.len() {
            self.history.pop_front();
        }
        let window = CoupledWindow {
            samples: self.window.clone(),
            anchor: self.history[0].clone(),
        };
        let nl = window.anchor.landmarks.len();
        let n = window.samples.len();
        let warm = self.warm.take().map(|(prev, second)| {
            let mut z = DVector::zeros(3 + 2 * nl + 3 * n);
            let base = 3 + 2 * nl;
            if shifted {
                z.fixed_rows_mut::<3>(0).copy_from(&second.to_vector());
                z.rows_mut(3, 2 * nl).copy_from(&prev.rows(3, 2 * nl));
                let keep = 3 * (n - 1);
                z.rows_mut(base, keep).copy_from(&prev.rows(base + 3, keep));
            } else {
                let len = prev.len().min(z.len());
                z.rows_mut(0, len).copy_from(&prev.rows(0, len));
            }
            z
        });
        match coupled_update(&window, &self.cfg, warm.as_ref()) {
            Ok(sol) => {
                self.warm = Some((sol.report.solution.clone(), sol.second));
                self.history.push_back(sol.estimate.clone());
                Ok(sol)
            }
            Err(e) => {
                self.failures += 1;
                let prev = self.estimate().clone();
                self.history.push_back(AugmentedState {
                    ego: dynamics_step(&prev.ego, &frame.u, &ProcessNoise::default()),
                    landmarks: prev.landmarks,
                });
                Err(e)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{SensorModel, dynamics_step};

    fn cfg(kind: SensorKind) -> CoupledConfig {
        CoupledConfig {
            ego: EgoMheConfig::default(),
            landmark: LandmarkMheConfig::default(),
            kind,
        }
    }

    #[test]
    fn augmented_dimension() {
        let s = AugmentedState {
            ego: EgoState::default(),
            landmarks: vec![LandmarkState::default(); 50],
        };
        assert_eq!(s.dim(), 103);
    }

    #[test]
    fn exact_prior_zero_noise_is_a_fixed_point() {
        let sensor = SensorModel::with_range(SensorKind::BearingOnly, 10.0).unwrap();
        let landmarks = vec![LandmarkState::new(1.0, 2.0), LandmarkState::new(-1.0, 3.0)];
        let mut x = EgoState::new(0.0, 0.0, 0.2);
        let truth0 = AugmentedState {
            ego: x,
            landmarks: landmarks.clone(),
        };
        let mut est = CoupledMhe::new(cfg(sensor.kind), truth0).unwrap();
        let u = ControlInput::new(0.1, 0.02);
        for k in 0..30 {
            let y_e = landmarks
                .iter()
                .enumerate()
                .map(|(i, l)| (i, predict_landmark(&x, l, sensor.kind).unwrap()))
                .collect();
            let frame = MeasurementFrame {
                k,
                y_s: x.to_vector(),
                y_e,
                visible: vec![true; 2],
                u,
            };
            x = dynamics_step(&x, &u, &ProcessNoise::default());
            let sol = est.step(&frame).unwrap();
            assert!(sol.estimate.ego.difference(&x).norm() < 1e-9);
            for (a, b) in sol.estimate.landmarks.iter().zip(&landmarks) {
                assert!(a.distance(b) < 1e-9);
            }
        }
    }

    #[test]
    fn unknown_landmark_id_is_rejected() {
        let window = CoupledWindow {
            samples: VecDeque::from(vec![CoupledSample {
                u: ControlInput::default(),
                y_s: Vector3::zeros(),
                y_e: vec![(4, Vector2::new(1.0, 0.0))],
            }]),
            anchor: AugmentedState {
                ego: EgoState::default(),
                landmarks: vec![LandmarkState::new(1.0, 0.0)],
            },
        };
        assert!(coupled_update(&window, &cfg(SensorKind::Range), None).is_err());
    }
}
