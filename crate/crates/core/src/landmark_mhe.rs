//! Decoupled per-landmark estimation.
//!
//! Every landmark keeps a track holding its estimate, its informativity index
//! (number of disjoint informative horizons consumed) and a rolling buffer of
//! the last `M` ego estimates, measurements and visibility flags. At each step
//! the gate decides whether the buffered horizon is informative; only then is
//! the landmark problem solved with the ego estimates held fixed:
//!
//! ```text
//! 2 eta^M |l - l_prev|^2_Ubar + sum_{visible t} eta^(k-t-1) |y_t - h(x_t, l)|^2_R
//! ```
//!
//! Otherwise the estimate is held bit-for-bit.

use std::collections::VecDeque;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector, Matrix2, SymmetricEigen, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{landmark_measurement_jacobians, predict_landmark, rotation, EgoState, LandmarkState, SensorKind};
use crate::nls::{self, NlsProblem, ResidualBlock, ResidualModel, SolveOptions};
use crate::simulator::MeasurementFrame;
use crate::weights::{self, scaled_identity};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    /// Informative iff the landmark was visible at every buffered step.
    FullVisibility,
    /// Informative iff the measurement Gramian of the range model is bounded
    /// below; partial visibility is allowed.
    RangeGramian,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GatePolicy {
    pub kind: GateKind,
    /// Minimum Gramian eigenvalue for `RangeGramian`; defaults to
    /// `0.5 * M * lambda_min(R_e)`.
    #[serde(default)]
    pub min_eig_threshold: Option<f64>,
}

impl GatePolicy {
    pub fn full_visibility() -> Self {
        Self {
            kind: GateKind::FullVisibility,
            min_eig_threshold: None,
        }
    }

    pub fn range_gramian(threshold: Option<f64>) -> Self {
        Self {
            kind: GateKind::RangeGramian,
            min_eig_threshold: threshold,
        }
    }
}

impl Default for GatePolicy {
    fn default() -> Self {
        Self::full_visibility()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LandmarkMheConfig {
    pub eta: f64,
    #[serde(with = "weights::rows")]
    pub u_bar: DMatrix<f64>,
    /// Weight of the rewritten-measurement noise. The noise enters additively,
    /// so it is absorbed by the fit residual and this weight is not part of
    /// the solved problem.
    #[serde(with = "weights::rows")]
    pub q: DMatrix<f64>,
    #[serde(with = "weights::rows")]
    pub r: DMatrix<f64>,
    pub horizon: usize,
    #[serde(default)]
    pub gate: GatePolicy,
    #[serde(default)]
    pub solver: SolveOptions,
}

impl Default for LandmarkMheConfig {
    fn default() -> Self {
        Self {
            eta: 0.99,
            u_bar: scaled_identity(2, 0.01),
            q: scaled_identity(2, 1.0),
            r: scaled_identity(2, 0.1),
            horizon: 20,
            gate: GatePolicy::default(),
            solver: SolveOptions::default(),
        }
    }
}

impl LandmarkMheConfig {
    pub fn validate(&self) -> Result<()> {
        weights::require_discount("eta_e", self.eta)?;
        weights::require_pd("U_bar_e", &self.u_bar, 2)?;
        weights::require_psd("Q_e", &self.q, 2)?;
        weights::require_psd("R_e", &self.r, 2)?;
        if self.horizon == 0 {
            return Err(Error::InvalidParam("landmark horizon must be at least 1".into()));
        }
        if let Some(t) = self.gate.min_eig_threshold {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::InvalidParam(format!(
                    "gate threshold must be positive, got {t}"
                )));
            }
        }
        Ok(())
    }

    /// Gramian threshold actually used by the `RangeGramian` gate.
    pub fn gramian_threshold(&self) -> f64 {
        self.gate.min_eig_threshold.unwrap_or_else(|| {
            0.5 * self.horizon as f64 * weights::min_eigenvalue(&self.r).max(0.0)
        })
    }
}

/// One buffered step of a landmark track.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackSample {
    pub step: usize,
    pub ego: EgoState,
    pub y: Option<Vector2<f64>>,
}

impl TrackSample {
    pub fn visible(&self) -> bool {
        self.y.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkTrack {
    pub id: usize,
    pub estimate: LandmarkState,
    /// Informativity index: disjoint informative horizons consumed so far.
    pub informativity: u32,
    pub last_update: Option<usize>,
    buffer: VecDeque<TrackSample>,
    capacity: usize,
}

impl LandmarkTrack {
    pub fn new(id: usize, initial: LandmarkState, horizon: usize) -> Self {
        Self {
            id,
            estimate: initial,
            informativity: 0,
            last_update: None,
            buffer: VecDeque::with_capacity(horizon + 1),
            capacity: horizon,
        }
    }

    pub fn push(&mut self, sample: TrackSample) {
        if self.buffer.len() == self.capacity {
            self.buffer.pop_front();
        }
        self.buffer.push_back(sample);
    }

    pub fn buffer(&self) -> impl ExactSizeIterator<Item = &TrackSample> {
        self.buffer.iter()
    }

    pub fn is_full(&self) -> bool {
        self.buffer.len() == self.capacity
    }
}

/// `sum_t a_t R(-th_t)^T R_e R(-th_t)` over the buffered steps.
pub fn range_gramian(track: &LandmarkTrack, r_e: &DMatrix<f64>) -> Matrix2<f64> {
    let w: Matrix2<f64> = r_e.fixed_view::<2, 2>(0, 0).into_owned();
    track
        .buffer
        .iter()
        .filter(|s| s.visible())
        .map(|s| {
            let phi = rotation(-s.ego.theta);
            phi.transpose() * w * phi
        })
        .sum()
}

/// Decides whether the buffered horizon is informative at `step`.
pub fn gate(track: &LandmarkTrack, cfg: &LandmarkMheConfig, step: usize) -> bool {
    let m = cfg.horizon;
    if !track.is_full() {
        return false;
    }
    if let Some(t) = track.last_update {
        if step < t + m {
            return false;
        }
    }
    match cfg.gate.kind {
        GateKind::FullVisibility => track.buffer.iter().all(TrackSample::visible),
        GateKind::RangeGramian => {
            let g = range_gramian(track, &cfg.r);
            let lmin = SymmetricEigen::new(g).eigenvalues.min();
            lmin >= cfg.gramian_threshold()
        }
    }
}

struct LandmarkModel {
    anchor: Vector2<f64>,
    kind: SensorKind,
    /// Fixed ego estimates and measurements of the visible steps.
    samples: Vec<(EgoState, Vector2<f64>)>,
}

impl ResidualModel for LandmarkModel {
    fn evaluate(
        &self,
        x: &DVector<f64>,
        r: &mut DVector<f64>,
        mut jac: Option<&mut DMatrix<f64>>,
    ) -> Result<()> {
        let l = LandmarkState::new(x[0], x[1]);
        r.fixed_rows_mut::<2>(0).copy_from(&(l.to_vector() - self.anchor));
        if let Some(j) = jac.as_deref_mut() {
            j.view_mut((0, 0), (2, 2)).fill_with_identity();
        }
        for (i, (ego, y)) in self.samples.iter().enumerate() {
            let row = 2 + 2 * i;
            let h = predict_landmark(ego, &l, self.kind)?;
            r.fixed_rows_mut::<2>(row).copy_from(&(y - h));
            if let Some(j) = jac.as_deref_mut() {
                let mj = landmark_measurement_jacobians(ego, &l, self.kind)?;
                j.fixed_view_mut::<2, 2>(row, 0).copy_from(&(-mj.wrt_landmark));
            }
        }
        Ok(())
    }
}

/// Solves the landmark problem over the buffered horizon ending before `step`
/// and updates the track. On failure the estimate is held and the informativity
/// index is left unchanged.
pub fn landmark_update(
    track: &mut LandmarkTrack,
    cfg: &LandmarkMheConfig,
    kind: SensorKind,
    step: usize,
) -> Result<LandmarkState> {
    let mut blocks = vec![ResidualBlock::new(
        cfg.u_bar.clone(),
        2.0 * cfg.eta.powi(cfg.horizon as i32),
    )];
    let mut samples = Vec::with_capacity(track.buffer.len());
    for s in &track.buffer {
        if let Some(y) = s.y {
            let age = step.saturating_sub(s.step + 1);
            blocks.push(ResidualBlock::new(cfg.r.clone(), cfg.eta.powi(age as i32)));
            samples.push((s.ego, y));
        }
    }
    let anchor = track.estimate.to_vector();
    let model = LandmarkModel {
        anchor,
        kind,
        samples,
    };
    let problem = NlsProblem::new(2, blocks, model);
    let x0 = DVector::from_column_slice(anchor.as_slice());
    let report = nls::solve(&problem, &x0, &cfg.solver)
        .map_err(|e| Error::SolverFailure(format!("landmark {}: {e}", track.id)))?;
    let est = LandmarkState::new(report.solution[0], report.solution[1]);
    if !(est.px.is_finite() && est.py.is_finite()) {
        return Err(Error::SolverFailure(format!(
            "landmark {}: non-finite solution",
            track.id
        )));
    }
    track.estimate = est;
    track.informativity += 1;
    track.last_update = Some(step);
    Ok(est)
}

/// Outcome of one track for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackOutcome {
    pub gated: bool,
    pub updated: bool,
    pub failed: bool,
    pub elapsed: Duration,
}

/// Appends the frame to every track and runs gate-then-update independently
/// per track. `ego` is the ego estimate associated with the frame's step and
/// `step` is the current estimator step. Results do not depend on the worker
/// count or on the order of the tracks.
pub fn step_all(
    tracks: &mut [LandmarkTrack],
    frame: &MeasurementFrame,
    ego: &EgoState,
    cfg: &LandmarkMheConfig,
    kind: SensorKind,
    step: usize,
    pool: Option<&rayon::ThreadPool>,
) -> Vec<TrackOutcome> {
    let process = |track: &mut LandmarkTrack| {
        let start = Instant::now();
        track.push(TrackSample {
            step: frame.k,
            ego: *ego,
            y: frame.measurement(track.id).copied(),
        });
        let gated = gate(track, cfg, step);
        let mut failed = false;
        if gated {
            if let Err(e) = landmark_update(track, cfg, kind, step) {
                log::debug!("step {step}: {e}");
                failed = true;
            }
        }
        TrackOutcome {
            gated,
            updated: gated && !failed,
            failed,
            elapsed: start.elapsed(),
        }
    };
    match pool {
        Some(pool) => pool.install(|| tracks.par_iter_mut().map(process).collect()),
        None => tracks.iter_mut().map(process).collect(),
    }
}
