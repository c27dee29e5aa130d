//! Moving-horizon estimation of the robot pose from ego measurements only.
//!
//! At step `k` the window holds the inputs and ego measurements of steps
//! `k - N_k .. k - 1` with `N_k = min(k, N)`. The decision vector is the
//! window's initial state and the process-noise sequence; states are obtained
//! by forward substitution through the dynamics (single shooting). The cost is
//!
//! ```text
//! 2 eta^N_k |x_{k-N_k|k} - anchor|^2_Ubar
//!   + sum_{j=1..N_k} eta^(j-1) ( 2 |v_{k-j|k}|^2_Q + |y_{k-j} - x_{k-j|k}|^2_R )
//! ```
//!
//! where the anchor is the estimate produced `N_k` steps earlier and the
//! heading residuals use wrapped differences. The estimate at `k` is the
//! terminal state `x_{k|k}`.

use std::collections::VecDeque;

use log::warn;
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{
    dynamics_jacobian_state, dynamics_step, wrap_angle, ControlInput, EgoState, ProcessNoise,
};
use crate::nls::{self, check_horizon_condition, HorizonCheck, NlsProblem, ResidualBlock, ResidualModel, SolveOptions, SolveReport};
use crate::weights::{self, scaled_identity};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EgoMheConfig {
    pub eta: f64,
    /// Prior weight on the window's initial state.
    #[serde(with = "weights::rows")]
    pub u_bar: DMatrix<f64>,
    /// Lower bound matrix of the detectability certificate, used only to
    /// evaluate the horizon condition.
    #[serde(with = "weights::rows::option", default)]
    pub u_lower: Option<DMatrix<f64>>,
    /// Weight on the combined noise `(v, xi)`; only the process block (upper
    /// left 3x3) enters the cost since the measurement noise is carried by the
    /// fit residual.
    #[serde(with = "weights::rows")]
    pub q: DMatrix<f64>,
    #[serde(with = "weights::rows")]
    pub r: DMatrix<f64>,
    pub horizon: usize,
    #[serde(default)]
    pub solver: SolveOptions,
}

impl Default for EgoMheConfig {
    fn default() -> Self {
        Self {
            eta: 0.99,
            u_bar: scaled_identity(3, 0.001),
            u_lower: None,
            q: scaled_identity(6, 1.0),
            r: scaled_identity(3, 1.0),
            horizon: 20,
            solver: SolveOptions::default(),
        }
    }
}

impl EgoMheConfig {
    pub fn validate(&self) -> Result<()> {
        weights::require_discount("eta_s", self.eta)?;
        weights::require_pd("U_bar_s", &self.u_bar, 3)?;
        weights::require_psd("Q_s", &self.q, 6)?;
        weights::require_psd("R_s", &self.r, 3)?;
        if let Some(ul) = &self.u_lower {
            weights::require_pd("U_lower_s", ul, 3)?;
        }
        if self.horizon == 0 {
            return Err(Error::InvalidParam("ego horizon must be at least 1".into()));
        }
        Ok(())
    }

    /// Horizon condition for the configured weights, when a lower bound matrix is known.
    pub fn horizon_check(&self) -> Option<Result<HorizonCheck>> {
        self.u_lower
            .as_ref()
            .map(|ul| check_horizon_condition(self.eta, &self.u_bar, ul, self.horizon))
    }

    fn process_weight(&self) -> DMatrix<f64> {
        self.q.view((0, 0), (3, 3)).into_owned()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoSample {
    pub u: ControlInput,
    pub y: Vector3<f64>,
}

/// Buffered inputs and measurements of the current window plus the prior anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoWindow {
    pub samples: VecDeque<EgoSample>,
    pub anchor: EgoState,
}

impl EgoWindow {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

struct EgoWindowModel<'a> {
    window: &'a EgoWindow,
}

impl EgoWindowModel<'_> {
    fn n(&self) -> usize {
        self.window.len()
    }

    /// States `x_{k-N|k} .. x_{k|k}` for the decision vector.
    fn states(&self, z: &DVector<f64>) -> Vec<EgoState> {
        let mut s = EgoState::new(z[0], z[1], z[2]);
        let mut out = Vec::with_capacity(self.n() + 1);
        out.push(s);
        for (i, smp) in self.window.samples.iter().enumerate() {
            let v = noise_at(z, i);
            s = dynamics_step(&s, &smp.u, &v);
            out.push(s);
        }
        out
    }
}

fn noise_at(z: &DVector<f64>, i: usize) -> ProcessNoise {
    let o = 3 + 3 * i;
    ProcessNoise::new(z[o], z[o + 1], z[o + 2])
}

fn wrapped_residual(x: &EgoState, y: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new(x.px - y[0], x.py - y[1], wrap_angle(x.theta - y[2]))
}

impl ResidualModel for EgoWindowModel<'_> {
    fn evaluate(
        &self,
        z: &DVector<f64>,
        r: &mut DVector<f64>,
        mut jac: Option<&mut DMatrix<f64>>,
    ) -> Result<()> {
        let n = self.n();
        let dim = z.len();
        let mut s = EgoState::new(z[0], z[1], z[2]);
        // sensitivity of the current state with respect to z
        let mut sens = DMatrix::<f64>::zeros(3, dim);
        sens.view_mut((0, 0), (3, 3)).fill_with_identity();

        r.fixed_rows_mut::<3>(0)
            .copy_from(&s.difference(&self.window.anchor));
        if let Some(j) = jac.as_deref_mut() {
            j.view_mut((0, 0), (3, 3)).fill_with_identity();
        }
        let mut row = 3;
        for (i, smp) in self.window.samples.iter().enumerate() {
            let v = noise_at(z, i);
            let vcol = 3 + 3 * i;
            r.fixed_rows_mut::<3>(row).copy_from(&v.to_vector());
            r.fixed_rows_mut::<3>(row + 3)
                .copy_from(&wrapped_residual(&s, &smp.y));
            if let Some(j) = jac.as_deref_mut() {
                j.view_mut((row, vcol), (3, 3)).fill_with_identity();
                // only the first 3 + 3i columns of the sensitivity are nonzero
                let used = vcol;
                j.view_mut((row + 3, 0), (3, used))
                    .copy_from(&sens.view((0, 0), (3, used)));
                let f: Matrix3<f64> = dynamics_jacobian_state(&s, &smp.u);
                let next = f * sens.view((0, 0), (3, used));
                sens.view_mut((0, 0), (3, used)).copy_from(&next);
                sens.view_mut((0, vcol), (3, 3)).fill_with_identity();
            }
            s = dynamics_step(&s, &smp.u, &v);
            row += 6;
        }
        debug_assert_eq!(row, 3 + 6 * n);
        if !s.is_finite() {
            return Err(Error::NumericalFailure("ego trajectory diverged".into()));
        }
        Ok(())
    }
}

fn build_blocks(window: &EgoWindow, cfg: &EgoMheConfig) -> Vec<ResidualBlock> {
    let n = window.len();
    let q = cfg.process_weight();
    let mut blocks = Vec::with_capacity(1 + 2 * n);
    blocks.push(ResidualBlock::new(
        cfg.u_bar.clone(),
        2.0 * cfg.eta.powi(n as i32),
    ));
    for i in 0..n {
        // sample i is step k - (n - i); its discount index is j - 1 = n - i - 1
        let d = cfg.eta.powi((n - i - 1) as i32);
        blocks.push(ResidualBlock::new(q.clone(), 2.0 * d));
        blocks.push(ResidualBlock::new(cfg.r.clone(), d));
    }
    blocks
}

/// Result of one ego window solve.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoSolution {
    pub estimate: EgoState,
    /// Smoothed states `x_{k-N_k|k} .. x_{k|k}`.
    pub smoothed: Vec<EgoState>,
    /// Estimated process noise for each window step.
    pub noises: Vec<ProcessNoise>,
    pub report: SolveReport,
}

/// Solves the ego window problem starting from `warm_start` (or the anchor
/// with zero noise).
pub fn ego_update(
    window: &EgoWindow,
    cfg: &EgoMheConfig,
    warm_start: Option<&DVector<f64>>,
) -> Result<EgoSolution> {
    if window.is_empty() {
        return Err(Error::InvalidParam("ego window is empty".into()));
    }
    let n = window.len();
    let dim = 3 + 3 * n;
    let x0 = match warm_start {
        Some(z) if z.len() == dim => z.clone(),
        _ => {
            let mut z = DVector::zeros(dim);
            z.fixed_rows_mut::<3>(0).copy_from(&window.anchor.to_vector());
            z
        }
    };
    let model = EgoWindowModel { window };
    let problem = NlsProblem::new(dim, build_blocks(window, cfg), model);
    let report = nls::solve(&problem, &x0, &cfg.solver)
        .map_err(|e| Error::SolverFailure(format!("ego window: {e}")))?;
    let smoothed = problem.model.states(&report.solution);
    let noises = (0..n).map(|i| noise_at(&report.solution, i)).collect();
    Ok(EgoSolution {
        estimate: *smoothed.last().expect("window is non-empty"),
        smoothed,
        noises,
        report,
    })
}

/// Rolling ego estimator: owns the window, the anchor history and the warm start.
#[derive(Debug, Clone)]
pub struct EgoMhe {
    cfg: EgoMheConfig,
    window: VecDeque<EgoSample>,
    /// Estimates for steps `k - N_k .. k`.
    history: VecDeque<EgoState>,
    /// Previous solution and its smoothed state at window index 1.
    warm: Option<(DVector<f64>, EgoState)>,
    failures: usize,
}

impl EgoMhe {
    pub fn new(cfg: EgoMheConfig, initial: EgoState) -> Result<Self> {
        cfg.validate()?;
        if let Some(check) = cfg.horizon_check() {
            let check = check?;
            if !check.holds {
                warn!(
                    "ego horizon condition fails: 4 eta^N lambda_max = {:.3} >= 1",
                    check.lhs
                );
            }
        }
        let mut history = VecDeque::with_capacity(cfg.horizon + 2);
        history.push_back(initial);
        Ok(Self {
            window: VecDeque::with_capacity(cfg.horizon + 1),
            history,
            warm: None,
            failures: 0,
            cfg,
        })
    }

    pub fn config(&self) -> &EgoMheConfig {
        &self.cfg
    }

    /// Most recent estimate.
    pub fn estimate(&self) -> EgoState {
        *self.history.back().expect("history is never empty")
    }

    pub fn failures(&self) -> usize {
        self.failures
    }

    /// Window of the most recent solve.
    pub fn window(&self) -> EgoWindow {
        EgoWindow {
            samples: self.window.clone(),
            anchor: self.history[0],
        }
    }

    /// Incorporates the input and ego measurement of the previous step and
    /// returns the estimate for the current step. On solver failure the
    /// estimator falls back to propagating the previous estimate with zero
    /// noise and the error is returned.
    pub fn step(&mut self, u: ControlInput, y: Vector3<f64>) -> Result<EgoSolution> {
        let shifted = self.window.len() == self.cfg.horizon;
        if shifted {
            self.window.pop_front();
        }
        self.window.push_back(EgoSample { u, y });
        while self.history.len() > self.window.len() {
            self.history.pop_front();
        }
        let window = self.window();
        let n = window.len();
        let warm = self.warm.take().map(|(prev, second)| {
            let mut z = DVector::zeros(3 + 3 * n);
            if shifted {
                z.fixed_rows_mut::<3>(0).copy_from(&second.to_vector());
                let keep = 3 * (n - 1);
                z.rows_mut(3, keep).copy_from(&prev.rows(6, keep));
            } else {
                let len = prev.len().min(z.len());
                z.rows_mut(0, len).copy_from(&prev.rows(0, len));
            }
            z
        });
        match ego_update(&window, &self.cfg, warm.as_ref()) {
            Ok(sol) => {
                let second = sol.smoothed.get(1).copied().unwrap_or(sol.estimate);
                self.warm = Some((sol.report.solution.clone(), second));
                self.history.push_back(sol.estimate);
                Ok(sol)
            }
            Err(e) => {
                self.failures += 1;
                let fallback = dynamics_step(&self.estimate(), &u, &ProcessNoise::default());
                self.history.push_back(fallback);
                Err(e)
            }
        }
    }
}
