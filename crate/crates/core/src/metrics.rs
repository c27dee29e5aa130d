//! Error traces, decay-rate fits and per-step metrics output.

use std::io::Write;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{EgoState, LandmarkState};

/// Per-step error values for `k = 1..=T` (index 0 holds step 1).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ErrorTrace {
    pub ego: Vec<f64>,
    pub avg_landmark: Vec<f64>,
}

/// Ego error norm; heading uses the wrapped difference unless `position_only`.
pub fn ego_error(est: &EgoState, truth: &EgoState, position_only: bool) -> f64 {
    if position_only {
        (est.position() - truth.position()).norm()
    } else {
        est.difference(truth).norm()
    }
}

pub fn average_landmark_error(est: &[LandmarkState], truth: &[LandmarkState]) -> Result<f64> {
    if est.len() != truth.len() {
        return Err(Error::LengthMismatch {
            expected: truth.len(),
            actual: est.len(),
        });
    }
    if est.is_empty() {
        return Ok(0.0);
    }
    Ok(est.iter().zip(truth).map(|(a, b)| a.distance(b)).sum::<f64>() / est.len() as f64)
}

/// Builds traces from aligned estimate and truth sequences.
pub fn compute_traces(
    ego_est: &[EgoState],
    ego_truth: &[EgoState],
    lm_est: &[Vec<LandmarkState>],
    lm_truth: &[LandmarkState],
    position_only: bool,
) -> Result<ErrorTrace> {
    if ego_est.len() != ego_truth.len() {
        return Err(Error::LengthMismatch {
            expected: ego_truth.len(),
            actual: ego_est.len(),
        });
    }
    if lm_est.len() != ego_est.len() {
        return Err(Error::LengthMismatch {
            expected: ego_est.len(),
            actual: lm_est.len(),
        });
    }
    let ego = ego_est
        .iter()
        .zip(ego_truth)
        .map(|(e, t)| ego_error(e, t, position_only))
        .collect();
    let avg_landmark = lm_est
        .iter()
        .map(|l| average_landmark_error(l, lm_truth))
        .collect::<Result<_>>()?;
    Ok(ErrorTrace { ego, avg_landmark })
}

/// Values at or below this are excluded from log-linear fits.
pub const DECAY_FIT_FLOOR: f64 = 1e-300;

/// Fits `e_k ~ C lambda^k` by least squares on `ln e_k` over `window`
/// (indices into `trace`, inclusive start, exclusive end). Returns `(C, lambda)`.
pub fn fit_decay_rate(trace: &[f64], window: std::ops::Range<usize>) -> Result<(f64, f64)> {
    let end = window.end.min(trace.len());
    let pts: Vec<(f64, f64)> = (window.start..end)
        .filter(|&k| trace[k].is_finite() && trace[k] > DECAY_FIT_FLOOR)
        .map(|k| (k as f64, trace[k].ln()))
        .collect();
    if pts.len() < 5 {
        return Err(Error::InsufficientData {
            needed: 5,
            got: pts.len(),
        });
    }
    let a = DMatrix::from_fn(pts.len(), 2, |i, j| if j == 0 { 1.0 } else { pts[i].0 });
    let b = DVector::from_iterator(pts.len(), pts.iter().map(|p| p.1));
    let coef = a
        .svd(true, true)
        .solve(&b, 1e-12)
        .map_err(|e| Error::NumericalFailure(e.to_string()))?;
    Ok((coef[0].exp(), coef[1].exp()))
}

/// One row of the per-step metrics file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub k: usize,
    pub ego_err: f64,
    pub avg_lm_err: f64,
    pub t_ego_ms: f64,
    pub t_lm_mean_ms: f64,
    pub t_total_ms: f64,
}

pub fn write_metrics_csv<W: Write>(writer: W, rows: &[StepMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv<R: std::io::Read>(reader: R) -> Result<Vec<StepMetrics>> {
    let mut r = csv::Reader::from_reader(reader);
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}
