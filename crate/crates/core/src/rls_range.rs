//! Recursive least squares for range-model landmarks.
//!
//! With the range model the measurement `y = R(-th) (l - p) + xi` is linear in
//! the landmark position. Writing the regressor as `Phi = R(-th)` gives
//! `y + Phi p = Phi l`, which is accumulated in information form:
//! `Omega += Phi^T W Phi`, `b += Phi^T W (y + Phi p)`, `l = Omega^-1 b`.

use nalgebra::{Matrix2, SymmetricEigen, Vector2};

use crate::error::{Error, Result};
use crate::models::{rotation, EgoState, LandmarkState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RlsState {
    pub information: Matrix2<f64>,
    pub info_vector: Vector2<f64>,
    /// Latest estimate; `None` until the information matrix is positive definite.
    pub estimate: Option<LandmarkState>,
    pub update_count: usize,
}

impl Default for RlsState {
    fn default() -> Self {
        Self::new()
    }
}

impl RlsState {
    pub fn new() -> Self {
        Self {
            information: Matrix2::zeros(),
            info_vector: Vector2::zeros(),
            estimate: None,
            update_count: 0,
        }
    }

    /// Estimate or `SingularInformation` while the information matrix is rank deficient.
    pub fn solution(&self) -> Result<LandmarkState> {
        self.estimate.ok_or(Error::SingularInformation)
    }
}

/// Folds one measurement into the state; invisible steps leave it untouched.
pub fn rls_update(
    state: &RlsState,
    ego: &EgoState,
    y: &Vector2<f64>,
    visible: bool,
    weight: &Matrix2<f64>,
) -> RlsState {
    if !visible {
        return *state;
    }
    let phi = rotation(-ego.theta);
    let pt_w = phi.transpose() * weight;
    let information = state.information + pt_w * phi;
    let info_vector = state.info_vector + pt_w * (y + phi * ego.position());
    let estimate = information
        .cholesky()
        .map(|c| LandmarkState::from_vector(&c.solve(&info_vector)))
        .or(state.estimate);
    RlsState {
        information,
        info_vector,
        estimate,
        update_count: state.update_count + 1,
    }
}

/// Extreme eigenvalues `(min, max)` of the information matrix.
pub fn gramian_bounds(state: &RlsState) -> (f64, f64) {
    let e = SymmetricEigen::new(state.information).eigenvalues;
    (e.min(), e.max())
}
