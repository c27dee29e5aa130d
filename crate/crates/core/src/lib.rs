//! Decoupled moving-horizon estimation for planar SLAM.
//!
//! The ego pose is estimated by a short-window MHE; each landmark runs its own
//! fixed-ego MHE, triggered only when its buffered measurements are informative.
//! A coupled augmented-state MHE and a range-only RLS estimator are included as
//! baselines.

pub mod coupled_mhe;
pub mod ego_mhe;
pub mod error;
pub mod harness;
pub mod landmark_mhe;
pub mod metrics;
pub mod models;
pub mod nls;
pub mod rls_range;
pub mod simulator;
pub mod weights;

pub use error::{Error, Result};
