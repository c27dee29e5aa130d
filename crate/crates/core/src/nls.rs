//! Weighted, discounted nonlinear least squares.
//!
//! A problem is an ordered list of residual blocks, each contributing
//! `discount * r(x)^T W r(x)` to the cost. The solver is Gauss-Newton with
//! Levenberg-Marquardt damping on dense normal equations; window problems in
//! this crate have at most a few hundred variables.
//!
//! Residuals are produced by a [`ResidualModel`] that fills all blocks in one
//! pass, so models that share work across blocks (single shooting over a
//! trajectory) do not need to recompute it per block.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Static description of one residual block.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub dim: usize,
    /// Symmetric positive semidefinite weight.
    pub weight: DMatrix<f64>,
    pub discount: f64,
}

impl ResidualBlock {
    pub fn new(weight: DMatrix<f64>, discount: f64) -> Self {
        Self {
            dim: weight.nrows(),
            weight,
            discount,
        }
    }
}

/// Computes residuals for every block of a problem, stacked in block order.
pub trait ResidualModel {
    /// Fills `residuals` (length = total block dimension) and, when requested,
    /// the dense stacked Jacobian (rows x decision dimension). The Jacobian is
    /// zeroed before the call.
    fn evaluate(
        &self,
        x: &DVector<f64>,
        residuals: &mut DVector<f64>,
        jacobian: Option<&mut DMatrix<f64>>,
    ) -> Result<()>;
}

type BlockFn = Box<dyn Fn(&DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> + Send + Sync>;

/// A residual model built from one closure per block. Each closure returns the
/// block residual and its Jacobian with respect to the full decision vector.
#[derive(Default)]
pub struct ClosureModel {
    blocks: Vec<BlockFn>,
}

impl ClosureModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push<F>(&mut self, f: F)
    where
        F: Fn(&DVector<f64>) -> Result<(DVector<f64>, DMatrix<f64>)> + Send + Sync + 'static,
    {
        self.blocks.push(Box::new(f));
    }
}

impl ResidualModel for ClosureModel {
    fn evaluate(
        &self,
        x: &DVector<f64>,
        residuals: &mut DVector<f64>,
        mut jacobian: Option<&mut DMatrix<f64>>,
    ) -> Result<()> {
        let mut row = 0;
        for f in &self.blocks {
            let (r, j) = f(x)?;
            let d = r.len();
            residuals.rows_mut(row, d).copy_from(&r);
            if let Some(jac) = jacobian.as_deref_mut() {
                jac.rows_mut(row, d).copy_from(&j);
            }
            row += d;
        }
        Ok(())
    }
}

/// Decision-vector dimension, residual blocks, the residual model and optional box bounds.
pub struct NlsProblem<M> {
    pub dim: usize,
    pub blocks: Vec<ResidualBlock>,
    pub model: M,
    /// Per-variable `(lower, upper)` bounds, applied by projection.
    pub bounds: Option<Vec<(f64, f64)>>,
}

impl<M: ResidualModel> NlsProblem<M> {
    pub fn new(dim: usize, blocks: Vec<ResidualBlock>, model: M) -> Self {
        Self {
            dim,
            blocks,
            model,
            bounds: None,
        }
    }

    pub fn residual_dim(&self) -> usize {
        self.blocks.iter().map(|b| b.dim).sum()
    }

    /// Total cost `sum discount * r^T W r` at `x`.
    pub fn cost(&self, x: &DVector<f64>) -> Result<f64> {
        let mut r = DVector::zeros(self.residual_dim());
        self.model.evaluate(x, &mut r, None)?;
        let mut cost = 0.0;
        let mut row = 0;
        for b in &self.blocks {
            let rb = r.rows(row, b.dim);
            cost += b.discount * (rb.transpose() * &b.weight * rb)[(0, 0)];
            row += b.dim;
        }
        Ok(cost)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveOptions {
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    pub max_damping: f64,
    /// Converged when the infinity norm of the cost gradient falls below this.
    pub g_tol: f64,
    /// Converged when `|step| <= s_tol * (1 + |x|)`.
    pub s_tol: f64,
    pub max_iterations: usize,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            initial_damping: 1e-4,
            damping_increase: 10.0,
            damping_decrease: 10.0,
            max_damping: 1e16,
            g_tol: 1e-10,
            s_tol: 1e-12,
            max_iterations: 50,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    GradientTolerance,
    StepTolerance,
    /// Iteration budget exhausted; the report carries the best iterate.
    MaxIterations,
    /// Damping grew past `max_damping` without an acceptable step.
    Stalled,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveReport {
    pub solution: DVector<f64>,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    pub termination: Termination,
}

/// Square-root factor `F` with `F^T F = discount * W`.
fn whitening_factor(block: &ResidualBlock) -> Result<DMatrix<f64>> {
    let w = &block.weight;
    if w.nrows() != block.dim || w.ncols() != block.dim {
        return Err(Error::InvalidParam(format!(
            "block weight must be {0}x{0}, got {1}x{2}",
            block.dim,
            w.nrows(),
            w.ncols()
        )));
    }
    if !(block.discount.is_finite() && block.discount >= 0.0) {
        return Err(Error::InvalidParam(format!(
            "block discount must be finite and nonnegative, got {}",
            block.discount
        )));
    }
    let scale = w.amax().max(f64::MIN_POSITIVE);
    if (w - w.transpose()).amax() > 1e-12 * scale {
        return Err(Error::InvalidParam("block weight is not symmetric".into()));
    }
    let sq = block.discount.sqrt();
    let diagonal = (0..block.dim).all(|i| (0..block.dim).all(|j| i == j || w[(i, j)] == 0.0));
    if diagonal {
        let mut f = DMatrix::zeros(block.dim, block.dim);
        for i in 0..block.dim {
            let wi = w[(i, i)];
            if wi < -1e-12 * scale {
                return Err(Error::InvalidParam("block weight is not PSD".into()));
            }
            f[(i, i)] = sq * wi.max(0.0).sqrt();
        }
        return Ok(f);
    }
    let eig = SymmetricEigen::new(w.clone());
    let mut f = eig.eigenvectors.transpose();
    for (i, &l) in eig.eigenvalues.iter().enumerate() {
        if l < -1e-10 * scale {
            return Err(Error::InvalidParam("block weight is not PSD".into()));
        }
        let s = sq * l.max(0.0).sqrt();
        f.row_mut(i).scale_mut(s);
    }
    Ok(f)
}

struct Whitened {
    factors: Vec<DMatrix<f64>>,
    offsets: Vec<usize>,
}

impl Whitened {
    fn apply_residual(&self, r: &DVector<f64>, out: &mut DVector<f64>) {
        for (f, &off) in self.factors.iter().zip(&self.offsets) {
            let d = f.nrows();
            let rb = r.rows(off, d);
            out.rows_mut(off, d).copy_from(&(f * rb));
        }
    }

    fn apply_jacobian(&self, j: &DMatrix<f64>, out: &mut DMatrix<f64>) {
        for (f, &off) in self.factors.iter().zip(&self.offsets) {
            let d = f.nrows();
            let jb = j.rows(off, d);
            out.rows_mut(off, d).copy_from(&(f * jb));
        }
    }
}

fn project(x: &mut DVector<f64>, bounds: &Option<Vec<(f64, f64)>>) {
    if let Some(b) = bounds {
        for (xi, &(lo, hi)) in x.iter_mut().zip(b) {
            *xi = xi.clamp(lo, hi);
        }
    }
}

/// Minimizes the problem cost from `x0` with damped Gauss-Newton steps.
///
/// Fails only when the model cannot be evaluated at `x0` (or produces
/// non-finite values there). Failed evaluations at trial points are treated as
/// rejected steps. Exhausting the iteration budget is reported through
/// `converged = false` together with the best iterate.
pub fn solve<M: ResidualModel>(
    problem: &NlsProblem<M>,
    x0: &DVector<f64>,
    opts: &SolveOptions,
) -> Result<SolveReport> {
    let n = problem.dim;
    if x0.len() != n {
        return Err(Error::LengthMismatch {
            expected: n,
            actual: x0.len(),
        });
    }
    if let Some(b) = &problem.bounds {
        if b.len() != n {
            return Err(Error::LengthMismatch {
                expected: n,
                actual: b.len(),
            });
        }
    }
    let mut offsets = Vec::with_capacity(problem.blocks.len());
    let mut factors = Vec::with_capacity(problem.blocks.len());
    let mut m = 0;
    for b in &problem.blocks {
        offsets.push(m);
        factors.push(whitening_factor(b)?);
        m += b.dim;
    }
    let whitened = Whitened { factors, offsets };

    let mut r = DVector::zeros(m);
    let mut jac = DMatrix::zeros(m, n);
    let mut rw = DVector::zeros(m);
    let mut jw = DMatrix::zeros(m, n);

    let mut x = x0.clone();
    project(&mut x, &problem.bounds);
    jac.fill(0.0);
    problem
        .model
        .evaluate(&x, &mut r, Some(&mut jac))
        .map_err(|e| Error::NumericalFailure(format!("evaluation at initial point failed: {e}")))?;
    if r.iter().any(|v| !v.is_finite()) || jac.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalFailure(
            "non-finite residual or Jacobian at initial point".into(),
        ));
    }
    whitened.apply_residual(&r, &mut rw);
    whitened.apply_jacobian(&jac, &mut jw);
    let mut cost = rw.norm_squared();

    let mut mu = opts.initial_damping;
    let mut iterations = 0;
    let mut trial_r = DVector::zeros(m);
    let mut trial_rw = DVector::zeros(m);

    let finish = |x: DVector<f64>, cost: f64, iterations, gradient_norm, termination| SolveReport {
        solution: x,
        cost,
        iterations,
        converged: matches!(
            termination,
            Termination::GradientTolerance | Termination::StepTolerance
        ),
        gradient_norm,
        termination,
    };

    loop {
        // gradient of sum |F r|^2 is 2 J^T F^T F r
        let g = jw.tr_mul(&rw);
        let gnorm = 2.0 * g.amax();
        if gnorm < opts.g_tol {
            return Ok(finish(x, cost, iterations, gnorm, Termination::GradientTolerance));
        }
        if iterations >= opts.max_iterations {
            return Ok(finish(x, cost, iterations, gnorm, Termination::MaxIterations));
        }
        iterations += 1;

        let jt = jw.transpose();
        let h = &jt * &jw;
        let max_diag = h.diagonal().amax().max(f64::MIN_POSITIVE);
        let accepted = loop {
            let mut a = h.clone();
            if mu > 0.0 {
                for i in 0..n {
                    a[(i, i)] += mu * h[(i, i)].max(1e-9 * max_diag);
                }
            }
            let Some(chol) = Cholesky::new(a) else {
                mu = if mu > 0.0 { mu * opts.damping_increase } else { opts.initial_damping.max(1e-12) };
                if mu > opts.max_damping {
                    break None;
                }
                continue;
            };
            let step = -chol.solve(&g);
            if step.norm() <= opts.s_tol * (1.0 + x.norm()) {
                return Ok(finish(x, cost, iterations, gnorm, Termination::StepTolerance));
            }
            let mut trial = &x + &step;
            project(&mut trial, &problem.bounds);
            // cost change as sum (a - b)(a + b); changes within its round-off (about 2 eps cost)
            // are accepted so the descent step can keep refining near the optimum
            let change = match problem.model.evaluate(&trial, &mut trial_r, None) {
                Ok(()) if trial_r.iter().all(|v| v.is_finite()) => {
                    whitened.apply_residual(&trial_r, &mut trial_rw);
                    trial_rw.zip_fold(&rw, 0.0, |acc, a, b| acc + (a - b) * (a + b))
                }
                _ => f64::INFINITY,
            };
            if change <= 4.0 * f64::EPSILON * cost {
                mu /= opts.damping_decrease;
                break Some(trial);
            }
            mu = if mu > 0.0 { mu * opts.damping_increase } else { opts.initial_damping.max(1e-12) };
            if mu > opts.max_damping {
                break None;
            }
        };
        let Some(next) = accepted else {
            return Ok(finish(x, cost, iterations, gnorm, Termination::Stalled));
        };
        jac.fill(0.0);
        match problem.model.evaluate(&next, &mut r, Some(&mut jac)) {
            Ok(()) if jac.iter().all(|v| v.is_finite()) && r.iter().all(|v| v.is_finite()) => {}
            _ => {
                return Err(Error::NumericalFailure(
                    "non-finite Jacobian at accepted iterate".into(),
                ))
            }
        }
        x = next;
        whitened.apply_residual(&r, &mut rw);
        whitened.apply_jacobian(&jac, &mut jw);
        cost = rw.norm_squared();
    }
}

/// Largest generalized eigenvalue `lambda` with `det(P - lambda Q) = 0`, for
/// symmetric `P` and positive definite `Q`.
pub fn max_generalized_eigenvalue(p: &DMatrix<f64>, q: &DMatrix<f64>) -> Result<f64> {
    if !p.is_square() || p.shape() != q.shape() {
        return Err(Error::InvalidParam("matrices must be square with equal shape".into()));
    }
    let chol = Cholesky::new(q.clone())
        .ok_or_else(|| Error::InvalidParam("second matrix must be positive definite".into()))?;
    let l = chol.l();
    let l_inv = l
        .clone()
        .try_inverse()
        .ok_or_else(|| Error::InvalidParam("second matrix must be positive definite".into()))?;
    let mut sym = &l_inv * p * l_inv.transpose();
    sym = (&sym + sym.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    Ok(eig.eigenvalues.max())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonCheck {
    pub holds: bool,
    /// `4 eta^M lambda_max`
    pub lhs: f64,
    pub lambda_max: f64,
}

/// Checks the robust-stability horizon condition `4 eta^M lambda_max(U_upper, U_lower) < 1`.
pub fn check_horizon_condition(
    eta: f64,
    u_upper: &DMatrix<f64>,
    u_lower: &DMatrix<f64>,
    horizon: usize,
) -> Result<HorizonCheck> {
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::InvalidParam(format!("discount must lie in [0, 1), got {eta}")));
    }
    let lambda_max = max_generalized_eigenvalue(u_upper, u_lower)?;
    let lhs = 4.0 * eta.powi(horizon as i32) * lambda_max;
    Ok(HorizonCheck {
        holds: lhs < 1.0,
        lhs,
        lambda_max,
    })
}
