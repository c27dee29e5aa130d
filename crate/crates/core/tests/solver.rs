use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use slam_mhe::nls::{solve, ClosureModel, NlsProblem, ResidualBlock, SolveOptions};

struct LinearInstance {
    blocks: Vec<(DMatrix<f64>, DVector<f64>, DMatrix<f64>, f64)>,
}

fn random_spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(n, n) * 0.1
}

/// Blocks `r_i = A_i x - b_i` with weights `W_i` and discounts `g_i`.
fn random_linear(rng: &mut ChaCha8Rng, n: usize) -> LinearInstance {
    let blocks = (0..3)
        .map(|_| {
            let m = rng.random_range(2..6);
            let a = DMatrix::from_fn(m, n, |_, _| rng.random_range(-2.0..2.0));
            let b = DVector::from_fn(m, |_, _| rng.random_range(-3.0..3.0));
            (a, b, random_spd(rng, m), rng.random_range(0.1..2.0))
        })
        .collect();
    LinearInstance { blocks }
}

impl LinearInstance {
    fn problem(&self, n: usize, scale: f64) -> NlsProblem<ClosureModel> {
        let mut model = ClosureModel::new();
        let mut blocks = Vec::new();
        for (a, b, w, g) in &self.blocks {
            let (a, b) = (a.clone(), b.clone());
            model.push(move |x: &DVector<f64>| Ok((&a * x - &b, a.clone())));
            blocks.push(ResidualBlock::new(w.clone(), g * scale));
        }
        NlsProblem::new(n, blocks, model)
    }

    /// Normal equations `sum g A^T W A x = sum g A^T W b`.
    fn oracle(&self, n: usize) -> DVector<f64> {
        let mut h = DMatrix::zeros(n, n);
        let mut rhs = DVector::zeros(n);
        for (a, b, w, g) in &self.blocks {
            h += a.transpose() * w * a * *g;
            rhs += a.transpose() * w * b * *g;
        }
        h.cholesky().unwrap().solve(&rhs)
    }
}

#[test]
fn random_linear_problems_match_normal_equations() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let inst = random_linear(&mut rng, 5);
        let x0 = DVector::from_fn(5, |_, _| rng.random_range(-10.0..10.0));
        let rep = solve(&inst.problem(5, 1.0), &x0, &SolveOptions::default()).unwrap();
        let err = (&rep.solution - inst.oracle(5)).amax();
        assert!(err <= 1e-8, "err {err}");
        assert!(rep.converged);
    }
}

#[test]
fn undamped_step_solves_linear_problem() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let opts = SolveOptions {
        initial_damping: 0.0,
        max_iterations: 1,
        ..SolveOptions::default()
    };
    for _ in 0..20 {
        let inst = random_linear(&mut rng, 5);
        let rep = solve(&inst.problem(5, 1.0), &DVector::zeros(5), &opts).unwrap();
        assert_eq!(rep.iterations, 1);
        assert!((&rep.solution - inst.oracle(5)).amax() <= 1e-10);
    }
}

#[test]
fn uniform_discount_rescaling_leaves_solution_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let n = 4;
        let inst = random_linear(&mut rng, n);
        // a mildly nonlinear extra block
        let make = |scale: f64| {
            let mut p = inst.problem(n, scale);
            p.model.push(|x: &DVector<f64>| {
                let r = DVector::from_vec(vec![x[0] * x[1] - 1.0]);
                let mut j = DMatrix::zeros(1, x.len());
                j[(0, 0)] = x[1];
                j[(0, 1)] = x[0];
                Ok((r, j))
            });
            p.blocks.push(ResidualBlock::new(DMatrix::identity(1, 1), 0.5 * scale));
            p
        };
        let x0 = DVector::from_element(n, 0.5);
        let a = solve(&make(1.0), &x0, &SolveOptions::default()).unwrap();
        let b = solve(&make(37.0), &x0, &SolveOptions::default()).unwrap();
        assert!((&a.solution - &b.solution).amax() <= 1e-8);
    }
}

fn rosenbrock() -> NlsProblem<ClosureModel> {
    let mut model = ClosureModel::new();
    model.push(|x: &DVector<f64>| {
        let r = DVector::from_vec(vec![10.0 * (x[1] - x[0] * x[0]), 1.0 - x[0]]);
        let j = DMatrix::from_row_slice(2, 2, &[-20.0 * x[0], 10.0, -1.0, 0.0]);
        Ok((r, j))
    });
    NlsProblem::new(2, vec![ResidualBlock::new(DMatrix::identity(2, 2), 1.0)], model)
}

#[test]
fn accepted_costs_never_increase() {
    let p = rosenbrock();
    let x0 = DVector::from_vec(vec![-1.2, 1.0]);
    let mut prev = p.cost(&x0).unwrap();
    for it in 1..40 {
        let opts = SolveOptions {
            max_iterations: it,
            ..SolveOptions::default()
        };
        let rep = solve(&p, &x0, &opts).unwrap();
        assert!(rep.cost <= prev, "iteration {it}: {} > {prev}", rep.cost);
        assert!((p.cost(&rep.solution).unwrap() - rep.cost).abs() <= 1e-12 * (1.0 + rep.cost));
        prev = rep.cost;
    }
    let rep = solve(&p, &x0, &SolveOptions { max_iterations: 200, ..Default::default() }).unwrap();
    assert!((rep.solution[0] - 1.0).abs() < 1e-8 && (rep.solution[1] - 1.0).abs() < 1e-8);
}

#[test]
fn one_dimensional_nonlinear_matches_grid_search() {
    // r(x) = (sin x + 0.1 x^2 - c), minimized near the start
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..20 {
        let c: f64 = rng.random_range(-0.5..0.8);
        let mut model = ClosureModel::new();
        model.push(move |x: &DVector<f64>| {
            let r = DVector::from_vec(vec![x[0].sin() + 0.1 * x[0] * x[0] - c, 0.3 * x[0]]);
            let j = DMatrix::from_column_slice(2, 1, &[x[0].cos() + 0.2 * x[0], 0.3]);
            Ok((r, j))
        });
        let p = NlsProblem::new(1, vec![ResidualBlock::new(DMatrix::identity(2, 2), 1.0)], model);
        let rep = solve(&p, &DVector::from_element(1, 0.0), &SolveOptions::default()).unwrap();
        let f = |x: f64| (x.sin() + 0.1 * x * x - c).powi(2) + (0.3 * x).powi(2);
        let best = (-1000..=1000)
            .map(|i| i as f64 * 1e-3)
            .min_by(|a, b| f(*a).total_cmp(&f(*b)))
            .unwrap();
        assert!((rep.solution[0] - best).abs() <= 2e-3, "{} vs {best}", rep.solution[0]);
    }
}
