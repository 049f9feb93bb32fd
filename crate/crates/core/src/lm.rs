//! Dense Levenberg-Marquardt driver shared by the sliding-window estimator
//! and the pose graph.
//!
//! Problems supply the normal-equation pieces (`H = JᵀWJ`, `g = JᵀWr`) built
//! block-wise from their factors, a cost-only evaluation for step acceptance,
//! and a manifold retraction. The driver owns the damping schedule and only
//! ever accepts steps that decrease the cost.

use nalgebra::{DMatrix, DVector};

/// Damping schedule and termination settings.
#[derive(Debug, Clone)]
pub struct LmConfig {
    pub max_iterations: usize,
    pub initial_lambda: f64,
    pub lambda_decrease: f64,
    pub lambda_increase: f64,
    pub max_lambda: f64,
    /// Absolute cost below which the problem counts as solved.
    pub cost_tolerance: f64,
    /// Relative cost decrease below which iteration stops.
    pub relative_tolerance: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            max_iterations: 25,
            initial_lambda: 1e-6,
            lambda_decrease: 0.35,
            lambda_increase: 8.0,
            max_lambda: 1e12,
            cost_tolerance: 1e-16,
            relative_tolerance: 1e-12,
        }
    }
}

/// One solver iteration as emitted in run reports.
#[derive(Debug, Clone, Copy)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub lambda: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone)]
pub struct LmReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: Vec<IterationRecord>,
    pub converged: bool,
}

impl LmReport {
    pub fn accepted_steps(&self) -> usize {
        self.iterations.iter().filter(|r| r.accepted).count()
    }
}

/// A nonlinear least-squares problem over a manifold-valued state.
pub trait LmProblem {
    type State: Clone;

    /// Tangent dimension of the state.
    fn dim(&self) -> usize;

    /// Total cost (sum of whitened squared residuals, robustified).
    fn cost(&self, state: &Self::State) -> f64;

    /// Cost together with the Gauss-Newton system at `state`.
    fn build(&self, state: &Self::State) -> (f64, DMatrix<f64>, DVector<f64>);

    /// Apply a tangent step.
    fn retract(&self, state: &Self::State, step: &DVector<f64>) -> Self::State;
}

/// Minimize the problem starting from `state`. Returns the best iterate and
/// the per-iteration report; accepted steps never increase the cost.
pub fn minimize<P: LmProblem>(problem: &P, state: P::State, config: &LmConfig) -> (P::State, LmReport) {
    let mut state = state;
    let mut lambda = config.initial_lambda;
    let mut records = Vec::new();

    let (mut cost, mut h, mut g) = problem.build(&state);
    let initial_cost = cost;
    let mut converged = cost <= config.cost_tolerance;

    let mut iteration = 0;
    while !converged && iteration < config.max_iterations {
        iteration += 1;

        // Scale-invariant damping on the diagonal.
        let n = problem.dim();
        let mut damped = h.clone();
        for i in 0..n {
            let d = h[(i, i)];
            damped[(i, i)] = d + lambda * d.max(1e-12);
        }

        let step = match damped.cholesky() {
            Some(chol) => chol.solve(&(-&g)),
            None => {
                lambda = (lambda * config.lambda_increase).min(config.max_lambda);
                records.push(IterationRecord {
                    iteration,
                    cost,
                    lambda,
                    accepted: false,
                });
                continue;
            }
        };

        let candidate = problem.retract(&state, &step);
        let candidate_cost = problem.cost(&candidate);

        if candidate_cost.is_finite() && candidate_cost < cost {
            let decrease = (cost - candidate_cost) / cost.max(1e-300);
            state = candidate;
            cost = candidate_cost;
            lambda = (lambda * config.lambda_decrease).max(1e-12);
            records.push(IterationRecord {
                iteration,
                cost,
                lambda,
                accepted: true,
            });
            if cost <= config.cost_tolerance || decrease < config.relative_tolerance {
                converged = true;
            } else {
                let built = problem.build(&state);
                cost = built.0;
                h = built.1;
                g = built.2;
            }
        } else {
            lambda *= config.lambda_increase;
            records.push(IterationRecord {
                iteration,
                cost,
                lambda,
                accepted: false,
            });
            if lambda > config.max_lambda {
                break;
            }
        }
    }

    (
        state,
        LmReport {
            initial_cost,
            final_cost: cost,
            iterations: records,
            converged,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Quadratic bowl with a curved valley (Rosenbrock-like) to exercise the
    /// damping schedule.
    struct Rosenbrock;

    impl LmProblem for Rosenbrock {
        type State = (f64, f64);

        fn dim(&self) -> usize {
            2
        }

        fn cost(&self, &(x, y): &(f64, f64)) -> f64 {
            let r1 = 10.0 * (y - x * x);
            let r2 = 1.0 - x;
            r1 * r1 + r2 * r2
        }

        fn build(&self, &(x, y): &(f64, f64)) -> (f64, DMatrix<f64>, DVector<f64>) {
            let r = DVector::from_vec(vec![10.0 * (y - x * x), 1.0 - x]);
            let j = DMatrix::from_row_slice(2, 2, &[-20.0 * x, 10.0, -1.0, 0.0]);
            let h = j.transpose() * &j;
            let g = j.transpose() * &r;
            (r.norm_squared(), h, g)
        }

        fn retract(&self, &(x, y): &(f64, f64), step: &DVector<f64>) -> (f64, f64) {
            (x + step[0], y + step[1])
        }
    }

    #[test]
    fn converges_to_rosenbrock_minimum() {
        let cfg = LmConfig {
            max_iterations: 100,
            ..LmConfig::default()
        };
        let (state, report) = minimize(&Rosenbrock, (-1.2, 1.0), &cfg);
        assert!((state.0 - 1.0).abs() < 1e-6, "x = {}", state.0);
        assert!((state.1 - 1.0).abs() < 1e-6, "y = {}", state.1);
        assert!(report.final_cost < 1e-12);
    }

    #[test]
    fn accepted_steps_never_increase_cost() {
        let cfg = LmConfig {
            max_iterations: 100,
            ..LmConfig::default()
        };
        let (_, report) = minimize(&Rosenbrock, (-1.2, 1.0), &cfg);
        let mut last = report.initial_cost;
        for rec in report.iterations.iter().filter(|r| r.accepted) {
            assert!(rec.cost <= last + 1e-15);
            last = rec.cost;
        }
    }

    #[test]
    fn zero_cost_start_converges_immediately() {
        let cfg = LmConfig {
            cost_tolerance: 1e-12,
            ..LmConfig::default()
        };
        let (state, report) = minimize(&Rosenbrock, (1.0, 1.0), &cfg);
        assert_eq!(report.accepted_steps(), 0);
        assert!(report.converged);
        assert_eq!(state, (1.0, 1.0));
    }
}
