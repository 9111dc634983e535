//! Damped least-squares core shared by the small dense refiners (relative
//! pose, resection) and the bundle adjuster's damping schedule.

use nalgebra::{DMatrix, DVector};

/// Multiplicative damping schedule: ×10 on a rejected step, ÷10 on an accepted one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Damping {
    pub lambda: f64,
}

impl Damping {
    pub const INITIAL: f64 = 1e-4;
    pub const FACTOR: f64 = 10.0;
    pub const MIN: f64 = 1e-12;
    /// Past this the step is effectively zero: the current state is stationary.
    pub const MAX: f64 = 1e14;

    pub fn new() -> Self {
        Damping {
            lambda: Self::INITIAL,
        }
    }

    pub fn accept(&mut self) {
        self.lambda = (self.lambda / Self::FACTOR).max(Self::MIN);
    }

    pub fn reject(&mut self) {
        self.lambda *= Self::FACTOR;
    }

    pub fn exhausted(&self) -> bool {
        self.lambda > Self::MAX
    }

    /// Adds `lambda * diag(H)` to the normal matrix in place.
    pub fn apply(&self, h: &mut DMatrix<f64>) {
        let max_diag = h.diagonal().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let floor = (max_diag * 1e-12).max(1e-12);
        for i in 0..h.nrows() {
            let d = h[(i, i)].max(floor);
            h[(i, i)] += self.lambda * d;
        }
    }
}

impl Default for Damping {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmOptions {
    pub max_iterations: usize,
    /// Stop once an accepted step improves the cost by less than this fraction.
    pub function_tolerance: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        LmOptions {
            max_iterations: 100,
            function_tolerance: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LmReport {
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// A nonlinear least-squares problem over a manifold-valued state.
///
/// The cost is `sum(r_i^2)`. Residuals return `None` when the state is
/// invalid (for instance a point falling on a camera center); such steps are
/// rejected.
pub trait LeastSquares {
    type State: Clone;

    fn num_params(&self) -> usize;

    fn residuals(&self, state: &Self::State) -> Option<DVector<f64>>;

    /// Applies a tangent-space increment.
    fn retract(&self, state: &Self::State, delta: &DVector<f64>) -> Self::State;

    /// Jacobian of the residuals w.r.t. the tangent increment at zero.
    /// Defaults to central differences through [`LeastSquares::retract`].
    fn jacobian(&self, state: &Self::State, residuals: &DVector<f64>) -> Option<DMatrix<f64>> {
        let n = self.num_params();
        let mut jac = DMatrix::zeros(residuals.len(), n);
        let h = 1e-7;
        for k in 0..n {
            let mut d = DVector::zeros(n);
            d[k] = h;
            let plus = self.residuals(&self.retract(state, &d))?;
            d[k] = -h;
            let minus = self.residuals(&self.retract(state, &d))?;
            jac.set_column(k, &((plus - minus) / (2.0 * h)));
        }
        Some(jac)
    }
}

/// Levenberg–Marquardt with the [`Damping`] schedule.
///
/// Returns `None` only if the starting state has no finite cost.
pub fn minimize<P: LeastSquares>(
    problem: &P,
    initial: P::State,
    opts: &LmOptions,
) -> Option<(P::State, LmReport)> {
    let mut state = initial;
    let mut r = problem.residuals(&state)?;
    let mut cost = r.norm_squared();
    if !cost.is_finite() {
        return None;
    }
    let initial_cost = cost;
    let mut damping = Damping::new();
    let mut iterations = 0;
    let mut converged = false;

    while iterations < opts.max_iterations {
        if cost == 0.0 {
            converged = true;
            break;
        }
        iterations += 1;
        let jac = match problem.jacobian(&state, &r) {
            Some(j) => j,
            None => break,
        };
        let jt = jac.transpose();
        let h = &jt * &jac;
        let g = &jt * &r;
        if g.amax() < 1e-300 {
            converged = true;
            break;
        }
        let mut accepted = false;
        while !damping.exhausted() {
            let mut hd = h.clone();
            damping.apply(&mut hd);
            let step = match hd.cholesky() {
                Some(ch) => -ch.solve(&g),
                None => {
                    damping.reject();
                    continue;
                }
            };
            let candidate = problem.retract(&state, &step);
            match problem.residuals(&candidate) {
                Some(rn) if rn.norm_squared() < cost => {
                    let new_cost = rn.norm_squared();
                    let rel = (cost - new_cost) / cost;
                    state = candidate;
                    r = rn;
                    cost = new_cost;
                    damping.accept();
                    accepted = true;
                    if rel < opts.function_tolerance {
                        converged = true;
                    }
                    break;
                }
                _ => damping.reject(),
            }
        }
        if !accepted {
            // No descent direction left at any damping: stationary point.
            converged = true;
            break;
        }
        if converged {
            break;
        }
    }

    Some((
        state,
        LmReport {
            initial_cost,
            final_cost: cost,
            iterations,
            converged,
        },
    ))
}
