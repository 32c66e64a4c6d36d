//! Damped Newton minimizer with an Armijo backtracking line search.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone, Copy)]
pub struct Options {
    pub gradient_tolerance: f64,
    pub max_iterations: usize,
}

#[derive(Debug, Clone)]
pub struct Outcome {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Objective value after every accepted step, starting with the initial point.
    pub trace: Vec<f64>,
}

const ARMIJO: f64 = 1e-4;
const MAX_BACKTRACKS: usize = 60;
const ROUNDOFF: f64 = 1e-13;
const MAX_DAMPING_TRIES: usize = 30;

/// Minimizes `f` from `x0`. `f` writes the gradient into its second argument
/// and returns the value; `hessian` returns a symmetric curvature matrix at
/// a point. Indefinite matrices are shifted by a multiple of the identity
/// until they factor.
pub fn minimize<F, H>(mut f: F, mut hessian: H, x0: &[f64], opts: Options) -> Outcome
where
    F: FnMut(&[f64], &mut [f64]) -> f64,
    H: FnMut(&[f64]) -> DMatrix<f64>,
{
    let dim = x0.len();
    let mut x = DVector::from_column_slice(x0);
    let mut g = DVector::zeros(dim);
    let mut fx = f(x.as_slice(), g.as_mut_slice());
    let mut trace = vec![fx];
    let mut iterations = 0;

    let mut x_new = DVector::zeros(dim);
    let mut g_new = DVector::zeros(dim);
    while iterations < opts.max_iterations && fx.is_finite() {
        if g.norm() <= opts.gradient_tolerance {
            break;
        }
        let p = newton_direction(hessian(x.as_slice()), &g);
        let slope = g.dot(&p);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_BACKTRACKS {
            x_new.copy_from(&x);
            x_new.axpy(alpha, &p, 1.0);
            let f_new = f(x_new.as_slice(), g_new.as_mut_slice());
            if f_new.is_finite() && f_new <= fx + ARMIJO * alpha * slope {
                accepted = Some(f_new);
                break;
            }
            // Once the predicted decrease drowns in roundoff, accept any
            // non-increasing step that shrinks the gradient.
            let noise = ROUNDOFF * (1.0 + fx.abs());
            if -alpha * slope < noise && f_new <= fx && g_new.norm() < g.norm() {
                accepted = Some(f_new);
                break;
            }
            alpha *= 0.5;
        }
        let Some(f_new) = accepted else { break };
        iterations += 1;
        std::mem::swap(&mut x, &mut x_new);
        std::mem::swap(&mut g, &mut g_new);
        fx = f_new;
        trace.push(fx);
    }
    let gradient_norm = g.norm();
    Outcome {
        x: x.as_slice().to_vec(),
        value: fx,
        gradient_norm,
        iterations,
        converged: gradient_norm <= opts.gradient_tolerance,
        trace,
    }
}

/// `-(H + μI)⁻¹ g` for the smallest tried `μ ≥ 0` that makes the shifted
/// matrix positive definite; steepest descent if none does.
fn newton_direction(mut h: DMatrix<f64>, g: &DVector<f64>) -> DVector<f64> {
    let dim = g.len();
    let scale = (0..dim).map(|k| h[(k, k)].abs()).sum::<f64>() / dim as f64;
    if !scale.is_finite() {
        return -g;
    }
    let mut mu = 0.0;
    let mut step = 1e-10 * scale.max(f64::MIN_POSITIVE);
    for _ in 0..MAX_DAMPING_TRIES {
        if let Some(chol) = h.clone().cholesky() {
            let p = -chol.solve(g);
            if p.iter().all(|v| v.is_finite()) {
                return p;
            }
        }
        for k in 0..dim {
            h[(k, k)] += step - mu;
        }
        mu = step;
        step *= 10.0;
    }
    -g
}
