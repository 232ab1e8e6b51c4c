//! Safeguarded Newton ascent for the small smooth concave objectives used in
//! the M-steps.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct NewtonOptions {
    pub max_iter: usize,
    /// Stop once the gradient infinity norm drops below this value.
    pub grad_tol: f64,
    /// Extra pure Newton steps after convergence, kept while they shrink
    /// the gradient. Drives stationarity to rounding level.
    pub polish_steps: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            max_iter: 100,
            grad_tol: 1e-8,
            polish_steps: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NewtonResult {
    pub x: DVector<f64>,
    pub value: f64,
    pub grad_norm: f64,
    pub iterations: usize,
    /// The Hessian could not be factorised at some iterate.
    pub singular: bool,
}

/// Value, gradient and Hessian of the objective at a point.
pub trait Objective {
    fn value(&self, x: &DVector<f64>) -> f64;
    fn derivatives(&self, x: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>);
}

const MAX_HALVINGS: usize = 60;

/// Maximises `obj` from `x0`. Every accepted step does not decrease the
/// objective; when the Hessian is not negative definite a steepest-ascent
/// direction is used instead.
pub fn maximize<O: Objective>(obj: &O, x0: DVector<f64>, opts: NewtonOptions) -> Result<NewtonResult> {
    let mut x = x0;
    let (mut f, mut g, mut h) = obj.derivatives(&x);
    let mut singular = false;
    if !f.is_finite() {
        return Err(Error::NoConvergence {
            iterations: 0,
            grad_norm: f64::INFINITY,
            last: x.iter().copied().collect(),
        });
    }
    for it in 0..opts.max_iter {
        let gnorm = g.amax();
        if gnorm < opts.grad_tol {
            let (x, f, gnorm) = polish(obj, x, f, g, h, opts.polish_steps);
            return Ok(NewtonResult {
                x,
                value: f,
                grad_norm: gnorm,
                iterations: it,
                singular,
            });
        }
        let neg_h = -&h;
        let dir = match neg_h.cholesky() {
            Some(chol) => chol.solve(&g),
            None => {
                singular = true;
                g.clone()
            }
        };
        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..MAX_HALVINGS {
            let cand = &x + step * &dir;
            let fc = obj.value(&cand);
            // Slack of a few ulps so that steps at the rounding floor still count.
            if fc.is_finite() && fc >= f - 4.0 * f64::EPSILON * f.abs() {
                accepted = Some((cand, fc));
                break;
            }
            // Near the optimum the value is flat to rounding; a smaller
            // gradient is then the better signal.
            if fc.is_finite() && fc >= f - noise_floor(f) && obj.derivatives(&cand).1.amax() < gnorm {
                accepted = Some((cand, fc));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, _)) = accepted else {
            // No ascent possible in floating point; accept if close enough.
            if gnorm < opts.grad_tol.sqrt() {
                return Ok(NewtonResult {
                    x,
                    value: f,
                    grad_norm: gnorm,
                    iterations: it,
                    singular,
                });
            }
            return Err(Error::NoConvergence {
                iterations: it,
                grad_norm: gnorm,
                last: x.iter().copied().collect(),
            });
        };
        let moved = (&cand - &x).amax();
        let scale = 1.0 + x.amax();
        x = cand;
        let (f2, g2, h2) = obj.derivatives(&x);
        f = f2;
        g = g2;
        h = h2;
        if moved <= 1e-15 * scale && g.amax() < opts.grad_tol.sqrt() {
            let (x, f, gnorm) = polish(obj, x, f, g, h, opts.polish_steps);
            return Ok(NewtonResult {
                grad_norm: gnorm,
                x,
                value: f,
                iterations: it + 1,
                singular,
            });
        }
    }
    let gnorm = g.amax();
    if gnorm < opts.grad_tol {
        return Ok(NewtonResult {
            x,
            value: f,
            grad_norm: gnorm,
            iterations: opts.max_iter,
            singular,
        });
    }
    Err(Error::NoConvergence {
        iterations: opts.max_iter,
        grad_norm: gnorm,
        last: x.iter().copied().collect(),
    })
}

/// Tolerated value decrease attributable to rounding in a sum of many terms.
fn noise_floor(f: f64) -> f64 {
    1e3 * f64::EPSILON * (1.0 + f.abs())
}

fn polish<O: Objective>(
    obj: &O,
    mut x: DVector<f64>,
    mut f: f64,
    mut g: DVector<f64>,
    mut h: DMatrix<f64>,
    steps: usize,
) -> (DVector<f64>, f64, f64) {
    for _ in 0..steps {
        let gnorm = g.amax();
        if gnorm == 0.0 {
            break;
        }
        let Some(chol) = (-&h).cholesky() else { break };
        let cand = &x + chol.solve(&g);
        let (fc, gc, hc) = obj.derivatives(&cand);
        if !(fc.is_finite() && gc.amax() < gnorm && fc >= f - noise_floor(f)) {
            break;
        }
        (x, f, g, h) = (cand, fc, gc, hc);
    }
    let gnorm = g.amax();
    (x, f, gnorm)
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Quadratic;
    impl Objective for Quadratic {
        fn value(&self, x: &DVector<f64>) -> f64 {
            -(x[0] - 1.0).powi(2) - 2.0 * (x[1] + 3.0).powi(2)
        }
        fn derivatives(&self, x: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
            let g = DVector::from_vec(vec![-2.0 * (x[0] - 1.0), -4.0 * (x[1] + 3.0)]);
            let h = DMatrix::from_diagonal(&DVector::from_vec(vec![-2.0, -4.0]));
            (self.value(x), g, h)
        }
    }

    // Concave, non-quadratic, with a flat direction at the start.
    struct LogCosh;
    impl Objective for LogCosh {
        fn value(&self, x: &DVector<f64>) -> f64 {
            -(x[0] - 2.0).cosh().ln()
        }
        fn derivatives(&self, x: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
            let t = (x[0] - 2.0).tanh();
            (
                self.value(x),
                DVector::from_vec(vec![-t]),
                DMatrix::from_element(1, 1, -(1.0 - t * t)),
            )
        }
    }

    #[test]
    fn quadratic_in_one_step() {
        let r = maximize(&Quadratic, DVector::zeros(2), NewtonOptions::default()).unwrap();
        assert!((r.x[0] - 1.0).abs() < 1e-12);
        assert!((r.x[1] + 3.0).abs() < 1e-12);
        assert!(r.iterations <= 2);
    }

    #[test]
    fn line_search_handles_far_start() {
        let r = maximize(&LogCosh, DVector::from_vec(vec![30.0]), NewtonOptions::default()).unwrap();
        assert!((r.x[0] - 2.0).abs() < 1e-8);
    }
}
