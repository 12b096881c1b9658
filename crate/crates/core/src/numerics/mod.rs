//! Dense linear algebra, the matrix exponential and a limited-memory
//! quasi-Newton minimizer.

mod expm;
mod lbfgs;
mod linalg;
mod matrix;

pub use expm::{acyclicity, acyclicity_grad, acyclicity_with_grad, matexp};
pub use lbfgs::{
    lbfgs_minimize, lbfgs_minimize_l1, Minimum, Objective, SolverOptions, Termination,
};
pub use linalg::{solve_spd_linear, Cholesky};
pub use matrix::Matrix;

/// Minimal-norm subgradient of `|x|`: `sign(0) = 0`.
pub fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}
