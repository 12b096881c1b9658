//! Matrix exponential and the trace-exponential acyclicity functional.

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// After scaling, the 1-norm of the argument is at most this value.
const SCALED_NORM_TARGET: f64 = 0.5;
/// Upper bound on the number of squarings; beyond it the result overflows anyway.
const MAX_SQUARINGS: u32 = 60;
/// Taylor degree, evaluated as four blocks of four in `A⁴`. For
/// `‖A‖₁ ≤ 0.5` the truncation error is below `0.5¹⁷/17! ≈ 2e-20`.
const TAYLOR_DEGREE: usize = 16;
const BLOCK: usize = 4;

/// `e^M` by scaling and squaring around a degree-16 Taylor polynomial
/// (Paterson–Stockmeyer evaluation: seven products).
pub fn matexp(m: &Matrix) -> Result<Matrix> {
    if !m.is_square() {
        return Err(Error::Dimension(format!(
            "matrix exponential of a {}x{} matrix",
            m.rows(),
            m.cols()
        )));
    }
    if !m.is_finite() {
        return Err(Error::Numeric(
            "matrix exponential of non-finite input".into(),
        ));
    }
    let norm = m.norm_one();
    let squarings = if norm > SCALED_NORM_TARGET {
        (norm / SCALED_NORM_TARGET).log2().ceil() as u32
    } else {
        0
    };
    if squarings > MAX_SQUARINGS {
        return Err(Error::NumericRange(format!(
            "1-norm {norm:e} exceeds the scaling budget"
        )));
    }
    let scaled = m.scale(0.5f64.powi(squarings as i32));

    let mut result = taylor(&scaled)?;
    for _ in 0..squarings {
        result = result.matmul(&result)?;
    }
    if !result.is_finite() {
        return Err(Error::NumericRange(format!(
            "matrix exponential overflowed (1-norm {norm:e})"
        )));
    }
    Ok(result)
}

fn taylor(a: &Matrix) -> Result<Matrix> {
    let n = a.rows();
    let mut coef = [1.0; TAYLOR_DEGREE + 1];
    for k in 1..=TAYLOR_DEGREE {
        coef[k] = coef[k - 1] / k as f64;
    }
    // powers[i] = Aⁱ for i < BLOCK; a4 = A⁴.
    let mut powers = vec![Matrix::identity(n), a.clone()];
    for i in 2..BLOCK {
        powers.push(powers[i - 1].matmul(a)?);
    }
    let a4 = powers[BLOCK - 1].matmul(a)?;
    let block = |j: usize| -> Result<Matrix> {
        let mut b = Matrix::zeros(n, n);
        for (i, p) in powers.iter().enumerate() {
            b.axpy(coef[BLOCK * j + i], p)?;
        }
        Ok(b)
    };
    // Horner in A⁴ over the blocks, innermost carrying the A¹⁶ term.
    let top = TAYLOR_DEGREE / BLOCK;
    let mut acc = block(top - 1)?;
    acc.axpy(coef[TAYLOR_DEGREE], &a4)?;
    for j in (0..top - 1).rev() {
        let mut next = a4.matmul(&acc)?;
        next.axpy(1.0, &block(j)?)?;
        acc = next;
    }
    Ok(acc)
}

/// `tr(e^{W⊙W}) − d`, clamped at zero.
pub fn acyclicity(w: &Matrix) -> Result<f64> {
    let e = matexp(&w.map(|v| v * v))?;
    Ok(clamp_nonnegative(e.trace() - w.rows() as f64))
}

/// Gradient of [`acyclicity`]: `(e^{W⊙W})ᵀ ⊙ 2W`.
pub fn acyclicity_grad(w: &Matrix) -> Result<Matrix> {
    Ok(acyclicity_with_grad(w)?.1)
}

/// Value and gradient sharing one exponential.
pub fn acyclicity_with_grad(w: &Matrix) -> Result<(f64, Matrix)> {
    let e = matexp(&w.map(|v| v * v))?;
    let h = clamp_nonnegative(e.trace() - w.rows() as f64);
    let d = w.rows();
    let grad = Matrix::from_fn(d, d, |i, j| e[(j, i)] * 2.0 * w[(i, j)]);
    Ok((h, grad))
}

fn clamp_nonnegative(h: f64) -> f64 {
    if h < 0.0 {
        0.0
    } else {
        h
    }
}
