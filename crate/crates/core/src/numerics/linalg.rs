use crate::error::{Error, Result};
use crate::numerics::Matrix;

const SYMMETRY_TOLERANCE: f64 = 1e-10;

/// Lower-triangular Cholesky factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    pub fn factor(a: &Matrix) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::Dimension(format!(
                "cholesky of a {}x{} matrix",
                a.rows(),
                a.cols()
            )));
        }
        let scale = a.max_abs().max(1.0);
        if !a.is_symmetric(SYMMETRY_TOLERANCE * scale) {
            return Err(Error::Argument("matrix is not symmetric".into()));
        }
        let n = a.rows();
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let mut diag = a[(j, j)];
            for k in 0..j {
                diag -= l[(j, k)] * l[(j, k)];
            }
            if !(diag > 0.0) {
                return Err(Error::NotPositiveDefinite {
                    pivot: j,
                    value: diag,
                });
            }
            let ljj = diag.sqrt();
            l[(j, j)] = ljj;
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                l[(i, j)] = s / ljj;
            }
        }
        Ok(Self { l })
    }

    /// Solves `A X = C` column by column.
    pub fn solve(&self, c: &Matrix) -> Result<Matrix> {
        let n = self.l.rows();
        if c.rows() != n {
            return Err(Error::Dimension(format!(
                "right-hand side has {} rows, system has {n}",
                c.rows()
            )));
        }
        let mut x = c.clone();
        for col in 0..c.cols() {
            // forward: L y = c
            for i in 0..n {
                let mut s = x[(i, col)];
                for k in 0..i {
                    s -= self.l[(i, k)] * x[(k, col)];
                }
                x[(i, col)] = s / self.l[(i, i)];
            }
            // backward: Lᵀ x = y
            for i in (0..n).rev() {
                let mut s = x[(i, col)];
                for k in i + 1..n {
                    s -= self.l[(k, i)] * x[(k, col)];
                }
                x[(i, col)] = s / self.l[(i, i)];
            }
        }
        Ok(x)
    }
}

/// Solves `A X = C` for symmetric positive-definite `A`.
pub fn solve_spd_linear(a: &Matrix, c: &Matrix) -> Result<Matrix> {
    Cholesky::factor(a)?.solve(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_system_returns_rhs() {
        let c = Matrix::from_rows(&[vec![1.0, -2.0], vec![3.5, 0.25]]).unwrap();
        assert_eq!(solve_spd_linear(&Matrix::identity(2), &c).unwrap(), c);
    }

    #[test]
    fn scalar_system() {
        let x = solve_spd_linear(&Matrix::identity(3).scale(2.0), &Matrix::identity(3)).unwrap();
        assert!(x.sub(&Matrix::identity(3).scale(0.5)).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn two_by_two_inverse() {
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let x = solve_spd_linear(&a, &Matrix::identity(2)).unwrap();
        let expected =
            Matrix::from_rows(&[vec![2.0 / 3.0, -1.0 / 3.0], vec![-1.0 / 3.0, 2.0 / 3.0]]).unwrap();
        assert!(x.sub(&expected).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn residual_is_small_on_random_system() {
        let n = 8;
        let b = Matrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 11) as f64 / 11.0 - 0.4);
        let mut a = b.gram();
        a.axpy(0.1, &Matrix::identity(n)).unwrap();
        let c = Matrix::from_fn(n, 3, |i, j| (i as f64 - j as f64).sin());
        let x = solve_spd_linear(&a, &c).unwrap();
        let resid = a.matmul(&x).unwrap().sub(&c).unwrap().frobenius_norm();
        assert!(resid / c.frobenius_norm() <= 1e-10);
    }

    #[test]
    fn indefinite_matrix_is_rejected() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(
            solve_spd_linear(&a, &Matrix::identity(2)),
            Err(Error::NotPositiveDefinite { pivot: 1, .. })
        ));
        assert!(matches!(
            solve_spd_linear(&Matrix::zeros(2, 2), &Matrix::identity(2)),
            Err(Error::NotPositiveDefinite { pivot: 0, .. })
        ));
    }

    #[test]
    fn asymmetric_matrix_is_rejected() {
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![0.0, 2.0]]).unwrap();
        assert!(matches!(
            solve_spd_linear(&a, &Matrix::identity(2)),
            Err(Error::Argument(_))
        ));
    }
}
