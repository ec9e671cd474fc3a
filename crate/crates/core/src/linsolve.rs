//! Matrix-free preconditioned conjugate gradients.
//!
//! Every implicit solve in the pipeline (Brinkman momentum blocks, the
//! pressure Schur complement, nutrient and drug diffusion) is symmetric
//! positive semi-definite, so one CG implementation with an optional diagonal
//! preconditioner covers all of them. Operators are supplied as closures over
//! flat slices; callers embed any null-space projection inside the operator
//! and the right-hand side.

use crate::error::{Error, Result};

/// Symmetric positive (semi-)definite operator `y = A x` on flat vectors.
pub trait LinearOperator {
    fn size(&self) -> usize;
    fn apply(&self, x: &[f64], y: &mut [f64]);
}

impl<F: Fn(&[f64], &mut [f64])> LinearOperator for (usize, F) {
    fn size(&self) -> usize {
        self.0
    }
    fn apply(&self, x: &[f64], y: &mut [f64]) {
        (self.1)(x, y)
    }
}

/// Stopping rule and iteration cap for a CG solve.
#[derive(Clone, Copy, Debug)]
pub struct CgOptions {
    /// Stop when `||r||_2 <= max(tol_abs, tol_rel * ||b||_2)`.
    pub tol_rel: f64,
    pub tol_abs: f64,
    pub max_iter: usize,
}

/// Convergence record returned by a successful solve.
#[derive(Clone, Copy, Debug)]
pub struct CgReport {
    pub iterations: usize,
    pub residual: f64,
}

pub fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

pub fn norm2(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

/// Solves `A x = b` in place, starting from the incoming `x`.
/// `precond_diag`, when given, holds the diagonal of `A` (Jacobi).
pub fn conjugate_gradient(
    op: &dyn LinearOperator,
    b: &[f64],
    x: &mut [f64],
    precond_diag: Option<&[f64]>,
    opts: CgOptions,
) -> Result<CgReport> {
    let n = op.size();
    assert_eq!(b.len(), n, "rhs length mismatch");
    assert_eq!(x.len(), n, "solution length mismatch");
    if let Some(d) = precond_diag {
        assert_eq!(d.len(), n, "preconditioner length mismatch");
    }

    let norm_b = norm2(b);
    let threshold = opts.tol_abs.max(opts.tol_rel * norm_b);
    if norm_b == 0.0 {
        x.fill(0.0);
        return Ok(CgReport { iterations: 0, residual: 0.0 });
    }

    let apply_precond = |r: &[f64], z: &mut [f64]| match precond_diag {
        Some(d) => {
            for i in 0..n {
                z[i] = if d[i] != 0.0 { r[i] / d[i] } else { r[i] };
            }
        }
        None => z.copy_from_slice(r),
    };

    let mut r = vec![0.0; n];
    op.apply(x, &mut r);
    for i in 0..n {
        r[i] = b[i] - r[i];
    }
    let mut z = vec![0.0; n];
    apply_precond(&r, &mut z);
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut res = norm2(&r);

    for iter in 0..opts.max_iter {
        if res <= threshold {
            return Ok(CgReport { iterations: iter, residual: res });
        }
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) || !pap.is_finite() {
            return Err(Error::SolverStall {
                iterations: iter,
                residual: res,
                tolerance: threshold,
            });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        res = norm2(&r);
        apply_precond(&r, &mut z);
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    if res <= threshold {
        return Ok(CgReport { iterations: opts.max_iter, residual: res });
    }
    Err(Error::SolverStall {
        iterations: opts.max_iter,
        residual: res,
        tolerance: threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// 1D Dirichlet Laplacian times h^2: tridiagonal (-1, 2, -1).
    fn laplacian_1d(n: usize) -> impl LinearOperator {
        (n, move |x: &[f64], y: &mut [f64]| {
            for i in 0..n {
                let left = if i > 0 { x[i - 1] } else { 0.0 };
                let right = if i + 1 < n { x[i + 1] } else { 0.0 };
                y[i] = 2.0 * x[i] - left - right;
            }
        })
    }

    #[test]
    fn recovers_known_solution() {
        let n = 50;
        let op = laplacian_1d(n);
        let x_true: Vec<f64> = (0..n).map(|i| (i as f64 * 0.3).sin()).collect();
        let mut b = vec![0.0; n];
        op.apply(&x_true, &mut b);
        let mut x = vec![0.0; n];
        let report = conjugate_gradient(
            &op,
            &b,
            &mut x,
            None,
            CgOptions { tol_rel: 1e-12, tol_abs: 0.0, max_iter: 500 },
        )
        .unwrap();
        let err: f64 = x.iter().zip(&x_true).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "max error {err} after {} iterations", report.iterations);
    }

    #[test]
    fn jacobi_preconditioner_helps_badly_scaled_diagonal() {
        // diag(1, 2, ..., n): condition number n. Jacobi solves it in one step.
        let n = 400;
        let diag: Vec<f64> = (1..=n).map(|i| i as f64).collect();
        let d = diag.clone();
        let op = (n, move |x: &[f64], y: &mut [f64]| {
            for i in 0..n {
                y[i] = d[i] * x[i];
            }
        });
        let b: Vec<f64> = (0..n).map(|i| ((i * 7 + 3) % 11) as f64 - 5.0).collect();
        let opts = CgOptions { tol_rel: 1e-10, tol_abs: 0.0, max_iter: 1000 };
        let mut x_plain = vec![0.0; n];
        let plain = conjugate_gradient(&op, &b, &mut x_plain, None, opts).unwrap();
        let mut x_pc = vec![0.0; n];
        let pc = conjugate_gradient(&op, &b, &mut x_pc, Some(&diag), opts).unwrap();
        assert!(pc.iterations < plain.iterations, "{} vs {}", pc.iterations, plain.iterations);
        assert!(pc.iterations <= 2);
    }

    #[test]
    fn zero_rhs_short_circuits() {
        let op = laplacian_1d(10);
        let mut x = vec![1.0; 10];
        let report = conjugate_gradient(
            &op,
            &vec![0.0; 10],
            &mut x,
            None,
            CgOptions { tol_rel: 1e-10, tol_abs: 0.0, max_iter: 10 },
        )
        .unwrap();
        assert_eq!(report.iterations, 0);
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn iteration_cap_reports_stall() {
        let n = 200;
        let op = laplacian_1d(n);
        let b = vec![1.0; n];
        let mut x = vec![0.0; n];
        let err = conjugate_gradient(
            &op,
            &b,
            &mut x,
            None,
            CgOptions { tol_rel: 1e-14, tol_abs: 0.0, max_iter: 3 },
        )
        .unwrap_err();
        match err {
            Error::SolverStall { iterations, .. } => assert_eq!(iterations, 3),
            other => panic!("expected SolverStall, got {other}"),
        }
    }

    proptest! {
        #[test]
        fn diagonal_systems_solve_exactly(
            entries in proptest::collection::vec(0.1f64..10.0, 1..40),
            seed in 0u64..1000,
        ) {
            let n = entries.len();
            let x_true: Vec<f64> = (0..n)
                .map(|i| (((i as u64 + seed) * 2654435761 % 1000) as f64 / 500.0) - 1.0)
                .collect();
            let b: Vec<f64> = entries.iter().zip(&x_true).map(|(d, x)| d * x).collect();
            let d = entries.clone();
            let op = (n, move |x: &[f64], y: &mut [f64]| {
                for i in 0..n { y[i] = d[i] * x[i]; }
            });
            let mut x = vec![0.0; n];
            conjugate_gradient(
                &op, &b, &mut x, Some(&entries),
                CgOptions { tol_rel: 1e-13, tol_abs: 0.0, max_iter: 200 },
            ).unwrap();
            for (a, e) in x.iter().zip(&x_true) {
                prop_assert!((a - e).abs() < 1e-9);
            }
        }
    }
}
