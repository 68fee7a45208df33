//! Matrix kernels used by the layers, plus a semidefinite Cholesky factorisation.

use alloc::vec::Vec;
use alloc::{format, vec};

use crate::{Error, Result};

/// Operand layout for [`gemm`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    /// Use the row-major matrix as stored.
    N,
    /// Use its transpose.
    T,
}

/// `C = alpha · op(A) · op(B) + beta · C` with `op(A)` of size `m × k`,
/// `op(B)` of size `k × n` and `C` of size `m × n`, all row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    op_a: Op,
    b: &[f64],
    op_b: Op,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = match op_a {
        Op::N => (k as isize, 1),
        Op::T => (1, m as isize),
    };
    let (rsb, csb) = match op_b {
        Op::N => (n as isize, 1),
        Op::T => (1, k as isize),
    };
    // SAFETY: the asserts above bound every index the kernel touches given
    // these dense strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Lower-triangular `L` with `L Lᵀ = A` for a symmetric positive
/// semidefinite `n × n` matrix `A`.
///
/// Pivots in `[-tol, tol]` are treated as exact zeros and their column is
/// left empty, which is how rank-deficient covariances (constant pixels)
/// factor cleanly. A pivot below `-tol` means `A` is not semidefinite at that
/// tolerance.
pub fn psd_cholesky(a: &[f64], n: usize, tol: f64) -> Result<Vec<f64>> {
    if a.len() != n * n {
        return Err(Error::Shape(format!(
            "cholesky of {n}x{n} matrix given {} entries",
            a.len()
        )));
    }
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let row_j = j * n;
        let d = a[row_j + j] - dot(&l[row_j..row_j + j], &l[row_j..row_j + j]);
        if !d.is_finite() || d < -tol {
            return Err(Error::Numeric(format!(
                "covariance factorisation failed at pivot {j} (value {d:e}); use a larger ridge than {tol:e}"
            )));
        }
        if d <= tol {
            continue;
        }
        let root = libm::sqrt(d);
        l[row_j + j] = root;
        for i in j + 1..n {
            let row_i = i * n;
            let s = a[row_i + j] - dot(&l[row_i..row_i + j], &l[row_j..row_j + j]);
            l[row_i + j] = s / root;
        }
    }
    Ok(l)
}
