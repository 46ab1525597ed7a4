//! Small dense complex linear-algebra helpers on top of `nalgebra`.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;

/// Matrices with a 2-norm condition number above this are refused.
pub const MAX_CONDITION: f64 = 1e12;

pub const I: C64 = C64::new(0.0, 1.0);

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

/// Largest singular value.
pub fn op_norm(m: &CMat) -> f64 {
    if m.nrows() == 0 || m.ncols() == 0 {
        return 0.0;
    }
    if m.nrows() == 1 && m.ncols() == 1 {
        return m[(0, 0)].norm();
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .cloned()
        .fold(0.0, f64::max)
}

/// 2-norm condition number; `inf` for an exactly singular matrix.
pub fn condition_number(m: &CMat) -> f64 {
    if m.nrows() == 1 && m.ncols() == 1 {
        return if m[(0, 0)].norm() > 0.0 { 1.0 } else { f64::INFINITY };
    }
    let sv = m.clone().svd(false, false).singular_values;
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    let smin = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin == 0.0 {
        f64::INFINITY
    } else {
        smax / smin
    }
}

/// Inverse through LU with partial pivoting, refusing ill-conditioned input.
pub fn checked_inverse(m: &CMat, what: &str) -> Result<(CMat, f64)> {
    let cond = condition_number(m);
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::Conditioning {
            what: what.to_string(),
            cond,
        });
    }
    let inv = m.clone().lu().try_inverse().ok_or_else(|| Error::Conditioning {
        what: what.to_string(),
        cond: f64::INFINITY,
    })?;
    Ok((inv, cond))
}

/// `X* X`, written |X|² in the operator notation.
pub fn abs2(m: &CMat) -> CMat {
    m.adjoint() * m
}

/// Hermitian "imaginary part" `(M - M*) / 2i`.
pub fn im_part(m: &CMat) -> CMat {
    (m - m.adjoint()) * C64::new(0.0, -0.5)
}

/// Hermitian "real part" `(M + M*) / 2`.
pub fn re_part(m: &CMat) -> CMat {
    (m + m.adjoint()) * C64::new(0.5, 0.0)
}

/// Eigenvalues of a Hermitian matrix, ascending.
pub fn hermitian_eigenvalues(m: &CMat) -> Vec<f64> {
    let h = re_part(m);
    let mut ev: Vec<f64> = h.symmetric_eigen().eigenvalues.iter().cloned().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    ev
}

pub fn max_abs(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

pub fn hermiticity_defect(m: &CMat) -> f64 {
    max_abs(&(m - m.adjoint()))
}

pub fn is_finite(m: &CMat) -> bool {
    m.iter().all(|z| z.re.is_finite() && z.im.is_finite())
}

/// Euclidean norm of a complex vector slice.
pub fn vec_norm(v: &[C64]) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// `out = a * b` for column-major `a` (rows × inner) and `b` (inner × cols).
#[inline]
pub fn gemm_into(a: &[C64], rows: usize, inner: usize, b: &[C64], cols: usize, out: &mut [C64]) {
    debug_assert_eq!(a.len(), rows * inner);
    debug_assert_eq!(b.len(), inner * cols);
    debug_assert_eq!(out.len(), rows * cols);
    for c in 0..cols {
        let oc = &mut out[c * rows..(c + 1) * rows];
        oc.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
        for p in 0..inner {
            let bp = b[c * inner + p];
            if bp == C64::new(0.0, 0.0) {
                continue;
            }
            let ac = &a[p * rows..(p + 1) * rows];
            for (o, x) in oc.iter_mut().zip(ac) {
                *o += x * bp;
            }
        }
    }
}
