//! Small dense kernels: matrix multiply, Cholesky and LU solves.
//!
//! Everything here operates on row-major `f64` slices. Problem sizes in this
//! crate stay in the dozens-to-hundreds range, so simple triple loops are
//! both fast enough and easy to audit.

use crate::error::{Error, Result};

/// C(m,n) = A(m,k) * B(k,n), row-major.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += aip * brow[j];
            }
        }
    }
    c
}

/// y(m) = A(m,n) * x(n).
pub fn matvec(a: &[f64], x: &[f64], m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(x.len(), n);
    (0..m)
        .map(|i| {
            let row = &a[i * n..(i + 1) * n];
            row.iter().zip(x).map(|(&aij, &xj)| aij * xj).sum()
        })
        .collect()
}

/// y(n) = A(m,n)^T * x(m).
pub fn matvec_t(a: &[f64], x: &[f64], m: usize, n: usize) -> Vec<f64> {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(x.len(), m);
    let mut y = vec![0.0; n];
    for i in 0..m {
        let xi = x[i];
        if xi == 0.0 {
            continue;
        }
        for j in 0..n {
            y[j] += a[i * n + j] * xi;
        }
    }
    y
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut t = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            t[j * m + i] = a[i * n + j];
        }
    }
    t
}

/// Lower-triangular Cholesky factor of a symmetric matrix, or `None` if a
/// non-positive pivot is hit.
pub fn cholesky(mat: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = mat[i * n + j];
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            if i == j {
                if s <= 0.0 || !s.is_finite() {
                    return None;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    Some(l)
}

/// Solve L L^T x = b given the Cholesky factor L.
pub fn cholesky_solve(l: &[f64], b: &[f64], n: usize) -> Vec<f64> {
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut s = b[i];
        for p in 0..i {
            s -= l[i * n + p] * y[p];
        }
        y[i] = s / l[i * n + i];
    }
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = y[i];
        for p in i + 1..n {
            s -= l[p * n + i] * x[p];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// Cholesky factorization of `mat + eps*I` with the adaptive fallback: on
/// failure, multiply eps by 10 and retry, up to `max_retries` times.
/// Returns the factor and the damping actually used.
pub fn cholesky_damped(
    mat: &[f64],
    n: usize,
    eps: f64,
    max_retries: usize,
) -> Result<(Vec<f64>, f64)> {
    let mut cur = eps;
    for retry in 0..=max_retries {
        let mut damped = mat.to_vec();
        for i in 0..n {
            damped[i * n + i] += cur;
        }
        if let Some(l) = cholesky(&damped, n) {
            return Ok((l, cur));
        }
        // eps = 0 cannot escalate multiplicatively; seed the retry ladder.
        cur = if cur <= 0.0 { 1e-12 } else { cur * 10.0 };
        if retry == max_retries {
            break;
        }
    }
    Err(Error::Factorization {
        retries: max_retries,
        final_eps: cur,
    })
}

/// LU factorization with partial pivoting. Returns packed LU and the pivot
/// permutation, or `None` on a (numerically) singular pivot.
pub fn lu_factor(mat: &[f64], n: usize) -> Option<(Vec<f64>, Vec<usize>)> {
    let mut lu = mat.to_vec();
    let mut piv: Vec<usize> = (0..n).collect();
    for col in 0..n {
        let mut pmax = col;
        let mut vmax = lu[col * n + col].abs();
        for r in col + 1..n {
            let v = lu[r * n + col].abs();
            if v > vmax {
                vmax = v;
                pmax = r;
            }
        }
        if vmax < 1e-300 || !vmax.is_finite() {
            return None;
        }
        if pmax != col {
            for j in 0..n {
                lu.swap(col * n + j, pmax * n + j);
            }
            piv.swap(col, pmax);
        }
        let pivot = lu[col * n + col];
        for r in col + 1..n {
            let f = lu[r * n + col] / pivot;
            lu[r * n + col] = f;
            for j in col + 1..n {
                lu[r * n + j] -= f * lu[col * n + j];
            }
        }
    }
    Some((lu, piv))
}

pub fn lu_solve(lu: &[f64], piv: &[usize], b: &[f64], n: usize) -> Vec<f64> {
    let mut x: Vec<f64> = piv.iter().map(|&p| b[p]).collect();
    for i in 0..n {
        for p in 0..i {
            x[i] -= lu[i * n + p] * x[p];
        }
    }
    for i in (0..n).rev() {
        for p in i + 1..n {
            x[i] -= lu[i * n + p] * x[p];
        }
        x[i] /= lu[i * n + i];
    }
    x
}

/// Solve `mat x = b` by LU; on singularity add `damping` to the diagonal and
/// retry once.
pub fn solve_damped(mat: &[f64], b: &[f64], n: usize, damping: f64) -> Result<Vec<f64>> {
    if let Some((lu, piv)) = lu_factor(mat, n) {
        return Ok(lu_solve(&lu, &piv, b, n));
    }
    let mut damped = mat.to_vec();
    for i in 0..n {
        damped[i * n + i] += damping;
    }
    match lu_factor(&damped, n) {
        Some((lu, piv)) => Ok(lu_solve(&lu, &piv, b, n)),
        None => Err(Error::Factorization {
            retries: 1,
            final_eps: damping,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_known() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let c = matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0, 7.0, 8.0], 2, 2, 2);
        assert_eq!(c, vec![19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn cholesky_solves_spd() {
        // A = [4 2; 2 3], b = [2, 1] -> x = [0.5, 0]
        let a = [4.0, 2.0, 2.0, 3.0];
        let l = cholesky(&a, 2).unwrap();
        let x = cholesky_solve(&l, &[2.0, 1.0], 2);
        assert!((x[0] - 0.5).abs() < 1e-12);
        assert!(x[1].abs() < 1e-12);
    }

    #[test]
    fn cholesky_damped_escalates() {
        // Rank-deficient matrix: plain factorization fails, damping succeeds.
        let a = [1.0, 1.0, 1.0, 1.0];
        assert!(cholesky(&a, 2).is_none());
        let (_, eps) = cholesky_damped(&a, 2, 1e-6, 6).unwrap();
        assert!(eps >= 1e-6);
    }

    #[test]
    fn lu_solves_general() {
        // Nonsymmetric: [0 1; 2 1] x = [3, 5] -> x = [1, 3]
        let a = [0.0, 1.0, 2.0, 1.0];
        let (lu, piv) = lu_factor(&a, 2).unwrap();
        let x = lu_solve(&lu, &piv, &[3.0, 5.0], 2);
        assert!((x[0] - 1.0).abs() < 1e-12);
        assert!((x[1] - 3.0).abs() < 1e-12);
    }
}
