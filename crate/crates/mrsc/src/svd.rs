//! One-sided Jacobi singular value decomposition.
//!
//! The donor-matrix SVD must be bit-deterministic and correct for wide
//! matrices; nalgebra's built-in SVD returns inconsistent factorizations for
//! some wide inputs (the reconstruction does not match the reported
//! spectrum), so the decomposition is done here instead. One-sided Jacobi
//! orthogonalizes the columns of a working copy with plane rotations in a
//! fixed cyclic order: no pivoting heuristics, no threading, and high
//! relative accuracy.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 64;
const TOL: f64 = 1e-14;

/// Thin SVD `a = u * diag(s) * v_t` with `s` nonincreasing.
///
/// Shapes match the usual thin convention: `u` is m x min(m, n), `v_t` is
/// min(m, n) x n. Columns of `u` paired with zero singular values are zero
/// vectors.
pub(crate) struct ThinSvd {
    pub u: DMatrix<f64>,
    pub s: Vec<f64>,
    pub v_t: DMatrix<f64>,
}

/// Decomposes `a`, internally working on the tall orientation.
pub(crate) fn thin_svd(a: &DMatrix<f64>) -> Result<ThinSvd> {
    if a.nrows() >= a.ncols() {
        let (u, s, v) = jacobi_tall(a.clone())?;
        Ok(ThinSvd {
            u,
            s,
            v_t: v.transpose(),
        })
    } else {
        let (u, s, v) = jacobi_tall(a.transpose())?;
        Ok(ThinSvd {
            u: v,
            s,
            v_t: u.transpose(),
        })
    }
}

/// Nonincreasing singular values of `a`.
pub(crate) fn singular_values(a: &DMatrix<f64>) -> Result<Vec<f64>> {
    let work = if a.nrows() >= a.ncols() {
        a.clone()
    } else {
        a.transpose()
    };
    let (_, mut s) = orthogonalize_columns(work, false)?;
    sort_desc(&mut s);
    let floor = s.first().copied().unwrap_or(0.0) * f64::EPSILON;
    for sj in &mut s {
        if *sj <= floor {
            *sj = 0.0;
        }
    }
    Ok(s)
}

/// Hestenes one-sided Jacobi on a tall matrix; returns (U, s, V) with
/// `a = U * diag(s) * V'`, s sorted nonincreasing.
fn jacobi_tall(a: DMatrix<f64>) -> Result<(DMatrix<f64>, Vec<f64>, DMatrix<f64>)> {
    let (work_v, mut s) = orthogonalize_columns(a, true)?;
    let (mut work, mut v) = work_v;

    let order = sort_desc(&mut s);
    permute_columns(&mut work, &order);
    permute_columns(&mut v, &order);

    // Norms at rounding-noise level are numerically zero singular values:
    // report them as exact zeros with zero U columns rather than normalizing
    // noise into fake directions.
    let floor = s.first().copied().unwrap_or(0.0) * f64::EPSILON;
    let mut u = work;
    for (j, sj) in s.iter_mut().enumerate() {
        if *sj > floor {
            let mut col = u.column_mut(j);
            col /= *sj;
        } else {
            *sj = 0.0;
            u.column_mut(j).fill(0.0);
        }
    }
    Ok((u, s, v))
}

type WorkAndV = (DMatrix<f64>, DMatrix<f64>);

/// Core sweep loop. Returns the rotated working matrix (columns mutually
/// orthogonal), the accumulated V when requested, and the column norms.
#[allow(clippy::type_complexity)]
fn orthogonalize_columns(
    mut work: DMatrix<f64>,
    accumulate_v: bool,
) -> Result<(WorkAndV, Vec<f64>)> {
    let n = work.ncols();
    let mut v = DMatrix::<f64>::identity(if accumulate_v { n } else { 0 }, if accumulate_v { n } else { 0 });

    let mut converged = false;
    for _ in 0..MAX_SWEEPS {
        // Columns whose norm has collapsed to rounding noise are numerically
        // zero singular directions; rotating them against each other would
        // never converge.
        let scale = (0..n)
            .map(|j| work.column(j).norm_squared())
            .fold(0.0_f64, f64::max);
        let negligible = scale * (f64::EPSILON * f64::EPSILON);

        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let (alpha, beta, gamma) = {
                    let cp = work.column(p);
                    let cq = work.column(q);
                    (cp.dot(&cp), cq.dot(&cq), cp.dot(&cq))
                };
                if alpha <= negligible || beta <= negligible {
                    continue;
                }
                if gamma == 0.0 || gamma.abs() <= TOL * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate_columns(&mut work, p, q, c, s);
                if accumulate_v {
                    rotate_columns(&mut v, p, q, c, s);
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdFailure);
    }

    let norms: Vec<f64> = (0..n).map(|j| work.column(j).norm()).collect();
    Ok(((work, v), norms))
}

#[inline]
fn rotate_columns(m: &mut DMatrix<f64>, p: usize, q: usize, c: f64, s: f64) {
    for r in 0..m.nrows() {
        let mp = m[(r, p)];
        let mq = m[(r, q)];
        m[(r, p)] = c * mp - s * mq;
        m[(r, q)] = s * mp + c * mq;
    }
}

/// Sorts `s` descending (ties by original index) and returns the permutation.
fn sort_desc(s: &mut [f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..s.len()).collect();
    order.sort_by(|&a, &b| s[b].partial_cmp(&s[a]).unwrap().then(a.cmp(&b)));
    let sorted: Vec<f64> = order.iter().map(|&i| s[i]).collect();
    s.copy_from_slice(&sorted);
    order
}

fn permute_columns(m: &mut DMatrix<f64>, order: &[usize]) {
    let src = m.clone();
    for (dst, &s) in order.iter().enumerate() {
        m.column_mut(dst).copy_from(&src.column(s));
    }
}
