//! Cyclic Jacobi eigensolver for dense symmetric matrices.
//!
//! Cost is O(n³) per sweep and typically 6-10 sweeps; intended for the full
//! Gauss-Newton spectra of small nets (n up to a couple of thousand).

use crate::error::{Error, Result};
use crate::linalg::Matrix;

const MAX_SWEEPS: usize = 100;
const OFF_TOL: f64 = 1e-12;

pub const DEFAULT_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct SymEig {
    /// Descending.
    pub values: Vec<f64>,
    /// Row `k` is the unit eigenvector for `values[k]`.
    pub vectors: Matrix,
}

fn off_diagonal_norm(a: &[f64], n: usize) -> f64 {
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a[i * n + j] * a[i * n + j];
            }
        }
    }
    s.sqrt()
}

/// Rows `p < q` of a row-major `n`-column buffer become
/// `(c r_p − s r_q, s r_p + c r_q)`.
fn rotate_rows(buf: &mut [f64], n: usize, p: usize, q: usize, c: f64, s: f64) {
    let (head, tail) = buf.split_at_mut(q * n);
    let rp = &mut head[p * n..(p + 1) * n];
    let rq = &mut tail[..n];
    for (x, y) in rp.iter_mut().zip(rq.iter_mut()) {
        let (a, b) = (*x, *y);
        *x = c * a - s * b;
        *y = s * a + c * b;
    }
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations,
/// iterated until the off-diagonal Frobenius mass is below `1e-12 · |A|_F`.
pub fn sym_eig(a: &Matrix) -> Result<SymEig> {
    jacobi(a, true)
}

/// Eigenvalues only, descending; skips the eigenvector accumulation of [`sym_eig`].
pub fn sym_eigvals(a: &Matrix) -> Result<Vec<f64>> {
    Ok(jacobi(a, false)?.values)
}

fn jacobi(a: &Matrix, vectors: bool) -> Result<SymEig> {
    if !a.is_square() {
        return Err(Error::shape(format!("{}x{} matrix is not square", a.rows(), a.cols())));
    }
    let n = a.rows();
    let asym = a.asymmetry();
    if asym > 1e-9 * a.max_abs().max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    if !a.all_finite() {
        return Err(Error::NonFinite { what: "matrix", index: 0 });
    }
    // symmetrized working copy
    let mut w = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            w[i * n + j] = 0.5 * (a[(i, j)] + a[(j, i)]);
        }
    }
    // rows of `v` are eigenvectors
    let mut v = if vectors { Matrix::identity(n) } else { Matrix::zeros(0, n) };
    let scale = a.frobenius();
    let target = OFF_TOL * scale;

    let mut converged = n < 2 || scale == 0.0;
    // Round-robin ordering: each sweep visits every pair once, in n - 1 rounds
    // of disjoint pairs. A round's rotations commute, so they are applied as
    // one row pass and one column pass, both along contiguous rows.
    let m = n + n % 2;
    let mut ring: Vec<usize> = (0..m).collect();
    let mut rots: Vec<(usize, usize, f64, f64)> = Vec::with_capacity(m / 2);
    for _ in 0..MAX_SWEEPS {
        if converged || off_diagonal_norm(&w, n) < target {
            converged = true;
            break;
        }
        for _ in 0..m - 1 {
            rots.clear();
            for i in 0..m / 2 {
                let (a, b) = (ring[i], ring[m - 1 - i]);
                if a >= n || b >= n {
                    continue;
                }
                let (p, q) = (a.min(b), a.max(b));
                let apq = w[p * n + q];
                let (app, aqq) = (w[p * n + p], w[q * n + q]);
                if apq.abs() < f64::MIN_POSITIVE || apq.abs() < 1e-18 * (app * aqq).abs().sqrt() {
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta.is_finite() {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                } else {
                    0.0
                };
                if t == 0.0 {
                    continue;
                }
                let c = 1.0 / (t * t + 1.0).sqrt();
                rots.push((p, q, c, t * c));
            }
            for &(p, q, c, s) in &rots {
                rotate_rows(&mut w, n, p, q, c, s);
                if vectors {
                    rotate_rows(v.as_mut_slice(), n, p, q, c, s);
                }
            }
            for row in w.chunks_exact_mut(n) {
                for &(p, q, c, s) in &rots {
                    let (a, b) = (row[p], row[q]);
                    row[p] = c * a - s * b;
                    row[q] = s * a + c * b;
                }
            }
            for &(p, q, _, _) in &rots {
                w[p * n + q] = 0.0;
                w[q * n + p] = 0.0;
            }
            ring[1..].rotate_right(1);
        }
    }
    if !converged && off_diagonal_norm(&w, n) >= target {
        return Err(Error::invalid(format!("Jacobi iteration did not converge in {MAX_SWEEPS} sweeps")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| w[j * n + j].total_cmp(&w[i * n + i]));
    let values = order.iter().map(|&i| w[i * n + i]).collect();
    Ok(SymEig {
        values,
        vectors: if vectors { v.select_rows(&order) } else { v },
    })
}

/// `λ_max / λ_min⁺` over eigenvalues `> rank_tol · λ_max`.
///
/// Returns `+∞` when no eigenvalue clears the tolerance (only possible for
/// `rank_tol ≥ 1`).
pub fn condition_number_from_values(values: &[f64], rank_tol: f64) -> Result<f64> {
    let lmax = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lmax > 0.0) {
        return Err(Error::ZeroMatrix);
    }
    let cut = rank_tol * lmax;
    match values.iter().copied().filter(|&l| l > cut).reduce(f64::min) {
        Some(lmin) => Ok(lmax / lmin),
        None => Ok(f64::INFINITY),
    }
}

pub fn condition_number(a: &Matrix, rank_tol: f64) -> Result<f64> {
    condition_number_from_values(&sym_eigvals(a)?, rank_tol)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn check_decomposition(a: &Matrix, e: &SymEig) {
        let n = a.rows();
        let scale = a.frobenius().max(1.0);
        for k in 0..n {
            let vk = e.vectors.row(k);
            let av = a.matvec(vk);
            for i in 0..n {
                assert!((av[i] - e.values[k] * vk[i]).abs() <= 1e-8 * scale);
            }
        }
        let vvt = e.vectors.matmul(&e.vectors.transpose()).unwrap();
        assert!(vvt.sub(&Matrix::identity(n)).max_abs() < 1e-9);
    }

    #[test]
    fn small_examples() {
        let e = sym_eig(&Matrix::from_diag(&[1.0, 3.0])).unwrap();
        assert_eq!(e.values, vec![3.0, 1.0]);
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let e = sym_eig(&a).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-14 && (e.values[1] - 1.0).abs() < 1e-14);
        check_decomposition(&a, &e);
        for n in [1, 4, 9] {
            let e = sym_eig(&Matrix::identity(n)).unwrap();
            assert!(e.values.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn rejects_non_symmetric() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&a), Err(Error::NotSymmetric(_))));
        assert!(sym_eig(&Matrix::zeros(2, 3)).is_err());
    }

    #[test]
    fn random_symmetric_matrices() {
        for seed in 0..5 {
            let mut r = crate::rng::substream(seed, 0, 0);
            let n = 12 + seed as usize * 7;
            let b = Matrix::from_vec(n, n, crate::rng::normal_vec(&mut r, n * n)).unwrap();
            let a = b.matmul(&b.transpose()).unwrap().sub(&Matrix::identity(n));
            let e = sym_eig(&a).unwrap();
            check_decomposition(&a, &e);
            assert_eq!(sym_eigvals(&a).unwrap(), e.values);
            assert!(e.values.windows(2).all(|w| w[0] >= w[1]));
            let trace: f64 = (0..n).map(|i| a[(i, i)]).sum();
            assert!((e.values.iter().sum::<f64>() - trace).abs() < 1e-9 * trace.abs().max(1.0));
        }
    }

    #[test]
    fn condition_number_examples() {
        assert_eq!(condition_number(&Matrix::from_diag(&[10.0, 1.0]), DEFAULT_RANK_TOL).unwrap(), 10.0);
        assert_eq!(condition_number(&Matrix::from_diag(&[5.0, 5.0]), DEFAULT_RANK_TOL).unwrap(), 1.0);
        assert_eq!(condition_number(&Matrix::from_diag(&[1.0, 1e-20]), 1e-12).unwrap(), 1.0);
        assert_eq!(condition_number(&Matrix::zeros(3, 3), 1e-10), Err(Error::ZeroMatrix));
        assert_eq!(condition_number_from_values(&[2.0, 1.0], 1.0).unwrap(), f64::INFINITY);
    }
}
