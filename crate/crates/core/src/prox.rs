//! Proximal operators for the l1 and nuclear norms, with the symmetric
//! eigendecomposition and thin SVD they require.
//!
//! `prox_{lambda||.||}(V) = argmin_Z (1/2)||Z - V||_F^2 + lambda||Z||`:
//! elementwise soft-thresholding for the l1 norm, singular-value
//! soft-thresholding for the nuclear norm. `prox_oracle` is a brute-force
//! reference minimizer used by the test suite.

use crate::dense::DenseMatrix;
use crate::error::{Error, Result};

const JACOBI_MAX_SWEEPS: usize = 100;

/// Elementwise soft-thresholding: `sign(m) * max(|m| - lambda, 0)`.
pub fn soft_threshold(m: &DenseMatrix, lambda: f64) -> Result<DenseMatrix> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("negative threshold {lambda}")));
    }
    Ok(m.map(|v| v.signum() * (v.abs() - lambda).max(0.0)))
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the corresponding orthonormal
/// eigenvectors as matrix columns. Sweeps run until the off-diagonal
/// Frobenius norm falls below `1e-12 * max(1, ||M||_F)`; convergence is
/// quadratic, so hitting the sweep cap indicates corrupt input.
pub fn eig_sym(m: &DenseMatrix) -> Result<(Vec<f64>, DenseMatrix)> {
    let n = m.n_rows();
    if m.n_cols() != n {
        return Err(Error::InvalidArgument("eig_sym requires a square matrix".into()));
    }
    let asym = m.max_abs_diff(&m.transpose());
    if asym > 1e-10 * m.frobenius_norm().max(1.0) {
        return Err(Error::InvalidArgument(format!(
            "eig_sym requires a symmetric matrix (asymmetry {asym:e})"
        )));
    }

    let mut a = m.clone();
    let mut v = DenseMatrix::identity(n);
    let tol = 1e-12 * m.frobenius_norm().max(1.0);

    let off_norm = |a: &DenseMatrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a.get(i, j) * a.get(i, j);
                }
            }
        }
        s.sqrt()
    };

    let mut converged = n <= 1 || off_norm(&a) <= tol;
    let mut sweeps = 0;
    while !converged {
        if sweeps >= JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence { sweeps, off_norm: off_norm(&a) });
        }
        for p in 0..n - 1 {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                // Rotation angle chosen to annihilate a[p][q].
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = if theta.abs() > 1e100 {
                    1.0 / (2.0 * theta)
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - s * akq);
                    a.set(k, q, s * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - s * aqk);
                    a.set(q, k, s * apk + c * aqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
        sweeps += 1;
        converged = off_norm(&a) <= tol;
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a.get(i, i).partial_cmp(&a.get(j, j)).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| a.get(i, i)).collect();
    let mut vectors = DenseMatrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, new_col, v.get(r, old_col));
        }
    }
    Ok((eigenvalues, vectors))
}

/// Thin singular value decomposition `M = U diag(s) V^T` with
/// `r = min(n_rows, n_cols)` factors and non-increasing singular values.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: DenseMatrix,
    pub s: Vec<f64>,
    pub v: DenseMatrix,
}

/// Thin SVD via eigendecomposition of the smaller Gram matrix. Columns for
/// numerically zero singular values (below `1e-10 * s_max`) are completed
/// by orthogonalizing canonical basis vectors against the known columns.
pub fn thin_svd(m: &DenseMatrix) -> Result<ThinSvd> {
    let (n, d) = m.shape();
    if d <= n {
        let gram = m.transpose().matmul(m)?;
        let (evals, evecs) = eig_sym(&gram)?;
        let (s, v) = descending_factors(&evals, &evecs);
        let u = recover_side(m, &v, &s)?;
        Ok(ThinSvd { u, s, v })
    } else {
        let gram = m.matmul(&m.transpose())?;
        let (evals, evecs) = eig_sym(&gram)?;
        let (s, u) = descending_factors(&evals, &evecs);
        let v = recover_side(&m.transpose(), &u, &s)?;
        Ok(ThinSvd { u, s, v })
    }
}

fn descending_factors(evals: &[f64], evecs: &DenseMatrix) -> (Vec<f64>, DenseMatrix) {
    let r = evals.len();
    let s: Vec<f64> = evals.iter().rev().map(|&l| l.max(0.0).sqrt()).collect();
    let mut cols = DenseMatrix::zeros(evecs.n_rows(), r);
    for new_col in 0..r {
        let old_col = r - 1 - new_col;
        for row in 0..evecs.n_rows() {
            cols.set(row, new_col, evecs.get(row, old_col));
        }
    }
    (s, cols)
}

/// Recovers the left factor `U = M V diag(1/s)`, filling columns with
/// negligible singular values by Gram-Schmidt against the ones already known.
fn recover_side(m: &DenseMatrix, v: &DenseMatrix, s: &[f64]) -> Result<DenseMatrix> {
    let n = m.n_rows();
    let r = s.len();
    let s_max = s.first().copied().unwrap_or(0.0);
    let cutoff = 1e-10 * s_max;
    let mv = m.matmul(v)?;
    let mut u = DenseMatrix::zeros(n, r);
    for col in 0..r {
        if s[col] > cutoff && s[col] > 0.0 {
            for row in 0..n {
                u.set(row, col, mv.get(row, col) / s[col]);
            }
        } else {
            fill_orthonormal_column(&mut u, col, n);
        }
    }
    Ok(u)
}

fn fill_orthonormal_column(u: &mut DenseMatrix, col: usize, n: usize) {
    for candidate in 0..n {
        let mut vec: Vec<f64> = vec![0.0; n];
        vec[candidate] = 1.0;
        for prev in 0..col {
            let dot: f64 = (0..n).map(|r| vec[r] * u.get(r, prev)).sum();
            for (r, v) in vec.iter_mut().enumerate() {
                *v -= dot * u.get(r, prev);
            }
        }
        let norm: f64 = vec.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.5 {
            for (r, v) in vec.iter().enumerate() {
                u.set(r, col, v / norm);
            }
            return;
        }
    }
    // Unreachable for col < n: n basis vectors cannot all lie in a
    // (col < n)-dimensional span.
    panic!("failed to complete orthonormal basis");
}

/// Singular-value soft-thresholding: `U diag((s_i - lambda)_+) V^T`.
pub fn prox_nuclear(m: &DenseMatrix, lambda: f64) -> Result<DenseMatrix> {
    if lambda < 0.0 {
        return Err(Error::InvalidArgument(format!("negative threshold {lambda}")));
    }
    let svd = thin_svd(m)?;
    let (n, d) = m.shape();
    let r = svd.s.len();
    let mut out = DenseMatrix::zeros(n, d);
    for k in 0..r {
        let sk = (svd.s[k] - lambda).max(0.0);
        if sk == 0.0 {
            continue;
        }
        for i in 0..n {
            let uik = svd.u.get(i, k) * sk;
            for j in 0..d {
                out.set(i, j, out.get(i, j) + uik * svd.v.get(j, k));
            }
        }
    }
    Ok(out)
}

/// Which norm `prox_oracle` minimizes against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProxNorm {
    L1,
    Nuclear,
}

/// Brute-force reference minimizer of `(1/2)||Z - V||_F^2 + lambda ||Z||`
/// for small inputs (at most 8x8). The problem separates into scalar
/// subproblems (per entry for l1, per singular value of V for nuclear),
/// each minimized numerically by golden-section search — no thresholding
/// formula is used anywhere.
pub fn prox_oracle(v: &DenseMatrix, lambda: f64, norm: ProxNorm) -> Result<DenseMatrix> {
    assert!(
        v.n_rows() <= 8 && v.n_cols() <= 8,
        "prox_oracle is a test harness for small inputs"
    );
    match norm {
        ProxNorm::L1 => {
            Ok(v.map(|x| {
                let bound = x.abs() + lambda.abs() + 1.0;
                golden_min(|z| 0.5 * (z - x) * (z - x) + lambda * z.abs(), -bound, bound)
            }))
        }
        ProxNorm::Nuclear => {
            let svd = thin_svd(v)?;
            let (n, d) = v.shape();
            let mut out = DenseMatrix::zeros(n, d);
            for (k, &gamma) in svd.s.iter().enumerate() {
                let t = golden_min(
                    |z| 0.5 * (z - gamma) * (z - gamma) + lambda * z.abs(),
                    0.0,
                    gamma + lambda + 1.0,
                );
                if t <= 0.0 {
                    continue;
                }
                for i in 0..n {
                    let uik = svd.u.get(i, k) * t;
                    for j in 0..d {
                        out.set(i, j, out.get(i, j) + uik * svd.v.get(j, k));
                    }
                }
            }
            Ok(out)
        }
    }
}

/// Golden-section search for the minimizer of a unimodal scalar function.
fn golden_min(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
    const PHI: f64 = 0.618_033_988_749_894_9;
    let mut x1 = hi - PHI * (hi - lo);
    let mut x2 = lo + PHI * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    for _ in 0..200 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - PHI * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + PHI * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

/// Objective `(1/2)||Z - V||_F^2 + lambda ||Z||` evaluated at `z`.
pub fn prox_objective(z: &DenseMatrix, v: &DenseMatrix, lambda: f64, norm: ProxNorm) -> Result<f64> {
    let resid = z.sub(v)?;
    let fit = 0.5 * resid.frobenius_norm().powi(2);
    let penalty = match norm {
        ProxNorm::L1 => z.data().iter().map(|x| x.abs()).sum::<f64>(),
        ProxNorm::Nuclear => thin_svd(z)?.s.iter().sum::<f64>(),
    };
    Ok(fit + lambda * penalty)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, d: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        let mut m = DenseMatrix::zeros(n, d);
        for v in m.data_mut() {
            *v = rng.random_range(-2.0..2.0);
        }
        m
    }

    #[test]
    fn soft_threshold_examples() {
        let m = DenseMatrix::from_rows(&[vec![1.2]]).unwrap();
        assert!((soft_threshold(&m, 0.5).unwrap().get(0, 0) - 0.7).abs() < 1e-15);
        let m = DenseMatrix::from_rows(&[vec![-0.3]]).unwrap();
        assert_eq!(soft_threshold(&m, 0.5).unwrap().get(0, 0), 0.0);
        let m = DenseMatrix::from_rows(&[vec![1.5, -2.5]]).unwrap();
        assert_eq!(soft_threshold(&m, 0.0).unwrap(), m);
        assert!(soft_threshold(&m, -1.0).is_err());
    }

    #[test]
    fn eig_sym_diagonal() {
        let m = DenseMatrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let (evals, evecs) = eig_sym(&m).unwrap();
        assert!((evals[0] - 1.0).abs() < 1e-12);
        assert!((evals[1] - 3.0).abs() < 1e-12);
        // Axis eigenvectors up to sign.
        assert!(evecs.get(1, 0).abs() > 0.999);
        assert!(evecs.get(0, 1).abs() > 0.999);
    }

    #[test]
    fn eig_sym_standard_two_by_two() {
        let m = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let (evals, evecs) = eig_sym(&m).unwrap();
        assert!((evals[0] + 1.0).abs() < 1e-12);
        assert!((evals[1] - 1.0).abs() < 1e-12);
        let inv_sqrt2 = 1.0 / 2.0f64.sqrt();
        for col in 0..2 {
            assert!((evecs.get(0, col).abs() - inv_sqrt2).abs() < 1e-10);
            assert!((evecs.get(1, col).abs() - inv_sqrt2).abs() < 1e-10);
        }
    }

    #[test]
    fn eig_sym_reconstructs_random_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let raw = random_matrix(10, 10, &mut rng);
        let m = raw.add(&raw.transpose()).unwrap().scale(0.5);
        let (evals, v) = eig_sym(&m).unwrap();
        let mut lam = DenseMatrix::zeros(10, 10);
        for (i, &e) in evals.iter().enumerate() {
            lam.set(i, i, e);
        }
        let recon = v.matmul(&lam).unwrap().matmul(&v.transpose()).unwrap();
        assert!(recon.sub(&m).unwrap().frobenius_norm() <= 1e-8);
        let vtv = v.transpose().matmul(&v).unwrap();
        assert!(vtv.max_abs_diff(&DenseMatrix::identity(10)) <= 1e-10);
    }

    #[test]
    fn eig_sym_rejects_asymmetric() {
        let m = DenseMatrix::from_rows(&[vec![0.0, 1.0], vec![0.0, 0.0]]).unwrap();
        assert!(eig_sym(&m).is_err());
    }

    #[test]
    fn thin_svd_diagonal() {
        let m = DenseMatrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let svd = thin_svd(&m).unwrap();
        assert!((svd.s[0] - 3.0).abs() < 1e-10);
        assert!((svd.s[1] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn thin_svd_rank_one() {
        // u * v^T with ||u|| = 2, ||v|| = 1.
        let u = vec![2.0 * (0.6f64), 2.0 * (0.8f64)];
        let v = vec![1.0, 0.0, 0.0];
        let mut m = DenseMatrix::zeros(2, 3);
        for i in 0..2 {
            for j in 0..3 {
                m.set(i, j, u[i] * v[j]);
            }
        }
        let svd = thin_svd(&m).unwrap();
        assert!((svd.s[0] - 2.0).abs() < 1e-9);
        assert!(svd.s[1].abs() < 1e-9);
        check_svd(&m, &svd);
    }

    #[test]
    fn thin_svd_reconstructs_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(n, d) in &[(6, 4), (4, 6), (5, 5)] {
            let m = random_matrix(n, d, &mut rng);
            let svd = thin_svd(&m).unwrap();
            check_svd(&m, &svd);
        }
    }

    fn check_svd(m: &DenseMatrix, svd: &ThinSvd) {
        let r = svd.s.len();
        assert_eq!(r, m.n_rows().min(m.n_cols()));
        for k in 1..r {
            assert!(svd.s[k] <= svd.s[k - 1] + 1e-12);
            assert!(svd.s[k] >= 0.0);
        }
        let mut sd = DenseMatrix::zeros(r, r);
        for (i, &s) in svd.s.iter().enumerate() {
            sd.set(i, i, s);
        }
        let recon = svd.u.matmul(&sd).unwrap().matmul(&svd.v.transpose()).unwrap();
        let tol = 1e-8 * m.frobenius_norm().max(1.0);
        assert!(recon.sub(m).unwrap().frobenius_norm() <= tol);
        let eye = DenseMatrix::identity(r);
        assert!(svd.u.transpose().matmul(&svd.u).unwrap().max_abs_diff(&eye) <= 1e-8);
        assert!(svd.v.transpose().matmul(&svd.v).unwrap().max_abs_diff(&eye) <= 1e-8);
    }

    #[test]
    fn prox_nuclear_thresholds_singular_values() {
        let m = DenseMatrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let out = prox_nuclear(&m, 2.0).unwrap();
        let expect = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(out.max_abs_diff(&expect) <= 1e-9);
    }

    #[test]
    fn prox_nuclear_identity_at_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let m = random_matrix(5, 3, &mut rng);
        let out = prox_nuclear(&m, 0.0).unwrap();
        assert!(out.max_abs_diff(&m) <= 1e-8);
    }

    #[test]
    fn prox_nuclear_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let m = random_matrix(5, 3, &mut rng);
        let lam = 0.4;
        let closed = prox_nuclear(&m, lam).unwrap();
        let oracle = prox_oracle(&m, lam, ProxNorm::Nuclear).unwrap();
        assert!(closed.max_abs_diff(&oracle) <= 1e-3);
        let obj_closed = prox_objective(&closed, &m, lam, ProxNorm::Nuclear).unwrap();
        let obj_oracle = prox_objective(&oracle, &m, lam, ProxNorm::Nuclear).unwrap();
        assert!((obj_closed - obj_oracle).abs() <= 1e-6);
    }

    #[test]
    fn prox_oracle_examples() {
        let m = DenseMatrix::from_rows(&[vec![1.2]]).unwrap();
        let out = prox_oracle(&m, 0.5, ProxNorm::L1).unwrap();
        assert!((out.get(0, 0) - 0.7).abs() < 1e-9);

        let m = DenseMatrix::from_rows(&[vec![3.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let out = prox_oracle(&m, 2.0, ProxNorm::Nuclear).unwrap();
        let expect = DenseMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        assert!(out.max_abs_diff(&expect) <= 1e-8);
    }

    #[test]
    fn prox_nuclear_norm_identity() {
        // Nuclear norm of the output equals sum(max(s_i - lambda, 0)).
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let m = random_matrix(6, 4, &mut rng);
        let lam = 0.7;
        let before = thin_svd(&m).unwrap();
        let expect: f64 = before.s.iter().map(|&s| (s - lam).max(0.0)).sum();
        let after = thin_svd(&prox_nuclear(&m, lam).unwrap()).unwrap();
        let got: f64 = after.s.iter().sum();
        assert!((got - expect).abs() <= 1e-8);
    }

    #[test]
    fn prox_operators_nonexpansive() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let x = random_matrix(5, 4, &mut rng);
            let y = random_matrix(5, 4, &mut rng);
            let dist = x.sub(&y).unwrap().frobenius_norm();
            for lam in [0.1, 0.6] {
                let dl1 = soft_threshold(&x, lam)
                    .unwrap()
                    .sub(&soft_threshold(&y, lam).unwrap())
                    .unwrap()
                    .frobenius_norm();
                assert!(dl1 <= dist + 1e-10);
                let dnuc = prox_nuclear(&x, lam)
                    .unwrap()
                    .sub(&prox_nuclear(&y, lam).unwrap())
                    .unwrap()
                    .frobenius_norm();
                assert!(dnuc <= dist + 1e-10);
            }
        }
    }

    #[test]
    fn soft_threshold_commutes_with_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let m = random_matrix(4, 5, &mut rng);
        let lam = 0.3;
        let mut perm: Vec<usize> = (0..20).collect();
        perm.shuffle(&mut rng);
        let permute = |x: &DenseMatrix| {
            let mut out = DenseMatrix::zeros(4, 5);
            for (k, &p) in perm.iter().enumerate() {
                out.data_mut()[p] = x.data()[k];
            }
            out
        };
        let a = permute(&soft_threshold(&m, lam).unwrap());
        let b = soft_threshold(&permute(&m), lam).unwrap();
        assert!(a.max_abs_diff(&b) <= 1e-15);
    }

    #[test]
    fn prox_nuclear_commutes_with_orthogonal_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let m = random_matrix(5, 4, &mut rng);
        let q = random_orthogonal(5, &mut rng);
        let r = random_orthogonal(4, &mut rng);
        let lam = 0.5;
        let lhs = q.matmul(&prox_nuclear(&m, lam).unwrap()).unwrap().matmul(&r).unwrap();
        let rhs = prox_nuclear(&q.matmul(&m).unwrap().matmul(&r).unwrap(), lam).unwrap();
        assert!(lhs.max_abs_diff(&rhs) <= 1e-8);
    }

    /// Random orthogonal matrix from Gram-Schmidt of a Gaussian matrix.
    fn random_orthogonal(n: usize, rng: &mut ChaCha8Rng) -> DenseMatrix {
        let mut cols: Vec<Vec<f64>> = Vec::new();
        while cols.len() < n {
            let mut c: Vec<f64> = (0..n)
                .map(|_| rand_distr::StandardNormal.sample(rng))
                .collect();
            for prev in &cols {
                let dot: f64 = c.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (x, p) in c.iter_mut().zip(prev) {
                    *x -= dot * p;
                }
            }
            let norm: f64 = c.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for x in c.iter_mut() {
                    *x /= norm;
                }
                cols.push(c);
            }
        }
        let mut out = DenseMatrix::zeros(n, n);
        for (j, c) in cols.iter().enumerate() {
            for (i, &v) in c.iter().enumerate() {
                out.set(i, j, v);
            }
        }
        out
    }
}
