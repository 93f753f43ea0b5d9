//! Covariance, symmetric eigendecomposition and PSD square roots.
//!
//! Small matrices (order ≤ [`JACOBI_MAX_ORDER`]) are diagonalized with cyclic
//! Jacobi rotations. Larger ones (pixel-space covariances reach order 784) go
//! through Householder tridiagonalization followed by implicit QL, which is an
//! order of magnitude faster there. Both meet the same contract.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Largest order handled by the Jacobi solver in [`sym_eig`].
pub const JACOBI_MAX_ORDER: usize = 64;

const SYMMETRY_TOL: f64 = 1e-9;
const PSD_TOL: f64 = 1e-9;
const JACOBI_REL_TOL: f64 = 1e-12;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Divisor used for variances and covariances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum VarianceKind {
    /// Divide by `n`.
    #[default]
    Population,
    /// Divide by `n - 1`.
    Sample,
}

impl VarianceKind {
    fn divisor(self, n: usize) -> Result<f64> {
        match self {
            _ if n == 0 => Err(Error::invalid("variance of an empty sample")),
            VarianceKind::Population => Ok(n as f64),
            VarianceKind::Sample if n < 2 => {
                Err(Error::invalid("sample variance needs at least 2 observations"))
            }
            VarianceKind::Sample => Ok((n - 1) as f64),
        }
    }
}

/// Variance of a slice.
pub fn variance(values: &[f64], kind: VarianceKind) -> Result<f64> {
    let d = kind.divisor(values.len())?;
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d)
}

/// Per-column variances of an `n×m` matrix.
pub fn column_variances(x: &Tensor, kind: VarianceKind) -> Result<Vec<f64>> {
    let (n, m) = x.dims2()?;
    let d = kind.divisor(n)?;
    let means = x.column_means();
    let mut acc = vec![0.0; m];
    for row in x.row_iter() {
        for ((a, v), mu) in acc.iter_mut().zip(row).zip(&means) {
            *a += (v - mu).powi(2);
        }
    }
    acc.iter_mut().for_each(|a| *a /= d);
    Ok(acc)
}

/// Covariance of the rows of an `n×m` matrix (`m×m`, exactly symmetric).
pub fn covariance(x: &Tensor, kind: VarianceKind) -> Result<Tensor> {
    let (n, m) = x.dims2()?;
    let d = kind.divisor(n)?;
    let means = x.column_means();
    let mut centered = x.clone();
    for row in centered.data_mut().chunks_exact_mut(m.max(1)) {
        for (v, mu) in row.iter_mut().zip(&means) {
            *v -= mu;
        }
    }
    let mut cov = centered.matmul_t(crate::tensor::Trans::Yes, &centered, crate::tensor::Trans::No)?;
    let c = cov.data_mut();
    for i in 0..m {
        for j in i..m {
            let v = c[i * m + j] / d;
            c[i * m + j] = v;
            c[j * m + i] = v;
        }
    }
    Ok(cov)
}

#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    /// Non-increasing.
    pub eigenvalues: Vec<f64>,
    /// `m×m`; column `j` pairs with `eigenvalues[j]`.
    pub eigenvectors: Tensor,
}

impl EigenDecomposition {
    /// `Q · diag(f(λ)) · Qᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> Tensor {
        let m = self.eigenvalues.len();
        let q = self.eigenvectors.data();
        let fl: Vec<f64> = self.eigenvalues.iter().map(|&l| f(l)).collect();
        let mut out = Tensor::zeros(&[m, m]);
        let o = out.data_mut();
        for i in 0..m {
            for j in i..m {
                let s: f64 = (0..m).map(|k| q[i * m + k] * fl[k] * q[j * m + k]).sum();
                o[i * m + j] = s;
                o[j * m + i] = s;
            }
        }
        out
    }

    pub fn reconstruct(&self) -> Tensor {
        self.reconstruct_with(|l| l)
    }
}

fn check_square_symmetric(s: &Tensor) -> Result<usize> {
    let (r, c) = s.dims2()?;
    if r != c {
        return Err(Error::invalid(format!("expected a square matrix, got {r}x{c}")));
    }
    if r == 0 {
        return Err(Error::invalid("empty matrix"));
    }
    if !s.all_finite() {
        return Err(Error::NonFinite("symmetric eigendecomposition input".into()));
    }
    let d = s.data();
    let scale = d.iter().fold(1.0_f64, |a, v| a.max(v.abs()));
    let mut worst = 0.0_f64;
    for i in 0..r {
        for j in i + 1..r {
            worst = worst.max((d[i * r + j] - d[j * r + i]).abs());
        }
    }
    if worst > SYMMETRY_TOL * scale {
        return Err(Error::NotSymmetric {
            max_asymmetry: worst,
        });
    }
    Ok(r)
}

fn symmetrized(s: &Tensor, m: usize) -> Vec<f64> {
    let d = s.data();
    let mut a = d.to_vec();
    for i in 0..m {
        for j in i + 1..m {
            let v = 0.5 * (d[i * m + j] + d[j * m + i]);
            a[i * m + j] = v;
            a[j * m + i] = v;
        }
    }
    a
}

/// Eigendecomposition of a symmetric matrix, eigenvalues in descending order.
pub fn sym_eig(s: &Tensor) -> Result<EigenDecomposition> {
    let m = check_square_symmetric(s)?;
    let a = symmetrized(s, m);
    let (values, vectors) = if m <= JACOBI_MAX_ORDER {
        jacobi(a, m)?
    } else {
        tridiagonal_ql(a, m)?
    };
    Ok(sort_descending(values, vectors, m))
}

/// Same contract as [`sym_eig`] but always uses cyclic Jacobi.
pub fn sym_eig_jacobi(s: &Tensor) -> Result<EigenDecomposition> {
    let m = check_square_symmetric(s)?;
    let (values, vectors) = jacobi(symmetrized(s, m), m)?;
    Ok(sort_descending(values, vectors, m))
}

/// Same contract as [`sym_eig`] but always uses Householder + QL.
pub fn sym_eig_ql(s: &Tensor) -> Result<EigenDecomposition> {
    let m = check_square_symmetric(s)?;
    let (values, vectors) = tridiagonal_ql(symmetrized(s, m), m)?;
    Ok(sort_descending(values, vectors, m))
}

fn sort_descending(values: Vec<f64>, vectors: Vec<f64>, m: usize) -> EigenDecomposition {
    let mut order: Vec<usize> = (0..m).collect();
    // Stable: ties keep solver order.
    order.sort_by(|&i, &j| values[j].total_cmp(&values[i]));
    let mut q = vec![0.0; m * m];
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..m {
            q[r * m + dst] = vectors[r * m + src];
        }
    }
    EigenDecomposition {
        eigenvalues: order.iter().map(|&i| values[i]).collect(),
        eigenvectors: Tensor::new(vec![m, m], q).expect("m*m buffer"),
    }
}

fn jacobi(mut a: Vec<f64>, m: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut v = Tensor::identity(m).into_data();
    let off_norm = |a: &[f64]| -> (f64, f64) {
        let mut off = 0.0;
        let mut diag = 0.0;
        for i in 0..m {
            for j in 0..m {
                let x = a[i * m + j] * a[i * m + j];
                if i == j {
                    diag += x;
                } else {
                    off += x;
                }
            }
        }
        (off.sqrt(), diag.sqrt())
    };

    let mut sweeps = 0;
    loop {
        let (off, diag) = off_norm(&a);
        if off <= JACOBI_REL_TOL * diag || off == 0.0 {
            break;
        }
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::NoConvergence {
                sweeps,
                off_norm: off,
            });
        }
        sweeps += 1;
        for p in 0..m {
            for q in p + 1..m {
                let apq = a[p * m + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * m + q] - a[p * m + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // A ← Jᵀ A J, columns then rows.
                for k in 0..m {
                    let akp = a[k * m + p];
                    let akq = a[k * m + q];
                    a[k * m + p] = c * akp - s * akq;
                    a[k * m + q] = s * akp + c * akq;
                }
                for k in 0..m {
                    let apk = a[p * m + k];
                    let aqk = a[q * m + k];
                    a[p * m + k] = c * apk - s * aqk;
                    a[q * m + k] = s * apk + c * aqk;
                }
                a[p * m + q] = 0.0;
                a[q * m + p] = 0.0;
                for k in 0..m {
                    let vkp = v[k * m + p];
                    let vkq = v[k * m + q];
                    v[k * m + p] = c * vkp - s * vkq;
                    v[k * m + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let values = (0..m).map(|i| a[i * m + i]).collect();
    Ok((values, v))
}

/// Householder reduction to tridiagonal form (`tred2`) followed by the
/// implicit QL iteration (`tql2`), after the EISPACK routines.
fn tridiagonal_ql(a: Vec<f64>, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut v = a;
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    let idx = |i: usize, j: usize| i * n + j;

    // tred2
    for j in 0..n {
        d[j] = v[idx(n - 1, j)];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[idx(i - 1, j)];
                v[idx(i, j)] = 0.0;
                v[idx(j, i)] = 0.0;
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[idx(j, i)] = f;
                g = e[j] + v[idx(j, j)] * f;
                for k in j + 1..i {
                    g += v[idx(k, j)] * d[k];
                    e[k] += v[idx(k, j)] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[idx(k, j)] -= f * e[k] + g * d[k];
                }
                d[j] = v[idx(i - 1, j)];
                v[idx(i, j)] = 0.0;
            }
        }
        d[i] = h;
    }
    for i in 0..n.saturating_sub(1) {
        v[idx(n - 1, i)] = v[idx(i, i)];
        v[idx(i, i)] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[idx(k, i + 1)] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[idx(k, i + 1)] * v[idx(k, j)];
                }
                for k in 0..=i {
                    v[idx(k, j)] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[idx(k, i + 1)] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[idx(n - 1, j)];
        v[idx(n - 1, j)] = 0.0;
    }
    v[idx(n - 1, n - 1)] = 1.0;
    e[0] = 0.0;

    // tql2
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1 = 0.0_f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > 60 {
                    return Err(Error::NoConvergence {
                        sweeps: iter,
                        off_norm: e[l].abs(),
                    });
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;

                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        let vk = &mut v[k * n..(k + 1) * n];
                        let h = vk[i + 1];
                        vk[i + 1] = s * vk[i] + c * h;
                        vk[i] = c * vk[i] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    Ok((d, v))
}

/// Symmetric PSD square root `R` with `R·R = S`.
///
/// Eigenvalues in `[-1e-9, 0)` are treated as zero; anything more negative is
/// rejected.
pub fn sqrtm_psd(s: &Tensor) -> Result<Tensor> {
    let eig = sym_eig(s)?;
    let min = eig.eigenvalues.last().copied().unwrap_or(0.0);
    if min < -PSD_TOL {
        return Err(Error::NotPositiveSemidefinite {
            min_eigenvalue: min,
        });
    }
    Ok(eig.reconstruct_with(|l| l.max(0.0).sqrt()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    fn random_matrix(rng: &mut Rng, r: usize, c: usize) -> Tensor {
        Tensor::new(vec![r, c], (0..r * c).map(|_| rng.normal()).collect()).unwrap()
    }

    fn random_symmetric(rng: &mut Rng, m: usize) -> Tensor {
        let a = random_matrix(rng, m, m);
        a.zip_map(&a.transpose().unwrap(), |x, y| 0.5 * (x + y)).unwrap()
    }

    fn rel_frobenius(a: &Tensor, b: &Tensor) -> f64 {
        let diff = a.zip_map(b, |x, y| x - y).unwrap().frobenius_norm();
        diff / b.frobenius_norm().max(1e-300)
    }

    fn brute_covariance(x: &Tensor, divisor: f64) -> Vec<f64> {
        let (n, m) = x.dims2().unwrap();
        let mu: Vec<f64> = (0..m)
            .map(|j| (0..n).map(|i| x.get(i, j)).sum::<f64>() / n as f64)
            .collect();
        let mut out = vec![0.0; m * m];
        for a in 0..m {
            for b in 0..m {
                let mut s = 0.0;
                for i in 0..n {
                    s += (x.get(i, a) - mu[a]) * (x.get(i, b) - mu[b]);
                }
                out[a * m + b] = s / divisor;
            }
        }
        out
    }

    #[test]
    fn covariance_of_constant_columns_is_zero() {
        let x = Tensor::from_rows(&[[1.0, 5.0], [1.0, 5.0], [1.0, 5.0]]).unwrap();
        let c = covariance(&x, VarianceKind::Population).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn covariance_hand_example() {
        let x = Tensor::from_rows(&[[1.0], [3.0]]).unwrap();
        let c = covariance(&x, VarianceKind::Population).unwrap();
        assert_eq!(c.data(), &[1.0]);
        let s = covariance(&x, VarianceKind::Sample).unwrap();
        assert_eq!(s.data(), &[2.0]);
    }

    #[test]
    fn covariance_errors() {
        assert!(covariance(&Tensor::zeros(&[0, 3]), VarianceKind::Population).is_err());
        let one = Tensor::from_rows(&[[1.0, 2.0]]).unwrap();
        assert!(covariance(&one, VarianceKind::Population).is_ok());
        assert!(covariance(&one, VarianceKind::Sample).is_err());
    }

    #[test]
    fn covariance_matches_brute_force() {
        let mut rng = Rng::new(11);
        for _ in 0..10 {
            let x = random_matrix(&mut rng, 37, 6);
            let c = covariance(&x, VarianceKind::Population).unwrap();
            let oracle = brute_covariance(&x, 37.0);
            for (a, b) in c.data().iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
            }
            let s = covariance(&x, VarianceKind::Sample).unwrap();
            let oracle = brute_covariance(&x, 36.0);
            for (a, b) in s.data().iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn eig_identity_and_diagonal() {
        let e = sym_eig(&Tensor::identity(3)).unwrap();
        assert_eq!(e.eigenvalues, vec![1.0, 1.0, 1.0]);

        let e = sym_eig(&Tensor::diag(&[1.0, 4.0])).unwrap();
        assert_eq!(e.eigenvalues, vec![4.0, 1.0]);
        let q = &e.eigenvectors;
        assert_eq!(q.get(0, 0).abs(), 0.0);
        assert_eq!(q.get(1, 0).abs(), 1.0);
        assert_eq!(q.get(0, 1).abs(), 1.0);
    }

    #[test]
    fn eig_rejects_asymmetric() {
        let s = Tensor::from_rows(&[[1.0, 2.0], [2.1, 1.0]]).unwrap();
        assert!(matches!(sym_eig(&s), Err(Error::NotSymmetric { .. })));
        let ok = Tensor::from_rows(&[[1.0, 2.0], [2.0 + 1e-12, 1.0]]).unwrap();
        assert!(sym_eig(&ok).is_ok());
    }

    fn check_decomposition(s: &Tensor, e: &EigenDecomposition) {
        let m = s.rows();
        assert!(rel_frobenius(&e.reconstruct(), s) <= 1e-8);
        let q = &e.eigenvectors;
        let qtq = q.matmul_t(crate::tensor::Trans::Yes, q, crate::tensor::Trans::No).unwrap();
        let dev = qtq
            .zip_map(&Tensor::identity(m), |a, b| a - b)
            .unwrap()
            .frobenius_norm();
        assert!(dev <= 1e-8, "orthonormality {dev}");
        assert!(e.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn random_symmetric_reconstructs_both_solvers() {
        let mut rng = Rng::new(7);
        for m in [1, 2, 3, 8, 20, 70, 130] {
            let s = random_symmetric(&mut rng, m);
            let jac = sym_eig_jacobi(&s).unwrap();
            let ql = sym_eig_ql(&s).unwrap();
            check_decomposition(&s, &jac);
            check_decomposition(&s, &ql);
            for (a, b) in jac.eigenvalues.iter().zip(&ql.eigenvalues) {
                assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "m={m}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn eig_handles_zero_and_rank_deficient() {
        let e = sym_eig(&Tensor::zeros(&[4, 4])).unwrap();
        assert!(e.eigenvalues.iter().all(|&v| v == 0.0));
        let mut rng = Rng::new(2);
        let a = random_matrix(&mut rng, 100, 3);
        let s = a.matmul_t(crate::tensor::Trans::No, &a, crate::tensor::Trans::Yes).unwrap();
        let e = sym_eig(&s).unwrap();
        check_decomposition(&s, &e);
        assert!(e.eigenvalues[3..].iter().all(|v| v.abs() < 1e-9 * e.eigenvalues[0]));
    }

    #[test]
    fn sqrtm_examples() {
        let r = sqrtm_psd(&Tensor::identity(3)).unwrap();
        assert!(rel_frobenius(&r, &Tensor::identity(3)) < 1e-15);
        let r = sqrtm_psd(&Tensor::diag(&[4.0, 9.0])).unwrap();
        assert!(rel_frobenius(&r, &Tensor::diag(&[2.0, 3.0])) < 1e-15);
        let neg = Tensor::diag(&[1.0, -1e-3]);
        assert!(matches!(
            sqrtm_psd(&neg),
            Err(Error::NotPositiveSemidefinite { .. })
        ));
        assert!(sqrtm_psd(&Tensor::diag(&[1.0, -1e-12])).is_ok());
    }

    #[test]
    fn sqrtm_squares_back_on_random_psd() {
        let mut rng = Rng::new(19);
        for m in [6, 6, 6, 90] {
            let a = random_matrix(&mut rng, m, m);
            let s = a.matmul_t(crate::tensor::Trans::No, &a, crate::tensor::Trans::Yes).unwrap();
            let r = sqrtm_psd(&s).unwrap();
            assert!(rel_frobenius(&r.matmul(&r).unwrap(), &s) <= 1e-7);
        }
    }
}
