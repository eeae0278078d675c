//! Dense factorizations and eigenvalue routines on [`Tensor`].

use super::Tensor;
use crate::error::{Error, Result};

fn symmetry_tolerance(s: &Tensor) -> f64 {
    1e-10 * s.max_abs().max(1.0)
}

fn require_square(op: &'static str, s: &Tensor) -> Result<usize> {
    if !s.is_square() {
        return Err(Error::shape(op, format!("expected square, got {:?}", s.shape())));
    }
    Ok(s.rows())
}

/// Upper-triangular `R` with `RᵀR = S`.
///
/// Only the upper triangle of `S` is read once symmetry has been checked.
pub fn cholesky_factor(s: &Tensor) -> Result<Tensor> {
    let n = require_square("cholesky_factor", s)?;
    let asym = s.max_asymmetry();
    if asym > symmetry_tolerance(s) {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    let mut r = Tensor::zeros(n, n);
    for j in 0..n {
        let mut d = s[(j, j)];
        for k in 0..j {
            d -= r[(k, j)] * r[(k, j)];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let rjj = d.sqrt();
        r[(j, j)] = rjj;
        for i in j + 1..n {
            let mut v = s[(j, i)];
            for k in 0..j {
                v -= r[(k, j)] * r[(k, i)];
            }
            r[(j, i)] = v / rjj;
        }
    }
    Ok(r)
}

/// Solves `R X = B` for upper-triangular `R`.
pub fn solve_upper(r: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = require_square("solve_upper", r)?;
    if b.rows() != n {
        return Err(Error::shape("solve_upper", format!("{:?} vs {:?}", r.shape(), b.shape())));
    }
    let mut x = b.clone();
    for col in 0..b.cols() {
        for i in (0..n).rev() {
            let mut v = x[(i, col)];
            for k in i + 1..n {
                v -= r[(i, k)] * x[(k, col)];
            }
            x[(i, col)] = v / r[(i, i)];
        }
    }
    Ok(x)
}

/// Solves `Rᵀ X = B` for upper-triangular `R`.
pub fn solve_upper_transposed(r: &Tensor, b: &Tensor) -> Result<Tensor> {
    let n = require_square("solve_upper_transposed", r)?;
    if b.rows() != n {
        return Err(Error::shape(
            "solve_upper_transposed",
            format!("{:?} vs {:?}", r.shape(), b.shape()),
        ));
    }
    let mut x = b.clone();
    for col in 0..b.cols() {
        for i in 0..n {
            let mut v = x[(i, col)];
            for k in 0..i {
                v -= r[(k, i)] * x[(k, col)];
            }
            x[(i, col)] = v / r[(i, i)];
        }
    }
    Ok(x)
}

/// LU factorization with partial pivoting, stored compactly.
pub struct Lu {
    lu: Tensor,
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(a: &Tensor) -> Result<Lu> {
        let n = require_square("lu", a)?;
        let threshold = 1e-14 * a.frobenius_norm();
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let (p, pivot) = (k..n)
                .map(|i| (i, lu[(i, k)].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pivot <= threshold || !pivot.is_finite() {
                return Err(Error::Singular { pivot });
            }
            if p != k {
                perm.swap(p, k);
                for j in 0..n {
                    let tmp = lu[(k, j)];
                    lu[(k, j)] = lu[(p, j)];
                    lu[(p, j)] = tmp;
                }
            }
            let d = lu[(k, k)];
            for i in k + 1..n {
                let f = lu[(i, k)] / d;
                lu[(i, k)] = f;
                if f != 0.0 {
                    for j in k + 1..n {
                        lu[(i, j)] -= f * lu[(k, j)];
                    }
                }
            }
        }
        Ok(Lu { lu, perm })
    }

    pub fn solve(&self, b: &Tensor) -> Result<Tensor> {
        let n = self.lu.rows();
        if b.rows() != n {
            return Err(Error::shape("solve_linear", format!("A is {n}x{n}, B is {:?}", b.shape())));
        }
        let m = b.cols();
        let mut x = Tensor::zeros(n, m);
        for (i, &p) in self.perm.iter().enumerate() {
            x.data_mut()[i * m..(i + 1) * m].copy_from_slice(b.row(p));
        }
        for col in 0..m {
            for i in 0..n {
                let mut v = x[(i, col)];
                for k in 0..i {
                    v -= self.lu[(i, k)] * x[(k, col)];
                }
                x[(i, col)] = v;
            }
            for i in (0..n).rev() {
                let mut v = x[(i, col)];
                for k in i + 1..n {
                    v -= self.lu[(i, k)] * x[(k, col)];
                }
                x[(i, col)] = v / self.lu[(i, i)];
            }
        }
        Ok(x)
    }
}

/// `X` with `A X = B`, via partial-pivoting LU.
pub fn solve_linear(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Lu::factor(a)?.solve(b)
}

pub fn inverse(a: &Tensor) -> Result<Tensor> {
    solve_linear(a, &Tensor::eye(a.rows()))
}

/// All eigenvalues of a symmetric matrix, ascending, by cyclic Jacobi rotations.
pub fn symmetric_eigenvalues(s: &Tensor) -> Result<Vec<f64>> {
    let n = require_square("symmetric_eigenvalues", s)?;
    let asym = s.max_asymmetry();
    if asym > symmetry_tolerance(s) {
        return Err(Error::NotSymmetric { asymmetry: asym });
    }
    let mut a = s.symmetrized();
    let scale = a.frobenius_norm();
    if n == 0 {
        return Ok(Vec::new());
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[(i, j)] * a[(i, j)])
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale || off == 0.0 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - sn * akq;
                    a[(k, q)] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - sn * aqk;
                    a[(q, k)] = sn * apk + c * aqk;
                }
            }
        }
    }
    let mut eig = a.diagonal();
    eig.sort_by(|x, y| x.total_cmp(y));
    Ok(eig)
}

pub fn min_eigenvalue_sym(s: &Tensor) -> Result<f64> {
    Ok(symmetric_eigenvalues(s)?.first().copied().unwrap_or(f64::INFINITY))
}

/// Largest singular value by power iteration on `MᵀM`.
///
/// Runs from the normalized all-ones vector and from a fixed alternating
/// vector and keeps the larger estimate, so a start orthogonal to the top
/// singular direction cannot hide it.
pub fn spectral_norm(m: &Tensor) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    let n = m.cols();
    let ones = vec![1.0; n];
    let alternating: Vec<f64> = (0..n)
        .map(|i| if i % 2 == 0 { 1.0 } else { -0.5 } + 0.01 * i as f64)
        .collect();
    power_iteration(m, &ones).max(power_iteration(m, &alternating))
}

fn power_iteration(m: &Tensor, start: &[f64]) -> f64 {
    let n = m.cols();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut v = start.to_vec();
    let s = norm(&v);
    v.iter_mut().for_each(|x| *x /= s);
    let mut sigma = 0.0;
    let mut stable = 0;
    for _ in 0..20_000 {
        let mv = matvec(m, &v);
        let next_sigma = norm(&mv);
        let mut w = matvec_t(m, &mv);
        let wn = norm(&w);
        if wn == 0.0 || !wn.is_finite() {
            return next_sigma;
        }
        w.iter_mut().for_each(|x| *x /= wn);
        let rel = (next_sigma - sigma).abs() / next_sigma.max(f64::MIN_POSITIVE);
        sigma = next_sigma;
        v = w;
        if rel < 1e-14 {
            stable += 1;
            if stable >= 3 {
                break;
            }
        } else {
            stable = 0;
        }
    }
    debug_assert_eq!(v.len(), n);
    sigma.max(norm(&matvec(m, &v)))
}

fn matvec(m: &Tensor, v: &[f64]) -> Vec<f64> {
    (0..m.rows())
        .map(|i| m.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
        .collect()
}

fn matvec_t(m: &Tensor, u: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for (i, ui) in u.iter().enumerate() {
        for (o, a) in out.iter_mut().zip(m.row(i)) {
            *o += a * ui;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = Tensor::randn(n, n, 1.0, &mut rng);
        g.t_matmul(&g).unwrap().add(&Tensor::eye(n).scale(0.5)).unwrap()
    }

    /// Counts eigenvalues of `s` below `lambda` from the signs of the
    /// unpivoted symmetric elimination pivots of `s − λI` (Sylvester inertia).
    fn count_below(s: &Tensor, lambda: f64) -> usize {
        let n = s.rows();
        let mut a = s.sub(&Tensor::eye(n).scale(lambda)).unwrap();
        let mut negatives = 0;
        for k in 0..n {
            let mut d = a[(k, k)];
            if d == 0.0 {
                d = -1e-300;
            }
            if d < 0.0 {
                negatives += 1;
            }
            for i in k + 1..n {
                let f = a[(i, k)] / d;
                for j in k + 1..n {
                    a[(i, j)] -= f * a[(k, j)];
                }
            }
        }
        negatives
    }

    fn bracketed_min_eigenvalue(s: &Tensor) -> f64 {
        let bound = s.frobenius_norm() + 1.0;
        let (mut lo, mut hi) = (-bound, bound);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if count_below(s, mid) >= 1 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn cholesky_identity_and_scalar() {
        assert_eq!(cholesky_factor(&Tensor::eye(3)).unwrap(), Tensor::eye(3));
        let r = cholesky_factor(&Tensor::from_rows(&[vec![4.0]]).unwrap()).unwrap();
        assert_eq!(r[(0, 0)], 2.0);
    }

    #[test]
    fn cholesky_reconstructs_random_spd() {
        let s = random_spd(5, 7);
        let r = cholesky_factor(&s).unwrap();
        for i in 0..5 {
            for j in 0..i {
                assert_eq!(r[(i, j)], 0.0);
            }
        }
        let err = r.t_matmul(&r).unwrap().sub(&s).unwrap().frobenius_norm();
        assert!(err <= 1e-12 * s.frobenius_norm().max(1.0), "err {err}");
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let s = Tensor::diag_from(&[1.0, -1.0]);
        assert!(matches!(cholesky_factor(&s), Err(Error::NotPositiveDefinite { pivot: 1, .. })));
        let ns = Tensor::from_rows(&[vec![1.0, 0.5], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(cholesky_factor(&ns), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn eigenvalues_of_diagonal_and_identity() {
        assert_eq!(min_eigenvalue_sym(&Tensor::diag_from(&[3.0, -1.0, 2.0])).unwrap(), -1.0);
        assert_eq!(min_eigenvalue_sym(&Tensor::eye(4)).unwrap(), 1.0);
    }

    #[test]
    fn min_eigenvalue_matches_bracketing_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = Tensor::randn(6, 6, 1.0, &mut rng);
        let s = g.add(&g.transpose()).unwrap();
        let got = min_eigenvalue_sym(&s).unwrap();
        let oracle = bracketed_min_eigenvalue(&s);
        assert!((got - oracle).abs() <= 1e-9, "{got} vs {oracle}");
    }

    #[test]
    fn min_eigenvalue_rejects_asymmetric() {
        let s = Tensor::from_rows(&[vec![1.0, 2.0], vec![0.0, 1.0]]).unwrap();
        assert!(matches!(min_eigenvalue_sym(&s), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn spectral_norm_simple_cases() {
        assert!((spectral_norm(&Tensor::eye(3)) - 1.0).abs() < 1e-12);
        assert!((spectral_norm(&Tensor::diag_from(&[3.0, 1.0])) - 3.0).abs() < 1e-12);
        let hidden = Tensor::from_rows(&[vec![1.0, -1.0]]).unwrap();
        assert!((spectral_norm(&hidden) - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn spectral_norm_matches_eigen_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = Tensor::randn(4, 6, 1.0, &mut rng);
        let gram = m.t_matmul(&m).unwrap();
        let oracle = symmetric_eigenvalues(&gram).unwrap().last().unwrap().sqrt();
        assert!((spectral_norm(&m) - oracle).abs() <= 1e-7 * oracle);
    }

    #[test]
    fn solve_linear_cases() {
        let b = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(solve_linear(&Tensor::eye(2), &b).unwrap(), b);
        let a = Tensor::diag_from(&[2.0, 4.0]);
        let x = solve_linear(&a, &Tensor::column(&[2.0, 8.0])).unwrap();
        assert_eq!(x, Tensor::column(&[1.0, 2.0]));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = Tensor::randn(7, 7, 1.0, &mut rng);
        let b = Tensor::randn(7, 3, 1.0, &mut rng);
        let x = solve_linear(&a, &b).unwrap();
        let res = a.matmul(&x).unwrap().sub(&b).unwrap().frobenius_norm();
        assert!(res <= 1e-10 * b.frobenius_norm());
    }

    #[test]
    fn solve_linear_detects_singular() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(solve_linear(&a, &Tensor::eye(2)), Err(Error::Singular { .. })));
    }

    #[test]
    fn triangular_solves() {
        let s = random_spd(4, 2);
        let r = cholesky_factor(&s).unwrap();
        let b = Tensor::eye(4);
        let x = solve_upper(&r, &b).unwrap();
        assert!(r.matmul(&x).unwrap().sub(&b).unwrap().max_abs() < 1e-12);
        let y = solve_upper_transposed(&r, &b).unwrap();
        assert!(r.transpose().matmul(&y).unwrap().sub(&b).unwrap().max_abs() < 1e-12);
    }
}
