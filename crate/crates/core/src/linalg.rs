//! Dense linear-algebra helpers: matrix exponential and PSD square roots.

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LinalgError {
    #[error("matrix must be square, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("Padé denominator is singular")]
    SingularPade,
    #[error("square root failed: matrix is not positive semidefinite")]
    FactorizationFailure,
}

const THETA: [(usize, f64); 4] = [
    (3, 1.495585217958292e-2),
    (5, 2.539398330063230e-1),
    (7, 9.504178996162932e-1),
    (9, 2.097847961257068e0),
];
const THETA_13: f64 = 5.371920351148152e0;

const B3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const B5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const B7: [f64; 8] = [17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0];
const B9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const B13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

fn one_norm(a: &DMatrix<f64>) -> f64 {
    a.column_iter().map(|c| c.iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Matrix exponential by scaling and squaring with a diagonal Padé
/// approximant of degree 3, 5, 7, 9 or 13 (Higham 2005 selection).
pub fn expm(a: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let n = a.nrows();
    if n != a.ncols() {
        return Err(LinalgError::NotSquare { rows: n, cols: a.ncols() });
    }
    if a.iter().any(|x| !x.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    let norm = one_norm(a);
    let ident = DMatrix::<f64>::identity(n, n);

    for (m, theta) in THETA {
        if norm <= theta {
            let coeffs: &[f64] = match m {
                3 => &B3,
                5 => &B5,
                7 => &B7,
                _ => &B9,
            };
            return low_degree_pade(a, coeffs, &ident);
        }
    }

    let s = if norm > THETA_13 { (norm / THETA_13).log2().ceil() as i32 } else { 0 };
    let scaled = a * 2f64.powi(-s);
    let a2 = &scaled * &scaled;
    let a4 = &a2 * &a2;
    let a6 = &a4 * &a2;
    let b = &B13;
    let inner_u = &a6 * (&a6 * b[13] + &a4 * b[11] + &a2 * b[9]);
    let u = &scaled * (inner_u + &a6 * b[7] + &a4 * b[5] + &a2 * b[3] + &ident * b[1]);
    let inner_v = &a6 * (&a6 * b[12] + &a4 * b[10] + &a2 * b[8]);
    let v = inner_v + &a6 * b[6] + &a4 * b[4] + &a2 * b[2] + &ident * b[0];
    let mut result = pade_solve(&u, &v)?;
    for _ in 0..s {
        result = &result * &result;
    }
    Ok(result)
}

fn low_degree_pade(
    a: &DMatrix<f64>,
    coeffs: &[f64],
    ident: &DMatrix<f64>,
) -> Result<DMatrix<f64>, LinalgError> {
    let a2 = a * a;
    let mut power = ident.clone();
    let mut u_sum = ident * coeffs[1];
    let mut v = ident * coeffs[0];
    for k in (2..coeffs.len()).step_by(2) {
        power = &power * &a2;
        v += &power * coeffs[k];
        if k + 1 < coeffs.len() {
            u_sum += &power * coeffs[k + 1];
        }
    }
    let u = a * u_sum;
    pade_solve(&u, &v)
}

fn pade_solve(u: &DMatrix<f64>, v: &DMatrix<f64>) -> Result<DMatrix<f64>, LinalgError> {
    let p = v + u;
    let q = v - u;
    q.lu().solve(&p).ok_or(LinalgError::SingularPade)
}

/// How a PSD square root was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqrtMethod {
    Cholesky,
    Eigen,
}

/// Returns `S` with `S Sᵀ = P` for a symmetric positive semidefinite `P`.
///
/// Tries a Cholesky factorization that tolerates exactly-degenerate
/// directions (zero pivot with a zero remaining column, as produced by
/// constant states). Anything else that breaks Cholesky falls back to the
/// symmetric eigen square root with negative eigenvalues clamped to zero.
pub fn psd_sqrt(p: &DMatrix<f64>) -> Result<(DMatrix<f64>, SqrtMethod), LinalgError> {
    if p.nrows() != p.ncols() {
        return Err(LinalgError::NotSquare { rows: p.nrows(), cols: p.ncols() });
    }
    if p.iter().any(|x| !x.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    if let Some(l) = semidefinite_cholesky(p) {
        return Ok((l, SqrtMethod::Cholesky));
    }
    Ok((eigen_sqrt(p), SqrtMethod::Eigen))
}

fn semidefinite_cholesky(p: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = p.nrows();
    let scale = p.diagonal().iter().fold(0.0f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return Some(DMatrix::zeros(n, n));
    }
    let zero_tol = 1e-14 * scale;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = p[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if d < -zero_tol {
            return None;
        }
        if d <= zero_tol {
            // Degenerate direction: the rest of the column must vanish too.
            for i in (j + 1)..n {
                let mut s = p[(i, j)];
                for k in 0..j {
                    s -= l[(i, k)] * l[(j, k)];
                }
                if s.abs() > zero_tol.sqrt() * scale.sqrt() {
                    return None;
                }
            }
            continue;
        }
        let root = d.sqrt();
        l[(j, j)] = root;
        for i in (j + 1)..n {
            let mut s = p[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / root;
        }
    }
    Some(l)
}

fn eigen_sqrt(p: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (p + p.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut v = eig.eigenvectors;
    for (j, lambda) in eig.eigenvalues.iter().enumerate() {
        let s = lambda.max(0.0).sqrt();
        v.column_mut(j).scale_mut(s);
    }
    v
}

/// Symmetrizes in place and clamps negative eigenvalues when a
/// Cholesky probe says the matrix drifted out of the PSD cone.
pub fn enforce_psd(p: &mut DMatrix<f64>) {
    symmetrize(p);
    if semidefinite_cholesky(p).is_none() {
        let eig = SymmetricEigen::new(p.clone());
        let clamped = eig.eigenvalues.map(|x| x.max(0.0));
        *p = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
        symmetrize(p);
    }
}

pub fn symmetrize(p: &mut DMatrix<f64>) {
    let n = p.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (p[(i, j)] + p[(j, i)]);
            p[(i, j)] = m;
            p[(j, i)] = m;
        }
    }
}

/// Ratio of extreme eigenvalue magnitudes of a symmetric matrix.
pub fn symmetric_condition(p: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new((p + p.transpose()) * 0.5);
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |m, x| m.min(x.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;
    use proptest::prelude::*;

    /// Truncated Taylor series, only trustworthy for small norms.
    fn taylor_expm(a: &DMatrix<f64>) -> DMatrix<f64> {
        let n = a.nrows();
        let mut term = DMatrix::<f64>::identity(n, n);
        let mut sum = term.clone();
        for k in 1..40 {
            term = &term * a / k as f64;
            sum += &term;
        }
        sum
    }

    #[test]
    fn scalar_and_diagonal() {
        for x in [-30.0, -11.8033, -1.0, 0.0, 1e-3, 2.5, 7.0] {
            let e = expm(&DMatrix::from_element(1, 1, x)).unwrap();
            assert!((e[(0, 0)] - f64::exp(x)).abs() <= 1e-13 * f64::exp(x).max(1.0), "{x}");
        }
        let d = DVector::from_vec(vec![-1180.33 * 0.01, -0.2063, 0.0, 3.0]);
        let e = expm(&DMatrix::from_diagonal(&d)).unwrap();
        for i in 0..4 {
            let want = d[i].exp();
            assert!((e[(i, i)] - want).abs() <= 1e-12 * want.max(1e-300).max(want), "{i}");
        }
    }

    #[test]
    fn stiff_decay_factor() {
        let e = expm(&DMatrix::from_element(1, 1, -11.8033)).unwrap();
        assert!((e[(0, 0)] / (-11.8033f64).exp() - 1.0).abs() < 1e-12);
        assert!((e[(0, 0)] - 7.4797e-6).abs() < 1e-9);
    }

    #[test]
    fn nilpotent_is_exact_polynomial() {
        // Double integrator with affine input: [[0,1,0],[0,0,a],[0,0,0]].
        let t = 0.37;
        let a = 2.5;
        let m = DMatrix::from_row_slice(3, 3, &[0.0, t, 0.0, 0.0, 0.0, a * t, 0.0, 0.0, 0.0]);
        let e = expm(&m).unwrap();
        let want = DMatrix::from_row_slice(3, 3, &[1.0, t, 0.5 * a * t * t, 0.0, 1.0, a * t, 0.0, 0.0, 1.0]);
        assert!((e - want).norm() < 1e-14);
    }

    #[test]
    fn rotation_generator() {
        let th = 2.3;
        let m = DMatrix::from_row_slice(2, 2, &[0.0, -th, th, 0.0]);
        let e = expm(&m).unwrap();
        let want = DMatrix::from_row_slice(2, 2, &[th.cos(), -th.sin(), th.sin(), th.cos()]);
        assert!((e - want).norm() < 1e-13);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(expm(&DMatrix::zeros(2, 3)), Err(LinalgError::NotSquare { .. })));
        assert_eq!(expm(&DMatrix::from_element(1, 1, f64::NAN)), Err(LinalgError::NonFinite));
    }

    #[test]
    fn sqrt_of_singular_block_uses_cholesky() {
        let mut p = DMatrix::<f64>::zeros(4, 4);
        p[(0, 0)] = 4.0;
        p[(1, 1)] = 1e-4;
        p[(0, 1)] = 0.01;
        p[(1, 0)] = 0.01;
        p[(2, 2)] = 9.0;
        let (s, method) = psd_sqrt(&p).unwrap();
        assert_eq!(method, SqrtMethod::Cholesky);
        assert!((&s * s.transpose() - &p).norm() < 1e-15);
        assert!(s.row(3).iter().all(|x| *x == 0.0));
    }

    #[test]
    fn sqrt_falls_back_to_eigen() {
        // Zero pivot with a non-zero column: indefinite, Cholesky must refuse.
        let v = DVector::from_vec(vec![0.1, 1.0, 2.0]);
        let mut p = &v * v.transpose();
        p[(0, 0)] = 0.0;
        let (s, method) = psd_sqrt(&(&p * 0.5 + p.transpose() * 0.5)).unwrap();
        assert_eq!(method, SqrtMethod::Eigen);
        assert!(s.iter().all(|x| x.is_finite()));
        let neg = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1e-3]));
        let (s, method) = psd_sqrt(&neg).unwrap();
        assert_eq!(method, SqrtMethod::Eigen);
        let rebuilt = &s * s.transpose();
        assert!((rebuilt[(0, 0)] - 1.0).abs() < 1e-15 && rebuilt[(1, 1)].abs() < 1e-15);
    }

    #[test]
    fn enforce_psd_clamps() {
        let mut p = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        enforce_psd(&mut p);
        let eig = SymmetricEigen::new(p.clone());
        assert!(eig.eigenvalues.iter().all(|x| *x > -1e-12));
    }

    proptest! {
        #[test]
        fn matches_taylor_on_small_matrices(entries in prop::collection::vec(-0.5..0.5f64, 25)) {
            let a = DMatrix::from_vec(5, 5, entries);
            let e = expm(&a).unwrap();
            prop_assert!((&e - taylor_expm(&a)).norm() < 1e-12);
        }

        #[test]
        fn inverse_property(entries in prop::collection::vec(-3.0..3.0f64, 36)) {
            let a = DMatrix::from_vec(6, 6, entries);
            let prod = expm(&a).unwrap() * expm(&(-&a)).unwrap();
            prop_assert!((prod - DMatrix::<f64>::identity(6, 6)).norm() < 1e-8);
        }

        #[test]
        fn sqrt_reconstructs(entries in prop::collection::vec(-1.0..1.0f64, 30)) {
            let g = DMatrix::from_vec(6, 5, entries);
            let p = &g * g.transpose();
            let (s, _) = psd_sqrt(&p).unwrap();
            prop_assert!((&s * s.transpose() - &p).norm() < 1e-10);
        }
    }
}
