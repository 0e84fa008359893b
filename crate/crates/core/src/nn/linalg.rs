//! Small dense kernels on row-major slices.

/// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k` and
/// `op(b)` is `k x n`. `ta`/`tb` mean the operand is stored transposed.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds checked above; strides describe exactly the m*k, k*n
    // and m*n row-major (or transposed) layouts of the given slices.
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

/// In-place lower Cholesky factor of the `d x d` matrix `a` (upper triangle
/// is zeroed). Returns `false` if a non-positive pivot is met.
pub fn cholesky_in_place(a: &mut [f64], d: usize) -> bool {
    for j in 0..d {
        let mut diag = a[j * d + j];
        for k in 0..j {
            diag -= a[j * d + k] * a[j * d + k];
        }
        if !(diag > 0.0) || !diag.is_finite() {
            return false;
        }
        let ljj = diag.sqrt();
        a[j * d + j] = ljj;
        for i in (j + 1)..d {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= a[i * d + k] * a[j * d + k];
            }
            a[i * d + j] = s / ljj;
        }
        for i in 0..j {
            a[i * d + j] = 0.0;
        }
    }
    true
}

/// Solve `L L^T X = B` in place, `B` being `d x n` row-major.
pub fn cholesky_solve_in_place(l: &[f64], d: usize, b: &mut [f64], n: usize) {
    // forward: L Y = B
    for i in 0..d {
        for k in 0..i {
            let lik = l[i * d + k];
            if lik != 0.0 {
                let (head, tail) = b.split_at_mut(i * n);
                let src = &head[k * n..k * n + n];
                for (t, s) in tail[..n].iter_mut().zip(src) {
                    *t -= lik * s;
                }
            }
        }
        let inv = 1.0 / l[i * d + i];
        b[i * n..i * n + n].iter_mut().for_each(|v| *v *= inv);
    }
    // backward: L^T X = Y
    for i in (0..d).rev() {
        for k in (i + 1)..d {
            let lki = l[k * d + i];
            if lki != 0.0 {
                let (head, tail) = b.split_at_mut(k * n);
                let dst = &mut head[i * n..i * n + n];
                for (t, s) in dst.iter_mut().zip(&tail[..n]) {
                    *t -= lki * s;
                }
            }
        }
        let inv = 1.0 / l[i * d + i];
        b[i * n..i * n + n].iter_mut().for_each(|v| *v *= inv);
    }
}

/// Cholesky with one bounded retry: if plain factorization fails, add
/// `1e-6 * trace(a)/d` to the diagonal and try once more. Returns the factor.
pub fn cholesky_with_jitter(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = a.to_vec();
    if cholesky_in_place(&mut l, d) {
        return Some(l);
    }
    let trace: f64 = (0..d).map(|i| a[i * d + i]).sum();
    let eps = 1e-6 * trace / d as f64;
    if !(eps > 0.0) {
        return None;
    }
    l.copy_from_slice(a);
    for i in 0..d {
        l[i * d + i] += eps;
    }
    cholesky_in_place(&mut l, d).then_some(l)
}

/// Largest absolute asymmetry `|a_ij - a_ji|`.
pub fn max_asymmetry(a: &[f64], d: usize) -> f64 {
    let mut m = 0.0f64;
    for i in 0..d {
        for j in (i + 1)..d {
            m = m.max((a[i * d + j] - a[j * d + i]).abs());
        }
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, 1.0, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, 1.0, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, 1.0, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn cholesky_solves() {
        let a = [4.0, 2.0, 2.0, 3.0];
        let l = cholesky_with_jitter(&a, 2).unwrap();
        let mut b = [1.0, 0.0, 0.0, 1.0];
        cholesky_solve_in_place(&l, 2, &mut b, 2);
        // inverse of [[4,2],[2,3]] = 1/8 [[3,-2],[-2,4]]
        let expect = [0.375, -0.25, -0.25, 0.5];
        for (x, e) in b.iter().zip(expect) {
            assert!((x - e).abs() < 1e-14);
        }
    }

    #[test]
    fn indefinite_fails() {
        assert!(cholesky_with_jitter(&[1.0, 2.0, 2.0, 1.0], 2).is_none());
        // semidefinite rescued by jitter
        assert!(cholesky_with_jitter(&[1.0, 1.0, 1.0, 1.0], 2).is_some());
    }
}
