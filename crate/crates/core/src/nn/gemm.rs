//! Safe row-major wrappers over `matrixmultiply::sgemm`. Every call overwrites
//! its output (`beta = 0`), so a product never depends on prior contents.

#[allow(clippy::too_many_arguments)]
fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].fill(0.0);
        return;
    }
    // SAFETY: the asserts above bound every index sgemm touches given these
    // strides: a[i*rsa + p*csa] with i < m, p < k addresses a dense m*k (or
    // k*m) block, likewise for b and c.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `c[m×n] = a[m×k] · b[k×n]`
pub fn matmul(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    sgemm(m, k, n, a, (k, 1), b, (n, 1), c);
}

/// `c[m×n] = aᵀ · b` with `a` stored as `k×m`.
pub fn matmul_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    sgemm(m, k, n, a, (1, m), b, (n, 1), c);
}

/// `c[m×n] = a · bᵀ` with `b` stored as `n×k`.
pub fn matmul_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], c: &mut [f32]) {
    sgemm(m, k, n, a, (k, 1), b, (1, k), c);
}
