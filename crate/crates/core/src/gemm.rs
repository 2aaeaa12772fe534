//! Safe wrapper over the `matrixmultiply` single-precision kernel.

/// `c = op(a) · op(b) + beta · c` for row-major operands.
///
/// `op(a)` is `m × k`; when `trans_a` is set, `a` is stored as `k × m`.
/// Likewise `op(b)` is `k × n`, stored `n × k` when `trans_b` is set.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k, "gemm: lhs too short");
    assert!(b.len() >= k * n, "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches:
    // the largest offset into `a` is (m-1)*rsa + (k-1)*csa < m*k, and the
    // same holds for `b` and `c`. `c` is uniquely borrowed.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
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
