#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

/// `out (+)= op(a) · op(b)` where `op(a)` is `[m, k]` and `op(b)` is `[k, p]`.
///
/// Operands are dense row-major; a transposed operand is read through swapped
/// strides rather than materialized. With `accumulate` the product is added to
/// the existing contents of `out`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_into(
    a: &[f64],
    ta: Transpose,
    b: &[f64],
    tb: Transpose,
    out: &mut [f64],
    m: usize,
    k: usize,
    p: usize,
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * p);
    debug_assert_eq!(out.len(), m * p);
    let (rsa, csa) = match ta {
        Transpose::No => (k as isize, 1),
        Transpose::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Transpose::No => (p as isize, 1),
        Transpose::Yes => (1, k as isize),
    };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above address exactly the m*k, k*p and m*p elements
    // of the three slices, whose lengths are checked by the callers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            p,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            p as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, p: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * p];
        for i in 0..m {
            for j in 0..p {
                for t in 0..k {
                    out[i * p + j] += a[i * k + t] * b[t * p + j];
                }
            }
        }
        out
    }

    fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = x[r * cols + c];
            }
        }
        out
    }

    #[test]
    fn all_transpose_combinations_agree_with_naive() {
        let (m, k, p) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * p).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, m, k, p);
        let at = transpose(&a, m, k);
        let bt = transpose(&b, k, p);
        for (aa, ta) in [(&a, Transpose::No), (&at, Transpose::Yes)] {
            for (bb, tb) in [(&b, Transpose::No), (&bt, Transpose::Yes)] {
                let mut out = vec![0.0; m * p];
                matmul_into(aa, ta, bb, tb, &mut out, m, k, p, false);
                for (x, y) in out.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
        let mut out = want.clone();
        matmul_into(&a, Transpose::No, &b, Transpose::No, &mut out, m, k, p, true);
        for (x, y) in out.iter().zip(&want) {
            assert!((x - 2.0 * y).abs() < 1e-12);
        }
    }
}
