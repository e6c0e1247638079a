//! Dense row-major kernels shared by the graph and the non-differentiable
//! inference paths.
//!
//! Every reduction runs in a fixed order, so results are bit-identical from
//! run to run on the same build.

use super::Scalar;

const LANES: usize = 8;

/// Dot product with eight fixed interleaved accumulators.
#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); LANES];
    let mut ca = a.chunks_exact(LANES);
    let mut cb = b.chunks_exact(LANES);
    for (xa, xb) in (&mut ca).zip(&mut cb) {
        for l in 0..LANES {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = F::zero();
    for (x, y) in ca.remainder().iter().zip(cb.remainder()) {
        tail += *x * *y;
    }
    let s01 = acc[0] + acc[1];
    let s23 = acc[2] + acc[3];
    let s45 = acc[4] + acc[5];
    let s67 = acc[6] + acc[7];
    (s01 + s23) + (s45 + s67) + tail
}

/// `out[i] += alpha * x[i]`
#[inline]
pub fn axpy<F: Scalar>(alpha: F, x: &[F], out: &mut [F]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * *v;
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn gemm_nn<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            axpy(av, &b[p * n..(p + 1) * n], crow);
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            *cv += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn gemm_tn<F: Scalar>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == F::zero() {
                continue;
            }
            axpy(av, brow, &mut c[i * n..(i + 1) * n]);
        }
    }
}

/// Tanh approximation of GELU.
#[inline]
pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::of(0.797_884_560_802_865_4); // sqrt(2/pi)
    let inner = c * (x + F::of(0.044715) * x * x * x);
    F::of(0.5) * x * (F::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::of(0.797_884_560_802_865_4);
    let x2 = x * x;
    let inner = c * (x + F::of(0.044715) * x2 * x);
    let t = inner.tanh();
    let dinner = c * (F::one() + F::of(3.0 * 0.044715) * x2);
    F::of(0.5) * (F::one() + t) + F::of(0.5) * x * (F::one() - t * t) * dinner
}

/// In-place numerically stable softmax over one row; entries at or beyond
/// `limit` are forced to zero (causal masking).
pub fn softmax_row<F: Scalar>(row: &mut [F], limit: usize) {
    let (live, dead) = row.split_at_mut(limit);
    let mut max = F::neg_infinity();
    for &v in live.iter() {
        if v > max {
            max = v;
        }
    }
    let mut sum = F::zero();
    for v in live.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = F::one() / sum;
    for v in live.iter_mut() {
        *v *= inv;
    }
    for v in dead.iter_mut() {
        *v = F::zero();
    }
}

/// Element-wise mean of equally sized buffers, accumulated in `f64` in the
/// order given.
pub fn mean_of<F: Scalar>(parts: &[&[F]]) -> Vec<F> {
    assert!(!parts.is_empty(), "mean of an empty list");
    let len = parts[0].len();
    let mut acc = vec![0f64; len];
    for p in parts {
        assert_eq!(p.len(), len, "mean over buffers of different length");
        for (a, v) in acc.iter_mut().zip(p.iter()) {
            *a += v.as_f64();
        }
    }
    let n = parts.len() as f64;
    acc.into_iter().map(|a| F::of(a / n)).collect()
}

pub fn l2_norm_sq<F: Scalar>(x: &[F]) -> f64 {
    x.iter().map(|v| v.as_f64() * v.as_f64()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_agree_with_triple_loop() {
        let (m, k, n) = (5, 19, 7);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 5 % 13) as f64 - 6.0) / 4.0).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        gemm_nn(&a, &b, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let bt = transpose(&b, k, n);
        let mut c = vec![0.0; m * n];
        gemm_nt(&a, &bt, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let at = transpose(&a, m, k);
        let mut c = vec![0.0; m * n];
        gemm_tn(&at, &b, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_row_masks_tail() {
        let mut r = [1.0f64, 2.0, 3.0, 100.0];
        softmax_row(&mut r, 3);
        assert_eq!(r[3], 0.0);
        assert!((r[..3].iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
