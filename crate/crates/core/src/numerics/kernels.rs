//! Shared low-level numeric kernels.
//!
//! Both the recording trace and the tape-free inference path call into
//! these, so forward values agree bit-for-bit between the two.

use crate::scalar::Real;

/// `out = W x` for a row-major `rows x cols` matrix.
///
/// Each row dot is split over four accumulators; the summation order is
/// fixed, which keeps results reproducible run to run.
pub fn matvec<T: Real>(w: &[T], rows: usize, cols: usize, x: &[T], out: &mut [T]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut a0 = T::zero();
        let mut a1 = T::zero();
        let mut a2 = T::zero();
        let mut a3 = T::zero();
        let chunks = cols / 4;
        for c in 0..chunks {
            let i = c * 4;
            a0 = a0 + row[i] * x[i];
            a1 = a1 + row[i + 1] * x[i + 1];
            a2 = a2 + row[i + 2] * x[i + 2];
            a3 = a3 + row[i + 3] * x[i + 3];
        }
        let mut acc = (a0 + a1) + (a2 + a3);
        for i in chunks * 4..cols {
            acc = acc + row[i] * x[i];
        }
        out[r] = acc;
    }
}

/// `gw += g ⊗ x` and `gx += Wᵀ g`: the reverse of [`matvec`].
pub fn matvec_backward<T: Real>(
    w: &[T],
    rows: usize,
    cols: usize,
    x: &[T],
    g: &[T],
    gw: &mut [T],
    gx: &mut [T],
) {
    for r in 0..rows {
        let gr = g[r];
        if gr == T::zero() {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        let grow = &mut gw[r * cols..(r + 1) * cols];
        for c in 0..cols {
            grow[c] = grow[c] + gr * x[c];
            gx[c] = gx[c] + gr * row[c];
        }
    }
}

pub fn add<T: Real>(a: &[T], b: &[T], out: &mut [T]) {
    for i in 0..out.len() {
        out[i] = a[i] + b[i];
    }
}

pub fn sub<T: Real>(a: &[T], b: &[T], out: &mut [T]) {
    for i in 0..out.len() {
        out[i] = a[i] - b[i];
    }
}

pub fn mul<T: Real>(a: &[T], b: &[T], out: &mut [T]) {
    for i in 0..out.len() {
        out[i] = a[i] * b[i];
    }
}

pub fn tanh<T: Real>(a: &[T], out: &mut [T]) {
    for i in 0..out.len() {
        out[i] = a[i].tanh();
    }
}

pub fn sigmoid<T: Real>(a: &[T], out: &mut [T]) {
    let one = T::one();
    for i in 0..out.len() {
        out[i] = one / (one + (-a[i]).exp());
    }
}

/// Numerically stable `log softmax` over the whole slice.
pub fn log_softmax<T: Real>(a: &[T], out: &mut [T]) {
    let mut max = T::neg_infinity();
    for &v in a {
        if v > max {
            max = v;
        }
    }
    let mut sum = T::zero();
    for &v in a {
        sum = sum + (v - max).exp();
    }
    let lse = max + sum.ln();
    for i in 0..out.len() {
        out[i] = a[i] - lse;
    }
}

/// Stable `log(exp(a) + exp(b))`.
pub fn logaddexp<T: Real>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_matches_naive() {
        let w: Vec<f64> = (0..12).map(|i| i as f64 * 0.3 - 1.0).collect();
        let x = vec![0.5, -1.0, 2.0, 0.25];
        let mut out = vec![0.0; 3];
        matvec(&w, 3, 4, &x, &mut out);
        for r in 0..3 {
            let naive: f64 = (0..4).map(|c| w[r * 4 + c] * x[c]).sum();
            assert!((out[r] - naive).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_normalizes() {
        let a = vec![1.0_f64, -2.0, 0.5, 3.0];
        let mut out = vec![0.0; 4];
        log_softmax(&a, &mut out);
        let total: f64 = out.iter().map(|v| v.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn logaddexp_handles_neg_infinity() {
        assert_eq!(logaddexp(f64::NEG_INFINITY, -1.0), -1.0);
        assert_eq!(logaddexp(-1.0, f64::NEG_INFINITY), -1.0);
        let v = logaddexp(-1.0_f64, -1.0);
        assert!((v - (-1.0 + 2.0_f64.ln())).abs() < 1e-12);
    }
}
