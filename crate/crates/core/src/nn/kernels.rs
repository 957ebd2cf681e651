//! Inner loops. Reductions use eight interleaved `f64` partial sums combined
//! in a fixed order, so results do not depend on vector width.

use super::Scalar;

#[inline]
pub fn dot<A: Scalar, B: Scalar>(a: &[A], b: &[B]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut acc = [0.0f64; 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let o = c * 8;
        for l in 0..8 {
            acc[l] += a[o + l].lift() * b[o + l].lift();
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..n {
        tail += a[i].lift() * b[i].lift();
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

#[inline]
pub fn sum<A: Scalar>(a: &[A]) -> f64 {
    let n = a.len();
    let mut acc = [0.0f64; 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let o = c * 8;
        for l in 0..8 {
            acc[l] += a[o + l].lift();
        }
    }
    let mut tail = 0.0;
    for x in &a[chunks * 8..] {
        tail += x.lift();
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `acc += w * x`
#[inline]
pub fn axpy<A: Scalar>(acc: &mut [f64], w: f64, x: &[A]) {
    debug_assert_eq!(acc.len(), x.len());
    for (a, v) in acc.iter_mut().zip(x) {
        *a += w * v.lift();
    }
}

pub fn lower_into<T: Scalar>(dst: &mut [T], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = T::lower(*s);
    }
}

/// `c += a b` for row-major `a: [m, k]`, `b: [k, n]`, `c: [m, n]`. Each
/// output is accumulated over `p = 0..k` in order.
pub fn gemm_acc(m: usize, n: usize, k: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let mut i = 0;
    while i + 4 <= m {
        let (c0, rest) = c[i * n..].split_at_mut(n);
        let (c1, rest) = rest.split_at_mut(n);
        let (c2, rest) = rest.split_at_mut(n);
        let c3 = &mut rest[..n];
        for p in 0..k {
            let (a0, a1, a2, a3) = (a[i * k + p], a[(i + 1) * k + p], a[(i + 2) * k + p], a[(i + 3) * k + p]);
            let br = &b[p * n..][..n];
            for j in 0..n {
                let v = br[j];
                c0[j] += a0 * v;
                c1[j] += a1 * v;
                c2[j] += a2 * v;
                c3[j] += a3 * v;
            }
        }
        i += 4;
    }
    for i in i..m {
        let cr = &mut c[i * n..][..n];
        for p in 0..k {
            let ap = a[i * k + p];
            for (cv, bv) in cr.iter_mut().zip(&b[p * n..][..n]) {
                *cv += ap * bv;
            }
        }
    }
}

/// `dst[j][i] = src[i][j]` for `src: [rows, cols]`.
pub fn transpose(rows: usize, cols: usize, src: &[f64], dst: &mut [f64]) {
    for i in 0..rows {
        for j in 0..cols {
            dst[j * rows + i] = src[i * cols + j];
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
