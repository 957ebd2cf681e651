//! Dilated 1-D convolution over `[batch, channels, length]` tensors.
//!
//! `y[b][o][i] = bias[o] + sum_c sum_k x[b][c][i + r k - pad_left] * w[o][c][k]`,
//! reading zero outside the input.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::kernels::{gemm_acc, lower_into, sum, transpose};
use super::{NnError, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeom {
    pub dilation: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl ConvGeom {
    pub fn symmetric(dilation: usize, padding: usize) -> Self {
        Self {
            dilation,
            pad_left: padding,
            pad_right: padding,
        }
    }

    /// Output length equals input length: total padding `(k - 1) r`, left
    /// half rounded down, remainder on the right.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        let total = (kernel - 1) * dilation;
        Self {
            dilation,
            pad_left: total / 2,
            pad_right: total - total / 2,
        }
    }

    pub fn out_len(&self, len: usize, kernel: usize) -> Result<usize, NnError> {
        if kernel == 0 || self.dilation == 0 {
            return Err(NnError::Shape("kernel and dilation must be at least 1".into()));
        }
        let span = (kernel - 1) * self.dilation + 1;
        let padded = len + self.pad_left + self.pad_right;
        if padded < span {
            return Err(NnError::ReceptiveFieldTooLarge {
                span,
                padded_len: padded,
            });
        }
        Ok(padded - span + 1)
    }

    /// Output positions `[lo, hi)` for which tap `k` reads inside the input,
    /// and the input index offset of that tap.
    #[inline]
    fn tap_range(&self, k: usize, len: usize, out_len: usize) -> (usize, usize, isize) {
        let shift = (self.dilation * k) as isize - self.pad_left as isize;
        let lo = (-shift).max(0) as usize;
        let hi = (len as isize - shift).clamp(0, out_len as isize) as usize;
        (lo.min(hi), hi, shift)
    }
}

fn dims<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize), NnError> {
    if x.rank() != 3 || w.rank() != 3 {
        return Err(NnError::Shape(format!(
            "conv1d expects [B,C,L] input and [O,C,K] weight, got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (b, c, l) = (x.dim(0), x.dim(1), x.dim(2));
    let (o, wc, k) = (w.dim(0), w.dim(1), w.dim(2));
    if wc != c {
        return Err(NnError::Shape(format!(
            "conv1d weight has {wc} input channels, input has {c}"
        )));
    }
    Ok((b, c, l, o, k))
}

/// Unfolds one `[C, L]` input into `col[(c, k), i] = x[c][i + r k - pad_left]`.
fn im2col<T: Scalar>(x: &[T], c_in: usize, len: usize, kernel: usize, out_len: usize, geom: &ConvGeom, col: &mut [f64]) {
    for c in 0..c_in {
        let xrow = &x[c * len..][..len];
        for k in 0..kernel {
            let (lo, hi, shift) = geom.tap_range(k, len, out_len);
            let dst = &mut col[(c * kernel + k) * out_len..][..out_len];
            dst[..lo].fill(0.0);
            dst[hi..].fill(0.0);
            for i in lo..hi {
                dst[i] = xrow[(i as isize + shift) as usize].lift();
            }
        }
    }
}

pub fn conv1d_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: &Tensor<T>,
    geom: &ConvGeom,
) -> Result<Tensor<T>, NnError> {
    let (nb, c_in, len, c_out, kernel) = dims(x, w)?;
    if bias.len() != c_out {
        return Err(NnError::Shape(format!(
            "conv1d bias has {} entries, expected {c_out}",
            bias.len()
        )));
    }
    let out_len = geom.out_len(len, kernel)?;
    let ck = c_in * kernel;
    let wd = w.to_f64();
    let bd = bias.to_f64();
    let xd = x.data();
    let mut y = Tensor::zeros(&[nb, c_out, out_len]);
    y.data_mut()
        .par_chunks_mut(c_out * out_len)
        .enumerate()
        .for_each_init(
            || (vec![0.0f64; ck * out_len], vec![0.0f64; c_out * out_len]),
            |(col, acc), (b, out)| {
                im2col(&xd[b * c_in * len..][..c_in * len], c_in, len, kernel, out_len, geom, col);
                for (o, row) in acc.chunks_mut(out_len).enumerate() {
                    row.fill(bd[o]);
                }
                gemm_acc(c_out, out_len, ck, &wd, col, acc);
                lower_into(out, acc);
            },
        );
    Ok(y)
}

/// Gradients `(dx, dw, dbias)` given the upstream gradient `dy`.
pub fn conv1d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    geom: &ConvGeom,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (nb, c_in, len, c_out, kernel) = dims(x, w).expect("validated in forward");
    let out_len = dy.dim(2);
    let ck = c_in * kernel;
    let xd = x.data();
    let dyd = dy.data();
    let mut wt = vec![0.0; ck * c_out];
    transpose(c_out, ck, &w.to_f64(), &mut wt);

    let mut dx = Tensor::zeros(x.shape());
    dx.data_mut()
        .par_chunks_mut(c_in * len)
        .enumerate()
        .for_each_init(
            || (vec![0.0f64; c_out * out_len], vec![0.0f64; ck * out_len], vec![0.0f64; c_in * len]),
            |(g, dcol, acc), (b, out)| {
                for (gv, d) in g.iter_mut().zip(&dyd[b * c_out * out_len..][..c_out * out_len]) {
                    *gv = d.lift();
                }
                dcol.fill(0.0);
                gemm_acc(ck, out_len, c_out, &wt, g, dcol);
                acc.fill(0.0);
                for c in 0..c_in {
                    let arow = &mut acc[c * len..][..len];
                    for k in 0..kernel {
                        let (lo, hi, shift) = geom.tap_range(k, len, out_len);
                        let src = &dcol[(c * kernel + k) * out_len..][..out_len];
                        for i in lo..hi {
                            arow[(i as isize + shift) as usize] += src[i];
                        }
                    }
                }
                lower_into(out, acc);
            },
        );

    // Weight gradients accumulate over the batch in index order.
    let mut dw_acc = vec![0.0; c_out * ck];
    let mut db_acc = vec![0.0; c_out];
    let mut col = vec![0.0; ck * out_len];
    let mut col_t = vec![0.0; out_len * ck];
    let mut g = vec![0.0; c_out * out_len];
    for b in 0..nb {
        im2col(&xd[b * c_in * len..][..c_in * len], c_in, len, kernel, out_len, geom, &mut col);
        transpose(ck, out_len, &col, &mut col_t);
        for (gv, d) in g.iter_mut().zip(&dyd[b * c_out * out_len..][..c_out * out_len]) {
            *gv = d.lift();
        }
        gemm_acc(c_out, ck, out_len, &g, &col_t, &mut dw_acc);
        for (o, acc) in db_acc.iter_mut().enumerate() {
            *acc += sum(&g[o * out_len..][..out_len]);
        }
    }
    let dw = Tensor::from_f64(w.shape(), &dw_acc).expect("weight shape");
    let db = Tensor::from_f64(&[c_out], &db_acc).expect("bias shape");
    (dx, dw, db)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::kernels::dot;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    /// Direct summation over the zero-padded input.
    fn naive(x: &[f64], w: &[f64], bias: &[f64], dims: (usize, usize, usize, usize, usize), g: ConvGeom) -> Vec<f64> {
        let (nb, c_in, len, c_out, kernel) = dims;
        let padded = len + g.pad_left + g.pad_right;
        let out_len = padded - (kernel - 1) * g.dilation;
        let mut y = vec![0.0; nb * c_out * out_len];
        for b in 0..nb {
            for o in 0..c_out {
                for i in 0..out_len {
                    let mut s = bias[o];
                    for c in 0..c_in {
                        for k in 0..kernel {
                            let p = i + g.dilation * k;
                            if p >= g.pad_left && p - g.pad_left < len {
                                s += x[(b * c_in + c) * len + p - g.pad_left] * w[(o * c_in + c) * kernel + k];
                            }
                        }
                    }
                    y[(b * c_out + o) * out_len + i] = s;
                }
            }
        }
        y
    }

    #[test]
    fn dilated_hand_case() {
        let x = Tensor::<f64>::from_f64(&[1, 1, 5], &[1., 0., 2., 0., 3.]).unwrap();
        let w = Tensor::from_f64(&[1, 1, 2], &[1., 1.]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv1d_forward(&x, &w, &b, &ConvGeom::symmetric(2, 0)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3]);
        assert_eq!(y.to_f64(), vec![3., 0., 5.]);
    }

    #[test]
    fn identity_kernel() {
        let x = Tensor::<f32>::from_f64(&[2, 1, 4], &[1., -2., 3., 0.5, 7., 8., 9., 10.]).unwrap();
        let w = Tensor::from_f64(&[1, 1, 1], &[1.]).unwrap();
        let y = conv1d_forward(&x, &w, &Tensor::zeros(&[1]), &ConvGeom::symmetric(1, 0)).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn receptive_field_too_large() {
        let x = Tensor::<f32>::zeros(&[1, 1, 5]);
        let w = Tensor::zeros(&[1, 1, 3]);
        assert!(matches!(
            conv1d_forward(&x, &w, &Tensor::zeros(&[1]), &ConvGeom::symmetric(3, 0)),
            Err(NnError::ReceptiveFieldTooLarge { span: 7, padded_len: 5 })
        ));
    }

    #[test]
    fn same_padding_preserves_length() {
        for (k, r) in [(7, 15), (7, 2), (11, 13), (2, 3), (1, 1)] {
            let g = ConvGeom::same(k, r);
            assert_eq!(g.out_len(100, k).unwrap(), 100);
            assert!(g.pad_right >= g.pad_left);
        }
    }

    #[test]
    fn matches_naive_on_random_shapes() {
        let mut rng = rng_from_seed(31);
        for _ in 0..60 {
            let nb = rng.random_range(1..3);
            let c_in = rng.random_range(1..4);
            let c_out = rng.random_range(1..4);
            let kernel = rng.random_range(1..5);
            let dilation = rng.random_range(1..4);
            let g = ConvGeom {
                dilation,
                pad_left: rng.random_range(0..4),
                pad_right: rng.random_range(0..4),
            };
            let len = rng.random_range(((kernel - 1) * dilation + 1).saturating_sub(g.pad_left + g.pad_right).max(1)..20);
            let xs: Vec<f64> = (0..nb * c_in * len).map(|_| rng.random_range(-1.0..1.0)).collect();
            let ws: Vec<f64> = (0..c_out * c_in * kernel).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bs: Vec<f64> = (0..c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y = conv1d_forward(
                &Tensor::<f64>::from_f64(&[nb, c_in, len], &xs).unwrap(),
                &Tensor::from_f64(&[c_out, c_in, kernel], &ws).unwrap(),
                &Tensor::from_f64(&[c_out], &bs).unwrap(),
                &g,
            )
            .unwrap();
            let expected = naive(&xs, &ws, &bs, (nb, c_in, len, c_out, kernel), g);
            for (a, e) in y.to_f64().iter().zip(&expected) {
                assert!((a - e).abs() <= 1e-12 * e.abs().max(1.0));
            }
        }
    }

    /// The backward pass is the adjoint of the forward map:
    /// `<dy, conv(x)> - <dy, bias> = <dx, x>` and `= <dw, w>`.
    #[test]
    fn backward_is_adjoint() {
        let mut rng = rng_from_seed(5);
        let (nb, c_in, len, c_out, kernel) = (2, 3, 11, 2, 3);
        let g = ConvGeom::same(kernel, 2);
        let rand_t = |shape: &[usize], rng: &mut crate::rng::Rng| {
            let n: usize = shape.iter().product();
            Tensor::<f64>::from_f64(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap()
        };
        let x = rand_t(&[nb, c_in, len], &mut rng);
        let w = rand_t(&[c_out, c_in, kernel], &mut rng);
        let zero = Tensor::zeros(&[c_out]);
        let y = conv1d_forward(&x, &w, &zero, &g).unwrap();
        let dy = rand_t(y.shape(), &mut rng);
        let (dx, dw, db) = conv1d_backward(&x, &w, &g, &dy);
        let ip = |a: &Tensor<f64>, b: &Tensor<f64>| dot(a.data(), b.data());
        let lhs = ip(&dy, &y);
        assert!((lhs - ip(&dx, &x)).abs() < 1e-10);
        assert!((lhs - ip(&dw, &w)).abs() < 1e-10);
        let expected_db: Vec<f64> = (0..c_out)
            .map(|o| (0..nb).map(|b| sum(&dy.data()[(b * c_out + o) * len..][..len])).sum())
            .collect();
        for (a, e) in db.to_f64().iter().zip(&expected_db) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}
