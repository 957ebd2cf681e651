use rayon::prelude::*;

use super::kernels::{axpy, dot, lower_into, sum};
use super::{NnError, Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the previous running statistic in each update.
pub const BN_MOMENTUM: f64 = 0.9;

fn expect_rank<T: Scalar>(x: &Tensor<T>, rank: usize, what: &str) -> Result<(), NnError> {
    if x.rank() != rank {
        return Err(NnError::Shape(format!("{what} expects rank {rank}, got {:?}", x.shape())));
    }
    Ok(())
}

/// Per-channel statistics of one training batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BnStats {
    pub mean: Vec<f64>,
    /// Biased variance, used for normalization.
    pub var: Vec<f64>,
    /// Unbiased variance, folded into the running estimate.
    pub unbiased_var: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct BnCache<T> {
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<f64>,
    pub train: bool,
}

/// `running = None` normalizes with batch statistics and returns them;
/// `Some((mean, var))` normalizes with the given running estimates.
pub fn batchnorm_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    running: Option<(&Tensor<T>, &Tensor<T>)>,
) -> Result<(Tensor<T>, BnCache<T>, Option<BnStats>), NnError> {
    expect_rank(x, 3, "batchnorm")?;
    let (nb, c, len) = (x.dim(0), x.dim(1), x.dim(2));
    if gamma.len() != c || beta.len() != c {
        return Err(NnError::Shape(format!("batchnorm over {c} channels needs {c} scale/shift values")));
    }
    let xd = x.data();
    let (mean, var, stats) = match running {
        Some((m, v)) => {
            if m.len() != c || v.len() != c {
                return Err(NnError::Shape(format!("running statistics must have {c} entries")));
            }
            (m.to_f64(), v.to_f64(), None)
        }
        None => {
            let n = (nb * len) as f64;
            let per_channel: Vec<(f64, f64)> = (0..c)
                .into_par_iter()
                .map(|ch| {
                    let rows = || (0..nb).map(|b| &xd[(b * c + ch) * len..][..len]);
                    let mean = rows().map(sum).sum::<f64>() / n;
                    let ss: f64 = rows()
                        .map(|r| r.iter().map(|v| (v.lift() - mean).powi(2)).sum::<f64>())
                        .sum();
                    (mean, ss)
                })
                .collect();
            let mean: Vec<f64> = per_channel.iter().map(|p| p.0).collect();
            let var: Vec<f64> = per_channel.iter().map(|p| p.1 / n).collect();
            let unbiased_var = per_channel
                .iter()
                .map(|p| if n > 1.0 { p.1 / (n - 1.0) } else { 0.0 })
                .collect();
            let stats = BnStats {
                mean: mean.clone(),
                var: var.clone(),
                unbiased_var,
            };
            (mean, var, Some(stats))
        }
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let (g, bt) = (gamma.to_f64(), beta.to_f64());
    let mut x_hat = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    x_hat
        .data_mut()
        .par_chunks_mut(len)
        .zip(y.data_mut().par_chunks_mut(len))
        .enumerate()
        .for_each(|(row, (h, out))| {
            let ch = row % c;
            let src = &xd[row * len..][..len];
            for ((hv, ov), xv) in h.iter_mut().zip(out.iter_mut()).zip(src) {
                let n = (xv.lift() - mean[ch]) * inv_std[ch];
                *hv = T::lower(n);
                *ov = T::lower(g[ch] * n + bt[ch]);
            }
        });
    let cache = BnCache {
        x_hat,
        inv_std,
        train: running.is_none(),
    };
    Ok((y, cache, stats))
}

/// Gradients `(dx, dgamma, dbeta)`.
pub fn batchnorm_backward<T: Scalar>(
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (nb, c, len) = (dy.dim(0), dy.dim(1), dy.dim(2));
    let n = (nb * len) as f64;
    let (dyd, xh) = (dy.data(), cache.x_hat.data());
    let sums: Vec<(f64, f64)> = (0..c)
        .into_par_iter()
        .map(|ch| {
            let mut s = 0.0;
            let mut sx = 0.0;
            for b in 0..nb {
                let o = (b * c + ch) * len;
                s += sum(&dyd[o..o + len]);
                sx += dot(&dyd[o..o + len], &xh[o..o + len]);
            }
            (s, sx)
        })
        .collect();
    let g = gamma.to_f64();
    let mut dx = Tensor::zeros(dy.shape());
    dx.data_mut().par_chunks_mut(len).enumerate().for_each(|(row, out)| {
        let ch = row % c;
        let (s, sx) = sums[ch];
        let scale = g[ch] * cache.inv_std[ch];
        let o = row * len;
        for (i, d) in out.iter_mut().enumerate() {
            let v = if cache.train {
                scale / n * (n * dyd[o + i].lift() - s - xh[o + i].lift() * sx)
            } else {
                scale * dyd[o + i].lift()
            };
            *d = T::lower(v);
        }
    });
    let dgamma = Tensor::from_f64(&[c], &sums.iter().map(|p| p.1).collect::<Vec<_>>()).expect("length c");
    let dbeta = Tensor::from_f64(&[c], &sums.iter().map(|p| p.0).collect::<Vec<_>>()).expect("length c");
    (dx, dgamma, dbeta)
}

pub fn pool_out_len(len: usize, window: usize, stride: usize) -> Result<usize, NnError> {
    if window == 0 || stride == 0 {
        return Err(NnError::Shape("pooling window and stride must be at least 1".into()));
    }
    if window > len {
        return Err(NnError::WindowTooLarge { window, len });
    }
    Ok((len - window) / stride + 1)
}

pub fn avgpool_forward<T: Scalar>(x: &Tensor<T>, window: usize, stride: usize) -> Result<Tensor<T>, NnError> {
    expect_rank(x, 3, "avgpool")?;
    let len = x.dim(2);
    let out_len = pool_out_len(len, window, stride)?;
    let mut y = Tensor::zeros(&[x.dim(0), x.dim(1), out_len]);
    let xd = x.data();
    let inv = 1.0 / window as f64;
    y.data_mut().par_chunks_mut(out_len).enumerate().for_each(|(row, out)| {
        let src = &xd[row * len..][..len];
        for (i, o) in out.iter_mut().enumerate() {
            *o = T::lower(sum(&src[i * stride..i * stride + window]) * inv);
        }
    });
    Ok(y)
}

pub fn avgpool_backward<T: Scalar>(dy: &Tensor<T>, in_len: usize, window: usize, stride: usize) -> Tensor<T> {
    let out_len = dy.dim(2);
    let mut dx = Tensor::zeros(&[dy.dim(0), dy.dim(1), in_len]);
    let dyd = dy.data();
    let inv = 1.0 / window as f64;
    dx.data_mut()
        .par_chunks_mut(in_len)
        .enumerate()
        .for_each_init(
            || vec![0.0f64; in_len],
            |acc, (row, out)| {
                acc.fill(0.0);
                for (i, g) in dyd[row * out_len..][..out_len].iter().enumerate() {
                    for a in &mut acc[i * stride..i * stride + window] {
                        *a += g.lift() * inv;
                    }
                }
                lower_into(out, acc);
            },
        );
    dx
}

/// `y[b] = W x[b] + bias` for `x: [B, D_in]`, `W: [D_out, D_in]`.
pub fn dense_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>, NnError> {
    expect_rank(x, 2, "dense")?;
    expect_rank(w, 2, "dense weight")?;
    let (nb, d_in, d_out) = (x.dim(0), x.dim(1), w.dim(0));
    if w.dim(1) != d_in || bias.len() != d_out {
        return Err(NnError::Shape(format!(
            "dense weight {:?} and bias {:?} do not fit input {:?}",
            w.shape(),
            bias.shape(),
            x.shape()
        )));
    }
    let mut y = Tensor::zeros(&[nb, d_out]);
    let (xd, wd, bd) = (x.data(), w.data(), bias.data());
    y.data_mut().par_chunks_mut(d_out).enumerate().for_each(|(b, out)| {
        let xr = &xd[b * d_in..][..d_in];
        for (o, v) in out.iter_mut().enumerate() {
            *v = T::lower(bd[o].lift() + dot(&wd[o * d_in..][..d_in], xr));
        }
    });
    Ok(y)
}

/// Gradients `(dx, dw, dbias)`.
pub fn dense_backward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let (nb, d_in, d_out) = (x.dim(0), x.dim(1), w.dim(0));
    let (xd, wd, dyd) = (x.data(), w.data(), dy.data());
    let mut dx = Tensor::zeros(x.shape());
    dx.data_mut()
        .par_chunks_mut(d_in)
        .enumerate()
        .for_each_init(
            || vec![0.0f64; d_in],
            |acc, (b, out)| {
                acc.fill(0.0);
                for o in 0..d_out {
                    axpy(acc, dyd[b * d_out + o].lift(), &wd[o * d_in..][..d_in]);
                }
                lower_into(out, acc);
            },
        );
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[d_out]);
    dw.data_mut()
        .par_chunks_mut(d_in)
        .zip(db.data_mut().par_iter_mut())
        .enumerate()
        .for_each_init(
            || vec![0.0f64; d_in],
            |acc, (o, (out, dbo))| {
                acc.fill(0.0);
                let mut s = 0.0;
                for b in 0..nb {
                    let g = dyd[b * d_out + o].lift();
                    s += g;
                    axpy(acc, g, &xd[b * d_in..][..d_in]);
                }
                lower_into(out, acc);
                *dbo = T::lower(s);
            },
        );
    (dx, dw, db)
}

fn softmax_row<T: Scalar>(z: &[T], out: &mut [f64]) {
    let max = z.iter().map(|v| v.lift()).fold(f64::NEG_INFINITY, f64::max);
    for (o, v) in out.iter_mut().zip(z) {
        *o = (v.lift() - max).exp();
    }
    let total = sum(out);
    for o in out.iter_mut() {
        *o /= total;
    }
}

/// Row-wise softmax of `[B, K]` logits.
pub fn softmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<f64>, NnError> {
    expect_rank(logits, 2, "softmax")?;
    let k = logits.dim(1);
    let mut p = Tensor::zeros(logits.shape());
    let zd = logits.data();
    p.data_mut().par_chunks_mut(k).enumerate().for_each(|(b, out)| {
        softmax_row(&zd[b * k..][..k], out);
    });
    Ok(p)
}

/// Batch-mean negative log-likelihood of `labels` and the probabilities.
/// The loss is infinite once a true-class probability underflows.
pub fn softmax_xent<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<f64>), NnError> {
    expect_rank(logits, 2, "softmax cross-entropy")?;
    let (nb, k) = (logits.dim(0), logits.dim(1));
    if labels.len() != nb {
        return Err(NnError::Shape(format!("{} labels for a batch of {nb}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(NnError::Shape(format!("label {bad} outside {k} classes")));
    }
    let mut p = Tensor::zeros(logits.shape());
    let zd = logits.data();
    let nll: Vec<f64> = p
        .data_mut()
        .par_chunks_mut(k)
        .enumerate()
        .map(|(b, out)| {
            softmax_row(&zd[b * k..][..k], out);
            -out[labels[b]].ln()
        })
        .collect();
    Ok((sum(&nll) / nb as f64, p))
}
