//! Single-layer LSTM over the length axis of `[batch, features, time]`.
//!
//! Gate rows of `W: [4H, D]`, `U: [4H, H]` and `b: [4H]` are ordered input,
//! forget, cell candidate, output. The hidden sequence is returned as
//! `[batch, H, time]` so it can feed further convolutions.

use rayon::prelude::*;

use super::kernels::{gemm_acc, lower_into, sigmoid, transpose};
use super::{NnError, Scalar, Tensor};

#[derive(Debug, Clone)]
pub struct LstmCache {
    /// Activated gates `[B, T, 4H]`.
    gates: Vec<f64>,
    /// Cell states `[B, T, H]`.
    cells: Vec<f64>,
    /// Hidden states `[B, T, H]`.
    hidden: Vec<f64>,
    /// Input `[B, D, T]`.
    inputs: Vec<f64>,
    dims: (usize, usize, usize, usize),
}

impl LstmCache {
    /// Final cell state of batch element `b`.
    pub fn final_cell(&self, b: usize) -> &[f64] {
        let (_, _, t, h) = self.dims;
        &self.cells[(b * t + t - 1) * h..][..h]
    }

    pub fn cell(&self, b: usize, step: usize) -> &[f64] {
        let (_, _, t, h) = self.dims;
        &self.cells[(b * t + step) * h..][..h]
    }
}

fn check<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, u: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize, usize, usize), NnError> {
    if x.rank() != 3 || w.rank() != 2 || u.rank() != 2 {
        return Err(NnError::Shape(format!(
            "lstm expects [B,D,T] input with [4H,D], [4H,H] weights, got {:?}, {:?}, {:?}",
            x.shape(),
            w.shape(),
            u.shape()
        )));
    }
    let (nb, d, t) = (x.dim(0), x.dim(1), x.dim(2));
    let h = u.dim(1);
    if w.dim(0) != 4 * h || w.dim(1) != d || u.dim(0) != 4 * h || bias.len() != 4 * h {
        return Err(NnError::Shape(format!(
            "lstm weights {:?}, {:?}, bias {:?} inconsistent with {d} inputs and {h} hidden units",
            w.shape(),
            u.shape(),
            bias.shape()
        )));
    }
    if t == 0 {
        return Err(NnError::Shape("lstm needs at least one time step".into()));
    }
    Ok((nb, d, t, h))
}

pub fn lstm_forward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    u: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<(Tensor<T>, LstmCache), NnError> {
    let (nb, d, t, h) = check(x, w, u, bias)?;
    let g4 = 4 * h;
    let wd = w.to_f64();
    let mut ut = vec![0.0; h * g4];
    transpose(g4, h, &u.to_f64(), &mut ut);
    let bd = bias.to_f64();
    let mut gates = vec![0.0; nb * t * g4];
    let mut cells = vec![0.0; nb * t * h];
    let mut hidden = vec![0.0; nb * t * h];
    let mut inputs: Vec<f64> = x.to_f64();
    let mut y = Tensor::zeros(&[nb, h, t]);
    gates
        .par_chunks_mut(t * g4)
        .zip(cells.par_chunks_mut(t * h))
        .zip(hidden.par_chunks_mut(t * h))
        .zip(inputs.par_chunks_mut(d * t))
        .zip(y.data_mut().par_chunks_mut(h * t))
        .for_each(|((((gs, cs), hs), xs), out)| {
            // Input projection for every step at once: zx = b + W x, [4H, T].
            let mut zx = vec![0.0; g4 * t];
            for (j, row) in zx.chunks_mut(t).enumerate() {
                row.fill(bd[j]);
            }
            gemm_acc(g4, t, d, &wd, xs, &mut zx);
            let mut h_prev = vec![0.0; h];
            let mut c_prev = vec![0.0; h];
            for s in 0..t {
                let g = &mut gs[s * g4..][..g4];
                for (j, gj) in g.iter_mut().enumerate() {
                    *gj = zx[j * t + s];
                }
                gemm_acc(1, g4, h, &h_prev, &ut, g);
                let (gi, rest) = g.split_at_mut(h);
                let (gf, rest) = rest.split_at_mut(h);
                let (gg, go) = rest.split_at_mut(h);
                let c = &mut cs[s * h..][..h];
                let hh = &mut hs[s * h..][..h];
                for k in 0..h {
                    gi[k] = sigmoid(gi[k]);
                    gf[k] = sigmoid(gf[k]);
                    gg[k] = gg[k].tanh();
                    go[k] = sigmoid(go[k]);
                    c[k] = gf[k] * c_prev[k] + gi[k] * gg[k];
                    hh[k] = go[k] * c[k].tanh();
                }
                h_prev.copy_from_slice(hh);
                c_prev.copy_from_slice(c);
                for k in 0..h {
                    out[k * t + s] = T::lower(hh[k]);
                }
            }
        });
    let cache = LstmCache {
        gates,
        cells,
        hidden,
        inputs,
        dims: (nb, d, t, h),
    };
    Ok((y, cache))
}

/// Gradients `(dx, dW, dU, dbias)` given the gradient of the hidden sequence.
pub fn lstm_backward<T: Scalar>(
    cache: &LstmCache,
    w: &Tensor<T>,
    u: &Tensor<T>,
    dy: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>, Tensor<T>, Tensor<T>) {
    let (nb, d, t, h) = cache.dims;
    let g4 = 4 * h;
    let wd = w.to_f64();
    let ud = u.to_f64();
    let dyd = dy.data();
    let mut dz = vec![0.0; nb * t * g4];
    let mut dx = Tensor::zeros(&[nb, d, t]);
    dz.par_chunks_mut(t * g4)
        .zip(dx.data_mut().par_chunks_mut(d * t))
        .enumerate()
        .for_each(|(b, (dzb, dxb))| {
            let gs = &cache.gates[b * t * g4..][..t * g4];
            let cs = &cache.cells[b * t * h..][..t * h];
            let upstream = &dyd[b * h * t..][..h * t];
            let mut dh_next = vec![0.0; h];
            let mut dc_next = vec![0.0; h];
            for s in (0..t).rev() {
                let g = &gs[s * g4..][..g4];
                let c = &cs[s * h..][..h];
                let dzs = &mut dzb[s * g4..][..g4];
                for k in 0..h {
                    let (i, f, gg, o) = (g[k], g[h + k], g[2 * h + k], g[3 * h + k]);
                    let c_prev = if s > 0 { cs[(s - 1) * h + k] } else { 0.0 };
                    let tc = c[k].tanh();
                    let dh = upstream[k * t + s].lift() + dh_next[k];
                    let dc = dc_next[k] + dh * o * (1.0 - tc * tc);
                    dzs[k] = dc * gg * i * (1.0 - i);
                    dzs[h + k] = dc * c_prev * f * (1.0 - f);
                    dzs[2 * h + k] = dc * i * (1.0 - gg * gg);
                    dzs[3 * h + k] = dh * tc * o * (1.0 - o);
                    dc_next[k] = dc * f;
                }
                dh_next.fill(0.0);
                gemm_acc(1, h, g4, dzs, &ud, &mut dh_next);
            }
            // dx^T = dz W, [T, D].
            let mut dxt = vec![0.0; t * d];
            gemm_acc(t, d, g4, dzb, &wd, &mut dxt);
            let mut dxr = vec![0.0; d * t];
            transpose(t, d, &dxt, &mut dxr);
            lower_into(dxb, &dxr);
        });

    // dW^T = X dz and dU^T = H_prev^T dz[1..], accumulated over the batch in
    // index order.
    let mut dwt = vec![0.0; d * g4];
    let mut dut = vec![0.0; h * g4];
    let mut db = vec![0.0; g4];
    let mut hprev_t = vec![0.0; h * t.saturating_sub(1)];
    for b in 0..nb {
        let dzb = &dz[b * t * g4..][..t * g4];
        gemm_acc(d, g4, t, &cache.inputs[b * d * t..][..d * t], dzb, &mut dwt);
        if t > 1 {
            transpose(t - 1, h, &cache.hidden[b * t * h..][..(t - 1) * h], &mut hprev_t);
            gemm_acc(h, g4, t - 1, &hprev_t, &dzb[g4..], &mut dut);
        }
        for row in dzb.chunks(g4) {
            for (a, v) in db.iter_mut().zip(row) {
                *a += v;
            }
        }
    }
    let mut dw = vec![0.0; g4 * d];
    transpose(d, g4, &dwt, &mut dw);
    let mut du = vec![0.0; g4 * h];
    transpose(h, g4, &dut, &mut du);
    (
        dx,
        Tensor::from_f64(w.shape(), &dw).expect("weight shape"),
        Tensor::from_f64(u.shape(), &du).expect("recurrent shape"),
        Tensor::from_f64(&[g4], &db).expect("bias shape"),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::kernels::dot;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn random(shape: &[usize], rng: &mut crate::rng::Rng) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::from_f64(shape, &(0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn zero_weights_give_zero_hidden() {
        let mut rng = rng_from_seed(1);
        let x = random(&[2, 3, 5], &mut rng);
        let (y, _) = lstm_forward(&x, &Tensor::zeros(&[16, 3]), &Tensor::zeros(&[16, 4]), &Tensor::zeros(&[16])).unwrap();
        assert_eq!(y.shape(), &[2, 4, 5]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_cell_by_hand() {
        // D = H = 1, one step: gate pre-activations are w_k x + b_k.
        let x = Tensor::<f64>::from_f64(&[1, 1, 1], &[0.7]).unwrap();
        let w = Tensor::from_f64(&[4, 1], &[0.5, -1.0, 2.0, 0.3]).unwrap();
        let u = Tensor::from_f64(&[4, 1], &[9.0, 9.0, 9.0, 9.0]).unwrap();
        let b = Tensor::from_f64(&[4], &[0.1, 0.2, -0.3, 0.4]).unwrap();
        let (y, cache) = lstm_forward(&x, &w, &u, &b).unwrap();
        let s = |v: f64| 1.0 / (1.0 + (-v).exp());
        let i = s(0.5 * 0.7 + 0.1);
        let g = (2.0f64 * 0.7 - 0.3).tanh();
        let o = s(0.3 * 0.7 + 0.4);
        let c = i * g;
        assert!((cache.final_cell(0)[0] - c).abs() < 1e-12);
        assert!((y.item() - o * c.tanh()).abs() < 1e-12);
    }

    #[test]
    fn saturated_forget_gate_accumulates() {
        let mut rng = rng_from_seed(2);
        let (d, h, t) = (3, 2, 6);
        let x = random(&[1, d, t], &mut rng);
        let w = random(&[4 * h, d], &mut rng);
        let u = random(&[4 * h, h], &mut rng);
        let mut b = random(&[4 * h], &mut rng);
        for k in 0..h {
            b.data_mut()[h + k] = 20.0;
        }
        let (_, cache) = lstm_forward(&x, &w, &u, &b).unwrap();
        let mut running = vec![0.0; h];
        for s in 0..t {
            let g = &cache.gates[s * 4 * h..][..4 * h];
            for k in 0..h {
                running[k] += g[k] * g[2 * h + k];
            }
            for k in 0..h {
                assert!((cache.cell(0, s)[k] - running[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn hidden_gradient_is_adjoint_of_linearization() {
        // Directional derivative along dx must equal <dy, J dx>.
        let mut rng = rng_from_seed(3);
        let (nb, d, h, t) = (2, 3, 4, 5);
        let x = random(&[nb, d, t], &mut rng);
        let w = random(&[4 * h, d], &mut rng);
        let u = random(&[4 * h, h], &mut rng);
        let b = random(&[4 * h], &mut rng);
        let (_, cache) = lstm_forward(&x, &w, &u, &b).unwrap();
        let dy = random(&[nb, h, t], &mut rng);
        let (dx, _, _, _) = lstm_backward(&cache, &w, &u, &dy);
        let v = random(&[nb, d, t], &mut rng);
        let eps = 1e-6;
        let shifted = |sign: f64| {
            let mut xs = x.clone();
            for (a, dv) in xs.data_mut().iter_mut().zip(v.data()) {
                *a += sign * eps * dv;
            }
            lstm_forward(&xs, &w, &u, &b).unwrap().0
        };
        let (yp, ym) = (shifted(1.0), shifted(-1.0));
        let fd: f64 = dy
            .data()
            .iter()
            .zip(yp.data().iter().zip(ym.data()))
            .map(|(g, (p, m))| g * (p - m) / (2.0 * eps))
            .sum();
        assert!((fd - dot(dx.data(), v.data())).abs() < 1e-7);
    }
}
