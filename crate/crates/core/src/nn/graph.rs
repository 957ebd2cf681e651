//! Define-by-run tape. Each builder method evaluates its op immediately and
//! records what the backward pass needs.

use rayon::prelude::*;

use super::conv::{conv1d_backward, conv1d_forward, ConvGeom};
use super::layers::{
    avgpool_backward, avgpool_forward, batchnorm_backward, batchnorm_forward, dense_backward, dense_forward,
    softmax_xent, BnCache, BnStats, BN_MOMENTUM,
};
use super::lstm::{lstm_backward, lstm_forward, LstmCache};
use super::{NnError, ParamId, ParamStore, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Batch norm uses batch statistics in `Train` and running estimates in
/// `Infer`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

enum Op<T> {
    Input,
    Conv {
        x: NodeId,
        w: ParamId,
        b: ParamId,
        geom: ConvGeom,
    },
    BatchNorm {
        gamma: ParamId,
        beta: ParamId,
        cache: BnCache<T>,
        x: NodeId,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    AvgPool {
        x: NodeId,
        window: usize,
        stride: usize,
    },
    Concat(Vec<NodeId>),
    Lstm {
        x: NodeId,
        w: ParamId,
        u: ParamId,
        cache: LstmCache,
        b: ParamId,
    },
    LastStep(NodeId),
    Flatten(NodeId),
    Dense {
        x: NodeId,
        w: ParamId,
        b: ParamId,
    },
    SoftmaxXent {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Tensor<f64>,
    },
    Sum(NodeId),
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
}

/// Per-parameter gradients from one backward pass, indexed like the store.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    fn add(&mut self, id: ParamId, g: Tensor<T>) {
        match &mut self.grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    /// Adds into the store's gradient buffers.
    pub fn accumulate_into(self, store: &mut ParamStore<T>) {
        for (i, g) in self.grads.into_iter().enumerate() {
            if let Some(g) = g {
                store.get_mut(ParamId(i)).grad.add_assign(&g);
            }
        }
    }
}

pub struct Graph<'p, T> {
    params: &'p ParamStore<T>,
    mode: Mode,
    nodes: Vec<Node<T>>,
    stats: Vec<(ParamId, ParamId, BnStats)>,
}

impl<'p, T: Scalar> Graph<'p, T> {
    pub fn new(params: &'p ParamStore<T>, mode: Mode) -> Self {
        Self {
            params,
            mode,
            nodes: Vec::new(),
            stats: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Softmax output of a cross-entropy node.
    pub fn probabilities(&self, id: NodeId) -> Option<&Tensor<f64>> {
        match &self.nodes[id.0].op {
            Op::SoftmaxXent { probs, .. } => Some(probs),
            _ => None,
        }
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { op, value });
        NodeId(self.nodes.len() - 1)
    }

    fn p(&self, id: ParamId) -> &'p Tensor<T> {
        self.params.value(id)
    }

    pub fn input(&mut self, x: Tensor<T>) -> NodeId {
        self.push(Op::Input, x)
    }

    pub fn conv1d(&mut self, x: NodeId, w: ParamId, b: ParamId, geom: ConvGeom) -> Result<NodeId, NnError> {
        let y = conv1d_forward(self.value(x), self.p(w), self.p(b), &geom)?;
        Ok(self.push(Op::Conv { x, w, b, geom }, y))
    }

    pub fn batchnorm(
        &mut self,
        x: NodeId,
        gamma: ParamId,
        beta: ParamId,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Result<NodeId, NnError> {
        let running = match self.mode {
            Mode::Train => None,
            Mode::Infer => Some((self.p(running_mean), self.p(running_var))),
        };
        let (y, cache, stats) = batchnorm_forward(self.value(x), self.p(gamma), self.p(beta), running)?;
        if let Some(stats) = stats {
            self.stats.push((running_mean, running_var, stats));
        }
        Ok(self.push(Op::BatchNorm { x, gamma, beta, cache }, y))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu(x), y)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(super::kernels::sigmoid);
        self.push(Op::Sigmoid(x), y)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let y = self.value(x).map(f64::tanh);
        self.push(Op::Tanh(x), y)
    }

    pub fn avgpool(&mut self, x: NodeId, window: usize, stride: usize) -> Result<NodeId, NnError> {
        let y = avgpool_forward(self.value(x), window, stride)?;
        Ok(self.push(Op::AvgPool { x, window, stride }, y))
    }

    /// Concatenation along the channel axis of `[B, C, L]` tensors.
    pub fn concat(&mut self, xs: &[NodeId]) -> Result<NodeId, NnError> {
        let first = self.value(*xs.first().ok_or_else(|| NnError::Shape("concat of nothing".into()))?);
        let (nb, len) = (first.dim(0), first.dim(2));
        let mut channels = 0;
        for &x in xs {
            let v = self.value(x);
            if v.rank() != 3 || v.dim(0) != nb || v.dim(2) != len {
                return Err(NnError::Shape(format!(
                    "concat inputs must share batch and length, got {:?} and {:?}",
                    first.shape(),
                    v.shape()
                )));
            }
            channels += v.dim(1);
        }
        let mut data = Vec::with_capacity(nb * channels * len);
        for b in 0..nb {
            for &x in xs {
                let v = self.value(x);
                let row = v.dim(1) * len;
                data.extend_from_slice(&v.data()[b * row..][..row]);
            }
        }
        let y = Tensor::from_vec(&[nb, channels, len], data)?;
        Ok(self.push(Op::Concat(xs.to_vec()), y))
    }

    pub fn lstm(&mut self, x: NodeId, w: ParamId, u: ParamId, b: ParamId) -> Result<NodeId, NnError> {
        let (y, cache) = lstm_forward(self.value(x), self.p(w), self.p(u), self.p(b))?;
        Ok(self.push(Op::Lstm { x, w, u, b, cache }, y))
    }

    /// `[B, C, T] -> [B, C]` at the final step.
    pub fn last_step(&mut self, x: NodeId) -> Result<NodeId, NnError> {
        let v = self.value(x);
        if v.rank() != 3 {
            return Err(NnError::Shape(format!("last_step expects [B,C,T], got {:?}", v.shape())));
        }
        let (nb, c, t) = (v.dim(0), v.dim(1), v.dim(2));
        let data = (0..nb * c).map(|r| v.data()[r * t + t - 1]).collect();
        let y = Tensor::from_vec(&[nb, c], data)?;
        Ok(self.push(Op::LastStep(x), y))
    }

    /// `[B, ...] -> [B, prod(...)]`.
    pub fn flatten(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let nb = v.dim(0);
        let y = v.clone().reshaped(&[nb, v.len() / nb.max(1)]).expect("same length");
        self.push(Op::Flatten(x), y)
    }

    pub fn dense(&mut self, x: NodeId, w: ParamId, b: ParamId) -> Result<NodeId, NnError> {
        let y = dense_forward(self.value(x), self.p(w), self.p(b))?;
        Ok(self.push(Op::Dense { x, w, b }, y))
    }

    /// Batch-mean cross-entropy; the node value is the `[1]` loss.
    pub fn softmax_xent(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId, NnError> {
        let (loss, probs) = softmax_xent(self.value(logits), labels)?;
        let op = Op::SoftmaxXent {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        Ok(self.push(op, Tensor::scalar(loss)))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = super::kernels::sum(self.value(x).data());
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    /// Updated running mean and variance for every batch-norm layer run in
    /// training mode.
    pub fn running_updates(&self) -> Vec<(ParamId, Tensor<T>)> {
        let blend = |old: &Tensor<T>, batch: &[f64]| {
            let v: Vec<f64> = old
                .data()
                .iter()
                .zip(batch)
                .map(|(o, b)| BN_MOMENTUM * o.lift() + (1.0 - BN_MOMENTUM) * b)
                .collect();
            Tensor::from_f64(old.shape(), &v).expect("same length")
        };
        let mut out = Vec::new();
        for (m, v, stats) in &self.stats {
            out.push((*m, blend(self.p(*m), &stats.mean)));
            out.push((*v, blend(self.p(*v), &stats.unbiased_var)));
        }
        out
    }

    /// Reverse pass from a single-valued node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, NnError> {
        let node = self.nodes.get(loss.0).ok_or(NnError::GraphNotEvaluated)?;
        if node.value.len() != 1 {
            return Err(NnError::NotScalar(node.value.shape().to_vec()));
        }
        let mut out = Gradients {
            grads: vec![None; self.params.len()],
        };
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(loss.0 + 1);
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(Tensor::from_f64(node.value.shape(), &[1.0])?);

        fn send<T: Scalar>(grads: &mut [Option<Tensor<T>>], to: NodeId, g: Tensor<T>) {
            match &mut grads[to.0] {
                Some(acc) => acc.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Conv { x, w, b, geom } => {
                    let (dx, dw, db) = conv1d_backward(self.value(*x), self.p(*w), geom, &dy);
                    send(&mut grads, *x, dx);
                    out.add(*w, dw);
                    out.add(*b, db);
                }
                Op::BatchNorm { x, gamma, beta, cache } => {
                    let (dx, dg, db) = batchnorm_backward(cache, self.p(*gamma), &dy);
                    send(&mut grads, *x, dx);
                    out.add(*gamma, dg);
                    out.add(*beta, db);
                }
                Op::Relu(x) => {
                    let dx = zip_map(&dy, &node.value, |g, y| if y > 0.0 { g } else { 0.0 });
                    send(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let dx = zip_map(&dy, &node.value, |g, y| g * y * (1.0 - y));
                    send(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let dx = zip_map(&dy, &node.value, |g, y| g * (1.0 - y * y));
                    send(&mut grads, *x, dx);
                }
                Op::AvgPool { x, window, stride } => {
                    let dx = avgpool_backward(&dy, self.value(*x).dim(2), *window, *stride);
                    send(&mut grads, *x, dx);
                }
                Op::Concat(xs) => {
                    let (nb, len) = (dy.dim(0), dy.dim(2));
                    let total = dy.dim(1) * len;
                    let mut offset = 0;
                    for &x in xs {
                        let shape = self.value(x).shape().to_vec();
                        let row = shape[1] * len;
                        let mut data = Vec::with_capacity(nb * row);
                        for b in 0..nb {
                            data.extend_from_slice(&dy.data()[b * total + offset..][..row]);
                        }
                        offset += row;
                        send(&mut grads, x, Tensor::from_vec(&shape, data)?);
                    }
                }
                Op::Lstm { x, w, u, b, cache } => {
                    let (dx, dw, du, db) = lstm_backward(cache, self.p(*w), self.p(*u), &dy);
                    send(&mut grads, *x, dx);
                    out.add(*w, dw);
                    out.add(*u, du);
                    out.add(*b, db);
                }
                Op::LastStep(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    let t = shape[2];
                    let mut dx = Tensor::zeros(&shape);
                    for (r, g) in dy.data().iter().enumerate() {
                        dx.data_mut()[r * t + t - 1] = *g;
                    }
                    send(&mut grads, *x, dx);
                }
                Op::Flatten(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    send(&mut grads, *x, dy.reshaped(&shape)?);
                }
                Op::Dense { x, w, b } => {
                    let (dx, dw, db) = dense_backward(self.value(*x), self.p(*w), &dy);
                    send(&mut grads, *x, dx);
                    out.add(*w, dw);
                    out.add(*b, db);
                }
                Op::SoftmaxXent { logits, labels, probs } => {
                    let k = probs.dim(1);
                    let scale = dy.item() / labels.len() as f64;
                    let mut dz = Tensor::zeros(probs.shape());
                    dz.data_mut().par_chunks_mut(k).enumerate().for_each(|(b, row)| {
                        let p = &probs.data()[b * k..][..k];
                        for (j, d) in row.iter_mut().enumerate() {
                            let target = if j == labels[b] { 1.0 } else { 0.0 };
                            *d = T::lower(scale * (p[j] - target));
                        }
                    });
                    send(&mut grads, *logits, dz);
                }
                Op::Sum(x) => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    dx.fill(dy.item());
                    send(&mut grads, *x, dx);
                }
            }
        }
        Ok(out)
    }
}

fn zip_map<T: Scalar>(dy: &Tensor<T>, y: &Tensor<T>, f: impl Fn(f64, f64) -> f64) -> Tensor<T> {
    let data = dy
        .data()
        .iter()
        .zip(y.data())
        .map(|(g, v)| T::lower(f(g.lift(), v.lift())))
        .collect();
    Tensor::from_vec(dy.shape(), data).expect("same shape")
}
