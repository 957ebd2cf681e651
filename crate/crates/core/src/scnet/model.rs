//! Parameterized networks, inference and the model file format.
//!
//! A model file is `SCNM`, a little-endian `u32` byte length, a JSON
//! descriptor (architecture, layer list, parameter names and shapes,
//! normalization, training config), then for every parameter tensor in
//! descriptor order a `u32` element count followed by that many `f32` values.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::arch::{ArchSpec, Layer, LayerOp};
use super::ScnetError;
use crate::nn::{filled, glorot_uniform, softmax_rows, Graph, Mode, NodeId, ParamId, ParamStore, Scalar, Tensor};
use crate::rng::component_rng;
use crate::trace::TraceSet;

pub const MODEL_MAGIC: &[u8; 4] = b"SCNM";
const PREDICT_BATCH: usize = 256;

/// Per-point standardization frozen from the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Points with zero spread keep unit scale.
    pub fn fit(set: &TraceSet, indices: &[usize]) -> Self {
        let m = set.n_points();
        let n = indices.len().max(1) as f64;
        let traces = set.traces();
        let mut mean = vec![0.0; m];
        for &i in indices {
            for (a, x) in mean.iter_mut().zip(&traces[i].samples) {
                *a += x;
            }
        }
        mean.iter_mut().for_each(|a| *a /= n);
        let mut var = vec![0.0; m];
        for &i in indices {
            for ((v, x), mu) in var.iter_mut().zip(&traces[i].samples).zip(&mean) {
                *v += (x - mu).powi(2);
            }
        }
        let std = var
            .iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 0.0 && s.is_finite() {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, std }
    }
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    pub arch: ArchSpec,
    layers: Vec<Layer>,
    /// Parameters owned by each layer, in store order.
    layer_params: Vec<Vec<ParamId>>,
    pub params: ParamStore<T>,
    pub normalization: Option<Normalization>,
    /// Resolved configuration of the run that produced the model.
    pub config: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct ParamInfo {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct FileDescriptor {
    arch: ArchSpec,
    layers: Vec<Layer>,
    parameters: Vec<ParamInfo>,
    normalization: Option<Normalization>,
    config: Option<serde_json::Value>,
}

impl<T: Scalar> Model<T> {
    /// Glorot-uniform weights, zero biases except LSTM forget gates (1),
    /// unit batch-norm scale and running variance.
    pub fn new(arch: ArchSpec, seed: u64) -> Result<Self, ScnetError> {
        let layers = arch.descriptor()?;
        let mut rng = component_rng(seed, "init");
        let mut params = ParamStore::new();
        let mut layer_params = Vec::with_capacity(layers.len());
        for layer in &layers {
            let name = &layer.name;
            let mut ids = Vec::new();
            match layer.op {
                LayerOp::Conv1d {
                    in_channels: c,
                    out_channels: o,
                    kernel: k,
                    ..
                } => {
                    ids.push(params.add(format!("{name}.w"), glorot_uniform(&[o, c, k], c * k, o * k, &mut rng), true));
                    ids.push(params.add(format!("{name}.b"), filled(&[o], 0.0), true));
                }
                LayerOp::BatchNorm { channels: c } => {
                    ids.push(params.add(format!("{name}.gamma"), filled(&[c], 1.0), true));
                    ids.push(params.add(format!("{name}.beta"), filled(&[c], 0.0), true));
                    ids.push(params.add(format!("{name}.running_mean"), filled(&[c], 0.0), false));
                    ids.push(params.add(format!("{name}.running_var"), filled(&[c], 1.0), false));
                }
                LayerOp::Lstm { input_size: d, hidden: h } => {
                    ids.push(params.add(format!("{name}.w"), glorot_uniform(&[4 * h, d], d, h, &mut rng), true));
                    ids.push(params.add(format!("{name}.u"), glorot_uniform(&[4 * h, h], h, h, &mut rng), true));
                    let mut b = filled::<T>(&[4 * h], 0.0);
                    b.data_mut()[h..2 * h].fill(T::lower(1.0));
                    ids.push(params.add(format!("{name}.b"), b, true));
                }
                LayerOp::Dense {
                    in_features: i,
                    out_features: o,
                } => {
                    ids.push(params.add(format!("{name}.w"), glorot_uniform(&[o, i], i, o, &mut rng), true));
                    ids.push(params.add(format!("{name}.b"), filled(&[o], 0.0), true));
                }
                _ => {}
            }
            layer_params.push(ids);
        }
        Ok(Self {
            arch,
            layers,
            layer_params,
            params,
            normalization: None,
            config: None,
        })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_len(&self) -> usize {
        self.arch.input_len
    }

    pub fn n_classes(&self) -> usize {
        self.arch.n_classes
    }

    pub fn parameter_count(&self) -> usize {
        self.params.trainable_count()
    }

    /// Serialized layer list, byte-identical for equal architectures.
    pub fn descriptor_json(&self) -> String {
        serde_json::to_string(&self.layers).expect("descriptor serializes")
    }

    /// Records the network on `g` and returns the logits node `[B, classes]`.
    pub fn forward(&self, g: &mut Graph<'_, T>, x: Tensor<T>) -> Result<NodeId, ScnetError> {
        if x.rank() != 3 || x.dim(1) != 1 || x.dim(2) != self.input_len() {
            return Err(ScnetError::ShapeMismatch(format!(
                "model expects [B, 1, {}] input, got {:?}",
                self.input_len(),
                x.shape()
            )));
        }
        let mut names: HashMap<&str, NodeId> = HashMap::new();
        let mut prev = g.input(x);
        for (layer, ids) in self.layers.iter().zip(&self.layer_params) {
            let node = match &layer.op {
                LayerOp::Input => prev,
                LayerOp::Conv1d { input, geom, .. } => {
                    let src = names.get(input.as_str()).copied().unwrap_or(prev);
                    g.conv1d(src, ids[0], ids[1], *geom)?
                }
                LayerOp::BatchNorm { .. } => g.batchnorm(prev, ids[0], ids[1], ids[2], ids[3])?,
                LayerOp::Relu => g.relu(prev),
                LayerOp::Concat { inputs } => {
                    let srcs: Vec<NodeId> = inputs.iter().map(|n| names[n.as_str()]).collect();
                    g.concat(&srcs)?
                }
                LayerOp::AvgPool { window, stride } => g.avgpool(prev, *window, *stride)?,
                LayerOp::Lstm { .. } => g.lstm(prev, ids[0], ids[1], ids[2])?,
                LayerOp::LastStep => g.last_step(prev)?,
                LayerOp::Flatten => g.flatten(prev),
                LayerOp::Dense { .. } => g.dense(prev, ids[0], ids[1])?,
                LayerOp::Softmax => prev,
            };
            names.insert(layer.name.as_str(), node);
            prev = node;
        }
        Ok(prev)
    }

    fn check_set(&self, set: &TraceSet) -> Result<(), ScnetError> {
        if set.n_points() != self.input_len() {
            return Err(ScnetError::ShapeMismatch(format!(
                "model expects {} points per trace, set has {}",
                self.input_len(),
                set.n_points()
            )));
        }
        Ok(())
    }

    /// `[B, 1, M]` input for the given traces, normalized if configured.
    pub fn batch_input(&self, set: &TraceSet, indices: &[usize]) -> Tensor<T> {
        let m = set.n_points();
        let mut data = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            let s = &set.traces()[i].samples;
            match &self.normalization {
                Some(n) => data.extend(s.iter().zip(&n.mean).zip(&n.std).map(|((x, mu), sd)| T::lower((x - mu) / sd))),
                None => data.extend(s.iter().map(|&x| T::lower(x))),
            }
        }
        Tensor::from_vec(&[indices.len(), 1, m], data).expect("length matches")
    }

    /// Logits for the given traces in inference mode.
    pub fn logits(&self, set: &TraceSet, indices: &[usize]) -> Result<Tensor<T>, ScnetError> {
        self.check_set(set)?;
        let mut g = Graph::new(&self.params, Mode::Infer);
        let out = self.forward(&mut g, self.batch_input(set, indices))?;
        Ok(g.value(out).clone())
    }

    /// Row-normalized posteriors `[n_traces][n_classes]`.
    pub fn predict(&self, set: &TraceSet) -> Result<Vec<Vec<f64>>, ScnetError> {
        self.check_set(set)?;
        let mut rows = Vec::with_capacity(set.n_traces());
        let all: Vec<usize> = (0..set.n_traces()).collect();
        for chunk in all.chunks(PREDICT_BATCH) {
            let p = softmax_rows(&self.logits(set, chunk)?)?;
            rows.extend(p.data().chunks(self.n_classes()).map(<[f64]>::to_vec));
        }
        Ok(rows)
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), ScnetError> {
        let desc = FileDescriptor {
            arch: self.arch.clone(),
            layers: self.layers.clone(),
            parameters: self
                .params
                .iter()
                .map(|(_, p)| ParamInfo {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    trainable: p.trainable,
                })
                .collect(),
            normalization: self.normalization.clone(),
            config: self.config.clone(),
        };
        let json = serde_json::to_vec(&desc)?;
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&u32::try_from(json.len()).map_err(|_| bad("descriptor too large"))?.to_le_bytes())?;
        w.write_all(&json)?;
        for (_, p) in self.params.iter() {
            let n = u32::try_from(p.value.len()).map_err(|_| bad("tensor too large"))?;
            w.write_all(&n.to_le_bytes())?;
            let mut buf = Vec::with_capacity(p.value.len() * 4);
            for v in p.value.data() {
                buf.extend_from_slice(&(v.lift() as f32).to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), ScnetError> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, ScnetError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MODEL_MAGIC {
            return Err(bad("not a model file"));
        }
        let len = read_u32(r)? as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)?;
        let desc: FileDescriptor = serde_json::from_slice(&json)?;
        let mut model = Model::new(desc.arch, 0)?;
        if model.layers != desc.layers {
            return Err(bad("layer list does not match the architecture"));
        }
        if model.params.len() != desc.parameters.len() {
            return Err(bad("parameter list does not match the architecture"));
        }
        let mut values = Vec::with_capacity(desc.parameters.len());
        for ((_, p), info) in model.params.iter().zip(&desc.parameters) {
            if p.name != info.name || p.value.shape() != info.shape.as_slice() {
                return Err(bad(&format!("unexpected parameter {}", info.name)));
            }
            let n = read_u32(r)? as usize;
            if n != p.value.len() {
                return Err(bad(&format!("parameter {} has {n} values, expected {}", info.name, p.value.len())));
            }
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(4)
                .map(|c| T::lower(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64))
                .collect();
            values.push(Tensor::from_vec(&info.shape, data)?);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(bad("trailing bytes after parameters"));
        }
        model.params.set_values(values)?;
        model.normalization = desc.normalization;
        model.config = desc.config;
        Ok(model)
    }

    pub fn load(path: &Path) -> Result<Self, ScnetError> {
        Self::read_from(&mut BufReader::new(File::open(path)?))
    }
}

fn bad(msg: &str) -> ScnetError {
    ScnetError::BadModelFile(msg.to_string())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, ScnetError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
