//! Architecture specifications and their layer descriptors.

use serde::{Deserialize, Serialize};

use super::ScnetError;
use crate::nn::ConvGeom;

pub const N_CLASSES: usize = 256;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockSpec {
    pub kernel: usize,
    pub dilations: [usize; 3],
    /// Output channels of the three convolutions of each group.
    pub feature_maps: [usize; 3],
    pub lstm_dim: Option<usize>,
    pub n_groups: usize,
}

impl BlockSpec {
    fn validate(&self, b: usize) -> Result<(), ScnetError> {
        let bad = |what: &str| Err(ScnetError::InvalidArch(format!("block {b}: {what}")));
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad("kernel must be odd");
        }
        if self.dilations.contains(&0) {
            return bad("dilations must be positive");
        }
        if self.feature_maps.contains(&0) {
            return bad("feature maps must be positive");
        }
        if self.n_groups == 0 {
            return bad("at least one group is required");
        }
        if self.lstm_dim == Some(0) {
            return bad("LSTM width must be positive");
        }
        Ok(())
    }

    /// Span of the widest single convolution in the block.
    pub fn max_span(&self) -> usize {
        (self.kernel - 1) * self.dilations.iter().max().copied().unwrap_or(1) + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Scnet,
    ScnetSeq,
    Ngroup { groups: usize, lstm_layers: usize },
    CnnBaseline,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub variant: Variant,
    /// Empty for the CNN baseline.
    pub blocks: Vec<BlockSpec>,
    pub n_classes: usize,
    pub input_len: usize,
}

pub const CNN_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];
pub const CNN_KERNEL: usize = 11;
pub const CNN_HIDDEN: usize = 4096;
pub const CNN_MIN_INPUT: usize = 64;

fn scnet_blocks(groups: usize) -> Vec<BlockSpec> {
    let dil = [[15, 13, 11], [9, 7, 5], [5, 2, 1]];
    let maps = [8, 32, 92];
    let lstm = [16, 64, 256];
    (0..3)
        .map(|b| BlockSpec {
            kernel: 7,
            dilations: dil[b],
            feature_maps: [maps[b]; 3],
            lstm_dim: Some(lstm[b]),
            n_groups: groups,
        })
        .collect()
}

impl ArchSpec {
    pub fn scnet(input_len: usize) -> Self {
        Self {
            variant: Variant::Scnet,
            blocks: scnet_blocks(6),
            n_classes: N_CLASSES,
            input_len,
        }
    }

    pub fn scnet_seq(input_len: usize) -> Self {
        let kernels = [11, 11, 9];
        let maps = [[32, 48, 64], [96, 112, 128], [192, 224, 256]];
        let lstm = [64, 128, 512];
        let blocks = (0..3)
            .map(|b| BlockSpec {
                kernel: kernels[b],
                dilations: [13, 11, 9],
                feature_maps: maps[b],
                lstm_dim: Some(lstm[b]),
                n_groups: 1,
            })
            .collect();
        Self {
            variant: Variant::ScnetSeq,
            blocks,
            n_classes: N_CLASSES,
            input_len,
        }
    }

    /// SCNet with `groups` encoder groups per block and LSTMs only in the
    /// first `lstm_layers` blocks. `(6, 3)` is SCNet itself.
    pub fn ngroup(groups: usize, lstm_layers: usize, input_len: usize) -> Result<Self, ScnetError> {
        if groups == 0 {
            return Err(ScnetError::InvalidArch("ngroup needs at least one group".into()));
        }
        if lstm_layers > 3 {
            return Err(ScnetError::InvalidArch(format!("lstm={lstm_layers} exceeds the 3 blocks")));
        }
        if (groups, lstm_layers) == (6, 3) {
            return Ok(Self::scnet(input_len));
        }
        let mut blocks = scnet_blocks(groups);
        for block in &mut blocks[lstm_layers..] {
            block.lstm_dim = None;
        }
        Ok(Self {
            variant: Variant::Ngroup { groups, lstm_layers },
            blocks,
            n_classes: N_CLASSES,
            input_len,
        })
    }

    pub fn cnn_baseline(input_len: usize) -> Self {
        Self {
            variant: Variant::CnnBaseline,
            blocks: Vec::new(),
            n_classes: N_CLASSES,
            input_len,
        }
    }

    /// `scnet`, `scnet_seq`, `cnn`, `ngroup:N` or `ngroup:N:lstm=J`
    /// (J defaults to 3).
    pub fn parse(name: &str, input_len: usize) -> Result<Self, ScnetError> {
        let unknown = || ScnetError::UnknownArch(name.to_string());
        match name {
            "scnet" => return Ok(Self::scnet(input_len)),
            "scnet_seq" => return Ok(Self::scnet_seq(input_len)),
            "cnn" => return Ok(Self::cnn_baseline(input_len)),
            _ => {}
        }
        let rest = name.strip_prefix("ngroup:").ok_or_else(unknown)?;
        let mut parts = rest.split(':');
        let groups: usize = parts.next().and_then(|g| g.parse().ok()).ok_or_else(unknown)?;
        let lstm = match parts.next() {
            None => 3,
            Some(p) => p
                .strip_prefix("lstm=")
                .and_then(|j| j.parse().ok())
                .ok_or_else(unknown)?,
        };
        if parts.next().is_some() {
            return Err(unknown());
        }
        Self::ngroup(groups, lstm, input_len)
    }

    /// Replaces per-block conv widths and LSTM sizes, keeping the topology.
    pub fn with_widths(mut self, feature_maps: [usize; 3], lstm_dims: [usize; 3]) -> Self {
        for (b, block) in self.blocks.iter_mut().enumerate() {
            block.feature_maps = [feature_maps[b]; 3];
            if block.lstm_dim.is_some() {
                block.lstm_dim = Some(lstm_dims[b]);
            }
        }
        self
    }

    pub fn validate(&self) -> Result<(), ScnetError> {
        if self.n_classes < 2 {
            return Err(ScnetError::InvalidArch("at least two classes are required".into()));
        }
        if self.variant == Variant::CnnBaseline {
            if !self.blocks.is_empty() {
                return Err(ScnetError::InvalidArch("the CNN baseline has no encoder blocks".into()));
            }
            if self.input_len < CNN_MIN_INPUT {
                return Err(ScnetError::InputTooShort {
                    needed: CNN_MIN_INPUT,
                    got: self.input_len,
                });
            }
            return Ok(());
        }
        if self.blocks.is_empty() {
            return Err(ScnetError::InvalidArch("at least one block is required".into()));
        }
        for (b, block) in self.blocks.iter().enumerate() {
            block.validate(b)?;
        }
        // Every convolution in block 1 must fit the raw trace, and every
        // block must leave at least one pooled sample.
        let needed = self.blocks[0].max_span().max(1 << self.blocks.len());
        if self.input_len < needed {
            return Err(ScnetError::InputTooShort {
                needed,
                got: self.input_len,
            });
        }
        Ok(())
    }

    /// Layer list in topological order.
    pub fn descriptor(&self) -> Result<Vec<Layer>, ScnetError> {
        self.validate()?;
        let mut layers = Vec::new();
        walk(self, &mut |l| layers.push(l.clone()));
        Ok(layers)
    }

    /// Total trainable scalars, from shapes alone.
    pub fn parameter_count(&self) -> Result<usize, ScnetError> {
        Ok(self.descriptor()?.iter().map(Layer::parameter_count).sum())
    }
}

/// One node of the architecture. `out` is the `[channels, length]` shape
/// produced per trace.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    #[serde(flatten)]
    pub op: LayerOp,
    pub out: [usize; 2],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LayerOp {
    Input,
    Conv1d {
        input: String,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        geom: ConvGeom,
    },
    BatchNorm {
        channels: usize,
    },
    Relu,
    Concat {
        inputs: Vec<String>,
    },
    AvgPool {
        window: usize,
        stride: usize,
    },
    Lstm {
        input_size: usize,
        hidden: usize,
    },
    LastStep,
    Flatten,
    Dense {
        in_features: usize,
        out_features: usize,
    },
    Softmax,
}

impl Layer {
    pub fn parameter_count(&self) -> usize {
        match &self.op {
            LayerOp::Conv1d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => out_channels * in_channels * kernel + out_channels,
            LayerOp::BatchNorm { channels } => 2 * channels,
            LayerOp::Lstm { input_size, hidden } => 4 * hidden * (input_size + hidden + 1),
            LayerOp::Dense {
                in_features,
                out_features,
            } => out_features * (in_features + 1),
            _ => 0,
        }
    }
}

/// Emits the layers of `arch` in execution order. Unless a layer names its
/// input, it consumes the previous layer's output.
pub(crate) fn walk(arch: &ArchSpec, emit: &mut dyn FnMut(&Layer)) {
    let mut push = |name: String, op: LayerOp, out: [usize; 2]| {
        emit(&Layer { name, op, out });
        out
    };
    let mut shape = push("input".into(), LayerOp::Input, [1, arch.input_len]);
    let mut prev = "input".to_string();

    if arch.variant == Variant::CnnBaseline {
        for (s, &ch) in CNN_CHANNELS.iter().enumerate() {
            let name = format!("s{s}.conv");
            shape = push(
                name.clone(),
                LayerOp::Conv1d {
                    input: prev.clone(),
                    in_channels: shape[0],
                    out_channels: ch,
                    kernel: CNN_KERNEL,
                    geom: ConvGeom::same(CNN_KERNEL, 1),
                },
                [ch, shape[1]],
            );
            push(format!("s{s}.relu"), LayerOp::Relu, shape);
            shape = push(
                format!("s{s}.pool"),
                LayerOp::AvgPool { window: 2, stride: 2 },
                [ch, shape[1] / 2],
            );
            prev = format!("s{s}.pool");
        }
        let flat = shape[0] * shape[1];
        push("flatten".into(), LayerOp::Flatten, [flat, 1]);
        let mut width = flat;
        for h in 0..2 {
            push(
                format!("fc{h}"),
                LayerOp::Dense {
                    in_features: width,
                    out_features: CNN_HIDDEN,
                },
                [CNN_HIDDEN, 1],
            );
            push(format!("fc{h}.relu"), LayerOp::Relu, [CNN_HIDDEN, 1]);
            width = CNN_HIDDEN;
        }
        push(
            "head".into(),
            LayerOp::Dense {
                in_features: width,
                out_features: arch.n_classes,
            },
            [arch.n_classes, 1],
        );
        push("softmax".into(), LayerOp::Softmax, [arch.n_classes, 1]);
        return;
    }

    for (b, block) in arch.blocks.iter().enumerate() {
        let block_input = prev.clone();
        let in_shape = shape;
        let mut group_outputs = Vec::new();
        let mut width = 0;
        for g in 0..block.n_groups {
            let mut src = block_input.clone();
            let mut ch = in_shape[0];
            for (j, (&d, &m)) in block.dilations.iter().zip(&block.feature_maps).enumerate() {
                let base = if block.n_groups > 1 {
                    format!("b{b}.g{g}.c{j}")
                } else {
                    format!("b{b}.c{j}")
                };
                push(
                    format!("{base}.conv"),
                    LayerOp::Conv1d {
                        input: src,
                        in_channels: ch,
                        out_channels: m,
                        kernel: block.kernel,
                        geom: ConvGeom::same(block.kernel, d),
                    },
                    [m, in_shape[1]],
                );
                push(format!("{base}.bn"), LayerOp::BatchNorm { channels: m }, [m, in_shape[1]]);
                push(format!("{base}.relu"), LayerOp::Relu, [m, in_shape[1]]);
                src = format!("{base}.relu");
                ch = m;
            }
            width += ch;
            group_outputs.push(src);
        }
        shape = [width, in_shape[1]];
        if block.n_groups > 1 {
            push(format!("b{b}.concat"), LayerOp::Concat { inputs: group_outputs }, shape);
        }
        shape = push(
            format!("b{b}.pool"),
            LayerOp::AvgPool { window: 2, stride: 2 },
            [shape[0], (shape[1] - 2) / 2 + 1],
        );
        prev = format!("b{b}.pool");
        if let Some(h) = block.lstm_dim {
            shape = push(
                format!("b{b}.lstm"),
                LayerOp::Lstm {
                    input_size: shape[0],
                    hidden: h,
                },
                [h, shape[1]],
            );
            prev = format!("b{b}.lstm");
        }
    }
    let features = if arch.blocks.last().is_some_and(|b| b.lstm_dim.is_some()) {
        push("last_step".into(), LayerOp::LastStep, [shape[0], 1]);
        shape[0]
    } else {
        push("flatten".into(), LayerOp::Flatten, [shape[0] * shape[1], 1]);
        shape[0] * shape[1]
    };
    push(
        "head".into(),
        LayerOp::Dense {
            in_features: features,
            out_features: arch.n_classes,
        },
        [arch.n_classes, 1],
    );
    push("softmax".into(), LayerOp::Softmax, [arch.n_classes, 1]);
}
