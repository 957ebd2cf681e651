//! Trace and metadata types, and the leakage model that ties a trace's
//! metadata to its targeted intermediate value.

use serde::{Deserialize, Serialize};

use crate::aes::sbox;

/// Per-trace metadata. Masks are zero-filled when the target is unmasked.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TraceMeta {
    pub plaintext: [u8; 16],
    pub key: [u8; 16],
    pub mask: [u8; 16],
    /// Intermediate value class in `[0, 255]`.
    pub label: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    pub samples: Vec<f64>,
    pub meta: TraceMeta,
}

/// On-disk sample encoding. The in-memory representation is always `f64`;
/// the dtype constrains which values a set may hold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    I8,
    I16,
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::I8 => 0,
            DType::I16 => 1,
            DType::F32 => 2,
            DType::F64 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::I8),
            1 => Some(DType::I16),
            2 => Some(DType::F32),
            3 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn width(self) -> usize {
        match self {
            DType::I8 => 1,
            DType::I16 => 2,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }

    /// Nearest value representable in this encoding (integers round and saturate).
    pub fn quantize(self, x: f64) -> f64 {
        match self {
            DType::I8 => x.round().clamp(i8::MIN as f64, i8::MAX as f64),
            DType::I16 => x.round().clamp(i16::MIN as f64, i16::MAX as f64),
            DType::F32 => x as f32 as f64,
            DType::F64 => x,
        }
    }

    pub fn represents(self, x: f64) -> bool {
        x.is_finite() && self.quantize(x).to_bits() == x.to_bits()
    }
}

impl std::fmt::Display for DType {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            DType::I8 => "i8",
            DType::I16 => "i16",
            DType::F32 => "f32",
            DType::F64 => "f64",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TraceSetError {
    #[error("trace {index} has {got} samples, expected {expected}")]
    LengthMismatch {
        index: usize,
        expected: usize,
        got: usize,
    },
    #[error("trace {index} sample {point} is not finite")]
    NonFinite { index: usize, point: usize },
    #[error("trace {index} sample {point} = {value} is not representable as {dtype}")]
    Unrepresentable {
        index: usize,
        point: usize,
        value: f64,
        dtype: DType,
    },
}

/// A set of equal-length traces sharing one sample encoding.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    n_points: usize,
    dtype: DType,
    /// Header flag: mask fields carry real masks.
    masked: bool,
    traces: Vec<Trace>,
}

impl TraceSet {
    pub fn new(
        n_points: usize,
        dtype: DType,
        masked: bool,
        traces: Vec<Trace>,
    ) -> Result<Self, TraceSetError> {
        for (index, t) in traces.iter().enumerate() {
            if t.samples.len() != n_points {
                return Err(TraceSetError::LengthMismatch {
                    index,
                    expected: n_points,
                    got: t.samples.len(),
                });
            }
            for (point, &value) in t.samples.iter().enumerate() {
                if !value.is_finite() {
                    return Err(TraceSetError::NonFinite { index, point });
                }
                if !dtype.represents(value) {
                    return Err(TraceSetError::Unrepresentable {
                        index,
                        point,
                        value,
                        dtype,
                    });
                }
            }
        }
        Ok(Self {
            n_points,
            dtype,
            masked,
            traces,
        })
    }

    pub fn n_traces(&self) -> usize {
        self.traces.len()
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn masked(&self) -> bool {
        self.masked
    }

    pub fn traces(&self) -> &[Trace] {
        &self.traces
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Trace> {
        self.traces.iter()
    }

    pub fn into_traces(self) -> Vec<Trace> {
        self.traces
    }

    pub fn labels(&self) -> Vec<u8> {
        self.traces.iter().map(|t| t.meta.label).collect()
    }

    /// New set holding the traces at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> TraceSet {
        TraceSet {
            n_points: self.n_points,
            dtype: self.dtype,
            masked: self.masked,
            traces: indices.iter().map(|&i| self.traces[i].clone()).collect(),
        }
    }

    /// Copy with each trace's samples replaced by `f(samples)`; metadata untouched.
    pub fn map_samples<F>(&self, mut f: F) -> Result<TraceSet, TraceSetError>
    where
        F: FnMut(usize, &[f64]) -> Vec<f64>,
    {
        let traces = self
            .traces
            .iter()
            .enumerate()
            .map(|(i, t)| Trace {
                samples: f(i, &t.samples),
                meta: t.meta,
            })
            .collect();
        TraceSet::new(self.n_points, self.dtype, self.masked, traces)
    }

    /// The key byte at `byte` if every trace carries the same, non-hidden key.
    ///
    /// A set whose key fields are all zero is treated as key-hidden.
    pub fn fixed_key_byte(&self, byte: usize) -> Option<u8> {
        let first = self.traces.first()?;
        if self.traces.iter().all(|t| t.meta.key == [0; 16]) {
            return None;
        }
        let k = first.meta.key[byte];
        self.traces
            .iter()
            .all(|t| t.meta.key[byte] == k)
            .then_some(k)
    }

    /// Check `label == intermediate_value(meta, spec)` for every trace.
    pub fn labels_match(&self, spec: &LeakageSpec) -> bool {
        self.traces.iter().all(|t| t.meta.label == spec.label_of(&t.meta))
    }
}

impl<'a> IntoIterator for &'a TraceSet {
    type Item = &'a Trace;
    type IntoIter = std::slice::Iter<'a, Trace>;
    fn into_iter(self) -> Self::IntoIter {
        self.traces.iter()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Intermediate {
    /// `Sbox(pt[b] ^ k[b])`
    SboxOut,
    /// `pt[b] ^ k[b]`
    XorOut,
    /// `Sbox(pt[b] ^ k[b]) ^ mask[b]`
    MaskedSboxOut,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerModel {
    HammingWeight,
    BitSelect(u8),
    Identity,
}

impl PowerModel {
    pub fn apply(self, v: u8) -> f64 {
        power_value(v, self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LeakageSpec {
    pub target_byte: usize,
    pub intermediate: Intermediate,
    pub power_model: PowerModel,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LeakageSpecError {
    #[error("target byte {0} outside [0, 15]")]
    TargetByte(usize),
    #[error("bit index {0} outside [0, 7]")]
    BitIndex(u8),
}

impl LeakageSpec {
    pub fn new(
        target_byte: usize,
        intermediate: Intermediate,
        power_model: PowerModel,
    ) -> Result<Self, LeakageSpecError> {
        let spec = Self {
            target_byte,
            intermediate,
            power_model,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), LeakageSpecError> {
        if self.target_byte > 15 {
            return Err(LeakageSpecError::TargetByte(self.target_byte));
        }
        if let PowerModel::BitSelect(j) = self.power_model {
            if j > 7 {
                return Err(LeakageSpecError::BitIndex(j));
            }
        }
        Ok(())
    }

    pub fn label_of(&self, meta: &TraceMeta) -> u8 {
        intermediate_value(&meta.plaintext, &meta.key, &meta.mask, self)
    }

    /// Intermediate value of `meta` with the target key byte replaced by `guess`.
    #[inline]
    pub fn label_under_guess(&self, meta: &TraceMeta, guess: u8) -> u8 {
        let b = self.target_byte;
        intermediate_byte(meta.plaintext[b], guess, meta.mask[b], self.intermediate)
    }

    /// Modelled power consumption of `meta` under key guess `guess`.
    #[inline]
    pub fn hypothesis(&self, meta: &TraceMeta, guess: u8) -> f64 {
        power_value(self.label_under_guess(meta, guess), self.power_model)
    }
}

#[inline]
fn intermediate_byte(pt: u8, key: u8, mask: u8, kind: Intermediate) -> u8 {
    match kind {
        Intermediate::SboxOut => sbox(pt ^ key),
        Intermediate::XorOut => pt ^ key,
        Intermediate::MaskedSboxOut => sbox(pt ^ key) ^ mask,
    }
}

pub fn intermediate_value(pt: &[u8; 16], key: &[u8; 16], mask: &[u8; 16], spec: &LeakageSpec) -> u8 {
    let b = spec.target_byte;
    intermediate_byte(pt[b], key[b], mask[b], spec.intermediate)
}

pub fn power_value(intermediate: u8, model: PowerModel) -> f64 {
    match model {
        PowerModel::HammingWeight => intermediate.count_ones() as f64,
        PowerModel::BitSelect(j) => ((intermediate >> (j & 7)) & 1) as f64,
        PowerModel::Identity => intermediate as f64,
    }
}
