//! The SCT1 trace container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset  size  field
//!      0     4  magic "SCT1"
//!      4     2  version (u16, = 1)
//!      6     2  flags (u16; bit 0: mask fields meaningful)
//!      8     8  n_traces (u64)
//!     16     4  n_points (u32)
//!     20     1  dtype (u8: 0=i8, 1=i16, 2=f32, 3=f64)
//!     21    11  reserved, zero
//!     32        n_traces x 49-byte records: plaintext[16] key[16] mask[16] label[1]
//!               then n_traces x n_points samples, trace-major
//! ```

use std::fs::File;
use std::io::{self, BufWriter, Read, Write};
use std::path::Path;

use crate::trace::{DType, Trace, TraceMeta, TraceSet, TraceSetError};

pub const MAGIC: [u8; 4] = *b"SCT1";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 32;
pub const RECORD_LEN: usize = 49;
const FLAG_MASKED: u16 = 1;

#[derive(Debug, thiserror::Error)]
pub enum ContainerError {
    #[error("bad magic {found:?} at offset {offset}")]
    BadMagic { offset: u64, found: [u8; 4] },
    #[error("unsupported version {version} at offset {offset}")]
    UnsupportedVersion { offset: u64, version: u16 },
    #[error("dtype code {code} out of range at offset {offset}")]
    BadDType { offset: u64, code: u8 },
    #[error("truncated payload at offset {offset}: expected {expected} bytes, found {found}")]
    Truncated {
        offset: u64,
        expected: u64,
        found: u64,
    },
    #[error("{extra} trailing bytes after payload at offset {offset}")]
    TrailingBytes { offset: u64, extra: u64 },
    #[error("non-finite sample at offset {offset}")]
    NonFiniteSample { offset: u64 },
    #[error("n_points {0} does not fit the u32 header field")]
    TooManyPoints(usize),
    #[error(transparent)]
    Invalid(#[from] TraceSetError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub fn write_container(set: &TraceSet, path: impl AsRef<Path>) -> Result<(), ContainerError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_to(set, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<TraceSet, ContainerError> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

pub fn encode(set: &TraceSet) -> Result<Vec<u8>, ContainerError> {
    let mut out = Vec::with_capacity(
        HEADER_LEN + set.n_traces() * (RECORD_LEN + set.n_points() * set.dtype().width()),
    );
    write_to(set, &mut out)?;
    Ok(out)
}

pub fn write_to<W: Write>(set: &TraceSet, w: &mut W) -> Result<(), ContainerError> {
    let n_points =
        u32::try_from(set.n_points()).map_err(|_| ContainerError::TooManyPoints(set.n_points()))?;
    let mut header = [0u8; HEADER_LEN];
    header[0..4].copy_from_slice(&MAGIC);
    header[4..6].copy_from_slice(&VERSION.to_le_bytes());
    let flags = if set.masked() { FLAG_MASKED } else { 0 };
    header[6..8].copy_from_slice(&flags.to_le_bytes());
    header[8..16].copy_from_slice(&(set.n_traces() as u64).to_le_bytes());
    header[16..20].copy_from_slice(&n_points.to_le_bytes());
    header[20] = set.dtype().code();
    w.write_all(&header)?;

    for t in set {
        w.write_all(&t.meta.plaintext)?;
        w.write_all(&t.meta.key)?;
        w.write_all(&t.meta.mask)?;
        w.write_all(&[t.meta.label])?;
    }

    let dtype = set.dtype();
    let mut buf = Vec::with_capacity(set.n_points() * dtype.width());
    for t in set {
        buf.clear();
        for &x in &t.samples {
            // TraceSet guarantees every sample is exactly representable in dtype.
            match dtype {
                DType::I8 => buf.push(x as i8 as u8),
                DType::I16 => buf.extend_from_slice(&(x as i16).to_le_bytes()),
                DType::F32 => buf.extend_from_slice(&(x as f32).to_le_bytes()),
                DType::F64 => buf.extend_from_slice(&x.to_le_bytes()),
            }
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

fn need(bytes: &[u8], offset: usize, len: u64) -> Result<(), ContainerError> {
    let available = bytes.len().saturating_sub(offset) as u64;
    if available < len {
        return Err(ContainerError::Truncated {
            offset: offset as u64,
            expected: len,
            found: available,
        });
    }
    Ok(())
}

pub fn decode(bytes: &[u8]) -> Result<TraceSet, ContainerError> {
    need(bytes, 0, 4)?;
    let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
    if magic != MAGIC {
        return Err(ContainerError::BadMagic {
            offset: 0,
            found: magic,
        });
    }
    need(bytes, 0, HEADER_LEN as u64)?;
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(ContainerError::UnsupportedVersion { offset: 4, version });
    }
    let flags = u16::from_le_bytes([bytes[6], bytes[7]]);
    let n_traces = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let n_points = u32::from_le_bytes(bytes[16..20].try_into().unwrap()) as usize;
    let dtype = DType::from_code(bytes[20]).ok_or(ContainerError::BadDType {
        offset: 20,
        code: bytes[20],
    })?;

    let mut offset = HEADER_LEN;
    let meta_len = n_traces.saturating_mul(RECORD_LEN as u64);
    need(bytes, offset, meta_len)?;
    let n = n_traces as usize;
    let mut metas = Vec::with_capacity(n);
    for _ in 0..n {
        let r = &bytes[offset..offset + RECORD_LEN];
        metas.push(TraceMeta {
            plaintext: r[0..16].try_into().unwrap(),
            key: r[16..32].try_into().unwrap(),
            mask: r[32..48].try_into().unwrap(),
            label: r[48],
        });
        offset += RECORD_LEN;
    }

    let width = dtype.width();
    let sample_len = n_traces
        .saturating_mul(n_points as u64)
        .saturating_mul(width as u64);
    need(bytes, offset, sample_len)?;
    let mut traces = Vec::with_capacity(n);
    for meta in metas {
        let mut samples = Vec::with_capacity(n_points);
        for _ in 0..n_points {
            let c = &bytes[offset..offset + width];
            let x = match dtype {
                DType::I8 => c[0] as i8 as f64,
                DType::I16 => i16::from_le_bytes([c[0], c[1]]) as f64,
                DType::F32 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                DType::F64 => f64::from_le_bytes(c.try_into().unwrap()),
            };
            if !x.is_finite() {
                return Err(ContainerError::NonFiniteSample {
                    offset: offset as u64,
                });
            }
            samples.push(x);
            offset += width;
        }
        traces.push(Trace { samples, meta });
    }
    if offset != bytes.len() {
        return Err(ContainerError::TrailingBytes {
            offset: offset as u64,
            extra: (bytes.len() - offset) as u64,
        });
    }
    Ok(TraceSet::new(
        n_points,
        dtype,
        flags & FLAG_MASKED != 0,
        traces,
    )?)
}

/// CSV export: `plaintext,key,mask,label,s0..s{M-1}`, byte fields hex-encoded.
pub fn write_csv<W: Write>(set: &TraceSet, w: &mut W) -> io::Result<()> {
    write!(w, "plaintext,key,mask,label")?;
    for i in 0..set.n_points() {
        write!(w, ",s{i}")?;
    }
    writeln!(w)?;
    for t in set {
        write!(
            w,
            "{},{},{},{:02x}",
            hex(&t.meta.plaintext),
            hex(&t.meta.key),
            hex(&t.meta.mask),
            t.meta.label
        )?;
        for x in &t.samples {
            write!(w, ",{x}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_set(dtype: DType) -> TraceSet {
        let traces = (0..3u8)
            .map(|i| Trace {
                samples: (0..5).map(|j| dtype.quantize(i as f64 * 1.25 - j as f64)).collect(),
                meta: TraceMeta {
                    plaintext: [i; 16],
                    key: [0x2b; 16],
                    mask: [0; 16],
                    label: i * 7,
                },
            })
            .collect();
        TraceSet::new(5, dtype, false, traces).unwrap()
    }

    #[test]
    fn roundtrip_f32() {
        let set = small_set(DType::F32);
        let bytes = encode(&set).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 3 * RECORD_LEN + 3 * 5 * 4);
        assert_eq!(decode(&bytes).unwrap(), set);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&small_set(DType::I16)).unwrap();
        assert_eq!(&bytes[0..4], b"SCT1");
        assert_eq!(&bytes[4..6], &[1, 0]);
        assert_eq!(&bytes[6..8], &[0, 0]);
        assert_eq!(&bytes[8..16], &3u64.to_le_bytes());
        assert_eq!(&bytes[16..20], &5u32.to_le_bytes());
        assert_eq!(bytes[20], 1);
        assert!(bytes[21..32].iter().all(|&b| b == 0));
        // first record: plaintext of trace 0 is all zero, key 0x2b
        assert_eq!(&bytes[32 + 16..32 + 32], &[0x2b; 16]);
    }

    #[test]
    fn bad_magic() {
        let mut bytes = encode(&small_set(DType::F32)).unwrap();
        bytes[0..4].copy_from_slice(b"XXXX");
        assert!(matches!(
            decode(&bytes),
            Err(ContainerError::BadMagic { offset: 0, .. })
        ));
    }

    #[test]
    fn unsupported_version() {
        let mut bytes = encode(&small_set(DType::F32)).unwrap();
        bytes[4] = 2;
        assert!(matches!(
            decode(&bytes),
            Err(ContainerError::UnsupportedVersion { offset: 4, version: 2 })
        ));
    }

    #[test]
    fn dtype_out_of_range() {
        let mut bytes = encode(&small_set(DType::F32)).unwrap();
        bytes[20] = 9;
        assert!(matches!(
            decode(&bytes),
            Err(ContainerError::BadDType { offset: 20, code: 9 })
        ));
    }

    #[test]
    fn header_claims_more_traces_than_present() {
        let traces: Vec<Trace> = (0..9)
            .map(|_| Trace {
                samples: vec![1.0; 4],
                meta: TraceMeta::default(),
            })
            .collect();
        let set = TraceSet::new(4, DType::F32, false, traces).unwrap();
        let mut bytes = encode(&set).unwrap();
        bytes[8..16].copy_from_slice(&10u64.to_le_bytes());
        match decode(&bytes) {
            Err(ContainerError::Truncated { offset, .. }) => assert!(offset >= HEADER_LEN as u64),
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn short_header_is_truncated() {
        assert!(matches!(
            decode(b"SCT1\x01\x00"),
            Err(ContainerError::Truncated { offset: 0, .. })
        ));
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut bytes = encode(&small_set(DType::F64)).unwrap();
        bytes.push(0);
        assert!(matches!(decode(&bytes), Err(ContainerError::TrailingBytes { .. })));
    }

    #[test]
    fn csv_shape() {
        let mut out = Vec::new();
        write_csv(&small_set(DType::F32), &mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 4);
        assert_eq!(lines[0].split(',').count(), 4 + 5);
        assert!(lines[1].starts_with(&format!("{},{}", "00".repeat(16), "2b".repeat(16))));
    }

    fn arb_set() -> impl Strategy<Value = TraceSet> {
        let dtype = prop_oneof![
            Just(DType::I8),
            Just(DType::I16),
            Just(DType::F32),
            Just(DType::F64)
        ];
        (dtype, 0usize..6, 0usize..8, any::<bool>()).prop_flat_map(|(dtype, n, m, masked)| {
            let meta = (any::<[u8; 16]>(), any::<[u8; 16]>(), any::<[u8; 16]>(), any::<u8>())
                .prop_map(|(plaintext, key, mask, label)| TraceMeta {
                    plaintext,
                    key,
                    mask,
                    label,
                });
            let samples = prop::collection::vec(-40000.0f64..40000.0, m)
                .prop_map(move |v| v.into_iter().map(|x| dtype.quantize(x)).collect::<Vec<_>>());
            prop::collection::vec((samples, meta), n).prop_map(move |rows| {
                let traces = rows
                    .into_iter()
                    .map(|(samples, meta)| Trace { samples, meta })
                    .collect();
                TraceSet::new(m, dtype, masked, traces).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn roundtrip_identity(set in arb_set()) {
            let bytes = encode(&set).unwrap();
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(&back, &set);
            prop_assert_eq!(encode(&back).unwrap(), bytes);
        }
    }
}
