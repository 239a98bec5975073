//! Device-specific storage of a quantized expert.
//!
//! GPU-bound experts keep their integer codes (bit-packed) plus affine
//! parameters; CPU-bound experts are dequantized once and stored as float32
//! in the binary matrix format. Both expose their byte size, which feeds the
//! simulator's transfer-time model.
//!
//! GPU layout:
//!
//! ```text
//! "MOEQ" | rows u32 | cols u32 | bits u8 | granularity u8 | 2 pad bytes
//! groups u32 | groups × (scale f64, zero_point i32)
//! ceil(rows·cols·bits / 8) bytes of codes, LSB-first
//! ```

use serde::{Deserialize, Serialize};

use super::{dequantize, Granularity, QuantParams, QuantizedMatrix};
use crate::error::{Error, Result};
use crate::numkit::{read_matrix, write_matrix, Dtype, RealMatrix};

const INT_MAGIC: &[u8; 4] = b"MOEQ";
const INT_HEADER: usize = 20;
const PARAM_BYTES: usize = 12;
/// Header of the float32 matrix format.
const FP_HEADER: usize = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PackTarget {
    CpuFp,
    GpuInt,
}

impl std::str::FromStr for PackTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cpu_fp" | "cpu" => Ok(PackTarget::CpuFp),
            "gpu_int" | "gpu" => Ok(PackTarget::GpuInt),
            other => Err(Error::Config(format!("unknown pack target {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PackedExpert {
    target: PackTarget,
    bytes: Vec<u8>,
}

fn granularity_tag(g: Granularity) -> u8 {
    match g {
        Granularity::PerTensor => 0,
        Granularity::PerToken => 1,
        Granularity::PerOutputRow => 2,
    }
}

fn granularity_from_tag(tag: u8) -> Result<Granularity> {
    match tag {
        0 => Ok(Granularity::PerTensor),
        1 => Ok(Granularity::PerToken),
        2 => Ok(Granularity::PerOutputRow),
        other => Err(Error::Parse(format!("unknown granularity tag {other}"))),
    }
}

fn pack_codes(codes: &[u8], bits: u8) -> Vec<u8> {
    let bits = bits as usize;
    let mut out = vec![0u8; (codes.len() * bits).div_ceil(8)];
    for (n, &c) in codes.iter().enumerate() {
        for b in 0..bits {
            if c >> b & 1 == 1 {
                let pos = n * bits + b;
                out[pos / 8] |= 1 << (pos % 8);
            }
        }
    }
    out
}

fn unpack_codes(packed: &[u8], count: usize, bits: u8) -> Vec<u8> {
    let bits = bits as usize;
    (0..count)
        .map(|n| {
            (0..bits).fold(0u8, |acc, b| {
                let pos = n * bits + b;
                acc | ((packed[pos / 8] >> (pos % 8)) & 1) << b
            })
        })
        .collect()
}

/// Serializes `q` for the given device.
pub fn precision_pack(q: &QuantizedMatrix, target: PackTarget) -> PackedExpert {
    let bytes = match target {
        PackTarget::GpuInt => {
            let mut buf = Vec::with_capacity(
                INT_HEADER + q.params().len() * PARAM_BYTES + (q.codes().len() * q.bits() as usize).div_ceil(8),
            );
            buf.extend_from_slice(INT_MAGIC);
            buf.extend_from_slice(&(q.rows() as u32).to_le_bytes());
            buf.extend_from_slice(&(q.cols() as u32).to_le_bytes());
            buf.push(q.bits());
            buf.push(granularity_tag(q.granularity()));
            buf.extend_from_slice(&[0, 0]);
            buf.extend_from_slice(&(q.params().len() as u32).to_le_bytes());
            for p in q.params() {
                buf.extend_from_slice(&p.scale.to_le_bytes());
                buf.extend_from_slice(&p.zero_point.to_le_bytes());
            }
            buf.extend(pack_codes(q.codes(), q.bits()));
            buf
        }
        PackTarget::CpuFp => {
            let mut buf = Vec::with_capacity(FP_HEADER + q.codes().len() * 4);
            write_matrix(&mut buf, &dequantize(q), Dtype::F32).expect("in-memory write");
            buf
        }
    };
    PackedExpert { target, bytes }
}

impl PackedExpert {
    pub fn from_bytes(target: PackTarget, bytes: Vec<u8>) -> Self {
        Self { target, bytes }
    }

    pub fn target(&self) -> PackTarget {
        self.target
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    /// Total serialized size in bytes.
    pub fn byte_size(&self) -> usize {
        self.bytes.len()
    }

    /// Size of the weight payload alone (codes or float values).
    pub fn payload_size(&self) -> usize {
        match self.target {
            PackTarget::CpuFp => self.bytes.len().saturating_sub(FP_HEADER),
            PackTarget::GpuInt => {
                let groups = self
                    .bytes
                    .get(16..20)
                    .map_or(0, |b| u32::from_le_bytes(b.try_into().unwrap()) as usize);
                self.bytes
                    .len()
                    .saturating_sub(INT_HEADER + groups * PARAM_BYTES)
            }
        }
    }

    /// Recovers the integer form of a GPU-packed expert.
    pub fn unpack_int(&self) -> Result<QuantizedMatrix> {
        if self.target != PackTarget::GpuInt {
            return Err(Error::Input("expert was packed as float".into()));
        }
        let b = &self.bytes;
        if b.len() < INT_HEADER || &b[..4] != INT_MAGIC {
            return Err(Error::Parse("bad integer expert header".into()));
        }
        let word = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().unwrap()) as usize;
        let (rows, cols, bits) = (word(4), word(8), b[12]);
        let granularity = granularity_from_tag(b[13])?;
        let groups = word(16);
        let codes_at = INT_HEADER + groups * PARAM_BYTES;
        let count = rows * cols;
        if bits == 0 || bits > 8 || b.len() != codes_at + (count * bits as usize).div_ceil(8) {
            return Err(Error::Parse("integer expert payload has the wrong size".into()));
        }
        let params = (0..groups)
            .map(|g| {
                let at = INT_HEADER + g * PARAM_BYTES;
                QuantParams {
                    scale: f64::from_le_bytes(b[at..at + 8].try_into().unwrap()),
                    zero_point: i32::from_le_bytes(b[at + 8..at + 12].try_into().unwrap()),
                }
            })
            .collect();
        let codes = unpack_codes(&b[codes_at..], count, bits);
        QuantizedMatrix::new(rows, cols, bits, granularity, codes, params)
    }

    /// Float weights as the CPU would hold them (float32 precision).
    pub fn unpack_fp(&self) -> Result<RealMatrix> {
        if self.target != PackTarget::CpuFp {
            return Err(Error::Input("expert was packed as integers".into()));
        }
        Ok(read_matrix(self.bytes.as_slice())?.0)
    }

    /// Real-valued weights regardless of target.
    pub fn to_real(&self) -> Result<RealMatrix> {
        match self.target {
            PackTarget::CpuFp => self.unpack_fp(),
            PackTarget::GpuInt => Ok(dequantize(&self.unpack_int()?)),
        }
    }
}
