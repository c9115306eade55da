//! Single-file binary model format.
//!
//! ```text
//! "EMSQ"  u16 version  u8 kind  u32 tensor_count
//! per tensor:
//!   u16 name_len, name bytes (UTF-8)
//!   u8 dtype (0 = f64, 1 = q8, 2 = q16)
//!   u32 rows, u32 cols
//!   f64 scale            (quantized dtypes only)
//!   payload              (rows*cols values, little-endian)
//! ```

use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::models::{Model, ModelKind};
use crate::quantize::{dequantize, Bits, QuantizedMatrix, QuantizedModel};

pub const MAGIC: &[u8; 4] = b"EMSQ";
pub const VERSION: u16 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_Q8: u8 = 1;
const DTYPE_Q16: u8 = 2;

#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F64(DenseMatrix),
    Quantized(QuantizedMatrix),
}

impl Tensor {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Tensor::F64(m) => m.shape(),
            Tensor::Quantized(q) => q.shape(),
        }
    }

    /// Value bytes only, without the per-tensor header.
    pub fn payload_bytes(&self) -> usize {
        match self {
            Tensor::F64(m) => m.len() * 8,
            Tensor::Quantized(q) => q.payload_bytes(),
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        match self {
            Tensor::F64(m) => m.clone(),
            Tensor::Quantized(q) => dequantize(q),
        }
    }
}

/// In-memory image of a model file.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelFile {
    pub kind: ModelKind,
    pub tensors: Vec<(String, Tensor)>,
}

impl ModelFile {
    pub fn from_model(model: &Model) -> Self {
        Self {
            kind: model.kind(),
            tensors: model
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n.to_string(), Tensor::F64(t.clone())))
                .collect(),
        }
    }

    pub fn from_quantized(model: &QuantizedModel) -> Self {
        Self {
            kind: model.kind,
            tensors: model
                .tensors
                .iter()
                .map(|(n, q)| (n.clone(), Tensor::Quantized(q.clone())))
                .collect(),
        }
    }

    /// Rebuilds the model, dequantizing any quantized tensors.
    pub fn to_model(&self) -> Result<Model> {
        Model::from_named_tensors(
            self.kind,
            self.tensors.iter().map(|(n, t)| (n.clone(), t.to_dense())).collect(),
        )
    }

    /// Bit width shared by every tensor, if the file is fully quantized.
    pub fn quantized_bits(&self) -> Option<Bits> {
        let mut bits = None;
        for (_, t) in &self.tensors {
            match (t, bits) {
                (Tensor::F64(_), _) => return None,
                (Tensor::Quantized(q), None) => bits = Some(q.bits()),
                (Tensor::Quantized(q), Some(b)) if q.bits() != b => return None,
                _ => {}
            }
        }
        bits
    }

    pub fn payload_bytes(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.payload_bytes()).sum()
    }

    /// Payload bytes of tensors whose name starts with `embedding`.
    pub fn embedding_payload_bytes(&self) -> usize {
        self.tensors
            .iter()
            .filter(|(n, _)| n.starts_with("embedding"))
            .map(|(_, t)| t.payload_bytes())
            .sum()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(64 + self.payload_bytes());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.kind.code());
        out.extend_from_slice(&u32_field(self.tensors.len(), "tensor count")?.to_le_bytes());
        for (name, t) in &self.tensors {
            let len = u16::try_from(name.len())
                .map_err(|_| Error::Format(format!("tensor name too long: {} bytes", name.len())))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            let (rows, cols) = t.shape();
            let dtype = match t {
                Tensor::F64(_) => DTYPE_F64,
                Tensor::Quantized(q) => match q.bits() {
                    Bits::B8 => DTYPE_Q8,
                    Bits::B16 => DTYPE_Q16,
                },
            };
            out.push(dtype);
            out.extend_from_slice(&u32_field(rows, "rows")?.to_le_bytes());
            out.extend_from_slice(&u32_field(cols, "cols")?.to_le_bytes());
            match t {
                Tensor::F64(m) => {
                    for v in m.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Tensor::Quantized(q) => {
                    out.extend_from_slice(&q.scale().to_le_bytes());
                    match q.bits() {
                        Bits::B8 => out.extend(q.codes().iter().map(|&c| c as i8 as u8)),
                        Bits::B16 => {
                            for c in q.codes() {
                                out.extend_from_slice(&c.to_le_bytes());
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a model file (bad magic)".into()));
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported format version {version}")));
        }
        let code = r.u8()?;
        let kind = ModelKind::from_code(code).ok_or_else(|| Error::Format(format!("unknown model kind {code}")))?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(64));
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let dtype = r.u8()?;
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Format(format!("tensor {name:?} is too large")))?;
            let t = match dtype {
                DTYPE_F64 => {
                    let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("overflow".into()))?)?;
                    let data = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    Tensor::F64(DenseMatrix::new(rows, cols, data)?)
                }
                DTYPE_Q8 | DTYPE_Q16 => {
                    let scale = r.f64()?;
                    let (bits, codes) = if dtype == DTYPE_Q8 {
                        (Bits::B8, r.take(n)?.iter().map(|&b| i16::from(b as i8)).collect())
                    } else {
                        let raw = r.take(n.checked_mul(2).ok_or_else(|| Error::Format("overflow".into()))?)?;
                        (
                            Bits::B16,
                            raw.chunks_exact(2).map(|c| i16::from_le_bytes([c[0], c[1]])).collect(),
                        )
                    };
                    Tensor::Quantized(QuantizedMatrix::from_parts(rows, cols, bits, scale, codes)?)
                }
                other => return Err(Error::Format(format!("tensor {name:?}: unknown dtype {other}"))),
            };
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { kind, tensors })
    }

    /// Writes the file and returns its size in bytes.
    pub fn save(&self, path: &Path) -> Result<u64> {
        let bytes = self.to_bytes()?;
        std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(bytes.len() as u64)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
            other => other,
        })
    }
}

fn u32_field(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} does not fit in u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
