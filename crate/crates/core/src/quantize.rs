//! Post-training fixed-point quantization (symmetric, per tensor).

use crate::error::{Error, Result};
use crate::linalg::DenseMatrix;
use crate::models::{Model, ModelKind};

/// Bits of the full-precision reference the size ratios are quoted against.
pub const REFERENCE_BITS: u32 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Bits {
    B8,
    B16,
}

impl Bits {
    pub fn from_u32(bits: u32) -> Result<Self> {
        match bits {
            8 => Ok(Bits::B8),
            16 => Ok(Bits::B16),
            other => Err(Error::invalid(format!("unsupported bit width {other}; use 8 or 16"))),
        }
    }

    pub fn get(self) -> u32 {
        match self {
            Bits::B8 => 8,
            Bits::B16 => 16,
        }
    }

    /// Largest code magnitude, `2^(bits-1) - 1`.
    pub fn qmax(self) -> i32 {
        (1 << (self.get() - 1)) - 1
    }

    pub fn bytes_per_code(self) -> usize {
        self.get() as usize / 8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMatrix {
    rows: usize,
    cols: usize,
    bits: Bits,
    scale: f64,
    codes: Vec<i16>,
}

impl QuantizedMatrix {
    /// Builds from stored parts, checking code range and length.
    pub fn from_parts(rows: usize, cols: usize, bits: Bits, scale: f64, codes: Vec<i16>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::EmptyMatrix { rows, cols });
        }
        if codes.len() != rows * cols {
            return Err(Error::DataLength {
                expected: rows * cols,
                got: codes.len(),
            });
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::Format(format!("quantization scale must be positive, got {scale}")));
        }
        let qmax = bits.qmax();
        if let Some(c) = codes.iter().find(|c| i32::from(**c).abs() > qmax) {
            return Err(Error::Format(format!("code {c} exceeds {}-bit range", bits.get())));
        }
        Ok(Self {
            rows,
            cols,
            bits,
            scale,
            codes,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn bits(&self) -> Bits {
        self.bits
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn codes(&self) -> &[i16] {
        &self.codes
    }

    /// Bytes the codes occupy on disk.
    pub fn payload_bytes(&self) -> usize {
        self.codes.len() * self.bits.bytes_per_code()
    }

    pub fn transpose(&self) -> QuantizedMatrix {
        let mut codes = vec![0i16; self.codes.len()];
        for i in 0..self.rows {
            for j in 0..self.cols {
                codes[j * self.rows + i] = self.codes[i * self.cols + j];
            }
        }
        QuantizedMatrix {
            rows: self.cols,
            cols: self.rows,
            codes,
            ..*self
        }
    }
}

fn round_half_away(x: f64) -> f64 {
    // f64::round already rounds halves away from zero
    x.round()
}

pub fn quantize(m: &DenseMatrix, bits: Bits) -> Result<QuantizedMatrix> {
    m.ensure_finite("quantize input")?;
    let max_abs = m.max_abs();
    let qmax = bits.qmax();
    if max_abs == 0.0 {
        return QuantizedMatrix::from_parts(m.rows(), m.cols(), bits, 1.0, vec![0; m.len()]);
    }
    let scale = max_abs / f64::from(qmax);
    // Dividing by max_abs first keeps exact halves exact (0.25 of 0.5 at 8 bits is 63.5).
    let codes = m
        .data()
        .iter()
        .map(|&v| round_half_away(v / max_abs * f64::from(qmax)).clamp(-f64::from(qmax), f64::from(qmax)) as i16)
        .collect();
    QuantizedMatrix::from_parts(m.rows(), m.cols(), bits, scale, codes)
}

pub fn dequantize(q: &QuantizedMatrix) -> DenseMatrix {
    let data = q.codes.iter().map(|&c| f64::from(c) * q.scale).collect();
    DenseMatrix::new(q.rows, q.cols, data).expect("quantized shape is valid")
}

/// A model whose every tensor, biases included, is quantized on its own scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedModel {
    pub kind: ModelKind,
    pub bits: Bits,
    pub tensors: Vec<(String, QuantizedMatrix)>,
}

impl QuantizedModel {
    /// Full-precision model for inference.
    pub fn dequantize(&self) -> Result<Model> {
        Model::from_named_tensors(
            self.kind,
            self.tensors.iter().map(|(n, q)| (n.clone(), dequantize(q))).collect(),
        )
    }

    pub fn payload_bytes(&self) -> usize {
        self.tensors.iter().map(|(_, q)| q.payload_bytes()).sum()
    }

    /// Bytes the same weights take at [`REFERENCE_BITS`].
    pub fn reference_payload_bytes(&self) -> usize {
        self.tensors.iter().map(|(_, q)| q.codes.len()).sum::<usize>() * REFERENCE_BITS as usize / 8
    }
}

pub fn quantize_model(model: &Model, bits: Bits) -> Result<QuantizedModel> {
    let tensors = model
        .named_tensors()
        .into_iter()
        .map(|(name, t)| Ok((name.to_string(), quantize(t, bits)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(QuantizedModel {
        kind: model.kind(),
        bits,
        tensors,
    })
}
