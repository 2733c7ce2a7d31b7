//! Flat parameter storage with a named tensor layout, and its binary payload.
//!
//! Payload (little-endian): `u32` tensor count, then per tensor `u32` name
//! length, UTF-8 name bytes, `u32` rank and `u64` dims; then every value as
//! `f64`, tensors concatenated in layout order.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::NeuralError;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorSpec {
    pub fn new(name: impl Into<String>, shape: &[usize]) -> Self {
        Self { name: name.into(), shape: shape.to_vec() }
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Vec<TensorSpec>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(layout: Vec<TensorSpec>) -> Self {
        let n = layout.iter().map(TensorSpec::numel).sum();
        Self { layout, values: vec![0.0; n] }
    }

    pub fn from_parts(layout: Vec<TensorSpec>, values: Vec<f64>) -> Result<Self, NeuralError> {
        let n: usize = layout.iter().map(TensorSpec::numel).sum();
        if n != values.len() {
            return Err(NeuralError::ShapeMismatch { expected: n, actual: values.len() });
        }
        Ok(Self { layout, values })
    }

    pub fn zeros_like(&self) -> Self {
        Self { layout: self.layout.clone(), values: vec![0.0; self.values.len()] }
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.layout == other.layout
    }

    pub fn check_layout(&self, other: &ParamVector) -> Result<(), NeuralError> {
        if self.same_layout(other) {
            Ok(())
        } else {
            Err(NeuralError::LayoutMismatch(describe_diff(&self.layout, &other.layout)))
        }
    }

    /// Value range of the named tensor.
    pub fn range_of(&self, name: &str) -> Option<Range<usize>> {
        let mut offset = 0;
        for spec in &self.layout {
            let n = spec.numel();
            if spec.name == name {
                return Some(offset..offset + n);
            }
            offset += n;
        }
        None
    }

    pub fn tensor(&self, name: &str) -> Option<&[f64]> {
        self.range_of(name).map(|r| &self.values[r])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Overwrites values from `other`, which must share the layout.
    pub fn copy_from(&mut self, other: &ParamVector) -> Result<(), NeuralError> {
        self.check_layout(other)?;
        self.values.copy_from_slice(&other.values);
        Ok(())
    }

    pub fn fill(&mut self, value: f64) {
        self.values.iter_mut().for_each(|v| *v = value);
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header: usize = self
            .layout
            .iter()
            .map(|s| 4 + s.name.len() + 4 + 8 * s.shape.len())
            .sum();
        let mut out = Vec::with_capacity(4 + header + 8 * self.values.len());
        out.extend_from_slice(&(self.layout.len() as u32).to_le_bytes());
        for spec in &self.layout {
            out.extend_from_slice(&(spec.name.len() as u32).to_le_bytes());
            out.extend_from_slice(spec.name.as_bytes());
            out.extend_from_slice(&(spec.shape.len() as u32).to_le_bytes());
            for &d in &spec.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NeuralError> {
        let mut cur = Cursor { bytes, pos: 0 };
        let count = cur.u32()? as usize;
        let mut layout = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| NeuralError::CorruptPayload("tensor name is not UTF-8".into()))?
                .to_owned();
            let rank = cur.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(usize::try_from(cur.u64()?).map_err(|_| {
                    NeuralError::CorruptPayload("dimension overflows usize".into())
                })?);
            }
            layout.push(TensorSpec { name, shape });
        }
        let total = layout
            .iter()
            .try_fold(0usize, |acc, s| {
                s.shape.iter().try_fold(1usize, |p, &d| p.checked_mul(d)).and_then(|n| acc.checked_add(n))
            })
            .ok_or_else(|| NeuralError::CorruptPayload("tensor sizes overflow".into()))?;
        let remaining = bytes.len() - cur.pos;
        if remaining != total.saturating_mul(8) {
            return Err(NeuralError::CorruptPayload(format!(
                "expected {} value bytes, found {remaining}",
                total.saturating_mul(8)
            )));
        }
        let values = cur.bytes[cur.pos..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Self { layout, values })
    }

    /// Decodes a payload and requires its header to equal `expected`.
    pub fn from_bytes_with_layout(bytes: &[u8], expected: &[TensorSpec]) -> Result<Self, NeuralError> {
        let pv = Self::from_bytes(bytes)?;
        if pv.layout != expected {
            return Err(NeuralError::LayoutMismatch(describe_diff(expected, &pv.layout)));
        }
        Ok(pv)
    }
}

fn describe_diff(expected: &[TensorSpec], actual: &[TensorSpec]) -> String {
    if expected.len() != actual.len() {
        return format!("expected {} tensors, found {}", expected.len(), actual.len());
    }
    for (e, a) in expected.iter().zip(actual) {
        if e != a {
            return format!("expected {} {:?}, found {} {:?}", e.name, e.shape, a.name, a.shape);
        }
    }
    "layouts differ".into()
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NeuralError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            NeuralError::CorruptPayload(format!("truncated payload at byte {}", self.pos))
        })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, NeuralError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, NeuralError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
