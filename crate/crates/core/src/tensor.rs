//! Little-endian named-tensor container.
//!
//! ```text
//! "VSRG" | version u32 | tensor count u32
//! per tensor: name len u32 | name | rank u32 | dims u64 * rank | dtype u32 | offset u64
//! zero padding to a 64-byte boundary, then the data section
//! ```
//!
//! Offsets are relative to the start of the data section and every tensor
//! starts on a 64-byte boundary. Tensors are written in name order, so the
//! encoding of a given map is unique and reading then writing reproduces the
//! input bytes.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"VSRG";
pub const VERSION: u32 = 1;
pub const ALIGN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum DType {
    F32 = 0,
    F64 = 1,
    U64 = 2,
}

impl DType {
    fn from_code(code: u32) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            2 => Ok(DType::U64),
            c => Err(Error::Format(format!("unknown dtype code {c}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 | DType::U64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U64(Vec<u64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U64(_) => DType::U64,
        }
    }

    fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_bits().to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_bits().to_le_bytes())),
            TensorData::U64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }

    fn read_le(dtype: DType, bytes: &[u8]) -> Self {
        match dtype {
            DType::F32 => TensorData::F32(
                bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_bits(u32::from_le_bytes(c.try_into().unwrap())))
                    .collect(),
            ),
            DType::F64 => TensorData::F64(
                bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
                    .collect(),
            ),
            DType::U64 => TensorData::U64(
                bytes
                    .chunks_exact(8)
                    .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: TensorData) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {numel} elements but data has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn f32(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        Self::new(shape, TensorData::F32(data))
    }

    pub fn u64(shape: Vec<usize>, data: Vec<u64>) -> Result<Self> {
        Self::new(shape, TensorData::U64(data))
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match &self.data {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match &self.data {
            TensorData::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_u64(&self) -> Option<&[u64]> {
        match &self.data {
            TensorData::U64(v) => Some(v),
            _ => None,
        }
    }
}

pub type TensorMap = BTreeMap<String, Tensor>;

fn pad_to(buf: &mut Vec<u8>, align: usize) {
    let rem = buf.len() % align;
    if rem != 0 {
        buf.resize(buf.len() + align - rem, 0);
    }
}

fn aligned(n: usize) -> usize {
    n.div_ceil(ALIGN) * ALIGN
}

pub fn encode(tensors: &TensorMap) -> Vec<u8> {
    let mut header = Vec::new();
    header.extend_from_slice(MAGIC);
    header.extend_from_slice(&VERSION.to_le_bytes());
    header.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    let mut offset = 0usize;
    for (name, t) in tensors {
        header.extend_from_slice(&(name.len() as u32).to_le_bytes());
        header.extend_from_slice(name.as_bytes());
        header.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            header.extend_from_slice(&(d as u64).to_le_bytes());
        }
        header.extend_from_slice(&(t.data.dtype() as u32).to_le_bytes());
        header.extend_from_slice(&(offset as u64).to_le_bytes());
        offset = aligned(offset + t.numel() * t.data.dtype().size());
    }
    pad_to(&mut header, ALIGN);
    let mut out = header;
    out.reserve(offset);
    for t in tensors.values() {
        t.data.write_le(&mut out);
        pad_to(&mut out, ALIGN);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("tensor file header is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<TensorMap> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("not a VSRG tensor file (bad magic)".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported tensor file version {version}")));
    }
    let count = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        let shape = (0..rank)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let dtype = DType::from_code(cur.u32()?)?;
        let offset = cur.u64()? as usize;
        entries.push((name, shape, dtype, offset));
    }
    let data_start = aligned(cur.pos);
    let mut tensors = TensorMap::new();
    for (name, shape, dtype, offset) in entries {
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("tensor {name}: shape overflows")))?;
        let start = data_start + offset;
        let end = numel
            .checked_mul(dtype.size())
            .and_then(|n| start.checked_add(n))
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format(format!("tensor {name}: data out of bounds")))?;
        let data = TensorData::read_le(dtype, &bytes[start..end]);
        if tensors.insert(name.clone(), Tensor { shape, data }).is_some() {
            return Err(Error::Format(format!("duplicate tensor name {name:?}")));
        }
    }
    Ok(tensors)
}

pub fn save(tensors: &TensorMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = File::create(path).map_err(|e| Error::file(path, e))?;
    file.write_all(&encode(tensors)).map_err(|e| Error::file(path, e))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<TensorMap> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::file(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> TensorMap {
        let mut m = TensorMap::new();
        m.insert("b".into(), Tensor::f32(vec![2, 3], vec![1.0, -0.0, f32::NAN, 4.5, 5.0, 6.0]).unwrap());
        m.insert("a.meta".into(), Tensor::u64(vec![2], vec![7, u64::MAX]).unwrap());
        m.insert("c".into(), Tensor::new(vec![1], TensorData::F64(vec![0.1])).unwrap());
        m
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[..4], b"VSRG");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 3);
        assert_eq!(bytes.len() % ALIGN, 0);
        // first tensor in name order is "a.meta"
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 6);
        assert_eq!(&bytes[16..22], b"a.meta");
    }

    #[test]
    fn bit_exact_roundtrip() {
        let bytes = encode(&sample());
        let decoded = decode(&bytes).unwrap();
        assert_eq!(encode(&decoded), bytes);
        let nan = decoded["b"].as_f32().unwrap()[2];
        assert!(nan.is_nan());
        assert_eq!(decoded["b"].as_f32().unwrap()[1].to_bits(), (-0.0f32).to_bits());
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"NOPE").is_err());
        let mut bytes = encode(&sample());
        bytes.truncate(bytes.len() - 64);
        assert!(decode(&bytes).is_err());
    }

    #[test]
    fn shape_must_match_data() {
        assert!(Tensor::f32(vec![2, 2], vec![1.0]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_arbitrary(bits in proptest::collection::vec(any::<u32>(), 0..50), extra in 0usize..5) {
            let mut m = TensorMap::new();
            let data: Vec<f32> = bits.iter().map(|&b| f32::from_bits(b)).collect();
            m.insert("x".into(), Tensor::f32(vec![data.len()], data).unwrap());
            m.insert("y".into(), Tensor::u64(vec![extra, 1], vec![3; extra]).unwrap());
            let bytes = encode(&m);
            prop_assert_eq!(encode(&decode(&bytes).unwrap()), bytes);
        }
    }
}
