//! Binary tensor container.
//!
//! Layout (little-endian): `b"CMDR"`, `u16` version (major in the high byte),
//! `u8` dtype code, `u8` rank, `rank` x `u64` dims, payload, `u32` CRC-32 of
//! the payload.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numcore::{AnomalyMap, DenseFeatureMap};

pub const MAGIC: &[u8; 4] = b"CMDR";
pub const VERSION: u16 = 0x0100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 1,
    F64 = 2,
    U8 = 3,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
            DType::U8 => 1,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            3 => Some(DType::U8),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U8(Vec<u8>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::U8(_) => DType::U8,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<u64>, data: TensorData) -> Result<Self> {
        let n = dims.iter().try_fold(1u64, |a, &d| a.checked_mul(d));
        if n != Some(data.len() as u64) {
            return Err(Error::contract(format!("dims {dims:?} do not match {} elements", data.len())));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::contract("tensor rank exceeds 255"));
        }
        Ok(Self { dims, data })
    }

    pub fn f64(dims: Vec<u64>, v: Vec<f64>) -> Result<Self> {
        Self::new(dims, TensorData::F64(v))
    }

    pub fn u8(dims: Vec<u64>, v: Vec<u8>) -> Result<Self> {
        Self::new(dims, TensorData::U8(v))
    }

    /// Values widened to `f64`.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            TensorData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            TensorData::F64(v) => v.clone(),
            TensorData::U8(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8]> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            other => Err(Error::contract(format!("expected a u8 tensor, found {:?}", other.dtype()))),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let payload_len = self.data.len() * self.data.dtype().size();
        let mut out = Vec::with_capacity(8 + 8 * self.dims.len() + payload_len + 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(self.data.dtype() as u8);
        out.push(self.dims.len() as u8);
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        let start = out.len();
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => out.extend_from_slice(v),
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != MAGIC {
            return Err(parse(0, format!("bad magic {magic:?}")));
        }
        let version = u16::from_le_bytes(r.take(2, "version")?.try_into().unwrap());
        if version >> 8 != VERSION >> 8 {
            return Err(parse(4, format!("unsupported major version {}", version >> 8)));
        }
        if version > VERSION {
            log::warn!("container minor version {} is newer than {}; reading known fields", version & 0xff, VERSION & 0xff);
        }
        let code = r.take(1, "dtype")?[0];
        let dtype = DType::from_code(code).ok_or_else(|| parse(6, format!("unknown dtype code {code}")))?;
        let rank = r.take(1, "rank")?[0] as usize;
        let mut dims = Vec::with_capacity(rank);
        for i in 0..rank {
            dims.push(u64::from_le_bytes(r.take(8, &format!("dim {i}"))?.try_into().unwrap()));
        }
        let dims_end = r.pos as u64;
        let count = dims
            .iter()
            .try_fold(1u64, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size() as u64))
            .filter(|&n| n <= bytes.len() as u64)
            .ok_or_else(|| parse(dims_end, format!("dims {dims:?} exceed the file size of {} bytes", bytes.len())))?;
        let payload = r.take(count as usize, "payload")?;
        let crc_at = r.pos as u64;
        let stored = u32::from_le_bytes(r.take(4, "crc32")?.try_into().unwrap());
        if r.pos != bytes.len() {
            return Err(parse(r.pos as u64, format!("{} trailing bytes after the checksum", bytes.len() - r.pos)));
        }
        let actual = crc32fast::hash(payload);
        if stored != actual {
            return Err(parse(crc_at, format!("checksum mismatch: stored {stored:08x}, payload {actual:08x}")));
        }
        let data = match dtype {
            DType::F32 => TensorData::F32(payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::F64 => TensorData::F64(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
            DType::U8 => TensorData::U8(payload.to_vec()),
        };
        Ok(Self { dims, data })
    }
}

fn parse(offset: u64, msg: String) -> Error {
    Error::Parse { offset, msg }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            parse(
                self.pos as u64,
                format!("truncated {what}: needs bytes {}..{}, file has {}", self.pos, self.pos + n, self.bytes.len()),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
}

/// Writes `bytes` to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    write_atomic(path, &t.encode())
}

pub fn read_tensor(path: &Path) -> Result<Tensor> {
    Tensor::decode(&std::fs::read(path)?)
}

pub fn feature_map_tensor(map: &DenseFeatureMap) -> Tensor {
    let dims = vec![map.height() as u64, map.width() as u64, map.channels() as u64];
    Tensor { dims, data: TensorData::F64(map.values().to_vec()) }
}

pub fn mask_tensor(mask: &[bool], height: usize, width: usize) -> Result<Tensor> {
    Tensor::u8(vec![height as u64, width as u64], mask.iter().map(|&b| b as u8).collect())
}

pub fn anomaly_map_tensor(map: &AnomalyMap) -> Tensor {
    Tensor { dims: vec![map.height() as u64, map.width() as u64], data: TensorData::F64(map.scores().to_vec()) }
}

pub fn tensor_mask(t: &Tensor) -> Result<Vec<bool>> {
    Ok(t.as_u8()?.iter().map(|&b| b != 0).collect())
}

/// Rebuilds a feature map from an `[H, W, C]` tensor and an optional `[H, W]`
/// validity mask (all valid when absent).
pub fn tensor_feature_map(t: &Tensor, validity: Option<&Tensor>) -> Result<DenseFeatureMap> {
    let [h, w, c] = t.dims[..] else {
        return Err(Error::contract(format!("feature tensor must have rank 3, got dims {:?}", t.dims)));
    };
    let (h, w, c) = (h as usize, w as usize, c as usize);
    let valid = match validity {
        Some(v) => {
            if v.dims != [h as u64, w as u64] {
                return Err(Error::contract(format!("validity dims {:?} do not match {h}x{w}", v.dims)));
            }
            tensor_mask(v)?
        }
        None => vec![true; h * w],
    };
    DenseFeatureMap::new(h, w, c, t.to_f64(), valid)
}
