//! Raw tensor container: magic `FVT1`, u8 rank, little-endian u32 dims,
//! dtype tag, row-major payload.

use std::fs;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{AvsrError, Result};

const MAGIC: &[u8; 4] = b"FVT1";
const DTYPE_U8: u8 = 1;
const DTYPE_F32: u8 = 2;
const DTYPE_F64: u8 = 3;

#[derive(Debug, Clone)]
pub enum TensorData {
    U8(ArrayD<u8>),
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::U8(a) => a.shape(),
            TensorData::F32(a) => a.shape(),
            TensorData::F64(a) => a.shape(),
        }
    }
}

fn encode<T: Copy>(dims: &[usize], dtype: u8, elems: &[T], to_bytes: impl Fn(T, &mut Vec<u8>)) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + 1 + dims.len() * 4 + 1 + elems.len() * std::mem::size_of::<T>());
    out.extend_from_slice(MAGIC);
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(dtype);
    for &e in elems {
        to_bytes(e, &mut out);
    }
    out
}

pub fn write_tensor(path: &Path, tensor: &TensorData) -> Result<()> {
    let dims = tensor.shape();
    if dims.len() > 4 {
        return Err(AvsrError::Format("tensor rank exceeds 4".into()));
    }
    let bytes = match tensor {
        TensorData::U8(a) => {
            let std = a.as_standard_layout();
            encode(dims, DTYPE_U8, std.as_slice().unwrap(), |v, out| out.push(v))
        }
        TensorData::F32(a) => {
            let std = a.as_standard_layout();
            encode(dims, DTYPE_F32, std.as_slice().unwrap(), |v, out| {
                out.extend_from_slice(&v.to_le_bytes())
            })
        }
        TensorData::F64(a) => {
            let std = a.as_standard_layout();
            encode(dims, DTYPE_F64, std.as_slice().unwrap(), |v, out| {
                out.extend_from_slice(&v.to_le_bytes())
            })
        }
    };
    fs::write(path, bytes).map_err(|e| AvsrError::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<TensorData> {
    let bytes = fs::read(path).map_err(|e| AvsrError::io(path, e))?;
    let bad = |msg: &str| AvsrError::Format(format!("{}: {}", path.display(), msg));
    if bytes.len() < 6 || &bytes[0..4] != MAGIC {
        return Err(bad("bad magic"));
    }
    let rank = bytes[4] as usize;
    if rank > 4 {
        return Err(bad("rank exceeds 4"));
    }
    let header_len = 5 + rank * 4 + 1;
    if bytes.len() < header_len {
        return Err(bad("truncated header"));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        let at = 5 + i * 4;
        dims.push(u32::from_le_bytes([
            bytes[at],
            bytes[at + 1],
            bytes[at + 2],
            bytes[at + 3],
        ]) as usize);
    }
    let dtype = bytes[header_len - 1];
    let count: usize = dims.iter().product();
    let payload = &bytes[header_len..];
    match dtype {
        DTYPE_U8 => {
            if payload.len() != count {
                return Err(bad("payload size mismatch"));
            }
            Ok(TensorData::U8(
                ArrayD::from_shape_vec(IxDyn(&dims), payload.to_vec()).unwrap(),
            ))
        }
        DTYPE_F32 => {
            if payload.len() != count * 4 {
                return Err(bad("payload size mismatch"));
            }
            let v: Vec<f32> = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Ok(TensorData::F32(ArrayD::from_shape_vec(IxDyn(&dims), v).unwrap()))
        }
        DTYPE_F64 => {
            if payload.len() != count * 8 {
                return Err(bad("payload size mismatch"));
            }
            let v: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| {
                    f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]])
                })
                .collect();
            Ok(TensorData::F64(ArrayD::from_shape_vec(IxDyn(&dims), v).unwrap()))
        }
        _ => Err(bad("unknown dtype tag")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    #[test]
    fn header_size_before_payload() {
        // 4 magic + 1 rank + 4*4 dims + 1 dtype = 22 bytes for a rank-4 tensor
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fvt");
        let a = Array::from_elem(IxDyn(&[20, 32, 32, 3]), 7u8);
        write_tensor(&path, &TensorData::U8(a)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 22 + 20 * 32 * 32 * 3);
    }

    #[test]
    fn empty_tensor_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.fvt");
        let a = Array::from_shape_vec(IxDyn(&[0]), Vec::<u8>::new()).unwrap();
        write_tensor(&path, &TensorData::U8(a)).unwrap();
        match read_tensor(&path).unwrap() {
            TensorData::U8(b) => assert_eq!(b.shape(), &[0]),
            _ => panic!("wrong dtype"),
        }
    }

    #[test]
    fn truncation_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.fvt");
        let a = Array::from_elem(IxDyn(&[4, 4]), 1u8);
        write_tensor(&path, &TensorData::U8(a)).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, bytes).unwrap();
        assert!(read_tensor(&path).is_err());
    }
}
