//! `MALTNSR1` tensor framing.
//!
//! ```text
//! "MALTNSR1" | u8 rank | rank × u32 LE extents | u8 dtype (0=f32, 1=f64) | LE payload
//! ```

use std::path::Path;

use crate::error::{Error, Result};

use super::{DType, Real, Tensor};

pub const TENSOR_MAGIC: &[u8; 8] = b"MALTNSR1";

/// Upper bound on decoded element counts, so corrupt headers cannot request
/// absurd allocations.
pub const MAX_ELEMENTS: usize = 1 << 28;

/// A decoded tensor in its stored precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn into_real<T: Real>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode_tensor<T: Real>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(TENSOR_MAGIC);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    out.push(T::DTYPE as u8);
    out.reserve(t.len() * T::DTYPE.size());
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn tensor_to_bytes<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::new();
    encode_tensor(t, &mut out);
    out
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= buf.len())
        .ok_or_else(|| Error::Decode(format!("truncated {what}")))?;
    let s = &buf[*pos..end];
    *pos = end;
    Ok(s)
}

/// Decodes one framed tensor starting at `buf[0]`; returns it with the number
/// of bytes consumed.
pub fn decode_tensor_prefix(buf: &[u8]) -> Result<(AnyTensor, usize)> {
    let mut pos = 0;
    if take(buf, &mut pos, 8, "magic")? != TENSOR_MAGIC {
        return Err(Error::Decode("bad tensor magic".into()));
    }
    let rank = take(buf, &mut pos, 1, "rank")?[0] as usize;
    if rank == 0 {
        return Err(Error::Decode("rank 0 tensor".into()));
    }
    let mut shape = Vec::with_capacity(rank);
    let mut count: usize = 1;
    for _ in 0..rank {
        let b = take(buf, &mut pos, 4, "extent")?;
        let e = u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize;
        if e == 0 {
            return Err(Error::Decode("zero extent".into()));
        }
        count = count
            .checked_mul(e)
            .filter(|&c| c <= MAX_ELEMENTS)
            .ok_or_else(|| Error::Decode("tensor too large".into()))?;
        shape.push(e);
    }
    let tag = take(buf, &mut pos, 1, "dtype")?[0];
    let dtype = DType::from_tag(tag).ok_or_else(|| Error::Decode(format!("unknown dtype tag {tag}")))?;
    let payload = take(buf, &mut pos, count * dtype.size(), "payload")?;
    let t = match dtype {
        DType::F32 => AnyTensor::F32(Tensor::from_parts(
            shape,
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect(),
        )),
        DType::F64 => AnyTensor::F64(Tensor::from_parts(
            shape,
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )),
    };
    Ok((t, pos))
}

/// Decodes a buffer holding exactly one tensor.
pub fn decode_tensor(buf: &[u8]) -> Result<AnyTensor> {
    let (t, used) = decode_tensor_prefix(buf)?;
    if used != buf.len() {
        return Err(Error::Decode(format!("{} trailing bytes", buf.len() - used)));
    }
    Ok(t)
}

pub fn write_tensor<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, tensor_to_bytes(t))?;
    Ok(())
}

pub fn read_tensor(path: &Path) -> Result<AnyTensor> {
    let bytes = std::fs::read(path)?;
    decode_tensor(&bytes).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let b = tensor_to_bytes(&t);
        assert_eq!(&b[..8], b"MALTNSR1");
        assert_eq!(b[8], 2);
        assert_eq!(&b[9..13], &2u32.to_le_bytes());
        assert_eq!(&b[13..17], &1u32.to_le_bytes());
        assert_eq!(b[17], 0);
        assert_eq!(&b[18..22], &1f32.to_le_bytes());
        assert_eq!(b.len(), 26);
    }

    #[test]
    fn rejects_corruption() {
        let t = Tensor::<f64>::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let b = tensor_to_bytes(&t);
        assert!(decode_tensor(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode_tensor(&bad).is_err());
        let mut bad = b.clone();
        bad[13] = 9;
        assert!(decode_tensor(&bad).is_err());
        let mut extra = b;
        extra.push(0);
        assert!(decode_tensor(&extra).is_err());
    }

    #[test]
    fn huge_extents_do_not_allocate() {
        let mut b = TENSOR_MAGIC.to_vec();
        b.push(2);
        b.extend_from_slice(&u32::MAX.to_le_bytes());
        b.extend_from_slice(&u32::MAX.to_le_bytes());
        b.push(0);
        assert!(decode_tensor(&b).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_f64(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| (seed.wrapping_mul(i as u64 + 1) as f64).sin()).collect();
            let t = Tensor::new(shape, data).unwrap();
            let back = decode_tensor(&tensor_to_bytes(&t)).unwrap();
            prop_assert_eq!(back, AnyTensor::F64(t));
        }

        #[test]
        fn decode_never_panics(bytes in prop::collection::vec(any::<u8>(), 0..64)) {
            let _ = decode_tensor(&bytes);
        }
    }
}
