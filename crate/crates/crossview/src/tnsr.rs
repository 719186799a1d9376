//! `CVTN` tensor blobs: magic, u32 LE version 1, u32 rank, rank × u32 dims,
//! u8 dtype tag (0 = f32, 1 = f64), row-major little-endian payload.

use crossview_core::{DType, Scalar, Tensor};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CVTN";
pub const VERSION: u32 = 1;

pub fn encode<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let width = match T::DTYPE {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut out = Vec::with_capacity(13 + 4 * t.rank() + width * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.push(T::DTYPE.tag());
    for &v in t.data() {
        match T::DTYPE {
            DType::F32 => out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
            DType::F64 => out.extend_from_slice(&v.as_f64().to_le_bytes()),
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("tensor blob truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decodes a blob, converting the payload to `T` (exact for f32 → f64 and
/// for matching types).
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let (t, dtype) = decode_any::<T>(bytes)?;
    if dtype == DType::F64 && T::DTYPE == DType::F32 {
        return Err(Error::Format("refusing to narrow an f64 tensor to f32".into()));
    }
    Ok(t)
}

fn decode_any<T: Scalar>(bytes: &[u8]) -> Result<(Tensor<T>, DType)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a CVTN tensor blob".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported tensor version {version}")));
    }
    let rank = r.u32()? as usize;
    if rank > 8 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let tag = r.take(1)?[0];
    let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Format(format!("tensor shape {shape:?} overflows")))?;
    let width = if dtype == DType::F32 { 4 } else { 8 };
    let payload = r.take(n.checked_mul(width).ok_or_else(|| Error::Format("payload overflows".into()))?)?;
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after tensor payload", bytes.len() - r.pos)));
    }
    let data = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect(),
    };
    Ok((Tensor::new(shape, data)?, dtype))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0, 1.0, -2.5, 3.0, f32::MIN_POSITIVE, 1e30]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"CVTN");
        assert_eq!(&b[4..8], &[1, 0, 0, 0]);
        assert_eq!(&b[8..12], &[2, 0, 0, 0]);
        assert_eq!(&b[12..20], &[2, 0, 0, 0, 3, 0, 0, 0]);
        assert_eq!(b[20], 0);
        assert_eq!(&b[21..25], &0.0f32.to_le_bytes());
        assert_eq!(b.len(), 21 + 24);
        assert_eq!(decode::<f32>(&b).unwrap(), t);
    }

    #[test]
    fn f64_payload_and_widening() {
        let t = Tensor::<f64>::new(vec![3], vec![0.1, -1e-300, 7.0]).unwrap();
        let b = encode(&t);
        assert_eq!(b[16], 1);
        assert_eq!(decode::<f64>(&b).unwrap(), t);
        assert!(decode::<f32>(&b).is_err());
        let s = Tensor::<f32>::new(vec![1], vec![0.1]).unwrap();
        assert_eq!(decode::<f64>(&encode(&s)).unwrap().data()[0], 0.1f32 as f64);
    }

    #[test]
    fn malformed_blobs_are_rejected() {
        let b = encode(&Tensor::<f32>::zeros(&[2, 2]));
        assert!(decode::<f32>(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(decode::<f32>(&extra).is_err());
        let mut magic = b.clone();
        magic[0] = b'X';
        assert!(decode::<f32>(&magic).is_err());
        let mut tag = b.clone();
        tag[20] = 9;
        assert!(decode::<f32>(&tag).is_err());
        let mut version = b;
        version[4] = 2;
        assert!(decode::<f32>(&version).is_err());
    }

    #[test]
    fn scalar_rank_zero() {
        let t = Tensor::<f32>::scalar(4.5);
        assert_eq!(decode::<f32>(&encode(&t)).unwrap(), t);
    }
}
