//! Binary tensor blobs:
//! `"ITSE" | version u32 | dtype u8 | rank u32 | extents u64×rank | scalars (LE)`.

use std::io::{Read, Write};

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const BLOB_MAGIC: &[u8; 4] = b"ITSE";
pub const BLOB_VERSION: u32 = 1;

pub fn write_blob<T: Scalar, W: Write>(out: &mut W, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(13 + 8 * t.rank() + T::DTYPE.size() * t.numel());
    buf.extend_from_slice(BLOB_MAGIC);
    buf.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    buf.push(T::DTYPE.tag());
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(&mut buf);
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads one blob. The stored dtype must match `T`.
pub fn read_blob<T: Scalar, R: Read>(input: &mut R) -> Result<Tensor<T>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != BLOB_MAGIC {
        return Err(Error::Format(format!("bad blob magic {magic:?}")));
    }
    let version = read_u32(input)?;
    if version != BLOB_VERSION {
        return Err(Error::Format(format!("unsupported blob version {version}")));
    }
    let mut tag = [0u8; 1];
    input.read_exact(&mut tag)?;
    let dtype = DType::from_tag(tag[0]).ok_or_else(|| Error::Format(format!("unknown dtype tag {}", tag[0])))?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!("blob holds {dtype}, expected {}", T::DTYPE)));
    }
    let rank = read_u32(input)? as usize;
    if rank == 0 || rank > 16 {
        return Err(Error::Format(format!("implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut b = [0u8; 8];
        input.read_exact(&mut b)?;
        let e = usize::try_from(u64::from_le_bytes(b)).map_err(|_| Error::Format("extent overflow".into()))?;
        shape.push(e);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &e| acc.checked_mul(e))
        .ok_or_else(|| Error::Format("element count overflow".into()))?;
    let width = dtype.size();
    let mut raw = vec![0u8; numel * width];
    input.read_exact(&mut raw)?;
    let data = raw.chunks_exact(width).map(T::read_le).collect();
    Tensor::from_vec(shape, data).map_err(|e| Error::Format(e.to_string()))
}

fn read_u32<R: Read>(input: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    input.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_fixed() {
        let t = Tensor::<f32>::from_vec([2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_blob(&mut buf, &t).unwrap();
        let mut expect = b"ITSE".to_vec();
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.push(0);
        expect.extend_from_slice(&1u32.to_le_bytes());
        expect.extend_from_slice(&2u64.to_le_bytes());
        expect.extend_from_slice(&1.0f32.to_le_bytes());
        expect.extend_from_slice(&(-2.0f32).to_le_bytes());
        assert_eq!(buf, expect);
    }

    #[test]
    fn dtype_mismatch_rejected() {
        let mut buf = Vec::new();
        write_blob(&mut buf, &Tensor::<f32>::ones([3])).unwrap();
        assert!(read_blob::<f64, _>(&mut buf.as_slice()).is_err());
        buf[0] = b'X';
        assert!(read_blob::<f32, _>(&mut buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(seed in any::<u64>(), a in 1usize..5, b in 1usize..5, c in 1usize..4) {
            let t = Tensor::<f64>::randn([a, b, c], 10.0, &mut Rng::new(seed));
            let mut buf = Vec::new();
            write_blob(&mut buf, &t).unwrap();
            let back: Tensor<f64> = read_blob(&mut buf.as_slice()).unwrap();
            prop_assert!(back.bit_eq(&t));
            let t32 = t.cast::<f32>();
            let mut buf = Vec::new();
            write_blob(&mut buf, &t32).unwrap();
            let back: Tensor<f32> = read_blob(&mut buf.as_slice()).unwrap();
            prop_assert!(back.bit_eq(&t32));
        }
    }
}
