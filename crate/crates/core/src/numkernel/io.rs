//! NKT1 binary container: `"NKT1"`, u8 dtype tag, u32 rank, u64 dims, little-endian data.

use std::io::{Read, Write};

use super::{DType, Scalar, Tensor};
use crate::error::{bail, Result};

pub const MAGIC: &[u8; 4] = b"NKT1";

pub fn write_tensor<T: Scalar, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<()> {
    let mut buf = Vec::with_capacity(9 + 8 * t.rank() + T::BYTES * t.len());
    buf.extend_from_slice(MAGIC);
    buf.push(T::DTYPE as u8);
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Reads one tensor; fails if the stored dtype is not `T`.
pub fn read_tensor<T: Scalar, R: Read>(r: &mut R) -> Result<Tensor<T>> {
    let mut head = [0u8; 9];
    r.read_exact(&mut head)?;
    if &head[..4] != MAGIC {
        bail!(Format, "bad magic {:?}", &head[..4]);
    }
    let dtype = match head[4] {
        0 => DType::F32,
        1 => DType::F64,
        other => bail!(Format, "unknown dtype tag {other}"),
    };
    if dtype != T::DTYPE {
        bail!(Format, "stored dtype {:?}, requested {:?}", dtype, T::DTYPE);
    }
    let rank = u32::from_le_bytes(head[5..9].try_into().unwrap()) as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut d = [0u8; 8];
        r.read_exact(&mut d)?;
        shape.push(u64::from_le_bytes(d) as usize);
    }
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * T::BYTES];
    r.read_exact(&mut raw)?;
    let data = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
    Tensor::new(shape, data)
}

pub fn write_tensors<'a, W: Write>(
    w: &mut W,
    tensors: impl IntoIterator<Item = &'a Tensor<f64>>,
) -> Result<()> {
    for t in tensors {
        write_tensor(w, t)?;
    }
    Ok(())
}

pub fn read_tensors<R: Read>(r: &mut R, count: usize) -> Result<Vec<Tensor<f64>>> {
    (0..count).map(|_| read_tensor(r)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new(vec![2], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"NKT1");
        assert_eq!(buf[4], 0);
        assert_eq!(&buf[5..9], &1u32.to_le_bytes());
        assert_eq!(&buf[9..17], &2u64.to_le_bytes());
        assert_eq!(&buf[17..21], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 25);
    }

    #[test]
    fn rejects_wrong_dtype_and_magic() {
        let mut buf = Vec::new();
        write_tensor(&mut buf, &Tensor::<f64>::zeros(&[3])).unwrap();
        assert!(read_tensor::<f32, _>(&mut buf.as_slice()).is_err());
        buf[0] = b'X';
        assert!(read_tensor::<f64, _>(&mut buf.as_slice()).is_err());
    }

    proptest! {
        #[test]
        fn round_trip(dims in prop::collection::vec(0usize..4, 0..4), seed in any::<u64>()) {
            let n: usize = dims.iter().product();
            let data: Vec<f64> = (0..n).map(|i| (seed.wrapping_add(i as u64) as f64).sin()).collect();
            let t = Tensor::new(dims, data).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back: Tensor<f64> = read_tensor(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
