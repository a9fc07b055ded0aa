use std::io::{Read, Write};

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::{DType, Scalar};

pub const TENSOR_MAGIC: &[u8; 4] = b"EKGT";

/// Writes `EKGT`, dtype code, rank, u64 extents and raw little-endian values.
pub fn write_tensor<T: Scalar, W: Write>(out: &mut W, t: &Tensor<T>) -> Result<()> {
    let rank = u8::try_from(t.rank())
        .map_err(|_| Error::shape(format!("rank {} does not fit the header", t.rank())))?;
    let mut buf = Vec::with_capacity(6 + 8 * t.rank() + T::DTYPE.size() * t.len());
    buf.extend_from_slice(TENSOR_MAGIC);
    buf.push(T::DTYPE.code());
    buf.push(rank);
    for &e in t.shape() {
        buf.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut buf);
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads one tensor, converting from the stored dtype to `T` when they differ.
pub fn read_tensor<T: Scalar, R: Read>(input: &mut R) -> Result<Tensor<T>> {
    let mut head = [0u8; 6];
    read_exact(input, &mut head)?;
    if &head[..4] != TENSOR_MAGIC {
        return Err(Error::Format(format!("bad tensor magic {:?}", &head[..4])));
    }
    let dtype = DType::from_code(head[4])
        .ok_or_else(|| Error::Format(format!("unknown dtype code {}", head[4])))?;
    let rank = head[5] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let mut e = [0u8; 8];
        read_exact(input, &mut e)?;
        shape.push(u64::from_le_bytes(e) as usize);
    }
    let n: usize = shape.iter().product();
    let mut raw = vec![0u8; n * dtype.size()];
    read_exact(input, &mut raw)?;
    let data = match dtype {
        DType::F32 => raw
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::read_le(c) as f64))
            .collect(),
        DType::F64 => raw
            .chunks_exact(8)
            .map(|c| T::from_f64(f64::read_le(c)))
            .collect(),
    };
    Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
}

fn read_exact<R: Read>(input: &mut R, buf: &mut [u8]) -> Result<()> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated tensor record".into()),
        _ => Error::Io(e),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new(vec![2, 1], vec![1.0, -2.0]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        assert_eq!(&buf[..4], b"EKGT");
        assert_eq!(buf[4], 0);
        assert_eq!(buf[5], 2);
        assert_eq!(&buf[6..14], &2u64.to_le_bytes());
        assert_eq!(&buf[22..26], &1.0f32.to_le_bytes());
        assert_eq!(buf.len(), 6 + 16 + 8);
    }

    #[test]
    fn truncation_and_magic_are_format_errors() {
        let t = Tensor::<f64>::zeros(&[3]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let cut = &buf[..buf.len() - 1];
        assert!(matches!(
            read_tensor::<f64, _>(&mut &cut[..]),
            Err(Error::Format(_))
        ));
        buf[0] = b'X';
        assert!(matches!(
            read_tensor::<f64, _>(&mut &buf[..]),
            Err(Error::Format(_))
        ));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(shape in prop::collection::vec(1usize..4, 1..5), seed in any::<u64>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f64> = (0..n).map(|i| ((seed.wrapping_add(i as u64) % 1000) as f64 - 500.0) / 7.0).collect();
            let t = Tensor::<f64>::new(shape, data).unwrap();
            let mut buf = Vec::new();
            write_tensor(&mut buf, &t).unwrap();
            let back: Tensor<f64> = read_tensor(&mut &buf[..]).unwrap();
            prop_assert_eq!(back, t);
        }
    }
}
