//! Binary tensor container.
//!
//! Layout: `b"CSTF"`, version `u8`, dtype `u8` (0 = f32 LE), rank `u8`,
//! `rank` dims as `u32` LE, then the row-major payload.

use std::fs;
use std::path::Path;

use cst_autodiff::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CSTF";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn encode(tensor: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * tensor.rank() + 4 * tensor.numel());
    encode_into(tensor, &mut out);
    out
}

pub fn encode_into(tensor: &Tensor<f32>, out: &mut Vec<u8>) {
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(DTYPE_F32);
    out.push(tensor.rank() as u8);
    for &d in tensor.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &x in tensor.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

/// Decodes one container from the front of `bytes`, returning it and the
/// number of bytes consumed.
pub fn decode_prefix(bytes: &[u8]) -> Result<(Tensor<f32>, usize)> {
    if bytes.len() < 7 {
        return Err(Error::Format(format!("header truncated at {} bytes", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!("unsupported version {}", bytes[4])));
    }
    if bytes[5] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {}", bytes[5])));
    }
    let rank = bytes[6] as usize;
    if rank > 4 {
        return Err(Error::Format(format!("rank {rank} exceeds 4")));
    }
    let dims_end = 7 + 4 * rank;
    if bytes.len() < dims_end {
        return Err(Error::Format("dims truncated".into()));
    }
    let shape: Vec<usize> = bytes[7..dims_end]
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    let end = n
        .checked_mul(4)
        .and_then(|p| p.checked_add(dims_end))
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    if bytes.len() < end {
        return Err(Error::Format(format!(
            "payload truncated: need {} bytes, have {}",
            end - dims_end,
            bytes.len() - dims_end
        )));
    }
    let data = bytes[dims_end..end]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let t = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
    Ok((t, end))
}

/// Decodes exactly one container; trailing bytes are an error.
pub fn decode(bytes: &[u8]) -> Result<Tensor<f32>> {
    let (t, used) = decode_prefix(bytes)?;
    if used != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(t)
}

/// Decodes a back-to-back sequence of containers.
pub fn decode_all(mut bytes: &[u8]) -> Result<Vec<Tensor<f32>>> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (t, used) = decode_prefix(bytes)?;
        out.push(t);
        bytes = &bytes[used..];
    }
    Ok(out)
}

pub fn write(path: &Path, tensor: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode(tensor))?;
    Ok(())
}

pub fn read(path: &Path) -> Result<Tensor<f32>> {
    decode(&fs::read(path)?)
}

pub fn write_all(path: &Path, tensors: &[&Tensor<f32>]) -> Result<()> {
    let mut out = Vec::new();
    for t in tensors {
        encode_into(t, &mut out);
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn read_all(path: &Path) -> Result<Vec<Tensor<f32>>> {
    decode_all(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2, 1], vec![1.0f32, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"CSTF");
        assert_eq!(b[4..7], [1, 0, 2]);
        assert_eq!(b[7..11], 2u32.to_le_bytes());
        assert_eq!(b[11..15], 1u32.to_le_bytes());
        assert_eq!(b[15..19], 1.0f32.to_le_bytes());
        assert_eq!(b.len(), 7 + 8 + 8);
    }

    #[test]
    fn corrupted_magic_and_truncation_detected() {
        let t = Tensor::new(vec![3], vec![1.0f32, 2.0, 3.0]).unwrap();
        let mut b = encode(&t);
        for cut in 0..b.len() {
            assert!(decode(&b[..cut]).is_err(), "cut at {cut}");
        }
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(Error::Format(_))));
        let mut long = encode(&t);
        long.push(0);
        assert!(decode(&long).is_err());
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            dims in prop::collection::vec(1usize..5, 0..4),
            seed in any::<u32>(),
        ) {
            let n: usize = dims.iter().product();
            let data: Vec<f32> = (0..n)
                .map(|i| f32::from_bits(seed.wrapping_mul(2_654_435_761).wrapping_add(i as u32 * 7919)))
                .collect();
            let t = Tensor::new(dims, data).unwrap();
            let back = decode(&encode(&t)).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let a: Vec<u32> = back.data().iter().map(|x| x.to_bits()).collect();
            let b: Vec<u32> = t.data().iter().map(|x| x.to_bits()).collect();
            prop_assert_eq!(a, b);
        }
    }
}
