//! Little-endian binary encoding of a single tensor.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "BNTT"
//! 4       1           dtype code (1 = f32, 2 = f64)
//! 5       4           rank r (u32)
//! 9       8·r         dims (u64 each)
//! 9+8r    numel·w     values, w = 4 or 8 bytes
//! ```
//!
//! Decoding accepts either dtype and converts to the crate's [`Float`].

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math::{Float, DTYPE_CODE};
use crate::tensor::{numel, Tensor};

pub const MAGIC: &[u8; 4] = b"BNTT";

pub fn encoded_len(t: &Tensor) -> usize {
    9 + 8 * t.rank() + t.numel() * core::mem::size_of::<Float>()
}

pub fn encode_into(t: &Tensor, out: &mut Vec<u8>) {
    out.reserve(encoded_len(t));
    out.extend_from_slice(MAGIC);
    out.push(DTYPE_CODE);
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::new();
    encode_into(t, &mut out);
    out
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|e| *e <= bytes.len())
        .ok_or_else(|| Error::Format(format!("truncated tensor blob at byte {}", *at)))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

/// Decode one tensor from the front of `bytes`; returns it with the number
/// of bytes consumed.
pub fn decode(bytes: &[u8]) -> Result<(Tensor, usize)> {
    let mut at = 0;
    if take(bytes, &mut at, 4)? != MAGIC {
        return Err(Error::Format("bad tensor magic bytes".into()));
    }
    let dtype = take(bytes, &mut at, 1)?[0];
    let width = match dtype {
        1 => 4,
        2 => 8,
        other => return Err(Error::Format(format!("unknown dtype code {other}"))),
    };
    let rank = u32::from_le_bytes(take(bytes, &mut at, 4)?.try_into().unwrap()) as usize;
    if rank > 16 {
        return Err(Error::Format(format!("implausible tensor rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(bytes, &mut at, 8)?.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| Error::Format("dimension overflow".into()))?);
    }
    let count = numel(&shape);
    let raw = take(bytes, &mut at, count.checked_mul(width).ok_or_else(|| Error::Format("size overflow".into()))?)?;
    let data: Vec<Float> = if width == 4 {
        raw.chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as Float)
            .collect()
    } else {
        raw.chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Float)
            .collect()
    };
    Ok((Tensor::new(&shape, data)?, at))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    #[test]
    fn layout_is_documented_one() {
        let t = Tensor::new(&[2], vec![1.0, -2.0]).unwrap();
        let b = encode(&t);
        assert_eq!(&b[..4], b"BNTT");
        assert_eq!(b[4], DTYPE_CODE);
        assert_eq!(&b[5..9], &1u32.to_le_bytes());
        assert_eq!(&b[9..17], &2u64.to_le_bytes());
        assert_eq!(b.len(), encoded_len(&t));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let t = Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let mut b = encode(&t);
        assert!(matches!(decode(&b[..b.len() - 1]), Err(Error::Format(_))));
        b[0] = b'X';
        assert!(matches!(decode(&b), Err(Error::Format(_))));
    }

    #[test]
    fn f32_payload_is_widened() {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.push(1);
        b.extend_from_slice(&1u32.to_le_bytes());
        b.extend_from_slice(&2u64.to_le_bytes());
        b.extend_from_slice(&1.5f32.to_le_bytes());
        b.extend_from_slice(&(-0.25f32).to_le_bytes());
        let (t, used) = decode(&b).unwrap();
        assert_eq!(used, b.len());
        assert_eq!(t.data(), &[1.5, -0.25]);
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(dims in proptest::collection::vec(1usize..4, 0..4), seed in any::<u64>()) {
            let n = numel(&dims);
            let data: Vec<Float> = (0..n).map(|i| ((seed.wrapping_mul(i as u64 + 7)) % 10_007) as Float / 97.0 - 50.0).collect();
            let t = Tensor::new(&dims, data).unwrap();
            let bytes = encode(&t);
            let (back, used) = decode(&bytes).unwrap();
            prop_assert_eq!(used, bytes.len());
            prop_assert_eq!(back, t);
        }
    }
}
