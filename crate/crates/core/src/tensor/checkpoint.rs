//! Binary checkpoint format.
//!
//! ```text
//! "AVTE" | version u32 | count u32 | count × tensor
//! tensor: name_len u16 | name utf-8 | rank u8 | dims u64 × rank | f64 × numel
//! ```
//!
//! All integers and floats are little-endian; tensors appear in
//! lexicographic name order.

use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use super::{ParameterSet, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AVTE";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub fn encode_checkpoint(params: &ParameterSet) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::with_capacity(12 + params.numel() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let count = u32::try_from(params.len())
        .map_err(|_| CheckpointError::Malformed("too many tensors".into()))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in params.iter() {
        let len = u16::try_from(name.len())
            .map_err(|_| CheckpointError::Malformed(format!("name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let rank = u8::try_from(t.rank())
            .map_err(|_| CheckpointError::Malformed(format!("rank too large: {name}")))?;
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], CheckpointError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ParameterSet, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if bytes.len() < 4 || r.take(4)? != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(r.array()?);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = u32::from_le_bytes(r.array()?);
    let mut params = ParameterSet::new();
    let mut last: Option<String> = None;
    for _ in 0..count {
        let len = u16::from_le_bytes(r.array()?) as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| CheckpointError::Malformed(format!("name is not utf-8: {e}")))?
            .to_string();
        if last.as_ref().is_some_and(|prev| *prev >= name) {
            return Err(CheckpointError::Malformed(format!(
                "tensor {name} out of order"
            )));
        }
        let rank = r.array::<1>()?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = u64::from_le_bytes(r.array()?);
            shape.push(usize::try_from(d).map_err(|_| CheckpointError::Malformed("dim".into()))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| CheckpointError::Malformed("dims overflow".into()))?;
        let payload = r.take(numel.checked_mul(8).ok_or(CheckpointError::Truncated)?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        params.insert(name.clone(), t);
        last = Some(name);
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    Ok(params)
}

pub fn write_checkpoint(path: &Path, params: &ParameterSet) -> Result<(), CheckpointError> {
    fs::write(path, encode_checkpoint(params)?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<ParameterSet, CheckpointError> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_exact() {
        let mut p = ParameterSet::new();
        p.insert("a", Tensor::vector(vec![1.5]));
        let bytes = encode_checkpoint(&p).unwrap();
        let mut expected = b"AVTE".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.push(b'a');
        expected.push(1);
        expected.extend_from_slice(&1u64.to_le_bytes());
        expected.extend_from_slice(&1.5f64.to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn empty_checkpoint() {
        let bytes = encode_checkpoint(&ParameterSet::new()).unwrap();
        assert_eq!(bytes.len(), 12);
        assert!(decode_checkpoint(&bytes).unwrap().is_empty());
    }

    #[test]
    fn corrupt_inputs() {
        assert!(matches!(decode_checkpoint(b"AVTX\x01\0\0\0\0\0\0\0"), Err(CheckpointError::BadMagic)));
        assert!(matches!(decode_checkpoint(b"AV"), Err(CheckpointError::BadMagic)));
        assert!(matches!(decode_checkpoint(b"AVTE\x02\0\0\0\0\0\0\0"), Err(CheckpointError::Version(2))));
        let mut p = ParameterSet::new();
        p.insert("w", Tensor::vector(vec![1.0, 2.0]));
        let bytes = encode_checkpoint(&p).unwrap();
        assert!(matches!(
            decode_checkpoint(&bytes[..bytes.len() - 3]),
            Err(CheckpointError::Truncated)
        ));
    }

    fn arb_params() -> impl Strategy<Value = ParameterSet> {
        let tensor = prop::collection::vec(1usize..4, 1..4).prop_flat_map(|shape| {
            let n = shape.iter().product::<usize>();
            prop::collection::vec(any::<f64>(), n)
                .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
        });
        prop::collection::btree_map("[a-z]{1,3}(\\.[a-z0-9]{1,4}){0,3}", tensor, 0..6)
            .prop_map(|m| m.into_iter().collect())
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(p in arb_params()) {
            let bytes = encode_checkpoint(&p).unwrap();
            let back = decode_checkpoint(&bytes).unwrap();
            prop_assert_eq!(back.len(), p.len());
            for ((na, ta), (nb, tb)) in p.iter().zip(back.iter()) {
                prop_assert_eq!(na, nb);
                prop_assert_eq!(ta.shape(), tb.shape());
                let bits_a: Vec<u64> = ta.data().iter().map(|v| v.to_bits()).collect();
                let bits_b: Vec<u64> = tb.data().iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(bits_a, bits_b);
            }
            prop_assert_eq!(encode_checkpoint(&back).unwrap(), bytes);
        }
    }
}
