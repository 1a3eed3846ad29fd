//! Binary weights files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"NLROIW01"  u32 count
//! count × { u16 name_len, name (UTF-8), u8 rank, rank × u32 dim, f64 × Π dim }
//! ```

use std::collections::HashSet;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"NLROIW01";

pub fn encode_weights(tensors: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let count =
        u32::try_from(tensors.len()).map_err(|_| Error::Format("too many tensors".into()))?;
    let mut seen = HashSet::new();
    let payload: usize = tensors
        .iter()
        .map(|(n, t)| 3 + n.len() + 4 * t.rank() + 8 * t.len())
        .sum();
    let mut out = Vec::with_capacity(12 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&count.to_le_bytes());

    for (name, t) in tensors {
        if !seen.insert(name.as_str()) {
            return Err(Error::Format(format!("duplicate tensor name `{name}`")));
        }
        let len = u16::try_from(name.len())
            .map_err(|_| Error::Format(format!("tensor name `{name}` is too long")))?;
        let rank = u8::try_from(t.rank())
            .map_err(|_| Error::Format(format!("tensor `{name}` has rank {} > 255", t.rank())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &dim in t.shape() {
            let dim = u32::try_from(dim)
                .map_err(|_| Error::Format(format!("tensor `{name}` has a dimension above u32")))?;
            out.extend_from_slice(&dim.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&end| end <= self.bytes.len())
            .ok_or_else(|| {
                Error::Corruption(format!(
                    "file ends inside {what} (offset {}, {} bytes left)",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn array<const K: usize>(&mut self, what: &str) -> Result<[u8; K]> {
        Ok(self.take(K, what)?.try_into().expect("slice has length K"))
    }
}

pub fn decode_weights(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let prefix = &bytes[..bytes.len().min(MAGIC.len())];
    if prefix != &MAGIC[..prefix.len()] {
        return Err(Error::Format("bad magic bytes, not a weights file".into()));
    }
    let mut r = Reader { bytes, pos: 0 };
    r.take(MAGIC.len(), "the magic bytes")?;
    let count = u32::from_le_bytes(r.array("the tensor count")?);

    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for index in 0..count {
        let len = u16::from_le_bytes(r.array("a name length")?) as usize;
        let name = std::str::from_utf8(r.take(len, "a tensor name")?)
            .map_err(|_| Error::Format(format!("tensor {index} has a non-UTF-8 name")))?
            .to_string();
        if !seen.insert(name.clone()) {
            return Err(Error::Format(format!("duplicate tensor name `{name}`")));
        }
        let [rank] = r.array::<1>("a rank")?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(r.array("a dimension")?) as usize);
        }
        let bytes_needed = shape
            .iter()
            .try_fold(8usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| {
                Error::Corruption(format!("tensor `{name}` declares an impossible size"))
            })?;
        let raw = r.take(bytes_needed, "tensor values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Corruption(format!(
            "{} unexpected trailing bytes",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

pub fn save_weights(path: impl AsRef<Path>, tensors: &[(String, Tensor)]) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_weights(tensors)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<Vec<(String, Tensor)>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}
