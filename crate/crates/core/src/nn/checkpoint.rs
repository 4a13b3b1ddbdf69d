//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   b"SKLBCKPT"
//! version      u32       currently 1
//! config_len   u64
//! config       config_len bytes of UTF-8 (JSON echo of model + training config)
//! count        u32       number of parameters
//! repeated count times:
//!   name_len   u32
//!   name       name_len bytes of UTF-8
//!   ndim       u32
//!   dims       ndim x u64
//!   values     prod(dims) x f64 (IEEE-754 binary64)
//! ```

use std::fs;
use std::path::Path;

use super::{NnError, ParamStore, Tensor};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SKLBCKPT";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: String,
    pub params: ParamStore,
}

pub fn encode_checkpoint(store: &ParamStore, config: &str) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + 8 * store.num_scalars());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u64).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for id in store.ids() {
        let name = store.name(id);
        let value = store.value(id);
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(value.shape().len() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| NnError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String, NnError> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|e| NnError::Checkpoint(format!("invalid UTF-8: {e}")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, NnError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!("unsupported version {version}")));
    }
    let config_len = cur.u64()? as usize;
    let config = cur.string(config_len)?;
    let count = cur.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = cur.string(name_len)?;
        let ndim = cur.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| cur.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let raw = cur.take(n.checked_mul(8).ok_or_else(|| NnError::Checkpoint("size overflow".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.add(name, Tensor::new(shape, data)?);
    }
    if cur.pos != bytes.len() {
        return Err(NnError::Checkpoint("trailing bytes".into()));
    }
    Ok(Checkpoint { config, params })
}

pub fn save_checkpoint(path: impl AsRef<Path>, store: &ParamStore, config: &str) -> Result<(), NnError> {
    fs::write(path, encode_checkpoint(store, config))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, NnError> {
    decode_checkpoint(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        store.add_uniform("a.w", &[3, 2], 2, &mut rng);
        store.add_uniform("a.b", &[3], 2, &mut rng);
        let bytes = encode_checkpoint(&store, "{\"k\":1}");
        let ck = decode_checkpoint(&bytes).unwrap();
        assert_eq!(ck.config, "{\"k\":1}");
        assert_eq!(ck.params.flat_values(), store.flat_values());
        assert_eq!(ck.params.name(ck.params.ids().nth(1).unwrap()), "a.b");
        assert_eq!(encode_checkpoint(&ck.params, &ck.config), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let store = ParamStore::new();
        let bytes = encode_checkpoint(&store, "");
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_checkpoint(&bad).is_err());
        let mut trailing = bytes;
        trailing.push(0);
        assert!(decode_checkpoint(&trailing).is_err());
    }
}
