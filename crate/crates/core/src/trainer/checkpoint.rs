//! Binary checkpoint layout (little-endian):
//!
//! ```text
//! "LRGN" | u32 version = 1 | u32 count
//! count × { u16 name_len | name | u8 rank | rank × u32 dim | u8 dtype | data }
//! rng blob (56 bytes) | u32 epoch
//! ```
//!
//! dtype 1 is f32, 2 is f64. The RNG blob is the ChaCha8 seed (32 bytes),
//! stream (u64) and word position (u128).

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 4] = b"LRGN";
pub const VERSION: u32 = 1;
pub const RNG_BLOB_LEN: usize = 56;

pub fn rng_to_blob(rng: &ChaCha8Rng) -> [u8; RNG_BLOB_LEN] {
    let mut out = [0u8; RNG_BLOB_LEN];
    out[..32].copy_from_slice(&rng.get_seed());
    out[32..40].copy_from_slice(&rng.get_stream().to_le_bytes());
    out[40..].copy_from_slice(&rng.get_word_pos().to_le_bytes());
    out
}

pub fn rng_from_blob(blob: &[u8; RNG_BLOB_LEN]) -> ChaCha8Rng {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::from_seed(blob[..32].try_into().unwrap());
    rng.set_stream(u64::from_le_bytes(blob[32..40].try_into().unwrap()));
    rng.set_word_pos(u128::from_le_bytes(blob[40..].try_into().unwrap()));
    rng
}

/// Decoded file contents. Tensor data is widened to f64, which is exact for
/// both stored dtypes.
#[derive(Clone, Debug, PartialEq)]
pub struct RawCheckpoint {
    pub dtype: u8,
    pub tensors: Vec<(String, Tensor<f64>)>,
    pub rng: [u8; RNG_BLOB_LEN],
    pub epoch: u32,
}

impl RawCheckpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor<f64>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode<T: Real>(
    tensors: &[(String, &Tensor<T>)],
    rng: &ChaCha8Rng,
    epoch: u32,
) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize || t.rank() > u8::MAX as usize {
            return Err(Error::Usage(format!("tensor `{name}` cannot be stored")));
        }
        buf.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        buf.extend_from_slice(nb);
        buf.push(t.rank() as u8);
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        buf.push(T::DTYPE_TAG);
        for &v in t.data() {
            v.write_le(&mut buf);
        }
    }
    buf.extend_from_slice(&rng_to_blob(rng));
    buf.extend_from_slice(&epoch.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format {
                offset: self.at,
                reason: format!("truncated while reading {what}"),
            })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

fn read_values<T: Real>(r: &mut Reader, n: usize, name: &str) -> Result<Vec<f64>> {
    let raw = r.take(
        n.checked_mul(T::BYTES).unwrap_or(usize::MAX),
        &format!("data of `{name}`"),
    )?;
    Ok(raw
        .chunks_exact(T::BYTES)
        .map(|c| T::read_le(c).to_f64_lossy())
        .collect())
}

pub fn decode(bytes: &[u8]) -> Result<RawCheckpoint> {
    let mut r = Reader { bytes, at: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: "bad magic, expected LRGN".into(),
        });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    let mut dtype = None;
    for _ in 0..count {
        let start = r.at;
        let len = r.u16("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format {
                offset: start + 2,
                reason: "tensor name is not UTF-8".into(),
            })?
            .to_string();
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let tag_at = r.at;
        let tag = r.u8("dtype")?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or(Error::Format {
                offset: tag_at,
                reason: format!("shape of `{name}` overflows"),
            })?;
        let data = match tag {
            1 => read_values::<f32>(&mut r, n, &name)?,
            2 => read_values::<f64>(&mut r, n, &name)?,
            _ => {
                return Err(Error::Format {
                    offset: tag_at,
                    reason: format!("unknown dtype tag {tag}"),
                })
            }
        };
        if *dtype.get_or_insert(tag) != tag {
            return Err(Error::Format {
                offset: tag_at,
                reason: "mixed dtypes in one checkpoint".into(),
            });
        }
        tensors.push((name, Tensor::new(shape, data)?));
    }
    let rng: [u8; RNG_BLOB_LEN] = r.take(RNG_BLOB_LEN, "rng state")?.try_into().unwrap();
    let epoch = r.u32("epoch")?;
    if r.at != bytes.len() {
        return Err(Error::Format {
            offset: r.at,
            reason: "trailing bytes after epoch".into(),
        });
    }
    Ok(RawCheckpoint {
        dtype: dtype.unwrap_or(1),
        tensors,
        rng,
        epoch,
    })
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    // Write beside the target and rename, so a crash never leaves a
    // half-written checkpoint under the final name.
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<RawCheckpoint> {
    decode(&std::fs::read(path)?)
}
