//! Binary checkpoints (little-endian):
//!
//! ```text
//! "MSFN" u32 version, u32 config_len, config JSON,
//! u32 count, count × { u32 name_len, name, u8 dtype, u32 rank, u32 extents[rank], values }
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{MsfinConfig, MsfinParams};
use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MSFN";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint<F: Real>(
    path: impl AsRef<Path>,
    cfg: &MsfinConfig,
    params: &MsfinParams<Tensor<F>>,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(cfg)?;
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    let mut count = 0u32;
    params.visit(&mut |_, _| count += 1);
    out.extend_from_slice(&count.to_le_bytes());
    params.visit(&mut |name, t| {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(F::DTYPE.tag());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            v.write_le(&mut out);
        }
    });
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    f.flush()?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::CorruptHeader(format!("checkpoint truncated at byte {}", self.bytes.len())))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::CorruptHeader("tensor name is not utf-8".into()))
    }
}

fn decode_values<F: Real>(dtype: DType, raw: &[u8]) -> Vec<F> {
    match dtype {
        DType::F32 => raw.chunks_exact(4).map(|c| F::c(f32::read_le(c) as f64)).collect(),
        DType::F64 => raw.chunks_exact(8).map(|c| F::c(f64::read_le(c))).collect(),
    }
}

type Parsed<F> = (MsfinConfig, BTreeMap<String, Tensor<F>>);

fn parse<F: Real>(path: &Path) -> Result<Parsed<F>> {
    let bytes = fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if bytes.len() < 4 || bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: CHECKPOINT_MAGIC,
        });
    }
    r.take(4)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let n = r.u32()? as usize;
    let cfg: MsfinConfig =
        serde_json::from_slice(r.take(n)?).map_err(|e| Error::CorruptHeader(format!("checkpoint config: {e}")))?;
    let count = r.u32()?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let name = r.string()?;
        let tag = r.take(1)?[0];
        let dtype =
            DType::from_tag(tag).ok_or_else(|| Error::CorruptHeader(format!("tensor `{name}` has dtype tag {tag}")))?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &e| a.checked_mul(e));
        let bytes_needed = numel
            .and_then(|n| n.checked_mul(dtype.size()))
            .ok_or_else(|| Error::CorruptHeader(format!("tensor `{name}` shape {shape:?} overflows")))?;
        let raw = r.take(bytes_needed)?;
        let t = Tensor::new(shape, decode_values(dtype, raw))
            .map_err(|e| Error::CorruptHeader(format!("tensor `{name}`: {e}")))?;
        tensors.insert(name, t);
    }
    if r.pos != bytes.len() {
        return Err(Error::CorruptHeader(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok((cfg, tensors))
}

fn fill<F: Real>(cfg: &MsfinConfig, mut tensors: BTreeMap<String, Tensor<F>>) -> Result<MsfinParams<Tensor<F>>> {
    let mut params = MsfinParams::<Tensor<F>>::init(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut err = None;
    params.visit_mut(&mut |name, slot| {
        if err.is_some() {
            return;
        }
        match tensors.remove(name) {
            Some(t) if t.shape() == slot.shape() => *slot = t,
            found => {
                err = Some(Error::TensorMismatch {
                    name: name.to_string(),
                    expected: slot.shape().to_vec(),
                    found: found.map(|t| t.shape().to_vec()).unwrap_or_default(),
                })
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if let Some((name, t)) = tensors.into_iter().next() {
        return Err(Error::TensorMismatch {
            name,
            expected: Vec::new(),
            found: t.shape().to_vec(),
        });
    }
    Ok(params)
}

/// Loads a checkpoint into the shapes implied by `cfg`.
pub fn load_checkpoint<F: Real>(path: impl AsRef<Path>, cfg: &MsfinConfig) -> Result<MsfinParams<Tensor<F>>> {
    let (_, tensors) = parse(path.as_ref())?;
    fill(cfg, tensors)
}

/// Loads a checkpoint with the configuration stored in it.
pub fn read_checkpoint<F: Real>(path: impl AsRef<Path>) -> Result<(MsfinConfig, MsfinParams<Tensor<F>>)> {
    let (cfg, tensors) = parse(path.as_ref())?;
    let params = fill(&cfg, tensors)?;
    Ok((cfg, params))
}
