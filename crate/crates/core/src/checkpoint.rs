//! Binary parameter checkpoints.
//!
//! Layout: magic `EQOC`, `u32` version, `u32` entry count, then per entry a
//! `u32`-length-prefixed UTF-8 name, `u32` rank, `rank` `u32` dims and the
//! little-endian `f32` data. All integers are little-endian. The radius
//! normalizer travels as the rank-1 entry `meta.radius_scale`; the model
//! configuration lives in a JSON file next to the checkpoint.

use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::{Architecture, ModelConfig, ModelParams};
use crate::params::ParamStore;

pub const MAGIC: &[u8; 4] = b"EQOC";
pub const VERSION: u32 = 1;
pub const RADIUS_ENTRY: &str = "meta.radius_scale";

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.json";

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_entry(out: &mut Vec<u8>, name: &str, dims: &[usize], data: &[f32]) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    put_u32(out, dims.len() as u32);
    for &d in dims {
        put_u32(out, d as u32);
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode(params: &ModelParams) -> Vec<u8> {
    let store = &params.store;
    let mut out = Vec::with_capacity(16 + 4 * store.num_scalars() + 64 * store.len());
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    put_u32(&mut out, store.len() as u32 + 1);
    for (name, t) in store.iter() {
        put_entry(&mut out, name, &[t.rows, t.cols], &t.data);
    }
    put_entry(&mut out, RADIUS_ENTRY, &[1], &[params.radius_scale as f32]);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Entries in file order as `(name, dims, data)`.
pub fn decode_entries(bytes: &[u8]) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Format("entry name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        if rank > 8 {
            return Err(Error::Format(format!("entry {name} has rank {rank}")));
        }
        let dims: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("entry {name} is too large")))?;
        let raw = r.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format(format!("entry {name} is too large")))?,
        )?;
        let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        out.push((name, dims, data));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last entry",
            bytes.len() - r.pos
        )));
    }
    Ok(out)
}

/// Rebuild parameters for `config`, checking names and shapes.
pub fn decode(bytes: &[u8], config: &ModelConfig) -> Result<ModelParams> {
    let mut store = ParamStore::new();
    let mut radius_scale = None;
    for (name, dims, data) in decode_entries(bytes)? {
        if name == RADIUS_ENTRY {
            if data.len() != 1 {
                return Err(Error::Format(format!("{RADIUS_ENTRY} must hold one value")));
            }
            radius_scale = Some(data[0] as f64);
            continue;
        }
        let (rows, cols) = match dims[..] {
            [n] => (1, n),
            [r, c] => (r, c),
            _ => return Err(Error::Format(format!("entry {name} has rank {}", dims.len()))),
        };
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Format(format!("entry {name} holds non-finite values")));
        }
        store
            .add(name, Tensor::from_vec(rows, cols, data))
            .map_err(|e| Error::Format(e.to_string()))?;
    }
    let radius_scale = radius_scale.ok_or_else(|| Error::Format(format!("missing {RADIUS_ENTRY}")))?;
    Architecture::lookup(config, &store)?;
    Ok(ModelParams {
        config: config.clone(),
        store,
        radius_scale,
    })
}

pub fn save(params: &ModelParams, checkpoint: &Path, config: &Path) -> Result<()> {
    write_atomic(checkpoint, &encode(params))?;
    write_atomic(config, serde_json::to_string_pretty(&params.config)?.as_bytes())
}

pub fn load(checkpoint: &Path, config: &Path) -> Result<ModelParams> {
    let cfg: ModelConfig = serde_json::from_str(&std::fs::read_to_string(config)?)?;
    decode(&std::fs::read(checkpoint)?, &cfg)
}

/// `checkpoint.bin` and `config.json` inside `dir`.
pub fn save_dir(params: &ModelParams, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    save(params, &dir.join(CHECKPOINT_FILE), &dir.join(CONFIG_FILE))
}

/// Loads `checkpoint.bin`, with `config.json` taken from the same directory.
pub fn load_file(checkpoint: &Path) -> Result<ModelParams> {
    let dir = checkpoint.parent().unwrap_or(Path::new("."));
    load(checkpoint, &dir.join(CONFIG_FILE))
}

pub fn load_dir(dir: &Path) -> Result<ModelParams> {
    load(&dir.join(CHECKPOINT_FILE), &dir.join(CONFIG_FILE))
}

/// Write to a sibling temporary file and rename, so readers never see a
/// partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;

    fn tiny() -> ModelConfig {
        ModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            heads: 1,
            mult: 2,
            dec_out_scalars: 2,
            head_hidden: 4,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let mut p = init_params(&tiny(), 3).unwrap();
        p.radius_scale = 0.125;
        let dir = tempfile::tempdir().unwrap();
        save_dir(&p, dir.path()).unwrap();
        assert_eq!(load_dir(dir.path()).unwrap(), p);
        assert_eq!(load_file(&dir.path().join(CHECKPOINT_FILE)).unwrap(), p);
    }

    #[test]
    fn header_layout() {
        let p = init_params(&tiny(), 3).unwrap();
        let b = encode(&p);
        assert_eq!(&b[..4], b"EQOC");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), VERSION);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()) as usize, p.store.len() + 1);
        let (name, _) = p.store.iter().next().unwrap();
        let len = u32::from_le_bytes(b[12..16].try_into().unwrap()) as usize;
        assert_eq!(&b[16..16 + len], name.as_bytes());
        assert_eq!(u32::from_le_bytes(b[16 + len..20 + len].try_into().unwrap()), 2);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let p = init_params(&tiny(), 3).unwrap();
        let b = encode(&p);
        assert!(matches!(decode(&b[..b.len() - 1], &tiny()), Err(Error::Format(_))));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(decode(&bad, &tiny()).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(decode(&extra, &tiny()).is_err());
    }

    #[test]
    fn config_mismatch_is_a_format_error() {
        let p = init_params(&tiny(), 3).unwrap();
        let other = ModelConfig { mult: 4, ..tiny() };
        assert!(matches!(decode(&encode(&p), &other), Err(Error::Format(_))));
    }
}
