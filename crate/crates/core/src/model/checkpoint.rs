//! Binary checkpoints: config text plus every named tensor as raw
//! little-endian bytes, sealed with a CRC32 trailer.

use std::path::Path;

use candle_core::{DType, Tensor};

use super::{Model, ModelConfig, ParamGroup};
use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"HCKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint(model: &Model, step: u64, path: &Path) -> Result<()> {
    let bytes = to_bytes(model, step)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads a checkpoint and returns the model with its training step. When
/// `expected` is given, the stored config must match it exactly.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<(Model, u64)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, expected)
}

fn to_bytes(model: &Model, step: u64) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&step.to_le_bytes());
    let cfg = model.config().to_text();
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.push(dtype_code(model.dtype())?);
    let entries = model.params().entries();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u16).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.push(e.group.code());
        let dims = e.var.dims();
        out.push(dims.len() as u8);
        for &d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        let flat = e.var.as_tensor().flatten_all()?;
        match flat.dtype() {
            DType::F64 => flat
                .to_vec1::<f64>()?
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            _ => flat
                .to_vec1::<f32>()?
                .iter()
                .for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn dtype_code(dtype: DType) -> Result<u8> {
    match dtype {
        DType::F32 => Ok(0),
        DType::F64 => Ok(1),
        other => Err(Error::Contract(format!("unsupported checkpoint dtype {other:?}"))),
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Format("checkpoint string is not utf-8".into()))
    }
}

fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<(Model, u64)> {
    if bytes.len() < MAGIC.len() + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(trailer.try_into().unwrap());
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            expected: CHECKPOINT_VERSION,
            found: version,
        });
    }
    let step = r.u64()?;
    let n = r.u32()? as usize;
    let config = ModelConfig::from_text(&r.string(n)?)?;
    if let Some(exp) = expected {
        if exp != &config {
            return Err(Error::Config(
                "checkpoint config does not match the requested config".into(),
            ));
        }
    }
    let dtype = match r.u8()? {
        0 => DType::F32,
        1 => DType::F64,
        c => return Err(Error::Format(format!("unknown dtype code {c}"))),
    };
    let model = Model::with_dtype(config, 0, dtype)?;
    let count = r.u32()? as usize;
    let expected_count = model.params().entries().len();
    if count != expected_count {
        return Err(Error::CountMismatch {
            expected: expected_count,
            found: count,
        });
    }
    for _ in 0..count {
        let n = r.u16()? as usize;
        let name = r.string(n)?;
        let group = ParamGroup::from_code(r.u8()?)
            .ok_or_else(|| Error::Format(format!("bad group code for '{name}'")))?;
        let entry = model
            .params()
            .get(&name)
            .ok_or_else(|| Error::Format(format!("unknown parameter '{name}'")))?;
        if entry.group != group {
            return Err(Error::Format(format!("parameter '{name}' stored in group {group}")));
        }
        let ndim = r.u8()? as usize;
        let dims = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let elems: usize = dims.iter().product();
        let t = match dtype {
            DType::F64 => {
                let raw = r.take(elems * 8)?;
                let v: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, dims.as_slice(), model.params().device())?
            }
            _ => {
                let raw = r.take(elems * 4)?;
                let v: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect();
                Tensor::from_vec(v, dims.as_slice(), model.params().device())?
            }
        };
        model.params().assign(&name, &t)?;
    }
    if r.pos != body.len() {
        return Err(Error::Format("trailing bytes after last tensor".into()));
    }
    Ok((model, step))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let model = Model::new(ModelConfig::tiny(), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, 42, &path).unwrap();
        let (back, step) = load_checkpoint(&path, Some(model.config())).unwrap();
        assert_eq!(step, 42);
        for g in ParamGroup::ALL {
            assert_eq!(
                model.params().group_hash(g).unwrap(),
                back.params().group_hash(g).unwrap()
            );
        }
    }

    #[test]
    fn rejects_config_mismatch_and_corruption() {
        let model = Model::new(ModelConfig::tiny(), 1).unwrap();
        let mut bytes = to_bytes(&model, 0).unwrap();
        let mut other = ModelConfig::tiny();
        other.d_z = 8;
        assert!(matches!(from_bytes(&bytes, Some(&other)), Err(Error::Config(_))));
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xff;
        assert!(matches!(from_bytes(&bytes, None), Err(Error::Checksum { .. })));
    }
}
