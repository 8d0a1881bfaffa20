//! Binary checkpoint container.
//!
//! Layout (little endian):
//!
//! ```text
//! magic    8 bytes  "PSAMCKPT"
//! version  u32
//! config   u64 length + JSON bytes
//! count    u32
//! tensor*  u32 name length, name bytes, u8 trainable,
//!          u32 rank, u64 dims[rank], f64 data[prod(dims)]
//! ```

use std::fs;
use std::path::Path;

use super::params::{ModelConfig, ModelParams, Param};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"PSAMCKPT";
pub const VERSION: u32 = 1;

pub fn to_bytes(params: &ModelParams) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let cfg = serde_json::to_vec(params.config()).expect("config serializes");
    out.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    out.extend_from_slice(&cfg);
    out.extend_from_slice(&(params.params().len() as u32).to_le_bytes());
    for p in params.params() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(u8::from(p.trainable));
        let shape = p.tensor.shape();
        out.extend_from_slice(&(shape.len() as u32).to_le_bytes());
        for &d in shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> std::result::Result<u32, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(buf: &[u8]) -> std::result::Result<ModelParams, String> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err("not a checkpoint (bad magic)".into());
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let cfg_len = r.u64()? as usize;
    let config: ModelConfig =
        serde_json::from_slice(r.take(cfg_len)?).map_err(|e| format!("bad config record: {e}"))?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| "tensor name is not utf-8")?;
        let trainable = match r.take(1)?[0] {
            0 => false,
            1 => true,
            b => return Err(format!("tensor {name}: bad trainable flag {b}")),
        };
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<std::result::Result<Vec<_>, _>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("tensor too large")?;
        let bytes = r.take(numel.checked_mul(8).ok_or("tensor too large")?)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let tensor = Tensor::new(shape, data).map_err(|e| e.to_string())?;
        params.push(Param { name, tensor, trainable });
    }
    if r.pos != buf.len() {
        return Err(format!("{} trailing bytes", buf.len() - r.pos));
    }
    // Structural check against a fresh network of the same config.
    let reference = ModelParams::init(config.clone()).map_err(|e| e.to_string())?;
    if reference.params().len() != params.len() {
        return Err(format!("expected {} tensors, found {}", reference.params().len(), params.len()));
    }
    for (want, got) in reference.params().iter().zip(&params) {
        if want.name != got.name || want.tensor.shape() != got.tensor.shape() {
            return Err(format!("tensor {} {:?} does not match architecture", got.name, got.tensor.shape()));
        }
    }
    Ok(ModelParams::from_parts(config, params))
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(params)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&buf).map_err(|m| Error::load(path, m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut p = ModelParams::init(ModelConfig::tiny()).unwrap();
        p.tensor_mut(0).data_mut()[0] = f64::from_bits(0x3ff0_0000_0000_0001);
        p.config_mut().freeze_decoder = true;
        let back = from_bytes(&to_bytes(&p)).unwrap();
        assert_eq!(back, p);
        assert_eq!(to_bytes(&back), to_bytes(&p));
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let p = ModelParams::init(ModelConfig::tiny()).unwrap();
        let bytes = to_bytes(&p);
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(from_bytes(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let p = ModelParams::init(ModelConfig::tiny()).unwrap();
        save(&p, &path).unwrap();
        assert_eq!(load(&path).unwrap(), p);
        assert!(load(&dir.path().join("missing.ckpt")).is_err());
    }
}
