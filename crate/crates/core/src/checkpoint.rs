//! `IMF1` checkpoint container.
//!
//! Layout (little-endian): magic `IMF1`, `u32` version, `u64` step, `u32`
//! config length + UTF-8 JSON, `u32` tensor count, then per tensor: `u32`
//! name length + name, `u8` dtype (0 = f64, 1 = f32), `u32` rank, `u64`
//! dims, row-major payload. Raw parameters are prefixed `param/`, EMA
//! weights `ema/`.

use std::io::Write;
use std::path::Path;

use imf_autodiff::{ParamStore, Tensor};

use crate::config::{Precision, RunConfig};
use crate::error::{LabError, Result};

pub const MAGIC: &[u8; 4] = b"IMF1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub params: ParamStore,
    pub ema: ParamStore,
}

fn err(msg: impl Into<String>) -> LabError {
    LabError::Checkpoint(msg.into())
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| err("truncated file"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

fn write_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor, prec: Precision) -> Result<()> {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(match prec {
        Precision::F64 => 0,
        Precision::F32 => 1,
    });
    put_u32(out, t.ndim() as u32);
    for &d in t.shape() {
        put_u64(out, d as u64);
    }
    for &v in t.data() {
        match prec {
            Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
            Precision::F32 => {
                let f = v as f32;
                if f as f64 != v && v.is_finite() {
                    return Err(err(format!("`{name}` holds a value not representable as f32")));
                }
                out.extend_from_slice(&f.to_le_bytes());
            }
        }
    }
    Ok(())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let prec = self.config.precision;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        put_u64(&mut out, self.step);
        let json = serde_json::to_string(&self.config).map_err(|e| err(e.to_string()))?;
        put_u32(&mut out, json.len() as u32);
        out.extend_from_slice(json.as_bytes());
        put_u32(&mut out, (self.params.len() + self.ema.len()) as u32);
        for (name, t) in self.params.iter() {
            write_tensor(&mut out, &format!("param/{name}"), t, prec)?;
        }
        for (name, t) in self.ema.iter() {
            write_tensor(&mut out, &format!("ema/{name}"), t, prec)?;
        }
        Ok(out)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(err("bad magic (not an IMF1 checkpoint)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(err(format!("unsupported checkpoint version {version}")));
        }
        let step = r.u64()?;
        let len = r.u32()? as usize;
        let json = std::str::from_utf8(r.take(len)?).map_err(|_| err("config is not UTF-8"))?;
        let config: RunConfig = serde_json::from_str(json).map_err(|e| err(format!("embedded config: {e}")))?;
        let count = r.u32()?;
        let mut params = ParamStore::new();
        let mut ema = ParamStore::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?).map_err(|_| err("tensor name is not UTF-8"))?.to_string();
            let dtype = r.u8()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| err("shape overflow"))?;
            let data: Vec<f64> = match dtype {
                0 => r.take(n.checked_mul(8).ok_or_else(|| err("size overflow"))?)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                1 => r.take(n.checked_mul(4).ok_or_else(|| err("size overflow"))?)?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                    .collect(),
                other => return Err(err(format!("unknown dtype tag {other}"))),
            };
            let t = Tensor::from_vec(shape, data);
            let (store, key) = if let Some(k) = name.strip_prefix("param/") {
                (&mut params, k)
            } else if let Some(k) = name.strip_prefix("ema/") {
                (&mut ema, k)
            } else {
                return Err(err(format!("unexpected tensor `{name}`")));
            };
            if store.contains(key) {
                return Err(err(format!("duplicate tensor `{name}`")));
            }
            store.insert(key, t);
        }
        if r.pos != buf.len() {
            return Err(err("trailing bytes"));
        }
        Ok(Checkpoint { config, step, params, ema })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Write to a sibling temp file, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| err(format!("bad path {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::init_params;

    fn sample_config() -> RunConfig {
        RunConfig::from_json(
            r#"{"schema_version": 1,
                "dataset": {"kind": {"type": "gaussian_mixture", "k": 8, "radius": 4.0, "comp_sigma": 0.3}, "dim": 2, "labeled": true},
                "net": {"arch": "mlp", "depth": 2, "width": 8, "data_dim": 2, "num_classes": 8, "embed_dim": 4, "omega_conditioning": true},
                "objective": "imf_boundary", "guidance": {}, "steps": 3, "batch_size": 4, "seed": 11}"#,
        )
        .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let config = sample_config();
        let params = init_params(&config.net, 1).unwrap();
        let mut ema = init_params(&config.net, 2).unwrap();
        ema.get_mut("lift.b").unwrap().data_mut()[0] = -0.0;
        let ck = Checkpoint { config, step: 42, params, ema };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert!(back.ema.get("lift.b").unwrap().data()[0].is_sign_negative());
    }

    #[test]
    fn f32_payloads_round_trip() {
        let mut config = sample_config();
        config.precision = Precision::F32;
        let mut params = init_params(&config.net, 1).unwrap();
        for (_, t) in params.iter_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = Precision::F32.round(*v));
        }
        let ck = Checkpoint { config, step: 1, params: params.clone(), ema: params };
        let back = Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap();
        assert_eq!(back, ck);
    }

    #[test]
    fn rejects_bad_headers() {
        let ck = Checkpoint { config: sample_config(), step: 0, params: ParamStore::new(), ema: ParamStore::new() };
        let mut bytes = ck.to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(LabError::Checkpoint(m)) if m.contains("version")));
        bytes[0] = b'X';
        assert!(Checkpoint::from_bytes(&bytes).is_err());
        let good = ck.to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&good[..good.len() - 1]).is_err());
    }

    #[test]
    fn atomic_write_replaces() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), b"two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
