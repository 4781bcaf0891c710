//! Binary checkpoints: magic, version, TOML metadata, named f64 tensors,
//! optional Adam moments. All numbers little-endian.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use irt_core::optim::Adam;
use irt_core::params::ParamStore;
use irt_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{IrtError, Result};

pub const MAGIC: &[u8; 8] = b"IRTCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Color,
    Seg,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub kind: Kind,
    pub step: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variant: Option<String>,
    pub classes: usize,
    pub scene_min: [f64; 3],
    pub scene_max: [f64; 3],
    pub config: TrainConfig,
}

/// Adam step counter and moments, aligned with the checkpoint's store.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimState {
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl From<&Adam> for OptimState {
    fn from(a: &Adam) -> Self {
        OptimState { step: a.step, m: a.m.clone(), v: a.v.clone() }
    }
}

impl OptimState {
    pub fn restore(&self, adam: &mut Adam) {
        adam.step = self.step;
        adam.m = self.m.clone();
        adam.v = self.v.clone();
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: Meta,
    pub store: ParamStore,
    pub optim: Option<OptimState>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        let meta = toml::to_string(&self.meta).expect("metadata serializes");
        put_u64(&mut out, meta.len() as u64);
        out.extend_from_slice(meta.as_bytes());
        put_u64(&mut out, self.store.len() as u64);
        for p in self.store.iter() {
            put_u32(&mut out, p.name.len() as u32);
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.frozen as u8);
            put_u32(&mut out, p.value.rank() as u32);
            for &d in p.value.shape() {
                put_u64(&mut out, d as u64);
            }
            put_f64s(&mut out, p.value.data());
        }
        match &self.optim {
            None => out.push(0),
            Some(o) => {
                out.push(1);
                put_u64(&mut out, o.step);
                put_u64(&mut out, o.m.len() as u64);
                for (m, v) in o.m.iter().zip(&o.v) {
                    put_u64(&mut out, m.len() as u64);
                    put_f64s(&mut out, m);
                    put_f64s(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Cursor { bytes, at: 0, path };
        if r.take(8)? != MAGIC {
            return Err(r.err("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(&format!("stale checkpoint version {version}, expected {VERSION}")));
        }
        let len = r.u64()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| r.err("metadata is not UTF-8"))?;
        let meta: Meta = toml::from_str(text).map_err(|e| r.err(&format!("metadata: {e}")))?;
        let mut store = ParamStore::new();
        for _ in 0..r.u64()? {
            let n = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(n)?).map_err(|_| r.err("tensor name is not UTF-8"))?.to_string();
            let frozen = r.take(1)?[0] != 0;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let data = r.f64s(shape.iter().product())?;
            let t = Tensor::new(shape, data).map_err(|e| r.err(&e.to_string()))?;
            store.insert(name, t);
            store.iter_mut().last().expect("just inserted").frozen = frozen;
        }
        let optim = match r.take(1)?[0] {
            0 => None,
            _ => {
                let step = r.u64()?;
                let count = r.u64()? as usize;
                if count != store.len() {
                    return Err(r.err(&format!("{count} optimizer slots for {} tensors", store.len())));
                }
                let (mut m, mut v) = (Vec::new(), Vec::new());
                for _ in 0..count {
                    let len = r.u64()? as usize;
                    m.push(r.f64s(len)?);
                    v.push(r.f64s(len)?);
                }
                Some(OptimState { step, m, v })
            }
        };
        if r.at != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        Ok(Checkpoint { meta, store, optim })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| IrtError::io(dir, e))?;
        }
        let tmp = path.with_extension("partial");
        let mut f = std::fs::File::create(&tmp).map_err(|e| IrtError::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| IrtError::io(&tmp, e))?;
        f.sync_all().map_err(|e| IrtError::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| IrtError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| IrtError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

/// `ckpt/step-######` under a stage directory.
pub fn step_path(stage_dir: &Path, step: u64) -> PathBuf {
    stage_dir.join("ckpt").join(format!("step-{step:06}"))
}

/// The highest-numbered periodic checkpoint, if any.
pub fn latest(stage_dir: &Path) -> Option<(u64, PathBuf)> {
    let entries = std::fs::read_dir(stage_dir.join("ckpt")).ok()?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let step = name.strip_prefix("step-")?.parse::<u64>().ok()?;
            Some((step, e.path()))
        })
        .max_by_key(|(s, _)| *s)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn err(&self, detail: &str) -> IrtError {
        IrtError::Checkpoint { path: self.path.into(), detail: detail.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.at < n {
            return Err(self.err("truncated"));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| self.err("size overflow"))?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
}
