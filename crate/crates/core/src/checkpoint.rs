//! Checkpoint container.
//!
//! ```text
//! "MATRCKPT"            8 bytes
//! u32 format version    (CHECKPOINT_VERSION)
//! u32 reserved
//! u64 optimizer step
//! u32 n, n bytes        JSON metadata (phase, epoch, model config)
//! u32 entry count
//! per entry:
//!   u32 n, n bytes      name
//!   u32 ndim, ndim x u64 shape
//!   prod(shape) x f64   payload
//! ```
//!
//! All integers and floats are little endian. Parameters are stored as
//! `param/<name>`, AdamW moments as `adam.m/<name>` and `adam.v/<name>`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, AdamWConfig, Array, ParamStore};
use crate::error::{MatrError, Result};
use crate::model::{Matr, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MATRCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Pretrain,
    Train,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub phase: Phase,
    /// Completed epochs in this phase.
    pub epoch: usize,
    pub model: ModelConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub step: u64,
    pub params: ParamStore,
    /// First and second moments aligned with `params`, if saved.
    pub moments: Option<(Vec<Array>, Vec<Array>)>,
}

impl Checkpoint {
    pub fn capture(model: &Matr, optimizer: Option<&AdamW>, phase: Phase, epoch: usize) -> Self {
        Checkpoint {
            meta: CheckpointMeta {
                format_version: CHECKPOINT_VERSION,
                phase,
                epoch,
                model: model.config().clone(),
            },
            step: optimizer.map_or(0, AdamW::step_count),
            params: model.params().clone(),
            moments: optimizer.map(|o| {
                let (m, v) = o.moments();
                (m.to_vec(), v.to_vec())
            }),
        }
    }

    /// Fails unless the stored model config equals `expected`.
    pub fn check_config(&self, expected: &ModelConfig) -> Result<()> {
        if &self.meta.model != expected {
            return Err(MatrError::Version(format!(
                "checkpoint model config {:?} differs from run config {:?}",
                self.meta.model, expected
            )));
        }
        Ok(())
    }

    /// Rebuilds the model with the stored weights.
    pub fn model(&self) -> Result<Matr> {
        let mut m = Matr::new(self.meta.model.clone(), 0)?;
        m.load_params(&self.params)?;
        Ok(m)
    }

    /// Rebuilds the optimizer state, continuing the step counter.
    pub fn optimizer(&self, config: AdamWConfig) -> Result<AdamW> {
        let mut opt = AdamW::new(config, &self.params);
        if let Some((m, v)) = &self.moments {
            if m.len() != self.params.len() || v.len() != self.params.len() {
                return Err(MatrError::Version("optimizer moments do not match parameters".into()));
            }
            opt.first = m.clone();
            opt.second = v.clone();
        }
        opt.step = self.step;
        Ok(opt)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        b.extend_from_slice(CHECKPOINT_MAGIC);
        b.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        b.extend_from_slice(&0u32.to_le_bytes());
        b.extend_from_slice(&self.step.to_le_bytes());
        let meta = serde_json::to_vec(&self.meta)?;
        put_bytes(&mut b, &meta);
        let mut entries: Vec<(String, &Array)> = self
            .params
            .iter()
            .map(|(n, a)| (format!("param/{n}"), a))
            .collect();
        if let Some((m, v)) = &self.moments {
            for ((name, _), (mm, vv)) in self.params.iter().zip(m.iter().zip(v)) {
                entries.push((format!("adam.m/{name}"), mm));
                entries.push((format!("adam.v/{name}"), vv));
            }
        }
        b.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, a) in entries {
            put_bytes(&mut b, name.as_bytes());
            b.extend_from_slice(&(a.shape().len() as u32).to_le_bytes());
            for d in a.shape() {
                b.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in a.data() {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(b)
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, origin };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(MatrError::format(origin, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(MatrError::Version(format!(
                "{}: format version {version}, expected {CHECKPOINT_VERSION}",
                origin.display()
            )));
        }
        r.u32()?;
        let step = r.u64()?;
        let meta_len = r.u32()? as usize;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| MatrError::format(origin, format!("metadata: {e}")))?;
        if meta.format_version != CHECKPOINT_VERSION {
            return Err(MatrError::Version(format!(
                "{}: metadata version {}",
                origin.display(),
                meta.format_version
            )));
        }
        let count = r.u32()? as usize;
        let mut params = ParamStore::new();
        let mut first = Vec::new();
        let mut second = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| MatrError::format(origin, "entry name is not UTF-8"))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let raw = r.take(8 * n)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let arr = Array::new(shape, data).map_err(|e| MatrError::format(origin, format!("{name}: {e}")))?;
            if let Some(p) = name.strip_prefix("param/") {
                params.insert(p, arr)?;
            } else if name.starts_with("adam.m/") {
                first.push(arr);
            } else if name.starts_with("adam.v/") {
                second.push(arr);
            } else {
                return Err(MatrError::format(origin, format!("unknown entry `{name}`")));
            }
        }
        if r.pos != bytes.len() {
            return Err(MatrError::format(origin, "trailing bytes after last entry"));
        }
        let moments = (!first.is_empty()).then_some((first, second));
        Ok(Checkpoint { meta, step, params, moments })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| MatrError::io(dir, e))?;
        }
        // write-then-rename keeps the previous file intact on failure
        let tmp = path.with_extension("ckpt.tmp");
        fs::write(&tmp, self.to_bytes()?).map_err(|e| MatrError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| MatrError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| MatrError::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn put_bytes(b: &mut Vec<u8>, data: &[u8]) {
    b.extend_from_slice(&(data.len() as u32).to_le_bytes());
    b.extend_from_slice(data);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    origin: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(MatrError::format(
                self.origin,
                format!("truncated at byte {} (wanted {n} more)", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
