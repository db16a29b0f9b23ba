//! Self-describing binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "MVSRCKPT" | version u32 | header_len u64 | header (JSON)
//! tensor_count u64 | tensors...
//! tensor: name_len u32 | name | dtype u8 | ndim u32 | dims u64 x ndim | values
//! ```
//!
//! Tensor names are prefixed with their store: `online/`, `average/`,
//! `adam_m/`, `adam_v/`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mvsr_tensor::{DType, Real, Tensor};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::trainer::TrainConfig;

pub const MAGIC: &[u8; 8] = b"MVSRCKPT";
pub const VERSION: u32 = 1;
const FILE_PREFIX: &str = "checkpoint-";
const FILE_SUFFIX: &str = ".ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    /// Element type of the stored tensors (`f32` or `f64`).
    pub dtype: String,
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub step: u64,
    pub rng: Option<ChaCha8Rng>,
    /// Corpus tokens in id order, without the reserved tokens.
    pub vocab: Vec<String>,
}

#[derive(Clone, Debug)]
pub struct Checkpoint<T> {
    pub header: CheckpointHeader,
    pub online: ParamStore<T>,
    pub average: ParamStore<T>,
    pub adam: Option<Adam<T>>,
}

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 0,
        DType::F64 => 1,
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err("truncated file"));
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

    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| self.err("length overflows usize"))
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Checkpoint { path: self.path.to_path_buf(), message: message.into() }
    }
}

fn put_tensor<T: Real>(out: &mut Vec<u8>, name: &str, t: &Tensor<T>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(dtype_code(T::DTYPE));
    out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &x in t.data() {
        x.write_le(out);
    }
}

fn read_tensor<T: Real>(r: &mut Reader<'_>) -> Result<(String, Tensor<T>)> {
    let name_len = r.u32()? as usize;
    let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| r.err("tensor name is not UTF-8"))?.to_owned();
    let dtype = match r.take(1)?[0] {
        0 => DType::F32,
        1 => DType::F64,
        c => return Err(r.err(format!("unknown dtype code {c} for {name}"))),
    };
    let ndim = r.u32()? as usize;
    let shape = (0..ndim).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let width = dtype.size_in_bytes();
    let raw = r.take(n.checked_mul(width).ok_or_else(|| r.err("tensor too large"))?)?;
    let data = raw
        .chunks_exact(width)
        .map(|c| match dtype {
            DType::F32 => T::from_f64(f32::read_le(c) as f64),
            DType::F64 => T::from_f64(f64::read_le(c)),
        })
        .collect();
    Ok((name, Tensor::new(shape, data)))
}

impl<T: Real> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = self.header.clone();
        header.version = VERSION;
        header.dtype = T::DTYPE.name().to_owned();
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut sections: Vec<(&str, &ParamStore<T>)> = vec![("online", &self.online), ("average", &self.average)];
        if let Some(adam) = &self.adam {
            sections.push(("adam_m", &adam.m));
            sections.push(("adam_v", &adam.v));
        }
        let count: usize = sections.iter().map(|(_, s)| s.len()).sum();

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(count as u64).to_le_bytes());
        for (prefix, store) in sections {
            for (name, t) in store.iter() {
                put_tensor(&mut out, &format!("{prefix}/{name}"), t);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(r.err("not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        let header_len = r.usize()?;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(header_len)?).map_err(|e| r.err(format!("bad header: {e}")))?;
        let count = r.usize()?;
        let mut online = ParamStore::new();
        let mut average = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for _ in 0..count {
            let (name, t) = read_tensor::<T>(&mut r)?;
            let (prefix, key) = name.split_once('/').ok_or_else(|| r.err(format!("unqualified tensor {name}")))?;
            let store = match prefix {
                "online" => &mut online,
                "average" => &mut average,
                "adam_m" => &mut m,
                "adam_v" => &mut v,
                _ => return Err(r.err(format!("unknown section in {name}"))),
            };
            store.insert(key, t);
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes"));
        }
        online.check_same_layout(&average)?;
        let adam = if m.is_empty() && v.is_empty() {
            None
        } else {
            online.check_same_layout(&m)?;
            online.check_same_layout(&v)?;
            Some(Adam { m, v })
        };
        Ok(Checkpoint { header, online, average, adam })
    }

    /// Writes through a temporary file and renames, so a crash never leaves
    /// a partial checkpoint under the final name.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

pub fn checkpoint_file_name(step: u64) -> String {
    format!("{FILE_PREFIX}{step:08}{FILE_SUFFIX}")
}

/// Checkpoints in `dir`, oldest step first.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(u64, PathBuf)>> {
    let mut found = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if let Some(step) = name.strip_prefix(FILE_PREFIX).and_then(|s| s.strip_suffix(FILE_SUFFIX)) {
            if let Ok(step) = step.parse() {
                found.push((step, path));
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Deletes all but the newest `keep` checkpoints in `dir`.
pub fn prune_checkpoints(dir: &Path, keep: usize) -> Result<()> {
    let all = list_checkpoints(dir)?;
    let excess = all.len().saturating_sub(keep);
    for (_, path) in &all[..excess] {
        fs::remove_file(path).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Element-wise arithmetic mean of the online stores of `paths`. Returns the
/// header of the last checkpoint alongside the averaged weights.
pub fn average_checkpoints<T: Real>(paths: &[PathBuf]) -> Result<(CheckpointHeader, ParamStore<T>)> {
    let Some(first) = paths.first() else {
        return Err(Error::Invalid("no checkpoints to average".into()));
    };
    let base = Checkpoint::<f64>::load(first)?;
    let mut sum = base.online;
    let mut header = base.header;
    for path in &paths[1..] {
        let ck = Checkpoint::<f64>::load(path)?;
        if ck.header.model != header.model {
            return Err(Error::Checkpoint {
                path: path.clone(),
                message: format!("model config differs from {}", first.display()),
            });
        }
        sum.check_same_layout(&ck.online)?;
        for (name, t) in sum.iter_mut() {
            let other = ck.online.get(name).expect("layout checked").data();
            t.data_mut().iter_mut().zip(other).for_each(|(a, &b)| *a += b);
        }
        header = ck.header;
    }
    let k = paths.len() as f64;
    for (_, t) in sum.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x /= k);
    }
    Ok((header, sum.cast()))
}
