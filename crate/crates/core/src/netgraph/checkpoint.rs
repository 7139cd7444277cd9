//! Single-file archive: magic line, JSON header, then named `f64` tensors.
//!
//! Layout (all integers little-endian `u64`):
//! `DSSIDE1\n`, header length, header JSON, tensor count, then per tensor
//! name length, UTF-8 name, four dimensions and the raw `f64` data.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::Model;
use super::spec::NetworkSpec;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DSSIDE1\n";

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    #[serde(default)]
    extra: serde_json::Value,
}

/// Network spec, free-form metadata and named tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub extra: serde_json::Value,
    pub tensors: BTreeMap<String, Tensor>,
}

fn running_names(bn: &str) -> (String, String) {
    (format!("{bn}.running_mean"), format!("{bn}.running_var"))
}

impl Checkpoint {
    pub fn from_model(model: &Model) -> Self {
        let p = model.params();
        let mut tensors = BTreeMap::new();
        for id in 0..p.len() {
            tensors.insert(p.name(id).to_string(), p.get(id).clone());
        }
        for (id, layer) in p.bn_layers().iter().enumerate() {
            let (m, v) = running_names(p.bn_name(id));
            let c = layer.running_mean.len();
            tensors.insert(m, Tensor::from_vec([c, 1, 1, 1], layer.running_mean.clone()));
            tensors.insert(v, Tensor::from_vec([c, 1, 1, 1], layer.running_var.clone()));
        }
        Self {
            spec: model.spec().clone(),
            extra: serde_json::Value::Null,
            tensors,
        }
    }

    /// Rebuilds the model; every parameter and buffer must be present.
    pub fn to_model(&self) -> Result<Model> {
        let mut model = Model::new(self.spec.clone())?;
        let p = model.params_mut();
        let take = |name: &str| {
            self.tensors
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Format(format!("checkpoint lacks tensor `{name}`")))
        };
        for id in 0..p.len() {
            let name = p.name(id).to_string();
            p.set_named(&name, take(&name)?)?;
        }
        for id in 0..p.bn_layers().len() {
            let (m, v) = running_names(p.bn_name(id));
            let (m, v) = (take(&m)?, take(&v)?);
            let layer = p.bn_mut(id);
            if m.len() != layer.running_mean.len() || v.len() != layer.running_var.len() {
                return Err(Error::Format("batch-norm buffer size mismatch".into()));
            }
            layer.running_mean = m.into_vec();
            layer.running_var = v.into_vec();
        }
        Ok(model)
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let io = |e| Error::io(path, e);
    let header = serde_json::to_vec(&Header {
        spec: ckpt.spec.clone(),
        extra: ckpt.extra.clone(),
    })
    .map_err(|e| Error::Format(e.to_string()))?;
    // write to a sibling file first so a crash never leaves a torn archive
    let tmp = path.with_extension("tmp");
    let mut out = BufWriter::new(File::create(&tmp).map_err(io)?);
    let mut put = |b: &[u8]| out.write_all(b);
    (|| -> std::io::Result<()> {
        put(CHECKPOINT_MAGIC)?;
        put(&(header.len() as u64).to_le_bytes())?;
        put(&header)?;
        put(&(ckpt.tensors.len() as u64).to_le_bytes())?;
        for (name, t) in &ckpt.tensors {
            put(&(name.len() as u64).to_le_bytes())?;
            put(name.as_bytes())?;
            for d in t.shape() {
                put(&(d as u64).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 8);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            put(&buf)?;
        }
        Ok(())
    })()
    .map_err(io)?;
    out.flush().map_err(io)?;
    drop(out);
    std::fs::rename(&tmp, path).map_err(io)
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

const MAX_HEADER: u64 = 1 << 26;

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let truncated = |e: std::io::Error| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format(format!("{}: truncated checkpoint", path.display())),
        _ => Error::io(path, e),
    };
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("{}: not a checkpoint (bad magic)", path.display())));
    }
    let hlen = read_u64(&mut r).map_err(truncated)?;
    if hlen > MAX_HEADER {
        return Err(Error::Format(format!("{}: header length {hlen} is implausible", path.display())));
    }
    let mut header = vec![0u8; hlen as usize];
    r.read_exact(&mut header).map_err(truncated)?;
    let header: Header = serde_json::from_slice(&header).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let count = read_u64(&mut r).map_err(truncated)?;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let nlen = read_u64(&mut r).map_err(truncated)?;
        if nlen > 4096 {
            return Err(Error::Format(format!("{}: tensor name too long", path.display())));
        }
        let mut name = vec![0u8; nlen as usize];
        r.read_exact(&mut name).map_err(truncated)?;
        let name = String::from_utf8(name).map_err(|_| Error::Format("tensor name is not UTF-8".into()))?;
        let mut shape = [0usize; 4];
        for d in &mut shape {
            *d = read_u64(&mut r).map_err(truncated)? as usize;
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= 1 << 32)
            .ok_or_else(|| Error::Format(format!("tensor `{name}` has implausible shape {shape:?}")))?;
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw).map_err(truncated)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.insert(name, Tensor::from_vec(shape, data));
    }
    Ok(Checkpoint {
        spec: header.spec,
        extra: header.extra,
        tensors,
    })
}
