//! Versioned binary checkpoints.
//!
//! Layout: `b"GSCK"`, little-endian `u32` version, `u64` header length, a
//! JSON header (configs, parameter names and shapes), then every float as
//! raw little-endian `f64` in header order: parameters, BN running mean and
//! variance, sphere center, sphere radius. Floats never pass through text,
//! so a load reproduces the saved model bit for bit.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hypersphere::Hypersphere;
use crate::nn::{ParamGroup, Tensor, TravNet};
use crate::trainer::{TrainConfig, TrainedModel};

pub const MAGIC: &[u8; 4] = b"GSCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    group: ParamGroup,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct BnEntry {
    name: String,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    best_epoch: usize,
    params: Vec<ParamEntry>,
    bn: Vec<BnEntry>,
    sphere_dim: usize,
    sphere_momentum: f64,
    sphere_period: usize,
}

pub fn to_bytes(model: &TrainedModel) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config.clone(),
        best_epoch: model.best_epoch,
        params: model
            .net
            .params
            .iter()
            .map(|(_, p)| ParamEntry { name: p.name.clone(), group: p.group, shape: p.value.shape.clone() })
            .collect(),
        bn: model.net.bn.iter().map(|b| BnEntry { name: b.name.clone(), len: b.mean.len() }).collect(),
        sphere_dim: model.sphere.dim(),
        sphere_momentum: model.sphere.momentum,
        sphere_period: model.sphere.update_period,
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Numeric(format!("checkpoint header: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.write_u32::<LittleEndian>(VERSION).expect("vec write");
    out.write_u64::<LittleEndian>(json.len() as u64).expect("vec write");
    out.extend_from_slice(&json);
    let mut put = |xs: &[f64]| xs.iter().for_each(|x| out.write_f64::<LittleEndian>(*x).expect("vec write"));
    for (_, p) in model.net.params.iter() {
        put(&p.value.data);
    }
    for b in &model.net.bn {
        put(&b.mean);
        put(&b.var);
    }
    put(&model.sphere.center);
    put(&[model.sphere.radius, model.best_metric]);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<TrainedModel> {
    let bad = |m: &str| Error::format(path, m);
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated checkpoint"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(|_| bad("truncated checkpoint"))?;
    if version != VERSION {
        return Err(Error::VersionMismatch { found: version, expected: VERSION });
    }
    let len = r.read_u64::<LittleEndian>().map_err(|_| bad("truncated checkpoint"))? as usize;
    let start = r.position() as usize;
    let json = bytes.get(start..start + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| Error::format(path, format!("checkpoint header: {e}")))?;
    r.set_position((start + len) as u64);
    let mut take = |n: usize| -> Result<Vec<f64>> {
        (0..n).map(|_| r.read_f64::<LittleEndian>().map_err(|_| bad("truncated tensor data"))).collect()
    };

    let mut net = TravNet::new(header.config.network.clone())?;
    if net.params.len() != header.params.len() || net.bn.len() != header.bn.len() {
        return Err(bad("parameter layout does not match the network config"));
    }
    for (entry, id) in header.params.iter().zip(net.params.ids().collect::<Vec<_>>()) {
        let p = net.params.get_mut(id);
        if p.name != entry.name || p.value.shape != entry.shape || p.group != entry.group {
            return Err(Error::format(path, format!("unexpected parameter `{}`", entry.name)));
        }
        let n = p.value.len();
        p.value = Tensor::new(entry.shape.clone(), take(n)?)?;
    }
    for (entry, b) in header.bn.iter().zip(net.bn.iter_mut()) {
        if b.name != entry.name || b.mean.len() != entry.len {
            return Err(Error::format(path, format!("unexpected batch-norm slot `{}`", entry.name)));
        }
        b.mean = take(entry.len)?;
        b.var = take(entry.len)?;
    }
    let center = take(header.sphere_dim)?;
    let tail = take(2)?;
    if r.position() as usize != bytes.len() {
        return Err(bad("trailing bytes after checkpoint data"));
    }
    let sphere = Hypersphere::new(center, tail[0], header.sphere_momentum, header.sphere_period)?;
    Ok(TrainedModel { net, sphere, config: header.config, best_epoch: header.best_epoch, best_metric: tail[1] })
}

pub fn save(model: &TrainedModel, path: &Path) -> Result<()> {
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<TrainedModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, path)
}
