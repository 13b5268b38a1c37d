//! Checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header, then every tensor listed in the header as little-endian `f64` in
//! header order. The best-validation weights are always present; the
//! current weights and RMSProp accumulators are stored too when the model
//! can be resumed.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{Network, NetworkSpec, Tensor};
use super::train::{EpochLog, TrainConfig, TrainState, TrainedModel};
use crate::dataset::write_f64s;
use crate::error::{Error, Result};
use crate::spatial::ModelFamily;

const MAGIC: &[u8; 8] = b"MSENCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct ResumeInfo {
    lr: f64,
    epoch: usize,
    best_val: Option<f64>,
    since_best: usize,
    since_lr_change: usize,
    stopped: bool,
}

#[derive(Serialize, Deserialize)]
struct Header {
    spec: NetworkSpec,
    config: TrainConfig,
    family: ModelFamily,
    manifest_hash: Option<String>,
    initial_val_es: Option<f64>,
    log: Vec<EpochLog>,
    resume: Option<ResumeInfo>,
    tensors: Vec<TensorEntry>,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub fn save(model: &TrainedModel, path: &Path) -> Result<()> {
    let mut groups: Vec<(&str, Vec<(&str, &[usize], &[f64])>)> = vec![(
        "best",
        model.network.params.iter().map(|t| (t.name.as_str(), t.shape.as_slice(), t.data.as_slice())).collect(),
    )];
    if let Some(s) = &model.state {
        groups.push((
            "current",
            s.net.params.iter().map(|t| (t.name.as_str(), t.shape.as_slice(), t.data.as_slice())).collect(),
        ));
        groups.push((
            "rms",
            s.net.params.iter().zip(&s.rms).map(|(t, v)| (t.name.as_str(), t.shape.as_slice(), v.as_slice())).collect(),
        ));
    }
    let header = Header {
        spec: model.network.spec.clone(),
        config: model.config.clone(),
        family: model.family,
        manifest_hash: model.manifest_hash.clone(),
        initial_val_es: finite(model.initial_val_es),
        log: model.log.clone(),
        resume: model.state.as_ref().map(|s| ResumeInfo {
            lr: s.lr,
            epoch: s.epoch,
            best_val: finite(s.best_val),
            since_best: s.since_best,
            since_lr_change: s.since_lr_change,
            stopped: s.stopped,
        }),
        tensors: groups
            .iter()
            .flat_map(|(g, ts)| {
                ts.iter().map(|(n, s, _)| TensorEntry { group: g.to_string(), name: n.to_string(), shape: s.to_vec() })
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    for (_, ts) in &groups {
        for (_, _, data) in ts {
            write_f64s(&mut w, data)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<TrainedModel> {
    let bytes = fs::read(path)?;
    let bad = |msg: &str| Error::format(path, msg.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| bad(&e.to_string()))?;
    let mut offset = 20 + hlen;
    let mut groups: Vec<(String, Vec<Tensor>)> = Vec::new();
    for entry in header.tensors {
        let len: usize = entry.shape.iter().product();
        let raw = bytes.get(offset..offset + 8 * len).ok_or_else(|| bad("truncated tensor data"))?;
        offset += 8 * len;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = Tensor { name: entry.name, shape: entry.shape, data };
        match groups.last_mut() {
            Some((g, ts)) if *g == entry.group => ts.push(t),
            _ => groups.push((entry.group, vec![t])),
        }
    }
    if offset != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    let mut take = |name: &str| {
        groups
            .iter()
            .position(|(g, _)| g == name)
            .map(|i| groups.remove(i).1)
    };
    let best = take("best").ok_or_else(|| bad("missing best weights"))?;
    let network = Network::from_tensors(header.spec.clone(), best)?;
    let state = match (header.resume, take("current"), take("rms")) {
        (Some(r), Some(current), Some(rms)) => Some(TrainState {
            net: Network::from_tensors(header.spec.clone(), current)?,
            best: network.clone(),
            rms: rms.into_iter().map(|t| t.data).collect(),
            lr: r.lr,
            epoch: r.epoch,
            best_val: r.best_val.unwrap_or(f64::INFINITY),
            since_best: r.since_best,
            since_lr_change: r.since_lr_change,
            initial_val: header.initial_val_es.unwrap_or(f64::NAN),
            log: header.log.clone(),
            stopped: r.stopped,
        }),
        (None, None, None) => None,
        _ => return Err(bad("incomplete resume state")),
    };
    Ok(TrainedModel {
        network,
        config: header.config,
        family: header.family,
        manifest_hash: header.manifest_hash,
        log: header.log,
        initial_val_es: header.initial_val_es.unwrap_or(f64::NAN),
        state,
    })
}

/// Training log as CSV with columns `epoch,train_es,val_es,lr`.
pub fn write_log_csv(log: &[EpochLog], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for entry in log {
        w.serialize(entry)?;
    }
    w.flush()?;
    Ok(())
}
