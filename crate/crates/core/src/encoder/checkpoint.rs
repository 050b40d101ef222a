//! DRAS1 checkpoints.
//!
//! Layout: magic `DRAS1`, a little-endian `u64` byte length, a UTF-8 JSON
//! header, then each blob listed in the header as little-endian `f32`, in order.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EncoderConfig, Network, RunningStats};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"DRAS1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub encoder: EncoderConfig,
    pub patch_size: usize,
    pub step: u64,
    pub momentum: f64,
    /// Grid file the landmarks came from, if any.
    pub grid: Option<String>,
    /// Free-form metadata owned by the writer (bank layout, variant name, ...).
    pub meta: serde_json::Value,
    pub blobs: Vec<BlobEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub blobs: BTreeMap<String, Vec<f32>>,
}

impl Checkpoint {
    pub fn new(encoder: EncoderConfig, patch_size: usize, step: u64, momentum: f64) -> Self {
        Self {
            header: CheckpointHeader {
                encoder,
                patch_size,
                step,
                momentum,
                grid: None,
                meta: serde_json::Value::Null,
                blobs: Vec::new(),
            },
            blobs: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Format(format!("blob {name}: shape {shape:?} does not match {} values", data.len())));
        }
        if self.blobs.insert(name.clone(), data).is_some() {
            return Err(Error::Format(format!("duplicate blob {name}")));
        }
        self.header.blobs.push(BlobEntry { name, shape });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&[f32]> {
        self.blobs
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Format(format!("checkpoint has no blob named {name}")))
    }

    pub fn shape(&self, name: &str) -> Option<&[usize]> {
        self.header.blobs.iter().find(|b| b.name == name).map(|b| b.shape.as_slice())
    }

    /// Stores every parameter and running statistic under `prefix`.
    pub fn insert_network(&mut self, prefix: &str, net: &Network<f32>) -> Result<()> {
        for p in &net.params {
            self.insert(format!("{prefix}{}", p.name), p.value.shape().to_vec(), p.value.data().to_vec())?;
        }
        for (i, r) in net.running.iter().enumerate() {
            self.insert(format!("{prefix}block{i}.running_mean"), vec![r.mean.len()], r.mean.clone())?;
            self.insert(format!("{prefix}block{i}.running_var"), vec![r.var.len()], r.var.clone())?;
        }
        Ok(())
    }

    /// Rebuilds a network stored under `prefix` using the header's encoder config.
    pub fn network(&self, prefix: &str) -> Result<Network<f32>> {
        let mut net = Network::new(&self.header.encoder, 0)?;
        for p in &mut net.params {
            let name = format!("{prefix}{}", p.name);
            let data = self.get(&name)?;
            if self.shape(&name) != Some(p.value.shape()) {
                return Err(Error::Format(format!("blob {name} has shape {:?}, expected {:?}", self.shape(&name), p.value.shape())));
            }
            p.value = Tensor::new(p.value.shape().to_vec(), data.to_vec())?;
        }
        for (i, r) in net.running.iter_mut().enumerate() {
            *r = RunningStats {
                mean: self.get(&format!("{prefix}block{i}.running_mean"))?.to_vec(),
                var: self.get(&format!("{prefix}block{i}.running_var"))?.to_vec(),
            };
        }
        Ok(net)
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for b in &self.header.blobs {
            for v in &self.blobs[&b.name] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 13 || &bytes[..5] != CHECKPOINT_MAGIC {
            return Err(Error::Format("bad magic: not a DRAS1 checkpoint".into()));
        }
        let hlen = u64::from_le_bytes(bytes[5..13].try_into().expect("8 bytes")) as usize;
        let rest = &bytes[13..];
        if rest.len() < hlen {
            return Err(Error::Format(format!("checkpoint header truncated: expected {hlen} bytes, found {}", rest.len())));
        }
        let header: CheckpointHeader = serde_json::from_slice(&rest[..hlen])
            .map_err(|e| Error::Format(format!("unreadable checkpoint header: {e}")))?;
        let payload = &rest[hlen..];
        let expected: usize = header.blobs.iter().map(|b| 4 * b.shape.iter().product::<usize>()).sum();
        if payload.len() != expected {
            return Err(Error::Format(format!(
                "checkpoint payload size mismatch: expected {expected} bytes, found {}",
                payload.len()
            )));
        }
        let mut blobs = BTreeMap::new();
        let mut at = 0;
        for b in &header.blobs {
            let n: usize = b.shape.iter().product();
            let data = payload[at..at + 4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            at += 4 * n;
            blobs.insert(b.name.clone(), data);
        }
        Ok(Self { header, blobs })
    }
}

pub fn write_checkpoint(c: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, c.encode()?)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Checkpoint::decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn network_round_trip_is_exact() {
        let net: Network<f32> = Network::new(&EncoderConfig::default(), 3).unwrap();
        let mut c = Checkpoint::new(EncoderConfig::default(), 16, 7, 0.999);
        c.insert_network("q/", &net).unwrap();
        c.insert("opt/step", vec![1], vec![7.0]).unwrap();
        let back = Checkpoint::decode(&c.encode().unwrap()).unwrap();
        assert_eq!(back, c);
        let restored = back.network("q/").unwrap();
        assert_eq!(restored.params, net.params);
        assert_eq!(restored.running, net.running);
    }

    #[test]
    fn corrupt_checkpoints_rejected() {
        let mut c = Checkpoint::new(EncoderConfig::default(), 16, 0, 0.999);
        c.insert("x", vec![2], vec![1.0, 2.0]).unwrap();
        let bytes = c.encode().unwrap();
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Checkpoint::decode(&bad).is_err());
        assert!(c.insert("x", vec![1], vec![0.0]).is_err());
    }
}
