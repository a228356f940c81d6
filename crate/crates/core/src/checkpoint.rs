//! Binary checkpoint archives for the denoiser and flow networks.
//!
//! Layout: 8 magic bytes, a little-endian `u32` format version, a `u64`
//! header length, a JSON header describing the network and its training,
//! then every parameter tensor as little-endian `f64` in header order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use cellsynth_nn::{ParamStore, Tensor, UNetConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffusion::{DenoiserNetwork, ScheduleSpec};
use crate::flow::FlowNetwork;
use crate::normalize::IntensityNormalization;

const MAGIC: &[u8; 8] = b"CSYNCKPT";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: not a checkpoint archive")]
    Magic { path: String },
    #[error("{path}: unsupported archive version {version}")]
    Version { path: String, version: u32 },
    #[error("{path}: bad header: {message}")]
    Header { path: String, message: String },
    #[error("{path}: expected a {expected:?} checkpoint, found {found:?}")]
    Kind {
        path: String,
        expected: CheckpointKind,
        found: CheckpointKind,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointKind {
    Denoiser,
    Flow,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: CheckpointKind,
    pub network: UNetConfig,
    pub params: Vec<ParamEntry>,
    /// Side length of the square crops the network was trained on.
    pub crop_size: usize,
    pub steps_trained: u64,
    #[serde(default)]
    pub schedule: Option<ScheduleSpec>,
    #[serde(default)]
    pub normalization: Option<IntensityNormalization>,
    #[serde(default)]
    pub lambda_smooth: Option<f64>,
    /// Hyperparameters and seed of the training run.
    #[serde(default)]
    pub training: serde_json::Value,
}

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_archive(path: &Path, header: &CheckpointHeader, store: &ParamStore) -> Result<(), CheckpointError> {
    let json = serde_json::to_vec(header).map_err(|e| CheckpointError::Header {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let mut w = BufWriter::new(File::create(path).map_err(io(path))?);
    w.write_all(MAGIC).map_err(io(path))?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io(path))?;
    w.write_all(&(json.len() as u64).to_le_bytes()).map_err(io(path))?;
    w.write_all(&json).map_err(io(path))?;
    for (_, t) in store.iter() {
        for v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io(path))?;
        }
    }
    w.flush().map_err(io(path))
}

fn read_archive(path: &Path) -> Result<(CheckpointHeader, Vec<(String, Tensor)>), CheckpointError> {
    let mut r = BufReader::new(File::open(path).map_err(io(path))?);
    let p = || path.display().to_string();
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| CheckpointError::Magic { path: p() })?;
    if &magic != MAGIC {
        return Err(CheckpointError::Magic { path: p() });
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io(path))?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(CheckpointError::Version { path: p(), version });
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8).map_err(io(path))?;
    let len = u64::from_le_bytes(b8) as usize;
    let mut json = vec![0u8; len];
    r.read_exact(&mut json).map_err(io(path))?;
    let header: CheckpointHeader = serde_json::from_slice(&json).map_err(|e| CheckpointError::Header {
        path: p(),
        message: e.to_string(),
    })?;
    let mut tensors = Vec::with_capacity(header.params.len());
    for entry in &header.params {
        let n: usize = entry.shape.iter().product();
        let mut raw = vec![0u8; n * 8];
        r.read_exact(&mut raw).map_err(io(path))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::from_vec(&entry.shape, data).map_err(|e| CheckpointError::Header {
            path: p(),
            message: e.to_string(),
        })?;
        tensors.push((entry.name.clone(), t));
    }
    Ok((header, tensors))
}

fn entries(store: &ParamStore) -> Vec<ParamEntry> {
    store
        .iter()
        .map(|(name, t)| ParamEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
        })
        .collect()
}

fn load_into(path: &Path, store: &mut ParamStore, tensors: Vec<(String, Tensor)>) -> Result<(), CheckpointError> {
    if tensors.len() != store.len() {
        return Err(CheckpointError::Header {
            path: path.display().to_string(),
            message: format!("archive holds {} tensors, network has {}", tensors.len(), store.len()),
        });
    }
    for (name, t) in tensors {
        store.load(&name, t).map_err(|message| CheckpointError::Header {
            path: path.display().to_string(),
            message,
        })?;
    }
    Ok(())
}

/// Metadata stored next to denoiser weights.
#[derive(Clone, Debug, PartialEq)]
pub struct DenoiserMeta {
    pub crop_size: usize,
    pub schedule: ScheduleSpec,
    pub normalization: IntensityNormalization,
    pub training: serde_json::Value,
}

pub fn save_denoiser(path: &Path, net: &DenoiserNetwork, meta: &DenoiserMeta) -> Result<(), CheckpointError> {
    let header = CheckpointHeader {
        kind: CheckpointKind::Denoiser,
        network: net.unet().config().clone(),
        params: entries(net.unet().params()),
        crop_size: meta.crop_size,
        steps_trained: net.steps_trained(),
        schedule: Some(meta.schedule),
        normalization: Some(meta.normalization),
        lambda_smooth: None,
        training: meta.training.clone(),
    };
    write_archive(path, &header, net.unet().params())
}

pub fn load_denoiser(path: &Path) -> Result<(DenoiserNetwork, DenoiserMeta), CheckpointError> {
    let (header, tensors) = read_archive(path)?;
    if header.kind != CheckpointKind::Denoiser {
        return Err(CheckpointError::Kind {
            path: path.display().to_string(),
            expected: CheckpointKind::Denoiser,
            found: header.kind,
        });
    }
    let bad = |m: &str| CheckpointError::Header {
        path: path.display().to_string(),
        message: m.to_string(),
    };
    let mut net = DenoiserNetwork::new(header.network.clone(), 0).map_err(|e| bad(&e.to_string()))?;
    load_into(path, net.unet_mut().params_mut(), tensors)?;
    net.set_steps_trained(header.steps_trained);
    let meta = DenoiserMeta {
        crop_size: header.crop_size,
        schedule: header.schedule.ok_or_else(|| bad("missing schedule"))?,
        normalization: header.normalization.ok_or_else(|| bad("missing normalization"))?,
        training: header.training,
    };
    Ok((net, meta))
}

/// Metadata stored next to flow-network weights.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowMeta {
    pub crop_size: usize,
    pub lambda_smooth: f64,
    pub training: serde_json::Value,
}

pub fn save_flow(path: &Path, net: &FlowNetwork, meta: &FlowMeta) -> Result<(), CheckpointError> {
    let header = CheckpointHeader {
        kind: CheckpointKind::Flow,
        network: net.unet().config().clone(),
        params: entries(net.unet().params()),
        crop_size: meta.crop_size,
        steps_trained: net.steps_trained(),
        schedule: None,
        normalization: None,
        lambda_smooth: Some(meta.lambda_smooth),
        training: meta.training.clone(),
    };
    write_archive(path, &header, net.unet().params())
}

pub fn load_flow(path: &Path) -> Result<(FlowNetwork, FlowMeta), CheckpointError> {
    let (header, tensors) = read_archive(path)?;
    if header.kind != CheckpointKind::Flow {
        return Err(CheckpointError::Kind {
            path: path.display().to_string(),
            expected: CheckpointKind::Flow,
            found: header.kind,
        });
    }
    let bad = |m: &str| CheckpointError::Header {
        path: path.display().to_string(),
        message: m.to_string(),
    };
    let mut net = FlowNetwork::from_config(header.network.clone(), 0).map_err(|e| bad(&e.to_string()))?;
    load_into(path, net.unet_mut().params_mut(), tensors)?;
    net.set_steps_trained(header.steps_trained);
    let meta = FlowMeta {
        crop_size: header.crop_size,
        lambda_smooth: header.lambda_smooth.ok_or_else(|| bad("missing lambda_smooth"))?,
        training: header.training,
    };
    Ok((net, meta))
}

/// Hex SHA-256 of a file's bytes.
pub fn file_sha256(path: &Path) -> Result<String, CheckpointError> {
    let mut r = BufReader::new(File::open(path).map_err(io(path))?);
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let n = r.read(&mut buf).map_err(io(path))?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}
