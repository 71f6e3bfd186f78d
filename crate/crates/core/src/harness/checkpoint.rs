//! Checkpoints: every parameter as little-endian `f32` in one flat binary
//! file, described by a JSON manifest. Momentum buffers are not saved.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{HarnessError, Result};
use crate::arch::ArchConfig;
use crate::nn::{Network, NetworkSpec};
use crate::tensor::{Precision, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the binary file.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    /// Binary file name, relative to the manifest.
    pub data: String,
    pub dtype: String,
    pub precision: Precision,
    pub step: u64,
    pub spec: NetworkSpec,
    #[serde(default)]
    pub architecture: Option<ArchConfig>,
    pub params: Vec<ManifestEntry>,
    #[serde(default)]
    pub batchnorm: Vec<BnStats>,
}

/// Write `<stem>.bin` and `<stem>.json` into `dir`; returns the manifest path.
pub fn save_checkpoint(net: &Network, arch: Option<&ArchConfig>, dir: &Path, stem: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut bytes = Vec::new();
    let mut params = Vec::new();
    for p in net.params() {
        params.push(ManifestEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset: bytes.len(),
        });
        for &v in p.value.data() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let data = format!("{stem}.bin");
    let manifest = Manifest {
        data: data.clone(),
        dtype: "f32le".into(),
        precision: net.precision(),
        step: net.step(),
        spec: net.spec().clone(),
        architecture: arch.cloned(),
        params,
        batchnorm: net
            .bn_running()
            .iter()
            .map(|b| BnStats {
                mean: b.mean.clone(),
                var: b.var.clone(),
            })
            .collect(),
    };
    let bin = dir.join(&data);
    std::fs::write(&bin, bytes).map_err(|e| HarnessError::io(&bin, e))?;
    let json = dir.join(format!("{stem}.json"));
    std::fs::write(&json, serde_json::to_string_pretty(&manifest)?).map_err(|e| HarnessError::io(&json, e))?;
    Ok(json)
}

/// Rebuild a network from a manifest written by [`save_checkpoint`].
pub fn load_checkpoint(manifest_path: &Path) -> Result<(Network, Manifest)> {
    let text = std::fs::read_to_string(manifest_path).map_err(|e| HarnessError::io(manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.dtype != "f32le" {
        return Err(HarnessError::Checkpoint(format!(
            "unsupported dtype {}",
            manifest.dtype
        )));
    }
    let bin = manifest_path.parent().unwrap_or(Path::new(".")).join(&manifest.data);
    let bytes = std::fs::read(&bin).map_err(|e| HarnessError::io(&bin, e))?;
    let mut net = Network::new(manifest.spec.clone(), manifest.precision)?;
    for entry in &manifest.params {
        let n: usize = entry.shape.iter().product();
        let raw = bytes.get(entry.offset..entry.offset + 4 * n).ok_or_else(|| {
            HarnessError::Checkpoint(format!("{} runs past the end of {}", entry.name, bin.display()))
        })?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        net.set_param(&entry.name, Tensor::new(&entry.shape, values, manifest.precision)?)?;
    }
    if manifest.params.len() != net.params().len() {
        return Err(HarnessError::Checkpoint(format!(
            "manifest lists {} parameters, network has {}",
            manifest.params.len(),
            net.params().len()
        )));
    }
    if manifest.batchnorm.len() != net.bn_running().len() {
        return Err(HarnessError::Checkpoint(
            "batch-norm statistics do not match the network".into(),
        ));
    }
    for (dst, src) in net.bn_running_mut().iter_mut().zip(&manifest.batchnorm) {
        dst.mean = src.mean.clone();
        dst.var = src.var.clone();
    }
    net.set_step(manifest.step);
    Ok((net, manifest))
}
