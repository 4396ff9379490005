//! Network checkpoints: a JSON manifest with the layer specs, shapes, seed
//! and step count, plus one raw little-endian f64 blob per parameter tensor.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, LayerSpec, Network, Result, Tensor};

const FORMAT: &str = "shapelift-net/1";

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerSpec>,
    seed: u64,
    step: u64,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    file: String,
    sha256: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `dir/<prefix>.json` and `dir/<prefix>.<k>.bin`.
pub fn save(net: &Network, dir: &Path, prefix: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut tensors = Vec::new();
    for (k, (t, name)) in net.params().iter().zip(net.param_names()).enumerate() {
        let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let file = format!("{prefix}.{k}.bin");
        fs::write(dir.join(&file), &bytes)?;
        tensors.push(TensorEntry { name: name.clone(), shape: t.shape().to_vec(), file, sha256: hex(&Sha256::digest(&bytes)) });
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        input_shape: net.input_shape().to_vec(),
        layers: net.specs().to_vec(),
        seed: net.seed(),
        step: net.step,
        tensors,
    };
    fs::write(dir.join(format!("{prefix}.json")), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load(dir: &Path, prefix: &str) -> Result<Network> {
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(format!("{prefix}.json")))?)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unknown format {:?}", manifest.format)));
    }
    let mut net = Network::new(&manifest.input_shape, manifest.layers, manifest.seed)?;
    if manifest.tensors.len() != net.params().len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} tensors, architecture has {}",
            manifest.tensors.len(),
            net.params().len()
        )));
    }
    for (k, entry) in manifest.tensors.iter().enumerate() {
        if entry.file.contains('/') || entry.file.contains('\\') || entry.file.starts_with('.') {
            return Err(Error::Checkpoint(format!("tensor file {:?} escapes the checkpoint directory", entry.file)));
        }
        let bytes = fs::read(dir.join(&entry.file))?;
        if hex(&Sha256::digest(&bytes)) != entry.sha256 {
            return Err(Error::Checkpoint(format!("checksum mismatch in {}", entry.file)));
        }
        if bytes.len() % 8 != 0 {
            return Err(Error::Checkpoint(format!("{} is not a whole number of f64 values", entry.file)));
        }
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        net.set_param(k, Tensor::new(entry.shape.clone(), data)?)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", entry.name)))?;
    }
    net.step = manifest.step;
    Ok(net)
}
