//! On-disk checkpoints: a `manifest.json` plus one little-endian `.f32`
//! blob per tensor, each blob guarded by its SHA-256.
//!
//! Saving writes a sibling temp directory and renames it into place, so a
//! reader never sees a half-written checkpoint.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::heads::StochmaxParams;
use crate::network::Network;
use crate::tensor::Tensor;
use crate::topology::parse_topology;

pub const MANIFEST: &str = "manifest.json";
const FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobRef {
    pub file: String,
    pub shape: Vec<usize>,
    pub sha256: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StochmaxRef {
    pub epsilon: f64,
    pub w_psi: BlobRef,
    pub b_psi: BlobRef,
}

/// Which trainer produced the weights and with what settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub trainer: String,
    pub seed: u64,
    #[serde(default)]
    pub config: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    pub topology: String,
    pub topology_sha256: String,
    /// Weighted layers in declaration order.
    pub layers: BTreeMap<String, BlobRef>,
    /// One entry per unroll index.
    pub thresholds: BTreeMap<String, Vec<f32>>,
    pub stochmax: Option<StochmaxRef>,
    pub provenance: Provenance,
}

fn sha(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn to_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn write_blob(dir: &Path, file: &str, t: &Tensor) -> Result<BlobRef> {
    let bytes = to_bytes(t);
    let path = dir.join(file);
    fs::write(&path, &bytes).map_err(|e| Error::io(&path, e))?;
    Ok(BlobRef {
        file: file.to_string(),
        shape: t.shape().to_vec(),
        sha256: sha(&bytes),
    })
}

fn read_blob(dir: &Path, r: &BlobRef) -> Result<Tensor> {
    if r.file.contains(['/', '\\']) || r.file.starts_with('.') {
        return Err(Error::Checkpoint(format!(
            "blob name {:?} escapes the checkpoint",
            r.file
        )));
    }
    let path = dir.join(&r.file);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let want = r.shape.iter().product::<usize>() * 4;
    if bytes.len() != want {
        return Err(Error::Checkpoint(format!(
            "{}: {} bytes, shape {:?} needs {}",
            r.file,
            bytes.len(),
            r.shape,
            want
        )));
    }
    let got = sha(&bytes);
    if got != r.sha256 {
        return Err(Error::Checkpoint(format!(
            "{}: content hash mismatch (file modified?)",
            r.file
        )));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::from_vec(&r.shape, data)
}

fn sibling(dir: &Path, tag: &str) -> PathBuf {
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    dir.with_file_name(format!(".{name}.{tag}-{}", std::process::id()))
}

/// Writes `net` to `dir`, replacing any checkpoint already there.
pub fn save(net: &Network, dir: &Path, provenance: Provenance) -> Result<Manifest> {
    net.check_thresholds()?;
    let spec = net.spec();
    if let Some((l, _)) = spec
        .layers
        .iter()
        .zip(&net.thresholds)
        .find(|(_, t)| t.iter().any(|v| !v.is_finite()))
    {
        return Err(Error::Checkpoint(format!(
            "layer {} has a non-finite threshold",
            l.name
        )));
    }
    let tmp = sibling(dir, "tmp");
    if tmp.exists() {
        fs::remove_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;
    }
    fs::create_dir_all(&tmp).map_err(|e| Error::io(&tmp, e))?;

    let mut layers = BTreeMap::new();
    let mut thresholds = BTreeMap::new();
    for (i, l) in spec.layers.iter().enumerate() {
        if let Some(w) = &net.weights[i] {
            layers.insert(
                l.name.clone(),
                write_blob(&tmp, &format!("{:03}-{}.f32", i, l.name), w)?,
            );
            thresholds.insert(l.name.clone(), net.thresholds[i].clone());
        }
    }
    let stochmax = net
        .stochmax
        .as_ref()
        .map(|p| -> Result<StochmaxRef> {
            Ok(StochmaxRef {
                epsilon: p.epsilon,
                w_psi: write_blob(&tmp, "stochmax-w_psi.f32", &p.w_psi)?,
                b_psi: write_blob(&tmp, "stochmax-b_psi.f32", &p.b_psi)?,
            })
        })
        .transpose()?;
    let manifest = Manifest {
        format: FORMAT,
        topology: spec.to_document(),
        topology_sha256: spec.hash(),
        layers,
        thresholds,
        stochmax,
        provenance,
    };
    let mpath = tmp.join(MANIFEST);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&mpath, e))?;

    if dir.exists() {
        let old = sibling(dir, "old");
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    } else {
        fs::rename(&tmp, dir).map_err(|e| Error::io(dir, e))?;
    }
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text)?;
    if m.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", m.format)));
    }
    Ok(m)
}

/// Loads and verifies a checkpoint.
pub fn load(dir: &Path) -> Result<(Network, Manifest)> {
    let m = read_manifest(dir)?;
    let spec = parse_topology(&m.topology)?;
    if spec.hash() != m.topology_sha256 {
        return Err(Error::Checkpoint(
            "topology document does not match its recorded hash".into(),
        ));
    }
    let mut net = Network::zeroed(spec.clone())?;
    for (i, l) in spec.layers.iter().enumerate() {
        let Some(shape) = l.kind.weight_shape() else { continue };
        let r = m
            .layers
            .get(&l.name)
            .ok_or_else(|| Error::Checkpoint(format!("no weights stored for layer {}", l.name)))?;
        if r.shape != shape {
            return Err(Error::Checkpoint(format!(
                "layer {}: stored shape {:?}, topology needs {:?}",
                l.name, r.shape, shape
            )));
        }
        net.weights[i] = Some(read_blob(dir, r)?);
        let th = m
            .thresholds
            .get(&l.name)
            .ok_or_else(|| Error::Checkpoint(format!("no thresholds stored for layer {}", l.name)))?;
        if th.len() != net.thresholds[i].len() {
            return Err(Error::Checkpoint(format!(
                "layer {}: {} thresholds stored, {} unroll steps",
                l.name,
                th.len(),
                net.thresholds[i].len()
            )));
        }
        net.thresholds[i] = th.clone();
    }
    if let Some(extra) = m.layers.keys().find(|k| spec.layer_index(k).is_none()) {
        return Err(Error::Checkpoint(format!("weights stored for unknown layer {extra}")));
    }
    net.stochmax = match &m.stochmax {
        Some(s) => Some(StochmaxParams {
            w_psi: read_blob(dir, &s.w_psi)?,
            b_psi: read_blob(dir, &s.b_psi)?,
            epsilon: s.epsilon,
        }),
        None => None,
    };
    if net.stochmax.is_some() != (spec.classifier == crate::topology::ClassifierKind::Stochmax) {
        return Err(Error::Checkpoint(
            "stochmax parameters do not match the classifier kind".into(),
        ));
    }
    net.check_thresholds()?;
    Ok((net, m))
}

/// Like [`load`], but refuses a checkpoint whose topology differs from `spec`.
pub fn load_into(dir: &Path, spec: &crate::topology::TopologySpec) -> Result<Network> {
    let m = read_manifest(dir)?;
    let want = spec.hash();
    if m.topology_sha256 != want {
        return Err(Error::Checkpoint(format!(
            "checkpoint topology {} ({}) does not match {} ({})",
            m.topology_sha256.get(..12).unwrap_or(&m.topology_sha256),
            parse_topology(&m.topology).map(|s| s.name).unwrap_or_default(),
            &want[..12],
            spec.name
        )));
    }
    load(dir).map(|(net, _)| net)
}
