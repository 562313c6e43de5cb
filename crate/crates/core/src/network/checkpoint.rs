//! Checkpoints: a raw little-endian `f32` blob plus a JSON manifest.
//!
//! `<stem>.bin` holds every parameter block back to back in model order.
//! `<stem>.json` holds the manifest below; the blob layout is an
//! implementation detail, the manifest is the stable part.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ArchConfig, ModelState};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub arch: ArchConfig,
    pub seed: u64,
    pub epoch: usize,
    pub val_miou: f64,
    /// `"miou"` against full masks or `"labeled_accuracy"` against scribbles.
    pub val_metric: String,
    /// Whether inputs were min-max normalised during training.
    pub normalize: bool,
    pub blocks: Vec<BlockEntry>,
}

pub fn manifest_path(stem: &Path) -> PathBuf {
    stem.with_extension("json")
}

pub fn blob_path(stem: &Path) -> PathBuf {
    stem.with_extension("bin")
}

/// Writes `<stem>.bin` and `<stem>.json`.
pub fn save(stem: &Path, model: &ModelState, manifest: &Manifest) -> Result<()> {
    if let Some(dir) = stem.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let blocks = &model.params().blocks;
    let mut bytes = Vec::with_capacity(blocks.iter().map(|b| b.data.len() * 4).sum());
    for b in blocks {
        for v in &b.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        arch: model.config().clone(),
        blocks: blocks
            .iter()
            .map(|b| BlockEntry {
                name: b.name.clone(),
                shape: b.shape.clone(),
            })
            .collect(),
        ..manifest.clone()
    };
    std::fs::write(blob_path(stem), bytes)?;
    std::fs::write(manifest_path(stem), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn read_manifest(stem: &Path) -> Result<Manifest> {
    let path = manifest_path(stem);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let text = std::fs::read_to_string(&path)?;
    serde_json::from_str(&text).map_err(|e| Error::Load {
        file: path,
        message: e.to_string(),
    })
}

/// Rebuilds the model described by the manifest and fills in its weights.
pub fn load(stem: &Path) -> Result<(ModelState, Manifest)> {
    let manifest = read_manifest(stem)?;
    let path = blob_path(stem);
    if !path.is_file() {
        return Err(Error::MissingFile(path));
    }
    let bytes = std::fs::read(&path)?;
    let mut model = ModelState::init(manifest.arch.clone(), manifest.seed)?;
    let load_err = |message: String| Error::Load {
        file: path.clone(),
        message,
    };
    let expected: Vec<BlockEntry> = model
        .params()
        .blocks
        .iter()
        .map(|b| BlockEntry {
            name: b.name.clone(),
            shape: b.shape.clone(),
        })
        .collect();
    if expected != manifest.blocks {
        return Err(load_err("parameter layout does not match the architecture".into()));
    }
    let total: usize = model.params().blocks.iter().map(|b| b.data.len()).sum();
    if bytes.len() != total * 4 {
        return Err(load_err(format!("expected {} bytes, found {}", total * 4, bytes.len())));
    }
    let mut chunks = bytes.chunks_exact(4);
    for block in &mut model.params_mut().blocks {
        for (v, c) in block.data.iter_mut().zip(&mut chunks) {
            *v = f32::from_le_bytes([c[0], c[1], c[2], c[3]]);
        }
    }
    Ok((model, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_restores_every_weight() {
        let mut arch = ArchConfig::with_decoders(2);
        arch.depth = 2;
        arch.base_channels = 2;
        let mut model = ModelState::init(arch, 4).unwrap();
        model.params_mut().blocks[0].data[0] = 0.123;
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("best");
        let manifest = Manifest {
            arch: model.config().clone(),
            seed: 4,
            epoch: 3,
            val_miou: 0.5,
            val_metric: "miou".into(),
            normalize: true,
            blocks: Vec::new(),
        };
        save(&stem, &model, &manifest).unwrap();
        let (back, m) = load(&stem).unwrap();
        assert_eq!(m.epoch, 3);
        assert_eq!(m.blocks.len(), model.params().blocks.len());
        for (a, b) in model.params().blocks.iter().zip(&back.params().blocks) {
            assert_eq!(a.data, b.data);
        }
    }

    #[test]
    fn missing_blob_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let err = load(&dir.path().join("nothing")).unwrap_err();
        assert!(matches!(err, Error::MissingFile(_)));
    }
}
