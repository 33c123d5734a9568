//! Checkpoint archives: one safetensors file whose metadata carries a JSON
//! manifest (kind, architecture plan, vocabulary hash, config snapshot).
//!
//! Tensor names are namespaced `text_encoder.`, `generator.`,
//! `discriminator.`, `optim.g.` and `optim.d.`. Writes go to a sibling
//! temporary file that is renamed into place, so an interrupted save never
//! clobbers the previous archive.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorMode};
use crate::model::{Editor, ModelConfig, GENERATOR_PREFIX, TEXT_PREFIX};
use crate::nn::{device, Init, ParamStore};
use crate::text::{TextEncoder, Vocabulary};

pub const FORMAT_VERSION: u32 = 1;
const MANIFEST_KEY: &str = "manifest";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckpointKind {
    Gan,
    /// Parameter-free stub whose generator returns its input.
    Identity,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub kind: CheckpointKind,
    /// Digest of the stored tensors.
    pub id: String,
    pub mode: Option<GeneratorMode>,
    pub image_size: usize,
    pub vocab_hash: String,
    pub model: Option<ModelConfig>,
    /// Training configuration snapshot (TOML).
    pub config: Option<String>,
    /// Completed epochs.
    pub epoch: usize,
    pub step: u64,
}

impl CheckpointManifest {
    pub fn identity(vocab: &Vocabulary, image_size: usize) -> Self {
        Self {
            format_version: FORMAT_VERSION,
            kind: CheckpointKind::Identity,
            id: String::new(),
            mode: None,
            image_size,
            vocab_hash: vocab.hash(),
            model: None,
            config: None,
            epoch: 0,
            step: 0,
        }
    }

    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let found = vocab.hash();
        if found != self.vocab_hash {
            return Err(Error::VocabularyMismatch {
                expected: self.vocab_hash.clone(),
                found,
            });
        }
        Ok(())
    }
}

/// Short content digest over tensor names, dtypes, shapes and bytes.
pub fn tensors_digest(tensors: &[(String, Tensor)]) -> Result<String> {
    let mut sorted: Vec<&(String, Tensor)> = tensors.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    let mut h = Sha256::new();
    for (name, t) in sorted {
        h.update(name.as_bytes());
        h.update(format!("{:?}{:?}", t.dtype(), t.dims()).as_bytes());
        let values = t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        for v in values {
            h.update(v.to_le_bytes());
        }
    }
    Ok(hex::encode(&h.finalize()[..8]))
}

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(".partial");
    path.with_file_name(name)
}

/// Writes the archive atomically; `manifest.id` is filled in here.
pub fn save(path: &Path, manifest: &CheckpointManifest, tensors: &[(String, Tensor)]) -> Result<CheckpointManifest> {
    let mut manifest = manifest.clone();
    manifest.id = tensors_digest(tensors)?;
    let json = serde_json::to_string(&manifest).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let metadata = HashMap::from([(MANIFEST_KEY.to_string(), json)]);
    let contiguous = tensors
        .iter()
        .map(|(n, t)| Ok((n.clone(), t.contiguous()?)))
        .collect::<Result<Vec<_>>>()?;
    let bytes = safetensors::serialize(contiguous.iter().map(|(n, t)| (n.as_str(), t)), Some(metadata))
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = temp_path(path);
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    if let Err(e) = write() {
        let _ = std::fs::remove_file(&tmp);
        return Err(Error::io(path, e));
    }
    Ok(manifest)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn parse_manifest(path: &Path, bytes: &[u8]) -> Result<CheckpointManifest> {
    let (_, meta) = safetensors::SafeTensors::read_metadata(bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    let json = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(MANIFEST_KEY))
        .ok_or_else(|| Error::Checkpoint(format!("{}: no manifest", path.display())))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(json).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {} (supported: {FORMAT_VERSION})",
            path.display(),
            manifest.format_version
        )));
    }
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    parse_manifest(path, &read_bytes(path)?)
}

pub fn load(path: &Path) -> Result<(CheckpointManifest, HashMap<String, Tensor>)> {
    let bytes = read_bytes(path)?;
    let manifest = parse_manifest(path, &bytes)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, &device())?;
    Ok((manifest, tensors))
}

pub fn save_identity(path: &Path, vocab: &Vocabulary, image_size: usize) -> Result<CheckpointManifest> {
    save(path, &CheckpointManifest::identity(vocab, image_size), &[])
}

/// Loads the inference half of a checkpoint, refusing a vocabulary whose
/// hash differs from the one it was trained with.
pub fn load_editor(path: &Path, vocab: &Vocabulary) -> Result<(Editor, CheckpointManifest)> {
    let (manifest, tensors) = load(path)?;
    manifest.check_vocab(vocab)?;
    match manifest.kind {
        CheckpointKind::Identity => Ok((Editor::identity(vocab.clone(), manifest.image_size), manifest)),
        CheckpointKind::Gan => {
            let config = manifest
                .model
                .clone()
                .ok_or_else(|| Error::Checkpoint(format!("{}: no architecture plan", path.display())))?;
            config.validate()?;
            let mut store = ParamStore::new(DType::F32);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let (text, generator) = {
                let mut init = Init::new(&mut store, &mut rng);
                let text = TextEncoder::new(&mut init.pp(TEXT_PREFIX), config.text.clone())?;
                let generator = Generator::new(&mut init.pp(GENERATOR_PREFIX), config.generator.clone())?;
                (text, generator)
            };
            store.load(&tensors, "")?;
            Ok((Editor::from_parts(vocab.clone(), text, generator), manifest))
        }
    }
}
