//! Checkpoint directories: `manifest.json` plus `params.bin`, the raw
//! little-endian f32 tensors concatenated in manifest order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{layout, Model, ModelConfig, ModelError, Result};
use crate::objectives::ObjectiveKind;
use crate::tensor::Tensor;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model<f32>,
    pub step: u64,
    pub objective: Option<ObjectiveKind>,
    pub vocab_hash: Option<String>,
    /// Opaque resume state of the training stream.
    pub rng_state: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: u32,
    config: ModelConfig,
    config_hash: String,
    step: u64,
    objective: Option<ObjectiveKind>,
    tied_embeddings: bool,
    vocab_hash: Option<String>,
    rng_state: u64,
    parameters: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn new(model: Model<f32>) -> Self {
        Self { model, step: 0, objective: None, vocab_hash: None, rng_state: 0 }
    }

    fn manifest(&self) -> Manifest {
        let config = self.model.config().clone();
        let mut offset = 0u64;
        let parameters = self
            .model
            .params()
            .iter()
            .map(|(_, p)| {
                let e = ParamEntry { name: p.name.clone(), shape: p.value.shape().to_vec(), offset };
                offset += 4 * p.value.len() as u64;
                e
            })
            .collect();
        Manifest {
            format: FORMAT_VERSION,
            config_hash: config.content_hash(),
            tied_embeddings: config.tied_embeddings,
            config,
            step: self.step,
            objective: self.objective,
            vocab_hash: self.vocab_hash.clone(),
            rng_state: self.rng_state,
            parameters,
        }
    }

    fn params_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 * self.model.num_parameters());
        for (_, p) in self.model.params().iter() {
            for v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// SHA-256 over the manifest and parameter bytes.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.manifest()).expect("manifest serializes"));
        h.update(self.params_bytes());
        hex::encode(h.finalize())
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = serde_json::to_vec_pretty(&ckpt.manifest()).expect("manifest serializes");
    fs::write(dir.join(PARAMS_FILE), ckpt.params_bytes())?;
    fs::write(dir.join(MANIFEST_FILE), manifest)?;
    Ok(())
}

/// Validates the manifest against the layout its config implies, then the
/// config hash, then reads the tensors.
pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let raw = fs::read(dir.join(MANIFEST_FILE))
        .map_err(|e| ModelError::CorruptManifest(format!("{}: {e}", dir.join(MANIFEST_FILE).display())))?;
    let m: Manifest = serde_json::from_slice(&raw).map_err(|e| ModelError::CorruptManifest(e.to_string()))?;
    if m.format != FORMAT_VERSION {
        return Err(ModelError::CorruptManifest(format!("unsupported format {}", m.format)));
    }
    m.config.validate()?;
    let specs = layout(&m.config);
    if specs.len() != m.parameters.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "config implies {} tensors, manifest lists {}",
            specs.len(),
            m.parameters.len()
        )));
    }
    let mut expected_offset = 0u64;
    for (spec, entry) in specs.iter().zip(&m.parameters) {
        if spec.name != entry.name || spec.shape != entry.shape {
            return Err(ModelError::ShapeMismatch(format!(
                "{} {:?} in config, {} {:?} in parameter table",
                spec.name, spec.shape, entry.name, entry.shape
            )));
        }
        if entry.offset != expected_offset {
            return Err(ModelError::CorruptManifest(format!("bad offset for {}", entry.name)));
        }
        expected_offset += 4 * entry.shape.iter().product::<usize>() as u64;
    }
    let actual = m.config.content_hash();
    if actual != m.config_hash {
        return Err(ModelError::ConfigHashMismatch { expected: m.config_hash, actual });
    }
    if m.tied_embeddings != m.config.tied_embeddings {
        return Err(ModelError::CorruptManifest("tied_embeddings disagrees with config".into()));
    }

    let bytes = fs::read(dir.join(PARAMS_FILE))
        .map_err(|e| ModelError::Truncated(format!("{}: {e}", dir.join(PARAMS_FILE).display())))?;
    if bytes.len() as u64 != expected_offset {
        return Err(ModelError::Truncated(format!(
            "{PARAMS_FILE} holds {} bytes, manifest needs {expected_offset}",
            bytes.len()
        )));
    }
    let model = Model::build(m.config, |i, spec| {
        let start = m.parameters[i].offset as usize;
        let n: usize = spec.shape.iter().product();
        let data = bytes[start..start + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Tensor::new(spec.shape.clone(), data)?)
    })?;
    Ok(Checkpoint { model, step: m.step, objective: m.objective, vocab_hash: m.vocab_hash, rng_state: m.rng_state })
}
