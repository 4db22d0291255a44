//! Binary checkpoints: versioned, config-fingerprinted parameter archives.
//!
//! Layout: magic, format version, the architecture configs as JSON plus
//! their SHA-256 digest, then named f64 tensors (little-endian) for the
//! embedding and, when present, the relation column. Loading verifies the
//! magic, version, digest, and every tensor's shape against the configs.

use crate::embedding::{init_embedding_params, EmbeddingConfig};
use crate::error::{DcnError, Result};
use crate::nn::Params;
use crate::relation::{init_relation_params, RelationConfig};
use crate::seed::sub_rng;
use crate::train::TrainedModel;
use ndarray::ArrayD;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"DCNCKPT\0";
const VERSION: u32 = 1;
/// Corruption guards for length fields.
const MAX_NAME_LEN: u64 = 4096;
const MAX_NDIM: u64 = 8;
const MAX_ELEMENTS: u64 = 1 << 30;

#[derive(Serialize, Deserialize)]
struct CheckpointConfig {
    embedding: EmbeddingConfig,
    relation: RelationConfig,
}

/// Everything a checkpoint holds.
pub struct CheckpointContents {
    pub embedding: Params,
    /// Absent in phase-1-only checkpoints.
    pub relation: Option<Params>,
    pub embed_config: EmbeddingConfig,
    pub rel_config: RelationConfig,
}

impl CheckpointContents {
    /// Require a complete model (embedding and relation parameters).
    pub fn into_model(self) -> Result<TrainedModel> {
        let relation = self.relation.ok_or_else(|| {
            DcnError::Checkpoint(
                "checkpoint has no relation parameters; it only holds a pretrained embedding"
                    .to_string(),
            )
        })?;
        Ok(TrainedModel {
            embedding: self.embedding,
            relation,
            embed_config: self.embed_config,
            rel_config: self.rel_config,
        })
    }
}

fn io_err(path: &Path, source: std::io::Error) -> DcnError {
    DcnError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn write_params(w: &mut impl Write, params: &Params) -> std::io::Result<()> {
    w.write_all(&(params.len() as u64).to_le_bytes())?;
    for (name, value) in params.iter() {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u64).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(value.ndim() as u64).to_le_bytes())?;
        for &d in value.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &x in value.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Write a checkpoint; `relation` is omitted for phase-1-only snapshots.
pub fn save_checkpoint(
    path: impl AsRef<Path>,
    embed_config: &EmbeddingConfig,
    rel_config: &RelationConfig,
    embedding: &Params,
    relation: Option<&Params>,
) -> Result<()> {
    let path = path.as_ref();
    let config_json = serde_json::to_vec(&CheckpointConfig {
        embedding: embed_config.clone(),
        relation: rel_config.clone(),
    })
    .expect("configs serialize");
    let digest = Sha256::digest(&config_json);

    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let result: std::io::Result<()> = (|| {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(config_json.len() as u64).to_le_bytes())?;
        w.write_all(&config_json)?;
        w.write_all(&digest)?;
        write_params(&mut w, embedding)?;
        w.write_all(&[u8::from(relation.is_some())])?;
        if let Some(relation) = relation {
            write_params(&mut w, relation)?;
        }
        w.flush()
    })();
    result.map_err(|e| io_err(path, e))
}

/// Write a complete trained model.
pub fn save_model(path: impl AsRef<Path>, model: &TrainedModel) -> Result<()> {
    save_checkpoint(
        path,
        &model.embed_config,
        &model.rel_config,
        &model.embedding,
        Some(&model.relation),
    )
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner.read_exact(&mut buf).map_err(|_| {
            DcnError::Checkpoint("unexpected end of checkpoint file".to_string())
        })?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }

    fn params(&mut self) -> Result<Params> {
        let count = self.u64()?;
        let mut params = Params::new();
        for _ in 0..count {
            let name_len = self.u64()?;
            if name_len > MAX_NAME_LEN {
                return Err(DcnError::Checkpoint(
                    "corrupt checkpoint: parameter name too long".to_string(),
                ));
            }
            let name = String::from_utf8(self.bytes(name_len as usize)?).map_err(|_| {
                DcnError::Checkpoint("corrupt checkpoint: parameter name is not UTF-8".to_string())
            })?;
            let ndim = self.u64()?;
            if ndim > MAX_NDIM {
                return Err(DcnError::Checkpoint(
                    "corrupt checkpoint: tensor rank too large".to_string(),
                ));
            }
            let mut shape = Vec::with_capacity(ndim as usize);
            let mut elements: u64 = 1;
            for _ in 0..ndim {
                let d = self.u64()?;
                elements = elements.saturating_mul(d.max(1));
                shape.push(d as usize);
            }
            if elements > MAX_ELEMENTS {
                return Err(DcnError::Checkpoint(
                    "corrupt checkpoint: tensor too large".to_string(),
                ));
            }
            let len: usize = shape.iter().product();
            let raw = self.bytes(len * 8)?;
            let data: Vec<f64> = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let array = ArrayD::from_shape_vec(shape, data)
                .map_err(|e| DcnError::Checkpoint(format!("corrupt checkpoint: {e}")))?;
            if params.contains(&name) {
                return Err(DcnError::Checkpoint(format!(
                    "corrupt checkpoint: duplicate parameter {name:?}"
                )));
            }
            params.insert(name, array);
        }
        Ok(params)
    }
}

/// Compare a loaded section against the shapes the config dictates.
fn validate_section(params: &Params, skeleton: &Params, section: &str) -> Result<()> {
    for (name, value) in skeleton.iter() {
        if !params.contains(name) {
            return Err(DcnError::Checkpoint(format!(
                "{section} parameters do not match the stored config: missing {name:?}"
            )));
        }
        let got = params.get(name);
        if got.shape() != value.shape() {
            return Err(DcnError::Checkpoint(format!(
                "{section} parameter {name:?} has shape {:?}, config requires {:?}",
                got.shape(),
                value.shape()
            )));
        }
    }
    if params.len() != skeleton.len() {
        let extra = params
            .names()
            .find(|n| !skeleton.contains(n))
            .cloned()
            .unwrap_or_default();
        return Err(DcnError::Checkpoint(format!(
            "{section} parameters do not match the stored config: unexpected {extra:?}"
        )));
    }
    Ok(())
}

/// Read and fully validate a checkpoint.
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CheckpointContents> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let mut r = Reader {
        inner: BufReader::new(file),
    };

    let magic = r.bytes(MAGIC.len())?;
    if magic != MAGIC {
        return Err(DcnError::Checkpoint(format!(
            "{} is not a DCN checkpoint",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(DcnError::Checkpoint(format!(
            "unsupported checkpoint version {version} (this build reads version {VERSION})"
        )));
    }
    let config_len = r.u64()?;
    if config_len > 1 << 20 {
        return Err(DcnError::Checkpoint(
            "corrupt checkpoint: config block too large".to_string(),
        ));
    }
    let config_json = r.bytes(config_len as usize)?;
    let stored_digest = r.bytes(32)?;
    let digest = Sha256::digest(&config_json);
    if digest.as_slice() != stored_digest.as_slice() {
        return Err(DcnError::Checkpoint(
            "config digest mismatch: checkpoint is corrupt or was altered".to_string(),
        ));
    }
    let config: CheckpointConfig = serde_json::from_slice(&config_json)
        .map_err(|e| DcnError::Checkpoint(format!("unreadable checkpoint config: {e}")))?;
    config.embedding.validate()?;
    config.relation.validate()?;

    let embedding = r.params()?;
    let has_relation = r.bytes(1)?[0];
    let relation = match has_relation {
        0 => None,
        1 => Some(r.params()?),
        _ => {
            return Err(DcnError::Checkpoint(
                "corrupt checkpoint: bad relation-section flag".to_string(),
            ))
        }
    };
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing).map_err(|e| io_err(path, e))? != 0 {
        return Err(DcnError::Checkpoint(
            "corrupt checkpoint: trailing data after the last section".to_string(),
        ));
    }

    // Shapes must agree with what the stored configs would construct.
    let mut rng = sub_rng(0, "checkpoint/skeleton");
    let embed_skeleton = init_embedding_params(&config.embedding, &mut rng)?;
    validate_section(&embedding, &embed_skeleton, "embedding")?;
    if let Some(relation) = &relation {
        let rel_skeleton = init_relation_params(&config.relation, &mut rng)?;
        validate_section(relation, &rel_skeleton, "relation")?;
    }

    Ok(CheckpointContents {
        embedding,
        relation,
        embed_config: config.embedding,
        rel_config: config.relation,
    })
}
