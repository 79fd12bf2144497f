//! Binary weight snapshots.
//!
//! Layout: an 8-byte magic, a u32 format version, the model configuration as
//! seven u64 little-endian fields, then every component's values in canonical
//! enumeration order as raw little-endian f64. Shapes are implied by the
//! configuration, so the payload is exactly the parameters.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use super::config::ModelConfig;
use super::graph::ComputationalGraph;
use super::model::TinyTransformer;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

const MAGIC: &[u8; 8] = b"TFSNAP\0\0";
const VERSION: u32 = 1;

/// Serialize a model to its snapshot byte representation.
pub fn snapshot_bytes(model: &TinyTransformer) -> Vec<u8> {
    let cfg = model.config();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for field in [
        cfg.n_layers as u64,
        cfg.n_heads as u64,
        cfg.d_model as u64,
        cfg.d_ff as u64,
        cfg.vocab_size as u64,
        cfg.max_seq_len as u64,
        cfg.init_seed,
    ] {
        out.extend_from_slice(&field.to_le_bytes());
    }
    for id in model.graph().nodes() {
        for v in model.component(id).data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Write a snapshot file.
pub fn write_snapshot(model: &TinyTransformer, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&snapshot_bytes(model))?;
    Ok(())
}

/// Read a snapshot file back into a model.
pub fn read_snapshot(path: &Path) -> Result<TinyTransformer> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    snapshot_from_bytes(&bytes)
}

pub(crate) fn snapshot_from_bytes(bytes: &[u8]) -> Result<TinyTransformer> {
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > bytes.len() {
            return Err(Error::Integrity("snapshot truncated".into()));
        }
        let s = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(s)
    };

    if take(&mut cursor, 8)? != MAGIC {
        return Err(Error::Integrity("bad snapshot magic".into()));
    }
    let version = u32::from_le_bytes(take(&mut cursor, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(Error::Integrity(format!(
            "unsupported snapshot version {version} (expected {VERSION})"
        )));
    }
    let mut fields = [0u64; 7];
    for f in &mut fields {
        *f = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap());
    }
    let config = ModelConfig {
        n_layers: fields[0] as usize,
        n_heads: fields[1] as usize,
        d_model: fields[2] as usize,
        d_ff: fields[3] as usize,
        vocab_size: fields[4] as usize,
        max_seq_len: fields[5] as usize,
        init_seed: fields[6],
    };
    config.validate().map_err(|e| Error::Integrity(format!("bad snapshot config: {e}")))?;

    let graph = ComputationalGraph::build(&config)?;
    let mut weights = BTreeMap::new();
    for id in graph.nodes() {
        let (rows, cols) = super::model::component_shape(&config, id);
        let count = rows * cols;
        let raw = take(&mut cursor, count * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        weights.insert(*id, Tensor::matrix(rows, cols, data)?);
    }
    if cursor != bytes.len() {
        return Err(Error::Integrity("trailing bytes after snapshot payload".into()));
    }
    TinyTransformer::from_weights(config, weights)
}
