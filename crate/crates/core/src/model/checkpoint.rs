// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-file checkpoints: `CLNS1`, a little-endian `u64` manifest length, a JSON
//! manifest listing every tensor's name, shape and byte offset, then the `f32` payload.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::weights::tensor_shapes;
use super::{ModelSpec, Tensors, Weights};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 5] = b"CLNS1";

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    spec: ModelSpec,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

/// Serialize to any writer.
pub fn write_checkpoint<W: Write>(weights: &Weights, mut w: W) -> Result<()> {
    let mut offset = 0;
    let tensors = tensor_shapes(&weights.spec)
        .into_iter()
        .map(|(name, shape)| {
            let e = TensorEntry { name, offset, shape };
            offset += e.shape.iter().product::<usize>() * 4;
            e
        })
        .collect();
    let manifest = serde_json::to_vec(&Manifest {
        spec: weights.spec.clone(),
        tensors,
    })?;
    w.write_all(MAGIC)?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(&manifest)?;
    w.write_all(&weights.payload_bytes())?;
    Ok(())
}

/// Parse from any reader.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Weights> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::MalformedCheckpoint("bad magic".into()));
    }
    let mut len = [0u8; 8];
    len.copy_from_slice(&bytes[5..13]);
    let len = u64::from_le_bytes(len) as usize;
    let body = &bytes[13..];
    if len > body.len() {
        return Err(Error::MalformedCheckpoint(format!(
            "manifest length {len} exceeds file size"
        )));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..len]).map_err(|e| Error::MalformedCheckpoint(format!("manifest: {e}")))?;
    let payload = &body[len..];
    manifest
        .spec
        .validate()
        .map_err(|e| Error::MalformedCheckpoint(e.to_string()))?;
    let spec = manifest.spec;
    let expected = tensor_shapes(&spec);
    if manifest.tensors.len() != expected.len() {
        return Err(Error::MalformedCheckpoint(format!(
            "{} tensors listed, {} expected",
            manifest.tensors.len(),
            expected.len()
        )));
    }
    let mut tensors = Tensors::filled(&spec, 0.0f32);
    for ((name, shape), slot) in expected.iter().zip(tensors.slices_mut()) {
        let entry = manifest
            .tensors
            .iter()
            .find(|e| &e.name == name)
            .ok_or_else(|| Error::MalformedCheckpoint(format!("missing tensor `{name}`")))?;
        if &entry.shape != shape {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                manifest: entry.shape.clone(),
                expected: shape.clone(),
            });
        }
        let n = slot.len();
        let end = entry.offset + 4 * n;
        if end > payload.len() {
            return Err(Error::TruncatedPayload {
                needed: end,
                found: payload.len(),
            });
        }
        for (x, chunk) in slot.iter_mut().zip(payload[entry.offset..end].chunks_exact(4)) {
            *x = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        }
    }
    let w = Weights { spec, tensors };
    if !w.is_finite() {
        return Err(Error::MalformedCheckpoint("non-finite weights".into()));
    }
    Ok(w)
}

pub fn save_checkpoint(weights: &Weights, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(f);
    write_checkpoint(weights, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Weights> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    read_checkpoint(std::io::BufReader::new(std::fs::File::open(path)?))
}
