//! ANYD1 container: magic, little-endian u64 manifest length, JSON manifest,
//! then every tensor as little-endian f64 in manifest order.

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{AnydError, Result};
use crate::planner::ModelConfig;

pub const MAGIC: &[u8; 5] = b"ANYD1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in bytes.
    pub byte_offset: usize,
    pub table: bool,
}

/// Byte range of the region-embedding table within the payload.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableRegion {
    pub byte_offset: usize,
    pub byte_len: usize,
    pub region_names: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format: String,
    pub config: Option<ModelConfig>,
    pub params: Vec<ManifestEntry>,
    pub table: Option<TableRegion>,
    pub meta: Option<serde_json::Value>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlobEntry {
    pub name: String,
    pub value: Tensor,
    pub table: bool,
}

/// Decoded (or to-be-encoded) container contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Blob {
    pub config: Option<ModelConfig>,
    pub region_names: Option<Vec<String>>,
    pub meta: Option<serde_json::Value>,
    pub entries: Vec<BlobEntry>,
}

impl Blob {
    pub fn has_table(&self) -> bool {
        self.entries.iter().any(|e| e.table)
    }
}

/// Table entries must follow all other entries so the table is one contiguous
/// byte range at the end of the payload.
pub fn encode_blob(blob: &Blob) -> Vec<u8> {
    let mut params = Vec::with_capacity(blob.entries.len());
    let mut offset = 0;
    let mut table_start = None;
    for e in &blob.entries {
        if e.table && table_start.is_none() {
            table_start = Some(offset);
        }
        assert!(e.table || table_start.is_none(), "table entries must come last");
        params.push(ManifestEntry {
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
            byte_offset: offset,
            table: e.table,
        });
        offset += e.value.len() * 8;
    }
    let table = table_start.map(|start| TableRegion {
        byte_offset: start,
        byte_len: offset - start,
        region_names: blob.region_names.clone().unwrap_or_default(),
    });
    let manifest =
        Manifest { format: "ANYD1".into(), config: blob.config.clone(), params, table, meta: blob.meta.clone() };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for e in &blob.entries {
        for v in e.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Splits a container into its manifest and payload without decoding tensors.
pub fn split_blob(bytes: &[u8]) -> Result<(Manifest, &[u8])> {
    let bad = |msg: &str| AnydError::ModelFile(msg.to_string());
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("missing ANYD1 magic"));
    }
    let len_bytes: [u8; 8] = bytes[MAGIC.len()..MAGIC.len() + 8].try_into().unwrap();
    let len = u64::from_le_bytes(len_bytes) as usize;
    let start = MAGIC.len() + 8;
    let end = start.checked_add(len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[start..end]).map_err(|e| AnydError::ModelFile(format!("manifest: {e}")))?;
    if manifest.format != "ANYD1" {
        return Err(bad("unknown format tag"));
    }
    Ok((manifest, &bytes[end..]))
}

pub fn decode_blob(bytes: &[u8]) -> Result<Blob> {
    let (manifest, payload) = split_blob(bytes)?;
    let mut entries = Vec::with_capacity(manifest.params.len());
    let mut expected = 0;
    for p in &manifest.params {
        let n: usize = p.shape.iter().product();
        if p.byte_offset != expected || p.byte_offset + n * 8 > payload.len() {
            return Err(AnydError::ModelFile(format!("{}: bad byte range", p.name)));
        }
        let data = payload[p.byte_offset..p.byte_offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let value = Tensor::new(p.shape.clone(), data).map_err(|e| AnydError::ModelFile(format!("{}: {e}", p.name)))?;
        entries.push(BlobEntry { name: p.name.clone(), value, table: p.table });
        expected += n * 8;
    }
    if expected != payload.len() {
        return Err(AnydError::ModelFile(format!("{} trailing payload bytes", payload.len() - expected)));
    }
    Ok(Blob {
        config: manifest.config,
        region_names: manifest.table.map(|t| t.region_names),
        meta: manifest.meta,
        entries,
    })
}
