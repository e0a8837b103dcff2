use std::collections::BTreeMap;
use std::fs;
use std::path::{Component, Path};

use serde::{Deserialize, Serialize};

use super::{write_atomic, AttentionRun, AttentionTensor, Condition, ModelMeta, SentenceAttention, SentenceId, TokenMap};
use crate::error::{Error, Result};

pub const ATTN_MAGIC: &[u8; 4] = b"ATTN";
pub const ATTN_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 * 5;
const MANIFEST: &str = "manifest.json";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    meta: ModelMeta,
    condition: Condition,
    sentences: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    sentence_id: SentenceId,
    tensor: String,
    token_map: TokenMap,
}

/// Encodes one tensor in the `.attn` layout.
pub fn write_tensor_file(tensor: &AttentionTensor, path: &Path) -> Result<()> {
    if let Some(pos) = tensor.as_slice().iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("{} at payload offset {pos}", path.display())));
    }
    let mut bytes = Vec::with_capacity(HEADER_LEN + 4 * tensor.as_slice().len());
    bytes.extend_from_slice(ATTN_MAGIC);
    for v in [ATTN_VERSION, tensor.n_layers() as u32, tensor.n_heads() as u32, tensor.n_tok() as u32, tensor.n_tok() as u32] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    for x in tensor.as_slice() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    write_atomic(path, &bytes)
}

/// Decodes one `.attn` file.
pub fn read_tensor_file(path: &Path) -> Result<AttentionTensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < HEADER_LEN {
        return Err(Error::format(path, "truncated header"));
    }
    if &bytes[..4] != ATTN_MAGIC {
        return Err(Error::format(path, "magic-number mismatch"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let version = word(0);
    if version != ATTN_VERSION as usize {
        return Err(Error::format(path, format!("unsupported format version {version}")));
    }
    let (layers, heads, n_from, n_to) = (word(1), word(2), word(3), word(4));
    if n_from != n_to {
        return Err(Error::format(path, format!("dimension mismatch: token dims {n_from} and {n_to} differ")));
    }
    let expected = layers
        .checked_mul(heads)
        .and_then(|x| x.checked_mul(n_from))
        .and_then(|x| x.checked_mul(n_to))
        .ok_or_else(|| Error::format(path, "dimension overflow"))?;
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != expected * 4 {
        return Err(Error::format(
            path,
            format!("dimension mismatch: header needs {expected} values, file carries {} bytes", payload.len()),
        ));
    }
    let data: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    if let Some(pos) = data.iter().position(|x| !x.is_finite()) {
        return Err(Error::format(path, format!("non-finite value at payload offset {pos}")));
    }
    AttentionTensor::new(layers, heads, n_from, data)
}

fn tensor_file_name(id: &SentenceId) -> String {
    format!("{id}.attn")
}

/// Writes `run` as a directory: `manifest.json` plus one `.attn` file per
/// sentence. Output bytes depend only on the run's contents.
pub fn write_attention(run: &AttentionRun, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    for (id, s) in &run.sentences {
        if let Some(pos) = s.tensor.as_slice().iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("sentence {id}, payload offset {pos}")));
        }
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(run.sentences.len());
    for (id, s) in &run.sentences {
        let name = tensor_file_name(id);
        write_tensor_file(&s.tensor, &dir.join(&name))?;
        entries.push(ManifestEntry { sentence_id: id.clone(), tensor: name, token_map: s.token_map.clone() });
    }
    let manifest = Manifest {
        format_version: ATTN_VERSION,
        meta: run.meta.clone(),
        condition: run.condition.clone(),
        sentences: entries,
    };
    let mut bytes = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    bytes.push(b'\n');
    write_atomic(&dir.join(MANIFEST), &bytes)
}

fn is_plain_relative(p: &str) -> bool {
    let p = Path::new(p);
    !p.as_os_str().is_empty() && p.components().all(|c| matches!(c, Component::Normal(_)))
}

/// Reads an attention-run directory written by [`write_attention`].
///
/// Structural problems (corrupt files, dimensions disagreeing with the
/// manifest, non-finite payloads) are errors. Softer invariants such as row
/// sums are left to [`super::validate_run`].
pub fn load_attention(dir: impl AsRef<Path>) -> Result<AttentionRun> {
    let dir = dir.as_ref();
    let manifest_path = dir.join(MANIFEST);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Json { path: manifest_path.clone(), source: e })?;
    if manifest.format_version != ATTN_VERSION {
        return Err(Error::format(&manifest_path, format!("unsupported format version {}", manifest.format_version)));
    }
    let meta = manifest.meta;
    let mut sentences = BTreeMap::new();
    for entry in manifest.sentences {
        if !is_plain_relative(&entry.tensor) {
            return Err(Error::format(&manifest_path, format!("tensor path {:?} must be relative", entry.tensor)));
        }
        let path = dir.join(&entry.tensor);
        let tensor = read_tensor_file(&path)?;
        if tensor.n_layers() != meta.n_layers || tensor.n_heads() != meta.n_heads {
            return Err(Error::DimensionMismatch(format!(
                "{}: manifest says {} layers x {} heads, tensor file carries {} x {}",
                path.display(),
                meta.n_layers,
                meta.n_heads,
                tensor.n_layers(),
                tensor.n_heads()
            )));
        }
        if tensor.n_tok() != entry.token_map.len() {
            return Err(Error::DimensionMismatch(format!(
                "{}: token map has {} tokens, tensor has {}",
                path.display(),
                entry.token_map.len(),
                tensor.n_tok()
            )));
        }
        let id = entry.sentence_id;
        if sentences.insert(id.clone(), SentenceAttention { token_map: entry.token_map, tensor }).is_some() {
            return Err(Error::format(&manifest_path, format!("sentence {id} listed twice")));
        }
    }
    Ok(AttentionRun { meta, condition: manifest.condition, sentences })
}
