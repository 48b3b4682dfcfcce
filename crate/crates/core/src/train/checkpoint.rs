//! Versioned checkpoint container.
//!
//! Layout: 8-byte magic, `u32` LE version, `u64` LE header length, a JSON
//! header, then raw little-endian `f64` payloads at the offsets the header
//! lists (relative to the end of the header).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::adamw::AdamState;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"EITLCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TensorKind {
    Param,
    Buffer,
    AdamM,
    AdamV,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub kind: TensorKind,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

/// Serializable position of a ChaCha8 stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed_hex: String,
    pub stream: u64,
    /// Decimal string: the word position is a `u128`.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &rand_chacha::ChaCha8Rng) -> Self {
        let seed = rng.get_seed();
        Self {
            seed_hex: seed.iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<rand_chacha::ChaCha8Rng> {
        use rand::SeedableRng;
        let bad = || Error::Checkpoint("malformed RNG state".into());
        if self.seed_hex.len() != 64 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed_hex[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let mut rng = rand_chacha::ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().map_err(|_| bad())?);
        Ok(rng)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    epoch: u64,
    step: u64,
    rng: Option<RngState>,
    adam_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub store: ParamStore,
    pub adam: Option<AdamState>,
    pub epoch: u64,
    pub step: u64,
    pub rng: Option<RngState>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut push = |name: &str, kind: TensorKind, t: &Tensor, entries: &mut Vec<TensorEntry>| {
            entries.push(TensorEntry {
                name: name.to_string(),
                kind,
                shape: t.shape().to_vec(),
                dtype: "f64".into(),
                offset: payload.len() as u64,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        };
        for (_, p) in self.store.iter() {
            let kind = if p.trainable {
                TensorKind::Param
            } else {
                TensorKind::Buffer
            };
            push(&p.name, kind, &p.value, &mut entries);
        }
        if let Some(adam) = &self.adam {
            for (id, p) in self.store.iter() {
                if let Some(Some((m, v))) = adam.moments.get(id.index()) {
                    push(&p.name, TensorKind::AdamM, m, &mut entries);
                    push(&p.name, TensorKind::AdamV, v, &mut entries);
                }
            }
        }
        let header = Header {
            version: VERSION,
            model: self.model.clone(),
            epoch: self.epoch,
            step: self.step,
            rng: self.rng.clone(),
            adam_step: self.adam.as_ref().map(|a| a.step),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated header"))?;
        let json = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
        let payload = &body[hlen..];
        let header: Header = serde_json::from_slice(json).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let mut store = ParamStore::new();
        let mut moments: Vec<(String, TensorKind, Tensor)> = Vec::new();
        let mut expected_offset = 0u64;
        for e in &header.tensors {
            if e.dtype != "f64" {
                return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", e.name, e.dtype)));
            }
            if e.offset != expected_offset {
                return Err(Error::Checkpoint(format!(
                    "{}: offset {} out of order",
                    e.name, e.offset
                )));
            }
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let raw = payload
                .get(start..start + 8 * n)
                .ok_or_else(|| Error::Checkpoint(format!("{}: payload truncated", e.name)))?;
            expected_offset += 8 * n as u64;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(&e.shape, data).map_err(|err| Error::Checkpoint(format!("{}: {err}", e.name)))?;
            match e.kind {
                TensorKind::Param | TensorKind::Buffer => {
                    if store.id(&e.name).is_some() {
                        return Err(Error::Checkpoint(format!("duplicate tensor {}", e.name)));
                    }
                    store.add(e.name.clone(), t, e.kind == TensorKind::Param);
                }
                k => moments.push((e.name.clone(), k, t)),
            }
        }
        if expected_offset as usize != payload.len() {
            return Err(bad("trailing bytes after payload"));
        }
        let adam = match header.adam_step {
            Some(step) => {
                let mut st = AdamState::new(&store);
                st.step = step;
                let mut pending: Option<(String, Tensor)> = None;
                for (name, kind, t) in moments {
                    match (kind, pending.take()) {
                        (TensorKind::AdamM, None) => pending = Some((name, t)),
                        (TensorKind::AdamV, Some((mname, m))) if mname == name => {
                            let id = store
                                .id(&name)
                                .ok_or_else(|| Error::Checkpoint(format!("moment for unknown {name}")))?;
                            st.moments[id.index()] = Some((m, t));
                        }
                        _ => return Err(bad("optimizer moments are not paired")),
                    }
                }
                if pending.is_some() {
                    return Err(bad("optimizer moments are not paired"));
                }
                Some(st)
            }
            None if moments.is_empty() => None,
            None => return Err(bad("optimizer moments without a step count")),
        };
        Ok(Self {
            model: header.model,
            store,
            adam,
            epoch: header.epoch,
            step: header.step,
            rng: header.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        // Write then rename so an interrupted save never clobbers a good file.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
