//! Checkpoint serialization.
//!
//! Layout: magic "RFSG", version u32 LE, entry count u32 LE, then per
//! entry: name length u16 LE + UTF-8 name, rank u32 LE, extents u32 LE
//! each, float32 LE payload. A trailing u64 LE FNV-1a checksum over
//! everything after the magic+version prefix detects payload corruption.
//!
//! Optimizer state rides along under the reserved "adam." name prefix and
//! run metadata under "meta."; both are stripped from the model parameters
//! on load.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::gradcore::{AdamState, ModelParams, Tensor};
use crate::model::ModelConfig;
use crate::util::fnv1a64;

pub const MAGIC: [u8; 4] = *b"RFSG";
pub const VERSION: u32 = 1;

const ADAM_PREFIX: &str = "adam.";
const META_PREFIX: &str = "meta.";

fn push_entry(buf: &mut Vec<u8>, name: &str, shape: &[usize], data: &[f32]) {
    buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for &e in shape {
        buf.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize model parameters, optimizer state, and the model/run
/// configuration. Deterministic byte stream: entries in sorted name order.
pub fn encode_checkpoint(
    params: &ModelParams,
    adam: &AdamState,
    cfg: &ModelConfig,
    beta: f32,
) -> Vec<u8> {
    let mut entries: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for (name, entry) in params.iter() {
        entries.insert(name.clone(), (entry.tensor.shape().to_vec(), entry.tensor.data().to_vec()));
    }
    for (name, (m, v)) in &adam.moments {
        entries.insert(format!("{ADAM_PREFIX}m.{name}"), (vec![m.len()], m.clone()));
        entries.insert(format!("{ADAM_PREFIX}v.{name}"), (vec![v.len()], v.clone()));
    }
    entries.insert(
        format!("{ADAM_PREFIX}state"),
        (vec![5], vec![adam.step_count as f32, adam.lr, adam.beta1, adam.beta2, adam.eps]),
    );
    entries.insert(
        format!("{META_PREFIX}config"),
        (
            vec![8],
            vec![
                cfg.stages as f32,
                cfg.base_width as f32,
                cfg.blocks_per_stage as f32,
                cfg.proj_dim as f32,
                cfg.num_classes as f32,
                cfg.input_size.0 as f32,
                cfg.input_size.1 as f32,
                beta,
            ],
        ),
    );

    let mut body = Vec::new();
    body.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, (shape, data)) in &entries {
        push_entry(&mut body, name, shape, data);
    }
    let checksum = fnv1a64(&body);

    let mut out = Vec::with_capacity(MAGIC.len() + 4 + body.len() + 8);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

pub struct Checkpoint {
    pub params: ModelParams,
    pub adam: AdamState,
    pub config: ModelConfig,
    pub beta: f32,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "truncated at byte {} (need {n} more of {})",
                self.pos,
                self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n * 4)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 {
        return Err(Error::CorruptCheckpoint(format!("{} bytes is too short", bytes.len())));
    }
    if bytes[..4] != MAGIC {
        return Err(Error::IncompatibleCheckpoint(format!(
            "bad magic {:?}",
            &bytes[..4.min(bytes.len())]
        )));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::IncompatibleCheckpoint(format!(
            "version {version}, this build reads {VERSION}"
        )));
    }
    let body = &bytes[8..bytes.len() - 8];
    let stored = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
    let computed = fnv1a64(body);
    if stored != computed {
        return Err(Error::CorruptCheckpoint(format!(
            "checksum mismatch: stored {stored:#x}, computed {computed:#x}"
        )));
    }

    let mut cur = Cursor { buf: body, pos: 0 };
    let count = cur.u32()? as usize;
    let mut raw: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|e| Error::CorruptCheckpoint(format!("non-UTF8 entry name: {e}")))?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = cur.f32s(numel)?;
        raw.insert(name, (shape, data));
    }
    if cur.pos != body.len() {
        return Err(Error::CorruptCheckpoint(format!(
            "{} trailing bytes after {count} entries",
            body.len() - cur.pos
        )));
    }

    let (_, meta) = raw
        .remove(&format!("{META_PREFIX}config"))
        .ok_or_else(|| Error::IncompatibleCheckpoint("missing meta.config entry".into()))?;
    if meta.len() != 8 {
        return Err(Error::CorruptCheckpoint(format!("meta.config holds {} values", meta.len())));
    }
    let config = ModelConfig {
        stages: meta[0] as usize,
        base_width: meta[1] as usize,
        blocks_per_stage: meta[2] as usize,
        proj_dim: meta[3] as usize,
        num_classes: meta[4] as usize,
        input_size: (meta[5] as usize, meta[6] as usize),
    };
    let beta = meta[7];

    let (_, st) = raw
        .remove(&format!("{ADAM_PREFIX}state"))
        .ok_or_else(|| Error::IncompatibleCheckpoint("missing adam.state entry".into()))?;
    if st.len() != 5 {
        return Err(Error::CorruptCheckpoint(format!("adam.state holds {} values", st.len())));
    }
    let mut adam = AdamState::new(st[1]);
    adam.step_count = st[0] as u64;
    adam.beta1 = st[2];
    adam.beta2 = st[3];
    adam.eps = st[4];

    let mut params = ModelParams::new();
    let mut adam_m: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    let mut adam_v: BTreeMap<String, Vec<f32>> = BTreeMap::new();
    for (name, (shape, data)) in raw {
        if let Some(rest) = name.strip_prefix(ADAM_PREFIX) {
            if let Some(p) = rest.strip_prefix("m.") {
                adam_m.insert(p.to_string(), data);
            } else if let Some(p) = rest.strip_prefix("v.") {
                adam_v.insert(p.to_string(), data);
            } else {
                return Err(Error::CorruptCheckpoint(format!("unknown optimizer entry '{name}'")));
            }
        } else {
            let trainable = !name.ends_with(".running");
            params.insert(name, Tensor::new(shape, data)?, trainable);
        }
    }
    for (name, m) in adam_m {
        let v = adam_v
            .remove(&name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("moment v missing for '{name}'")))?;
        adam.moments.insert(name, (m, v));
    }
    if let Some(name) = adam_v.keys().next() {
        return Err(Error::CorruptCheckpoint(format!("moment m missing for '{name}'")));
    }

    Ok(Checkpoint { params, adam, config, beta })
}

pub fn save_checkpoint(
    params: &ModelParams,
    adam: &AdamState,
    cfg: &ModelConfig,
    beta: f32,
    path: impl AsRef<Path>,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(params, adam, cfg, beta))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    decode_checkpoint(&bytes)
}
