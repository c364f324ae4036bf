//! Checkpoint files.
//!
//! Layout: magic, version (u32), config text (u32 length + UTF-8), tensor
//! count (u32), then per tensor `name (u32 length + UTF-8) | dtype u8 |
//! rank u8 | extents u32… | payload`, and finally the CRC32 of every
//! preceding byte. All integers are little-endian. Weights are stored as
//! f64 so a reload reproduces forward passes bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::config::{parse_kv, TrainConfig};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FXEC";
pub const CHECKPOINT_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_F64: u8 = 2;

const KEY_STEP: &str = "state.step";
const KEY_RNG_SEED: &str = "state.rng_seed";
const KEY_RNG_POS: &str = "state.rng_word_pos";

/// Position of the training data stream, enough to resume sampling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    pub rng: RngState,
    pub store: ParamStore,
}

fn ckpt_err(msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("FXEC checkpoint: {msg}"))
}

impl Checkpoint {
    fn config_blob(&self) -> String {
        let mut s = self.config.to_text();
        s.push_str(&format!("{KEY_STEP} = {}\n", self.step));
        s.push_str(&format!("{KEY_RNG_SEED} = {}\n", self.rng.seed));
        s.push_str(&format!("{KEY_RNG_POS} = {}\n", self.rng.word_pos));
        s
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let blob = self.config_blob();
        out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        out.extend_from_slice(blob.as_bytes());
        out.extend_from_slice(&(self.store.len() as u32).to_le_bytes());
        for (name, t) in self.store.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F64);
            out.push(t.rank() as u8);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(ckpt_err("bad magic, expected \"FXEC\""));
        }
        if bytes.len() < 16 {
            return Err(ckpt_err("truncated header"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(body) != stored {
            return Err(ckpt_err("CRC mismatch"));
        }
        let mut cur = Reader { buf: body, pos: 4 };
        let version = cur.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(ckpt_err(format!("version {version}, expected {CHECKPOINT_VERSION}")));
        }
        let blob_len = cur.u32()? as usize;
        let blob = std::str::from_utf8(cur.take(blob_len)?).map_err(|_| ckpt_err("config is not UTF-8"))?;
        let (config, step, rng) = parse_blob(blob)?;

        let count = cur.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| ckpt_err("tensor name is not UTF-8"))?
                .to_string();
            let dtype = cur.u8()?;
            let rank = cur.u8()? as usize;
            let shape = (0..rank).map(|_| Ok(cur.u32()? as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data: Vec<f64> = match dtype {
                DTYPE_F64 => cur
                    .take(n * 8)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                DTYPE_F32 => cur
                    .take(n * 4)?
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                    .collect(),
                other => return Err(ckpt_err(format!("unsupported dtype tag {other} for {name}"))),
            };
            if store.contains(&name) {
                return Err(ckpt_err(format!("duplicate tensor {name}")));
            }
            store.insert(name, Tensor::new(&shape, data)?);
        }
        if cur.pos != body.len() {
            return Err(ckpt_err(format!("{} trailing bytes", body.len() - cur.pos)));
        }
        Ok(Self {
            config,
            step,
            rng,
            store,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

fn parse_blob(blob: &str) -> Result<(TrainConfig, u64, RngState)> {
    let mut map: BTreeMap<String, String> = parse_kv(blob)?;
    let mut take = |k: &str| -> Result<String> { map.remove(k).ok_or_else(|| ckpt_err(format!("missing {k}"))) };
    let num = |k: &str, v: String| -> Result<u128> { v.parse().map_err(|_| ckpt_err(format!("{k}: bad value {v:?}"))) };
    let step = num(KEY_STEP, take(KEY_STEP)?)? as u64;
    let seed = num(KEY_RNG_SEED, take(KEY_RNG_SEED)?)? as u64;
    let word_pos = num(KEY_RNG_POS, take(KEY_RNG_POS)?)?;
    let config = TrainConfig::from_map(map)?;
    Ok((config, step, RngState { seed, word_pos }))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| ckpt_err(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}
