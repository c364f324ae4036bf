//! Binary dataset files.
//!
//! Layout: magic, version (u32), record count (u64), then per record the
//! scene seed (u64) followed by tagged arrays in a fixed order. Every array
//! is `dtype u8 | rank u8 | extents u32… | payload`, all little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::{DatasetRecord, CANVAS};
use crate::control::{ConditionBundle, ConditionInstance, ConditionType};
use crate::denoiser::{TokenSequence, MAX_TOKENS};
use crate::error::{Error, Result};
use crate::losses::SegmentAnnotation;
use crate::numerics::Tensor;

pub const DATASET_MAGIC: &[u8; 4] = b"FXDS";
pub const DATASET_VERSION: u32 = 1;

const DTYPE_F32: u8 = 0;
const DTYPE_U8: u8 = 1;

struct Array {
    dtype: u8,
    extents: Vec<usize>,
    f32s: Vec<f32>,
    u8s: Vec<u8>,
}

impl Array {
    fn f32(extents: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            dtype: DTYPE_F32,
            extents,
            f32s: data,
            u8s: Vec::new(),
        }
    }

    fn u8(extents: Vec<usize>, data: Vec<u8>) -> Self {
        Self {
            dtype: DTYPE_U8,
            extents,
            f32s: Vec::new(),
            u8s: data,
        }
    }

    fn write(&self, out: &mut Vec<u8>) {
        out.push(self.dtype);
        out.push(self.extents.len() as u8);
        for &e in &self.extents {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        match self.dtype {
            DTYPE_F32 => self.f32s.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            _ => out.extend_from_slice(&self.u8s),
        }
    }
}

fn f32_payload(t: &Tensor) -> Vec<f32> {
    t.data().iter().map(|&v| v as f32).collect()
}

fn u8_payload(t: &Tensor) -> Vec<u8> {
    t.data().iter().map(|&v| v as u8).collect()
}

fn indicator(tokens: &[usize]) -> Result<Vec<u8>> {
    let mut row = vec![0u8; MAX_TOKENS];
    for &i in tokens {
        *row.get_mut(i)
            .ok_or_else(|| Error::Index(format!("token position {i} outside 0..{MAX_TOKENS}")))? = 1;
    }
    Ok(row)
}

fn encode_record(rec: &DatasetRecord, out: &mut Vec<u8>) -> Result<()> {
    out.extend_from_slice(&rec.seed.to_le_bytes());
    let k = rec.bundle.instances.len();
    let j = rec.segments.len();
    let plane = CANVAS * CANVAS;

    let mut meta = Vec::with_capacity(2 * k);
    let mut maps = Vec::with_capacity(k * plane);
    let mut masks = Vec::with_capacity(k * plane);
    let mut inst_tokens = Vec::with_capacity(k * MAX_TOKENS);
    for inst in &rec.bundle.instances {
        meta.push(inst.kind.channel() as u8);
        meta.push(inst.sparse as u8);
        maps.extend(f32_payload(&inst.map));
        masks.extend(u8_payload(&inst.instance_mask));
        inst_tokens.extend(indicator(&inst.token_segment)?);
    }
    let mut seg_tokens = Vec::with_capacity(j * MAX_TOKENS);
    let mut seg_masks = Vec::with_capacity(j * plane);
    for seg in &rec.segments {
        seg_tokens.extend(indicator(&seg.token_segment)?);
        seg_masks.extend(u8_payload(&seg.mask));
    }
    let ids: Vec<u8> = rec.tokens.ids().iter().map(|&i| i as u8).collect();

    let arrays = [
        Array::f32(rec.image.shape().to_vec(), f32_payload(&rec.image)),
        Array::u8(vec![ids.len()], ids),
        Array::u8(vec![k, 2], meta),
        Array::f32(vec![k, CANVAS, CANVAS], maps),
        Array::u8(vec![k, CANVAS, CANVAS], masks),
        Array::u8(vec![k, MAX_TOKENS], inst_tokens),
        Array::u8(vec![j, MAX_TOKENS], seg_tokens),
        Array::u8(vec![j, CANVAS, CANVAS], seg_masks),
    ];
    for a in &arrays {
        a.write(out);
    }
    Ok(())
}

/// Writes `records` to `path`, replacing any existing file.
pub fn write_dataset(path: &Path, records: &[DatasetRecord]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(records.len() as u64).to_le_bytes());
    for rec in records {
        encode_record(rec, &mut out)?;
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&out)?;
    f.flush()?;
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn format_err(msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("FXDS dataset: {msg}"))
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| format_err(format!("truncated at byte {}", self.pos)))?;
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn array(&mut self, dtype: u8, rank: usize) -> Result<Array> {
        let (got_dtype, got_rank) = (self.u8()?, self.u8()? as usize);
        if got_dtype != dtype || got_rank != rank {
            return Err(format_err(format!(
                "array tag ({got_dtype}, rank {got_rank}), expected ({dtype}, rank {rank})"
            )));
        }
        let extents = (0..rank)
            .map(|_| Ok(self.u32()? as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = extents.iter().product();
        Ok(match dtype {
            DTYPE_F32 => {
                let raw = self.take(n.checked_mul(4).ok_or_else(|| format_err("array too large"))?)?;
                let data = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Array::f32(extents, data)
            }
            _ => Array::u8(extents, self.take(n)?.to_vec()),
        })
    }
}

fn tensor_f32(shape: &[usize], data: &[f32]) -> Result<Tensor> {
    Tensor::new(shape, data.iter().map(|&v| f64::from(v)).collect())
}

fn tensor_u8(shape: &[usize], data: &[u8]) -> Result<Tensor> {
    Tensor::new(shape, data.iter().map(|&v| f64::from(v)).collect())
}

fn positions(row: &[u8]) -> Vec<usize> {
    row.iter()
        .enumerate()
        .filter(|(_, &v)| v != 0)
        .map(|(i, _)| i)
        .collect()
}

fn expect_extents(a: &Array, want: &[usize], what: &str) -> Result<()> {
    if a.extents != want {
        return Err(format_err(format!("{what} extents {:?}, expected {want:?}", a.extents)));
    }
    Ok(())
}

fn decode_record(cur: &mut Cursor) -> Result<DatasetRecord> {
    let seed = cur.u64()?;
    let image = cur.array(DTYPE_F32, 3)?;
    let ids = cur.array(DTYPE_U8, 1)?;
    let meta = cur.array(DTYPE_U8, 2)?;
    let k = meta.extents[0];
    expect_extents(&meta, &[k, 2], "instance metadata")?;
    let maps = cur.array(DTYPE_F32, 3)?;
    expect_extents(&maps, &[k, CANVAS, CANVAS], "instance maps")?;
    let masks = cur.array(DTYPE_U8, 3)?;
    expect_extents(&masks, &[k, CANVAS, CANVAS], "instance masks")?;
    let inst_tokens = cur.array(DTYPE_U8, 2)?;
    expect_extents(&inst_tokens, &[k, MAX_TOKENS], "instance tokens")?;
    let seg_tokens = cur.array(DTYPE_U8, 2)?;
    let j = seg_tokens.extents[0];
    expect_extents(&seg_tokens, &[j, MAX_TOKENS], "segment tokens")?;
    let seg_masks = cur.array(DTYPE_U8, 3)?;
    expect_extents(&seg_masks, &[j, CANVAS, CANVAS], "segment masks")?;

    let plane = CANVAS * CANVAS;
    let mut instances = Vec::with_capacity(k);
    for i in 0..k {
        let kind = ConditionType::from_channel(meta.u8s[2 * i] as usize).map_err(format_err)?;
        instances.push(ConditionInstance {
            kind,
            map: tensor_f32(&[1, CANVAS, CANVAS], &maps.f32s[i * plane..(i + 1) * plane])?,
            instance_mask: tensor_u8(&[CANVAS, CANVAS], &masks.u8s[i * plane..(i + 1) * plane])?,
            token_segment: positions(&inst_tokens.u8s[i * MAX_TOKENS..(i + 1) * MAX_TOKENS]),
            sparse: meta.u8s[2 * i + 1] != 0,
        });
    }
    let segments = (0..j)
        .map(|s| {
            SegmentAnnotation::new(
                positions(&seg_tokens.u8s[s * MAX_TOKENS..(s + 1) * MAX_TOKENS]),
                tensor_u8(&[CANVAS, CANVAS], &seg_masks.u8s[s * plane..(s + 1) * plane])?,
            )
            .map_err(format_err)
        })
        .collect::<Result<Vec<_>>>()?;
    let tokens = TokenSequence::new(ids.u8s.iter().map(|&i| i as usize).collect()).map_err(format_err)?;
    Ok(DatasetRecord {
        seed,
        image: tensor_f32(&image.extents, &image.f32s)?,
        bundle: ConditionBundle { instances },
        tokens,
        segments,
    })
}

/// Reads every record of a dataset file. Fails without returning partial
/// data if the file is truncated or malformed.
pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>> {
    let buf = fs::read(path)?;
    let mut cur = Cursor { buf: &buf, pos: 0 };
    let magic = cur.take(4).map_err(|_| format_err("file shorter than the magic"))?;
    if magic != DATASET_MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}, expected \"FXDS\"")));
    }
    let version = cur.u32()?;
    if version != DATASET_VERSION {
        return Err(format_err(format!("version {version}, expected {DATASET_VERSION}")));
    }
    let count = cur.u64()?;
    let mut records = Vec::new();
    for _ in 0..count {
        records.push(decode_record(&mut cur)?);
    }
    if cur.pos != buf.len() {
        return Err(format_err(format!("{} trailing bytes", buf.len() - cur.pos)));
    }
    Ok(records)
}
