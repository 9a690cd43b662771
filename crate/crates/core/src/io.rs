//! File formats: the "ACFW" weight checkpoint (named f64 tensor records)
//! and binary P6 PPM images with a source-hash comment line. Writes go
//! through a temp-file-then-rename so failures never leave partial output.

use crate::analysis::RgbPatchImage;
use crate::connector::{AggregatorWeights, LayerNormParams, LayerWeights, TensorRef};
use crate::error::{Error, Result};
use crate::kernel::{AttentionWeights, Matrix};
use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ACFW";
pub const CHECKPOINT_VERSION: u32 = 1;

/// FNV-1a 64-bit; used to stamp image headers with their source tensor.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Hash of a matrix's f64 little-endian payload.
pub fn matrix_hash(m: &Matrix) -> u64 {
    let mut bytes = Vec::with_capacity(m.as_slice().len() * 8);
    for v in m.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fnv1a64(&bytes)
}

/// Write `bytes` to `path` atomically: temp file in the same directory,
/// then rename over the target.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(ext) => format!("{}.tmp", ext.to_string_lossy()),
        None => "tmp".to_string(),
    });
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// ACFW checkpoint
// ---------------------------------------------------------------------------

fn push_record(out: &mut Vec<u8>, name: &str, tensor: &TensorRef<'_>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    let dims = tensor.dims();
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for d in &dims {
        out.extend_from_slice(&(*d as u32).to_le_bytes());
    }
    for v in tensor.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialize weights: magic, version, then one named record per tensor in
/// a fixed order.
pub fn weights_to_bytes(w: &AggregatorWeights) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for (name, tensor) in w.tensors() {
        push_record(&mut out, &name, &tensor);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::data(format!(
                "checkpoint truncated at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

type Record = (Vec<usize>, Vec<f64>);

fn parse_records(bytes: &[u8]) -> Result<HashMap<String, Record>> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::data("not a weight checkpoint (bad magic)"));
    }
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::data(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut records = HashMap::new();
    while !cur.done() {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|_| Error::data("record name is not UTF-8"))?;
        let ndim = cur.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(cur.u32()? as usize);
        }
        let count: usize = dims.iter().product();
        let mut data = Vec::with_capacity(count);
        for _ in 0..count {
            let v = f64::from_le_bytes(cur.take(8)?.try_into().unwrap());
            if !v.is_finite() {
                return Err(Error::data(format!(
                    "record '{name}' contains a non-finite value"
                )));
            }
            data.push(v);
        }
        if records.insert(name.clone(), (dims, data)).is_some() {
            return Err(Error::data(format!("duplicate record '{name}'")));
        }
    }
    Ok(records)
}

fn take_matrix(records: &mut HashMap<String, Record>, name: &str) -> Result<Matrix> {
    let (dims, data) = records
        .remove(name)
        .ok_or_else(|| Error::data(format!("checkpoint is missing record '{name}'")))?;
    if dims.len() != 2 {
        return Err(Error::data(format!(
            "record '{name}' has {} dims, expected 2",
            dims.len()
        )));
    }
    Matrix::from_vec(dims[0], dims[1], data)
}

fn take_vec(records: &mut HashMap<String, Record>, name: &str) -> Result<Vec<f64>> {
    let (dims, data) = records
        .remove(name)
        .ok_or_else(|| Error::data(format!("checkpoint is missing record '{name}'")))?;
    if dims.len() != 1 {
        return Err(Error::data(format!(
            "record '{name}' has {} dims, expected 1",
            dims.len()
        )));
    }
    Ok(data)
}

/// Rebuild weights from checkpoint bytes. The layer count is inferred from
/// the record names; extra unknown records are rejected.
pub fn weights_from_bytes(bytes: &[u8]) -> Result<AggregatorWeights> {
    let mut records = parse_records(bytes)?;
    let n_layers = (0..)
        .take_while(|i| records.contains_key(&format!("layers.{i}.attn.wq")))
        .count();
    let adapter_w = take_matrix(&mut records, "adapter.w")?;
    let adapter_b = take_vec(&mut records, "adapter.b")?;
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let p = |s: &str| format!("layers.{i}.{s}");
        layers.push(LayerWeights {
            ln_attn: LayerNormParams {
                gain: take_vec(&mut records, &p("ln_attn.gain"))?,
                bias: take_vec(&mut records, &p("ln_attn.bias"))?,
            },
            attn: AttentionWeights {
                wq: take_matrix(&mut records, &p("attn.wq"))?,
                bq: take_vec(&mut records, &p("attn.bq"))?,
                wk: take_matrix(&mut records, &p("attn.wk"))?,
                bk: take_vec(&mut records, &p("attn.bk"))?,
                wv: take_matrix(&mut records, &p("attn.wv"))?,
                bv: take_vec(&mut records, &p("attn.bv"))?,
                wo: take_matrix(&mut records, &p("attn.wo"))?,
                bo: take_vec(&mut records, &p("attn.bo"))?,
            },
            ln_ff: LayerNormParams {
                gain: take_vec(&mut records, &p("ln_ff.gain"))?,
                bias: take_vec(&mut records, &p("ln_ff.bias"))?,
            },
            ff_w1: take_matrix(&mut records, &p("ff.w1"))?,
            ff_b1: take_vec(&mut records, &p("ff.b1"))?,
            ff_w2: take_matrix(&mut records, &p("ff.w2"))?,
            ff_b2: take_vec(&mut records, &p("ff.b2"))?,
        });
    }
    let proj_w1 = take_matrix(&mut records, "proj.w1")?;
    let proj_b1 = take_vec(&mut records, "proj.b1")?;
    let proj_w2 = take_matrix(&mut records, "proj.w2")?;
    let proj_b2 = take_vec(&mut records, "proj.b2")?;
    let query_bank = if records.contains_key("query_bank") {
        Some(take_matrix(&mut records, "query_bank")?)
    } else {
        None
    };
    if let Some(name) = records.keys().next() {
        return Err(Error::data(format!("unknown record '{name}' in checkpoint")));
    }
    Ok(AggregatorWeights {
        adapter_w,
        adapter_b,
        layers,
        proj_w1,
        proj_b1,
        proj_w2,
        proj_b2,
        query_bank,
    })
}

pub fn save_weights(path: &Path, w: &AggregatorWeights) -> Result<()> {
    atomic_write(path, &weights_to_bytes(w))
}

pub fn load_weights(path: &Path) -> Result<AggregatorWeights> {
    weights_from_bytes(&std::fs::read(path)?)
}

// ---------------------------------------------------------------------------
// PPM P6
// ---------------------------------------------------------------------------

/// Binary 8-bit P6 with one comment line recording the source tensor hash.
pub fn ppm_bytes(img: &RgbPatchImage, source_hash: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(img.pixels.len() * 3 + 64);
    out.extend_from_slice(
        format!(
            "P6\n# source-hash: {source_hash:016x}\n{} {}\n255\n",
            img.side, img.side
        )
        .as_bytes(),
    );
    for px in &img.pixels {
        out.extend_from_slice(px);
    }
    out
}

pub fn write_ppm(path: &Path, img: &RgbPatchImage, source_hash: u64) -> Result<()> {
    atomic_write(path, &ppm_bytes(img, source_hash))
}
