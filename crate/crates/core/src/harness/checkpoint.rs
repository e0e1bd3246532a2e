//! Binary checkpoints.
//!
//! ```text
//! "DMT2"                      magic
//! u32 BE                      format version
//! u64 LE + bytes              configuration text
//! u32 LE                      tensor count
//!   u32 LE + bytes            name
//!   u32 LE, u64 LE × rank     shape
//!   f32 LE × numel            values
//! u32 LE                      CRC-32 of everything above
//! ```

use super::config::TrainConfig;
use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::model::TrackerModel;
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"DMT2";
pub const VERSION: u32 = 1;

pub fn to_bytes(cfg: &TrainConfig, model: &TrackerModel) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_be_bytes());
    let text = cfg.to_text();
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&(model.params.len() as u32).to_le_bytes());
    for (_, name, t) in model.params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Malformed(format!("record at byte {} runs past the end", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Malformed("text is not UTF-8".into()))
    }
}

/// Parse a checkpoint: magic, then version, then checksum, then contents.
pub fn from_bytes(bytes: &[u8]) -> Result<(TrainConfig, TrackerModel)> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 8 {
        return Err(Error::Checksum("file ends inside the header".into()));
    }
    let version = u32::from_be_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Version { found: version, expected: VERSION });
    }
    if bytes.len() < 12 {
        return Err(Error::Checksum("file ends before the checksum".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Checksum(format!("stored {stored:08x}, computed {actual:08x}")));
    }

    let mut r = Reader { buf: body, pos: 8 };
    let text_len = r.u64()? as usize;
    let text = r.string(text_len)?;
    let cfg = TrainConfig::from_text(&text)?;
    let mut model = TrackerModel::new(cfg.model.clone(), cfg.seed)?;
    let count = r.u32()? as usize;
    if count != model.params.len() {
        return Err(Error::Malformed(format!(
            "{count} tensors stored, the configured model has {}",
            model.params.len()
        )));
    }
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = r.string(name_len)?;
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let id = model
            .params
            .id(&name)
            .ok_or_else(|| Error::Malformed(format!("unknown tensor {name:?}")))?;
        if model.params.get(id).shape() != shape.as_slice() {
            return Err(Error::Malformed(format!(
                "tensor {name} has shape {shape:?}, expected {:?}",
                model.params.get(id).shape()
            )));
        }
        let numel: usize = shape.iter().product();
        let raw = r.take(numel * 4)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        *model.params.get_mut(id) = Tensor::new(shape, data)?;
    }
    if r.pos != body.len() {
        return Err(Error::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok((cfg, model))
}

pub fn save_checkpoint(cfg: &TrainConfig, model: &TrackerModel, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(cfg, model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(TrainConfig, TrackerModel)> {
    from_bytes(&std::fs::read(path)?)
}
