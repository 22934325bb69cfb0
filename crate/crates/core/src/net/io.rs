//! `SMDL` model files: magic, version byte, architecture block (u32 LE
//! conv count, conv widths, embedding width, head width), then every
//! parameter as f32 LE in declaration order.

use std::path::Path;

use super::model::{ArchConfig, SiameseModel};
use crate::error::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"SMDL";
pub const MODEL_VERSION: u8 = 1;

pub fn encode_model(model: &SiameseModel) -> Vec<u8> {
    let arch = model.arch();
    let mut out = Vec::with_capacity(16 + 4 * model.param_count());
    out.extend_from_slice(MODEL_MAGIC);
    out.push(MODEL_VERSION);
    out.extend_from_slice(&(arch.conv_channels.len() as u32).to_le_bytes());
    for &c in &arch.conv_channels {
        out.extend_from_slice(&(c as u32).to_le_bytes());
    }
    out.extend_from_slice(&(arch.embed_dim as u32).to_le_bytes());
    out.extend_from_slice(&(arch.head_hidden as u32).to_le_bytes());
    for p in model.params() {
        for &w in p {
            out.extend_from_slice(&(w as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::ModelFormat(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<SiameseModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MODEL_MAGIC {
        return Err(Error::ModelFormat("bad magic".into()));
    }
    let version = r.take(1)?[0];
    if version != MODEL_VERSION {
        return Err(Error::ModelFormat(format!("unsupported version {version}")));
    }
    let n_conv = r.u32()?;
    if n_conv > 16 {
        return Err(Error::ModelFormat(format!("implausible conv count {n_conv}")));
    }
    let conv_channels = (0..n_conv).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let arch = ArchConfig { conv_channels, embed_dim: r.u32()?, head_hidden: r.u32()? };
    arch.validate().map_err(|e| Error::ModelFormat(e.to_string()))?;
    let mut model = SiameseModel::zeros(arch)?;
    let needed = 4 * model.param_count();
    if bytes.len() - r.pos != needed {
        return Err(Error::ModelFormat(format!("expected {needed} weight bytes, found {}", bytes.len() - r.pos)));
    }
    for p in model.params_mut() {
        for w in p.iter_mut() {
            *w = f32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes")) as f64;
        }
    }
    Ok(model)
}

pub fn save_model(model: &SiameseModel, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_model(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<SiameseModel> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::FileNotFound(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    decode_model(&bytes)
}
