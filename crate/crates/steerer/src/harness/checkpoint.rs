//! Versioned binary checkpoints: header magic "STEERCKPT", little-endian
//! fields, a config snapshot, metric history, and every model tensor.

use std::fs;
use std::io::{BufRead, Cursor, Write};
use std::path::Path;

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::SteererModel;
use crate::tensor::{read_named_tensors, write_named_tensors, Tensor};

pub const MAGIC: &[u8; 9] = b"STEERCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub epoch: u32,
    pub history: Vec<String>,
    pub tensors: Vec<(String, Tensor)>,
}

pub fn save(
    path: &Path,
    model: &SteererModel,
    config: &RunConfig,
    epoch: u32,
    history: &[String],
) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&epoch.to_le_bytes());
    let cfg_text = config.to_text();
    buf.extend_from_slice(&(cfg_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg_text.as_bytes());
    let history_text = history.join("\n");
    buf.extend_from_slice(&(history_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(history_text.as_bytes());
    let state = model.named_state();
    let items: Vec<(String, &Tensor)> = state.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_named_tensors(&mut buf, &items, path)?;

    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadCheckpointMagic { path: path.into() });
    }
    let mut pos = MAGIC.len();
    let take_u32 = |bytes: &[u8], pos: &mut usize| -> Result<u32> {
        if bytes.len() < *pos + 4 {
            return Err(Error::parse(path, 0, "truncated checkpoint"));
        }
        let v = u32::from_le_bytes(bytes[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        Ok(v)
    };
    let version = take_u32(&bytes, &mut pos)?;
    if version != VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            supported: VERSION,
        });
    }
    let epoch = take_u32(&bytes, &mut pos)?;
    let cfg_len = take_u32(&bytes, &mut pos)? as usize;
    if bytes.len() < pos + cfg_len {
        return Err(Error::parse(path, 0, "truncated config snapshot"));
    }
    let cfg_text = std::str::from_utf8(&bytes[pos..pos + cfg_len])
        .map_err(|_| Error::parse(path, 0, "config snapshot is not UTF-8"))?;
    let config = RunConfig::parse_text(cfg_text, path)?;
    pos += cfg_len;
    let hist_len = take_u32(&bytes, &mut pos)? as usize;
    if bytes.len() < pos + hist_len {
        return Err(Error::parse(path, 0, "truncated history"));
    }
    let history_text = std::str::from_utf8(&bytes[pos..pos + hist_len])
        .map_err(|_| Error::parse(path, 0, "history is not UTF-8"))?;
    let history = if history_text.is_empty() {
        Vec::new()
    } else {
        history_text.lines().map(String::from).collect()
    };
    pos += hist_len;

    let mut cursor = Cursor::new(&bytes[pos..]);
    let tensors = read_named_tensors(&mut cursor, path)?;
    let trailing = !cursor.fill_buf().map_err(|e| Error::io(path, e))?.is_empty();
    if trailing {
        return Err(Error::parse(path, 0, "trailing bytes after tensor block"));
    }
    Ok(Checkpoint {
        config,
        epoch,
        history,
        tensors,
    })
}

/// Rebuild the model a checkpoint describes and load its state.
pub fn restore_model(ckpt: &Checkpoint) -> Result<SteererModel> {
    let mut model = SteererModel::new(ckpt.config.model, ckpt.config.seed)?;
    model.load_state(&ckpt.tensors)?;
    Ok(model)
}
