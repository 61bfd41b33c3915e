//! Checkpoint file format.
//!
//! Layout, all integers little-endian u32 unless noted:
//!
//! ```text
//! "FMDN"            magic
//! version           u32, currently 1
//! config_len, text  UTF-8 run configuration in the flat key=value form
//! epoch             u32, the epoch this snapshot was taken at
//! history_len, text UTF-8 CSV metric history (may be empty)
//! param_count       u32
//! repeated:         name_len, name bytes, rank, dims[rank], f32 payload
//! ```
//!
//! Parameters are stored as f32; training computes in f64, so a round
//! trip preserves exactly the 32-bit value of every weight. Loads are
//! strict: wrong magic, unknown version, truncation, trailing bytes,
//! or any mismatch against the config-built model are all errors.

use std::fs;
use std::path::Path;

use fmdnn_core::model::Fmdnn;
use fmdnn_core::Tensor;

use crate::config::RunConfig;
use crate::{Error, Result};

pub const MAGIC: [u8; 4] = *b"FMDN";
pub const VERSION: u32 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    pub config_text: String,
    pub epoch: u32,
    pub history_csv: String,
    /// (name, shape, f32 payload) in model creation order.
    pub params: Vec<(String, Vec<usize>, Vec<f32>)>,
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Format(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.data.len()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn text(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| Error::Format("checkpoint text is not UTF-8".into()))
    }
}

fn push_text(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

pub fn save_checkpoint(
    path: &Path,
    model: &Fmdnn,
    config_text: &str,
    epoch: u32,
    history_csv: &str,
) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    push_text(&mut out, config_text);
    out.extend_from_slice(&epoch.to_le_bytes());
    push_text(&mut out, history_csv);
    let entries = model.store.entries();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        push_text(&mut out, &e.name);
        out.extend_from_slice(&(e.value.shape.len() as u32).to_le_bytes());
        for &d in &e.value.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &e.value.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let data = fs::read(path)?;
    let mut r = Reader {
        data: &data,
        pos: 0,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::Format(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}, expected {VERSION}"
        )));
    }
    let config_text = r.text()?;
    let epoch = r.u32()?;
    let history_csv = r.text()?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.text()?;
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let bytes = r.take(4 * n)?;
        let mut payload = Vec::with_capacity(n);
        for chunk in bytes.chunks_exact(4) {
            payload.push(f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]));
        }
        params.push((name, shape, payload));
    }
    if r.pos != data.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after checkpoint payload",
            data.len() - r.pos
        )));
    }
    Ok(Checkpoint {
        config_text,
        epoch,
        history_csv,
        params,
    })
}

/// Rebuild the run configuration and model from a loaded checkpoint. The
/// stored class count must be concrete (a trained model always has one).
pub fn restore_model(ck: &Checkpoint) -> Result<(RunConfig, Fmdnn)> {
    let mut cfg = RunConfig::default();
    cfg.apply_text(&ck.config_text)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    if cfg.classes < 2 {
        return Err(Error::Format(format!(
            "checkpoint config has no class count (model.classes = {})",
            cfg.classes
        )));
    }
    let model_cfg = cfg.model_config(cfg.classes)?;
    let mut model = Fmdnn::new(model_cfg, cfg.train.seed).map_err(Error::Core)?;
    if ck.params.len() != model.store.len() {
        return Err(Error::Format(format!(
            "checkpoint has {} parameters, model expects {}",
            ck.params.len(),
            model.store.len()
        )));
    }
    for (name, shape, payload) in &ck.params {
        let id = model.store.id(name).ok_or_else(|| {
            Error::Format(format!("checkpoint parameter {name:?} not in model"))
        })?;
        let t = Tensor::new(shape, payload.iter().map(|&v| v as f64).collect())
            .map_err(|e| Error::Format(format!("parameter {name:?}: {e}")))?;
        model
            .store
            .set_value(id, t)
            .map_err(|e| Error::Format(format!("parameter {name:?}: {e}")))?;
    }
    Ok((cfg, model))
}
