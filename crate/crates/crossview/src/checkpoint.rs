//! `CVCK` checkpoint container.
//!
//! ```text
//! "CVCK"  u32 version
//! u32 meta_len   meta_len bytes of `model.key=value` lines
//! u32 count      count × (u32 name_len, name, u64 blob_len, CVTN blob)
//! ```
//!
//! Entries are every parameter and batch-norm running statistic, in the
//! model's construction order.

use std::path::Path;

use crossview_core::{CrossViewModel, Tensor};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tnsr;

pub const MAGIC: &[u8; 4] = b"CVCK";
pub const VERSION: u32 = 1;

pub fn encode(model: &CrossViewModel<f32>, config: &RunConfig) -> Vec<u8> {
    let meta = config.model_echo();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    let entries: Vec<(&str, &Tensor<f32>)> = model.params.iter().collect();
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let blob = tnsr::encode(t);
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&blob);
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        match self.pos.checked_add(n) {
            Some(end) if end <= self.bytes.len() => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            _ => Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn text(&mut self, n: usize) -> Result<&'a str> {
        std::str::from_utf8(self.take(n)?).map_err(|_| Error::Format("checkpoint text is not UTF-8".into()))
    }
}

/// Decoded container: the stored model configuration and named tensors.
pub struct Checkpoint {
    pub config: RunConfig,
    pub entries: Vec<(String, Tensor<f32>)>,
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Format("not a CVCK checkpoint".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = c.u32()? as usize;
    let meta = c.text(meta_len)?;
    if let Some(bad) = meta.lines().find(|l| !l.starts_with("model.")) {
        return Err(Error::Format(format!("unexpected checkpoint metadata line '{bad}'")));
    }
    let config = RunConfig::from_text(meta)?;
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = c.text(n)?.to_string();
        let len = usize::try_from(c.u64()?).map_err(|_| Error::Format("blob length overflows".into()))?;
        let t = tnsr::decode::<f32>(c.take(len)?).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        entries.push((name, t));
    }
    if c.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes in checkpoint", bytes.len() - c.pos)));
    }
    Ok(Checkpoint { config, entries })
}

/// Rebuilds the model described by the checkpoint and loads every tensor.
/// Names and shapes are checked against the freshly built model before any
/// value is copied.
pub fn restore(ck: &Checkpoint) -> Result<CrossViewModel<f32>> {
    let mut model = CrossViewModel::<f32>::new(ck.config.model.clone(), ck.config.model_seed)?;
    let expected: Vec<(String, Vec<usize>)> =
        model.params.iter().map(|(n, t)| (n.to_string(), t.shape().to_vec())).collect();
    if expected.len() != ck.entries.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} tensors, the model has {}",
            ck.entries.len(),
            expected.len()
        )));
    }
    for ((name, shape), (cn, ct)) in expected.iter().zip(&ck.entries) {
        if name != cn || shape.as_slice() != ct.shape() {
            return Err(Error::Format(format!(
                "checkpoint tensor {cn} {:?} does not match model tensor {name} {shape:?}",
                ct.shape()
            )));
        }
    }
    for (name, t) in &ck.entries {
        model.params.set_value(name, t.data(), t.shape())?;
    }
    Ok(model)
}

pub fn save(path: &Path, model: &CrossViewModel<f32>, config: &RunConfig) -> Result<()> {
    std::fs::write(path, encode(model, config)).map_err(Error::io(path))
}

pub fn load(path: &Path) -> Result<(CrossViewModel<f32>, RunConfig)> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    let ck = decode(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e,
    })?;
    Ok((restore(&ck)?, ck.config))
}

/// Model keys on which `stored` and `requested` disagree (the init seed is
/// ignored).
pub fn model_mismatches(stored: &RunConfig, requested: &RunConfig) -> Vec<String> {
    let a = stored.model_echo();
    let b = requested.model_echo();
    a.lines()
        .zip(b.lines())
        .filter(|(x, y)| x != y && !x.starts_with("model.seed="))
        .map(|(x, y)| format!("checkpoint has {x}, config has {y}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crossview_core::model::CrossViewConfig;

    fn tiny_run() -> RunConfig {
        let mut c = RunConfig {
            model: CrossViewConfig::tiny(),
            ..RunConfig::default()
        };
        c.model_seed = 7;
        c
    }

    #[test]
    fn round_trip_is_exact() {
        let cfg = tiny_run();
        let model = CrossViewModel::<f32>::new(cfg.model.clone(), 3).unwrap();
        let bytes = encode(&model, &cfg);
        let back = restore(&decode(&bytes).unwrap()).unwrap();
        for ((na, ta), (nb, tb)) in model.params.iter().zip(back.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        assert_eq!(encode(&back, &cfg), bytes);
    }

    #[test]
    fn structure_mismatch_is_reported() {
        let cfg = tiny_run();
        let model = CrossViewModel::<f32>::new(cfg.model.clone(), 3).unwrap();
        let mut ck = decode(&encode(&model, &cfg)).unwrap();
        ck.config.model.d_s += 1;
        let err = restore(&ck).err().unwrap();
        assert!(err.to_string().contains("does not match"), "{err}");
        let mut other = cfg.clone();
        other.set("model.h_g", "3").unwrap();
        let diffs = model_mismatches(&cfg, &other);
        assert_eq!(diffs.len(), 1);
        assert!(diffs[0].contains("model.h_g=2"));
    }

    #[test]
    fn corrupt_bytes_are_rejected() {
        let cfg = tiny_run();
        let model = CrossViewModel::<f32>::new(cfg.model.clone(), 3).unwrap();
        let bytes = encode(&model, &cfg);
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        assert!(decode(b"CVTN\x01\x00\x00\x00").is_err());
        let mut more = bytes.clone();
        more.push(1);
        assert!(decode(&more).is_err());
    }
}
