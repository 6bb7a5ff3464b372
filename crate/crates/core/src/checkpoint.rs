//! Binary checkpoints: parameters, optimizer moments, step counter and the
//! resolved configuration text.
//!
//! Little-endian throughout, version byte first:
//!
//! ```text
//! u8  version (= 1)
//! u64 step
//! u32 config length, UTF-8 config text
//! u32 entry count, then per entry:
//!     u16 name length, name bytes
//!     u8  dim count, u32 dims...
//!     u8  flags (bit0 trainable, bit1 moments present)
//!     f32 data[numel]
//!     f32 m[numel], f32 v[numel]     (when bit1 set)
//! ```
//!
//! Floats are stored bit-exactly; save -> load round-trips identically.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::config::Config;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::training::AdamState;

const VERSION: u8 = 1;

#[derive(Debug, Clone)]
pub struct CheckpointEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
    pub trainable: bool,
    pub moments: Option<(Vec<f32>, Vec<f32>)>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub config_text: String,
    pub entries: Vec<CheckpointEntry>,
}

pub fn save(path: &Path, model: &Model, adam: Option<&AdamState>, step: u64) -> Result<()> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    out.write_all(&[VERSION])?;
    out.write_all(&step.to_le_bytes())?;
    let cfg = model.cfg.to_text();
    out.write_all(&(cfg.len() as u32).to_le_bytes())?;
    out.write_all(cfg.as_bytes())?;
    out.write_all(&(model.store.len() as u32).to_le_bytes())?;
    for (i, e) in model.store.entries().iter().enumerate() {
        out.write_all(&(e.name.len() as u16).to_le_bytes())?;
        out.write_all(e.name.as_bytes())?;
        out.write_all(&[e.shape.len() as u8])?;
        for &d in &e.shape {
            out.write_all(&(d as u32).to_le_bytes())?;
        }
        let with_moments = adam.is_some_and(|a| e.trainable && !a.m[i].is_empty());
        let flags = (e.trainable as u8) | ((with_moments as u8) << 1);
        out.write_all(&[flags])?;
        for v in &e.data {
            out.write_all(&v.to_le_bytes())?;
        }
        if with_moments {
            let a = adam.unwrap();
            for v in &a.m[i] {
                out.write_all(&v.to_le_bytes())?;
            }
            for v in &a.v[i] {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

struct Reader {
    bytes: Vec<u8>,
    pos: usize,
    path: String,
}

impl Reader {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::data(format!(
                "{}: truncated checkpoint reading {what} at byte {}",
                self.path, self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let raw = self.take(4 * n, what)?;
        Ok(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let file = File::open(path)?;
    let mut bytes = Vec::new();
    BufReader::new(file).read_to_end(&mut bytes)?;
    let mut r = Reader { bytes, pos: 0, path: path.display().to_string() };
    let version = r.u8("version")?;
    if version != VERSION {
        return Err(Error::data(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let step = r.u64("step")?;
    let cfg_len = r.u32("config length")? as usize;
    let config_text = String::from_utf8(r.take(cfg_len, "config text")?.to_vec())
        .map_err(|_| Error::data(format!("{}: config text not UTF-8", path.display())))?;
    let count = r.u32("entry count")? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u16("name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "name")?.to_vec())
            .map_err(|_| Error::data(format!("{}: entry name not UTF-8", path.display())))?;
        let ndim = r.u8("dim count")? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dim")? as usize);
        }
        let flags = r.u8("flags")?;
        let numel: usize = shape.iter().product();
        let data = r.f32s(numel, &name)?;
        let moments = if flags & 2 != 0 {
            let m = r.f32s(numel, "moment m")?;
            let v = r.f32s(numel, "moment v")?;
            Some((m, v))
        } else {
            None
        };
        entries.push(CheckpointEntry { name, shape, data, trainable: flags & 1 != 0, moments });
    }
    Ok(Checkpoint { step, config_text, entries })
}

impl Checkpoint {
    pub fn config(&self) -> Result<Config> {
        Config::parse(&self.config_text)
    }

    /// Rebuild the model (and optimizer state, when present) this checkpoint
    /// describes. Missing or mis-shaped parameters become config errors
    /// listing the offending keys.
    pub fn instantiate(&self) -> Result<(Model, AdamState)> {
        let cfg = self.config()?;
        let mut model = Model::new(cfg)?;
        let named: Vec<(String, Vec<usize>, Vec<f32>)> = self
            .entries
            .iter()
            .map(|e| (e.name.clone(), e.shape.clone(), e.data.clone()))
            .collect();
        model.store.load_named(&named)?;
        let mut adam = AdamState::new(&model.store);
        adam.step = self.step;
        for (i, e) in model.store.entries().iter().enumerate() {
            if let Some(src) = self.entries.iter().find(|c| c.name == e.name) {
                if let Some((m, v)) = &src.moments {
                    adam.m[i] = m.clone();
                    adam.v[i] = v.clone();
                }
            }
        }
        Ok((model, adam))
    }
}
