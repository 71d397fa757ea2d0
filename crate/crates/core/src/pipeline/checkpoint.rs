//! Binary checkpoints.
//!
//! Layout (little endian):
//!
//! ```text
//! "GSCK"  u8 version  u64 step
//! u32 config length, config text (UTF-8, key=value lines)
//! u8 flags: bit 0 global encoder trained, bit 1 flow initialized,
//!           bit 2 codebooks initialized
//! u32 parameter count, then per parameter:
//!     u16 name length, name, GSTN tensor,
//!     u8 has_moments, and if 1: u64 t, GSTN m, GSTN v
//! ```
//!
//! Parameters and optimizer moments are kept in single precision during
//! training, so the `f32` payload restores them exactly.

use std::path::Path;

use melstyle_autograd::{Adam, AdamConfig, Moments, Tensor};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::pipeline::model::{Model, ModelState};

pub const MAGIC: &[u8; 4] = b"GSCK";
pub const VERSION: u8 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamRecord {
    pub name: String,
    pub value: Tensor,
    pub moments: Option<Moments>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub step: u64,
    pub state: ModelState,
    pub params: Vec<ParamRecord>,
}

fn fmt_err(detail: impl Into<String>) -> Error {
    Error::Format { what: "checkpoint", detail: detail.into() }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| fmt_err(format!("truncated while reading {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self, what: &str) -> Result<Tensor> {
        let (t, used) = Tensor::read_gstn_prefix(&self.bytes[self.pos..])
            .map_err(|e| fmt_err(format!("{what}: {e}")))?;
        self.pos += used;
        Ok(t)
    }
}

impl Checkpoint {
    pub fn capture(config: &Config, model: &Model, adam: &Adam, step: u64) -> Self {
        let params = model
            .params
            .iter()
            .map(|(id, name, t)| ParamRecord { name: name.to_string(), value: t.clone(), moments: adam.moments(id).cloned() })
            .collect();
        Checkpoint { config: config.clone(), step, state: model.state, params }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.step.to_le_bytes());
        let text = self.config.to_text();
        out.extend_from_slice(&(text.len() as u32).to_le_bytes());
        out.extend_from_slice(text.as_bytes());
        let s = self.state;
        out.push(s.global_trained as u8 | (s.flow_initialized as u8) << 1 | (s.codebooks_initialized as u8) << 2);
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u16).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&p.value.to_gstn());
            match &p.moments {
                None => out.push(0),
                Some(m) => {
                    out.push(1);
                    out.extend_from_slice(&m.t.to_le_bytes());
                    out.extend_from_slice(&Tensor::vector(m.m.clone()).to_gstn());
                    out.extend_from_slice(&Tensor::vector(m.v.clone()).to_gstn());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(fmt_err("bad magic, expected GSCK"));
        }
        let version = r.u8("version")?;
        if version != VERSION {
            return Err(fmt_err(format!("version mismatch: file has {version}, expected {VERSION}")));
        }
        let step = r.u64("step")?;
        let len = r.u32("config length")? as usize;
        let text = std::str::from_utf8(r.take(len, "config")?).map_err(|_| fmt_err("config is not UTF-8"))?;
        let config = Config::parse(text)?;
        let flags = r.u8("flags")?;
        if flags & !0b111 != 0 {
            return Err(fmt_err(format!("unknown flag bits {flags:#04x}")));
        }
        let state = ModelState {
            global_trained: flags & 1 != 0,
            flow_initialized: flags & 2 != 0,
            codebooks_initialized: flags & 4 != 0,
        };
        let count = r.u32("parameter count")? as usize;
        let mut params = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let n = r.u16("parameter name length")? as usize;
            let name = std::str::from_utf8(r.take(n, "parameter name")?)
                .map_err(|_| fmt_err(format!("parameter {i} name is not UTF-8")))?
                .to_string();
            let value = r.tensor(&name)?;
            let moments = match r.u8("moment flag")? {
                0 => None,
                1 => {
                    let t = r.u64("moment step")?;
                    let m = r.tensor("first moment")?.into_data();
                    let v = r.tensor("second moment")?.into_data();
                    if m.len() != value.len() || v.len() != value.len() {
                        return Err(fmt_err(format!("moments of {name} do not match its size")));
                    }
                    Some(Moments { m, v, t })
                }
                other => return Err(fmt_err(format!("bad moment flag {other} for {name}"))),
            };
            params.push(ParamRecord { name, value, moments });
        }
        if r.pos != bytes.len() {
            return Err(fmt_err(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config, step, state, params })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model and optimizer. Every parameter of the model
    /// architecture must be present with a matching shape.
    pub fn restore(&self) -> Result<(Model, Adam)> {
        let mut model = Model::new(self.config.model.clone(), self.config.train.seed)?;
        if self.params.len() != model.params.len() {
            return Err(Error::validation(format!(
                "checkpoint has {} parameters, the configured model has {}",
                self.params.len(),
                model.params.len()
            )));
        }
        let mut adam = Adam::new(AdamConfig::default());
        adam.storage_f32 = true;
        for p in &self.params {
            let id = model
                .params
                .id(&p.name)
                .ok_or_else(|| Error::validation(format!("checkpoint parameter {} is not in the model", p.name)))?;
            if model.params.get(id).dims() != p.value.dims() {
                return Err(Error::validation(format!(
                    "checkpoint parameter {} has shape {:?}, model expects {:?}",
                    p.name,
                    p.value.dims(),
                    model.params.get(id).dims()
                )));
            }
            model.params.set(id, p.value.clone())?;
            if let Some(m) = &p.moments {
                adam.set_moments(id, m.clone());
            }
        }
        model.state = self.state;
        Ok((model, adam))
    }
}
