//! Single-file checkpoint: tagged sections, little-endian.
//!
//! ```text
//! "SMCK" | version u8 | section count u32
//! then per section: tag [u8; 4] | payload length u64 | payload
//! ```
//!
//! `QBLB` holds quantized backbone groups (name + quantized tensor blob),
//! `PARM` the full-precision trainable parameters, `FPWT` frozen weights
//! kept in full precision, `CONF` the run configuration as UTF-8 text.

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::Model;
use crate::error::{Error, Result};
use crate::numerics::DenseTensor;
use crate::quantizer::{QuantizedTensor, Reader};

const MAGIC: &[u8; 4] = b"SMCK";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub quantized: Vec<(String, QuantizedTensor)>,
    pub trainable: ParamSet,
    pub frozen_full: ParamSet,
    pub config: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectionInfo {
    pub tag: String,
    pub offset: u64,
    pub length: u64,
    pub entries: Vec<String>,
}

/// JSON description written next to the container.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: String,
    pub version: u8,
    pub sections: Vec<SectionInfo>,
    pub trainable_scalars: usize,
    pub quantized_scalars: usize,
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn get_str(r: &mut Reader<'_>) -> Result<String> {
    let n = r.u32()? as usize;
    String::from_utf8(r.take(n)?.to_vec()).map_err(|e| Error::Format(e.to_string()))
}

fn put_params(p: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&(p.len() as u32).to_le_bytes());
    for (name, t) in p.iter() {
        put_str(&mut out, name);
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn get_params(bytes: &[u8]) -> Result<ParamSet> {
    let mut r = Reader::new(bytes);
    let mut p = ParamSet::new();
    for _ in 0..r.u32()? {
        let name = get_str(&mut r)?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        p.insert(name, DenseTensor::new(shape, data)?);
    }
    if !r.is_done() {
        return Err(Error::Format("trailing bytes in parameter section".into()));
    }
    Ok(p)
}

impl Checkpoint {
    pub fn from_model(model: &Model, config: String) -> Self {
        let mut trainable = ParamSet::new();
        for (n, t) in model.trainable_tensors() {
            trainable.insert(n, t.clone());
        }
        let quantized = model
            .backbone
            .groups()
            .iter()
            .map(|g| (g.name.clone(), g.quantized().clone()))
            .collect();
        let mut frozen_full = ParamSet::new();
        if !model.backbone.is_quantized() {
            for (n, t) in model.backbone.effective_weights() {
                frozen_full.insert(n, t.clone());
            }
        }
        Self {
            quantized,
            trainable,
            frozen_full,
            config,
        }
    }

    fn sections(&self) -> Vec<([u8; 4], Vec<u8>, Vec<String>)> {
        let mut qb = Vec::new();
        qb.extend_from_slice(&(self.quantized.len() as u32).to_le_bytes());
        for (name, q) in &self.quantized {
            put_str(&mut qb, name);
            let blob = q.to_blob();
            qb.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            qb.extend_from_slice(&blob);
        }
        vec![
            (*b"QBLB", qb, self.quantized.iter().map(|(n, _)| n.clone()).collect()),
            (*b"PARM", put_params(&self.trainable), self.trainable.names()),
            (*b"FPWT", put_params(&self.frozen_full), self.frozen_full.names()),
            (*b"CONF", self.config.as_bytes().to_vec(), Vec::new()),
        ]
    }

    pub fn to_bytes(&self) -> (Vec<u8>, CheckpointManifest) {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        let sections = self.sections();
        out.extend_from_slice(&(sections.len() as u32).to_le_bytes());
        let mut infos = Vec::new();
        for (tag, payload, entries) in sections {
            out.extend_from_slice(&tag);
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            infos.push(SectionInfo {
                tag: String::from_utf8_lossy(&tag).into_owned(),
                offset: out.len() as u64,
                length: payload.len() as u64,
                entries,
            });
            out.extend_from_slice(&payload);
        }
        let manifest = CheckpointManifest {
            format: "SMCK".into(),
            version: VERSION,
            sections: infos,
            trainable_scalars: self.trainable.numel(),
            quantized_scalars: self.quantized.iter().map(|(_, q)| q.len()).sum(),
        };
        (out, manifest)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint".into()));
        }
        if r.u8()? != VERSION {
            return Err(Error::Format("unsupported checkpoint version".into()));
        }
        let mut ck = Checkpoint {
            quantized: Vec::new(),
            trainable: ParamSet::new(),
            frozen_full: ParamSet::new(),
            config: String::new(),
        };
        for _ in 0..r.u32()? {
            let tag: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
            let len = r.u64()? as usize;
            let payload = r.take(len)?;
            match &tag {
                b"QBLB" => {
                    let mut q = Reader::new(payload);
                    for _ in 0..q.u32()? {
                        let name = get_str(&mut q)?;
                        let n = q.u64()? as usize;
                        ck.quantized.push((name, QuantizedTensor::from_blob(q.take(n)?)?));
                    }
                }
                b"PARM" => ck.trainable = get_params(payload)?,
                b"FPWT" => ck.frozen_full = get_params(payload)?,
                b"CONF" => {
                    ck.config = String::from_utf8(payload.to_vec()).map_err(|e| Error::Format(e.to_string()))?
                }
                other => {
                    return Err(Error::Format(format!(
                        "unknown section {:?}",
                        String::from_utf8_lossy(other)
                    )))
                }
            }
        }
        if !r.is_done() {
            return Err(Error::Format("trailing bytes after last section".into()));
        }
        Ok(ck)
    }
}
