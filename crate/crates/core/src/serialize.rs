//! Versioned binary model container: magic, version, JSON header
//! (config, schema, vocabularies, standardizer), then named parameter
//! blocks of little-endian `f64` values.

use alloc::format;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::dataset::{ChannelSchema, Vocabulary};
use crate::error::{LfitError, Result};
use crate::model::{LfitConfig, LfitModel};
use crate::scenario::ScenarioSpec;
use crate::tensor::Tensor;
use crate::training::Standardizer;

pub const MAGIC: &[u8; 8] = b"LFITMDL\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: LfitConfig,
    schema: ChannelSchema,
    vocabularies: Vec<Vocabulary>,
    standardizer: Standardizer,
    scenario: Option<ScenarioSpec>,
}

pub fn save_model(model: &LfitModel) -> Result<Vec<u8>> {
    let header = Header {
        config: model.config.clone(),
        schema: model.schema.clone(),
        vocabularies: model.vocabularies.clone(),
        standardizer: model.standardizer.clone(),
        scenario: model.scenario.clone(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| LfitError::Format(format!("{e}")))?;
    let mut out = Vec::with_capacity(json.len() + 8 * model.store.numel() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (name, t) in model.store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            LfitError::Format(format!("truncated model file at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| LfitError::Format("length overflow".into()))
    }
}

pub fn load_model(bytes: &[u8]) -> Result<LfitModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(LfitError::Format("not a model file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(LfitError::Version {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let hlen = r.len()?;
    let header: Header = serde_json::from_slice(r.take(hlen)?)
        .map_err(|e| LfitError::Format(format!("bad header: {e}")))?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = core::str::from_utf8(r.take(nlen)?)
            .map_err(|_| LfitError::Format("parameter name is not UTF-8".into()))?
            .into();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.len()?);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| LfitError::Format("block too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(LfitError::Format(format!(
            "{} trailing bytes after parameter blocks",
            bytes.len() - r.pos
        )));
    }
    let mut model = LfitModel::new(
        header.config,
        header.schema,
        header.vocabularies,
        header.standardizer,
        0,
    )?;
    model.scenario = header.scenario;
    model.set_parameters(params)?;
    Ok(model)
}
