//! Raw attribution maps on disk.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "ATTR" | version u8 = 1 | rank u8 | dims u32 × rank | values f64 × Π dims
//!        | digest length u32 | digest UTF-8 | class index u32 | logit f64
//! ```

use std::path::Path;

use thiserror::Error;

use crate::lrp::AttributionMap;
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"ATTR";
const VERSION: u8 = 1;

#[derive(Debug, Error)]
pub enum AttrFileError {
    #[error("i/o error on {path}: {reason}")]
    Io { path: String, reason: String },
    #[error("not an attribution file (bad magic)")]
    BadMagic,
    #[error("unsupported attribution file version {0}")]
    UnsupportedVersion(u8),
    #[error("truncated or malformed attribution file: {0}")]
    Malformed(String),
}

pub fn encode(map: &AttributionMap) -> Vec<u8> {
    let r = &map.relevance;
    let mut out = Vec::with_capacity(16 + 4 * r.rank() + 8 * r.len() + map.config_digest.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(r.rank() as u8);
    for &d in r.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in r.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(map.config_digest.len() as u32).to_le_bytes());
    out.extend_from_slice(map.config_digest.as_bytes());
    out.extend_from_slice(&(map.class_index as u32).to_le_bytes());
    out.extend_from_slice(&map.output_logit.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], AttrFileError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| AttrFileError::Malformed(format!("truncated in {what}")))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, AttrFileError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64, AttrFileError> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<AttributionMap, AttrFileError> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "magic").map_err(|_| AttrFileError::BadMagic)? != MAGIC {
        return Err(AttrFileError::BadMagic);
    }
    let header = c.take(2, "header")?;
    if header[0] != VERSION {
        return Err(AttrFileError::UnsupportedVersion(header[0]));
    }
    let shape = (0..header[1])
        .map(|_| c.u32("dims").map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let n = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .filter(|&n| n <= bytes.len() / 8)
        .ok_or_else(|| AttrFileError::Malformed(format!("dims {shape:?} exceed file size")))?;
    let data = (0..n).map(|_| c.f64("values")).collect::<Result<Vec<_>, _>>()?;
    let relevance = Tensor::new(shape, data).map_err(|e| AttrFileError::Malformed(e.to_string()))?;
    let len = c.u32("digest length")? as usize;
    let config_digest = String::from_utf8(c.take(len, "digest")?.to_vec())
        .map_err(|_| AttrFileError::Malformed("digest is not UTF-8".into()))?;
    let class_index = c.u32("class index")? as usize;
    let output_logit = c.f64("logit")?;
    if c.pos != bytes.len() {
        return Err(AttrFileError::Malformed(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(AttributionMap {
        relevance,
        class_index,
        output_logit,
        config_digest,
    })
}

pub fn write_attr(path: &Path, map: &AttributionMap) -> Result<(), AttrFileError> {
    std::fs::write(path, encode(map)).map_err(|e| AttrFileError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn read_attr(path: &Path) -> Result<AttributionMap, AttrFileError> {
    let bytes = std::fs::read(path).map_err(|e| AttrFileError::Io {
        path: path.display().to_string(),
        reason: e.to_string(),
    })?;
    decode(&bytes)
}
