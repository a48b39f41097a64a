//! `.apfe` v1 feature files.
//!
//! Layout (all integers little-endian u32):
//!
//! ```text
//! "APFE" | version=1 | id_len | id (UTF-8) | num_levels=3
//! num_levels × (level_id, channels, height, width)
//! payload: levels in header order, each channels·height·width f32 LE, (c, h, w) row-major
//! ```

use std::path::Path;

use crate::encoder::{FeatureSource, MultiLevelFeatures};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"APFE";
pub const VERSION: u32 = 1;
pub const EXTENSION: &str = "apfe";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LevelHeader {
    pub level_id: u32,
    pub channels: u32,
    pub height: u32,
    pub width: u32,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FeatureFileHeader {
    pub version: u32,
    pub image_id: String,
    pub levels: Vec<LevelHeader>,
}

impl FeatureFileHeader {
    pub fn payload_floats(&self) -> usize {
        self.levels.iter().map(|l| (l.channels * l.height * l.width) as usize).sum()
    }
}

#[derive(Clone, Debug)]
pub struct FeatureFile {
    pub header: FeatureFileHeader,
    pub features: MultiLevelFeatures<f32>,
}

pub fn encode(image_id: &str, feats: &MultiLevelFeatures<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(image_id.len() as u32).to_le_bytes());
    out.extend_from_slice(image_id.as_bytes());
    out.extend_from_slice(&3u32.to_le_bytes());
    for (i, t) in feats.levels.iter().enumerate() {
        out.extend_from_slice(&(i as u32 + 1).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for t in &feats.levels {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format(format!(
                "truncated file: need {} bytes at offset {}, have {}",
                n,
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

/// Parses and validates only the header.
pub fn decode_header(bytes: &[u8]) -> Result<(FeatureFileHeader, usize)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Format("bad magic, expected APFE".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let id_len = r.u32()? as usize;
    let image_id = String::from_utf8(r.take(id_len)?.to_vec())
        .map_err(|_| Error::Format("image id is not UTF-8".into()))?;
    let num_levels = r.u32()?;
    if num_levels != 3 {
        return Err(Error::Format(format!("expected 3 levels, found {num_levels}")));
    }
    let mut levels = Vec::new();
    for _ in 0..num_levels {
        levels.push(LevelHeader { level_id: r.u32()?, channels: r.u32()?, height: r.u32()?, width: r.u32()? });
    }
    let mut ids: Vec<u32> = levels.iter().map(|l| l.level_id).collect();
    ids.sort_unstable();
    if ids != [1, 2, 3] {
        return Err(Error::Format(format!("level ids must be {{1,2,3}}, found {ids:?}")));
    }
    Ok((FeatureFileHeader { version, image_id, levels }, r.pos))
}

pub fn decode(bytes: &[u8]) -> Result<FeatureFile> {
    let (header, mut pos) = decode_header(bytes)?;
    let expected = header.payload_floats() * 4;
    if bytes.len() - pos != expected {
        return Err(Error::Format(format!(
            "payload is {} bytes, header declares {}",
            bytes.len() - pos,
            expected
        )));
    }
    let mut by_id: Vec<(u32, Tensor<f32>)> = Vec::new();
    for l in &header.levels {
        let n = (l.channels * l.height * l.width) as usize;
        let data = bytes[pos..pos + 4 * n]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        pos += 4 * n;
        let shape = [l.channels as usize, l.height as usize, l.width as usize];
        by_id.push((l.level_id, Tensor::new(&shape, data)?));
    }
    by_id.sort_by_key(|(id, _)| *id);
    let mut it = by_id.into_iter().map(|(_, t)| t);
    let levels = [it.next().expect("3"), it.next().expect("3"), it.next().expect("3")];
    let features = MultiLevelFeatures::new(levels, FeatureSource::Imported)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok(FeatureFile { header, features })
}

pub fn save_features(path: &Path, image_id: &str, feats: &MultiLevelFeatures<f32>) -> Result<()> {
    std::fs::write(path, encode(image_id, feats))?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<FeatureFile> {
    decode(&std::fs::read(path)?)
}
