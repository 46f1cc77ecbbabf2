//! HGF1 feature container.
//!
//! Little-endian layout:
//!
//! ```text
//! "HGF1"  version:u32  K:u32  Y:u32  N:u32
//! K x { H:u32 W:u32 d:u32  N*H*W*d x f32 (row-major N,H,W,d) }
//! N x u32 labels
//! flags:u8 (0 = none, 1 = present)   [N x u8 anomaly flags]
//! masks:u8 (0 = none, 1 = present)   [H:u32 W:u32 N*H*W x u8]
//! ```
//!
//! The trailing mask presence byte may be omitted by writers that never
//! produce masks.

use std::fs;
use std::path::Path;

use crate::codec::{checked_len, Cursor};
use crate::error::{Error, FormatError, Result};

use super::{FeatureDataset, FeatureLevel, PixelMasks};

pub const HGF1_MAGIC: &[u8; 4] = b"HGF1";
pub const HGF1_VERSION: u32 = 1;

pub fn encode_features(ds: &FeatureDataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let n = ds.len();
    let mut out = Vec::new();
    out.extend_from_slice(HGF1_MAGIC);
    for v in [HGF1_VERSION, ds.levels.len() as u32, ds.classes as u32, n as u32] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for lvl in &ds.levels {
        for v in [lvl.height, lvl.width, lvl.dim] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.reserve(lvl.values.len() * 4);
        for v in &lvl.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    for &y in &ds.labels {
        out.extend_from_slice(&(y as u32).to_le_bytes());
    }
    match &ds.anomaly_flags {
        Some(flags) => {
            out.push(1);
            out.extend(flags.iter().map(|&f| f as u8));
        }
        None => out.push(0),
    }
    match &ds.masks {
        Some(m) => {
            out.push(1);
            out.extend_from_slice(&(m.height as u32).to_le_bytes());
            out.extend_from_slice(&(m.width as u32).to_le_bytes());
            out.extend_from_slice(&m.data);
        }
        None => out.push(0),
    }
    Ok(out)
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureDataset> {
    let mut c = Cursor::new(bytes);
    let magic = c.take(4)?;
    if magic != HGF1_MAGIC {
        return Err(FormatError::BadMagic {
            expected: "HGF1".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        }
        .into());
    }
    let version = c.u32()?;
    if version != HGF1_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: HGF1_VERSION,
        }
        .into());
    }
    let k = c.u32()? as usize;
    let classes = c.u32()?;
    let n = c.u32()? as usize;
    if k == 0 || classes == 0 {
        return Err(FormatError::Invalid {
            offset: 8,
            detail: format!("K={k}, Y={classes}: both must be >= 1"),
        }
        .into());
    }

    let mut levels = Vec::with_capacity(k);
    for _ in 0..k {
        let offset = c.pos;
        let (h, w, d) = (c.u32()? as usize, c.u32()? as usize, c.u32()? as usize);
        if h == 0 || w == 0 || d == 0 {
            return Err(FormatError::Invalid {
                offset,
                detail: format!("level dims {h}x{w}x{d} must be nonzero"),
            }
            .into());
        }
        let count = checked_len(&[n, h, w, d, 4], offset)?;
        let raw = c.take(count)?;
        let values = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        levels.push(FeatureLevel {
            height: h,
            width: w,
            dim: d,
            values,
        });
    }

    let mut labels = Vec::with_capacity(n);
    for sample in 0..n {
        let offset = c.pos;
        let y = c.u32()?;
        if y >= classes {
            return Err(FormatError::LabelOutOfRange {
                sample,
                label: y,
                classes,
                offset,
            }
            .into());
        }
        labels.push(y as usize);
    }

    let offset = c.pos;
    let anomaly_flags = match c.u8()? {
        0 => None,
        1 => Some(c.take(n)?.iter().map(|&b| b != 0).collect()),
        other => {
            return Err(FormatError::Invalid {
                offset,
                detail: format!("anomaly-flag presence byte {other}"),
            }
            .into())
        }
    };

    let masks = if c.at_end() {
        None
    } else {
        let offset = c.pos;
        match c.u8()? {
            0 => None,
            1 => {
                let (h, w) = (c.u32()? as usize, c.u32()? as usize);
                let len = checked_len(&[n, h, w], offset)?;
                Some(PixelMasks {
                    height: h,
                    width: w,
                    data: c.take(len)?.to_vec(),
                })
            }
            other => {
                return Err(FormatError::Invalid {
                    offset,
                    detail: format!("mask presence byte {other}"),
                }
                .into())
            }
        }
    };
    if !c.at_end() {
        return Err(FormatError::Invalid {
            offset: c.pos,
            detail: format!("{} trailing bytes", bytes.len() - c.pos),
        }
        .into());
    }

    let ds = FeatureDataset {
        classes: classes as usize,
        levels,
        labels,
        anomaly_flags,
        masks,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn write_features(path: impl AsRef<Path>, ds: &FeatureDataset) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_features(ds)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}
