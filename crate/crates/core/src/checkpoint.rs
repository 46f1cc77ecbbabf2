//! Model checkpoint container.
//!
//! ```text
//! "HGADCKPT"  version:u32  precision:u8  classes:u32  seed:u64
//! config_hash: 64 ASCII hex bytes
//! config_len:u32  config TOML (UTF-8)
//! K:u32
//! K x level {
//!   H:u32 W:u32 input_dim:u32 dim:u32 pos_dim:u32 hidden:u32 blocks:u32
//!   blocks x { clamp_alpha, w1x, w1p, b1, w2, b2, mixing, scale }
//!   prior_classes:u32 intra:u32 entropy_uses_weights:u8  mu psi delta psi_intra
//! }
//! ```
//!
//! Scalars use the precision named in the header. Each tensor is written as
//! `rows:u32 cols:u32` followed by its row-major values. Every field is
//! deterministic, so identical models produce identical bytes.

use std::fs;
use std::path::Path;

use crate::codec::{checked_len, Cursor};
use crate::error::{Error, FormatError, Result};
use crate::flow::{CouplingBlock, FlowModel};
use crate::numerics::{Precision, Scalar, Tensor};
use crate::prior::HierarchicalPrior;
use crate::trainer::{Config, LevelModel, TrainedModel};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HGADCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_tensor<T: Scalar>(out: &mut Vec<u8>, t: &Tensor<T>) {
    put_u32(out, t.rows());
    put_u32(out, t.cols());
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn encode_checkpoint<T: Scalar>(model: &TrainedModel<T>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.push(T::TAG);
    put_u32(&mut out, model.classes);
    out.extend_from_slice(&model.config.train.seed.to_le_bytes());
    out.extend_from_slice(model.config.hash().as_bytes());
    let toml = model.config.to_toml();
    put_u32(&mut out, toml.len());
    out.extend_from_slice(toml.as_bytes());
    put_u32(&mut out, model.levels.len());
    for lm in &model.levels {
        let f = &lm.flow;
        let hidden = f.blocks.first().map_or(0, |b| b.hidden);
        for v in [lm.height, lm.width, f.input_dim, f.dim, f.pos_dim, hidden, f.blocks.len()] {
            put_u32(&mut out, v);
        }
        for b in &f.blocks {
            b.clamp_alpha.write_le(&mut out);
            for t in b.params() {
                put_tensor(&mut out, t);
            }
            put_tensor(&mut out, &b.mixing);
            put_tensor(&mut out, &b.scale);
        }
        let p = &lm.prior;
        put_u32(&mut out, p.classes);
        put_u32(&mut out, p.intra);
        out.push(p.entropy_uses_weights as u8);
        for t in [&p.mu, &p.psi, &p.delta, &p.psi_intra] {
            put_tensor(&mut out, t);
        }
    }
    out
}

/// Reads only the header's precision tag.
pub fn checkpoint_precision(bytes: &[u8]) -> Result<Precision> {
    let mut c = Cursor::new(bytes);
    check_header(&mut c)?;
    let offset = c.pos;
    match c.u8()? {
        4 => Ok(Precision::F32),
        8 => Ok(Precision::F64),
        other => Err(c.invalid(offset, format!("unknown precision tag {other}")).into()),
    }
}

fn check_header(c: &mut Cursor) -> Result<()> {
    let magic = c.take(8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(FormatError::BadMagic {
            expected: "HGADCKPT".into(),
            found: String::from_utf8_lossy(magic).into_owned(),
        }
        .into());
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(FormatError::UnsupportedVersion {
            found: version,
            supported: CHECKPOINT_VERSION,
        }
        .into());
    }
    Ok(())
}

fn get_dim(c: &mut Cursor) -> Result<usize, FormatError> {
    Ok(c.u32()? as usize)
}

fn get_tensor<T: Scalar>(c: &mut Cursor, rows: usize, cols: usize, what: &str) -> Result<Tensor<T>, FormatError> {
    let offset = c.pos;
    let (r, k) = (get_dim(c)?, get_dim(c)?);
    if (r, k) != (rows, cols) {
        return Err(c.invalid(offset, format!("{what}: stored {r}x{k}, expected {rows}x{cols}")));
    }
    let len = checked_len(&[r, k, T::BYTES], offset)?;
    let raw = c.take(len)?;
    let data: Vec<T> = raw.chunks_exact(T::BYTES).map(T::read_le).collect();
    let t = Tensor::from_rows(r, k, data);
    if !t.is_finite() {
        return Err(c.invalid(offset, format!("{what}: non-finite values")));
    }
    Ok(t)
}

pub fn decode_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<TrainedModel<T>> {
    let stored = checkpoint_precision(bytes)?;
    if stored.tag() != T::TAG {
        return Err(Error::Invalid(format!(
            "checkpoint holds {} parameters, requested {}",
            stored,
            T::NAME
        )));
    }
    let mut c = Cursor::new(bytes);
    check_header(&mut c)?;
    c.u8()?;
    let classes = get_dim(&mut c)?;
    let seed = c.u64()?;
    let hash_offset = c.pos;
    let hash = String::from_utf8_lossy(c.take(64)?).into_owned();
    let len = get_dim(&mut c)?;
    let text_offset = c.pos;
    let text = std::str::from_utf8(c.take(len)?).map_err(|e| c.invalid(text_offset, e.to_string()))?;
    let config = Config::from_toml(text).map_err(|e| c.invalid(text_offset, format!("embedded config: {e}")))?;
    if config.hash() != hash {
        return Err(c.invalid(hash_offset, "config hash does not match embedded config").into());
    }
    if config.train.seed != seed {
        return Err(c.invalid(hash_offset, "seed does not match embedded config").into());
    }

    let k = get_dim(&mut c)?;
    let mut levels = Vec::with_capacity(k);
    for level in 0..k {
        let offset = c.pos;
        let dims: Vec<usize> = (0..7).map(|_| get_dim(&mut c)).collect::<Result<_, _>>()?;
        let [height, width, input_dim, dim, pos_dim, hidden, nblocks] = dims[..] else {
            unreachable!("seven dims read")
        };
        if dim < 2 || dim % 2 == 1 || !(dim == input_dim || dim == input_dim + 1) {
            return Err(c.invalid(offset, format!("level {level}: dims {input_dim} -> {dim}")).into());
        }
        let split = dim / 2;
        let rest = dim - split;
        let mut blocks = Vec::with_capacity(nblocks.min(1024));
        for _ in 0..nblocks {
            let alpha = T::read_le(c.take(T::BYTES)?);
            let w1x = get_tensor(&mut c, split, hidden, "w1x")?;
            let w1p = get_tensor(&mut c, pos_dim, hidden, "w1p")?;
            let b1 = get_tensor(&mut c, 1, hidden, "b1")?;
            let w2 = get_tensor(&mut c, hidden, 2 * rest, "w2")?;
            let b2 = get_tensor(&mut c, 1, 2 * rest, "b2")?;
            let mixing = get_tensor(&mut c, dim, dim, "mixing")?;
            let scale_off = c.pos;
            let scale = get_tensor::<T>(&mut c, 1, dim, "scale")?;
            if scale.data().iter().any(|&s| s <= T::zero()) || alpha <= T::zero() {
                return Err(c.invalid(scale_off, "scale and clamp must be positive").into());
            }
            blocks.push(CouplingBlock {
                dim,
                split,
                hidden,
                pos_dim,
                clamp_alpha: alpha,
                w1x,
                w1p,
                b1,
                w2,
                b2,
                mixing,
                scale,
            });
        }
        let (pc, intra) = (get_dim(&mut c)?, get_dim(&mut c)?);
        let euw = c.u8()? != 0;
        let prior = HierarchicalPrior {
            classes: pc,
            intra,
            dim,
            mu: get_tensor(&mut c, pc, dim, "mu")?,
            psi: get_tensor(&mut c, 1, pc, "psi")?,
            delta: get_tensor(&mut c, pc, intra * dim, "delta")?,
            psi_intra: get_tensor(&mut c, pc, intra, "psi_intra")?,
            entropy_uses_weights: euw,
        };
        levels.push(LevelModel {
            height,
            width,
            flow: FlowModel {
                level,
                input_dim,
                dim,
                pos_dim,
                blocks,
            },
            prior,
        });
    }
    if !c.at_end() {
        return Err(c.invalid(c.pos, format!("{} trailing bytes", bytes.len() - c.pos)).into());
    }
    Ok(TrainedModel {
        config,
        classes,
        levels,
    })
}

pub fn save_checkpoint<T: Scalar>(path: impl AsRef<Path>, model: &TrainedModel<T>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<TrainedModel<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
