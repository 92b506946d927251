//! Checkpoint: `"XCKP"`, version `u32`, arch tag `u8`, `d_A`, `d_B`, `M`,
//! `k` (all `u32`), partition boundaries `a_end`, `b_end`, `designated_end`
//! (`u32` each), then `w_enc_a, w_enc_b, b_enc, w_dec_a, w_dec_b, b_dec_a,
//! b_dec_b` as row-major little-endian `f32`.
//!
//! The DSF density multiplier is not part of the format; loaded DSF models
//! get [`DEFAULT_DSF_MULTIPLIER`](super::DEFAULT_DSF_MULTIPLIER).

use std::path::Path;

use super::{Architecture, CrosscoderModel, PartitionLayout, DEFAULT_DSF_MULTIPLIER};
use crate::error::{Error, Result};
use crate::io::{dim, read_file, write_file, Reader, Writer};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint<S: Scalar>(model: &CrosscoderModel<S>) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.magic(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.u8(model.arch.tag());
    w.u32(dim(model.d_a(), "d_A")?);
    w.u32(dim(model.d_b(), "d_B")?);
    w.u32(dim(model.dict_size(), "M")?);
    w.u32(dim(model.k, "k")?);
    w.u32(dim(model.layout.a_end, "a_end")?);
    w.u32(dim(model.layout.b_end, "b_end")?);
    w.u32(dim(model.layout.designated_end, "designated_end")?);
    for tensor in model.param_slices() {
        w.floats(tensor.iter());
    }
    Ok(w.buf)
}

pub fn decode_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<CrosscoderModel<S>> {
    let mut r = Reader::new(bytes);
    r.expect_magic(CHECKPOINT_MAGIC)?;
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let tag = r.u8()?;
    let arch = Architecture::from_tag(tag)
        .ok_or_else(|| Error::Format(format!("unknown architecture tag {tag}")))?;
    let d_a = r.u32()? as usize;
    let d_b = r.u32()? as usize;
    let m = r.u32()? as usize;
    let k = r.u32()? as usize;
    let layout = PartitionLayout {
        dict_size: m,
        a_end: r.u32()? as usize,
        b_end: r.u32()? as usize,
        designated_end: r.u32()? as usize,
    };
    layout
        .validate(arch)
        .map_err(|e| Error::Format(format!("inconsistent layout: {e}")))?;
    let model = CrosscoderModel {
        arch,
        w_enc_a: r.matrix(d_a, m)?,
        w_enc_b: r.matrix(d_b, m)?,
        b_enc: r.vector(m)?,
        w_dec_a: r.matrix(m, d_a)?,
        w_dec_b: r.matrix(m, d_b)?,
        b_dec_a: r.vector(d_a)?,
        b_dec_b: r.vector(d_b)?,
        layout,
        k,
        dsf_multiplier: DEFAULT_DSF_MULTIPLIER,
    };
    r.finish()?;
    Ok(model)
}

pub fn write_checkpoint<S: Scalar>(path: &Path, model: &CrosscoderModel<S>) -> Result<()> {
    write_file(path, &encode_checkpoint(model)?)
}

pub fn read_checkpoint<S: Scalar>(path: &Path) -> Result<CrosscoderModel<S>> {
    decode_checkpoint(&read_file(path)?)
}
