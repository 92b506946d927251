//! Activation dump: `"XDIF"`, version `u32`, `d_A u32`, `d_B u32`,
//! rows `u64`, then all `x_a` rows and all `x_b` rows as little-endian `f32`,
//! row-major.

use std::path::Path;

use super::ActivationPairBatch;
use crate::error::Result;
use crate::io::{dim, read_file, write_file, Reader, Writer};
use crate::scalar::Scalar;

pub const DUMP_MAGIC: &[u8; 4] = b"XDIF";
pub const DUMP_VERSION: u32 = 1;

pub fn encode_activation_dump<S: Scalar>(batch: &ActivationPairBatch<S>) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.magic(DUMP_MAGIC);
    w.u32(DUMP_VERSION);
    w.u32(dim(batch.d_a(), "d_A")?);
    w.u32(dim(batch.d_b(), "d_B")?);
    w.u64(batch.rows() as u64);
    w.floats(batch.x_a.iter());
    w.floats(batch.x_b.iter());
    Ok(w.buf)
}

pub fn decode_activation_dump<S: Scalar>(bytes: &[u8]) -> Result<ActivationPairBatch<S>> {
    let mut r = Reader::new(bytes);
    r.expect_magic(DUMP_MAGIC)?;
    let version = r.u32()?;
    if version != DUMP_VERSION {
        return Err(crate::error::Error::Format(format!(
            "unsupported dump version {version}"
        )));
    }
    let d_a = r.u32()? as usize;
    let d_b = r.u32()? as usize;
    let rows = usize::try_from(r.u64()?)
        .map_err(|_| crate::error::Error::Format("row count overflows".into()))?;
    let x_a = r.matrix(rows, d_a)?;
    let x_b = r.matrix(rows, d_b)?;
    r.finish()?;
    ActivationPairBatch::new(x_a, x_b)
}

pub fn write_activation_dump<S: Scalar>(path: &Path, batch: &ActivationPairBatch<S>) -> Result<()> {
    write_file(path, &encode_activation_dump(batch)?)
}

pub fn read_activation_dump<S: Scalar>(path: &Path) -> Result<ActivationPairBatch<S>> {
    decode_activation_dump(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn header_layout_is_exact() {
        let batch =
            ActivationPairBatch::new(array![[1.0f32, 2.0], [3.0, 4.0]], array![[5.0f32], [6.0]])
                .unwrap();
        let bytes = encode_activation_dump(&batch).unwrap();
        assert_eq!(&bytes[0..4], b"XDIF");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(bytes[16..24].try_into().unwrap()), 2);
        assert_eq!(bytes.len(), 24 + 6 * 4);
        // x_a block precedes x_b block
        assert_eq!(f32::from_le_bytes(bytes[24..28].try_into().unwrap()), 1.0);
        assert_eq!(f32::from_le_bytes(bytes[40..44].try_into().unwrap()), 5.0);
        let back: ActivationPairBatch<f32> = decode_activation_dump(&bytes).unwrap();
        assert_eq!(back, batch);
    }

    #[test]
    fn rejects_truncated_and_bad_magic() {
        let batch = ActivationPairBatch::new(array![[1.0f64]], array![[2.0f64]]).unwrap();
        let mut bytes = encode_activation_dump(&batch).unwrap();
        assert!(decode_activation_dump::<f64>(&bytes[..bytes.len() - 1]).is_err());
        bytes[0] = b'Y';
        assert!(decode_activation_dump::<f64>(&bytes).is_err());
    }
}
