//! `ADSL` sample blobs with an optional `ADMK` mask section.

use std::path::Path;

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::tensorgrad::Tensor;

pub const SAMPLE_MAGIC: &[u8; 4] = b"ADSL";
pub const MASK_MAGIC: &[u8; 4] = b"ADMK";

/// Channels `[C, H, W]` and an optional `H × W` 0/1 mask.
pub fn blob_encode(channels: &Tensor<f32>, mask: Option<&[u8]>) -> Result<Vec<u8>> {
    let d = channels.dims();
    if d.len() != 3 {
        return Err(Error::shape("blob_encode", d, &[0, 0, 0]));
    }
    if let Some(i) = channels.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("blob channel value {i}")));
    }
    let mut out = Vec::with_capacity(16 + channels.len() * 4 + 4 + d[1] * d[2]);
    out.extend_from_slice(SAMPLE_MAGIC);
    for &x in d {
        out.extend_from_slice(&(x as u32).to_le_bytes());
    }
    for v in channels.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(m) = mask {
        if m.len() != d[1] * d[2] {
            return Err(Error::shape("blob_encode mask", &[m.len()], &[d[1] * d[2]]));
        }
        out.extend_from_slice(MASK_MAGIC);
        out.extend_from_slice(m);
    }
    Ok(out)
}

pub fn blob_decode(b: &[u8]) -> Result<(Tensor<f32>, Option<Vec<u8>>)> {
    let need = |n: usize, what: &str| -> Result<()> {
        if b.len() < n {
            Err(Error::parse(
                b.len() as u64,
                format!("truncated blob: {what} needs {n} bytes, have {}", b.len()),
            ))
        } else {
            Ok(())
        }
    };
    need(16, "header")?;
    if &b[..4] != SAMPLE_MAGIC {
        return Err(Error::parse(0, "bad sample blob magic"));
    }
    let dim = |i: usize| u32::from_le_bytes(b[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let end = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(4))
        .and_then(|v| v.checked_add(16))
        .ok_or_else(|| Error::parse(4, "blob dims overflow"))?;
    need(end, "payload")?;
    let data = b[16..end]
        .chunks_exact(4)
        .map(|x| f32::from_le_bytes(x.try_into().unwrap()))
        .collect();
    let channels = Tensor::new(vec![c, h, w], data)?;
    if b.len() == end {
        return Ok((channels, None));
    }
    need(end + 4, "mask magic")?;
    if &b[end..end + 4] != MASK_MAGIC {
        return Err(Error::parse(end as u64, "bad mask section magic"));
    }
    need(end + 4 + h * w, "mask")?;
    if b.len() > end + 4 + h * w {
        return Err(Error::parse((end + 4 + h * w) as u64, "trailing bytes after mask"));
    }
    Ok((channels, Some(b[end + 4..].to_vec())))
}

pub fn blob_write(path: &Path, channels: &Tensor<f32>, mask: Option<&[u8]>) -> Result<()> {
    write_atomic(path, &blob_encode(channels, mask)?)
}

pub fn blob_read(path: &Path) -> Result<(Tensor<f32>, Option<Vec<u8>>)> {
    blob_decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
