//! NIfTI-1 single-file (`n+1`) and paired (`ni1`) volumes, optionally gzipped.

use std::io::Read;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

pub const HEADER_SIZE: usize = 348;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Endian {
    Little,
    Big,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NiftiVolume {
    /// `dims[0]` is the rank; `dims[1..=rank]` the sizes.
    pub dims: [i16; 8],
    pub datatype: i16,
    pub pixdim: [f32; 8],
    pub endian: Endian,
    /// Scaled values, x fastest.
    pub voxels: Vec<f32>,
}

impl NiftiVolume {
    pub fn rank(&self) -> usize {
        self.dims[0] as usize
    }

    pub fn shape(&self) -> Vec<usize> {
        self.dims[1..=self.rank()].iter().map(|&d| d as usize).collect()
    }
}

fn gunzip_if_needed(bytes: Vec<u8>) -> Result<Vec<u8>> {
    if bytes.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        flate2::read::GzDecoder::new(&bytes[..])
            .read_to_end(&mut out)
            .map_err(|e| Error::parse(0, format!("gzip: {e}")))?;
        Ok(out)
    } else {
        Ok(bytes)
    }
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    gunzip_if_needed(std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Data file paired with an `ni1` header: `x.hdr[.gz]` → `x.img[.gz]`.
fn paired_image(path: &Path) -> PathBuf {
    let s = path.to_string_lossy();
    let (stem, gz) = match s.strip_suffix(".gz") {
        Some(stem) => (stem, ".gz"),
        None => (&*s, ""),
    };
    let stem = stem.strip_suffix(".hdr").unwrap_or(stem);
    PathBuf::from(format!("{stem}.img{gz}"))
}

pub fn nifti_read(path: &Path) -> Result<NiftiVolume> {
    let bytes = read_all(path)?;
    let hdr = parse_header(&bytes)?;
    match &hdr.magic {
        b"n+1\0" => {
            let offset = hdr.vox_offset.max(HEADER_SIZE as f32) as usize;
            decode(&hdr, &bytes, offset, offset as u64)
        }
        _ => {
            let img = paired_image(path);
            decode(&hdr, &read_all(&img)?, hdr.vox_offset.max(0.0) as usize, 0)
        }
    }
}

/// Parses an in-memory single-file volume.
pub fn nifti_parse(bytes: &[u8]) -> Result<NiftiVolume> {
    let bytes = gunzip_if_needed(bytes.to_vec())?;
    let hdr = parse_header(&bytes)?;
    if &hdr.magic != b"n+1\0" {
        return Err(Error::parse(344, "paired header needs its .img file"));
    }
    let offset = hdr.vox_offset.max(HEADER_SIZE as f32) as usize;
    decode(&hdr, &bytes, offset, offset as u64)
}

struct Header {
    endian: Endian,
    dims: [i16; 8],
    datatype: i16,
    pixdim: [f32; 8],
    vox_offset: f32,
    slope: f32,
    inter: f32,
    magic: [u8; 4],
}

fn parse_header(b: &[u8]) -> Result<Header> {
    if b.len() < HEADER_SIZE {
        return Err(Error::parse(
            b.len() as u64,
            format!("truncated header: {} of {HEADER_SIZE} bytes", b.len()),
        ));
    }
    let endian = match (
        i32::from_le_bytes(b[0..4].try_into().unwrap()),
        i32::from_be_bytes(b[0..4].try_into().unwrap()),
    ) {
        (348, _) => Endian::Little,
        (_, 348) => Endian::Big,
        _ => return Err(Error::parse(0, "sizeof_hdr is not 348 in either byte order")),
    };
    let i16_at = |o: usize| {
        let a = [b[o], b[o + 1]];
        match endian {
            Endian::Little => i16::from_le_bytes(a),
            Endian::Big => i16::from_be_bytes(a),
        }
    };
    let f32_at = |o: usize| {
        let a: [u8; 4] = b[o..o + 4].try_into().unwrap();
        match endian {
            Endian::Little => f32::from_le_bytes(a),
            Endian::Big => f32::from_be_bytes(a),
        }
    };
    let magic: [u8; 4] = b[344..348].try_into().unwrap();
    if &magic != b"n+1\0" && &magic != b"ni1\0" {
        return Err(Error::parse(344, format!("bad NIfTI magic {magic:?}")));
    }
    let mut dims = [0i16; 8];
    for (i, d) in dims.iter_mut().enumerate() {
        *d = i16_at(40 + 2 * i);
    }
    if !(1..=7).contains(&dims[0]) {
        return Err(Error::parse(40, format!("dim[0] = {} outside 1..=7", dims[0])));
    }
    if let Some(i) = (1..=dims[0] as usize).find(|&i| dims[i] < 1) {
        return Err(Error::parse(
            40 + 2 * i as u64,
            format!("dim[{i}] = {} is not positive", dims[i]),
        ));
    }
    let mut pixdim = [0f32; 8];
    for (i, p) in pixdim.iter_mut().enumerate() {
        *p = f32_at(76 + 4 * i);
    }
    Ok(Header {
        endian,
        dims,
        datatype: i16_at(70),
        pixdim,
        vox_offset: f32_at(108),
        slope: f32_at(112),
        inter: f32_at(116),
        magic,
    })
}

fn decode(h: &Header, data: &[u8], offset: usize, report_base: u64) -> Result<NiftiVolume> {
    let n: usize = h.dims[1..=h.dims[0] as usize].iter().map(|&d| d as usize).product();
    let size = match h.datatype {
        2 => 1,
        4 => 2,
        8 | 16 => 4,
        64 => 8,
        other => return Err(Error::UnsupportedDatatype(other)),
    };
    let need = n * size;
    let have = data.len().saturating_sub(offset);
    if have < need {
        return Err(Error::parse(
            report_base + have as u64,
            format!("truncated voxel data: need {need} bytes, {have} present"),
        ));
    }
    let raw = &data[offset..offset + need];
    let le = h.endian == Endian::Little;
    macro_rules! conv {
        ($t:ty, $w:expr) => {
            raw.chunks_exact($w)
                .map(|c| {
                    let a: [u8; $w] = c.try_into().unwrap();
                    (if le {
                        <$t>::from_le_bytes(a)
                    } else {
                        <$t>::from_be_bytes(a)
                    }) as f64
                })
                .collect::<Vec<f64>>()
        };
    }
    let values = match h.datatype {
        2 => raw.iter().map(|&v| v as f64).collect(),
        4 => conv!(i16, 2),
        8 => conv!(i32, 4),
        16 => conv!(f32, 4),
        _ => conv!(f64, 8),
    };
    let scale = h.slope != 0.0 && h.slope.is_finite();
    let voxels = values
        .into_iter()
        .map(|v| {
            if scale {
                (v * h.slope as f64 + h.inter as f64) as f32
            } else {
                v as f32
            }
        })
        .collect();
    Ok(NiftiVolume {
        dims: h.dims,
        datatype: h.datatype,
        pixdim: h.pixdim,
        endian: h.endian,
        voxels,
    })
}
