#![allow(dead_code)]

use std::io::Write;
use std::path::Path;

use flate2::write::GzEncoder;
use flate2::Compression;

pub const DATATYPES: [i16; 5] = [2, 4, 8, 16, 64];

fn put<const N: usize>(out: &mut Vec<u8>, le: [u8; N], big: bool) {
    if big {
        out.extend(le.iter().rev());
    } else {
        out.extend(le);
    }
}

pub fn header(dims: &[usize], datatype: i16, big: bool, magic: &[u8; 4], vox_offset: f32) -> Vec<u8> {
    let mut h = Vec::with_capacity(348);
    put(&mut h, 348i32.to_le_bytes(), big);
    h.resize(40, 0);
    let mut dim = [1i16; 8];
    dim[0] = dims.len() as i16;
    for (i, &d) in dims.iter().enumerate() {
        dim[i + 1] = d as i16;
    }
    for d in dim {
        put(&mut h, d.to_le_bytes(), big);
    }
    h.resize(70, 0);
    put(&mut h, datatype.to_le_bytes(), big);
    let bitpix: i16 = match datatype {
        2 => 8,
        4 => 16,
        64 => 64,
        _ => 32,
    };
    put(&mut h, bitpix.to_le_bytes(), big);
    h.resize(76, 0);
    for p in [1.0f32; 8] {
        put(&mut h, p.to_le_bytes(), big);
    }
    put(&mut h, vox_offset.to_le_bytes(), big);
    h.resize(344, 0);
    h.extend(magic);
    h
}

pub fn payload(values: &[f64], datatype: i16, big: bool) -> Vec<u8> {
    let mut out = Vec::new();
    for &v in values {
        match datatype {
            2 => out.push(v as u8),
            4 => put(&mut out, (v as i16).to_le_bytes(), big),
            8 => put(&mut out, (v as i32).to_le_bytes(), big),
            16 => put(&mut out, (v as f32).to_le_bytes(), big),
            64 => put(&mut out, v.to_le_bytes(), big),
            other => panic!("fixture datatype {other}"),
        }
    }
    out
}

/// Single-file `n+1` volume with the voxels at offset 352.
pub fn nifti_bytes(dims: &[usize], datatype: i16, values: &[f64], big: bool) -> Vec<u8> {
    let mut b = header(dims, datatype, big, b"n+1\0", 352.0);
    b.extend([0u8; 4]);
    b.extend(payload(values, datatype, big));
    b
}

pub fn gzip(bytes: &[u8]) -> Vec<u8> {
    let mut e = GzEncoder::new(Vec::new(), Compression::fast());
    e.write_all(bytes).unwrap();
    e.finish().unwrap()
}

pub fn write_nifti(path: &Path, dims: &[usize], values: &[f64], gz: bool) {
    let b = nifti_bytes(dims, 16, values, false);
    std::fs::write(path, if gz { gzip(&b) } else { b }).unwrap();
}

/// Small values every fixture datatype holds exactly.
pub fn ramp(n: usize) -> Vec<f64> {
    (0..n).map(|i| ((i * 37) % 251) as f64).collect()
}

/// One subject with a `[w, h, d]` brain-like volume per modality and a
/// segmentation whose lesion occupies slices `lesion.0..lesion.1`.
pub fn write_subject(dir: &Path, name: &str, whd: [usize; 3], lesion: (usize, usize)) {
    let sub = dir.join(name);
    std::fs::create_dir_all(&sub).unwrap();
    let [w, h, d] = whd;
    let n = w * h * d;
    let idx = |x: usize, y: usize, z: usize| x + w * (y + h * z);
    for (k, m) in ["flair", "t1", "t2"].iter().enumerate() {
        let mut v = vec![0.0; n];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    v[idx(x, y, z)] = ((x + 2 * y + 3 * z + 5 * k) % 97) as f64;
                }
            }
        }
        write_nifti(&sub.join(format!("{name}_{m}.nii.gz")), &whd, &v, true);
    }
    let mut seg = vec![0.0; n];
    for z in lesion.0..lesion.1 {
        for y in h / 3..h / 2 {
            for x in w / 3..w / 2 {
                seg[idx(x, y, z)] = 1.0;
            }
        }
    }
    write_nifti(&sub.join(format!("{name}_seg.nii")), &whd, &seg, false);
}
