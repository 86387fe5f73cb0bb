//! Volume → labelled 2-D slices.

use serde::{Deserialize, Serialize};

use super::nifti::NiftiVolume;
use super::{Label, SliceSample};
use crate::error::{Error, Result};
use crate::tensorgrad::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SliceProtocol {
    pub axis: usize,
    /// Inclusive slice index range.
    pub first: usize,
    pub last: usize,
    pub stride: usize,
    /// Bilinear resize of each slice to `size × size`, when set.
    pub size: Option<usize>,
}

impl Default for SliceProtocol {
    fn default() -> Self {
        SliceProtocol {
            axis: 2,
            first: 80,
            last: 120,
            stride: 5,
            size: None,
        }
    }
}

impl SliceProtocol {
    pub fn indices(&self, depth: usize) -> Vec<usize> {
        (self.first..=self.last)
            .step_by(self.stride.max(1))
            .filter(|&k| k < depth)
            .collect()
    }
}

/// Plane `k` along `axis` of a 3-D x-fastest volume, as `[rows, cols]` with
/// rows running along the higher remaining axis.
fn plane(v: &NiftiVolume, axis: usize, k: usize) -> (usize, usize, Vec<f32>) {
    let s = v.shape();
    let strides = [1, s[0], s[0] * s[1]];
    let others: Vec<usize> = (0..3).filter(|&a| a != axis).collect();
    let (ca, ra) = (others[0], others[1]);
    let mut out = Vec::with_capacity(s[ra] * s[ca]);
    for r in 0..s[ra] {
        for c in 0..s[ca] {
            out.push(v.voxels[k * strides[axis] + r * strides[ra] + c * strides[ca]]);
        }
    }
    (s[ra], s[ca], out)
}

/// Min-max to `[0, 1]`; a constant plane becomes zeros.
pub fn minmax_normalize(x: &mut [f32]) {
    let lo = x.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = hi - lo;
    for v in x.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
}

/// Half-pixel-centred bilinear resampling of a row-major plane.
pub fn resize_bilinear(src: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let coord = |o: usize, n: usize, on: usize| {
        let c = ((o as f64 + 0.5) * n as f64 / on as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let i = (c.floor() as usize).min(n - 1);
        (i, (i + 1).min(n - 1), c - i as f64)
    };
    let mut out = Vec::with_capacity(oh * ow);
    for oy in 0..oh {
        let (y0, y1, fy) = coord(oy, h, oh);
        for ox in 0..ow {
            let (x0, x1, fx) = coord(ox, w, ow);
            let g = |y: usize, x: usize| src[y * w + x] as f64;
            let top = g(y0, x0) * (1.0 - fx) + g(y0, x1) * fx;
            let bot = g(y1, x0) * (1.0 - fx) + g(y1, x1) * fx;
            out.push((top * (1.0 - fy) + bot * fy) as f32);
        }
    }
    out
}

/// Nearest-footprint resize that keeps every positive source pixel visible.
pub fn resize_mask(x: &[f32], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let mut out = vec![0u8; oh * ow];
    for y in 0..h {
        for xx in 0..w {
            if x[y * w + xx] > 0.0 {
                out[(y * oh / h) * ow + xx * ow / w] = 1;
            }
        }
    }
    out
}

/// Slices of co-registered modality volumes (channel order as given) with
/// labels from `mask` (`> 0` is anomalous).
pub fn extract_slices(
    volume_id: &str,
    modalities: &[&NiftiVolume],
    mask: Option<&NiftiVolume>,
    protocol: &SliceProtocol,
) -> Result<Vec<SliceSample>> {
    let first = modalities
        .first()
        .ok_or_else(|| Error::Contract("extract_slices needs at least one modality".into()))?;
    let shape = first.shape();
    if shape.len() != 3 && !(shape.len() == 4 && shape[3] == 1) {
        return Err(Error::Contract(format!(
            "{volume_id}: expected a 3-D volume, got dims {shape:?}"
        )));
    }
    for v in modalities.iter().copied().chain(mask) {
        if v.shape()[..3] != shape[..3] {
            return Err(Error::Contract(format!(
                "{volume_id}: volume dims {:?} differ from {:?}",
                v.shape(),
                shape
            )));
        }
    }
    if protocol.axis > 2 {
        return Err(Error::Config(format!("slice axis {} outside 0..=2", protocol.axis)));
    }
    let mut out = Vec::new();
    for k in protocol.indices(shape[protocol.axis]) {
        let mut data = Vec::new();
        let mut hw = (0, 0);
        for v in modalities {
            let (h, w, mut p) = plane(v, protocol.axis, k);
            if let Some(s) = protocol.size {
                p = resize_bilinear(&p, h, w, s, s);
                hw = (s, s);
            } else {
                hw = (h, w);
            }
            minmax_normalize(&mut p);
            data.extend(p);
        }
        let mask_plane = mask.map(|m| {
            let (h, w, p) = plane(m, protocol.axis, k);
            let bin: Vec<f32> = p.iter().map(|&v| (v > 0.0) as u8 as f32).collect();
            match protocol.size {
                Some(s) => resize_mask(&bin, h, w, s, s),
                None => bin.iter().map(|&v| v as u8).collect::<Vec<u8>>(),
            }
        });
        let abnormal = mask_plane.as_ref().is_some_and(|m| m.iter().any(|&v| v > 0));
        out.push(SliceSample {
            id: format!("{volume_id}_s{k:03}"),
            channels: Tensor::new(vec![modalities.len(), hw.0, hw.1], data)?,
            mask: if abnormal { mask_plane } else { None },
            label: if abnormal { Label::Abnormal } else { Label::Normal },
        });
    }
    Ok(out)
}
