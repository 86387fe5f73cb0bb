//! Pixel anomaly maps and image scores from encoder/decoder discrepancies.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensorgrad::{Tensor, COSINE_EPS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageScoreMode {
    /// Mean of the top 1% of pixels.
    Top1pct,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoreConfig {
    pub sigma: f64,
    pub image_score: ImageScoreMode,
}

impl Default for ScoreConfig {
    fn default() -> Self {
        ScoreConfig {
            sigma: 4.0,
            image_score: ImageScoreMode::Top1pct,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnomalyMap {
    /// `[H, W]`
    pub values: Tensor<f64>,
    pub image_score: f64,
}

fn cosine_distance<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let na = a.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt().max(COSINE_EPS);
    let nb = b.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt().max(COSINE_EPS);
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.f64() * y.f64()).sum();
    1.0 - dot / (na * nb)
}

/// Per-sample `[grid_h, grid_w]` maps: the mean over both scales of the
/// per-token cosine distance.
pub fn token_map<T: Scalar>(
    en: (&Tensor<T>, &Tensor<T>),
    de: (&Tensor<T>, &Tensor<T>),
    grid_h: usize,
    grid_w: usize,
) -> Result<Vec<Tensor<f64>>> {
    for (e, d) in [(en.0, de.0), (en.1, de.1), (en.0, en.1)] {
        if e.dims() != d.dims() || e.rank() != 3 || e.dims()[1] != grid_h * grid_w {
            return Err(Error::shape("token_map", e.dims(), d.dims()));
        }
    }
    let (b, t, d) = (en.0.dims()[0], en.0.dims()[1], en.0.dims()[2]);
    let mut out = Vec::with_capacity(b);
    for bi in 0..b {
        let mut m = Vec::with_capacity(t);
        for ti in 0..t {
            let r = (bi * t + ti) * d..(bi * t + ti + 1) * d;
            let d0 = cosine_distance(&en.0.data()[r.clone()], &de.0.data()[r.clone()]);
            let d1 = cosine_distance(&en.1.data()[r.clone()], &de.1.data()[r]);
            m.push(0.5 * (d0 + d1));
        }
        out.push(Tensor::new(vec![grid_h, grid_w], m)?);
    }
    Ok(out)
}

/// Bilinear resize with half-pixel centres (align-corners false).
pub fn upsample_bilinear(m: &Tensor<f64>, out_h: usize, out_w: usize) -> Result<Tensor<f64>> {
    if m.rank() != 2 || out_h < m.dims()[0] || out_w < m.dims()[1] {
        return Err(Error::shape("upsample_bilinear", m.dims(), &[out_h, out_w]));
    }
    let (h, w) = (m.dims()[0], m.dims()[1]);
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let src = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = src.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, src - i0 as f64)
            })
            .collect()
    };
    let (ys, xs) = (axis(h, out_h), axis(w, out_w));
    let src = m.data();
    let mut out = Vec::with_capacity(out_h * out_w);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
            let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
            out.push(top * (1.0 - fy) + bot * fy);
        }
    }
    Tensor::new(vec![out_h, out_w], out)
}

/// Normalised 1-D Gaussian taps for offsets `-r..=r`, `r = ⌈3σ⌉`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let taps: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / z).collect()
}

/// Half-sample symmetric reflection of `i` into `0..n`.
pub fn reflect_index(i: i64, n: usize) -> usize {
    let n = n as i64;
    let p = i.rem_euclid(2 * n);
    (if p >= n { 2 * n - 1 - p } else { p }) as usize
}

/// Separable Gaussian blur with reflect padding; `sigma = 0` is the identity.
pub fn gaussian_smooth(m: &Tensor<f64>, sigma: f64) -> Result<Tensor<f64>> {
    if m.rank() != 2 || !(sigma >= 0.0) {
        return Err(Error::Contract(format!(
            "gaussian_smooth on {:?} with sigma {sigma}",
            m.dims()
        )));
    }
    if sigma == 0.0 {
        return Ok(m.clone());
    }
    let (h, w) = (m.dims()[0], m.dims()[1]);
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let src = m.data();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * src[y * w + reflect_index(x as i64 + j as i64 - r, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(j, kv)| kv * tmp[reflect_index(y as i64 + j as i64 - r, h) * w + x])
                .sum();
        }
    }
    Tensor::new(vec![h, w], out)
}

pub fn image_score(m: &Tensor<f64>, mode: ImageScoreMode) -> f64 {
    match mode {
        ImageScoreMode::Max => m.data().iter().copied().fold(f64::NEG_INFINITY, f64::max),
        ImageScoreMode::Top1pct => {
            let k = m.len().div_ceil(100).max(1);
            let mut v = m.data().to_vec();
            v.sort_by(|a, b| b.total_cmp(a));
            v[..k].iter().sum::<f64>() / k as f64
        }
    }
}

/// Token map → upsampled, smoothed pixel map with its image score.
pub fn anomaly_map(token_map: &Tensor<f64>, image_size: usize, cfg: &ScoreConfig) -> Result<AnomalyMap> {
    let up = upsample_bilinear(token_map, image_size, image_size)?;
    let values = gaussian_smooth(&up, cfg.sigma)?;
    let image_score = image_score(&values, cfg.image_score);
    Ok(AnomalyMap { values, image_score })
}

/// 8-bit grayscale PNG of `m` min-max scaled by `(lo, hi)`.
pub fn write_heatmap_png(path: &Path, m: &Tensor<f64>, lo: f64, hi: f64) -> Result<()> {
    let (h, w) = (m.dims()[0], m.dims()[1]);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels: Vec<u8> = m
        .data()
        .iter()
        .map(|v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut bytes = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut bytes, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Contract(format!("png header: {e}")))?;
        writer
            .write_image_data(&pixels)
            .map_err(|e| Error::Contract(format!("png data: {e}")))?;
    }
    crate::checkpoint::write_atomic(path, &bytes)
}
