//! Deterministic three-modality phantom slices with blob anomalies.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::{Label, SliceSample};
use crate::tensorgrad::Tensor;

pub const SYNTH_SIZE: usize = 64;
pub const NOISE_STD: f64 = 0.02;
/// Intensity shift of anomalous pixels per modality.
pub const BLOB_OFFSETS: [f64; 3] = [0.35, -0.35, 0.25];

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
}

impl Ellipse {
    fn random<R: Rng>(rng: &mut R, cy: f64, cx: f64, r: std::ops::Range<f64>) -> Self {
        Ellipse {
            cy,
            cx,
            ry: rng.random_range(r.clone()),
            rx: rng.random_range(r),
            angle: rng.random_range(0.0..std::f64::consts::PI),
        }
    }

    /// Squared normalised radius; `<= 1` inside.
    fn rho2(&self, y: f64, x: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx).powi(2) + (v / self.ry).powi(2)
    }
}

/// One phantom slice. Abnormal slices carry 1–3 blobs inside the brain.
pub fn synth_sample<R: Rng>(rng: &mut R, id: String, abnormal: bool) -> SliceSample {
    let n = SYNTH_SIZE;
    let mid = n as f64 / 2.0 - 0.5;
    let (cy, cx) = (mid + rng.random_range(-2.0..2.0), mid + rng.random_range(-2.0..2.0));
    let brain = Ellipse::random(rng, cy, cx, 20.0..27.0);
    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            let ang = rng.random_range(0.0..std::f64::consts::TAU);
            let freq = rng.random_range(0.5..2.0) * std::f64::consts::TAU / n as f64;
            (
                freq * ang.cos(),
                freq * ang.sin(),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let blobs: Vec<Ellipse> = if abnormal {
        (0..rng.random_range(1..=3))
            .map(|_| {
                // centre within the inner 60% of the brain ellipse
                let (r, t) = (
                    0.6 * rng.random::<f64>().sqrt(),
                    rng.random_range(0.0..std::f64::consts::TAU),
                );
                let (s, c) = brain.angle.sin_cos();
                let (u, v) = (r * t.cos() * brain.rx, r * t.sin() * brain.ry);
                let (by, bx) = (brain.cy + s * u + c * v, brain.cx + c * u - s * v);
                Ellipse::random(rng, by, bx, 3.0..8.0)
            })
            .collect()
    } else {
        Vec::new()
    };
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut data = vec![0f32; 3 * n * n];
    let mut mask = vec![0u8; n * n];
    for y in 0..n {
        for x in 0..n {
            let i = y * n + x;
            let (yf, xf) = (y as f64, x as f64);
            let rho2 = brain.rho2(yf, xf);
            let mut v = [0.0; 3];
            if rho2 <= 1.0 {
                let tex: f64 = waves
                    .iter()
                    .map(|&(fy, fx, ph)| 0.02 * (fy * yf + fx * xf + ph).sin())
                    .sum();
                let base = 0.6 + 0.1 * (1.0 - rho2) + tex;
                v = [base, 1.0 - base, base.max(0.0).sqrt()];
                if blobs.iter().any(|b| b.rho2(yf, xf) <= 1.0) {
                    mask[i] = 1;
                    for (c, off) in BLOB_OFFSETS.iter().enumerate() {
                        v[c] += off;
                    }
                }
            }
            for (c, val) in v.iter().enumerate() {
                data[c * n * n + i] = (val + noise.sample(rng)) as f32;
            }
        }
    }
    let abnormal = mask.iter().any(|&m| m > 0);
    SliceSample {
        id,
        channels: Tensor::new(vec![3, n, n], data).expect("sized"),
        mask: abnormal.then_some(mask),
        label: if abnormal { Label::Abnormal } else { Label::Normal },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn abnormal_samples_have_masks_and_shifted_intensity() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut diffs = Vec::new();
        for k in 0..100 {
            let s = synth_sample(&mut rng, format!("a{k}"), true);
            let m = s.mask.as_ref().expect("mask");
            assert!(m.contains(&1));
            let c0 = &s.channels.data()[..SYNTH_SIZE * SYNTH_SIZE];
            let (mut a, mut na, mut b, mut nb) = (0.0, 0, 0.0, 0);
            for (i, &v) in c0.iter().enumerate() {
                // brain background: inside the phantom but off the blobs
                if m[i] == 1 {
                    a += v as f64;
                    na += 1;
                } else if v > 0.3 {
                    b += v as f64;
                    nb += 1;
                }
            }
            diffs.push(a / na as f64 - b / nb as f64);
        }
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        assert!((mean - 0.35).abs() < 0.05, "{mean}");
        let normal = synth_sample(&mut rng, "n".into(), false);
        assert!(normal.mask.is_none() && normal.label == Label::Normal);
    }

    #[test]
    fn same_seed_same_sample() {
        let a = synth_sample(&mut ChaCha8Rng::seed_from_u64(4), "x".into(), true);
        let b = synth_sample(&mut ChaCha8Rng::seed_from_u64(4), "x".into(), true);
        assert_eq!(a, b);
    }
}
