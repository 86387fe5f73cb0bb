//! Self-check suites behind `anyad verify`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::align::{channel_stats_var, distribution_loss, parse_attachment, AttachPoint};
use crate::config::Config;
use crate::encoder::{FeatureBundle, ModalityMask};
use crate::error::{Error, Result};
use crate::inp::consistency_loss;
use crate::model::Model;
use crate::tensorgrad::{finite_diff_check, GradCheckReport, Session, Tensor, Var};
use crate::train::{objective, reconstruction_loss};

pub const GRAD_H: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

/// A tiny f64 model with every trainable parameter perturbed off its init,
/// full-modality features of a random batch, and references for all points.
pub fn tiny_fixture(seed: u64) -> Result<(Model<f64>, FeatureBundle<f64>)> {
    let mut cfg = Config::tiny();
    cfg.train.seed = seed;
    cfg.align.attachment = parse_attachment("bn,en1")?;
    let mut model = Model::<f64>::new(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for p in model.store.iter_mut().filter(|p| p.requires_grad) {
        for v in p.value.data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let size = model.cfg.encoder.image_size;
    let x = Tensor::from_fn(&[2, 3, size, size], |_| rng.random_range(0.0..1.0));
    model.refs = model.precompute_reference(&x, 2, &[AttachPoint::En0, AttachPoint::En1, AttachPoint::Bn])?;
    let f = model.features(&x, &ModalityMask::from_combo(5)?)?;
    Ok((model, f))
}

fn probe(s: &Session<'_, f64>, v: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_fn(&s.dims(v), |_| rng.random_range(-1.0..1.0));
    Ok(s.sum_all(s.mul(v, s.constant(r))?))
}

/// Finite-difference checks of each stage of the student and of every loss
/// term, in 64-bit precision.
pub fn gradcheck_suite() -> Result<Vec<(&'static str, GradCheckReport)>> {
    type Case = fn(&Model<f64>, &Session<'_, f64>, &FeatureBundle<f64>) -> Result<Var>;
    let cases: [(&str, Case); 7] = [
        ("bottleneck", |m, s, f| probe(s, m.forward(s, f)?.bn, 1)),
        ("prototype_extraction", |m, s, f| probe(s, m.forward(s, f)?.p, 2)),
        ("decoder", |m, s, f| {
            let fwd = m.forward(s, f)?;
            let a = probe(s, fwd.de0, 3)?;
            s.add(a, probe(s, fwd.de1, 4)?)
        }),
        ("prototype_consistency", |m, s, f| {
            Ok(consistency_loss(s, m.forward(s, f)?.token_dist))
        }),
        ("reconstruction", |m, s, f| {
            let fwd = m.forward(s, f)?;
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let w = Tensor::from_fn(&s.dims(fwd.token_dist), |_| rng.random_range(0.2..2.0));
            reconstruction_loss(s, (fwd.en0, fwd.en1), (fwd.de0, fwd.de1), &w)
        }),
        ("distribution_alignment", |m, s, f| {
            let fwd = m.forward(s, f)?;
            let (mean, var) = channel_stats_var(s, fwd.bn)?;
            distribution_loss(s, mean, var, m.refs.get(AttachPoint::Bn)?)
        }),
        ("objective", |m, s, f| {
            let fwd = m.forward(s, f)?;
            let mut cfg = m.cfg.clone();
            // the weights are detached; hold them flat so differences see the same objective
            cfg.train.gamma = 1e-12;
            Ok(objective(s, &fwd, &cfg, &m.refs)?.total)
        }),
    ];
    let mut out = Vec::new();
    for (name, case) in cases {
        let (mut model, f) = tiny_fixture(11)?;
        let frozen = model.clone();
        let report = finite_diff_check(&mut model.store, |s| case(&frozen, s, &f), GRAD_H, GRAD_TOL)?;
        out.push((name, report));
    }
    Ok(out)
}

/// Scores stay bitwise identical when masked channels are overwritten.
pub fn masking_suite(trials: usize) -> Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for t in 0..trials {
        let mut cfg = Config::tiny();
        cfg.train.seed = rng.random();
        let model = Model::<f32>::new(cfg)?;
        let size = model.cfg.encoder.image_size;
        let x = Tensor::<f32>::from_fn(&[2, 3, size, size], |_| rng.random_range(0.0..1.0));
        let mask = ModalityMask::from_combo(rng.random_range(1..=7))?;
        let mut y = x.clone();
        let plane = size * size;
        for (i, v) in y.data_mut().iter_mut().enumerate() {
            if !mask.present()[(i / plane) % 3] {
                *v = rng.random_range(-100.0..100.0);
            }
        }
        let (a, b) = (model.score(&x, &mask)?, model.score(&y, &mask)?);
        let fa = model.features(&x, &mask)?;
        let fb = model.features(&y, &mask)?;
        if a != b || fa.en0 != fb.en0 || fa.en1 != fb.en1 {
            return Err(Error::Verification(format!(
                "trial {t}: masked channel leaked into combo {}",
                mask.label()
            )));
        }
    }
    Ok(())
}

pub fn run_suite(name: &str) -> Result<String> {
    let mut log = String::new();
    let grad = |log: &mut String| -> Result<()> {
        let mut failed = Vec::new();
        for (case, r) in gradcheck_suite()? {
            log.push_str(&format!("gradcheck {case:<24} max rel err {:.3e}\n", r.max_rel_err()));
            if !r.passed() {
                failed.push(case);
            }
        }
        if failed.is_empty() {
            Ok(())
        } else {
            Err(Error::Verification(format!(
                "gradient check failed for {}",
                failed.join(", ")
            )))
        }
    };
    match name {
        "gradcheck" => grad(&mut log)?,
        "masking" => masking_suite(100)?,
        "all" => {
            grad(&mut log)?;
            masking_suite(100)?;
        }
        other => {
            return Err(Error::Usage(format!(
                "unknown suite {other:?}; expected gradcheck, masking or all"
            )))
        }
    }
    log.push_str(&format!("suite {name}: ok\n"));
    Ok(log)
}
