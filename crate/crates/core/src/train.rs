//! Mask sampling, the training objective, the optimisation loop and
//! checkpoint persistence.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{channel_stats_var, distribution_loss, AttachPoint, ChannelStats, ReferenceStore};
use crate::checkpoint::{Archive, Entry};
use crate::config::Config;
use crate::encoder::{FeatureBundle, ModalityMask};
use crate::error::{Error, Result};
use crate::model::{gather_batch, rng_stream, slice_batch, Forward, Model, STREAM_PRETRAIN, STREAM_TRAIN};
use crate::scalar::Scalar;
use crate::tensorgrad::{adam_step, cosine_distance_rows, AdamConfig, AdamState, Session, Tensor, Var, COSINE_EPS};

/// Guard on `d_i` inside the adaptive weight ratio.
pub const WEIGHT_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ComboSampling {
    /// One of the seven non-empty subsets per batch, uniformly.
    Uniform7,
    FullOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightDirection {
    /// `ω = (d̄ / d_i)^γ`
    Paper,
    /// `ω = (d_i / d̄)^γ`
    Prose,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: f64,
    pub combo_sampling: ComboSampling,
    pub weight_direction: WeightDirection,
    /// Linear warmup length in steps; 0 disables it.
    pub warmup_steps: u64,
    /// Write a checkpoint every this many steps; 0 only at the end.
    pub checkpoint_every: u64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 2000,
            batch_size: 8,
            lambda1: 0.2,
            lambda2: 0.2,
            gamma: 3.0,
            combo_sampling: ComboSampling::Uniform7,
            weight_direction: WeightDirection::Paper,
            warmup_steps: 0,
            checkpoint_every: 0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad("train.lambda1 and train.lambda2 must be non-negative");
        }
        if !(self.gamma > 0.0) {
            return bad("train.gamma must be positive");
        }
        if self.steps == 0 || self.batch_size == 0 {
            return bad("train.steps and train.batch_size must be at least 1");
        }
        if !(self.adam.lr > 0.0) {
            return bad("train.adam.lr must be positive");
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        if self.warmup_steps == 0 {
            self.adam.lr
        } else {
            self.adam.lr * ((step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        }
    }
}

pub fn sample_combo<R: Rng>(rng: &mut R, mode: ComboSampling) -> ModalityMask {
    let combo = match mode {
        ComboSampling::Uniform7 => rng.random_range(1..=7u8),
        ComboSampling::FullOnly => 7,
    };
    ModalityMask::from_combo(combo).expect("combo in range")
}

/// Per-token difficulty weights, treated as constants by the caller.
///
/// `d̄` is the mean over all of `d`; an all-zero `d` yields ones.
pub fn adaptive_weights(d: &[f64], gamma: f64, direction: WeightDirection) -> Vec<f64> {
    let mean = d.iter().sum::<f64>() / d.len().max(1) as f64;
    if !(mean > 0.0) {
        return vec![1.0; d.len()];
    }
    d.iter()
        .map(|&di| {
            let di = di.max(WEIGHT_EPS);
            match direction {
                WeightDirection::Paper => (mean / di).powf(gamma),
                WeightDirection::Prose => (di / mean).powf(gamma),
            }
        })
        .collect()
}

/// `½ Σ_scales (1/B) Σ_tokens ω · (1 − cos(en, de))` with `ω: [B, T]`.
pub fn reconstruction_loss<T: Scalar>(
    s: &Session<'_, T>,
    en: (Var, Var),
    de: (Var, Var),
    omega: &Tensor<T>,
) -> Result<Var> {
    let dims = s.dims(en.0);
    if dims.len() != 3 || omega.dims() != &dims[..2] {
        return Err(Error::shape("reconstruction_loss", &dims, omega.dims()));
    }
    let w = s.constant(omega.clone());
    let eps = T::c(COSINE_EPS);
    let d0 = cosine_distance_rows(s, en.0, de.0, eps)?;
    let d1 = cosine_distance_rows(s, en.1, de.1, eps)?;
    let sum = s.add(s.sum_all(s.mul(d0, w)?), s.sum_all(s.mul(d1, w)?))?;
    Ok(s.scale(sum, T::c(0.5 / dims[0] as f64)))
}

/// `l_rec + λ₁·l_con + λ₂·l_dist`; any non-finite term is an error naming it.
pub fn total_loss<T: Scalar>(s: &Session<'_, T>, rec: Var, con: Var, dist: Var, cfg: &TrainConfig) -> Result<Var> {
    for (name, v) in [("l_rec", rec), ("l_con", con), ("l_dist", dist)] {
        if !s.value(v).data().iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite(format!("loss term {name}")));
        }
    }
    let a = s.add(rec, s.scale(con, T::c(cfg.lambda1)))?;
    s.add(a, s.scale(dist, T::c(cfg.lambda2)))
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub rec: Var,
    pub con: Var,
    pub dist: Var,
    pub total: Var,
}

/// Builds the full objective on top of `fwd`.
pub fn objective<T: Scalar>(
    s: &Session<'_, T>,
    fwd: &Forward,
    cfg: &Config,
    refs: &ReferenceStore,
) -> Result<LossTerms> {
    let tc = &cfg.train;
    let d: Vec<f64> = s.value(fwd.token_dist).data().iter().map(|v| v.f64()).collect();
    let omega = adaptive_weights(&d, tc.gamma, tc.weight_direction);
    let omega = Tensor::new(s.dims(fwd.token_dist), omega.into_iter().map(T::c).collect())?;
    let rec = reconstruction_loss(s, (fwd.en0, fwd.en1), (fwd.de0, fwd.de1), &omega)?;
    let con = crate::inp::consistency_loss(s, fwd.token_dist);
    let mut dist = s.constant(Tensor::scalar(T::zero()));
    for &p in &cfg.align.attachment {
        let (m, v) = channel_stats_var(s, Model::<T>::attach_var(fwd, p))?;
        let l = distribution_loss(s, m, v, refs.get(p)?)?;
        dist = s.add(dist, l)?;
    }
    let total = total_loss(s, rec, con, dist, tc)?;
    Ok(LossTerms { rec, con, dist, total })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepReport {
    pub step: u64,
    pub combo: u8,
    pub l_rec: f64,
    pub l_con: f64,
    pub l_dist: f64,
    pub total: f64,
    pub grad_norm: f64,
}

/// One optimisation step on precomputed (already masked) teacher features.
pub fn train_step<T: Scalar>(
    model: &mut Model<T>,
    opt: &mut AdamState<T>,
    features: &FeatureBundle<T>,
    lr: f64,
) -> Result<StepReport> {
    let (grads, report) = {
        let s = Session::new(&model.store);
        let fwd = model.forward(&s, features)?;
        let terms = objective(&s, &fwd, &model.cfg, &model.refs)?;
        let item = |v: Var| s.value(v).item().f64();
        let report = StepReport {
            step: opt.step + 1,
            combo: 0,
            l_rec: item(terms.rec),
            l_con: item(terms.con),
            l_dist: item(terms.dist),
            total: item(terms.total),
            grad_norm: 0.0,
        };
        (s.backward(terms.total)?, report)
    };
    let mut sq = 0.0f64;
    for (id, g) in &grads {
        g.check_finite(&format!("gradient of {}", model.store.get(*id).name))?;
        sq += g.data().iter().map(|v| v.f64() * v.f64()).sum::<f64>();
    }
    model.store.zero_grad();
    model.store.accumulate(grads)?;
    adam_step(&mut model.store, opt, lr)?;
    Ok(StepReport {
        grad_norm: sq.sqrt(),
        ..report
    })
}

/// Training state: model, optimiser, sampling RNG and a teacher-feature cache.
pub struct Trainer<T: Scalar> {
    pub model: Model<T>,
    pub opt: AdamState<T>,
    pub rng: ChaCha8Rng,
    images: Tensor<T>,
    cache: Vec<Option<FeatureBundle<T>>>,
}

impl<T: Scalar> Trainer<T> {
    /// Fresh run on normal `images: [N, C, H, W]`: optional teacher
    /// pretraining, then the full-modality reference pass.
    pub fn new(mut model: Model<T>, images: Tensor<T>) -> Result<Self> {
        check_images(&model.cfg, &images)?;
        let cfg = model.cfg.clone();
        if cfg.encoder.pretrain_steps > 0 {
            let mut rng = rng_stream(cfg.train.seed, STREAM_PRETRAIN);
            let Model { encoder, store, .. } = &mut model;
            encoder.pretrain(
                store,
                &images,
                cfg.encoder.pretrain_steps,
                cfg.train.batch_size,
                &mut rng,
            )?;
        }
        if model.refs.require(&cfg.align.attachment).is_err() {
            model.refs = model.precompute_reference(&images, cfg.train.batch_size, &cfg.align.attachment)?;
        }
        let opt = AdamState::new(&model.store, cfg.train.adam.clone());
        Ok(Self::assemble(
            model,
            opt,
            rng_stream(cfg.train.seed, STREAM_TRAIN),
            images,
        ))
    }

    fn assemble(model: Model<T>, opt: AdamState<T>, rng: ChaCha8Rng, images: Tensor<T>) -> Self {
        let n = images.dims()[0];
        Trainer {
            model,
            opt,
            rng,
            images,
            cache: vec![None; n * 7],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.opt.step
    }

    fn features(&mut self, idx: &[usize], mask: &ModalityMask) -> Result<FeatureBundle<T>> {
        let combo = mask.combo().expect("three-channel mask") as usize;
        for &i in idx {
            let slot = i * 7 + combo - 1;
            if self.cache[slot].is_none() {
                let x = slice_batch(&self.images, i, i + 1)?;
                self.cache[slot] = Some(self.model.features(&x, mask)?);
            }
        }
        let parts: Vec<&FeatureBundle<T>> = idx
            .iter()
            .map(|&i| self.cache[i * 7 + combo - 1].as_ref().expect("filled"))
            .collect();
        FeatureBundle::concat(&parts)
    }

    fn draw_batch<R: Rng>(&self, rng: &mut R) -> (ModalityMask, Vec<usize>) {
        let tc = &self.model.cfg.train;
        let mask = sample_combo(rng, tc.combo_sampling);
        let n = self.images.dims()[0];
        let idx = (0..tc.batch_size).map(|_| rng.random_range(0..n)).collect();
        (mask, idx)
    }

    /// Objective of the next batch in `T` and in an independent f64 replay
    /// from the raw images; no state changes.
    pub fn replay_next_loss_f64(&self) -> Result<(f64, f64)> {
        let (mask, idx) = self.draw_batch(&mut self.rng.clone());
        let x = gather_batch(&self.images, &idx)?;
        let native = {
            let f = self.model.features(&x, &mask)?;
            let s = Session::new(&self.model.store);
            let fwd = self.model.forward(&s, &f)?;
            s.value(objective(&s, &fwd, &self.model.cfg, &self.model.refs)?.total)
                .item()
                .f64()
        };
        let m64: Model<f64> = self.model.cast();
        let f = m64.features(&x.cast::<f64>(), &mask)?;
        let s = Session::new(&m64.store);
        let fwd = m64.forward(&s, &f)?;
        let wide = s.value(objective(&s, &fwd, &m64.cfg, &m64.refs)?.total).item();
        Ok((native, wide))
    }

    /// Samples a mask and a batch and takes one optimiser step.
    pub fn step(&mut self) -> Result<StepReport> {
        let tc = self.model.cfg.train.clone();
        let mut rng = self.rng.clone();
        let (mask, idx) = self.draw_batch(&mut rng);
        self.rng = rng;
        let f = self.features(&idx, &mask)?;
        let lr = tc.lr_at(self.opt.step);
        let mut report = train_step(&mut self.model, &mut self.opt, &f, lr)?;
        report.combo = mask.combo().expect("three-channel mask");
        Ok(report)
    }

    /// Steps until `cfg.train.steps`, calling `on_step` after each.
    pub fn run(&mut self, mut on_step: impl FnMut(&Self, &StepReport) -> Result<()>) -> Result<()> {
        while self.opt.step < self.model.cfg.train.steps {
            let r = self.step()?;
            on_step(self, &r)?;
        }
        Ok(())
    }

    pub fn to_archive(&self) -> Archive {
        let mut a = model_archive(&self.model);
        for (i, p) in self.model.store.iter().enumerate() {
            if let (Some(m), Some(v)) = (&self.opt.m[i], &self.opt.v[i]) {
                a.insert(format!("adam.m.{}", p.name), Entry::from_tensor(m));
                a.insert(format!("adam.v.{}", p.name), Entry::from_tensor(v));
            }
        }
        a.insert("adam.step", scalar_i64(self.opt.step as i64));
        let seed = self.rng.get_seed();
        a.insert(
            "rng.seed",
            Entry::i64s(
                seed.chunks(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        );
        a.insert("rng.stream", scalar_i64(self.rng.get_stream() as i64));
        let pos = self.rng.get_word_pos();
        a.insert(
            "rng.word_pos",
            Entry::i64s(vec![pos as u64 as i64, (pos >> 64) as u64 as i64]),
        );
        a
    }

    /// Resumes from an archive written by [`Trainer::to_archive`].
    pub fn from_archive(a: &Archive, images: Tensor<T>) -> Result<Self> {
        let model = model_from_archive::<T>(a)?;
        check_images(&model.cfg, &images)?;
        let mut opt = AdamState::new(&model.store, model.cfg.train.adam.clone());
        for (i, p) in model.store.iter().enumerate() {
            if p.requires_grad {
                opt.m[i] = Some(a.get(&format!("adam.m.{}", p.name))?.to_tensor(&p.name)?);
                opt.v[i] = Some(a.get(&format!("adam.v.{}", p.name))?.to_tensor(&p.name)?);
            }
        }
        opt.step = read_scalar_i64(a, "adam.step")? as u64;
        let seed_words = a.get("rng.seed")?.as_i64("rng.seed")?;
        if seed_words.len() != 4 {
            return Err(Error::Contract("rng.seed must hold 4 words".into()));
        }
        let mut seed = [0u8; 32];
        for (c, w) in seed.chunks_mut(8).zip(seed_words) {
            c.copy_from_slice(&w.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(read_scalar_i64(a, "rng.stream")? as u64);
        let pos = a.get("rng.word_pos")?.as_i64("rng.word_pos")?;
        if pos.len() != 2 {
            return Err(Error::Contract("rng.word_pos must hold 2 words".into()));
        }
        rng.set_word_pos((pos[0] as u64 as u128) | ((pos[1] as u64 as u128) << 64));
        Ok(Self::assemble(model, opt, rng, images))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_archive().save(path)
    }
}

fn check_images<T: Scalar>(cfg: &Config, images: &Tensor<T>) -> Result<()> {
    let e = &cfg.encoder;
    if images.rank() != 4 || images.dims()[0] == 0 || images.dims()[1..] != [e.in_channels, e.image_size, e.image_size]
    {
        return Err(Error::shape(
            "training images",
            images.dims(),
            &[e.in_channels, e.image_size, e.image_size],
        ));
    }
    if e.in_channels != 3 {
        return Err(Error::Config(
            "training samples one of the 7 three-modality combinations".into(),
        ));
    }
    Ok(())
}

fn scalar_i64(v: i64) -> Entry {
    Entry {
        dims: vec![],
        data: crate::checkpoint::EntryData::I64(vec![v]),
    }
}

fn read_scalar_i64(a: &Archive, name: &str) -> Result<i64> {
    a.get(name)?
        .as_i64(name)?
        .first()
        .copied()
        .ok_or_else(|| Error::Contract(format!("{name} is empty")))
}

/// Parameters, reference statistics and config of `model`.
pub fn model_archive<T: Scalar>(model: &Model<T>) -> Archive {
    let mut a = Archive {
        config: model.cfg.to_toml(),
        ..Default::default()
    };
    for p in model.store.iter() {
        a.insert(format!("param.{}", p.name), Entry::from_tensor(&p.value));
    }
    for (point, st) in &model.refs.stats {
        a.insert(
            format!("ref.{point}.mean"),
            Entry::f64s(vec![st.dim()], st.mean.clone()),
        );
        a.insert(format!("ref.{point}.var"), Entry::f64s(vec![st.dim()], st.var.clone()));
        a.insert(format!("ref.{point}.count"), scalar_i64(st.count as i64));
    }
    a
}

/// Stored parameter precision of an archive.
pub fn archive_dtype(a: &Archive) -> Result<crate::DType> {
    a.entries
        .iter()
        .find(|(k, _)| k.starts_with("param."))
        .map(|(_, e)| e.dtype())
        .ok_or_else(|| Error::Contract("checkpoint holds no parameters".into()))
}

pub fn model_from_archive<T: Scalar>(a: &Archive) -> Result<Model<T>> {
    let cfg = Config::from_toml(&a.config)?;
    let mut model = Model::<T>::new(cfg)?;
    let names: Vec<String> = model.store.iter().map(|p| p.name.clone()).collect();
    for name in names {
        let key = format!("param.{name}");
        model.store.set(&name, a.get(&key)?.to_tensor(&key)?)?;
    }
    model.refs = refs_from_archive(a)?;
    Ok(model)
}

/// The `ref.*` entries of an archive; parameters are not needed.
pub fn refs_from_archive(a: &Archive) -> Result<ReferenceStore> {
    let mut refs = ReferenceStore::default();
    for point in AttachPoint::ALL {
        let key = |f: &str| format!("ref.{point}.{f}");
        if !a.entries.contains_key(&key("mean")) {
            continue;
        }
        let stats = ChannelStats {
            mean: a.get(&key("mean"))?.as_f64(&key("mean"))?.to_vec(),
            var: a.get(&key("var"))?.as_f64(&key("var"))?.to_vec(),
            count: read_scalar_i64(a, &key("count"))? as u64,
        };
        refs.stats.insert(point, stats);
    }
    Ok(refs)
}
