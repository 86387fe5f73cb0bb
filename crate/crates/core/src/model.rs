//! The full network: frozen teacher plus the trainable student path.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::{accumulate_reference, AttachPoint, ReferenceStore};
use crate::config::Config;
use crate::decoder::Decoder;
use crate::encoder::{apply_modality_mask, Bottleneck, Encoder, FeatureBundle, ModalityMask};
use crate::error::{Error, Result};
use crate::inp::{nearest_distances, Prototypes};
use crate::scalar::Scalar;
use crate::score::{anomaly_map, token_map, AnomalyMap};
use crate::tensorgrad::{ParamStore, Session, Tensor, Var};

/// Derives an independent generator for one purpose from the run seed.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub const STREAM_STUDENT: u64 = 1;
pub const STREAM_TRAIN: u64 = 2;
pub const STREAM_PRETRAIN: u64 = 3;

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub cfg: Config,
    pub store: ParamStore<T>,
    pub encoder: Encoder,
    pub bottleneck: Bottleneck,
    pub prototypes: Prototypes,
    pub decoder: Decoder,
    pub refs: ReferenceStore,
}

/// Every intermediate of one student forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub en0: Var,
    pub en1: Var,
    pub bn: Var,
    pub fq: Var,
    pub p: Var,
    pub token_dist: Var,
    pub assign: Vec<usize>,
    pub de0: Var,
    pub de1: Var,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: Config) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut teacher_rng = ChaCha8Rng::seed_from_u64(cfg.encoder.seed.unwrap_or(cfg.train.seed));
        let encoder = Encoder::new(cfg.encoder.clone(), &mut store, &mut teacher_rng)?;
        let d = cfg.encoder.embed_dim;
        let mut rng = rng_stream(cfg.train.seed, STREAM_STUDENT);
        let bottleneck = Bottleneck::new(&mut store, d, &mut rng);
        let prototypes = Prototypes::new(&mut store, &cfg.inp, d, &mut rng)?;
        let decoder = Decoder::new(cfg.decoder.clone(), &mut store, d, &mut rng)?;
        Ok(Model {
            cfg,
            store,
            encoder,
            bottleneck,
            prototypes,
            decoder,
            refs: ReferenceStore::default(),
        })
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            store: self.store.cast(),
            encoder: self.encoder.clone(),
            bottleneck: self.bottleneck.clone(),
            prototypes: self.prototypes.clone(),
            decoder: self.decoder.clone(),
            refs: self.refs.clone(),
        }
    }

    /// Teacher features of `x: [B, C, H, W]` after masking.
    pub fn features(&self, x: &Tensor<T>, mask: &ModalityMask) -> Result<FeatureBundle<T>> {
        let masked = apply_modality_mask(x, mask)?;
        self.encoder.features(&self.store, &masked)
    }

    /// Bottleneck, prototypes and decoder on precomputed teacher features.
    pub fn forward(&self, s: &Session<'_, T>, f: &FeatureBundle<T>) -> Result<Forward> {
        let en0 = s.constant(f.en0.clone());
        let en1 = s.constant(f.en1.clone());
        let bn = self.bottleneck.forward(s, en0, en1, true)?;
        let fq = s.constant(f.en0.add(&f.en1)?.scale(T::c(0.5)));
        let p = self.prototypes.extract(s, fq)?;
        let near = nearest_distances(s, fq, p)?;
        let (de0, de1) = self.decoder.decode(s, bn, p)?;
        Ok(Forward {
            en0,
            en1,
            bn,
            fq,
            p,
            token_dist: near.token_dist,
            assign: near.assign,
            de0,
            de1,
        })
    }

    /// Value of an attachment point for `fwd`.
    pub fn attach_var(fwd: &Forward, point: AttachPoint) -> Var {
        match point {
            AttachPoint::En0 => fwd.en0,
            AttachPoint::En1 => fwd.en1,
            AttachPoint::Bn => fwd.bn,
        }
    }

    /// Streams full-modality features of `images` into reference statistics
    /// for `points`; no parameter changes.
    pub fn precompute_reference(
        &self,
        images: &Tensor<T>,
        batch: usize,
        points: &[AttachPoint],
    ) -> Result<ReferenceStore> {
        let n = images.dims()[0];
        if n == 0 {
            return Err(Error::Contract("reference pass over an empty dataset".into()));
        }
        let full = ModalityMask::all(images.dims()[1]);
        let batches = (0..n).step_by(batch.max(1)).map(|lo| {
            let hi = (lo + batch.max(1)).min(n);
            let x = slice_batch(images, lo, hi)?;
            let f = self.features(&x, &full)?;
            let mut out = BTreeMap::new();
            for &p in points {
                let t = match p {
                    AttachPoint::En0 => f.en0.clone(),
                    AttachPoint::En1 => f.en1.clone(),
                    AttachPoint::Bn => {
                        let s = Session::new(&self.store);
                        let bn =
                            self.bottleneck
                                .forward(&s, s.constant(f.en0.clone()), s.constant(f.en1.clone()), true)?;
                        (*s.value(bn)).clone()
                    }
                };
                out.insert(p, t);
            }
            Ok(out)
        });
        accumulate_reference(batches, points)
    }

    /// Anomaly maps for a batch of raw images under `mask`.
    pub fn score(&self, x: &Tensor<T>, mask: &ModalityMask) -> Result<Vec<AnomalyMap>> {
        let f = self.features(x, mask)?;
        self.score_features(&f)
    }

    pub fn score_features(&self, f: &FeatureBundle<T>) -> Result<Vec<AnomalyMap>> {
        let s = Session::new(&self.store);
        let fwd = self.forward(&s, f)?;
        let (de0, de1) = (s.value(fwd.de0), s.value(fwd.de1));
        let maps = token_map((&f.en0, &f.en1), (&de0, &de1), f.grid_h, f.grid_w)?;
        maps.iter()
            .map(|m| anomaly_map(m, self.cfg.encoder.image_size, &self.cfg.score))
            .collect()
    }
}

/// Rows `lo..hi` of an `[N, ..]` tensor.
pub fn slice_batch<T: Scalar>(x: &Tensor<T>, lo: usize, hi: usize) -> Result<Tensor<T>> {
    let n = x.dims()[0];
    if lo >= hi || hi > n {
        return Err(Error::Contract(format!("batch range {lo}..{hi} outside 0..{n}")));
    }
    let per = x.len() / n;
    let mut dims = x.dims().to_vec();
    dims[0] = hi - lo;
    Tensor::new(dims, x.data()[lo * per..hi * per].to_vec())
}

/// Rows `idx` of an `[N, ..]` tensor, in order.
pub fn gather_batch<T: Scalar>(x: &Tensor<T>, idx: &[usize]) -> Result<Tensor<T>> {
    let n = x.dims()[0];
    let per = x.len() / n.max(1);
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        if i >= n {
            return Err(Error::Contract(format!("sample index {i} outside 0..{n}")));
        }
        data.extend_from_slice(&x.data()[i * per..(i + 1) * per]);
    }
    let mut dims = x.dims().to_vec();
    dims[0] = idx.len();
    Tensor::new(dims, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn teacher_seed_falls_back_to_run_seed() {
        let mut cfg = Config::tiny();
        cfg.train.seed = 9;
        let a = Model::<f32>::new(cfg.clone()).unwrap();
        cfg.encoder.seed = Some(9);
        let b = Model::<f32>::new(cfg.clone()).unwrap();
        assert_eq!(
            a.store.iter().next().unwrap().value,
            b.store.iter().next().unwrap().value
        );
        cfg.encoder.seed = Some(10);
        let c = Model::<f32>::new(cfg).unwrap();
        assert_ne!(
            a.store.iter().next().unwrap().value,
            c.store.iter().next().unwrap().value
        );
    }

    #[test]
    fn reference_is_batch_size_invariant() {
        let model = Model::<f32>::new(Config::tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::<f32>::from_fn(&[8, 3, 16, 16], |_| rng.random_range(0.0..1.0));
        let pts = [AttachPoint::En0, AttachPoint::En1, AttachPoint::Bn];
        let a = model.precompute_reference(&x, 1, &pts).unwrap();
        let b = model.precompute_reference(&x, 8, &pts).unwrap();
        for p in pts {
            let (sa, sb) = (a.get(p).unwrap(), b.get(p).unwrap());
            assert_eq!(sa.count, 8 * 4);
            for j in 0..8 {
                assert!((sa.mean[j] - sb.mean[j]).abs() < 1e-6);
                assert!((sa.var[j] - sb.var[j]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn scores_ignore_masked_channel_contents() {
        let model = Model::<f32>::new(Config::tiny()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f32>::from_fn(&[2, 3, 16, 16], |_| rng.random_range(0.0..1.0));
        let mut y = x.clone();
        for v in y.data_mut()[256..512].iter_mut() {
            *v = rng.random_range(-5.0..5.0);
        }
        let mask = ModalityMask::from_combo(5).unwrap();
        assert_eq!(model.score(&x, &mask).unwrap(), model.score(&y, &mask).unwrap());
    }
}
