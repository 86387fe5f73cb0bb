//! Frozen ViT teacher, modality masking, two-group fusion and the
//! expand–compress bottleneck.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{fuse_layers, gaussian, FeedForward, LayerNorm, Linear};
use crate::scalar::Scalar;
use crate::tensorgrad::{ParamId, ParamStore, Session, Tensor, Var};

/// Channel order of every multi-modality tensor.
pub const MODALITIES: [&str; 3] = ["FLAIR", "T1", "T2"];

/// Which modality channels are present for a sample or batch.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ModalityMask {
    present: Vec<bool>,
}

impl ModalityMask {
    pub fn new(present: Vec<bool>) -> Result<Self> {
        if !present.iter().any(|&p| p) {
            return Err(Error::Contract("modality mask must keep at least one channel".into()));
        }
        Ok(ModalityMask { present })
    }

    pub fn all(channels: usize) -> Self {
        ModalityMask {
            present: vec![true; channels],
        }
    }

    /// Combination index 1–7 in table column order:
    /// 1 F, 2 T1, 3 T2, 4 F+T1, 5 F+T2, 6 T1+T2, 7 all.
    pub fn from_combo(combo: u8) -> Result<Self> {
        let present = match combo {
            1 => [true, false, false],
            2 => [false, true, false],
            3 => [false, false, true],
            4 => [true, true, false],
            5 => [true, false, true],
            6 => [false, true, true],
            7 => [true, true, true],
            _ => return Err(Error::Usage(format!("combination index {combo} outside 1..=7"))),
        };
        Ok(ModalityMask {
            present: present.to_vec(),
        })
    }

    pub fn combo(&self) -> Option<u8> {
        (1..=7).find(|&c| Self::from_combo(c).map(|m| m == *self).unwrap_or(false))
    }

    pub fn present(&self) -> &[bool] {
        &self.present
    }

    pub fn len(&self) -> usize {
        self.present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }

    pub fn label(&self) -> String {
        MODALITIES
            .iter()
            .zip(&self.present)
            .filter(|(_, &p)| p)
            .map(|(n, _)| *n)
            .collect::<Vec<_>>()
            .join("+")
    }
}

/// Zero-fills absent channels of `x: [B, C, H, W]`; present channels are
/// copied bit for bit.
pub fn apply_modality_mask<T: Scalar>(x: &Tensor<T>, mask: &ModalityMask) -> Result<Tensor<T>> {
    if x.rank() != 4 || x.dims()[1] != mask.len() {
        return Err(Error::Contract(format!(
            "mask of length {} does not fit input {:?}",
            mask.len(),
            x.dims()
        )));
    }
    let (c, hw) = (x.dims()[1], x.dims()[2] * x.dims()[3]);
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(hw).enumerate() {
        if !mask.present[i % c] {
            chunk.iter_mut().for_each(|v| *v = T::zero());
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    /// 1-based block indices fused into En0.
    pub shallow_layers: Vec<usize>,
    /// 1-based block indices fused into En1.
    pub deep_layers: Vec<usize>,
    /// Teacher initialisation seed; falls back to the run seed.
    pub seed: Option<u64>,
    /// Masked-patch pretraining steps before freezing (0 keeps the random teacher).
    pub pretrain_steps: usize,
    pub pos_std: f64,
    /// Subtracted from every pixel (masked ones included) before patch embedding.
    pub input_shift: f64,
    /// Init scale of the attention and MLP output projections.
    pub branch_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            image_size: 64,
            patch_size: 8,
            in_channels: 3,
            embed_dim: 64,
            depth: 8,
            heads: 4,
            shallow_layers: vec![1, 2, 3, 4],
            deep_layers: vec![5, 6, 7, 8],
            seed: None,
            pretrain_steps: 0,
            pos_std: 0.0,
            input_shift: 0.5,
            branch_scale: 0.5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.heads == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        for set in [&self.shallow_layers, &self.deep_layers] {
            if set.is_empty() || set.iter().any(|&i| i == 0 || i > self.depth) {
                return bad(format!("layer set {set:?} must be non-empty within 1..={}", self.depth));
            }
        }
        if !(self.branch_scale > 0.0 && self.branch_scale.is_finite() && self.input_shift.is_finite()) {
            return bad("encoder.branch_scale must be positive and input_shift finite".into());
        }
        if self.shallow_layers.iter().any(|i| self.deep_layers.contains(i)) {
            return bad("shallow and deep layer sets overlap".into());
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.in_channels * self.patch_size * self.patch_size
    }
}

/// Fused encoder features for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle<T> {
    pub en0: Tensor<T>,
    pub en1: Tensor<T>,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl<T: Scalar> FeatureBundle<T> {
    pub fn batch(&self) -> usize {
        self.en0.dims()[0]
    }

    /// Rows `start..end` of the batch.
    pub fn slice(&self, start: usize, end: usize) -> FeatureBundle<T> {
        let (t, d) = (self.en0.dims()[1], self.en0.dims()[2]);
        let take = |x: &Tensor<T>| {
            Tensor::new(vec![end - start, t, d], x.data()[start * t * d..end * t * d].to_vec()).expect("slice")
        };
        FeatureBundle {
            en0: take(&self.en0),
            en1: take(&self.en1),
            grid_h: self.grid_h,
            grid_w: self.grid_w,
        }
    }

    /// Concatenates bundles along the batch axis.
    pub fn concat(parts: &[&FeatureBundle<T>]) -> Result<FeatureBundle<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("cannot concatenate zero bundles".into()))?;
        let (t, d) = (first.en0.dims()[1], first.en0.dims()[2]);
        let b: usize = parts.iter().map(|p| p.batch()).sum();
        let mut en0 = Vec::with_capacity(b * t * d);
        let mut en1 = Vec::with_capacity(b * t * d);
        for p in parts {
            if p.en0.dims()[1..] != [t, d] {
                return Err(Error::shape("concat", first.en0.dims(), p.en0.dims()));
            }
            en0.extend_from_slice(p.en0.data());
            en1.extend_from_slice(p.en1.data());
        }
        Ok(FeatureBundle {
            en0: Tensor::new(vec![b, t, d], en0)?,
            en1: Tensor::new(vec![b, t, d], en1)?,
            grid_h: first.grid_h,
            grid_w: first.grid_w,
        })
    }
}

#[derive(Clone, Debug)]
struct Head {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    heads: Vec<Head>,
    proj_b: ParamId,
    mlp: FeedForward,
}

/// Pre-norm ViT whose parameters never receive gradient during training.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    patch: Linear,
    pos: ParamId,
    blocks: Vec<Block>,
    param_range: (usize, usize),
}

/// Splits `[B, C, H, W]` into `[B, T, C·p·p]` patches in raster order.
pub fn patchify<T: Scalar>(x: &Tensor<T>, patch: usize) -> Result<Tensor<T>> {
    let d = x.dims();
    if d.len() != 4 || !d[2].is_multiple_of(patch) || !d[3].is_multiple_of(patch) {
        return Err(Error::shape("patchify", d, &[patch]));
    }
    let (b, c, h, w) = (d[0], d[1], d[2], d[3]);
    let (gh, gw) = (h / patch, w / patch);
    let pd = c * patch * patch;
    let src = x.data();
    let mut out = vec![T::zero(); b * gh * gw * pd];
    for bi in 0..b {
        for ty in 0..gh {
            for tx in 0..gw {
                let tok = (bi * gh + ty) * gw + tx;
                let dst = &mut out[tok * pd..(tok + 1) * pd];
                for ci in 0..c {
                    for py in 0..patch {
                        let row = ((bi * c + ci) * h + ty * patch + py) * w + tx * patch;
                        let o = (ci * patch + py) * patch;
                        dst[o..o + patch].copy_from_slice(&src[row..row + patch]);
                    }
                }
            }
        }
    }
    Tensor::new(vec![b, gh * gw, pd], out)
}

impl Encoder {
    /// Registers teacher parameters (frozen) in `store`.
    pub fn new<T: Scalar, R: Rng>(cfg: EncoderConfig, store: &mut ParamStore<T>, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let start = store.len();
        let d = cfg.embed_dim;
        let dh = d / cfg.heads;
        let inv = |n: usize| (1.0 / n as f64).sqrt();
        let patch = Linear::new(
            store,
            "teacher.patch",
            cfg.patch_dim(),
            d,
            true,
            inv(cfg.patch_dim()),
            false,
            rng,
        );
        let pos = store.add("teacher.pos", gaussian(rng, &[cfg.tokens(), d], cfg.pos_std), false);
        let mut blocks = Vec::with_capacity(cfg.depth);
        for l in 0..cfg.depth {
            let name = format!("teacher.block{l}");
            let ln1 = LayerNorm::new(store, &format!("{name}.ln1"), d, false);
            let heads = (0..cfg.heads)
                .map(|h| {
                    let hn = format!("{name}.head{h}");
                    Head {
                        q: Linear::new(store, &format!("{hn}.q"), d, dh, true, inv(d), false, rng),
                        k: Linear::new(store, &format!("{hn}.k"), d, dh, true, inv(d), false, rng),
                        v: Linear::new(store, &format!("{hn}.v"), d, dh, true, inv(d), false, rng),
                        o: Linear::new(
                            store,
                            &format!("{hn}.o"),
                            dh,
                            d,
                            false,
                            cfg.branch_scale * inv(d),
                            false,
                            rng,
                        ),
                    }
                })
                .collect();
            let proj_b = store.add(format!("{name}.proj.b"), Tensor::zeros(&[d]), false);
            let mlp = FeedForward::new(store, &format!("{name}.mlp"), d, true, false, rng);
            let fc2 = store.get_mut(mlp.fc2.w);
            fc2.value = fc2.value.scale(T::c(cfg.branch_scale));
            blocks.push(Block {
                ln1,
                heads,
                proj_b,
                mlp,
            });
        }
        Ok(Encoder {
            cfg,
            patch,
            pos,
            blocks,
            param_range: (start, store.len()),
        })
    }

    /// Store indices owned by the teacher.
    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> {
        (self.param_range.0..self.param_range.1).map(ParamId)
    }

    /// Per-block token grids `[B, T, D]` for an already-masked `x: [B, C, H, W]`.
    pub fn encode<T: Scalar>(&self, s: &Session<'_, T>, x: &Tensor<T>) -> Result<Vec<Var>> {
        let c = &self.cfg;
        let want = [c.in_channels, c.image_size, c.image_size];
        if x.rank() != 4 || x.dims()[1..] != want {
            return Err(Error::shape("encode", x.dims(), &want));
        }
        let b = x.dims()[0];
        let (t, d) = (c.tokens(), c.embed_dim);
        let shift = T::c(c.input_shift);
        let patches = s.constant(patchify(x, c.patch_size)?.map(|v| v - shift));
        let tok = self.patch.forward(s, patches)?;
        let flat = s.reshape(tok, &[b, t * d])?;
        let pos = s.reshape(s.p(self.pos), &[t * d])?;
        let mut h = s.reshape(s.add_row(flat, pos)?, &[b, t, d])?;
        let scale = T::c(1.0 / ((d / c.heads) as f64).sqrt());
        let mut layers = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            let n = blk.ln1.forward(s, h)?;
            let mut attn: Option<Var> = None;
            for head in &blk.heads {
                let q = head.q.forward(s, n)?;
                let k = head.k.forward(s, n)?;
                let v = head.v.forward(s, n)?;
                let logits = s.scale(s.matmul(q, s.transpose_last(k)?)?, scale);
                let o = s.matmul(s.softmax_lastdim(logits), v)?;
                let o = head.o.forward(s, o)?;
                attn = Some(match attn {
                    Some(a) => s.add(a, o)?,
                    None => o,
                });
            }
            let attn = s.add_row(attn.expect("heads >= 1"), s.p(blk.proj_b))?;
            h = s.add(h, attn)?;
            let m = blk.mlp.forward(s, h)?;
            h = s.add(h, m)?;
            layers.push(h);
        }
        Ok(layers)
    }

    /// Encodes and fuses into (En0, En1) as plain tensors.
    pub fn features<T: Scalar>(&self, store: &ParamStore<T>, x: &Tensor<T>) -> Result<FeatureBundle<T>> {
        let s = Session::new(store);
        let layers = self.encode(&s, x)?;
        let en0 = fuse_layers(&s, &layers, &self.cfg.shallow_layers)?;
        let en1 = fuse_layers(&s, &layers, &self.cfg.deep_layers)?;
        Ok(FeatureBundle {
            en0: (*s.value(en0)).clone(),
            en1: (*s.value(en1)).clone(),
            grid_h: self.cfg.grid(),
            grid_w: self.cfg.grid(),
        })
    }

    /// Pretrains the teacher as a masked-patch pixel reconstructor on
    /// `images` (`[N, C, H, W]`), then leaves it frozen again.
    pub fn pretrain<T: Scalar, R: Rng>(
        &self,
        store: &mut ParamStore<T>,
        images: &Tensor<T>,
        steps: usize,
        batch: usize,
        rng: &mut R,
    ) -> Result<()> {
        use crate::tensorgrad::{adam_step, AdamConfig, AdamState};
        if steps == 0 {
            return Ok(());
        }
        let c = &self.cfg;
        let n = images.dims()[0];
        let per = images.len() / n.max(1);
        let mut local = ParamStore::<T>::new();
        for id in self.param_ids() {
            let p = store.get(id);
            local.add(p.name.clone(), p.value.clone(), true);
        }
        let offset = self.param_range.0;
        let shifted = self.shifted(offset);
        let head = Linear::new(
            &mut local,
            "mim.head",
            c.embed_dim,
            c.patch_dim(),
            true,
            0.02,
            true,
            rng,
        );
        let mut opt = AdamState::new(&local, AdamConfig::default());
        let lr = 1e-3;
        for _ in 0..steps {
            let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
            let mut data = Vec::with_capacity(batch * per);
            for &i in &idx {
                data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
            }
            let x = Tensor::new(vec![batch, c.in_channels, c.image_size, c.image_size], data)?;
            let target = patchify(&x, c.patch_size)?;
            let hidden: Vec<bool> = (0..batch * c.tokens()).map(|_| rng.random_bool(0.5)).collect();
            let mut masked = x.clone();
            zero_patches(&mut masked, &hidden, c.patch_size);
            let grads = {
                let s = Session::new(&local);
                let layers = shifted.encode(&s, &masked)?;
                let pred = head.forward(&s, *layers.last().expect("depth >= 1"))?;
                let diff = s.sub(pred, s.constant(target))?;
                let sel = Tensor::from_fn(&[batch, c.tokens(), c.patch_dim()], |i| {
                    if hidden[i / c.patch_dim()] {
                        T::one()
                    } else {
                        T::zero()
                    }
                });
                let sq = s.mul(s.square(diff), s.constant(sel))?;
                let loss = s.mean_all(sq);
                s.backward(loss)?
            };
            local.zero_grad();
            local.accumulate(grads)?;
            adam_step(&mut local, &mut opt, lr)?;
        }
        for (k, id) in self.param_ids().enumerate() {
            store.get_mut(id).value = local.get(ParamId(k)).value.clone();
        }
        Ok(())
    }

    fn shifted(&self, offset: usize) -> Encoder {
        let sh = |id: ParamId| ParamId(id.0 - offset);
        let lin = |l: &Linear| Linear {
            w: sh(l.w),
            b: l.b.map(sh),
        };
        let ln = |l: &LayerNorm| LayerNorm {
            gamma: sh(l.gamma),
            beta: sh(l.beta),
        };
        Encoder {
            cfg: self.cfg.clone(),
            patch: lin(&self.patch),
            pos: sh(self.pos),
            blocks: self
                .blocks
                .iter()
                .map(|b| Block {
                    ln1: ln(&b.ln1),
                    heads: b
                        .heads
                        .iter()
                        .map(|h| Head {
                            q: lin(&h.q),
                            k: lin(&h.k),
                            v: lin(&h.v),
                            o: lin(&h.o),
                        })
                        .collect(),
                    proj_b: sh(b.proj_b),
                    mlp: FeedForward {
                        norm: b.mlp.norm.as_ref().map(ln),
                        fc1: lin(&b.mlp.fc1),
                        fc2: lin(&b.mlp.fc2),
                    },
                })
                .collect(),
            param_range: (0, self.param_range.1 - offset),
        }
    }
}

fn zero_patches<T: Scalar>(x: &mut Tensor<T>, hidden: &[bool], patch: usize) {
    let d = x.dims().to_vec();
    let (b, c, h, w) = (d[0], d[1], d[2], d[3]);
    let gw = w / patch;
    let gh = h / patch;
    let data = x.data_mut();
    for bi in 0..b {
        for ci in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    if hidden[(bi * gh + y / patch) * gw + xx / patch] {
                        data[((bi * c + ci) * h + y) * w + xx] = T::zero();
                    }
                }
            }
        }
    }
}

/// Trainable `Linear_{D→4D}(en0 + en1)` → GELU → `Linear_{4D→D}`.
#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub expand: Linear,
    pub compress: Linear,
}

impl Bottleneck {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, d: usize, rng: &mut R) -> Self {
        Bottleneck {
            expand: Linear::new(
                store,
                "bottleneck.expand",
                d,
                4 * d,
                true,
                (1.0 / d as f64).sqrt(),
                true,
                rng,
            ),
            compress: Linear::new(
                store,
                "bottleneck.compress",
                4 * d,
                d,
                true,
                (1.0 / (4 * d) as f64).sqrt(),
                true,
                rng,
            ),
        }
    }

    /// `activate = false` bypasses the GELU (wiring checks only).
    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, en0: Var, en1: Var, activate: bool) -> Result<Var> {
        let sum = s.add(en0, en1)?;
        let h = self.expand.forward(s, sum)?;
        let h = if activate { s.gelu(h) } else { h };
        self.compress.forward(s, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            depth: 2,
            heads: 2,
            shallow_layers: vec![1],
            deep_layers: vec![2],
            ..Default::default()
        }
    }

    fn rand_img(rng: &mut ChaCha8Rng, b: usize, size: usize) -> Tensor<f64> {
        Tensor::from_fn(&[b, 3, size, size], |_| rng.random_range(0.0..1.0))
    }

    #[test]
    fn combo_mapping_is_a_bijection() {
        let mut seen = std::collections::HashSet::new();
        for c in 1..=7u8 {
            let m = ModalityMask::from_combo(c).unwrap();
            assert_eq!(m.combo(), Some(c));
            assert!(seen.insert(m.present().to_vec()));
        }
        assert_eq!(ModalityMask::from_combo(7).unwrap(), ModalityMask::all(3));
        assert_eq!(ModalityMask::from_combo(1).unwrap().label(), "FLAIR");
        assert!(ModalityMask::from_combo(0).is_err());
        assert!(ModalityMask::new(vec![false; 3]).is_err());
    }

    #[test]
    fn masking_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_img(&mut rng, 2, 4);
        assert_eq!(apply_modality_mask(&x, &ModalityMask::all(3)).unwrap(), x);
        let only_f = ModalityMask::from_combo(1).unwrap();
        let m = apply_modality_mask(&x, &only_f).unwrap();
        for b in 0..2 {
            for c in 0..3 {
                let ch = &m.data()[(b * 3 + c) * 16..(b * 3 + c + 1) * 16];
                if c == 0 {
                    assert_eq!(ch, &x.data()[(b * 3) * 16..(b * 3 + 1) * 16]);
                } else {
                    assert!(ch.iter().all(|&v| v == 0.0));
                }
            }
        }
        let mut y = x.clone();
        y.data_mut()[20] += 5.0; // channel 1 of sample 0
        assert_eq!(apply_modality_mask(&y, &only_f).unwrap(), m);
        assert!(apply_modality_mask(&x, &ModalityMask::all(2)).is_err());
    }

    #[test]
    fn encode_shapes_and_batch_independence() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::new(EncoderConfig::default(), &mut store, &mut rng).unwrap();
        let one = rand_img(&mut rng, 1, 64).cast::<f32>();
        let mut two = one.data().to_vec();
        two.extend_from_slice(one.data());
        let two = Tensor::new(vec![2, 3, 64, 64], two).unwrap();
        let s = Session::new(&store);
        let layers = enc.encode(&s, &two).unwrap();
        assert_eq!(layers.len(), 8);
        for l in &layers {
            let v = s.value(*l);
            assert_eq!(v.dims(), &[2, 64, 64]);
            let half = v.len() / 2;
            assert_eq!(&v.data()[..half], &v.data()[half..]);
        }
        let single = enc.features(&store, &one).unwrap();
        let double = enc.features(&store, &two).unwrap();
        assert_eq!(double.slice(0, 1), single);
        assert!(store.iter().all(|p| !p.requires_grad));
    }

    /// An input equal to the shift embeds to zero patches, so layer 1 equals a
    /// hand-written 64-bit forward of the positional embedding alone.
    #[test]
    fn shift_input_layer_one_matches_reference_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = tiny_cfg();
        let mut store = ParamStore::<f64>::new();
        let enc = Encoder::new(cfg.clone(), &mut store, &mut rng).unwrap();
        let x = Tensor::<f64>::from_fn(&[1, 3, 8, 8], |_| cfg.input_shift);
        let s = Session::new(&store);
        let layers = enc.encode(&s, &x).unwrap();
        let got = s.value(layers[0]);

        let val = |name: &str| store.value(store.id(name).unwrap()).clone();
        let (t, d, dh) = (4usize, 8usize, 4usize);
        let pos = val("teacher.pos");
        let pb = val("teacher.patch.b");
        let h0: Vec<f64> = (0..t * d).map(|i| pos.data()[i] + pb.data()[i % d]).collect();
        let ln = |x: &[f64], g: &Tensor<f64>, b: &Tensor<f64>| -> Vec<f64> {
            let mut out = vec![0.0; x.len()];
            for r in 0..x.len() / d {
                let row = &x[r * d..(r + 1) * d];
                let m = row.iter().sum::<f64>() / d as f64;
                let v = row.iter().map(|a| (a - m).powi(2)).sum::<f64>() / d as f64;
                for j in 0..d {
                    out[r * d + j] = (row[j] - m) / (v + 1e-5).sqrt() * g.data()[j] + b.data()[j];
                }
            }
            out
        };
        let lin = |x: &[f64], w: &Tensor<f64>, b: Option<&Tensor<f64>>| -> Vec<f64> {
            let (i_n, o_n) = (w.dims()[0], w.dims()[1]);
            let rows = x.len() / i_n;
            let mut out = vec![0.0; rows * o_n];
            for r in 0..rows {
                for o in 0..o_n {
                    let mut acc = b.map(|b| b.data()[o]).unwrap_or(0.0);
                    for i in 0..i_n {
                        acc += x[r * i_n + i] * w.data()[i * o_n + o];
                    }
                    out[r * o_n + o] = acc;
                }
            }
            out
        };
        let n1 = ln(&h0, &val("teacher.block0.ln1.gamma"), &val("teacher.block0.ln1.beta"));
        let mut h1 = h0.clone();
        for hd in 0..2 {
            let p = |s: &str| format!("teacher.block0.head{hd}.{s}");
            let q = lin(&n1, &val(&p("q.w")), Some(&val(&p("q.b"))));
            let k = lin(&n1, &val(&p("k.w")), Some(&val(&p("k.b"))));
            let v = lin(&n1, &val(&p("v.w")), Some(&val(&p("v.b"))));
            let mut o = vec![0.0; t * dh];
            for i in 0..t {
                let logits: Vec<f64> = (0..t)
                    .map(|j| (0..dh).map(|c| q[i * dh + c] * k[j * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
                for j in 0..t {
                    let a = (logits[j] - mx).exp() / z;
                    for c in 0..dh {
                        o[i * dh + c] += a * v[j * dh + c];
                    }
                }
            }
            let proj = lin(&o, &val(&p("o.w")), None);
            h1.iter_mut().zip(&proj).for_each(|(a, b)| *a += b);
        }
        let pbias = val("teacher.block0.proj.b");
        for (i, v) in h1.iter_mut().enumerate() {
            *v += pbias.data()[i % d];
        }
        let n2 = ln(
            &h1,
            &val("teacher.block0.mlp.norm.gamma"),
            &val("teacher.block0.mlp.norm.beta"),
        );
        let f1 = lin(
            &n2,
            &val("teacher.block0.mlp.fc1.w"),
            Some(&val("teacher.block0.mlp.fc1.b")),
        );
        let f1: Vec<f64> = f1.iter().map(|&x| crate::tensorgrad::gelu(x)).collect();
        let f2 = lin(
            &f1,
            &val("teacher.block0.mlp.fc2.w"),
            Some(&val("teacher.block0.mlp.fc2.b")),
        );
        for i in 0..t * d {
            assert!((got.data()[i] - (h1[i] + f2[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn fuse_examples() {
        let store = ParamStore::<f64>::new();
        let s = Session::new(&store);
        let a = s.constant(Tensor::ones(&[1, 2, 2]));
        let b = s.constant(Tensor::full(&[1, 2, 2], 3.0));
        let layers = [a, b, a];
        assert_eq!(fuse_layers(&s, &layers, &[2]).unwrap(), b);
        let m = s.value(fuse_layers(&s, &layers, &[1, 2]).unwrap());
        assert!(m.data().iter().all(|&v| v == 2.0));
        let m = s.value(fuse_layers(&s, &layers, &[1, 3]).unwrap());
        assert!(m.data().iter().all(|&v| v == 1.0));
        assert!(fuse_layers(&s, &layers, &[]).is_err());
        assert!(fuse_layers(&s, &layers, &[4]).is_err());
    }

    #[test]
    fn bottleneck_wiring_and_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 4;
        let mut store = ParamStore::<f64>::new();
        let bn = Bottleneck::new(&mut store, d, &mut rng);
        let en0 = Tensor::from_fn(&[1, 3, d], |_| rng.random_range(-1.0..1.0));
        let en1 = Tensor::from_fn(&[1, 3, d], |_| rng.random_range(-1.0..1.0));
        // expansion [I;0;0;0]ᵀ, compression its transpose
        let expand = Tensor::from_fn(&[d, 4 * d], |i| if i / (4 * d) == i % (4 * d) { 1.0 } else { 0.0 });
        let compress = expand.transpose_last().unwrap();
        store.set("bottleneck.expand.w", expand).unwrap();
        store.set("bottleneck.compress.w", compress).unwrap();
        let s = Session::new(&store);
        let out = bn
            .forward(&s, s.constant(en0.clone()), s.constant(en1.clone()), false)
            .unwrap();
        assert!(s.value(out).max_abs_diff(&en0.add(&en1).unwrap()) < 1e-15);

        let z = s.constant(Tensor::zeros(&[1, 3, d]));
        let out = bn.forward(&s, z, z, true).unwrap();
        assert!(s.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bottleneck_matches_reference_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 8;
        let mut store = ParamStore::<f64>::new();
        let bn = Bottleneck::new(&mut store, d, &mut rng);
        for p in store.iter_mut() {
            let dims = p.value.dims().to_vec();
            p.value = Tensor::from_fn(&dims, |_| rng.random_range(-0.5..0.5));
        }
        let en0 = Tensor::from_fn(&[2, 3, d], |_| rng.random_range(-1.0..1.0));
        let en1 = Tensor::from_fn(&[2, 3, d], |_| rng.random_range(-1.0..1.0));
        let store32 = store.cast::<f32>();
        let s = Session::new(&store32);
        let out = bn
            .forward(&s, s.constant(en0.cast()), s.constant(en1.cast()), true)
            .unwrap();
        let out = s.value(out);
        let val = |n: &str| store.value(store.id(n).unwrap()).data().to_vec();
        let (w1, b1, w2, b2) = (
            val("bottleneck.expand.w"),
            val("bottleneck.expand.b"),
            val("bottleneck.compress.w"),
            val("bottleneck.compress.b"),
        );
        for r in 0..6 {
            let x: Vec<f64> = (0..d).map(|j| en0.data()[r * d + j] + en1.data()[r * d + j]).collect();
            let h: Vec<f64> = (0..4 * d)
                .map(|o| {
                    let z = b1[o] + (0..d).map(|i| x[i] * w1[i * 4 * d + o]).sum::<f64>();
                    crate::tensorgrad::gelu(z)
                })
                .collect();
            for o in 0..d {
                let want = b2[o] + (0..4 * d).map(|i| h[i] * w2[i * d + o]).sum::<f64>();
                assert!((out.data()[r * d + o] as f64 - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn pretraining_changes_teacher_but_leaves_it_frozen() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::<f32>::new();
        let enc = Encoder::new(tiny_cfg(), &mut store, &mut rng).unwrap();
        let before: Vec<_> = store.iter().map(|p| p.value.clone()).collect();
        let imgs = rand_img(&mut rng, 4, 8).cast::<f32>();
        enc.pretrain(&mut store, &imgs, 3, 2, &mut rng).unwrap();
        assert_eq!(store.len(), before.len());
        assert!(store.iter().zip(&before).any(|(p, b)| p.value != *b));
        assert!(store.iter().all(|p| !p.requires_grad));
    }
}
