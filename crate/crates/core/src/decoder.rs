//! Prototype-guided reconstruction decoder.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{fuse_layers, gaussian, FeedForward, Linear};
use crate::scalar::Scalar;
use crate::tensorgrad::{ParamStore, Session, Var};

/// Added to each attention row sum before normalising.
pub const ROW_EPS: f64 = 1e-6;

/// Init scale of each block's FFN output bias.
pub const OUT_BIAS_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderConfig {
    pub depth: usize,
    pub group0_layers: Vec<usize>,
    pub group1_layers: Vec<usize>,
    pub normalize_attention: bool,
    pub attn_residual: bool,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            depth: 4,
            group0_layers: vec![1, 2],
            group1_layers: vec![3, 4],
            normalize_attention: true,
            attn_residual: false,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        for g in [&self.group0_layers, &self.group1_layers] {
            if g.is_empty() || g.iter().any(|&i| i == 0 || i > self.depth) {
                return Err(Error::Config(format!(
                    "decoder group {g:?} must be non-empty within 1..={}",
                    self.depth
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DecoderBlock {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub ffn: FeedForward,
}

impl DecoderBlock {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, name: &str, d: usize, rng: &mut R) -> Self {
        let std = (1.0 / d as f64).sqrt();
        let blk = DecoderBlock {
            wq: Linear::new(store, &format!("{name}.q"), d, d, false, std, true, rng),
            wk: Linear::new(store, &format!("{name}.k"), d, d, false, std, true, rng),
            wv: Linear::new(store, &format!("{name}.v"), d, d, false, std, true, rng),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, true, true, rng),
        };
        // a row whose logits are all negative yields FFN(0); keep that off the origin
        let b = blk.ffn.fc2.b.expect("fc2 has a bias");
        store.get_mut(b).value = gaussian(rng, &[d], OUT_BIAS_STD);
        blk
    }

    /// ReLU attention weights `[B, T, N]`, row-normalised when asked.
    pub fn attention<T: Scalar>(&self, s: &Session<'_, T>, f_in: Var, p: Var, normalize: bool) -> Result<Var> {
        let (fd, pd) = (s.dims(f_in), s.dims(p));
        if fd.len() != 3 || pd.len() != 3 || fd[0] != pd[0] || fd[2] != pd[2] {
            return Err(Error::shape("decoder.block", &fd, &pd));
        }
        let q = self.wq.forward(s, f_in)?;
        let k = self.wk.forward(s, p)?;
        let a = s.relu(s.matmul(q, s.transpose_last(k)?)?);
        if !normalize {
            return Ok(a);
        }
        let rs = s.affine(s.sum_lastdim(a), T::one(), T::c(ROW_EPS));
        s.div_lastdim(a, rs)
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, f_in: Var, p: Var, cfg: &DecoderConfig) -> Result<Var> {
        let a = self.attention(s, f_in, p, cfg.normalize_attention)?;
        let v = self.wv.forward(s, p)?;
        let mut f = s.matmul(a, v)?;
        if cfg.attn_residual {
            f = s.add(f, f_in)?;
        }
        let h = self.ffn.forward(s, f)?;
        s.add(h, f)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub cfg: DecoderConfig,
    pub blocks: Vec<DecoderBlock>,
}

impl Decoder {
    pub fn new<T: Scalar, R: Rng>(
        cfg: DecoderConfig,
        store: &mut ParamStore<T>,
        d: usize,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.depth)
            .map(|l| DecoderBlock::new(store, &format!("decoder.block{l}"), d, rng))
            .collect();
        Ok(Decoder { cfg, blocks })
    }

    /// Returns `(De0, De1)`.
    pub fn decode<T: Scalar>(&self, s: &Session<'_, T>, f_bottleneck: Var, p: Var) -> Result<(Var, Var)> {
        let mut h = f_bottleneck;
        let mut layers = Vec::with_capacity(self.blocks.len());
        for blk in &self.blocks {
            h = blk.forward(s, h, p, &self.cfg)?;
            layers.push(h);
        }
        let de0 = fuse_layers(s, &layers, &self.cfg.group0_layers)?;
        let de1 = fuse_layers(s, &layers, &self.cfg.group1_layers)?;
        Ok((de0, de1))
    }
}
