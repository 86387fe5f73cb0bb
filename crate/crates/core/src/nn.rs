//! Parameterised building blocks shared by the teacher and the student.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::scalar::Scalar;
use crate::tensorgrad::{linear, ParamId, ParamStore, Session, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;

pub(crate) fn gaussian<T: Scalar, R: Rng>(rng: &mut R, dims: &[usize], std: f64) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("valid std");
    Tensor::from_fn(dims, |_| T::c(normal.sample(rng)))
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// Weight `[fan_in, fan_out]` drawn from N(0, std²), zero bias.
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        std: f64,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let w = store.add(format!("{name}.w"), gaussian(rng, &[fan_in, fan_out], std), trainable);
        let b = bias.then(|| store.add(format!("{name}.b"), Tensor::zeros(&[fan_out]), trainable));
        Linear { w, b }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: Var) -> Result<Var> {
        linear(s, x, s.p(self.w), self.b.map(|b| s.p(b)))
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, d: usize, trainable: bool) -> Self {
        LayerNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[d]), trainable),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[d]), trainable),
        }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: Var) -> Result<Var> {
        s.layer_norm(x, s.p(self.gamma), s.p(self.beta), T::c(LN_EPS))
    }
}

/// `D → 4D → D` with GELU, optionally pre-normalised.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub norm: Option<LayerNorm>,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl FeedForward {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        name: &str,
        d: usize,
        prenorm: bool,
        trainable: bool,
        rng: &mut R,
    ) -> Self {
        let norm = prenorm.then(|| LayerNorm::new(store, &format!("{name}.norm"), d, trainable));
        let fc1 = Linear::new(
            store,
            &format!("{name}.fc1"),
            d,
            4 * d,
            true,
            (1.0 / d as f64).sqrt(),
            trainable,
            rng,
        );
        let fc2 = Linear::new(
            store,
            &format!("{name}.fc2"),
            4 * d,
            d,
            true,
            (1.0 / (4 * d) as f64).sqrt(),
            trainable,
            rng,
        );
        FeedForward { norm, fc1, fc2 }
    }

    pub fn forward<T: Scalar>(&self, s: &Session<'_, T>, x: Var) -> Result<Var> {
        let h = match &self.norm {
            Some(n) => n.forward(s, x)?,
            None => x,
        };
        let h = s.gelu(self.fc1.forward(s, h)?);
        self.fc2.forward(s, h)
    }
}

/// Elementwise mean of `layers[i - 1]` over the 1-based `indices`.
pub fn fuse_layers<T: Scalar>(s: &Session<'_, T>, layers: &[Var], indices: &[usize]) -> Result<Var> {
    if indices.is_empty() {
        return Err(crate::Error::Contract(
            "fuse_layers needs at least one layer index".into(),
        ));
    }
    for &i in indices {
        if i == 0 || i > layers.len() {
            return Err(crate::Error::Contract(format!(
                "layer index {i} outside 1..={}",
                layers.len()
            )));
        }
    }
    if indices.len() == 1 {
        return Ok(layers[indices[0] - 1]);
    }
    let mut acc = layers[indices[0] - 1];
    for &i in &indices[1..] {
        acc = s.add(acc, layers[i - 1])?;
    }
    Ok(s.scale(acc, T::c(1.0 / indices.len() as f64)))
}
