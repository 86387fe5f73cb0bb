//! Intrinsic normal prototypes: extraction from encoder tokens, nearest
//! prototype distances and the consistency loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{gaussian, FeedForward, LayerNorm, Linear};
use crate::scalar::Scalar;
use crate::tensorgrad::{ParamId, ParamStore, Session, Var, COSINE_EPS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InpConfig {
    pub prototypes: usize,
    pub init_std: f64,
    /// Layer-normalise `P₀` before the query projection.
    pub query_norm: bool,
}

impl Default for InpConfig {
    fn default() -> Self {
        InpConfig {
            prototypes: 6,
            init_std: 0.02,
            query_norm: true,
        }
    }
}

/// `P₀` plus the single cross-attention extractor layer.
#[derive(Clone, Debug)]
pub struct Prototypes {
    pub n: usize,
    pub d: usize,
    pub p0: ParamId,
    pub qnorm: Option<LayerNorm>,
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub ffn: FeedForward,
}

/// Per-token nearest prototype distances.
#[derive(Clone, Debug)]
pub struct InpOutput {
    /// `[B, T]`
    pub token_dist: Var,
    /// Row-major `[B, T]` argmin indices.
    pub assign: Vec<usize>,
}

impl Prototypes {
    pub fn new<T: Scalar, R: Rng>(store: &mut ParamStore<T>, cfg: &InpConfig, d: usize, rng: &mut R) -> Result<Self> {
        if cfg.prototypes == 0 {
            return Err(Error::Config("inp.prototypes must be at least 1".into()));
        }
        let std = (1.0 / d as f64).sqrt();
        let p0 = store.add("inp.p0", gaussian(rng, &[cfg.prototypes, d], cfg.init_std), true);
        Ok(Prototypes {
            n: cfg.prototypes,
            d,
            p0,
            qnorm: cfg.query_norm.then(|| LayerNorm::new(store, "inp.qnorm", d, true)),
            wq: Linear::new(store, "inp.q", d, d, true, std, true, rng),
            wk: Linear::new(store, "inp.k", d, d, true, std, true, rng),
            wv: Linear::new(store, "inp.v", d, d, true, std, true, rng),
            ffn: FeedForward::new(store, "inp.ffn", d, true, true, rng),
        })
    }

    /// Softmax attention weights `[B, N, T]` of `P₀` over `fq` tokens.
    pub fn attention<T: Scalar>(&self, s: &Session<'_, T>, fq: Var) -> Result<Var> {
        let dims = s.dims(fq);
        if dims.len() != 3 || dims[2] != self.d {
            return Err(Error::shape("inp.extract", &dims, &[self.n, self.d]));
        }
        let p0 = match &self.qnorm {
            Some(ln) => ln.forward(s, s.p(self.p0))?,
            None => s.p(self.p0),
        };
        let q = self.wq.forward(s, p0)?;
        let k = self.wk.forward(s, fq)?;
        let logits = s.matmul(q, s.transpose_last(k)?)?;
        Ok(s.softmax_lastdim(s.scale(logits, T::c(1.0 / (self.d as f64).sqrt()))))
    }

    /// Refined prototypes `[B, N, D]`.
    pub fn extract<T: Scalar>(&self, s: &Session<'_, T>, fq: Var) -> Result<Var> {
        let b = s.dims(fq)[0];
        let attn = self.attention(s, fq)?;
        let v = self.wv.forward(s, fq)?;
        let mixed = s.matmul(attn, v)?;
        let flat = s.reshape(mixed, &[b, self.n * self.d])?;
        let p0 = s.reshape(s.p(self.p0), &[self.n * self.d])?;
        let p_prime = s.reshape(s.add_row(flat, p0)?, &[b, self.n, self.d])?;
        let f = self.ffn.forward(s, p_prime)?;
        s.add(f, p_prime)
    }
}

/// Cosine distance of every token to its nearest prototype.
pub fn nearest_distances<T: Scalar>(s: &Session<'_, T>, fq: Var, p: Var) -> Result<InpOutput> {
    let (fd, pd) = (s.dims(fq), s.dims(p));
    if fd.len() != 3 || pd.len() != 3 || fd[0] != pd[0] || fd[2] != pd[2] {
        return Err(Error::shape("nearest_distances", &fd, &pd));
    }
    let eps = T::c(COSINE_EPS);
    let fn_ = s.l2_normalize_rows(fq, eps);
    let pn = s.l2_normalize_rows(p, eps);
    let sim = s.matmul(fn_, s.transpose_last(pn)?)?;
    let dist = s.affine(sim, -T::one(), T::one());
    let (token_dist, assign) = s.min_lastdim(dist);
    Ok(InpOutput { token_dist, assign })
}

/// Mean nearest-prototype distance over all tokens.
pub fn consistency_loss<T: Scalar>(s: &Session<'_, T>, token_dist: Var) -> Var {
    s.mean_all(token_dist)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorgrad::{cosine_distance_rows, finite_diff_check, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| rng.random_range(-1.0..1.0))
    }

    fn setup(seed: u64, n: usize, d: usize) -> (ParamStore<f64>, Prototypes, ChaCha8Rng) {
        setup_std(seed, n, d, InpConfig::default().init_std)
    }

    fn setup_std(seed: u64, n: usize, d: usize, init_std: f64) -> (ParamStore<f64>, Prototypes, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = InpConfig {
            prototypes: n,
            init_std,
            ..Default::default()
        };
        let p = Prototypes::new(&mut store, &cfg, d, &mut rng).unwrap();
        (store, p, rng)
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (store, proto, mut rng) = setup(0, 6, 8);
        let s = Session::new(&store);
        let fq = s.constant(rand_t(&mut rng, &[2, 5, 8]));
        let a = s.value(proto.attention(&s, fq).unwrap());
        assert_eq!(a.dims(), &[2, 6, 5]);
        for row in a.data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn residual_only_when_value_and_ffn_zeroed() {
        let (mut store, proto, mut rng) = setup(1, 3, 4);
        store.set("inp.v.w", Tensor::zeros(&[4, 4])).unwrap();
        store.set("inp.v.b", Tensor::zeros(&[4])).unwrap();
        store.set("inp.ffn.fc2.w", Tensor::zeros(&[16, 4])).unwrap();
        let s = Session::new(&store);
        let fq = s.constant(rand_t(&mut rng, &[2, 5, 4]));
        let p = s.value(proto.extract(&s, fq).unwrap());
        let p0 = store.value(proto.p0);
        for b in 0..2 {
            assert_eq!(&p.data()[b * 12..(b + 1) * 12], p0.data());
        }
    }

    #[test]
    fn single_token_attends_fully() {
        let (mut store, proto, mut rng) = setup(2, 3, 4);
        store.set("inp.ffn.fc2.w", Tensor::zeros(&[16, 4])).unwrap();
        let s = Session::new(&store);
        let fqt = rand_t(&mut rng, &[1, 1, 4]);
        let fq = s.constant(fqt.clone());
        let p = s.value(proto.extract(&s, fq).unwrap());
        let v = s.value(proto.wv.forward(&s, fq).unwrap());
        let p0 = store.value(proto.p0);
        for n in 0..3 {
            for j in 0..4 {
                let want = v.data()[j] + p0.data()[n * 4 + j];
                assert!((p.data()[n * 4 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_prototype_gives_pairwise_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let store = ParamStore::<f64>::new();
        let s = Session::new(&store);
        let fqt = rand_t(&mut rng, &[1, 4, 5]);
        let pt = rand_t(&mut rng, &[1, 1, 5]);
        let out = nearest_distances(&s, s.constant(fqt.clone()), s.constant(pt.clone())).unwrap();
        let rep = Tensor::from_fn(&[4, 5], |i| pt.data()[i % 5]);
        let want = cosine_distance_rows(&s, s.constant(fqt.reshape(&[4, 5]).unwrap()), s.constant(rep), 1e-8).unwrap();
        assert!(s.value(out.token_dist).max_abs_diff(&s.value(want)) < 1e-12);
        assert!(out.assign.iter().all(|&a| a == 0));
    }

    #[test]
    fn token_equal_to_prototype() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let store = ParamStore::<f64>::new();
        let s = Session::new(&store);
        let pt = rand_t(&mut rng, &[1, 3, 6]);
        let fqt = Tensor::new(vec![1, 1, 6], pt.data()[12..18].to_vec()).unwrap();
        let out = nearest_distances(&s, s.constant(fqt), s.constant(pt)).unwrap();
        assert!(s.value(out.token_dist).item().abs() < 1e-12);
        assert_eq!(out.assign, vec![2]);
    }

    fn brute(fq: &Tensor<f64>, p: &Tensor<f64>) -> (Vec<f64>, Vec<usize>) {
        let (b, t, d) = (fq.dims()[0], fq.dims()[1], fq.dims()[2]);
        let n = p.dims()[1];
        let (mut dist, mut arg) = (Vec::new(), Vec::new());
        for bi in 0..b {
            for ti in 0..t {
                let x = &fq.data()[(bi * t + ti) * d..(bi * t + ti + 1) * d];
                let mut best = (f64::INFINITY, 0);
                for ni in 0..n {
                    let y = &p.data()[(bi * n + ni) * d..(bi * n + ni + 1) * d];
                    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
                    let nx = x.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
                    let ny = y.iter().map(|a| a * a).sum::<f64>().sqrt().max(1e-8);
                    let c = 1.0 - dot / (nx * ny);
                    if c < best.0 {
                        best = (c, ni);
                    }
                }
                dist.push(best.0);
                arg.push(best.1);
            }
        }
        (dist, arg)
    }

    #[test]
    fn nearest_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..30 {
            let b = rng.random_range(1..=4);
            let t = rng.random_range(1..=16);
            let n = rng.random_range(1..=8);
            let d = rng.random_range(1..=8);
            let fq = rand_t(&mut rng, &[b, t, d]);
            let p = rand_t(&mut rng, &[b, n, d]);
            let store = ParamStore::<f64>::new();
            let s = Session::new(&store);
            let out = nearest_distances(&s, s.constant(fq.clone()), s.constant(p.clone())).unwrap();
            let (dist, arg) = brute(&fq, &p);
            assert_eq!(out.assign, arg);
            for (a, b) in s.value(out.token_dist).data().iter().zip(&dist) {
                assert!((a - b).abs() < 1e-12);
                assert!((-1e-12..=2.0 + 1e-12).contains(a));
            }
        }
    }

    #[test]
    fn permuting_prototypes_permutes_assign() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fq = rand_t(&mut rng, &[1, 10, 4]);
        let p = rand_t(&mut rng, &[1, 3, 4]);
        let perm = [2usize, 0, 1];
        let pp = Tensor::from_fn(&[1, 3, 4], |i| p.data()[perm[i / 4] * 4 + i % 4]);
        let store = ParamStore::<f64>::new();
        let s = Session::new(&store);
        let a = nearest_distances(&s, s.constant(fq.clone()), s.constant(p)).unwrap();
        let b = nearest_distances(&s, s.constant(fq), s.constant(pp)).unwrap();
        assert_eq!(s.value(a.token_dist).data(), s.value(b.token_dist).data());
        for (x, y) in a.assign.iter().zip(&b.assign) {
            assert_eq!(perm[*y], *x);
        }
    }

    #[test]
    fn consistency_examples() {
        let store = ParamStore::<f64>::new();
        let s = Session::new(&store);
        let c = s.constant(Tensor::full(&[2, 8], 0.5));
        assert_eq!(s.value(consistency_loss(&s, c)).item(), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = Tensor::from_fn(&[2, 8], |_| rng.random_range(0.0..2.0));
        let want = t.data().iter().sum::<f64>() / 16.0;
        let got = s.value(consistency_loss(&s, s.constant(t))).item();
        assert!((got - want).abs() < 1e-9);

        let p = rand_t(&mut rng, &[1, 2, 3]);
        let fq = Tensor::new(vec![1, 2, 3], p.data().iter().map(|v| v * 2.0).collect()).unwrap();
        let out = nearest_distances(&s, s.constant(fq), s.constant(p)).unwrap();
        assert!(s.value(consistency_loss(&s, out.token_dist)).item().abs() < 1e-12);
    }

    #[test]
    fn consistency_gradient_through_extract() {
        // Normalising a 4-wide row of std 0.02 is too sharp for finite differences.
        for seed in 0..4 {
            let (mut store, proto, mut rng) = setup_std(10 + seed, 3, 4, 0.3);
            let fq = rand_t(&mut rng, &[2, 4, 4]);
            let report = finite_diff_check(
                &mut store,
                |s| {
                    let f = s.constant(fq.clone());
                    let p = proto.extract(s, f)?;
                    let out = nearest_distances(s, f, p)?;
                    Ok(consistency_loss(s, out.token_dist))
                },
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "{:?}", report.failures());
        }
    }
}
