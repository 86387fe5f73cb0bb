//! Channel statistics, the full-modality reference and the alignment loss.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensorgrad::{Session, Tensor, Var};

/// Where the alignment loss reads features.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttachPoint {
    En0,
    En1,
    /// Bottleneck output, the first point with trainable parameters upstream.
    Bn,
}

impl AttachPoint {
    pub const ALL: [AttachPoint; 3] = [AttachPoint::En0, AttachPoint::En1, AttachPoint::Bn];

    pub fn name(self) -> &'static str {
        match self {
            AttachPoint::En0 => "en0",
            AttachPoint::En1 => "en1",
            AttachPoint::Bn => "bn",
        }
    }
}

impl fmt::Display for AttachPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttachPoint {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AttachPoint::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown attachment point {s:?}")))
    }
}

/// Parses `en0`, `en1`, `bn`, `both` (en0+en1) or `none`, comma separated.
pub fn parse_attachment(s: &str) -> Result<Vec<AttachPoint>> {
    let mut out = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part {
            "none" => {}
            "both" => out.extend([AttachPoint::En0, AttachPoint::En1]),
            p => out.push(p.parse()?),
        }
    }
    out.sort();
    out.dedup();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AlignConfig {
    pub attachment: Vec<AttachPoint>,
}

impl Default for AlignConfig {
    fn default() -> Self {
        AlignConfig {
            attachment: vec![AttachPoint::En1],
        }
    }
}

/// Per-channel mean and population variance over `count` positions.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: u64,
}

impl ChannelStats {
    pub fn empty(d: usize) -> Self {
        ChannelStats {
            mean: vec![0.0; d],
            var: vec![0.0; d],
            count: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }
}

/// Two-pass statistics over every leading position of `f: [.., D]`.
pub fn channel_stats<T: Scalar>(f: &Tensor<T>) -> Result<ChannelStats> {
    let d = f.last_dim();
    let rows = f.rows();
    if rows == 0 || d == 0 {
        return Err(Error::Contract("channel_stats needs at least one position".into()));
    }
    let mut mean = vec![0.0f64; d];
    for row in f.data().chunks(d) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v.f64();
        }
    }
    mean.iter_mut().for_each(|m| *m /= rows as f64);
    let mut var = vec![0.0f64; d];
    for row in f.data().chunks(d) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v.f64() - m).powi(2);
        }
    }
    var.iter_mut().for_each(|s| *s = (*s / rows as f64).max(0.0));
    Ok(ChannelStats {
        mean,
        var,
        count: rows as u64,
    })
}

/// Differentiable batch statistics `(mean [D], var [D])`.
pub fn channel_stats_var<T: Scalar>(s: &Session<'_, T>, f: Var) -> Result<(Var, Var)> {
    let dims = s.dims(f);
    if dims.is_empty() || dims.iter().product::<usize>() == 0 {
        return Err(Error::Contract("channel_stats needs at least one position".into()));
    }
    let mean = s.mean_rows(f);
    let centered = s.add_row(f, s.scale(mean, -T::one()))?;
    let var = s.mean_rows(s.square(centered));
    Ok((mean, var))
}

/// Pooled statistics of the union of two disjoint position sets.
pub fn merge_stats(a: &ChannelStats, b: &ChannelStats) -> Result<ChannelStats> {
    if a.is_empty() {
        return Ok(b.clone());
    }
    if b.is_empty() {
        return Ok(a.clone());
    }
    if a.dim() != b.dim() {
        return Err(Error::Contract(format!(
            "merging stats of width {} and {}",
            a.dim(),
            b.dim()
        )));
    }
    let (na, nb) = (a.count as f64, b.count as f64);
    let n = na + nb;
    let mut mean = Vec::with_capacity(a.dim());
    let mut var = Vec::with_capacity(a.dim());
    for j in 0..a.dim() {
        let delta = b.mean[j] - a.mean[j];
        mean.push((na * a.mean[j] + nb * b.mean[j]) / n);
        let m2 = a.var[j] * na + b.var[j] * nb + delta * delta * na * nb / n;
        var.push((m2 / n).max(0.0));
    }
    Ok(ChannelStats {
        mean,
        var,
        count: a.count + b.count,
    })
}

/// Frozen full-modality statistics per attachment point.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReferenceStore {
    pub stats: BTreeMap<AttachPoint, ChannelStats>,
}

impl ReferenceStore {
    pub fn get(&self, point: AttachPoint) -> Result<&ChannelStats> {
        match self.stats.get(&point) {
            Some(s) if !s.is_empty() => Ok(s),
            _ => Err(Error::Config(format!(
                "missing reference statistics for attachment point {point}"
            ))),
        }
    }

    pub fn require(&self, points: &[AttachPoint]) -> Result<()> {
        points.iter().try_for_each(|&p| self.get(p).map(|_| ()))
    }
}

/// Streams feature batches into one [`ReferenceStore`].
///
/// Each item maps attachment points to `[B, T, D]` features of a
/// full-modality batch.
pub fn accumulate_reference<T, I>(batches: I, points: &[AttachPoint]) -> Result<ReferenceStore>
where
    T: Scalar,
    I: IntoIterator<Item = Result<BTreeMap<AttachPoint, Tensor<T>>>>,
{
    let mut stats: BTreeMap<AttachPoint, ChannelStats> = BTreeMap::new();
    let mut seen = false;
    for batch in batches {
        let batch = batch?;
        seen = true;
        for &p in points {
            let f = batch
                .get(&p)
                .ok_or_else(|| Error::Contract(format!("batch lacks features for {p}")))?;
            let cur = channel_stats(f)?;
            let merged = match stats.get(&p) {
                Some(prev) => merge_stats(prev, &cur)?,
                None => cur,
            };
            stats.insert(p, merged);
        }
    }
    if !seen {
        return Err(Error::Contract("reference pass over an empty dataset".into()));
    }
    Ok(ReferenceStore { stats })
}

/// `MSE(μ, μ_ref) + MSE(σ², σ²_ref)` with the reference as constants.
pub fn distribution_loss<T: Scalar>(s: &Session<'_, T>, mean: Var, var: Var, reference: &ChannelStats) -> Result<Var> {
    let d = reference.dim();
    if s.dims(mean) != [d] || s.dims(var) != [d] {
        return Err(Error::shape("distribution_loss", &s.dims(mean), &[d]));
    }
    let rm = s.constant(Tensor::new(vec![d], reference.mean.iter().map(|&v| T::c(v)).collect())?);
    let rv = s.constant(Tensor::new(vec![d], reference.var.iter().map(|&v| T::c(v)).collect())?);
    let lm = s.mean_all(s.square(s.sub(mean, rm)?));
    let lv = s.mean_all(s.square(s.sub(var, rv)?));
    s.add(lm, lv)
}

/// Plain-value form of [`distribution_loss`].
pub fn distribution_loss_value(current: &ChannelStats, reference: &ChannelStats) -> Result<f64> {
    if current.dim() != reference.dim() {
        return Err(Error::Contract("distribution_loss on mismatched widths".into()));
    }
    let d = current.dim() as f64;
    let mse = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / d;
    Ok(mse(&current.mean, &reference.mean) + mse(&current.var, &reference.var))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensorgrad::{finite_diff_check, ParamStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_t(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(dims, |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn stats_examples() {
        let s = channel_stats(&Tensor::<f64>::full(&[2, 3, 4], 1.5)).unwrap();
        assert!(s.mean.iter().all(|&m| m == 1.5) && s.var.iter().all(|&v| v == 0.0));
        assert_eq!(s.count, 6);
        let f = Tensor::<f64>::new(vec![1, 4, 1], vec![-1.0, 1.0, 1.0, -1.0]).unwrap();
        let s = channel_stats(&f).unwrap();
        assert_eq!((s.mean[0], s.var[0]), (0.0, 1.0));
        assert!(channel_stats(&Tensor::<f64>::zeros(&[0, 4])).is_err());
    }

    #[test]
    fn graph_stats_match_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = rand_t(&mut rng, &[3, 5, 4]);
        let want = channel_stats(&f).unwrap();
        let store = ParamStore::<f64>::new();
        let s = Session::new(&store);
        let (m, v) = channel_stats_var(&s, s.constant(f)).unwrap();
        for j in 0..4 {
            assert!((s.value(m).data()[j] - want.mean[j]).abs() < 1e-10);
            assert!((s.value(v).data()[j] - want.var[j]).abs() < 1e-10);
        }
    }

    #[test]
    fn shift_moves_mean_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = rand_t(&mut rng, &[2, 6, 3]);
        let a = channel_stats(&f).unwrap();
        let b = channel_stats(&f.map(|v| v + 3.25)).unwrap();
        for j in 0..3 {
            assert!((b.mean[j] - a.mean[j] - 3.25).abs() < 1e-6);
            assert!((b.var[j] - a.var[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn merge_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = channel_stats(&rand_t(&mut rng, &[3, 4])).unwrap();
        let b = channel_stats(&rand_t(&mut rng, &[5, 4])).unwrap();
        assert_eq!(merge_stats(&a, &ChannelStats::empty(4)).unwrap(), a);
        let ab = merge_stats(&a, &b).unwrap();
        let ba = merge_stats(&b, &a).unwrap();
        for j in 0..4 {
            assert!((ab.mean[j] - ba.mean[j]).abs() < 1e-10);
            assert!((ab.var[j] - ba.var[j]).abs() < 1e-10);
        }
        assert!(merge_stats(&a, &channel_stats(&rand_t(&mut rng, &[2, 3])).unwrap()).is_err());
    }

    #[test]
    fn loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let r = channel_stats(&rand_t(&mut rng, &[6, 5])).unwrap();
        assert_eq!(distribution_loss_value(&r, &r).unwrap(), 0.0);
        let a = ChannelStats {
            mean: vec![3.0],
            var: vec![1.0],
            count: 1,
        };
        let b = ChannelStats {
            mean: vec![1.0],
            var: vec![1.0],
            count: 1,
        };
        assert_eq!(distribution_loss_value(&a, &b).unwrap(), 4.0);

        let store = ParamStore::<f64>::new();
        let s = Session::new(&store);
        let c = channel_stats(&rand_t(&mut rng, &[6, 5])).unwrap();
        let m = s.constant(Tensor::new(vec![5], c.mean.clone()).unwrap());
        let v = s.constant(Tensor::new(vec![5], c.var.clone()).unwrap());
        let got = s.value(distribution_loss(&s, m, v, &r).unwrap()).item();
        let want: f64 = (0..5)
            .map(|j| (c.mean[j] - r.mean[j]).powi(2) / 5.0 + (c.var[j] - r.var[j]).powi(2) / 5.0)
            .sum();
        assert!((got - want).abs() < 1e-10);
        assert!((distribution_loss_value(&c, &r).unwrap() - want).abs() < 1e-10);
    }

    #[test]
    fn missing_reference_names_point() {
        let refs = ReferenceStore::default();
        let err = refs.get(AttachPoint::En1).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("en1"));
    }

    #[test]
    fn attachment_parsing() {
        use AttachPoint::*;
        assert_eq!(parse_attachment("en1").unwrap(), vec![En1]);
        assert_eq!(parse_attachment("both").unwrap(), vec![En0, En1]);
        assert_eq!(parse_attachment("none").unwrap(), vec![]);
        assert_eq!(parse_attachment("bn,en1").unwrap(), vec![En1, Bn]);
        assert!(parse_attachment("en2").is_err());
    }

    #[test]
    fn streaming_reference_single_and_batched() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let all = rand_t(&mut rng, &[8, 4, 3]);
        let batch = |lo: usize, hi: usize| {
            let t = Tensor::new(vec![hi - lo, 4, 3], all.data()[lo * 12..hi * 12].to_vec()).unwrap();
            Ok(BTreeMap::from([(AttachPoint::En1, t)]))
        };
        let one = accumulate_reference((0..8).map(|i| batch(i, i + 1)), &[AttachPoint::En1]).unwrap();
        let eight = accumulate_reference([batch(0, 8)], &[AttachPoint::En1]).unwrap();
        let (a, b) = (one.get(AttachPoint::En1).unwrap(), eight.get(AttachPoint::En1).unwrap());
        assert_eq!(a.count, 32);
        for j in 0..3 {
            assert!((a.mean[j] - b.mean[j]).abs() < 1e-6 && (a.var[j] - b.var[j]).abs() < 1e-6);
        }
        let first = accumulate_reference([batch(0, 1)], &[AttachPoint::En1]).unwrap();
        let want = channel_stats(&Tensor::new(vec![1, 4, 3], all.data()[..12].to_vec()).unwrap()).unwrap();
        assert_eq!(first.get(AttachPoint::En1).unwrap(), &want);
        let none: Vec<Result<BTreeMap<AttachPoint, Tensor<f64>>>> = vec![];
        assert!(accumulate_reference(none, &[AttachPoint::En1]).is_err());
    }

    #[test]
    fn loss_gradient_through_stats() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let r = channel_stats(&rand_t(&mut rng, &[7, 3])).unwrap();
        let mut store = ParamStore::<f64>::new();
        let f = store.add("f", rand_t(&mut rng, &[2, 4, 3, 3]), true);
        let report = finite_diff_check(
            &mut store,
            |s| {
                let (m, v) = channel_stats_var(s, s.p(f))?;
                distribution_loss(s, m, v, &r)
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{:?}", report.failures());
    }
}
