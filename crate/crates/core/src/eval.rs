//! The seven-combination evaluation grid.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataio::{blob_write, Dataset, Label, SliceSample};
use crate::encoder::ModalityMask;
use crate::error::{Error, Result};
use crate::metrics::{aupro, auroc, average_precision, f1_max, ProSweep};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::score::{write_heatmap_png, AnomalyMap};
use crate::tensorgrad::Tensor;

pub const METRICS: [&str; 7] = ["auroc_img", "auroc_px", "ap_img", "ap_px", "f1_img", "f1_px", "aupro"];
pub const FPR_LIMIT: f64 = 0.3;

/// Parses `all`, `7` or a comma list such as `1,4,7`.
pub fn parse_combos(s: &str) -> Result<Vec<u8>> {
    if s.trim() == "all" {
        return Ok((1..=7).collect());
    }
    let mut out = Vec::new();
    for part in s.split(',') {
        let c: u8 = part
            .trim()
            .parse()
            .map_err(|_| Error::Usage(format!("bad combo {part:?}; expected all or 1..7")))?;
        ModalityMask::from_combo(c)?;
        if !out.contains(&c) {
            out.push(c);
        }
    }
    out.sort_unstable();
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComboResult {
    pub combo: u8,
    pub modalities: String,
    pub metrics: BTreeMap<String, f64>,
    /// Bounds used to normalise exported heatmaps.
    pub map_min: f64,
    pub map_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub combos: Vec<ComboResult>,
    /// Mean over the evaluated combos.
    pub avg: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serialises");
        s.push('\n');
        s
    }

    pub fn image_auroc(&self, combo: u8) -> Option<f64> {
        self.combos
            .iter()
            .find(|c| c.combo == combo)
            .map(|c| c.metrics["auroc_img"])
    }

    /// Metric rows by combo column.
    pub fn table(&self) -> String {
        let mut out = format!("{:<10}", "metric");
        for c in &self.combos {
            out += &format!(" {:>7}", c.combo);
        }
        out += &format!(" {:>7}\n", "Avg");
        for m in METRICS {
            out += &format!("{m:<10}");
            for c in &self.combos {
                out += &format!(" {:>7.4}", c.metrics[m]);
            }
            out += &format!(" {:>7.4}\n", self.avg[m]);
        }
        out
    }
}

#[derive(Clone, Debug, Default)]
pub struct EvalOptions {
    pub batch: usize,
    pub sweep: ProSweep,
    /// Writes `combo{c}/{id}.png` and the raw `{id}.adsl` map here.
    pub heatmaps: Option<PathBuf>,
}

/// Anomaly maps of `samples` under `mask`, in order.
pub fn score_samples<T: Scalar>(
    model: &Model<T>,
    samples: &[SliceSample],
    mask: &ModalityMask,
    batch: usize,
) -> Result<Vec<AnomalyMap>> {
    let mut maps = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch.max(1)) {
        let x: Tensor<T> = Dataset::stack(chunk)?;
        maps.extend(model.score(&x, mask)?);
    }
    Ok(maps)
}

pub fn combo_metrics(samples: &[SliceSample], maps: &[AnomalyMap], sweep: ProSweep) -> Result<BTreeMap<String, f64>> {
    let labels: Vec<bool> = samples.iter().map(|s| s.label == Label::Abnormal).collect();
    let img: Vec<f64> = maps.iter().map(|m| m.image_score).collect();
    let masks: Vec<Vec<bool>> = samples.iter().map(|s| s.mask_bool()).collect();
    let px_labels: Vec<bool> = masks.iter().flatten().copied().collect();
    let px: Vec<f64> = maps.iter().flat_map(|m| m.values.data().iter().copied()).collect();
    let d = maps
        .first()
        .ok_or_else(|| Error::Contract("no test samples".into()))?
        .values
        .dims()
        .to_vec();
    if px.len() != px_labels.len() {
        return Err(Error::shape("combo_metrics", &[px.len()], &[px_labels.len()]));
    }
    let map_refs: Vec<&[f64]> = maps.iter().map(|m| m.values.data()).collect();
    let mask_refs: Vec<&[bool]> = masks.iter().map(|m| m.as_slice()).collect();
    let mut out = BTreeMap::new();
    out.insert("auroc_img".into(), auroc(&img, &labels)?);
    out.insert("auroc_px".into(), auroc(&px, &px_labels)?);
    out.insert("ap_img".into(), average_precision(&img, &labels)?);
    out.insert("ap_px".into(), average_precision(&px, &px_labels)?);
    out.insert("f1_img".into(), f1_max(&img, &labels)?.0);
    out.insert("f1_px".into(), f1_max(&px, &px_labels)?.0);
    out.insert(
        "aupro".into(),
        aupro(&map_refs, &mask_refs, d[0], d[1], FPR_LIMIT, sweep)?,
    );
    Ok(out)
}

pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    test: &[SliceSample],
    combos: &[u8],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    model.refs.require(&model.cfg.align.attachment)?;
    let mut results = Vec::new();
    for &c in combos {
        let mask = ModalityMask::from_combo(c)?;
        let maps = score_samples(model, test, &mask, opts.batch)?;
        let metrics = combo_metrics(test, &maps, opts.sweep)?;
        let all = maps.iter().flat_map(|m| m.values.data().iter().copied());
        let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
        if let Some(dir) = &opts.heatmaps {
            write_heatmaps(&dir.join(format!("combo{c}")), test, &maps, lo, hi)?;
        }
        results.push(ComboResult {
            combo: c,
            modalities: mask.label(),
            metrics,
            map_min: lo,
            map_max: hi,
        });
    }
    let mut avg = BTreeMap::new();
    for m in METRICS {
        let v = results.iter().map(|r| r.metrics[m]).sum::<f64>() / results.len().max(1) as f64;
        avg.insert(m.to_string(), v);
    }
    Ok(EvalReport {
        samples: test.len(),
        combos: results,
        avg,
    })
}

fn write_heatmaps(dir: &Path, samples: &[SliceSample], maps: &[AnomalyMap], lo: f64, hi: f64) -> Result<()> {
    for (s, m) in samples.iter().zip(maps) {
        write_heatmap_png(&dir.join(format!("{}.png", s.id)), &m.values, lo, hi)?;
        let d = m.values.dims();
        let raw = Tensor::new(vec![1, d[0], d[1]], m.values.data().iter().map(|&v| v as f32).collect())?;
        blob_write(&dir.join(format!("{}.adsl", s.id)), &raw, None)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn combo_lists() {
        assert_eq!(parse_combos("all").unwrap(), (1..=7).collect::<Vec<_>>());
        assert_eq!(parse_combos("7").unwrap(), vec![7]);
        assert_eq!(parse_combos("7, 1,4,1").unwrap(), vec![1, 4, 7]);
        assert!(parse_combos("0").is_err());
        assert!(parse_combos("x").is_err());
    }
}
