//! Dataset formats: NIfTI ingestion, the phantom generator, sample blobs and
//! the JSON manifest tying them together.

mod blob;
mod nifti;
mod slices;
mod synth;

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

pub use blob::{blob_decode, blob_encode, blob_read, blob_write, MASK_MAGIC, SAMPLE_MAGIC};
pub use nifti::{nifti_parse, nifti_read, Endian, NiftiVolume, HEADER_SIZE};
pub use slices::{extract_slices, minmax_normalize, resize_bilinear, resize_mask, SliceProtocol};
pub use synth::{synth_sample, BLOB_OFFSETS, NOISE_STD, SYNTH_SIZE};

use crate::checkpoint::write_atomic;
use crate::encoder::MODALITIES;
use crate::error::{Error, Result};
use crate::model::rng_stream;
use crate::scalar::Scalar;
use crate::tensorgrad::Tensor;

pub const MANIFEST_NAME: &str = "manifest.json";
pub const STREAM_SYNTH: u64 = 4;
pub const STREAM_SPLIT: u64 = 5;
pub const TRAIN_FRACTION: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Normal,
    Abnormal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SliceSample {
    pub id: String,
    /// `[C, H, W]`
    pub channels: Tensor<f32>,
    /// `H × W` 0/1, present only on abnormal samples.
    pub mask: Option<Vec<u8>>,
    pub label: Label,
}

impl SliceSample {
    pub fn mask_bool(&self) -> Vec<bool> {
        let d = self.channels.dims();
        match &self.mask {
            Some(m) => m.iter().map(|&v| v > 0).collect(),
            None => vec![false; d[1] * d[2]],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    pub id: String,
    /// Relative to the manifest's directory.
    pub blob: String,
    /// Whether the blob carries a mask section.
    pub has_mask: bool,
    pub label: Label,
    pub split: Split,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub train: usize,
    pub test_normal: usize,
    pub test_abnormal: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub modalities: Vec<String>,
    pub samples: Vec<Record>,
    pub counts: Counts,
}

impl Manifest {
    fn build(modalities: &[&str], train: &[&SliceSample], test: &[&SliceSample]) -> Self {
        let rec = |s: &SliceSample, split| Record {
            id: s.id.clone(),
            blob: format!("blobs/{}.adsl", s.id),
            has_mask: s.mask.is_some(),
            label: s.label,
            split,
        };
        let samples: Vec<Record> = train
            .iter()
            .map(|s| rec(s, Split::Train))
            .chain(test.iter().map(|s| rec(s, Split::Test)))
            .collect();
        let test_abnormal = test.iter().filter(|s| s.label == Label::Abnormal).count();
        Manifest {
            modalities: modalities.iter().map(|m| m.to_string()).collect(),
            counts: Counts {
                train: train.len(),
                test_normal: test.len() - test_abnormal,
                test_abnormal,
            },
            samples,
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serialises");
        s.push('\n');
        s
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = BTreeSet::new();
        for r in &self.samples {
            if !ids.insert(&r.id) {
                return Err(Error::Contract(format!("duplicate sample id {}", r.id)));
            }
            if r.split == Split::Train && r.label != Label::Normal {
                return Err(Error::Contract(format!("abnormal sample {} in the train split", r.id)));
            }
            if r.has_mask != (r.label == Label::Abnormal) {
                return Err(Error::Contract(format!(
                    "sample {}: mask presence disagrees with label",
                    r.id
                )));
            }
        }
        Ok(())
    }
}

/// Seeded one-class split: 80% of normals train, the rest test, and abnormals
/// shuffled and truncated to the test-normal count.
pub fn split_dataset(samples: &[SliceSample], modalities: &[&str], seed: u64) -> Result<Manifest> {
    let mut normals: Vec<usize> = (0..samples.len())
        .filter(|&i| samples[i].label == Label::Normal)
        .collect();
    let mut abnormals: Vec<usize> = (0..samples.len())
        .filter(|&i| samples[i].label == Label::Abnormal)
        .collect();
    if normals.is_empty() {
        return Err(Error::Contract("split needs at least one normal sample".into()));
    }
    let mut rng = rng_stream(seed, STREAM_SPLIT);
    normals.shuffle(&mut rng);
    abnormals.shuffle(&mut rng);
    let n_train = ((normals.len() as f64 * TRAIN_FRACTION).round() as usize).clamp(1, normals.len());
    let (train, test_normal) = normals.split_at(n_train);
    abnormals.truncate(test_normal.len());
    let mut train = train.to_vec();
    let mut test: Vec<usize> = test_normal.iter().chain(&abnormals).copied().collect();
    train.sort_unstable();
    test.sort_unstable();
    let pick = |v: &[usize]| v.iter().map(|&i| &samples[i]).collect::<Vec<_>>();
    let m = Manifest::build(modalities, &pick(&train), &pick(&test));
    m.validate()?;
    Ok(m)
}

/// Writes the blobs referenced by `manifest` and then the manifest itself.
pub fn write_dataset(out_dir: &Path, manifest: &Manifest, samples: &[SliceSample]) -> Result<()> {
    manifest.validate()?;
    for r in &manifest.samples {
        let s = samples
            .iter()
            .find(|s| s.id == r.id)
            .ok_or_else(|| Error::Contract(format!("manifest names unknown sample {}", r.id)))?;
        blob_write(&out_dir.join(&r.blob), &s.channels, s.mask.as_deref())?;
    }
    write_atomic(&out_dir.join(MANIFEST_NAME), manifest.to_json().as_bytes())
}

/// Phantom dataset: `n_normal` training slices, and a test split of
/// `n_abnormal` normal plus `n_abnormal` abnormal slices.
pub fn synth_generate(n_normal: usize, n_abnormal: usize, seed: u64, out_dir: &Path) -> Result<Manifest> {
    let (manifest, samples) = synth_dataset(n_normal, n_abnormal, seed)?;
    write_dataset(out_dir, &manifest, &samples)?;
    Ok(manifest)
}

/// In-memory form of [`synth_generate`].
pub fn synth_dataset(n_normal: usize, n_abnormal: usize, seed: u64) -> Result<(Manifest, Vec<SliceSample>)> {
    if n_normal == 0 || n_abnormal == 0 {
        return Err(Error::Usage(
            "synth needs at least one normal and one abnormal sample".into(),
        ));
    }
    let mut rng = rng_stream(seed, STREAM_SYNTH);
    let train: Vec<SliceSample> = (0..n_normal)
        .map(|i| synth_sample(&mut rng, format!("train_{i:05}"), false))
        .collect();
    let mut test = Vec::with_capacity(2 * n_abnormal);
    for i in 0..n_abnormal {
        test.push(synth_sample(&mut rng, format!("test_{:05}", 2 * i), false));
        test.push(synth_sample(&mut rng, format!("test_{:05}", 2 * i + 1), true));
    }
    let manifest = Manifest::build(
        &MODALITIES,
        &train.iter().collect::<Vec<_>>(),
        &test.iter().collect::<Vec<_>>(),
    );
    manifest.validate()?;
    Ok((manifest, train.into_iter().chain(test).collect()))
}

/// Locates `<subject>/*_{flair,t1,t2,seg}.nii[.gz]` under `data_dir`, one
/// subject per subdirectory, in sorted order.
pub fn find_subjects(data_dir: &Path) -> Result<Vec<(String, [PathBuf; 3], PathBuf)>> {
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(data_dir)
        .map_err(|e| Error::io(data_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    let mut out = Vec::new();
    for dir in dirs {
        let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
            .map_err(|e| Error::io(&dir, e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .collect();
        files.sort();
        let find = |tag: &str| {
            files
                .iter()
                .find(|p| {
                    let n = p.file_name().unwrap_or_default().to_string_lossy().to_lowercase();
                    n.ends_with(&format!("_{tag}.nii")) || n.ends_with(&format!("_{tag}.nii.gz"))
                })
                .cloned()
                .ok_or_else(|| Error::Contract(format!("{}: no *_{tag}.nii[.gz]", dir.display())))
        };
        let id = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        out.push((id, [find("flair")?, find("t1")?, find("t2")?], find("seg")?));
    }
    if out.is_empty() {
        return Err(Error::Contract(format!(
            "no subject directories under {}",
            data_dir.display()
        )));
    }
    Ok(out)
}

/// NIfTI subjects → slices → split → blobs and manifest in `out_dir`.
pub fn ingest(data_dir: &Path, out_dir: &Path, protocol: &SliceProtocol, seed: u64) -> Result<Manifest> {
    let mut samples = Vec::new();
    for (id, mods, seg) in find_subjects(data_dir)? {
        let vols = mods.iter().map(|p| nifti_read(p)).collect::<Result<Vec<_>>>()?;
        let mask = nifti_read(&seg)?;
        let refs: Vec<&NiftiVolume> = vols.iter().collect();
        samples.extend(extract_slices(&id, &refs, Some(&mask), protocol)?);
    }
    let manifest = split_dataset(&samples, &MODALITIES, seed)?;
    write_dataset(out_dir, &manifest, &samples)?;
    Ok(manifest)
}

/// A manifest with every referenced blob loaded.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<SliceSample>,
    pub test: Vec<SliceSample>,
}

impl Dataset {
    /// `path` is a manifest file or the directory holding `manifest.json`.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() {
            path.join(MANIFEST_NAME)
        } else {
            path.to_path_buf()
        };
        let root = file.parent().unwrap_or(Path::new("."));
        let text = std::fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::parse(0, format!("{}: {e}", file.display())))?;
        manifest.validate()?;
        let (mut train, mut test) = (Vec::new(), Vec::new());
        for r in &manifest.samples {
            let (channels, mask) = blob_read(&root.join(&r.blob))?;
            if mask.is_some() != r.has_mask {
                return Err(Error::Contract(format!("blob of {} disagrees with has_mask", r.id)));
            }
            let s = SliceSample {
                id: r.id.clone(),
                channels,
                mask,
                label: r.label,
            };
            match r.split {
                Split::Train => train.push(s),
                Split::Test => test.push(s),
            }
        }
        let dims = train.iter().chain(&test).next().map(|s| s.channels.dims().to_vec());
        if let Some(d) = dims {
            if let Some(s) = train.iter().chain(&test).find(|s| s.channels.dims() != &d[..]) {
                return Err(Error::Contract(format!(
                    "sample {} has dims {:?}, expected {d:?}",
                    s.id,
                    s.channels.dims()
                )));
            }
        }
        Ok(Dataset { manifest, train, test })
    }

    /// Stacks samples into `[N, C, H, W]`.
    pub fn stack<T: Scalar>(samples: &[SliceSample]) -> Result<Tensor<T>> {
        let first = samples
            .first()
            .ok_or_else(|| Error::Contract("no samples to stack".into()))?;
        let mut dims = vec![samples.len()];
        dims.extend_from_slice(first.channels.dims());
        let data = samples
            .iter()
            .flat_map(|s| s.channels.data().iter().map(|&v| T::c(v as f64)))
            .collect();
        Tensor::new(dims, data)
    }

    pub fn train_images<T: Scalar>(&self) -> Result<Tensor<T>> {
        Self::stack(&self.train)
    }
}
