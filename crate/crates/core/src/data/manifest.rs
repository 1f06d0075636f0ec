//! JSON dataset manifests and per-sample decoding.
//!
//! Image, depth and segmentation files are either 8-bit PNG or MALTNSR1
//! tensors, chosen by the `.png` extension.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{read_tensor, Tensor};

use super::png::decode_png;
use super::{Dataset, Sample, Task};

/// Per-channel affine normalization applied to `[0, 1]` images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

impl Normalization {
    pub fn identity(channels: usize) -> Self {
        Self {
            mean: vec![0.0; channels],
            std: vec![1.0; channels],
        }
    }

    /// Channel statistics over a set of `C×H×W` images.
    pub fn from_images<'a>(images: impl IntoIterator<Item = &'a Tensor<f32>>) -> Self {
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let mut count = 0usize;
        for img in images {
            let c = img.shape()[0];
            let hw = img.len() / c;
            if sum.is_empty() {
                sum = vec![0.0; c];
                sq = vec![0.0; c];
            }
            for ch in 0..c {
                for &v in &img.data()[ch * hw..(ch + 1) * hw] {
                    sum[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
            count += hw;
        }
        let n = count.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq
            .iter()
            .zip(&mean)
            .map(|(s, m)| ((s / n - m * m).max(0.0).sqrt().max(1e-3)) as f32)
            .collect();
        Self {
            mean: mean.into_iter().map(|m| m as f32).collect(),
            std,
        }
    }

    pub fn apply(&self, img: &Tensor<f32>) -> Tensor<f32> {
        let c = img.shape()[0];
        let hw = img.len() / c.max(1);
        let mut out = img.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            let ch = i / hw;
            *v = (*v - self.mean[ch]) / self.std[ch];
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Entry {
    pub image: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub depth: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub task: Task,
    /// Directory of the sample files, relative to the manifest.
    #[serde(default = "dot")]
    pub root: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default)]
    pub num_classes: usize,
    #[serde(default)]
    pub seg_classes: usize,
    pub normalization: Normalization,
    pub splits: BTreeMap<String, Vec<Entry>>,
    /// Directory holding the manifest file.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn dot() -> String {
    ".".into()
}

impl Manifest {
    /// Parses and checks a manifest without touching the filesystem.
    pub fn parse(json: &str) -> Result<Self> {
        let m: Manifest = serde_json::from_str(json).map_err(|e| Error::Dataset(format!("manifest: {e}")))?;
        let v = m.violations();
        if !v.is_empty() {
            return Err(Error::Dataset(v.join("; ")));
        }
        Ok(m)
    }

    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            v.push(format!(
                "image geometry {}x{}x{} must be positive",
                self.channels, self.height, self.width
            ));
        }
        if self.normalization.mean.len() != self.channels || self.normalization.std.len() != self.channels {
            v.push(format!("normalization needs {} mean and std values", self.channels));
        }
        if self.normalization.std.iter().any(|s| !(s.is_finite() && *s > 0.0))
            || self.normalization.mean.iter().any(|m| !m.is_finite())
        {
            v.push("normalization values must be finite with positive std".into());
        }
        match self.task {
            Task::Classify if self.num_classes < 2 => v.push("classification needs num_classes >= 2".into()),
            Task::Seg if self.seg_classes < 2 => v.push("segmentation needs seg_classes >= 2".into()),
            _ => {}
        }
        for (split, entries) in &self.splits {
            for (i, e) in entries.iter().enumerate() {
                let at = format!("split `{split}` entry {i}");
                match self.task {
                    Task::Classify => match e.label {
                        None => v.push(format!("{at}: missing label")),
                        Some(l) if l >= self.num_classes => {
                            v.push(format!("{at}: label {l} >= num_classes {}", self.num_classes))
                        }
                        _ => {}
                    },
                    Task::Depth if e.depth.is_none() => v.push(format!("{at}: missing depth")),
                    Task::Seg if e.seg.is_none() => v.push(format!("{at}: missing seg")),
                    _ => {}
                }
            }
        }
        v
    }

    /// Reads, checks, and verifies that every referenced file exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Ingest {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut m = Self::parse(&text)?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut missing = Vec::new();
        for entries in m.splits.values() {
            for e in entries {
                for f in [Some(&e.image), e.depth.as_ref(), e.seg.as_ref()].into_iter().flatten() {
                    if !m.resolve(f).is_file() {
                        missing.push(f.clone());
                    }
                }
            }
        }
        if !missing.is_empty() {
            let shown: Vec<_> = missing.iter().take(5).cloned().collect();
            return Err(Error::Dataset(format!(
                "{} missing files, e.g. {}",
                missing.len(),
                shown.join(", ")
            )));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self).expect("manifest serializes");
        text.push('\n');
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn resolve(&self, file: &str) -> PathBuf {
        self.base_dir.join(&self.root).join(file)
    }

    pub fn split(&self, name: &str) -> Result<&[Entry]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Dataset(format!("manifest has no split `{name}`")))
    }
}

fn ingest(path: &Path, reason: impl ToString) -> Error {
    Error::Ingest {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Reads a PNG scaled to `[0, 1]` or a tensor file as stored.
fn read_plane(path: &Path, raw_png: bool) -> Result<Tensor<f32>> {
    let is_png = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if is_png {
        let bytes = std::fs::read(path).map_err(|e| ingest(path, e))?;
        let px = decode_png(&bytes).map_err(|e| ingest(path, e))?;
        if raw_png {
            Ok(Tensor::from_parts(
                vec![px.channels, px.height, px.width],
                px.data.iter().map(|&v| v as f32).collect(),
            ))
        } else {
            Ok(px.to_unit())
        }
    } else {
        match read_tensor(path) {
            Ok(t) => Ok(t.into_real()),
            Err(e @ Error::Ingest { .. }) => Err(e),
            Err(e) => Err(ingest(path, e)),
        }
    }
}

/// Accepts `H×W` or `1×H×W` single-channel maps.
fn single_plane(t: Tensor<f32>, h: usize, w: usize, path: &Path) -> Result<Tensor<f32>> {
    if t.shape() == [h, w] || t.shape() == [1, h, w] {
        t.reshape(&[1, h, w])
    } else {
        Err(ingest(path, format!("expected a {h}x{w} map, found shape {:?}", t.shape())))
    }
}

pub fn load_sample(m: &Manifest, split: &str, index: usize) -> Result<Sample> {
    let entries = m.split(split)?;
    let e = entries
        .get(index)
        .ok_or_else(|| Error::Dataset(format!("split `{split}` has no entry {index}")))?;
    let (c, h, w) = (m.channels, m.height, m.width);
    let path = m.resolve(&e.image);
    let image = read_plane(&path, false)?;
    if image.shape() != [c, h, w] {
        return Err(ingest(&path, format!("expected a {c}x{h}x{w} image, found shape {:?}", image.shape())));
    }
    if !image.is_finite() {
        return Err(ingest(&path, "image has non-finite values"));
    }
    let image = m.normalization.apply(&image);
    let depth = match &e.depth {
        Some(p) => {
            let path = m.resolve(p);
            let d = single_plane(read_plane(&path, false)?, h, w, &path)?;
            if !d.is_finite() {
                return Err(ingest(&path, "depth has non-finite values"));
            }
            Some(d)
        }
        None => None,
    };
    let seg = match &e.seg {
        Some(p) => {
            let path = m.resolve(p);
            let s = single_plane(read_plane(&path, true)?, h, w, &path)?;
            let mut ids = Vec::with_capacity(h * w);
            for &v in s.data() {
                if !(v >= 0.0 && v.fract() == 0.0 && (v as usize) < m.seg_classes.max(1)) {
                    return Err(ingest(&path, format!("invalid class id {v} for {} classes", m.seg_classes)));
                }
                ids.push(v as usize);
            }
            Some(ids)
        }
        None => None,
    };
    Ok(Sample {
        image,
        label: e.label,
        depth,
        seg,
    })
}

pub fn load_dataset(m: &Manifest, split: &str) -> Result<Dataset> {
    let n = m.split(split)?.len();
    let samples = (0..n).map(|i| load_sample(m, split, i)).collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        task: m.task,
        samples,
        num_classes: m.num_classes,
        seg_classes: m.seg_classes,
    })
}
