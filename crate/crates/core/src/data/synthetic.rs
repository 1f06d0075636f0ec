//! Scenes of randomly placed geometric shapes with exact depth,
//! segmentation and class targets.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{write_tensor, Tensor};

use super::manifest::{Entry, Manifest, Normalization};
use super::{Dataset, Sample, Task};

/// Number of shape types, which is also the number of scene classes.
pub const SHAPE_CLASSES: usize = 3;
/// Shape types plus background.
pub const SEG_CLASSES: usize = SHAPE_CLASSES + 1;

const BACKGROUND_DEPTH: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; SHAPE_CLASSES] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];

    pub fn class(self) -> usize {
        self as usize
    }

    /// Segmentation id; 0 is background.
    pub fn seg_id(self) -> usize {
        self as usize + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Shape {
    pub kind: ShapeKind,
    pub cy: f64,
    pub cx: f64,
    /// Radius, half side, or half height.
    pub size: f64,
    pub color: [f32; 3],
    /// Distance of the shape's reference plane, below the background's 1.0.
    pub depth: f64,
}

impl Shape {
    /// Surface distance at `(y, x)` when the point is covered.
    fn depth_at(&self, y: f64, x: f64) -> Option<f64> {
        let (dy, dx, r) = (y - self.cy, x - self.cx, self.size);
        match self.kind {
            ShapeKind::Circle => {
                let rho2 = (dy * dy + dx * dx) / (r * r);
                (rho2 <= 1.0).then(|| self.depth - 0.1 * (1.0 - rho2).sqrt())
            }
            ShapeKind::Square => (dy.abs() <= r && dx.abs() <= r).then_some(self.depth),
            ShapeKind::Triangle => {
                (dy.abs() <= r && dx.abs() <= (dy + r) / 2.0).then(|| self.depth + 0.05 * dy / r)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    /// `3×S×S` in `[0, 1]`.
    pub image: Tensor<f32>,
    /// `1×S×S`.
    pub depth: Tensor<f32>,
    pub seg: Vec<usize>,
    /// Shape type covering the most pixels.
    pub label: usize,
}

/// Rasterizes `shapes` with nearest-surface visibility.
pub fn render_scene(shapes: &[Shape], size: usize, background: [f32; 3]) -> RenderedScene {
    let n = size * size;
    let mut image = vec![0f32; 3 * n];
    let mut depth = vec![BACKGROUND_DEPTH as f32; n];
    let mut seg = vec![0usize; n];
    let mut area = [0usize; SHAPE_CLASSES];
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            let mut best: Option<(f64, &Shape)> = None;
            for s in shapes {
                if let Some(d) = s.depth_at(py, px) {
                    if best.is_none_or(|(bd, _)| d < bd) {
                        best = Some((d, s));
                    }
                }
            }
            let i = y * size + x;
            let color = match best {
                Some((d, s)) => {
                    depth[i] = d as f32;
                    seg[i] = s.kind.seg_id();
                    area[s.kind.class()] += 1;
                    s.color
                }
                None => background,
            };
            for c in 0..3 {
                image[c * n + i] = color[c];
            }
        }
    }
    let label = (0..SHAPE_CLASSES).fold(0, |best, k| if area[k] > area[best] { k } else { best });
    RenderedScene {
        image: Tensor::from_parts(vec![3, size, size], image),
        depth: Tensor::from_parts(vec![1, size, size], depth),
        seg,
        label,
    }
}

fn random_scene(size: usize, max_shapes: usize, rng: &mut ChaCha8Rng) -> RenderedScene {
    let s = size as f64;
    let count = rng.gen_range(1..=max_shapes);
    let shapes: Vec<Shape> = (0..count)
        .map(|_| {
            let kind = ShapeKind::ALL[rng.gen_range(0..SHAPE_CLASSES)];
            let r = rng.gen_range(s / 8.0..s / 3.5);
            Shape {
                kind,
                cy: rng.gen_range(r * 0.5..s - r * 0.5),
                cx: rng.gen_range(r * 0.5..s - r * 0.5),
                size: r,
                color: [0; 3].map(|_| rng.gen_range(0.35..1.0)),
                depth: rng.gen_range(0.3..0.85),
            }
        })
        .collect();
    let base = rng.gen_range(0.0..0.25f32);
    let background = [0; 3].map(|_| base + rng.gen_range(0.0..0.05f32));
    render_scene(&shapes, size, background)
}

/// Classification scenes hold a single shape so the label is never a near
/// tie between overlapping shapes; dense-target scenes hold up to three.
fn max_shapes(task: Task) -> usize {
    match task {
        Task::Classify => 1,
        _ => 3,
    }
}

fn render_split(task: Task, n: usize, size: usize, seed: u64) -> Vec<RenderedScene> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| random_scene(size, max_shapes(task), &mut rng)).collect()
}

/// Seed of the held-out split.
fn test_seed(seed: u64) -> u64 {
    seed ^ 0x9e37_79b9_7f4a_7c15
}

fn to_sample(task: Task, scene: &RenderedScene, norm: &Normalization) -> Sample {
    Sample {
        image: norm.apply(&scene.image),
        label: (task == Task::Classify).then_some(scene.label),
        depth: (task == Task::Depth).then(|| scene.depth.clone()),
        seg: (task == Task::Seg).then(|| scene.seg.clone()),
    }
}

fn dataset(task: Task, scenes: &[RenderedScene], norm: &Normalization) -> Dataset {
    Dataset {
        task,
        samples: scenes.iter().map(|s| to_sample(task, s, norm)).collect(),
        num_classes: SHAPE_CLASSES,
        seg_classes: SEG_CLASSES,
    }
}

fn check_request(n_train: usize, size: usize) -> Result<()> {
    if n_train == 0 {
        return Err(Error::Dataset("at least one training sample is required".into()));
    }
    if size == 0 {
        return Err(Error::Geometry("image size must be positive".into()));
    }
    Ok(())
}

/// In-memory train and test splits, identical to loading the files written
/// by [`gen_synthetic`] with the same arguments.
pub fn synthetic_dataset(task: Task, n_train: usize, n_test: usize, size: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    check_request(n_train, size)?;
    let train = render_split(task, n_train, size, seed);
    let test = render_split(task, n_test, size, test_seed(seed));
    let norm = Normalization::from_images(train.iter().map(|s| &s.image));
    Ok((dataset(task, &train, &norm), dataset(task, &test, &norm)))
}

/// Renders `train` and `test` splits into `dir` and writes
/// `dir/manifest.json`.
pub fn gen_synthetic(task: Task, n_train: usize, n_test: usize, size: usize, seed: u64, dir: &Path) -> Result<Manifest> {
    check_request(n_train, size)?;
    let train = render_split(task, n_train, size, seed);
    let test = render_split(task, n_test, size, test_seed(seed));
    let norm = Normalization::from_images(train.iter().map(|s| &s.image));
    let mut splits = BTreeMap::new();
    for (name, scenes) in [("train", &train), ("test", &test)] {
        std::fs::create_dir_all(dir.join(name))?;
        let mut entries = Vec::with_capacity(scenes.len());
        for (i, s) in scenes.iter().enumerate() {
            let stem = format!("{name}/{i:06}");
            let image = format!("{stem}.img.tnsr");
            write_tensor(&dir.join(&image), &s.image)?;
            let mut entry = Entry {
                image,
                label: None,
                depth: None,
                seg: None,
            };
            match task {
                Task::Ar => {}
                Task::Classify => entry.label = Some(s.label),
                Task::Depth => {
                    let p = format!("{stem}.depth.tnsr");
                    write_tensor(&dir.join(&p), &s.depth)?;
                    entry.depth = Some(p);
                }
                Task::Seg => {
                    let p = format!("{stem}.seg.tnsr");
                    let ids = Tensor::from_parts(vec![size, size], s.seg.iter().map(|&v| v as f32).collect());
                    write_tensor(&dir.join(&p), &ids)?;
                    entry.seg = Some(p);
                }
            }
            entries.push(entry);
        }
        splits.insert(name.to_string(), entries);
    }
    let manifest = Manifest {
        task,
        root: ".".into(),
        channels: 3,
        height: size,
        width: size,
        num_classes: SHAPE_CLASSES,
        seg_classes: SEG_CLASSES,
        normalization: norm,
        splits,
        base_dir: dir.to_path_buf(),
    };
    manifest.save(&dir.join("manifest.json"))?;
    Ok(manifest)
}
