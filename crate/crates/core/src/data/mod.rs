//! Datasets: manifests, sample decoding and synthetic scene generation.

mod manifest;
pub mod png;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::numerics::Tensor;

pub use manifest::{load_dataset, load_sample, Entry, Manifest, Normalization};
pub use synthetic::{
    gen_synthetic, render_scene, synthetic_dataset, RenderedScene, Shape, ShapeKind, SEG_CLASSES, SHAPE_CLASSES,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Ar,
    Depth,
    Seg,
    Classify,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Ar => "ar",
            Task::Depth => "depth",
            Task::Seg => "seg",
            Task::Classify => "classify",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ar" => Some(Task::Ar),
            "depth" => Some(Task::Depth),
            "seg" => Some(Task::Seg),
            "classify" => Some(Task::Classify),
            _ => None,
        }
    }
}

/// One decoded, normalized sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `C×H×W`.
    pub image: Tensor<f32>,
    pub label: Option<usize>,
    /// `1×H×W`.
    pub depth: Option<Tensor<f32>>,
    /// `H·W` class ids, row-major.
    pub seg: Option<Vec<usize>>,
}

/// Samples of one split held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: Task,
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    pub seg_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}
