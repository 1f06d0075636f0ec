//! Random resized crop and horizontal flip, applied jointly to an image and
//! its dense targets.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Range of the crop area as a fraction of the image area.
    pub scale_min: f64,
    pub scale_max: f64,
    /// Range of the crop aspect ratio (width / height).
    pub ratio_min: f64,
    pub ratio_max: f64,
    pub flip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            scale_min: 0.2,
            scale_max: 1.0,
            ratio_min: 3.0 / 4.0,
            ratio_max: 4.0 / 3.0,
            flip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max <= 1.0) {
            v.push(format!(
                "augment scale range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.scale_min, self.scale_max
            ));
        }
        if !(self.ratio_min > 0.0 && self.ratio_min <= self.ratio_max) {
            v.push(format!("augment ratio range [{}, {}] is invalid", self.ratio_min, self.ratio_max));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            v.push(format!("augment flip_prob {} must lie in [0, 1]", self.flip_prob));
        }
        v
    }
}

/// A concrete crop window plus flip decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropFlip {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
    pub flip: bool,
}

impl CropFlip {
    pub fn identity(h: usize, w: usize) -> Self {
        Self {
            y0: 0,
            x0: 0,
            h,
            w,
            flip: false,
        }
    }

    /// Samples a window of a `height × width` image.
    pub fn sample(cfg: &AugmentConfig, height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let area = (height * width) as f64;
        let (lr_min, lr_max) = (cfg.ratio_min.ln(), cfg.ratio_max.ln());
        let mut window = None;
        for _ in 0..10 {
            let target = area * rng.gen_range(cfg.scale_min..=cfg.scale_max);
            let ratio = if lr_max > lr_min {
                rng.gen_range(lr_min..lr_max).exp()
            } else {
                cfg.ratio_min
            };
            let w = (target * ratio).sqrt().round() as usize;
            let h = (target / ratio).sqrt().round() as usize;
            if (1..=width).contains(&w) && (1..=height).contains(&h) {
                let y0 = rng.gen_range(0..=height - h);
                let x0 = rng.gen_range(0..=width - w);
                window = Some((y0, x0, h, w));
                break;
            }
        }
        let (y0, x0, h, w) = window.unwrap_or((0, 0, height, width));
        let flip = rng.gen_bool(cfg.flip_prob);
        Self { y0, x0, h, w, flip }
    }

    fn check(&self, height: usize, width: usize) -> Result<()> {
        if self.h == 0 || self.w == 0 || self.y0 + self.h > height || self.x0 + self.w > width {
            return Err(Error::Geometry(format!(
                "crop {}×{} at ({}, {}) exceeds {height}×{width} image",
                self.h, self.w, self.y0, self.x0
            )));
        }
        Ok(())
    }

    /// Source coordinate of output pixel `i` along an axis.
    fn source(i: usize, out: usize, crop: usize, start: usize) -> f64 {
        (i as f64 + 0.5) * crop as f64 / out as f64 - 0.5 + start as f64
    }

    /// Bilinear crop-resize of a `C×H×W` map to `C×out_h×out_w`, then flip.
    pub fn apply<T: Real>(&self, img: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
        let &[c, h, w] = img.shape() else {
            return Err(Error::Geometry(format!("expected C×H×W image, got {:?}", img.shape())));
        };
        self.check(h, w)?;
        let axis = |out: usize, crop: usize, start: usize, limit: usize| -> Vec<(usize, usize, T)> {
            (0..out)
                .map(|i| {
                    let s = Self::source(i, out, crop, start).clamp(0.0, (limit - 1) as f64);
                    let lo = s.floor() as usize;
                    let hi = (lo + 1).min(limit - 1);
                    (lo, hi, T::of_f64(s - lo as f64))
                })
                .collect()
        };
        let ys = axis(out_h, self.h, self.y0, h);
        let mut xs = axis(out_w, self.w, self.x0, w);
        if self.flip {
            xs.reverse();
        }
        let src = img.data();
        let mut out = Vec::with_capacity(c * out_h * out_w);
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            for &(y0, y1, fy) in &ys {
                for &(x0, x1, fx) in &xs {
                    let top = plane[y0 * w + x0] + (plane[y0 * w + x1] - plane[y0 * w + x0]) * fx;
                    let bot = plane[y1 * w + x0] + (plane[y1 * w + x1] - plane[y1 * w + x0]) * fx;
                    out.push(top + (bot - top) * fy);
                }
            }
        }
        Tensor::new(vec![c, out_h, out_w], out)
    }

    /// Nearest-neighbour crop-resize of an `H×W` label map, then flip.
    pub fn apply_labels(&self, labels: &[usize], h: usize, w: usize, out_h: usize, out_w: usize) -> Result<Vec<usize>> {
        if labels.len() != h * w {
            return Err(Error::dim("augment labels", format!("{} labels for {h}×{w}", labels.len())));
        }
        self.check(h, w)?;
        let near = |i: usize, out: usize, crop: usize, start: usize, limit: usize| {
            (Self::source(i, out, crop, start).round().max(0.0) as usize).min(limit - 1)
        };
        let mut out = Vec::with_capacity(out_h * out_w);
        for i in 0..out_h {
            let y = near(i, out_h, self.h, self.y0, h);
            for j in 0..out_w {
                let jj = if self.flip { out_w - 1 - j } else { j };
                let x = near(jj, out_w, self.w, self.x0, w);
                out.push(labels[y * w + x]);
            }
        }
        Ok(out)
    }
}

/// Random resized crop back to the input size plus random horizontal flip.
pub fn augment<T: Real>(img: &Tensor<T>, cfg: &AugmentConfig, rng: &mut impl Rng) -> Result<Tensor<T>> {
    let &[_, h, w] = img.shape() else {
        return Err(Error::Geometry(format!("expected C×H×W image, got {:?}", img.shape())));
    };
    CropFlip::sample(cfg, h, w, rng).apply(img, h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, 8, 12], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn double_flip_is_identity() {
        let img = image(0);
        let f = CropFlip {
            flip: true,
            ..CropFlip::identity(8, 12)
        };
        let once = f.apply(&img, 8, 12).unwrap();
        assert_ne!(once, img);
        assert_eq!(f.apply(&once, 8, 12).unwrap(), img);
        let labels: Vec<usize> = (0..96).collect();
        let l1 = f.apply_labels(&labels, 8, 12, 8, 12).unwrap();
        assert_eq!(f.apply_labels(&l1, 8, 12, 8, 12).unwrap(), labels);
    }

    #[test]
    fn full_crop_without_flip_is_identity() {
        let img = image(1);
        assert_eq!(CropFlip::identity(8, 12).apply(&img, 8, 12).unwrap(), img);
        let cfg = AugmentConfig {
            scale_min: 1.0,
            ratio_min: 1.5,
            ratio_max: 1.5,
            flip_prob: 0.0,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        assert_eq!(augment(&img, &cfg, &mut rng).unwrap(), img);
    }

    #[test]
    fn seeded_runs_are_identical() {
        let img = image(3);
        let cfg = AugmentConfig::default();
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            (0..5).map(|_| augment(&img, &cfg, &mut rng).unwrap()).collect::<Vec<_>>()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.iter().any(|t| t != &img));
    }

    #[test]
    fn oversized_crop_is_rejected() {
        let img = image(5);
        let f = CropFlip {
            y0: 2,
            x0: 0,
            h: 8,
            w: 4,
            flip: false,
        };
        assert!(matches!(f.apply(&img, 8, 12), Err(Error::Geometry(_))));
    }

    #[test]
    fn labels_follow_the_crop() {
        let labels: Vec<usize> = (0..16).collect();
        let f = CropFlip {
            y0: 2,
            x0: 2,
            h: 2,
            w: 2,
            flip: false,
        };
        assert_eq!(f.apply_labels(&labels, 4, 4, 2, 2).unwrap(), vec![10, 11, 14, 15]);
    }
}
