//! Attention content masks and masked-position selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::serialize::ClusterPlan;

/// `N×N` additive attention mask with entries in `{0, -inf}`, stored as an
/// allow-matrix. Row `i` lists which columns token `i` may attend to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    n: usize,
    allowed: Vec<bool>,
}

impl AttnMask {
    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Result<Self> {
        if n == 0 {
            return Err(Error::EmptySequence);
        }
        let allowed = (0..n * n).map(|k| f(k / n, k % n)).collect();
        Ok(Self { n, allowed })
    }

    /// Mask with every entry open.
    pub fn full(n: usize) -> Result<Self> {
        Self::from_fn(n, |_, _| true)
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.n + j]
    }

    pub fn zero_count(&self) -> usize {
        self.allowed.iter().filter(|&&a| a).count()
    }

    /// Additive form: `0` where allowed, `-inf` elsewhere.
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_fn(&[self.n, self.n], |k| {
            if self.allowed[k] {
                T::zero()
            } else {
                T::neg_infinity()
            }
        })
    }

    /// Rebuilds a mask from its additive form.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let &[n, m] = t.shape() else {
            return Err(Error::dim("attn mask", format!("{:?} is not square", t.shape())));
        };
        if n != m {
            return Err(Error::dim("attn mask", format!("{n}×{m} is not square")));
        }
        let mut allowed = Vec::with_capacity(n * n);
        for &v in t.data() {
            if v == T::zero() {
                allowed.push(true);
            } else if v == T::neg_infinity() {
                allowed.push(false);
            } else {
                return Err(Error::Decode(format!("mask entry {v} is neither 0 nor -inf")));
            }
        }
        Ok(Self { n, allowed })
    }
}

/// Token `i` attends to itself and every preceding token.
pub fn causal_content_mask(n: usize) -> Result<AttnMask> {
    AttnMask::from_fn(n, |i, j| j <= i)
}

/// Full attention inside a cluster, causal across clusters in serialized
/// order. Rows and columns index serialized slots.
pub fn cluster_block_mask(plan: &ClusterPlan) -> Result<AttnMask> {
    AttnMask::from_fn(plan.len(), |i, j| {
        plan.cluster_of[plan.perm[j]] <= plan.cluster_of[plan.perm[i]]
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// Individual positions; meaningful as pixel masking with 1-pixel patches.
    Pixel,
    Patch,
    Cluster,
}

/// Which serialized positions have their content hidden.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSelection {
    pub masked: Vec<bool>,
    pub ratio: f64,
    pub granularity: Granularity,
}

impl MaskSelection {
    pub fn count(&self) -> usize {
        self.masked.iter().filter(|&&m| m).count()
    }

    pub fn masked_slots(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| self.masked[i]).collect()
    }

    pub fn visible_slots(&self) -> Vec<usize> {
        (0..self.masked.len()).filter(|&i| !self.masked[i]).collect()
    }

    /// Nothing hidden.
    pub fn none(n: usize) -> Self {
        Self {
            masked: vec![false; n],
            ratio: 0.0,
            granularity: Granularity::Patch,
        }
    }
}

/// Number of positions masked for `ratio` of `n`: `floor(ratio · n)`.
pub fn masked_token_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64 + 1e-9).floor() as usize
}

/// Samples masked positions without replacement, deterministic in `seed`.
///
/// At cluster granularity whole clusters are drawn until at least the target
/// token count is covered.
pub fn ratio_selection(
    plan: &ClusterPlan,
    ratio: f64,
    granularity: Granularity,
    seed: u64,
) -> Result<MaskSelection> {
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::Selection(format!("ratio {ratio} outside (0, 1]")));
    }
    let n = plan.len();
    let target = masked_token_count(ratio, n);
    if target == 0 {
        return Err(Error::Selection(format!(
            "ratio {ratio} masks no token of a {n}-token sequence"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut masked = vec![false; n];
    match granularity {
        Granularity::Pixel | Granularity::Patch => {
            let mut slots: Vec<usize> = (0..n).collect();
            slots.shuffle(&mut rng);
            for &s in &slots[..target] {
                masked[s] = true;
            }
        }
        Granularity::Cluster => {
            let s = plan.cluster_len();
            let clusters = target.div_ceil(s).min(plan.num_clusters);
            let mut ids: Vec<usize> = (0..plan.num_clusters).collect();
            ids.shuffle(&mut rng);
            for &k in &ids[..clusters] {
                for slot in plan.cluster_slots(k) {
                    masked[slot] = true;
                }
            }
        }
    }
    Ok(MaskSelection {
        masked,
        ratio,
        granularity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::serialize::{build_cluster_plan, Order};
    use proptest::prelude::*;

    #[test]
    fn causal_small() {
        assert_eq!(causal_content_mask(1).unwrap().to_tensor::<f32>().data(), &[0.0]);
        let m = causal_content_mask(3).unwrap().to_tensor::<f64>();
        let ninf = f64::NEG_INFINITY;
        assert_eq!(m.data(), &[0., ninf, ninf, 0., 0., ninf, 0., 0., 0.]);
        assert!(matches!(causal_content_mask(0), Err(Error::EmptySequence)));
    }

    #[test]
    fn causal_zero_count() {
        for n in 1..=20 {
            assert_eq!(causal_content_mask(n).unwrap().zero_count(), n * (n + 1) / 2);
        }
    }

    #[test]
    fn two_clusters_of_two() {
        let plan = build_cluster_plan(1, 4, 1, 2, Order::RowForward, None).unwrap();
        let m = cluster_block_mask(&plan).unwrap();
        let expect = [
            [true, true, false, false],
            [true, true, false, false],
            [true, true, true, true],
            [true, true, true, true],
        ];
        for (i, row) in expect.iter().enumerate() {
            for (j, &e) in row.iter().enumerate() {
                assert_eq!(m.allows(i, j), e, "({i},{j})");
            }
        }
    }

    #[test]
    fn single_cluster_is_open() {
        let plan = build_cluster_plan(3, 3, 3, 3, Order::RowForward, None).unwrap();
        assert_eq!(cluster_block_mask(&plan).unwrap(), AttnMask::full(9).unwrap());
    }

    #[test]
    fn paper_ratio_counts() {
        let plan = build_cluster_plan(12, 12, 1, 1, Order::RowForward, None).unwrap();
        for (ratio, count) in [(0.01, 1), (0.10, 14), (0.20, 28), (0.30, 43), (0.50, 72), (0.70, 100)] {
            let sel = ratio_selection(&plan, ratio, Granularity::Patch, 1).unwrap();
            assert_eq!(sel.count(), count, "ratio {ratio}");
        }
        let all = ratio_selection(&plan, 1.0, Granularity::Patch, 1).unwrap();
        assert!(all.masked.iter().all(|&m| m));
    }

    #[test]
    fn ratio_errors() {
        let plan = build_cluster_plan(2, 2, 1, 1, Order::RowForward, None).unwrap();
        assert!(ratio_selection(&plan, 0.1, Granularity::Patch, 0).is_err());
        assert!(ratio_selection(&plan, 0.0, Granularity::Patch, 0).is_err());
        assert!(ratio_selection(&plan, 1.5, Granularity::Patch, 0).is_err());
    }

    #[test]
    fn mask_tensor_roundtrip() {
        let m = causal_content_mask(5).unwrap();
        assert_eq!(AttnMask::from_tensor(&m.to_tensor::<f32>()).unwrap(), m);
    }

    proptest! {
        #[test]
        fn causal_is_unit_cluster_block(n in 1usize..40, transpose in any::<bool>()) {
            let (h, w) = if transpose { (n, 1) } else { (1, n) };
            let plan = build_cluster_plan(h, w, 1, 1, Order::RowForward, None).unwrap();
            prop_assert_eq!(cluster_block_mask(&plan).unwrap(), causal_content_mask(n).unwrap());
        }

        #[test]
        fn no_future_cluster_leak(kh in 1usize..4, kw in 1usize..4, ch in 1usize..3, cw in 1usize..3, seed in any::<u64>()) {
            let plan = build_cluster_plan(kh * ch, kw * cw, ch, cw, Order::Random, Some(seed)).unwrap();
            let m = cluster_block_mask(&plan).unwrap();
            for i in 0..plan.len() {
                prop_assert!(m.allows(i, i));
                for j in 0..plan.len() {
                    if plan.slot_cluster(j) > plan.slot_cluster(i) {
                        prop_assert!(!m.allows(i, j));
                    }
                }
            }
        }

        #[test]
        fn selection_is_reproducible_and_cluster_aligned(ratio in 0.05f64..=1.0, seed in any::<u64>()) {
            let plan = build_cluster_plan(6, 6, 2, 3, Order::RowForward, None).unwrap();
            let a = ratio_selection(&plan, ratio, Granularity::Cluster, seed);
            let b = ratio_selection(&plan, ratio, Granularity::Cluster, seed);
            prop_assert_eq!(&a.as_ref().ok(), &b.as_ref().ok());
            if let Ok(sel) = a {
                prop_assert!(sel.count() >= masked_token_count(ratio, 36));
                for k in 0..plan.num_clusters {
                    let first = sel.masked[plan.cluster_slots(k).start];
                    prop_assert!(plan.cluster_slots(k).all(|s| sel.masked[s] == first));
                }
            }
            let patch = ratio_selection(&plan, ratio, Granularity::Patch, seed);
            if let Ok(sel) = patch {
                prop_assert_eq!(sel.count(), masked_token_count(ratio, 36));
            }
        }
    }
}
