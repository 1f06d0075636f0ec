//! Image → patch grid → serialized, cluster-grouped token sequence.
//!
//! Patch vectors are laid out `(row, col, channel)` with channel fastest.
//! Clusters are rectangular groups of `cluster_h × cluster_w` patches; the
//! serialization permutation visits clusters in the configured order and the
//! patches inside each cluster in raster order.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor, Var};

/// Non-overlapping `P×P` patches of one image, in raster order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchGrid<T> {
    /// `N × (C·P·P)`.
    pub patches: Tensor<T>,
    pub grid_h: usize,
    pub grid_w: usize,
    pub patch: usize,
    pub channels: usize,
}

impl<T: Real> PatchGrid<T> {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch * self.patch
    }
}

/// Splits a `C×H×W` image into raster-ordered patch vectors.
pub fn patchify<T: Real>(img: &Tensor<T>, patch: usize) -> Result<PatchGrid<T>> {
    let &[c, h, w] = img.shape() else {
        return Err(Error::Geometry(format!("expected C×H×W image, got {:?}", img.shape())));
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Geometry(format!(
            "{h}×{w} image is not divisible into {patch}×{patch} patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let pd = c * patch * patch;
    let src = img.data();
    let mut out = Vec::with_capacity(gh * gw * pd);
    for gy in 0..gh {
        for gx in 0..gw {
            for py in 0..patch {
                for px in 0..patch {
                    let (y, x) = (gy * patch + py, gx * patch + px);
                    for ch in 0..c {
                        out.push(src[(ch * h + y) * w + x]);
                    }
                }
            }
        }
    }
    Ok(PatchGrid {
        patches: Tensor::matrix(gh * gw, pd, out)?,
        grid_h: gh,
        grid_w: gw,
        patch,
        channels: c,
    })
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Real>(
    grid: &PatchGrid<T>,
    patch: usize,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<Tensor<T>> {
    let pd = channels * patch * patch;
    if patch == 0
        || grid.patch != patch
        || grid.channels != channels
        || grid.grid_h * patch != height
        || grid.grid_w * patch != width
        || grid.patches.shape() != [grid.grid_h * grid.grid_w, pd]
    {
        return Err(Error::Geometry(format!(
            "patch grid {}×{} (P={}, C={}) does not tile a {channels}×{height}×{width} image with P={patch}",
            grid.grid_h, grid.grid_w, grid.patch, grid.channels
        )));
    }
    let mut out = vec![T::zero(); channels * height * width];
    let src = grid.patches.data();
    let mut k = 0;
    for gy in 0..grid.grid_h {
        for gx in 0..grid.grid_w {
            for py in 0..patch {
                for px in 0..patch {
                    let (y, x) = (gy * patch + py, gx * patch + px);
                    for ch in 0..channels {
                        out[(ch * height + y) * width + x] = src[k];
                        k += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![channels, height, width], out)
}

/// Sequencing of the cluster grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Order {
    RowForward,
    RowBackward,
    ColForward,
    ColBackward,
    Random,
}

impl Order {
    pub const PREDEFINED: [Order; 4] = [
        Order::RowForward,
        Order::RowBackward,
        Order::ColForward,
        Order::ColBackward,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Order::RowForward => "row_forward",
            Order::RowBackward => "row_backward",
            Order::ColForward => "col_forward",
            Order::ColBackward => "col_backward",
            Order::Random => "random",
        }
    }
}

/// Cluster grouping of a patch grid plus its serialization permutation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterPlan {
    pub grid_h: usize,
    pub grid_w: usize,
    pub cluster_h: usize,
    pub cluster_w: usize,
    pub order: Order,
    pub seed: Option<u64>,
    /// Serialized slot → raster patch index.
    pub perm: Arc<Vec<usize>>,
    /// Raster patch index → cluster id; ids count clusters in serialized order.
    pub cluster_of: Vec<usize>,
    pub num_clusters: usize,
}

impl ClusterPlan {
    pub fn len(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Patches per cluster.
    pub fn cluster_len(&self) -> usize {
        self.cluster_h * self.cluster_w
    }

    /// Cluster id of the token at serialized slot `slot`.
    pub fn slot_cluster(&self, slot: usize) -> usize {
        slot / self.cluster_len()
    }

    /// Serialized slots of cluster `k`.
    pub fn cluster_slots(&self, k: usize) -> std::ops::Range<usize> {
        k * self.cluster_len()..(k + 1) * self.cluster_len()
    }

    /// Raster index → serialized slot.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.perm.len()];
        for (slot, &p) in self.perm.iter().enumerate() {
            inv[p] = slot;
        }
        inv
    }
}

/// Groups the patch grid into clusters and serializes them in `order`.
///
/// `seed` is required for [`Order::Random`] and ignored otherwise.
pub fn build_cluster_plan(
    grid_h: usize,
    grid_w: usize,
    cluster_h: usize,
    cluster_w: usize,
    order: Order,
    seed: Option<u64>,
) -> Result<ClusterPlan> {
    if grid_h == 0 || grid_w == 0 || cluster_h == 0 || cluster_w == 0 {
        return Err(Error::Geometry("zero grid or cluster extent".into()));
    }
    if grid_h % cluster_h != 0 || grid_w % cluster_w != 0 {
        return Err(Error::Geometry(format!(
            "{grid_h}×{grid_w} patch grid is not divisible into {cluster_h}×{cluster_w} clusters"
        )));
    }
    let (kh, kw) = (grid_h / cluster_h, grid_w / cluster_w);
    let mut cells: Vec<(usize, usize)> = match order {
        Order::RowForward | Order::Random => (0..kh).flat_map(|r| (0..kw).map(move |c| (r, c))).collect(),
        Order::RowBackward => (0..kh).flat_map(|r| (0..kw).rev().map(move |c| (r, c))).collect(),
        Order::ColForward => (0..kw).flat_map(|c| (0..kh).map(move |r| (r, c))).collect(),
        Order::ColBackward => (0..kw).flat_map(|c| (0..kh).rev().map(move |r| (r, c))).collect(),
    };
    let seed = match order {
        Order::Random => {
            let s = seed.ok_or_else(|| Error::Geometry("random order requires a seed".into()))?;
            cells.shuffle(&mut ChaCha8Rng::seed_from_u64(s));
            Some(s)
        }
        _ => None,
    };
    let mut perm = Vec::with_capacity(grid_h * grid_w);
    let mut cluster_of = vec![0; grid_h * grid_w];
    for (k, &(cr, cc)) in cells.iter().enumerate() {
        for dy in 0..cluster_h {
            for dx in 0..cluster_w {
                let p = (cr * cluster_h + dy) * grid_w + cc * cluster_w + dx;
                perm.push(p);
                cluster_of[p] = k;
            }
        }
    }
    Ok(ClusterPlan {
        grid_h,
        grid_w,
        cluster_h,
        cluster_w,
        order,
        seed,
        perm: Arc::new(perm),
        cluster_of,
        num_clusters: kh * kw,
    })
}

/// Embedded tokens in serialized order.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T> {
    /// `N × D`; row `i` belongs to raster patch `perm[i]`.
    pub tokens: Tensor<T>,
}

/// Records `s_i = x_{perm[i]} · W + E_pos[perm[i]]` on the tape.
///
/// `patches` is the raster-ordered `N × (C·P·P)` patch matrix, `weight` is
/// `(C·P·P) × D` and `pos` is `N × D`, indexed by raster location.
pub fn embed_on_tape<T: Real>(
    tape: &mut Tape<T>,
    patches: Var,
    plan: &ClusterPlan,
    weight: Var,
    pos: Var,
) -> Result<Var> {
    let n = plan.len();
    if tape.value(patches).rows() != n || tape.value(pos).rows() != n {
        return Err(Error::dim(
            "embed",
            format!(
                "{} patches and {} positions for a plan of {n}",
                tape.value(patches).rows(),
                tape.value(pos).rows()
            ),
        ));
    }
    let x = tape.gather_rows(patches, plan.perm.clone())?;
    let proj = tape.matmul(x, weight)?;
    let p = tape.gather_rows(pos, plan.perm.clone())?;
    tape.add(proj, p)
}

/// Tape-free form of [`embed_on_tape`].
pub fn embed<T: Real>(
    grid: &PatchGrid<T>,
    plan: &ClusterPlan,
    weight: &Tensor<T>,
    pos: &Tensor<T>,
) -> Result<TokenSequence<T>> {
    let mut tape = Tape::new();
    let x = tape.input(grid.patches.clone());
    let w = tape.input(weight.clone());
    let p = tape.input(pos.clone());
    let out = embed_on_tape(&mut tape, x, plan, w, p)?;
    Ok(TokenSequence {
        tokens: tape.value(out).clone(),
    })
}

/// How regression targets are scaled before the loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TargetNorm {
    /// Each patch standardized to zero mean and unit variance.
    #[default]
    PerPatch,
    Raw,
}

/// Standardizes every row of a patch matrix.
pub fn normalize_patches<T: Real>(patches: &Tensor<T>) -> Tensor<T> {
    let d = patches.cols();
    let dn = T::from_usize(d).unwrap();
    let eps = T::of_f64(1e-6);
    let mut out = patches.data().to_vec();
    for row in out.chunks_mut(d) {
        let mean = row.iter().copied().sum::<T>() / dn;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
        let inv = T::one() / (var + eps).sqrt();
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    Tensor::from_parts(patches.shape().to_vec(), out)
}

/// Per-slot regression targets: `N × (C·P·P)` in serialized order.
pub fn slot_targets<T: Real>(grid: &PatchGrid<T>, plan: &ClusterPlan, norm: TargetNorm) -> Result<Tensor<T>> {
    check_plan(grid, plan)?;
    let src = match norm {
        TargetNorm::PerPatch => normalize_patches(&grid.patches),
        TargetNorm::Raw => grid.patches.clone(),
    };
    let pd = grid.patch_dim();
    let mut out = Vec::with_capacity(src.len());
    for &p in plan.perm.iter() {
        out.extend_from_slice(src.row(p));
    }
    Tensor::matrix(plan.len(), pd, out)
}

/// Concatenated raw pixels of each cluster in serialized order:
/// `K × (cluster_len · C·P·P)`.
pub fn cluster_targets<T: Real>(grid: &PatchGrid<T>, plan: &ClusterPlan) -> Result<Tensor<T>> {
    let slots = slot_targets(grid, plan, TargetNorm::Raw)?;
    slots.reshape(&[plan.num_clusters, plan.cluster_len() * grid.patch_dim()])
}

fn check_plan<T: Real>(grid: &PatchGrid<T>, plan: &ClusterPlan) -> Result<()> {
    if grid.grid_h != plan.grid_h || grid.grid_w != plan.grid_w {
        return Err(Error::Geometry(format!(
            "plan for {}×{} grid applied to {}×{} grid",
            plan.grid_h, plan.grid_w, grid.grid_h, grid.grid_w
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[c, h, w], |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn patch_counts() {
        let g = patchify(&Tensor::<f32>::zeros(&[3, 192, 192]), 16).unwrap();
        assert_eq!(g.len(), 144);
        let g = patchify(&Tensor::<f32>::zeros(&[3, 224, 224]), 16).unwrap();
        assert_eq!(g.len(), 196);
    }

    #[test]
    fn unit_patches_are_pixels() {
        let img = Tensor::<f32>::new(vec![1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let g = patchify(&img, 1).unwrap();
        assert_eq!(g.patches.data(), &[1., 2., 3., 4.]);
        assert_eq!(g.patches.shape(), &[4, 1]);
    }

    #[test]
    fn patchify_rejects_ragged_geometry() {
        assert!(matches!(
            patchify(&Tensor::<f32>::zeros(&[1, 10, 12]), 4),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn roundtrips_are_bit_identical() {
        for (c, h, p) in [(3, 32, 8), (3, 192, 16), (2, 4, 4)] {
            let img = random_image(c, h, h, h as u64);
            let g = patchify(&img, p).unwrap();
            assert_eq!(unpatchify(&g, p, c, h, h).unwrap(), img);
        }
    }

    #[test]
    fn unpatchify_rejects_mismatch() {
        let g = patchify(&random_image(3, 8, 8, 1), 4).unwrap();
        assert!(unpatchify(&g, 4, 3, 8, 12).is_err());
        assert!(unpatchify(&g, 2, 3, 8, 8).is_err());
    }

    #[test]
    fn cluster_counts() {
        assert_eq!(build_cluster_plan(12, 12, 4, 4, Order::RowForward, None).unwrap().num_clusters, 9);
        assert_eq!(build_cluster_plan(12, 12, 1, 1, Order::RowForward, None).unwrap().num_clusters, 144);
        assert!(build_cluster_plan(12, 12, 5, 4, Order::RowForward, None).is_err());
    }

    #[test]
    fn small_orders() {
        let perm = |o| build_cluster_plan(2, 2, 1, 1, o, Some(0)).unwrap().perm.to_vec();
        assert_eq!(perm(Order::RowForward), vec![0, 1, 2, 3]);
        assert_eq!(perm(Order::ColForward), vec![0, 2, 1, 3]);
        assert_eq!(perm(Order::RowBackward), vec![1, 0, 3, 2]);
        assert_eq!(perm(Order::ColBackward), vec![2, 0, 3, 1]);
    }

    #[test]
    fn random_requires_seed() {
        assert!(build_cluster_plan(4, 4, 2, 2, Order::Random, None).is_err());
    }

    #[test]
    fn clusters_are_raster_inside() {
        let plan = build_cluster_plan(4, 4, 2, 2, Order::RowForward, None).unwrap();
        assert_eq!(&plan.perm[..8], &[0, 1, 4, 5, 2, 3, 6, 7]);
    }

    #[test]
    fn row_backward_reverses_clusters_within_rows() {
        let fwd = build_cluster_plan(6, 8, 2, 2, Order::RowForward, None).unwrap();
        let bwd = build_cluster_plan(6, 8, 2, 2, Order::RowBackward, None).unwrap();
        let s = fwd.cluster_len();
        let per_row = 4;
        for row in 0..3 {
            for j in 0..per_row {
                let f = row * per_row + j;
                let b = row * per_row + (per_row - 1 - j);
                assert_eq!(fwd.perm[f * s..(f + 1) * s], bwd.perm[b * s..(b + 1) * s]);
            }
        }
    }

    #[test]
    fn embed_zero_weights() {
        let grid = patchify(&random_image(1, 4, 4, 2), 2).unwrap();
        let plan = build_cluster_plan(2, 2, 1, 1, Order::ColForward, None).unwrap();
        let s = embed(&grid, &plan, &Tensor::zeros(&[4, 3]), &Tensor::zeros(&[4, 3])).unwrap();
        assert!(s.tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embed_identity_on_pixels() {
        let img = random_image(1, 3, 3, 5);
        let grid = patchify(&img, 1).unwrap();
        let plan = build_cluster_plan(3, 3, 1, 1, Order::RowForward, None).unwrap();
        let s = embed(&grid, &plan, &Tensor::full(&[1, 1], 1.0), &Tensor::zeros(&[9, 1])).unwrap();
        assert_eq!(s.tokens.data(), img.data());
    }

    #[test]
    fn embed_matches_per_token_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let grid = patchify(&random_image(2, 8, 8, 3), 2).unwrap();
        let plan = build_cluster_plan(4, 4, 2, 2, Order::ColBackward, None).unwrap();
        let (pd, d) = (8, 5);
        let w = Tensor::<f32>::from_fn(&[pd, d], |_| rng.gen_range(-1.0..1.0));
        let pos = Tensor::<f32>::from_fn(&[16, d], |_| rng.gen_range(-1.0..1.0));
        let s = embed(&grid, &plan, &w, &pos).unwrap();
        for (slot, &p) in plan.perm.iter().enumerate() {
            for j in 0..d {
                let mut acc = 0.0f32;
                for k in 0..pd {
                    acc += grid.patches.at(&[p, k]) * w.at(&[k, j]);
                }
                acc += pos.at(&[p, j]);
                assert!((s.tokens.at(&[slot, j]) - acc).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn cluster_target_geometry() {
        let grid = patchify(&Tensor::<f32>::zeros(&[3, 192, 192]), 16).unwrap();
        let plan = build_cluster_plan(12, 12, 4, 4, Order::RowForward, None).unwrap();
        let t = cluster_targets(&grid, &plan).unwrap();
        assert_eq!(t.shape(), &[9, 16 * 16 * 16 * 3]);
    }

    #[test]
    fn unit_cluster_targets_are_patches() {
        let grid = patchify(&random_image(3, 8, 8, 4), 4).unwrap();
        let plan = build_cluster_plan(2, 2, 1, 1, Order::RowForward, None).unwrap();
        assert_eq!(cluster_targets(&grid, &plan).unwrap(), grid.patches);
    }

    #[test]
    fn constant_image_gives_constant_targets() {
        let grid = patchify(&Tensor::<f32>::full(&[1, 8, 8], 0.25), 2).unwrap();
        let plan = build_cluster_plan(4, 4, 2, 2, Order::Random, Some(3)).unwrap();
        let t = cluster_targets(&grid, &plan).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.25));
    }

    fn any_order() -> impl Strategy<Value = Order> {
        prop_oneof![
            Just(Order::RowForward),
            Just(Order::RowBackward),
            Just(Order::ColForward),
            Just(Order::ColBackward),
            Just(Order::Random),
        ]
    }

    proptest! {
        #[test]
        fn perm_is_bijection_with_contiguous_clusters(
            kh in 1usize..5, kw in 1usize..5, ch in 1usize..4, cw in 1usize..4,
            order in any_order(), seed in any::<u64>(),
        ) {
            let plan = build_cluster_plan(kh * ch, kw * cw, ch, cw, order, Some(seed)).unwrap();
            let mut sorted = plan.perm.to_vec();
            sorted.sort_unstable();
            prop_assert_eq!(sorted, (0..plan.len()).collect::<Vec<_>>());
            for k in 0..plan.num_clusters {
                for slot in plan.cluster_slots(k) {
                    prop_assert_eq!(plan.cluster_of[plan.perm[slot]], k);
                }
            }
            let again = build_cluster_plan(kh * ch, kw * cw, ch, cw, order, Some(seed)).unwrap();
            prop_assert_eq!(plan, again);
        }

        #[test]
        fn embed_is_permutation_consistent(seed in any::<u64>()) {
            // Relabel raster positions by a random permutation sigma; applying
            // sigma to patches, positions and the plan leaves tokens unchanged.
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let grid = patchify(&random_image(1, 4, 4, seed), 1).unwrap();
            let plan = build_cluster_plan(4, 4, 2, 2, Order::RowForward, None).unwrap();
            let w = Tensor::<f32>::from_fn(&[1, 3], |_| rng.gen_range(-1.0..1.0));
            let pos = Tensor::<f32>::from_fn(&[16, 3], |_| rng.gen_range(-1.0..1.0));
            let mut sigma: Vec<usize> = (0..16).collect();
            sigma.shuffle(&mut rng);
            let mut patches = vec![0.0; 16];
            let mut pos2 = vec![0.0; 48];
            for p in 0..16 {
                patches[sigma[p]] = grid.patches.data()[p];
                pos2[sigma[p] * 3..sigma[p] * 3 + 3].copy_from_slice(pos.row(p));
            }
            let grid2 = PatchGrid { patches: Tensor::matrix(16, 1, patches).unwrap(), ..grid.clone() };
            let mut plan2 = plan.clone();
            plan2.perm = Arc::new(plan.perm.iter().map(|&p| sigma[p]).collect());
            let a = embed(&grid, &plan, &w, &pos).unwrap();
            let b = embed(&grid2, &plan2, &w, &Tensor::matrix(16, 3, pos2).unwrap()).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
