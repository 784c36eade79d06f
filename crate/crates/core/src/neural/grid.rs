//! Voxel-indexed anchor storage with object-ID-preserving growth and pruning.

use std::collections::{BTreeMap, HashMap};

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::scene::{Anchor, LabeledPointCloud};
use crate::voting::{majority_vote, VoteTally};

pub type VoxelKey = [i64; 3];

/// How a newly grown anchor's feature vector starts out.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GrowFeatureInit {
    #[default]
    Zero,
    CopyParent,
}

/// At most one anchor per voxel; anchors are kept in a `Vec` whose order is
/// the deterministic iteration order for every consumer.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    voxel_size: f64,
    k: usize,
    feature_dim: usize,
    anchors: Vec<Anchor>,
    index: HashMap<VoxelKey, usize>,
}

/// `k` points of the Halton sequence (bases 2, 3, 5) shifted into
/// `[-0.5, 0.5)³`.
pub fn offset_pattern(k: usize) -> Vec<Vector3<f64>> {
    fn radical_inverse(mut i: usize, base: usize) -> f64 {
        let mut f = 1.0;
        let mut r = 0.0;
        while i > 0 {
            f /= base as f64;
            r += f * (i % base) as f64;
            i /= base;
        }
        r
    }
    (1..=k)
        .map(|i| {
            Vector3::new(radical_inverse(i, 2), radical_inverse(i, 3), radical_inverse(i, 5))
                - Vector3::repeat(0.5)
        })
        .collect()
}

impl AnchorGrid {
    pub fn empty(voxel_size: f64, k: usize, feature_dim: usize) -> Result<Self> {
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::Init(format!("voxel size must be positive, got {voxel_size}")));
        }
        if k == 0 {
            return Err(Error::Init("k must be at least 1".into()));
        }
        Ok(Self { voxel_size, k, feature_dim, anchors: Vec::new(), index: HashMap::new() })
    }

    /// Rebuilds a grid from stored anchors, checking voxel exclusivity and
    /// that every center is its voxel's center.
    pub fn from_anchors(voxel_size: f64, k: usize, feature_dim: usize, anchors: Vec<Anchor>) -> Result<Self> {
        let mut grid = Self::empty(voxel_size, k, feature_dim)?;
        for a in anchors {
            if a.k() != k || a.feature.len() != feature_dim {
                return Err(Error::Data("anchor shape does not match grid".into()));
            }
            let key = grid.key_of(&a.center);
            if (grid.center_of(key) - a.center).norm() > 1e-9 * voxel_size.max(1.0) {
                return Err(Error::Data(format!("anchor at {:?} is not a voxel center", a.center)));
            }
            if grid.index.insert(key, grid.anchors.len()).is_some() {
                return Err(Error::Data(format!("two anchors share voxel {key:?}")));
            }
            grid.anchors.push(a);
        }
        Ok(grid)
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn anchors(&self) -> &[Anchor] {
        &self.anchors
    }

    pub fn anchors_mut(&mut self) -> &mut [Anchor] {
        &mut self.anchors
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn key_of(&self, p: &Vector3<f64>) -> VoxelKey {
        [
            (p.x / self.voxel_size).floor() as i64,
            (p.y / self.voxel_size).floor() as i64,
            (p.z / self.voxel_size).floor() as i64,
        ]
    }

    pub fn center_of(&self, key: VoxelKey) -> Vector3<f64> {
        Vector3::new(
            (key[0] as f64 + 0.5) * self.voxel_size,
            (key[1] as f64 + 0.5) * self.voxel_size,
            (key[2] as f64 + 0.5) * self.voxel_size,
        )
    }

    pub fn is_occupied(&self, key: &VoxelKey) -> bool {
        self.index.contains_key(key)
    }

    pub fn anchor_at(&self, key: &VoxelKey) -> Option<&Anchor> {
        self.index.get(key).map(|&i| &self.anchors[i])
    }

    fn fresh_anchor(&self, key: VoxelKey, object_id: u32, feature: Vec<f64>) -> Anchor {
        Anchor::new(
            self.center_of(key),
            Vector3::repeat(self.voxel_size),
            feature,
            offset_pattern(self.k),
            object_id,
        )
    }

    /// Sorted set of object IDs carried by the anchors.
    pub fn object_ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.anchors.iter().map(|a| a.object_id()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Keeps anchors where `keep[i]` is true.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        assert_eq!(keep.len(), self.anchors.len());
        let mut i = 0;
        self.anchors.retain(|_| {
            let k = keep[i];
            i += 1;
            k
        });
        self.rebuild_index();
    }

    /// Keeps anchors for which `f` holds.
    pub fn retain(&mut self, f: impl Fn(&Anchor) -> bool) {
        self.anchors.retain(|a| f(a));
        self.rebuild_index();
    }

    fn rebuild_index(&mut self) {
        self.index.clear();
        for (i, a) in self.anchors.iter().enumerate() {
            let key = [
                (a.center.x / self.voxel_size).floor() as i64,
                (a.center.y / self.voxel_size).floor() as i64,
                (a.center.z / self.voxel_size).floor() as i64,
            ];
            self.index.insert(key, i);
        }
    }
}

/// One anchor per occupied voxel, labeled by the majority ID of its points.
pub fn voxelize_init(
    cloud: &LabeledPointCloud,
    voxel_size: f64,
    k: usize,
    feature_dim: usize,
) -> Result<AnchorGrid> {
    if cloud.is_empty() {
        return Err(Error::Init("cannot initialize anchors from an empty point cloud".into()));
    }
    let mut grid = AnchorGrid::empty(voxel_size, k, feature_dim)?;
    let mut voxels: BTreeMap<VoxelKey, VoteTally> = BTreeMap::new();
    for p in &cloud.points {
        if !p.position.iter().all(|v| v.is_finite()) {
            return Err(Error::Init("point cloud contains non-finite positions".into()));
        }
        let key = grid.key_of(&Vector3::from(p.position));
        *voxels.entry(key).or_default().entry(p.object_id).or_insert(0) += 1;
    }
    for (key, tally) in voxels {
        let anchor = grid.fresh_anchor(key, majority_vote(&tally), vec![0.0; feature_dim]);
        grid.index.insert(key, grid.anchors.len());
        grid.anchors.push(anchor);
    }
    Ok(grid)
}

/// Per-anchor statistics accumulated between grow/prune applications.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GrowPruneStats {
    pub grad_sum: Vec<f64>,
    pub grad_count: Vec<u32>,
    pub opacity_sum: Vec<f64>,
    pub opacity_count: Vec<u32>,
    /// Iterations accumulated since the last reset.
    pub iterations: usize,
}

impl GrowPruneStats {
    pub fn new(n_anchors: usize) -> Self {
        Self {
            grad_sum: vec![0.0; n_anchors],
            grad_count: vec![0; n_anchors],
            opacity_sum: vec![0.0; n_anchors],
            opacity_count: vec![0; n_anchors],
            iterations: 0,
        }
    }

    pub fn reset(&mut self, n_anchors: usize) {
        *self = Self::new(n_anchors);
    }

    /// Records one observed primitive of `anchor`.
    pub fn record(&mut self, anchor: usize, grad_norm: f64, opacity: f64) {
        self.grad_sum[anchor] += grad_norm;
        self.grad_count[anchor] += 1;
        self.opacity_sum[anchor] += opacity;
        self.opacity_count[anchor] += 1;
    }

    pub fn mean_grad(&self, anchor: usize) -> Option<f64> {
        let c = *self.grad_count.get(anchor)?;
        (c > 0).then(|| self.grad_sum[anchor] / c as f64)
    }

    pub fn mean_opacity(&self, anchor: usize) -> Option<f64> {
        let c = *self.opacity_count.get(anchor)?;
        (c > 0).then(|| self.opacity_sum[anchor] / c as f64)
    }
}

/// Adds anchors in empty voxels reached by the primitives of every anchor
/// whose mean positional gradient exceeds `threshold`. New anchors copy the
/// parent's object ID and are appended in parent order. Returns the number
/// of anchors added.
pub fn grow_anchors(
    grid: &mut AnchorGrid,
    stats: &GrowPruneStats,
    threshold: f64,
    feature_init: GrowFeatureInit,
) -> usize {
    let parents = grid.anchors.len();
    let mut added = 0;
    for i in 0..parents {
        if !stats.mean_grad(i).is_some_and(|g| g > threshold) {
            continue;
        }
        let parent = grid.anchors[i].clone();
        for o in &parent.offsets {
            let pos = parent.center + o.component_mul(&parent.scaling);
            let key = grid.key_of(&pos);
            if grid.index.contains_key(&key) {
                continue;
            }
            let feature = match feature_init {
                GrowFeatureInit::Zero => vec![0.0; grid.feature_dim],
                GrowFeatureInit::CopyParent => parent.feature.clone(),
            };
            let anchor = grid.fresh_anchor(key, parent.object_id(), feature);
            grid.index.insert(key, grid.anchors.len());
            grid.anchors.push(anchor);
            added += 1;
        }
    }
    added
}

/// Keep-mask removing every anchor with at least one observation whose mean
/// opacity is below `opacity_threshold`. Anchors beyond the stats length
/// (grown this window) are kept.
pub fn prune_mask(grid: &AnchorGrid, stats: &GrowPruneStats, opacity_threshold: f64) -> Vec<bool> {
    (0..grid.len())
        .map(|i| !stats.mean_opacity(i).is_some_and(|o| o < opacity_threshold))
        .collect()
}

/// Removes low-opacity anchors (and with them their IDs). Returns the keep
/// mask that was applied.
pub fn prune_anchors(grid: &mut AnchorGrid, stats: &GrowPruneStats, opacity_threshold: f64) -> Vec<bool> {
    let keep = prune_mask(grid, stats, opacity_threshold);
    grid.retain_mask(&keep);
    keep
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::LabeledPoint;
    use std::collections::HashSet;

    fn pt(p: [f64; 3], id: u32) -> LabeledPoint {
        LabeledPoint { position: p, color: [0.5; 3], object_id: id }
    }

    #[test]
    fn majority_per_voxel() {
        let c = LabeledPointCloud::new(vec![pt([0.01, 0.01, 0.01], 3), pt([0.02, 0.03, 0.04], 3)]);
        let g = voxelize_init(&c, 0.1, 10, 4).unwrap();
        assert_eq!(g.len(), 1);
        assert_eq!(g.anchors()[0].object_id(), 3);
        assert!((g.anchors()[0].center - Vector3::repeat(0.05)).norm() < 1e-15);
        assert_eq!(g.anchors()[0].k(), 10);
        assert!(g.anchors()[0].feature.iter().all(|&f| f == 0.0));

        let c = LabeledPointCloud::new(vec![pt([0.01, 0.01, 0.01], 2), pt([0.02, 0.03, 0.04], 1)]);
        let g = voxelize_init(&c, 0.1, 10, 4).unwrap();
        assert_eq!(g.anchors()[0].object_id(), 1);

        assert!(matches!(voxelize_init(&LabeledPointCloud::default(), 0.1, 10, 4), Err(Error::Init(_))));
    }

    #[test]
    fn offsets_inside_unit_cube() {
        let o = offset_pattern(10);
        assert_eq!(o.len(), 10);
        assert!(o.iter().all(|v| v.iter().all(|&c| (-0.5..0.5).contains(&c))));
        let distinct: HashSet<_> = o.iter().map(|v| v.map(|c| c.to_bits())).map(|v| (v.x, v.y, v.z)).collect();
        assert_eq!(distinct.len(), 10);
    }

    fn grid_with(ids: &[(VoxelKey, u32)]) -> AnchorGrid {
        let mut g = AnchorGrid::empty(1.0, 4, 2).unwrap();
        for &(key, id) in ids {
            let a = g.fresh_anchor(key, id, vec![0.0; 2]);
            g.index.insert(key, g.anchors.len());
            g.anchors.push(a);
        }
        g
    }

    #[test]
    fn growth_replicates_parent_id() {
        let mut g = grid_with(&[([0, 0, 0], 4)]);
        // Push one offset into the neighbouring +x voxel.
        g.anchors[0].offsets[0] = Vector3::new(1.0, 0.0, 0.0);
        let mut stats = GrowPruneStats::new(1);
        stats.record(0, 1e-5, 0.5);
        assert_eq!(grow_anchors(&mut g.clone(), &stats, 2e-4, GrowFeatureInit::Zero), 0);

        stats.record(0, 1.0, 0.5);
        let before = g.clone();
        let added = grow_anchors(&mut g, &stats, 2e-4, GrowFeatureInit::Zero);
        assert_eq!(added, 1);
        let child = g.anchor_at(&[1, 0, 0]).unwrap();
        assert_eq!(child.object_id(), 4);
        assert_eq!(g.anchors()[0], before.anchors()[0]);
    }

    #[test]
    fn growth_never_overwrites() {
        let mut g = grid_with(&[([0, 0, 0], 4), ([1, 0, 0], 2)]);
        for o in &mut g.anchors[0].offsets {
            *o = Vector3::new(1.0, 0.0, 0.0);
        }
        let mut stats = GrowPruneStats::new(2);
        stats.record(0, 1.0, 0.5);
        let occupant = g.anchor_at(&[1, 0, 0]).unwrap().clone();
        assert_eq!(grow_anchors(&mut g, &stats, 2e-4, GrowFeatureInit::CopyParent), 0);
        assert_eq!(g.anchor_at(&[1, 0, 0]).unwrap(), &occupant);
    }

    #[test]
    fn pruning_by_mean_opacity() {
        let mut g = grid_with(&[([0, 0, 0], 1), ([5, 0, 0], 3), ([9, 0, 0], 3)]);
        let mut stats = GrowPruneStats::new(3);
        stats.record(0, 0.0, 0.5);
        stats.record(1, 0.0, 0.001);
        // anchor 2 unobserved: kept
        let keep = prune_anchors(&mut g, &stats, 0.005);
        assert_eq!(keep, vec![true, false, true]);
        assert_eq!(g.len(), 2);
        assert!(g.anchor_at(&[5, 0, 0]).is_none());
        assert_eq!(g.anchor_at(&[9, 0, 0]).unwrap().object_id(), 3);
    }

    #[test]
    fn voxel_count_matches_hash_set() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut pts = Vec::new();
        for (obj, center) in [(1u32, [0.0, 0.0, 0.0]), (2, [1.0, 0.0, 0.0]), (3, [0.0, 1.5, 0.2])] {
            for _ in 0..333 {
                let p = [
                    center[0] + rng.gen_range(-0.2..0.2),
                    center[1] + rng.gen_range(-0.2..0.2),
                    center[2] + rng.gen_range(-0.2..0.2),
                ];
                pts.push(pt(p, obj));
            }
        }
        pts.push(pt([3.0, 3.0, 3.0], 1));
        let cloud = LabeledPointCloud::new(pts);
        let voxels: HashSet<(i64, i64, i64)> = cloud
            .points
            .iter()
            .map(|p| {
                (
                    (p.position[0] / 0.1).floor() as i64,
                    (p.position[1] / 0.1).floor() as i64,
                    (p.position[2] / 0.1).floor() as i64,
                )
            })
            .collect();
        let g = voxelize_init(&cloud, 0.1, 10, 8).unwrap();
        assert_eq!(g.len(), voxels.len());
        assert_eq!(g.object_ids(), vec![1, 2, 3]);
    }
}
