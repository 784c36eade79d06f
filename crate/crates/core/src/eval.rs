//! Segmentation, image and point-cloud metrics.

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::raster::argmax_id;
use crate::scene::{Camera, IdMap};
use crate::ssim::ssim;

/// Pixel counts per class, accumulated over one or more map pairs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SegCounts {
    /// `(gt, pred) → pixels`.
    pub confusion: BTreeMap<(u32, u32), u64>,
    /// Per class: `(boundary intersection, boundary union)`.
    pub boundary: BTreeMap<u32, (u64, u64)>,
    pub pixels: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegScores {
    /// Classes present in the ground truth.
    pub classes: Vec<u32>,
    pub iou: BTreeMap<u32, f64>,
    pub miou: f64,
    pub biou: BTreeMap<u32, f64>,
    pub mbiou: f64,
    /// Per-class Dice for every class in `classes`.
    pub class_dice: BTreeMap<u32, f64>,
    /// Micro-averaged over foreground classes (ID ≥ 1).
    pub dice: f64,
    pub accuracy: f64,
}

/// Band width in pixels: 2% of the image diagonal, at least 1.
pub fn boundary_width(width: u32, height: u32) -> usize {
    let diag = (width as f64).hypot(height as f64);
    ((0.02 * diag).round() as usize).max(1)
}

/// Erosion by a `(2r+1)²` square; pixels outside the image count as outside
/// the mask.
fn erode(mask: &[bool], width: usize, height: usize, r: usize) -> Vec<bool> {
    let mut rows = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            rows[y * width + x] = x >= r && x + r < width && (x - r..=x + r).all(|i| mask[y * width + i]);
        }
    }
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            out[y * width + x] = y >= r && y + r < height && (y - r..=y + r).all(|j| rows[j * width + x]);
        }
    }
    out
}

fn boundary_band(mask: &[bool], width: usize, height: usize, r: usize) -> Vec<bool> {
    let inner = erode(mask, width, height, r);
    mask.iter().zip(&inner).map(|(&m, &i)| m && !i).collect()
}

impl SegCounts {
    pub fn add(&mut self, pred: &IdMap, gt: &IdMap) -> Result<()> {
        if pred.width != gt.width || pred.height != gt.height || pred.ids.len() != gt.ids.len() {
            return Err(Error::Usage(format!(
                "prediction is {}×{}, ground truth is {}×{}",
                pred.width, pred.height, gt.width, gt.height
            )));
        }
        for (&p, &g) in pred.ids.iter().zip(&gt.ids) {
            *self.confusion.entry((g, p)).or_insert(0) += 1;
        }
        self.pixels += gt.ids.len() as u64;
        let (w, h) = (gt.width as usize, gt.height as usize);
        let r = boundary_width(gt.width, gt.height);
        let classes: BTreeSet<u32> = gt.ids.iter().chain(&pred.ids).copied().collect();
        for c in classes {
            let gm: Vec<bool> = gt.ids.iter().map(|&v| v == c).collect();
            let pm: Vec<bool> = pred.ids.iter().map(|&v| v == c).collect();
            let gb = boundary_band(&gm, w, h, r);
            let pb = boundary_band(&pm, w, h, r);
            let inter = gb.iter().zip(&pb).filter(|(a, b)| **a && **b).count() as u64;
            let union = gb.iter().zip(&pb).filter(|(a, b)| **a || **b).count() as u64;
            let e = self.boundary.entry(c).or_insert((0, 0));
            e.0 += inter;
            e.1 += union;
        }
        Ok(())
    }

    /// `(true positives, predicted, ground truth)` pixel counts for class `c`.
    pub fn class_counts(&self, c: u32) -> (u64, u64, u64) {
        let mut tp = 0;
        let mut pred = 0;
        let mut gt = 0;
        for (&(g, p), &n) in &self.confusion {
            if g == c && p == c {
                tp += n;
            }
            if p == c {
                pred += n;
            }
            if g == c {
                gt += n;
            }
        }
        (tp, pred, gt)
    }

    pub fn scores(&self) -> SegScores {
        let classes: Vec<u32> = self
            .confusion
            .keys()
            .map(|&(g, _)| g)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut iou = BTreeMap::new();
        let mut class_dice = BTreeMap::new();
        let mut biou = BTreeMap::new();
        let (mut tp_fg, mut fp_fg, mut fn_fg) = (0u64, 0u64, 0u64);
        let mut correct = 0u64;
        for (&(g, p), &n) in &self.confusion {
            if g == p {
                correct += n;
            }
        }
        for &c in &classes {
            let (tp, pred, gt) = self.class_counts(c);
            let union = pred + gt - tp;
            iou.insert(c, if union == 0 { 1.0 } else { tp as f64 / union as f64 });
            class_dice.insert(c, if pred + gt == 0 { 1.0 } else { 2.0 * tp as f64 / (pred + gt) as f64 });
            let (bi, bu) = self.boundary.get(&c).copied().unwrap_or((0, 0));
            biou.insert(c, if bu == 0 { 1.0 } else { bi as f64 / bu as f64 });
        }
        for c in self.confusion.keys().flat_map(|&(g, p)| [g, p]).collect::<BTreeSet<_>>() {
            if c == 0 {
                continue;
            }
            let (tp, pred, gt) = self.class_counts(c);
            tp_fg += tp;
            fp_fg += pred - tp;
            fn_fg += gt - tp;
        }
        let mean = |m: &BTreeMap<u32, f64>| {
            if m.is_empty() {
                1.0
            } else {
                m.values().sum::<f64>() / m.len() as f64
            }
        };
        let denom = 2 * tp_fg + fp_fg + fn_fg;
        SegScores {
            miou: mean(&iou),
            mbiou: mean(&biou),
            dice: if denom == 0 { 1.0 } else { 2.0 * tp_fg as f64 / denom as f64 },
            accuracy: if self.pixels == 0 { 1.0 } else { correct as f64 / self.pixels as f64 },
            classes,
            iou,
            biou,
            class_dice,
        }
    }
}

pub fn seg_scores(pred: &IdMap, gt: &IdMap) -> Result<SegScores> {
    let mut c = SegCounts::default();
    c.add(pred, gt)?;
    Ok(c.scores())
}

/// Peak signal-to-noise ratio for values in `[0, 1]`; `+∞` for identical
/// images.
pub fn psnr(rendered: &[f64], gt: &[f64]) -> Result<f64> {
    if rendered.len() != gt.len() || rendered.is_empty() {
        return Err(Error::Usage(format!("image sizes differ: {} vs {} values", rendered.len(), gt.len())));
    }
    let mse = rendered.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / rendered.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

/// SSIM of two `height × width × 3` images.
pub fn ssim_metric(rendered: &[f64], gt: &[f64], width: usize, height: usize) -> Result<f64> {
    ssim(rendered, gt, width, height, 3)
}

/// 3D nearest-neighbour index.
#[derive(Clone, Debug)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    /// Implicit balanced tree over `order`: the median of each range is the
    /// node, split on axis `depth % 3`.
    order: Vec<u32>,
}

impl KdTree {
    pub fn new(points: &[[f64; 3]]) -> Self {
        let mut order: Vec<u32> = (0..points.len() as u32).collect();
        fn build(points: &[[f64; 3]], idx: &mut [u32], depth: usize) {
            if idx.len() <= 1 {
                return;
            }
            let axis = depth % 3;
            let mid = idx.len() / 2;
            idx.select_nth_unstable_by(mid, |&a, &b| {
                points[a as usize][axis].total_cmp(&points[b as usize][axis]).then(a.cmp(&b))
            });
            let (lo, hi) = idx.split_at_mut(mid);
            build(points, lo, depth + 1);
            build(points, &mut hi[1..], depth + 1);
        }
        build(points, &mut order, 0);
        Self { points: points.to_vec(), order }
    }

    /// Squared distance to, and index of, the nearest point (smallest index
    /// among ties). `None` for an empty tree.
    pub fn nearest(&self, q: &[f64; 3]) -> Option<(f64, usize)> {
        let mut best: Option<(f64, usize)> = None;
        self.search(q, 0, self.order.len(), 0, &mut best);
        best
    }

    fn search(&self, q: &[f64; 3], lo: usize, hi: usize, depth: usize, best: &mut Option<(f64, usize)>) {
        if lo >= hi {
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let i = self.order[mid] as usize;
        let p = &self.points[i];
        let d2 = dist2(p, q);
        if best.map_or(true, |(bd, bi)| d2 < bd || (d2 == bd && i < bi)) {
            *best = Some((d2, i));
        }
        let axis = depth % 3;
        let diff = q[axis] - p[axis];
        let (near, far) = if diff < 0.0 { ((lo, mid), (mid + 1, hi)) } else { ((mid + 1, hi), (lo, mid)) };
        self.search(q, near.0, near.1, depth + 1, best);
        if best.map_or(true, |(bd, _)| diff * diff <= bd) {
            self.search(q, far.0, far.1, depth + 1, best);
        }
    }
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

/// Nearest-neighbour distance of every query point, by index or by
/// exhaustive scan.
pub fn nearest_distances(queries: &[[f64; 3]], targets: &[[f64; 3]], exhaustive: bool) -> Vec<f64> {
    use rayon::prelude::*;
    if exhaustive {
        queries
            .par_iter()
            .map(|q| targets.iter().map(|t| dist2(q, t)).fold(f64::INFINITY, f64::min).sqrt())
            .collect()
    } else {
        let tree = KdTree::new(targets);
        queries.par_iter().map(|q| tree.nearest(q).map_or(f64::INFINITY, |(d, _)| d.sqrt())).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point3DScores {
    pub chamfer: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tau: f64,
}

pub fn point_scores(pred: &[[f64; 3]], gt: &[[f64; 3]], tau: f64) -> Result<Point3DScores> {
    point_scores_with(pred, gt, tau, false)
}

/// [`point_scores`] with the choice of exhaustive nearest-neighbour search.
pub fn point_scores_with(pred: &[[f64; 3]], gt: &[[f64; 3]], tau: f64, exhaustive: bool) -> Result<Point3DScores> {
    if pred.is_empty() || gt.is_empty() {
        return Err(Error::Usage("point scores need two non-empty clouds".into()));
    }
    let d_pg = nearest_distances(pred, gt, exhaustive);
    let d_gp = nearest_distances(gt, pred, exhaustive);
    let mean = |d: &[f64]| d.iter().sum::<f64>() / d.len() as f64;
    let within = |d: &[f64]| d.iter().filter(|&&v| v <= tau).count() as f64 / d.len() as f64;
    let precision = within(&d_pg);
    let recall = within(&d_gp);
    let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
    Ok(Point3DScores { chamfer: 0.5 * (mean(&d_pg) + mean(&d_gp)), precision, recall, f1, tau })
}

/// Renders `model` from every camera and scores the argmax ID maps against
/// `gt`, with counts aggregated across views.
pub fn per_object_eval(model: &Model, cameras: &[Camera], gt: &[IdMap]) -> Result<SegCounts> {
    if cameras.len() != gt.len() {
        return Err(Error::Usage(format!("{} cameras but {} ground-truth maps", cameras.len(), gt.len())));
    }
    let mut counts = SegCounts::default();
    for (cam, g) in cameras.iter().zip(gt) {
        let pred = argmax_id(&model.render(cam)?);
        counts.add(&pred, g)?;
    }
    Ok(counts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn map(w: u32, h: u32, ids: &[u32]) -> IdMap {
        IdMap::new(w, h, ids.to_vec()).unwrap()
    }

    #[test]
    fn perfect_prediction() {
        let m = map(4, 4, &[0, 0, 1, 1, 0, 2, 2, 1, 0, 0, 0, 0, 3, 3, 3, 3]);
        let s = seg_scores(&m, &m).unwrap();
        assert!(s.iou.values().all(|&v| v == 1.0));
        assert!(s.biou.values().all(|&v| v == 1.0));
        assert_eq!((s.miou, s.mbiou, s.dice, s.accuracy), (1.0, 1.0, 1.0, 1.0));
    }

    #[test]
    fn half_planes() {
        let mut pred = vec![0; 16];
        let mut gt = vec![0; 16];
        for y in 0..4 {
            for x in 0..4 {
                if x < 2 {
                    pred[y * 4 + x] = 1;
                }
                if y < 2 {
                    gt[y * 4 + x] = 1;
                }
            }
        }
        let s = seg_scores(&map(4, 4, &pred), &map(4, 4, &gt)).unwrap();
        assert!((s.iou[&1] - 2.0 / 6.0).abs() < 1e-12);
        assert_eq!(s.accuracy, 0.5);
    }

    #[test]
    fn disjoint_class() {
        let s = seg_scores(&map(2, 1, &[0, 1]), &map(2, 1, &[1, 0])).unwrap();
        assert_eq!(s.iou[&1], 0.0);
        assert_eq!(s.dice, 0.0);
    }

    #[test]
    fn resolution_mismatch() {
        assert!(matches!(seg_scores(&map(2, 1, &[0, 0]), &map(1, 2, &[0, 0])), Err(Error::Usage(_))));
    }

    #[test]
    fn thin_regions_are_all_boundary() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        // 1-pixel-wide stripes; band width at 20×20 is 1.
        let gt: Vec<u32> = (0..400).map(|i| ((i % 20) % 3) as u32).collect();
        let pred: Vec<u32> = gt.iter().map(|&v| if rng.gen::<f64>() < 0.2 { (v + 1) % 3 } else { v }).collect();
        let s = seg_scores(&map(20, 20, &pred), &map(20, 20, &gt)).unwrap();
        for c in 0..3 {
            assert!((s.iou[&c] - s.biou[&c]).abs() < 1e-12);
        }
    }

    #[test]
    fn erosion_band() {
        let mut m = vec![false; 49];
        for y in 1..6 {
            for x in 1..6 {
                m[y * 7 + x] = true;
            }
        }
        let band = boundary_band(&m, 7, 7, 1);
        assert_eq!(band.iter().filter(|&&b| b).count(), 16);
        assert!(!band[3 * 7 + 3]);
    }

    #[test]
    fn psnr_examples() {
        let a = vec![0.5; 10];
        let b = vec![0.6; 10];
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        assert!(psnr(&a, &b[..9]).is_err());
    }

    #[test]
    fn kd_tree_matches_scan() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut pts: Vec<[f64; 3]> = (0..200).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        pts.extend(std::iter::repeat([0.5, 0.5, 0.5]).take(50));
        let qs: Vec<[f64; 3]> = (0..300).map(|_| [rng.gen(), rng.gen(), rng.gen()]).collect();
        assert_eq!(nearest_distances(&qs, &pts, false), nearest_distances(&qs, &pts, true));
    }

    #[test]
    fn point_score_examples() {
        let a = vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let s = point_scores(&a, &a, 0.02).unwrap();
        assert_eq!((s.chamfer, s.precision, s.recall, s.f1), (0.0, 1.0, 1.0, 1.0));
        let b: Vec<[f64; 3]> = a.iter().map(|p| [p[0] + 0.05, p[1], p[2]]).collect();
        let s = point_scores(&a, &b, 0.02).unwrap();
        assert_eq!(s.f1, 0.0);
        assert!((s.chamfer - 0.05).abs() < 1e-12);
        assert!(point_scores(&[], &a, 0.02).is_err());
    }
}
