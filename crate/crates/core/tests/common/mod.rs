//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use objsplat::model::{Model, ModelGrad};
use objsplat::neural::{AnchorGrid, HeadParameters};
use objsplat::scene::{Anchor, Camera, IdMap, LabeledPoint, LabeledPointCloud};
use objsplat::train::{total_loss, SemanticMode, TrainConfig, TrainState, TrainView, TrainingData};

/// Outcome of one finite-difference sweep.
#[derive(Clone, Copy, Debug, Default)]
pub struct GradReport {
    pub checked: usize,
    /// Perturbations whose two one-sided slopes disagree, meaning a splat
    /// crossed a cutoff, the depth order changed, a ReLU or L1 kink was hit.
    pub skipped: usize,
    pub max_rel: f64,
}

impl GradReport {
    pub fn merge(&mut self, o: GradReport) {
        self.checked += o.checked;
        self.skipped += o.skipped;
        self.max_rel = self.max_rel.max(o.max_rel);
    }
}

/// Central difference at step `h`, or `None` when the left and right slopes
/// disagree (a non-smooth point lies inside the stencil).
pub fn central_difference(f0: f64, fp: f64, fm: f64, h: f64) -> Option<f64> {
    let right = (fp - f0) / h;
    let left = (f0 - fm) / h;
    let scale = right.abs().max(left.abs());
    if (right - left).abs() > 0.05 * scale + 1e-7 {
        return None;
    }
    Some((fp - fm) / (2.0 * h))
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

#[derive(Clone, Copy, Debug)]
enum Param {
    Head { mlp: usize, buffer: usize, index: usize },
    Feature { anchor: usize, index: usize },
    Offset { anchor: usize, slot: usize, axis: usize },
    Semantic { anchor: usize, index: usize },
}

fn param_mut(model: &mut Model, p: Param) -> &mut f64 {
    match p {
        Param::Head { mlp, buffer, index } => {
            let h = &mut model.heads;
            let m = match mlp {
                0 => &mut h.opacity,
                1 => &mut h.color,
                _ => &mut h.covariance,
            };
            &mut m.buffers_mut()[buffer][index]
        }
        Param::Feature { anchor, index } => &mut model.grid.anchors_mut()[anchor].feature[index],
        Param::Offset { anchor, slot, axis } => &mut model.grid.anchors_mut()[anchor].offsets[slot][axis],
        Param::Semantic { anchor, index } => &mut model.semantics.as_mut().expect("learnable")[anchor][index],
    }
}

fn param_grad(g: &ModelGrad, p: Param) -> f64 {
    match p {
        Param::Head { mlp, buffer, index } => g.heads.mlps()[mlp].buffers()[buffer][index],
        Param::Feature { anchor, index } => g.features[anchor][index],
        Param::Offset { anchor, slot, axis } => g.offsets[anchor][slot][axis],
        Param::Semantic { anchor, index } => g.semantics.as_ref().expect("learnable")[anchor][index],
    }
}

/// A random small model, a camera looking at it and a random target view.
pub struct PipelineCase {
    pub model: Model,
    pub camera: Camera,
    pub view: TrainView,
    pub state: TrainState,
}

pub fn random_case(seed: u64, mode: SemanticMode) -> PipelineCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (k, d, n_objects, voxel) = (rng.gen_range(2..=4), 6, 3u32, 0.1);
    let n_anchors = rng.gen_range(1..=10);
    let mut anchors: Vec<Anchor> = Vec::new();
    let mut keys = std::collections::BTreeSet::new();
    while anchors.len() < n_anchors {
        let key = [rng.gen_range(-3i64..3), rng.gen_range(-3i64..3), rng.gen_range(-3i64..3)];
        if !keys.insert(key) {
            continue;
        }
        let center = Vector3::new(key[0] as f64 + 0.5, key[1] as f64 + 0.5, key[2] as f64 + 0.5) * voxel;
        let s = rng.gen_range(0.08..0.2);
        let feature = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let offsets = (0..k)
            .map(|_| Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
            .collect();
        anchors.push(Anchor::new(center, Vector3::new(s, s, s), feature, offsets, rng.gen_range(1..=n_objects)));
    }
    let cloud = LabeledPointCloud::new(
        anchors
            .iter()
            .map(|a| LabeledPoint { position: a.center.into(), color: [0.5; 3], object_id: a.object_id() })
            .collect(),
    );
    let grid = AnchorGrid::from_anchors(voxel, k, d, anchors).unwrap();
    let mut heads = HeadParameters::random(d, k, seed ^ 0xABCD);
    // Push opacities up so most splats pass the visibility cutoff.
    heads.opacity.b2.iter_mut().for_each(|b| *b = rng.gen_range(-1.0..1.5));
    let semantics = match mode {
        SemanticMode::OneHot => None,
        SemanticMode::Learnable => Some(
            (0..grid.len()).map(|_| (0..=n_objects).map(|_| rng.gen_range(0.0..0.6)).collect()).collect(),
        ),
    };
    let model = Model { grid, heads, n_objects, semantics };
    let (w, h) = (24u32, 20u32);
    let eye = Vector3::new(rng.gen_range(-0.5..0.5), -1.6, rng.gen_range(0.3..0.9));
    let camera = Camera::look_at(eye, Vector3::zeros(), Vector3::z(), w, h, 50.0).unwrap();
    let n = (w * h) as usize;
    let rgb = (0..3 * n).map(|_| rng.gen::<f64>()).collect();
    let ids = IdMap::new(w, h, (0..n).map(|_| rng.gen_range(0..=n_objects)).collect()).unwrap();
    let view = TrainView { camera: camera.clone(), rgb, ids };
    let config = TrainConfig { k, feature_dim: d, voxel_size: voxel, semantic_mode: mode, ..Default::default() };
    let data = TrainingData { views: vec![view.clone()], cloud, n_objects };
    let state = TrainState::new(config, &data).unwrap();
    PipelineCase { model, camera, view, state }
}

impl PipelineCase {
    /// Weighted total training objective of `model` on the target view.
    pub fn loss(&self, model: &Model) -> f64 {
        let frame = model.render_frame(&self.camera).unwrap();
        let (c, _) = self.state.view_loss(&frame, &self.view).unwrap();
        total_loss(&c, &self.state.config.weights).unwrap()
    }

    pub fn gradient(&self) -> ModelGrad {
        let frame = self.model.render_frame(&self.camera).unwrap();
        let (_, g) = self.state.view_loss(&frame, &self.view).unwrap();
        self.model.backward(&frame, &g, self.state.config.weights.volume).unwrap()
    }

    fn params(&self, rng: &mut ChaCha8Rng, count: usize) -> Vec<Param> {
        let m = &self.model;
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let anchor = rng.gen_range(0..m.grid.len());
            let p = match rng.gen_range(0..4) {
                0 => {
                    let mlp = rng.gen_range(0..3);
                    let buffer = rng.gen_range(0..4);
                    let len = m.heads.mlps()[mlp].buffers()[buffer].len();
                    Param::Head { mlp, buffer, index: rng.gen_range(0..len) }
                }
                1 => Param::Feature { anchor, index: rng.gen_range(0..m.grid.feature_dim()) },
                2 if m.semantics.is_some() => Param::Semantic { anchor, index: rng.gen_range(0..=m.n_objects as usize) },
                _ => Param::Offset { anchor, slot: rng.gen_range(0..m.grid.k()), axis: rng.gen_range(0..3) },
            };
            out.push(p);
        }
        out
    }

    /// Compares `count` randomly chosen partial derivatives against central
    /// differences with step `h`.
    pub fn check(&self, count: usize, h: f64, seed: u64) -> GradReport {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let grads = self.gradient();
        let f0 = self.loss(&self.model);
        let mut report = GradReport::default();
        for p in self.params(&mut rng, count) {
            let mut plus = self.model.clone();
            *param_mut(&mut plus, p) += h;
            let mut minus = self.model.clone();
            *param_mut(&mut minus, p) -= h;
            match central_difference(f0, self.loss(&plus), self.loss(&minus), h) {
                Some(fd) => {
                    let rel = relative_error(param_grad(&grads, p), fd);
                    report.checked += 1;
                    report.max_rel = report.max_rel.max(rel);
                }
                None => report.skipped += 1,
            }
        }
        report
    }
}
