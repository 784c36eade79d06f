//! Objectives, optimizer and the training loop.

mod adam;
mod config;
mod losses;

pub use adam::{adam_update, Moments, BETA1, BETA2, EPSILON};
pub use config::{
    exp_decay, DensifyConfig, GrownFeature, LearningRates, LossWeights, SemanticMode, TrainConfig,
};
pub use losses::{
    l1_loss, l1_loss_with_grad, learnable_semantic_loss, semantic_ce_loss, ssim_loss, ssim_loss_with_grad,
    total_loss, LossComponents, PROB_FLOOR,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{Model, ModelGrad};
use crate::neural::{grow_anchors, prune_mask, voxelize_init, GrowPruneStats, HeadParameters};
use crate::raster::COLOR_CHANNELS;
use crate::scene::{Camera, IdMap, LabeledPointCloud};

/// One supervised view: camera, `height × width × 3` RGB in `[0, 1]`, and
/// its 2D object-ID map.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainView {
    pub camera: Camera,
    pub rgb: Vec<f64>,
    pub ids: IdMap,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingData {
    pub views: Vec<TrainView>,
    pub cloud: LabeledPointCloud,
    pub n_objects: u32,
}

impl TrainingData {
    pub fn validate(&self) -> Result<()> {
        if self.views.is_empty() {
            return Err(Error::Data("training needs at least one view".into()));
        }
        for (i, v) in self.views.iter().enumerate() {
            v.camera.validate()?;
            let n = v.camera.pixel_count();
            if v.rgb.len() != 3 * n || v.ids.ids.len() != n || v.ids.width != v.camera.width {
                return Err(Error::Data(format!("view {i}: image, ID map and camera sizes disagree")));
            }
            v.ids.validate(self.n_objects)?;
        }
        Ok(())
    }
}

/// Loss terms logged for one iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossRecord {
    pub iteration: usize,
    pub components: LossComponents,
    pub total: f64,
}

#[derive(Clone, Debug, PartialEq)]
struct AnchorMoments {
    feature: Moments,
    offsets: Moments,
    semantic: Moments,
}

impl AnchorMoments {
    fn zeros(feature_dim: usize, k: usize, semantic: usize) -> Self {
        Self { feature: Moments::zeros(feature_dim), offsets: Moments::zeros(3 * k), semantic: Moments::zeros(semantic) }
    }
}

/// Everything the loop mutates. Owned exclusively by the loop.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub model: Model,
    pub iteration: usize,
    pub stats: GrowPruneStats,
    head_moments: Vec<Moments>,
    anchor_moments: Vec<AnchorMoments>,
    rng: ChaCha8Rng,
    view_queue: Vec<usize>,
}

impl TrainState {
    /// Anchors from the labeled cloud, randomly initialized heads.
    pub fn new(config: TrainConfig, data: &TrainingData) -> Result<Self> {
        config.validate()?;
        data.validate()?;
        let grid = voxelize_init(&data.cloud, config.voxel_size, config.k, config.feature_dim)?;
        let heads = HeadParameters::random(config.feature_dim, config.k, config.seed);
        let semantic_len = data.n_objects as usize + 1;
        let semantics = match config.semantic_mode {
            SemanticMode::OneHot => None,
            SemanticMode::Learnable => Some(vec![vec![0.0; semantic_len]; grid.len()]),
        };
        let model = Model { grid, heads, n_objects: data.n_objects, semantics };
        model.validate()?;
        let head_moments =
            model.heads.mlps().iter().flat_map(|m| m.buffers()).map(|b| Moments::zeros(b.len())).collect();
        let anchor_moments = vec![AnchorMoments::zeros(config.feature_dim, config.k, semantic_len); model.grid.len()];
        let stats = GrowPruneStats::new(model.grid.len());
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5EED_0F_7A1E);
        Ok(Self { config, model, iteration: 0, stats, head_moments, anchor_moments, rng, view_queue: Vec::new() })
    }

    fn next_view(&mut self, n_views: usize) -> usize {
        if self.view_queue.is_empty() {
            self.view_queue = (0..n_views).rev().collect();
            self.view_queue.shuffle(&mut self.rng);
        }
        self.view_queue.pop().expect("queue refilled")
    }

    /// Loss terms of the current model on one view, with the gradient image
    /// of the weighted total.
    pub fn view_loss(&self, frame: &crate::model::Frame, view: &TrainView) -> Result<(LossComponents, Vec<f64>)> {
        let t = &frame.target;
        let w = &self.config.weights;
        let rgb = t.rgb();
        let (l1, g_l1) = l1_loss_with_grad(&rgb, &view.rgb)?;
        let (ssim, g_ssim) = ssim_loss_with_grad(&rgb, &view.rgb, t.width, t.height)?;
        let (semantic, g_sem) = match self.config.semantic_mode {
            SemanticMode::OneHot => semantic_ce_loss(t, &view.ids)?,
            SemanticMode::Learnable => learnable_semantic_loss(t, &view.ids, SemanticMode::Learnable)?,
        };
        let comps = LossComponents { l1, ssim, volume: frame.volume(), semantic };
        let c = t.channels;
        let sc = t.semantic_channels();
        let mut grad = vec![0.0; t.image.len()];
        for p in 0..t.width * t.height {
            for ch in 0..COLOR_CHANNELS {
                grad[p * c + ch] = g_l1[3 * p + ch] + w.ssim * g_ssim[3 * p + ch];
            }
            for s in 0..sc {
                grad[p * c + COLOR_CHANNELS + s] = w.semantic * g_sem[p * sc + s];
            }
        }
        Ok((comps, grad))
    }

    /// One optimization step on the next view in the shuffled schedule.
    pub fn step(&mut self, data: &TrainingData) -> Result<LossRecord> {
        self.iteration += 1;
        let it = self.iteration;
        let diverged = |e: Error| Error::Diverged { iteration: it, source: Box::new(e) };
        let view = &data.views[self.next_view(data.views.len())];
        let frame = self.model.render_frame(&view.camera).map_err(diverged)?;
        let (components, grad_image) = self.view_loss(&frame, view).map_err(diverged)?;
        let total = total_loss(&components, &self.config.weights).map_err(diverged)?;
        let grads = self.model.backward(&frame, &grad_image, self.config.weights.volume).map_err(diverged)?;
        drop(frame);

        let d = self.config.densify;
        let densify_active = it > d.start && it <= d.until;
        if densify_active {
            for &(a, g, o) in &grads.observations {
                self.stats.record(a, g, o);
            }
            self.stats.iterations += 1;
        }
        self.apply_gradients(&grads)?;
        if !self.model.heads.is_finite() {
            return Err(diverged(Error::NonFinite { component: "heads", value: f64::NAN }));
        }
        // No densification in the last window: fresh anchors would never be
        // trained.
        if densify_active && it % d.interval == 0 && it + d.interval <= self.config.iterations {
            self.densify();
        }
        Ok(LossRecord { iteration: it, components, total })
    }

    /// One adaptive-moment update of every parameter group.
    pub fn apply_gradients(&mut self, grads: &ModelGrad) -> Result<()> {
        let n = self.model.grid.len();
        if grads.features.len() != n || grads.offsets.len() != n {
            return Err(Error::Usage("gradient anchor count does not match the model".into()));
        }
        let step = self.iteration.max(1) as u64;
        let lr = self.config.learning_rates;
        let t = (self.iteration as f64 / self.config.iterations as f64).min(1.0);
        let lr_head = exp_decay(lr.head, lr.head_final, t);
        let lr_offset = exp_decay(lr.offset, lr.offset_final, t);

        let grad_buffers: Vec<&Vec<f64>> = grads.heads.mlps().into_iter().flat_map(|m| m.buffers()).collect();
        let mut params: Vec<&mut Vec<f64>> = self.model.heads.mlps_mut().into_iter().flat_map(|m| m.buffers_mut()).collect();
        for ((p, g), m) in params.iter_mut().zip(grad_buffers).zip(&mut self.head_moments) {
            adam_update(p, g, m, lr_head, step)?;
        }

        let semantics = self.model.semantics.as_mut();
        let sem_grads = grads.semantics.as_ref();
        if semantics.is_some() != sem_grads.is_some() {
            return Err(Error::Usage("semantic gradients do not match the semantic mode".into()));
        }
        self.model
            .grid
            .anchors_mut()
            .par_iter_mut()
            .zip(&mut self.anchor_moments)
            .enumerate()
            .try_for_each(|(i, (anchor, mom))| -> Result<()> {
                adam_update(&mut anchor.feature, &grads.features[i], &mut mom.feature, lr.feature, step)?;
                let mut flat: Vec<f64> = anchor.offsets.iter().flat_map(|o| o.iter().copied()).collect();
                let g: Vec<f64> = grads.offsets[i].iter().flat_map(|o| o.iter().copied()).collect();
                adam_update(&mut flat, &g, &mut mom.offsets, lr_offset, step)?;
                for (o, c) in anchor.offsets.iter_mut().zip(flat.chunks_exact(3)) {
                    o.copy_from_slice(c);
                }
                Ok(())
            })?;
        if let (Some(sem), Some(g)) = (semantics, sem_grads) {
            for ((s, g), mom) in sem.iter_mut().zip(g).zip(&mut self.anchor_moments) {
                adam_update(s, g, &mut mom.semantic, lr.semantic, step)?;
            }
        }
        Ok(())
    }

    /// Grows then prunes using the accumulated window, then resets it.
    pub fn densify(&mut self) {
        let d = self.config.densify;
        let cfg = &self.config;
        let before = self.model.grid.len();
        let added = grow_anchors(&mut self.model.grid, &self.stats, d.grad_threshold, d.grown_feature.into());
        let semantic_len = self.model.semantic_channels();
        if let Some(sem) = self.model.semantics.as_mut() {
            sem.extend(std::iter::repeat(vec![0.0; semantic_len]).take(added));
        }
        self.anchor_moments
            .extend(std::iter::repeat(AnchorMoments::zeros(cfg.feature_dim, cfg.k, semantic_len)).take(added));
        debug_assert_eq!(self.model.grid.len(), before + added);

        let keep = prune_mask(&self.model.grid, &self.stats, d.opacity_threshold);
        self.model.retain_mask(&keep);
        let mut i = 0;
        self.anchor_moments.retain(|_| {
            i += 1;
            keep[i - 1]
        });
        self.stats.reset(self.model.grid.len());
    }
}

/// Runs `config.iterations` steps from a fresh state. `on_step` sees every
/// record as it is produced.
pub fn train(
    config: TrainConfig,
    data: &TrainingData,
    mut on_step: impl FnMut(&TrainState, &LossRecord),
) -> Result<(TrainState, Vec<LossRecord>)> {
    let mut state = TrainState::new(config, data)?;
    let mut log = Vec::with_capacity(state.config.iterations);
    while state.iteration < state.config.iterations {
        let rec = state.step(data)?;
        on_step(&state, &rec);
        log.push(rec);
    }
    Ok((state, log))
}
