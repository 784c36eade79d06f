//! A trainable scene: anchors, decoding heads and the object count, with the
//! full render pipeline (decode → project → composite) and its reverse pass.

use nalgebra::Vector3;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::neural::{
    decode_anchor_cached, heads_backward, AnchorGrid, DecodeCache, HeadParameters, PrimitiveGrad,
};
use crate::raster::{
    project_geometry, project_geometry_backward, rasterize_backward, rasterize_forward, ProjectedSplat,
    ProjectionCache, RenderTarget, COLOR_CHANNELS,
};
use crate::scene::{one_hot_encode, Camera, GaussianPrimitive};

/// Anchors per work unit in the reverse pass. Fixed so that the merge order
/// of head gradients does not depend on the thread count.
const BACKWARD_CHUNK: usize = 64;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub grid: AnchorGrid,
    pub heads: HeadParameters,
    /// Foreground object count `n`; renders carry `n + 1` semantic channels.
    pub n_objects: u32,
    /// Per-anchor learnable semantic vectors (length `n + 1`). `None` means
    /// fixed one-hot encodings of the anchors' object IDs.
    pub semantics: Option<Vec<Vec<f64>>>,
}

struct SplatSource {
    anchor: u32,
    slot: u32,
    cache: ProjectionCache,
}

/// Forward render plus what [`Model::backward`] needs.
pub struct Frame {
    pub target: RenderTarget,
    pub camera: Camera,
    decoded: Vec<(Vec<GaussianPrimitive>, DecodeCache)>,
    sources: Vec<SplatSource>,
}

impl Frame {
    /// Number of primitives that reached the rasterizer.
    pub fn visible(&self) -> usize {
        self.sources.len()
    }

    /// The decoded primitives of anchor `i`.
    pub fn primitives(&self, anchor: usize) -> &[GaussianPrimitive] {
        &self.decoded[anchor].0
    }

    fn visible_primitives(&self) -> impl Iterator<Item = &GaussianPrimitive> {
        self.sources.iter().map(|s| &self.decoded[s.anchor as usize].0[s.slot as usize])
    }

    /// Mean scale volume proxy `s_x·s_y·s_z` over visible primitives; 0 when
    /// none are visible.
    pub fn volume(&self) -> f64 {
        let v: Vec<Vector3<f64>> = self.visible_primitives().map(|p| p.scale).collect();
        volume_reg(&v)
    }
}

/// Mean over primitives of the product of their three scale components.
pub fn volume_reg(scales: &[Vector3<f64>]) -> f64 {
    if scales.is_empty() {
        return 0.0;
    }
    scales.iter().map(|s| s.x * s.y * s.z).sum::<f64>() / scales.len() as f64
}

/// Gradient of a scalar objective with respect to every trainable value.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelGrad {
    pub heads: HeadParameters,
    pub features: Vec<Vec<f64>>,
    pub offsets: Vec<Vec<Vector3<f64>>>,
    /// Present only for learnable semantics; one-hot encodings are constants.
    pub semantics: Option<Vec<Vec<f64>>>,
    /// `(anchor, screen-space positional gradient norm, opacity)` per visible
    /// primitive, in normalized-device units.
    pub observations: Vec<(usize, f64, f64)>,
}

impl Model {
    pub fn semantic_channels(&self) -> usize {
        self.n_objects as usize + 1
    }

    pub fn channels(&self) -> usize {
        COLOR_CHANNELS + self.semantic_channels()
    }

    /// Checks that shapes agree between grid, heads and semantics.
    pub fn validate(&self) -> Result<()> {
        if self.grid.k() != self.heads.k || self.grid.feature_dim() != self.heads.feature_dim {
            return Err(Error::Config("anchor grid and heads disagree on k or feature size".into()));
        }
        if let Some(sem) = &self.semantics {
            if sem.len() != self.grid.len() || sem.iter().any(|s| s.len() != self.semantic_channels()) {
                return Err(Error::Config("learnable semantics do not match the anchors".into()));
            }
        }
        for a in self.grid.anchors() {
            if a.object_id() > self.n_objects {
                return Err(Error::InvalidId { id: a.object_id(), n_objects: self.n_objects });
            }
        }
        Ok(())
    }

    /// Decodes, projects and composites every anchor for `camera`.
    pub fn render_frame(&self, camera: &Camera) -> Result<Frame> {
        camera.validate()?;
        let decoded: Vec<(Vec<GaussianPrimitive>, DecodeCache)> = self
            .grid
            .anchors()
            .par_iter()
            .map(|a| decode_anchor_cached(a, &self.heads, camera))
            .collect::<Result<_>>()?;
        let projected: Vec<Vec<(u32, crate::raster::ProjectedGeometry)>> = decoded
            .par_iter()
            .map(|(prims, _)| {
                let mut out = Vec::new();
                for (j, p) in prims.iter().enumerate() {
                    if let Some(g) = project_geometry(&p.mean, &p.scale, p.rotation, camera)? {
                        out.push((j as u32, g));
                    }
                }
                Ok(out)
            })
            .collect::<Result<_>>()?;

        let mut splats = Vec::new();
        let mut sources = Vec::new();
        for (a, list) in projected.into_iter().enumerate() {
            for (j, g) in list {
                let p = &decoded[a].0[j as usize];
                let mut channels = Vec::with_capacity(self.channels());
                channels.extend_from_slice(&p.color);
                match &self.semantics {
                    Some(sem) => channels.extend_from_slice(&sem[a]),
                    None => channels.extend(one_hot_encode(p.object_id, self.n_objects)?.to_vec()),
                }
                splats.push(ProjectedSplat {
                    mean2d: g.mean2d,
                    cov2d: g.cov2d,
                    depth: g.depth,
                    channels,
                    opacity: p.opacity,
                    index: splats.len(),
                });
                sources.push(SplatSource { anchor: a as u32, slot: j, cache: g.cache });
            }
        }
        let target = if splats.is_empty() {
            empty_target(camera, self.channels())?
        } else {
            rasterize_forward(&splats, camera.width as usize, camera.height as usize)?
        };
        Ok(Frame { target, camera: camera.clone(), decoded, sources })
    }

    pub fn render(&self, camera: &Camera) -> Result<RenderTarget> {
        self.render_frame(camera).map(|f| f.target)
    }

    /// Reverse pass of `Σ grad_image ⊙ image + volume_weight · frame.volume()`.
    pub fn backward(&self, frame: &Frame, grad_image: &[f64], volume_weight: f64) -> Result<ModelGrad> {
        let k = self.grid.k();
        let n_anchors = self.grid.len();
        if frame.decoded.len() != n_anchors {
            return Err(Error::Usage("frame was rendered from a different anchor set".into()));
        }
        let splat_grads = if frame.sources.is_empty() {
            Vec::new()
        } else {
            rasterize_backward(&frame.target, grad_image)?
        };
        let camera = &frame.camera;
        let (half_w, half_h) = (0.5 * camera.width as f64, 0.5 * camera.height as f64);
        let n_visible = frame.sources.len();
        let vol_scale = if n_visible > 0 { volume_weight / n_visible as f64 } else { 0.0 };

        let mut prim_grads: Vec<Vec<PrimitiveGrad>> = vec![Vec::new(); n_anchors];
        let mut semantics = self.semantics.as_ref().map(|_| vec![vec![0.0; self.semantic_channels()]; n_anchors]);
        let mut observations = Vec::with_capacity(n_visible);
        for (src, sg) in frame.sources.iter().zip(&splat_grads) {
            let a = src.anchor as usize;
            let j = src.slot as usize;
            let prim = &frame.decoded[a].0[j];
            let grads = &mut prim_grads[a];
            if grads.is_empty() {
                *grads = vec![PrimitiveGrad::default(); k];
            }
            let geo = project_geometry_backward(&src.cache, camera, sg.mean2d, sg.cov2d);
            let g = &mut grads[j];
            g.mean += geo.mean;
            g.scale += geo.scale;
            let s = prim.scale;
            g.scale += vol_scale * Vector3::new(s.y * s.z, s.x * s.z, s.x * s.y);
            for i in 0..4 {
                g.rotation[i] += geo.rotation[i];
            }
            g.opacity += sg.opacity;
            for c in 0..COLOR_CHANNELS {
                g.color[c] += sg.channels[c];
            }
            if let Some(sem) = semantics.as_mut() {
                for (d, v) in sem[a].iter_mut().zip(&sg.channels[COLOR_CHANNELS..]) {
                    *d += v;
                }
            }
            let pos = (sg.mean2d[0] * half_w).hypot(sg.mean2d[1] * half_h);
            observations.push((a, pos, prim.opacity));
        }

        let anchors = self.grid.anchors();
        let chunks: Vec<(HeadParameters, Vec<(usize, crate::neural::AnchorGrad)>)> = (0..n_anchors)
            .collect::<Vec<_>>()
            .par_chunks(BACKWARD_CHUNK)
            .map(|ids| {
                let mut head_grads = self.heads.zeros_like();
                let mut out = Vec::new();
                for &a in ids {
                    if prim_grads[a].is_empty() {
                        continue;
                    }
                    let (prims, cache) = &frame.decoded[a];
                    let g = heads_backward(&anchors[a], &self.heads, prims, cache, &prim_grads[a], &mut head_grads)?;
                    out.push((a, g));
                }
                Ok((head_grads, out))
            })
            .collect::<Result<_>>()?;

        let mut heads = self.heads.zeros_like();
        let mut features = vec![vec![0.0; self.grid.feature_dim()]; n_anchors];
        let mut offsets = vec![vec![Vector3::zeros(); k]; n_anchors];
        for (hg, list) in chunks {
            heads.add_assign(&hg);
            for (a, g) in list {
                features[a] = g.feature;
                offsets[a] = g.offsets;
            }
        }
        Ok(ModelGrad { heads, features, offsets, semantics, observations })
    }

    /// Copy restricted to anchors for which `keep` holds.
    pub fn filtered(&self, keep: impl Fn(&crate::scene::Anchor) -> bool) -> Model {
        let mask: Vec<bool> = self.grid.anchors().iter().map(&keep).collect();
        let mut out = self.clone();
        out.retain_mask(&mask);
        out
    }

    /// Keeps anchors (and their semantic vectors) where `mask` is true.
    pub fn retain_mask(&mut self, mask: &[bool]) {
        self.grid.retain_mask(mask);
        if let Some(sem) = self.semantics.as_mut() {
            let mut i = 0;
            sem.retain(|_| {
                i += 1;
                mask[i - 1]
            });
        }
    }
}

fn empty_target(camera: &Camera, channels: usize) -> Result<RenderTarget> {
    rasterize_forward(&[], camera.width as usize, camera.height as usize).map(|mut t| {
        // An empty splat list has no channel count of its own.
        if t.channels != channels {
            let n = t.width * t.height;
            t.channels = channels;
            t.image = vec![0.0; n * channels];
            if channels > COLOR_CHANNELS {
                for p in 0..n {
                    t.image[p * channels + COLOR_CHANNELS] = 1.0;
                }
            }
        }
        t
    })
}
