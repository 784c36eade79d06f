//! Per-anchor decoding into `k` neural Gaussians.
//!
//! Each anchor's feature is concatenated with the camera distance and unit
//! viewing direction and fed through three small perceptrons (opacity,
//! color, covariance). Primitive means are `center + offset ⊙ scaling`.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scene::{Anchor, Camera, GaussianPrimitive};

pub const HIDDEN_WIDTH: usize = 32;
/// Per-primitive outputs of the covariance head: 3 log-scales, 4 quaternion.
pub const COV_OUTPUTS: usize = 7;
/// Bias of the scale outputs at initialization, so fresh primitives start at
/// half the anchor scaling.
const INIT_LOG_SCALE: f64 = -std::f64::consts::LN_2;

/// Two-layer perceptron, ReLU hidden activation, linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub input: usize,
    pub hidden: usize,
    pub output: usize,
    /// `hidden × input`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `output × hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Mlp {
    pub fn zeros(input: usize, hidden: usize, output: usize) -> Self {
        Self {
            input,
            hidden,
            output,
            w1: vec![0.0; hidden * input],
            b1: vec![0.0; hidden],
            w2: vec![0.0; output * hidden],
            b2: vec![0.0; output],
        }
    }

    /// Uniform `±1/sqrt(fan_in)` weights, zero biases.
    pub fn random(input: usize, hidden: usize, output: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut m = Self::zeros(input, hidden, output);
        let a1 = 1.0 / (input as f64).sqrt();
        let a2 = 1.0 / (hidden as f64).sqrt();
        m.w1.iter_mut().for_each(|w| *w = rng.gen_range(-a1..a1));
        m.w2.iter_mut().for_each(|w| *w = rng.gen_range(-a2..a2));
        m
    }

    /// Returns `(pre-activation, hidden, output)`.
    fn forward(&self, x: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let mut pre = self.b1.clone();
        for (h, p) in pre.iter_mut().enumerate() {
            let row = &self.w1[h * self.input..(h + 1) * self.input];
            *p += row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
        let hidden: Vec<f64> = pre.iter().map(|&p| p.max(0.0)).collect();
        let mut out = self.b2.clone();
        for (o, v) in out.iter_mut().enumerate() {
            let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
            *v += row.iter().zip(&hidden).map(|(w, h)| w * h).sum::<f64>();
        }
        (pre, hidden, out)
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the input.
    fn backward(&self, x: &[f64], pre: &[f64], hidden: &[f64], d_out: &[f64], grad: &mut Mlp) -> Vec<f64> {
        let mut d_hidden = vec![0.0; self.hidden];
        for (o, &g) in d_out.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad.b2[o] += g;
            let row = &self.w2[o * self.hidden..(o + 1) * self.hidden];
            let grow = &mut grad.w2[o * self.hidden..(o + 1) * self.hidden];
            for h in 0..self.hidden {
                grow[h] += g * hidden[h];
                d_hidden[h] += g * row[h];
            }
        }
        let mut d_x = vec![0.0; self.input];
        for h in 0..self.hidden {
            if pre[h] <= 0.0 {
                continue;
            }
            let g = d_hidden[h];
            grad.b1[h] += g;
            let row = &self.w1[h * self.input..(h + 1) * self.input];
            let grow = &mut grad.w1[h * self.input..(h + 1) * self.input];
            for i in 0..self.input {
                grow[i] += g * x[i];
                d_x[i] += g * row[i];
            }
        }
        d_x
    }

    pub fn buffers(&self) -> [&Vec<f64>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn buffers_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn add_assign(&mut self, other: &Mlp) {
        for (dst, src) in self.buffers_mut().into_iter().zip(other.buffers()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.buffers().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

/// Opacity, color and covariance heads shared by all anchors.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadParameters {
    pub feature_dim: usize,
    pub k: usize,
    pub opacity: Mlp,
    pub color: Mlp,
    pub covariance: Mlp,
}

impl HeadParameters {
    pub fn input_dim(feature_dim: usize) -> usize {
        feature_dim + 4
    }

    pub fn zeros(feature_dim: usize, k: usize) -> Self {
        let input = Self::input_dim(feature_dim);
        Self {
            feature_dim,
            k,
            opacity: Mlp::zeros(input, HIDDEN_WIDTH, k),
            color: Mlp::zeros(input, HIDDEN_WIDTH, 3 * k),
            covariance: Mlp::zeros(input, HIDDEN_WIDTH, COV_OUTPUTS * k),
        }
    }

    pub fn random(feature_dim: usize, k: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = Self::input_dim(feature_dim);
        let mut heads = Self {
            feature_dim,
            k,
            opacity: Mlp::random(input, HIDDEN_WIDTH, k, &mut rng),
            color: Mlp::random(input, HIDDEN_WIDTH, 3 * k, &mut rng),
            covariance: Mlp::random(input, HIDDEN_WIDTH, COV_OUTPUTS * k, &mut rng),
        };
        for j in 0..k {
            for a in 0..3 {
                heads.covariance.b2[COV_OUTPUTS * j + a] = INIT_LOG_SCALE;
            }
        }
        heads
    }

    pub fn mlps(&self) -> [&Mlp; 3] {
        [&self.opacity, &self.color, &self.covariance]
    }

    pub fn mlps_mut(&mut self) -> [&mut Mlp; 3] {
        [&mut self.opacity, &mut self.color, &mut self.covariance]
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.feature_dim, self.k)
    }

    pub fn add_assign(&mut self, other: &HeadParameters) {
        for (a, b) in self.mlps_mut().into_iter().zip(other.mlps()) {
            a.add_assign(b);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mlps().iter().all(|m| m.is_finite())
    }
}

/// Activations saved by [`decode_anchor_cached`] for [`heads_backward`].
#[derive(Clone, Debug)]
pub struct DecodeCache {
    input: Vec<f64>,
    pre: [Vec<f64>; 3],
    hidden: [Vec<f64>; 3],
    raw_rotation: Vec<[f64; 4]>,
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn decode_anchor(anchor: &Anchor, heads: &HeadParameters, camera: &Camera) -> Result<Vec<GaussianPrimitive>> {
    decode_anchor_cached(anchor, heads, camera).map(|(p, _)| p)
}

pub fn decode_anchor_cached(
    anchor: &Anchor,
    heads: &HeadParameters,
    camera: &Camera,
) -> Result<(Vec<GaussianPrimitive>, DecodeCache)> {
    let k = heads.k;
    if anchor.k() != k || anchor.feature.len() != heads.feature_dim {
        return Err(Error::Config(format!(
            "anchor has k={} and feature dim {}, heads expect k={} and {}",
            anchor.k(),
            anchor.feature.len(),
            k,
            heads.feature_dim
        )));
    }
    let to_camera = camera.center() - anchor.center;
    let distance = to_camera.norm();
    if !(distance > 0.0) {
        return Err(Error::DegenerateView([anchor.center.x, anchor.center.y, anchor.center.z]));
    }
    let dir = to_camera / distance;
    let mut input = Vec::with_capacity(heads.feature_dim + 4);
    input.extend_from_slice(&anchor.feature);
    input.extend_from_slice(&[distance, dir.x, dir.y, dir.z]);

    let (pre_o, hid_o, out_o) = heads.opacity.forward(&input);
    let (pre_c, hid_c, out_c) = heads.color.forward(&input);
    let (pre_s, hid_s, out_s) = heads.covariance.forward(&input);

    let mut prims = Vec::with_capacity(k);
    let mut raw_rotation = Vec::with_capacity(k);
    for j in 0..k {
        let cov = &out_s[COV_OUTPUTS * j..COV_OUTPUTS * (j + 1)];
        let scale = anchor.scaling.component_mul(&Vector3::new(cov[0].exp(), cov[1].exp(), cov[2].exp()));
        let raw = [cov[3] + 1.0, cov[4], cov[5], cov[6]];
        let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let rotation = raw.map(|v| v / n);
        raw_rotation.push(raw);
        let color = anchor.color_override.unwrap_or_else(|| {
            [sigmoid(out_c[3 * j]), sigmoid(out_c[3 * j + 1]), sigmoid(out_c[3 * j + 2])]
        });
        prims.push(GaussianPrimitive {
            mean: anchor.center + anchor.offsets[j].component_mul(&anchor.scaling),
            scale,
            rotation,
            opacity: sigmoid(out_o[j]),
            color,
            object_id: anchor.object_id(),
        });
    }
    let cache = DecodeCache { input, pre: [pre_o, pre_c, pre_s], hidden: [hid_o, hid_c, hid_s], raw_rotation };
    Ok((prims, cache))
}

/// Upstream gradient for one decoded primitive.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PrimitiveGrad {
    pub mean: Vector3<f64>,
    pub scale: Vector3<f64>,
    /// With respect to the unit quaternion.
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub color: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrad {
    pub feature: Vec<f64>,
    pub offsets: Vec<Vector3<f64>>,
}

/// Reverse pass through the offset formula and the three heads. Head
/// gradients are added into `head_grads`.
pub fn heads_backward(
    anchor: &Anchor,
    heads: &HeadParameters,
    primitives: &[GaussianPrimitive],
    cache: &DecodeCache,
    grads: &[PrimitiveGrad],
    head_grads: &mut HeadParameters,
) -> Result<AnchorGrad> {
    let k = heads.k;
    if grads.len() != k || primitives.len() != k || cache.raw_rotation.len() != k {
        return Err(Error::Usage(format!(
            "backward needs {k} primitives, cache and gradients; got {}, {}, {}",
            primitives.len(),
            cache.raw_rotation.len(),
            grads.len()
        )));
    }
    let mut d_out_o = vec![0.0; k];
    let mut d_out_c = vec![0.0; 3 * k];
    let mut d_out_s = vec![0.0; COV_OUTPUTS * k];
    let mut offsets = Vec::with_capacity(k);
    for (j, (g, p)) in grads.iter().zip(primitives).enumerate() {
        offsets.push(g.mean.component_mul(&anchor.scaling));
        d_out_o[j] = g.opacity * p.opacity * (1.0 - p.opacity);
        if anchor.color_override.is_none() {
            for c in 0..3 {
                d_out_c[3 * j + c] = g.color[c] * p.color[c] * (1.0 - p.color[c]);
            }
        }
        let s = &mut d_out_s[COV_OUTPUTS * j..COV_OUTPUTS * (j + 1)];
        for a in 0..3 {
            s[a] = g.scale[a] * p.scale[a];
        }
        let raw = cache.raw_rotation[j];
        let n = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        let q = p.rotation;
        let dot: f64 = (0..4).map(|i| q[i] * g.rotation[i]).sum();
        for i in 0..4 {
            s[3 + i] = (g.rotation[i] - q[i] * dot) / n;
        }
    }
    let mut d_input = heads.opacity.backward(&cache.input, &cache.pre[0], &cache.hidden[0], &d_out_o, &mut head_grads.opacity);
    for (mlp, grad, idx, d_out) in [
        (&heads.color, &mut head_grads.color, 1, &d_out_c),
        (&heads.covariance, &mut head_grads.covariance, 2, &d_out_s),
    ] {
        let d = mlp.backward(&cache.input, &cache.pre[idx], &cache.hidden[idx], d_out, grad);
        d_input.iter_mut().zip(d).for_each(|(a, b)| *a += b);
    }
    d_input.truncate(heads.feature_dim);
    Ok(AnchorGrad { feature: d_input, offsets })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn camera() -> Camera {
        Camera::look_at(Vector3::new(0.0, -3.0, 0.5), Vector3::zeros(), Vector3::z(), 32, 32, 50.0).unwrap()
    }

    fn anchor(id: u32, k: usize, d: usize) -> Anchor {
        let offsets = (0..k).map(|j| Vector3::new(0.1 * j as f64 - 0.3, 0.05 * j as f64, -0.2)).collect();
        Anchor::new(Vector3::zeros(), Vector3::new(2.0, 2.0, 2.0), vec![0.1; d], offsets, id)
    }

    #[test]
    fn offset_formula() {
        let mut a = anchor(1, 3, 4);
        a.offsets[0] = Vector3::new(0.5, 0.0, 0.0);
        let heads = HeadParameters::random(4, 3, 1);
        let prims = decode_anchor(&a, &heads, &camera()).unwrap();
        assert_eq!(prims[0].mean, Vector3::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn zero_heads_give_half_activations() {
        let heads = HeadParameters::zeros(8, 10);
        let prims = decode_anchor(&anchor(7, 10, 8), &heads, &camera()).unwrap();
        assert_eq!(prims.len(), 10);
        for p in &prims {
            assert_eq!(p.opacity, 0.5);
            assert_eq!(p.color, [0.5, 0.5, 0.5]);
            assert_eq!(p.object_id, 7);
            assert_eq!(p.rotation, [1.0, 0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn camera_at_anchor_is_degenerate() {
        let mut cam = camera();
        let a = anchor(1, 2, 2);
        // Put the camera center exactly at the anchor.
        cam.translation = [0.0, 0.0, 0.0];
        let heads = HeadParameters::zeros(2, 2);
        assert!(matches!(decode_anchor(&a, &heads, &cam), Err(Error::DegenerateView(_))));
    }

    #[test]
    fn offset_gradient_is_mean_gradient_times_scaling() {
        let mut a = anchor(2, 4, 6);
        a.scaling = Vector3::new(0.5, 2.0, 3.0);
        let heads = HeadParameters::random(6, 4, 3);
        let (prims, cache) = decode_anchor_cached(&a, &heads, &camera()).unwrap();
        let grads: Vec<PrimitiveGrad> = (0..4)
            .map(|j| PrimitiveGrad { mean: Vector3::new(1.0, -2.0, j as f64), ..Default::default() })
            .collect();
        let mut hg = heads.zeros_like();
        let g = heads_backward(&a, &heads, &prims, &cache, &grads, &mut hg).unwrap();
        for j in 0..4 {
            assert_eq!(g.offsets[j], grads[j].mean.component_mul(&a.scaling));
        }
        // mean does not depend on the heads
        assert!(hg.opacity.w1.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let a = anchor(2, 3, 5);
        let heads = HeadParameters::random(5, 3, 4);
        let (prims, cache) = decode_anchor_cached(&a, &heads, &camera()).unwrap();
        let grads = vec![PrimitiveGrad::default(); 3];
        let mut hg = heads.zeros_like();
        let g = heads_backward(&a, &heads, &prims, &cache, &grads, &mut hg).unwrap();
        assert!(g.feature.iter().all(|&v| v == 0.0));
        assert_eq!(hg, heads.zeros_like());
    }
}
