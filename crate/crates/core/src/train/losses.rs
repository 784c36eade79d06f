//! Training objectives. Each returns the loss and, where the trainer needs
//! it, the gradient with respect to the rendered values.

use crate::error::{Error, Result};
use crate::raster::RenderTarget;
use crate::scene::IdMap;
use crate::ssim::{ssim, ssim_with_grad};

use super::config::{LossWeights, SemanticMode};

/// Probabilities are clamped to `[PROB_FLOOR, 1 − PROB_FLOOR]` before the log.
pub const PROB_FLOOR: f64 = 1e-6;

fn same_len(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Usage(format!("image sizes differ: {} vs {} values", a.len(), b.len())));
    }
    Ok(())
}

/// Mean absolute difference over all values.
pub fn l1_loss(rendered: &[f64], gt: &[f64]) -> Result<f64> {
    same_len(rendered, gt)?;
    if rendered.is_empty() {
        return Ok(0.0);
    }
    Ok(rendered.iter().zip(gt).map(|(a, b)| (a - b).abs()).sum::<f64>() / rendered.len() as f64)
}

/// [`l1_loss`] and its (sub)gradient with respect to `rendered`.
pub fn l1_loss_with_grad(rendered: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>)> {
    let loss = l1_loss(rendered, gt)?;
    let inv = 1.0 / rendered.len().max(1) as f64;
    let grad = rendered
        .iter()
        .zip(gt)
        .map(|(a, b)| {
            let d = a - b;
            if d > 0.0 {
                inv
            } else if d < 0.0 {
                -inv
            } else {
                0.0
            }
        })
        .collect();
    Ok((loss, grad))
}

/// `1 − SSIM` over `height × width × 3` images.
pub fn ssim_loss(rendered: &[f64], gt: &[f64], width: usize, height: usize) -> Result<f64> {
    ssim(rendered, gt, width, height, 3).map(|s| 1.0 - s)
}

pub fn ssim_loss_with_grad(rendered: &[f64], gt: &[f64], width: usize, height: usize) -> Result<(f64, Vec<f64>)> {
    let (s, mut g) = ssim_with_grad(rendered, gt, width, height, 3)?;
    g.iter_mut().for_each(|v| *v = -*v);
    Ok((1.0 - s, g))
}

fn check_gt(target: &RenderTarget, gt: &IdMap) -> Result<usize> {
    if gt.width as usize != target.width || gt.height as usize != target.height {
        return Err(Error::Usage(format!(
            "ID map is {}×{}, render is {}×{}",
            gt.width, gt.height, target.width, target.height
        )));
    }
    let sc = target.semantic_channels();
    if let Some(&bad) = gt.ids.iter().find(|&&id| id as usize >= sc) {
        return Err(Error::Data(format!("ground-truth ID {bad} has no channel among {sc} semantic channels")));
    }
    Ok(sc)
}

/// Per-pixel mean of `−ln P_gt` over the semantic channels, and its gradient
/// as a `pixels × semantic channels` array.
pub fn semantic_ce_loss(target: &RenderTarget, gt: &IdMap) -> Result<(f64, Vec<f64>)> {
    let sc = check_gt(target, gt)?;
    let n = target.width * target.height;
    let mut grad = vec![0.0; n * sc];
    if n == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    for (p, &id) in gt.ids.iter().enumerate() {
        let prob = target.semantic(p)[id as usize];
        loss -= prob.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR).ln();
        if prob < 1.0 - PROB_FLOOR {
            grad[p * sc + id as usize] = -inv / prob.max(PROB_FLOOR);
        }
    }
    Ok((loss * inv, grad))
}

/// Mean absolute difference between the composited semantic channels and the
/// one-hot ground truth, with gradient (`pixels × semantic channels`).
pub fn learnable_semantic_loss(target: &RenderTarget, gt: &IdMap, mode: SemanticMode) -> Result<(f64, Vec<f64>)> {
    if mode != SemanticMode::Learnable {
        return Err(Error::Usage("the learnable semantic loss needs learnable semantics".into()));
    }
    let sc = check_gt(target, gt)?;
    let n = target.width * target.height;
    let mut grad = vec![0.0; n * sc];
    if n == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / (n * sc) as f64;
    let mut loss = 0.0;
    for (p, &id) in gt.ids.iter().enumerate() {
        for (c, &v) in target.semantic(p).iter().enumerate() {
            let d = v - if c == id as usize { 1.0 } else { 0.0 };
            loss += d.abs();
            grad[p * sc + c] = if d > 0.0 { inv } else if d < 0.0 { -inv } else { 0.0 };
        }
    }
    Ok((loss * inv, grad))
}

/// Individual loss terms of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossComponents {
    pub l1: f64,
    pub ssim: f64,
    pub volume: f64,
    pub semantic: f64,
}

pub fn total_loss(c: &LossComponents, w: &LossWeights) -> Result<f64> {
    for (name, v) in [("l1", c.l1), ("ssim", c.ssim), ("volume", c.volume), ("semantic", c.semantic)] {
        if !v.is_finite() {
            return Err(Error::NonFinite { component: name, value: v });
        }
    }
    Ok(c.l1 + w.ssim * c.ssim + w.volume * c.volume + w.semantic * c.semantic)
}
