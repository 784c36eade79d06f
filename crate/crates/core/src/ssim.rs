//! Structural similarity over interleaved images, with its gradient.
//!
//! Statistics use an 11×11 Gaussian window (σ = 1.5) evaluated only where the
//! window fits entirely inside the image; the score is the mean over those
//! positions and over channels.

use crate::error::{Error, Result};

pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const C1: f64 = 0.01 * 0.01;
pub const C2: f64 = 0.03 * 0.03;

fn kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let r = (WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

struct Blur {
    k: [f64; WINDOW],
    w: usize,
    h: usize,
    ow: usize,
    oh: usize,
}

impl Blur {
    fn new(w: usize, h: usize) -> Self {
        Self { k: kernel(), w, h, ow: w + 1 - WINDOW, oh: h + 1 - WINDOW }
    }

    /// `w×h` plane → `ow×oh` plane.
    fn apply(&self, src: &[f64]) -> Vec<f64> {
        let mut horiz = vec![0.0; self.h * self.ow];
        for y in 0..self.h {
            let row = &src[y * self.w..(y + 1) * self.w];
            for x in 0..self.ow {
                horiz[y * self.ow + x] = self.k.iter().zip(&row[x..x + WINDOW]).map(|(a, b)| a * b).sum();
            }
        }
        let mut out = vec![0.0; self.oh * self.ow];
        for y in 0..self.oh {
            for (t, &kt) in self.k.iter().enumerate() {
                let row = &horiz[(y + t) * self.ow..(y + t + 1) * self.ow];
                for (o, &v) in out[y * self.ow..(y + 1) * self.ow].iter_mut().zip(row) {
                    *o += kt * v;
                }
            }
        }
        out
    }

    /// Adjoint of [`Blur::apply`].
    fn transpose(&self, src: &[f64]) -> Vec<f64> {
        let mut horiz = vec![0.0; self.h * self.ow];
        for y in 0..self.oh {
            for (t, &kt) in self.k.iter().enumerate() {
                let row = &src[y * self.ow..(y + 1) * self.ow];
                for (o, &v) in horiz[(y + t) * self.ow..(y + t + 1) * self.ow].iter_mut().zip(row) {
                    *o += kt * v;
                }
            }
        }
        let mut out = vec![0.0; self.h * self.w];
        for y in 0..self.h {
            for x in 0..self.ow {
                let v = horiz[y * self.ow + x];
                for (t, &kt) in self.k.iter().enumerate() {
                    out[y * self.w + x + t] += kt * v;
                }
            }
        }
        out
    }
}

fn check(a: &[f64], b: &[f64], width: usize, height: usize, channels: usize) -> Result<()> {
    if a.len() != b.len() || a.len() != width * height * channels {
        return Err(Error::Usage(format!(
            "image sizes differ: {} and {} values for {width}×{height}×{channels}",
            a.len(),
            b.len()
        )));
    }
    if width < WINDOW || height < WINDOW {
        return Err(Error::Usage(format!("image {width}×{height} is smaller than the {WINDOW}×{WINDOW} window")));
    }
    Ok(())
}

fn plane(img: &[f64], channels: usize, c: usize) -> Vec<f64> {
    img.iter().skip(c).step_by(channels).copied().collect()
}

pub fn ssim(a: &[f64], b: &[f64], width: usize, height: usize, channels: usize) -> Result<f64> {
    ssim_impl(a, b, width, height, channels, false).map(|(s, _)| s)
}

/// Returns SSIM and its gradient with respect to `a`.
pub fn ssim_with_grad(a: &[f64], b: &[f64], width: usize, height: usize, channels: usize) -> Result<(f64, Vec<f64>)> {
    ssim_impl(a, b, width, height, channels, true)
}

fn ssim_impl(
    a: &[f64],
    b: &[f64],
    width: usize,
    height: usize,
    channels: usize,
    want_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    check(a, b, width, height, channels)?;
    let blur = Blur::new(width, height);
    let count = (blur.ow * blur.oh * channels) as f64;
    let mut total = 0.0;
    let mut grad = if want_grad { vec![0.0; a.len()] } else { Vec::new() };
    for c in 0..channels {
        let x = plane(a, channels, c);
        let y = plane(b, channels, c);
        let sq = |v: &[f64]| v.iter().map(|t| t * t).collect::<Vec<_>>();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
        let mx = blur.apply(&x);
        let my = blur.apply(&y);
        let exx = blur.apply(&sq(&x));
        let eyy = blur.apply(&sq(&y));
        let exy = blur.apply(&xy);
        let n = mx.len();
        let (mut d_mx, mut d_sxx, mut d_sxy) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
        for i in 0..n {
            let sxx = exx[i] - mx[i] * mx[i];
            let syy = eyy[i] - my[i] * my[i];
            let sxy = exy[i] - mx[i] * my[i];
            let num1 = 2.0 * mx[i] * my[i] + C1;
            let num2 = 2.0 * sxy + C2;
            let den1 = mx[i] * mx[i] + my[i] * my[i] + C1;
            let den2 = sxx + syy + C2;
            let s = num1 * num2 / (den1 * den2);
            total += s;
            if want_grad {
                d_mx[i] = 2.0 * my[i] * num2 / (den1 * den2) - s * 2.0 * mx[i] / den1;
                d_sxx[i] = -s / den2;
                d_sxy[i] = 2.0 * num1 / (den1 * den2);
            }
        }
        if want_grad {
            // sxx = E[x²] − mx², sxy = E[xy] − mx·my.
            let lin: Vec<f64> =
                (0..n).map(|i| d_mx[i] - 2.0 * mx[i] * d_sxx[i] - my[i] * d_sxy[i]).collect();
            let g_lin = blur.transpose(&lin);
            let g_sq = blur.transpose(&d_sxx);
            let g_xy = blur.transpose(&d_sxy);
            for p in 0..width * height {
                grad[p * channels + c] = (g_lin[p] + 2.0 * x[p] * g_sq[p] + y[p] * g_xy[p]) / count;
            }
        }
    }
    Ok((total / count, grad))
}
