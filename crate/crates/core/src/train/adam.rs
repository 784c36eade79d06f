//! Adaptive-moment optimizer over flat parameter buffers.

use crate::error::{Error, Result};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-15;

/// First and second moment estimates for one parameter buffer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// One update of `params` with bias correction for step `step` (1-based).
pub fn adam_update(params: &mut [f64], grads: &[f64], moments: &mut Moments, lr: f64, step: u64) -> Result<()> {
    let n = params.len();
    if grads.len() != n || moments.m.len() != n || moments.v.len() != n {
        return Err(Error::Usage(format!(
            "optimizer shapes differ: {n} parameters, {} gradients, {} moments",
            grads.len(),
            moments.m.len()
        )));
    }
    let step = step.max(1) as i32;
    let bc1 = 1.0 - BETA1.powi(step);
    let bc2 = 1.0 - BETA2.powi(step);
    for i in 0..n {
        let g = grads[i];
        let m = BETA1 * moments.m[i] + (1.0 - BETA1) * g;
        let v = BETA2 * moments.v[i] + (1.0 - BETA2) * g * g;
        moments.m[i] = m;
        moments.v[i] = v;
        params[i] -= lr * (m / bc1) / ((v / bc2).sqrt() + EPSILON);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_fresh_parameters() {
        let mut p = vec![1.0, -2.0];
        let mut mo = Moments::zeros(2);
        adam_update(&mut p, &[0.0, 0.0], &mut mo, 0.1, 1).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);

        let mut mo = Moments { m: vec![0.5, 0.5], v: vec![0.1, 0.1] };
        adam_update(&mut p, &[0.0, 0.0], &mut mo, 0.1, 3).unwrap();
        assert_eq!(mo.m, vec![0.45, 0.45]);
        assert!((mo.v[0] - 0.0999).abs() < 1e-15);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![0.0];
        let mut mo = Moments::zeros(1);
        adam_update(&mut p, &[1.0], &mut mo, 0.1, 1).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction.
        assert!((p[0] + 0.1).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch() {
        let mut mo = Moments::zeros(2);
        assert!(matches!(adam_update(&mut [0.0; 2], &[0.0; 3], &mut mo, 0.1, 1), Err(Error::Usage(_))));
    }
}
