//! 3D covariance construction and EWA projection of Gaussians to the image
//! plane, with their reverse-mode derivatives.

use nalgebra::{Matrix2x3, Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::scene::{quat_to_matrix, Camera, UNIT_NORM_TOL};

/// Primitives closer than this (camera-space z, meters) are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Isotropic low-pass added to every projected covariance, in pixels².
pub const LOW_PASS: f64 = 0.3;

/// `R·diag(s)²·Rᵀ` for scale `s` and unit quaternion `q = (w, x, y, z)`.
pub fn compute_cov3d(scale: &Vector3<f64>, q: [f64; 4]) -> Result<Matrix3<f64>> {
    let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
        return Err(Error::InvalidRotation { norm });
    }
    if !scale.iter().all(|&s| s > 0.0 && s.is_finite()) {
        return Err(Error::Data(format!("scale must be positive, got {scale:?}")));
    }
    Ok(cov3d_unchecked(scale, q))
}

fn cov3d_unchecked(scale: &Vector3<f64>, q: [f64; 4]) -> Matrix3<f64> {
    let m = quat_to_matrix(q) * Matrix3::from_diagonal(scale);
    m * m.transpose()
}

/// Gradients of a scalar through `Σ = R(q)·diag(s)²·R(q)ᵀ`. `d_cov` is the
/// symmetric matrix gradient. The quaternion gradient is with respect to the
/// polynomial form of `R(q)` (no normalization).
pub fn cov3d_backward(
    scale: &Vector3<f64>,
    q: [f64; 4],
    d_cov: &Matrix3<f64>,
) -> (Vector3<f64>, [f64; 4]) {
    let r = quat_to_matrix(q);
    let m = r * Matrix3::from_diagonal(scale);
    let d_m = (d_cov + d_cov.transpose()) * m;
    let mut d_scale = Vector3::zeros();
    let mut d_r = Matrix3::zeros();
    for j in 0..3 {
        for i in 0..3 {
            d_scale[j] += d_m[(i, j)] * r[(i, j)];
            d_r[(i, j)] = d_m[(i, j)] * scale[j];
        }
    }
    (d_scale, quat_matrix_backward(q, &d_r))
}

fn quat_matrix_backward(q: [f64; 4], d_r: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = q;
    let g = |i: usize, j: usize| d_r[(i, j)];
    let dw = 2.0
        * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1));
    let dx = 2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - w * g(1, 2) + z * g(2, 0) + w * g(2, 1))
        - 4.0 * x * (g(1, 1) + g(2, 2));
    let dy = 2.0 * (x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0) + z * g(2, 1))
        - 4.0 * y * (g(0, 0) + g(2, 2));
    let dz = 2.0 * (-w * g(0, 1) + x * g(0, 2) + w * g(1, 0) + y * g(1, 2) + x * g(2, 0) + y * g(2, 1))
        - 4.0 * z * (g(0, 0) + g(1, 1));
    [dw, dx, dy, dz]
}

/// Image-plane footprint of a 3D Gaussian plus what its backward pass needs.
#[derive(Clone, Debug)]
pub struct ProjectedGeometry {
    pub mean2d: [f64; 2],
    /// `(xx, xy, yy)` entries of the dilated 2D covariance, pixels².
    pub cov2d: [f64; 3],
    pub depth: f64,
    pub cache: ProjectionCache,
}

#[derive(Clone, Debug)]
pub struct ProjectionCache {
    cam_mean: Vector3<f64>,
    cov3d: Matrix3<f64>,
    /// `J·W`, the linearized world-to-pixel map.
    jw: Matrix2x3<f64>,
    scale: Vector3<f64>,
    rotation: [f64; 4],
}

/// Perspective projection of the mean and EWA projection of the covariance.
/// `None` when the mean is nearer than [`NEAR_PLANE`] or the 3σ extent misses
/// the image.
pub fn project_geometry(
    mean: &Vector3<f64>,
    scale: &Vector3<f64>,
    rotation: [f64; 4],
    camera: &Camera,
) -> Result<Option<ProjectedGeometry>> {
    let cov3d = compute_cov3d(scale, rotation)?;
    let w = camera.rotation_matrix();
    let t = w * mean + camera.translation_vector();
    if !(t.z >= NEAR_PLANE) {
        return Ok(None);
    }
    let (fx, fy) = (camera.fx, camera.fy);
    let inv_z = 1.0 / t.z;
    let j = Matrix2x3::new(
        fx * inv_z,
        0.0,
        -fx * t.x * inv_z * inv_z,
        0.0,
        fy * inv_z,
        -fy * t.y * inv_z * inv_z,
    );
    let jw = j * w;
    let c = jw * cov3d * jw.transpose();
    let cov2d = [c[(0, 0)] + LOW_PASS, 0.5 * (c[(0, 1)] + c[(1, 0)]), c[(1, 1)] + LOW_PASS];
    let mean2d = [fx * t.x * inv_z + camera.cx, fy * t.y * inv_z + camera.cy];

    let mid = 0.5 * (cov2d[0] + cov2d[2]);
    let det = cov2d[0] * cov2d[2] - cov2d[1] * cov2d[1];
    let lambda_max = mid + (mid * mid - det).max(0.0).sqrt();
    let r = 3.0 * lambda_max.sqrt();
    let (w_px, h_px) = (camera.width as f64, camera.height as f64);
    if mean2d[0] + r < -0.5
        || mean2d[0] - r > w_px - 0.5
        || mean2d[1] + r < -0.5
        || mean2d[1] - r > h_px - 0.5
    {
        return Ok(None);
    }

    Ok(Some(ProjectedGeometry {
        mean2d,
        cov2d,
        depth: t.z,
        cache: ProjectionCache { cam_mean: t, cov3d, jw, scale: *scale, rotation },
    }))
}

/// Gradients of a projected footprint with respect to the 3D Gaussian.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GeometryGrad {
    pub mean: Vector3<f64>,
    pub scale: Vector3<f64>,
    /// With respect to the unit quaternion entries.
    pub rotation: [f64; 4],
}

/// Chains `d_mean2d` and `d_cov2d` (gradient w.r.t. the `(xx, xy, yy)`
/// parameters) back to mean, scale and rotation.
pub fn project_geometry_backward(
    cache: &ProjectionCache,
    camera: &Camera,
    d_mean2d: [f64; 2],
    d_cov2d: [f64; 3],
) -> GeometryGrad {
    let t = cache.cam_mean;
    let (fx, fy) = (camera.fx, camera.fy);
    let w = camera.rotation_matrix();
    let inv_z = 1.0 / t.z;
    let inv_z2 = inv_z * inv_z;

    // Symmetric matrix gradient of the 2D covariance.
    let g = nalgebra::Matrix2::new(d_cov2d[0], 0.5 * d_cov2d[1], 0.5 * d_cov2d[1], d_cov2d[2]);

    // cov2d = T Σ Tᵀ with T = J W.
    let d_cov3d = cache.jw.transpose() * g * cache.jw;
    let d_t_mat = 2.0 * g * cache.jw * cache.cov3d;
    let d_j = d_t_mat * w.transpose();

    let mut d_cam = Vector3::new(
        d_mean2d[0] * fx * inv_z,
        d_mean2d[1] * fy * inv_z,
        -(d_mean2d[0] * fx * t.x + d_mean2d[1] * fy * t.y) * inv_z2,
    );
    // J = [[fx/z, 0, -fx x/z²], [0, fy/z, -fy y/z²]]
    d_cam.x += d_j[(0, 2)] * (-fx * inv_z2);
    d_cam.y += d_j[(1, 2)] * (-fy * inv_z2);
    d_cam.z += d_j[(0, 0)] * (-fx * inv_z2)
        + d_j[(1, 1)] * (-fy * inv_z2)
        + d_j[(0, 2)] * (2.0 * fx * t.x * inv_z2 * inv_z)
        + d_j[(1, 2)] * (2.0 * fy * t.y * inv_z2 * inv_z);

    let (d_scale, d_rot) = cov3d_backward(&cache.scale, cache.rotation, &d_cov3d);
    GeometryGrad { mean: w.transpose() * d_cam, scale: d_scale, rotation: d_rot }
}


#[cfg(test)]
mod tests {
    use super::*;

    fn camera() -> Camera {
        Camera {
            fx: 100.0,
            fy: 100.0,
            cx: 32.0,
            cy: 32.0,
            width: 64,
            height: 64,
            rotation: [1.0, 0.0, 0.0, 0.0],
            translation: [0.0, 0.0, 0.0],
        }
    }

    const IDENTITY: [f64; 4] = [1.0, 0.0, 0.0, 0.0];

    #[test]
    fn cov3d_examples() {
        let c = compute_cov3d(&Vector3::new(1.0, 1.0, 1.0), IDENTITY).unwrap();
        assert!((c - Matrix3::identity()).norm() < 1e-15);
        let c = compute_cov3d(&Vector3::new(2.0, 1.0, 1.0), IDENTITY).unwrap();
        assert!((c - Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0))).norm() < 1e-15);
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let c = compute_cov3d(&Vector3::new(2.0, 1.0, 1.0), [h, 0.0, 0.0, h]).unwrap();
        assert!((c - Matrix3::from_diagonal(&Vector3::new(1.0, 4.0, 1.0))).norm() < 1e-12);
        assert!(matches!(
            compute_cov3d(&Vector3::new(1.0, 1.0, 1.0), [1.0, 0.1, 0.0, 0.0]),
            Err(Error::InvalidRotation { .. })
        ));
    }

    #[test]
    fn on_axis_isotropic_projection() {
        let cam = camera();
        let s = Vector3::new(0.05, 0.05, 0.05);
        let g = project_geometry(&Vector3::new(0.0, 0.0, 2.0), &s, IDENTITY, &cam)
            .unwrap()
            .unwrap();
        assert!((g.cov2d[0] - g.cov2d[2]).abs() < 1e-6);
        assert!(g.cov2d[1].abs() < 1e-6);
        assert_eq!(g.mean2d, [32.0, 32.0]);

        let g2 = project_geometry(&Vector3::new(0.0, 0.0, 4.0), &s, IDENTITY, &cam)
            .unwrap()
            .unwrap();
        let sigma1 = (g.cov2d[0] - LOW_PASS).sqrt();
        let sigma2 = (g2.cov2d[0] - LOW_PASS).sqrt();
        // pinhole: σ_px = f·s/z
        assert!((sigma1 - 100.0 * 0.05 / 2.0).abs() < 1e-3);
        assert!((sigma2 - sigma1 / 2.0).abs() < 1e-3);

        assert!(project_geometry(&Vector3::new(0.0, 0.0, -1.0), &s, IDENTITY, &cam)
            .unwrap()
            .is_none());
        // far outside the image
        assert!(project_geometry(&Vector3::new(50.0, 0.0, 2.0), &s, IDENTITY, &cam)
            .unwrap()
            .is_none());
    }

    fn normalize(q: [f64; 4]) -> [f64; 4] {
        let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
        q.map(|v| v / n)
    }

    /// Scalar functional of the projection used for finite differences.
    fn objective(
        mean: &Vector3<f64>,
        scale: &Vector3<f64>,
        raw_q: [f64; 4],
        cam: &Camera,
        w: &[f64; 5],
    ) -> f64 {
        let g = project_geometry(mean, scale, normalize(raw_q), cam).unwrap().unwrap();
        w[0] * g.mean2d[0] + w[1] * g.mean2d[1] + w[2] * g.cov2d[0] + w[3] * g.cov2d[1]
            + w[4] * g.cov2d[2]
    }

    #[test]
    fn projection_gradients_match_finite_differences() {
        let cam = Camera::look_at(
            Vector3::new(2.0, -3.0, 1.0),
            Vector3::new(0.1, 0.0, 0.0),
            Vector3::z(),
            64,
            64,
            50.0,
        )
        .unwrap();
        let mean = Vector3::new(0.2, 0.1, -0.1);
        let scale = Vector3::new(0.1, 0.05, 0.2);
        let raw_q = [0.9, 0.3, -0.2, 0.4];
        let weights = [0.3, -0.7, 0.2, 0.5, -0.4];

        let q = normalize(raw_q);
        let g = project_geometry(&mean, &scale, q, &cam).unwrap().unwrap();
        let grad = project_geometry_backward(
            &g.cache,
            &cam,
            [weights[0], weights[1]],
            [weights[2], weights[3], weights[4]],
        );
        let qn = raw_q.iter().map(|v| v * v).sum::<f64>().sqrt();
        let dot: f64 = (0..4).map(|i| q[i] * grad.rotation[i]).sum();
        let d_raw: Vec<f64> = (0..4).map(|i| (grad.rotation[i] - q[i] * dot) / qn).collect();

        let h = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let fd = (plus - minus) / (2.0 * h);
            assert!(
                (analytic - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                "analytic {analytic} vs fd {fd}"
            );
        };
        for i in 0..3 {
            let mut p = mean;
            p[i] += h;
            let mut m = mean;
            m[i] -= h;
            check(
                grad.mean[i],
                objective(&p, &scale, raw_q, &cam, &weights),
                objective(&m, &scale, raw_q, &cam, &weights),
            );
            let mut p = scale;
            p[i] += h;
            let mut m = scale;
            m[i] -= h;
            check(
                grad.scale[i],
                objective(&mean, &p, raw_q, &cam, &weights),
                objective(&mean, &m, raw_q, &cam, &weights),
            );
        }
        for i in 0..4 {
            let mut p = raw_q;
            p[i] += h;
            let mut m = raw_q;
            m[i] -= h;
            check(
                d_raw[i],
                objective(&mean, &scale, p, &cam, &weights),
                objective(&mean, &scale, m, &cam, &weights),
            );
        }
    }
}
