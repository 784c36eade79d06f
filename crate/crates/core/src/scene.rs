//! Domain types shared by every stage of the pipeline: labeled point clouds,
//! pinhole cameras, per-view object-ID maps, anchors and decoded Gaussians.
//!
//! Object IDs are `u32`. ID 0 is reserved for unclassified pixels and
//! background; objects are numbered `1..=n_objects`.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on quaternion norms for cameras and primitives.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledPoint {
    pub position: [f64; 3],
    pub color: [f64; 3],
    pub object_id: u32,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledPointCloud {
    pub points: Vec<LabeledPoint>,
}

impl LabeledPointCloud {
    pub fn new(points: Vec<LabeledPoint>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn max_id(&self) -> u32 {
        self.points.iter().map(|p| p.object_id).max().unwrap_or(0)
    }

    /// Copy of the cloud with IDs replaced; geometry and color are untouched.
    pub fn with_ids(&self, ids: &[u32]) -> Result<Self> {
        if ids.len() != self.points.len() {
            return Err(Error::Config(format!(
                "{} ids for {} points",
                ids.len(),
                self.points.len()
            )));
        }
        let points = self
            .points
            .iter()
            .zip(ids)
            .map(|(p, &object_id)| LabeledPoint { object_id, ..*p })
            .collect();
        Ok(Self { points })
    }
}

/// Violations found by [`validate_cloud`], as point indices.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub out_of_range_ids: Vec<usize>,
    pub non_finite_points: Vec<usize>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.out_of_range_ids.is_empty() && self.non_finite_points.is_empty()
    }
}

pub fn validate_cloud(cloud: &LabeledPointCloud, n_objects: u32) -> ValidationReport {
    let mut report = ValidationReport::default();
    for (i, p) in cloud.points.iter().enumerate() {
        if p.object_id > n_objects {
            report.out_of_range_ids.push(i);
        }
        if !p.position.iter().all(|v| v.is_finite()) {
            report.non_finite_points.push(i);
        }
    }
    report
}

/// Pinhole camera. `rotation` is the world-to-camera unit quaternion in
/// `(w, x, y, z)` order; a world point maps to camera space as `R·p + t`.
/// Camera space is x right, y down, z forward. Pixel `(i, j)` is centered on
/// continuous image coordinate `(i, j)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl Camera {
    pub fn validate(&self) -> Result<()> {
        let norm = self.rotation.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || (norm - 1.0).abs() > UNIT_NORM_TOL {
            return Err(Error::InvalidRotation { norm });
        }
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidCamera(format!(
                "focal lengths must be positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera(format!(
                "resolution must be at least 1x1, got {}x{}",
                self.width, self.height
            )));
        }
        if !(self.cx.is_finite() && self.cy.is_finite())
            || !self.translation.iter().all(|v| v.is_finite())
        {
            return Err(Error::InvalidCamera("non-finite parameter".into()));
        }
        Ok(())
    }

    /// Camera looking from `eye` at `target`, with `up` giving the world
    /// direction that should appear upward in the image.
    pub fn look_at(
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        width: u32,
        height: u32,
        fov_y_deg: f64,
    ) -> Result<Self> {
        let forward = target - eye;
        if forward.norm() < 1e-12 {
            return Err(Error::InvalidCamera("eye coincides with target".into()));
        }
        let z = forward.normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-9 {
            return Err(Error::InvalidCamera("view direction parallel to up".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let r = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
        let t = -(r * eye);
        let f = 0.5 * height as f64 / (0.5 * fov_y_deg.to_radians()).tan();
        let cam = Camera {
            fx: f,
            fy: f,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
            width,
            height,
            rotation: [q.w, q.i, q.j, q.k],
            translation: [t.x, t.y, t.z],
        };
        cam.validate()?;
        Ok(cam)
    }

    /// World-to-camera rotation matrix.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        quat_to_matrix(self.rotation)
    }

    pub fn translation_vector(&self) -> Vector3<f64> {
        Vector3::from(self.translation)
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation_matrix() * p + self.translation_vector()
    }

    /// Camera center in world coordinates.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation_matrix().transpose() * self.translation_vector())
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`. The input is used
/// as given; callers are responsible for normalization.
pub fn quat_to_matrix(q: [f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Per-pixel object IDs, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdMap {
    pub width: u32,
    pub height: u32,
    pub ids: Vec<u32>,
}

impl IdMap {
    pub fn new(width: u32, height: u32, ids: Vec<u32>) -> Result<Self> {
        if ids.len() != width as usize * height as usize {
            return Err(Error::Data(format!(
                "id map {}x{} needs {} values, got {}",
                width,
                height,
                width as usize * height as usize,
                ids.len()
            )));
        }
        Ok(Self { width, height, ids })
    }

    pub fn filled(width: u32, height: u32, id: u32) -> Self {
        Self { width, height, ids: vec![id; width as usize * height as usize] }
    }

    pub fn get(&self, x: u32, y: u32) -> u32 {
        self.ids[y as usize * self.width as usize + x as usize]
    }

    pub fn max_id(&self) -> u32 {
        self.ids.iter().copied().max().unwrap_or(0)
    }

    pub fn validate(&self, n_objects: u32) -> Result<()> {
        match self.ids.iter().position(|&id| id > n_objects) {
            Some(i) => Err(Error::InvalidId { id: self.ids[i], n_objects }),
            None => Ok(()),
        }
    }
}

/// Fixed one-hot class vector; index 0 is background.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct OneHotEncoding {
    object_id: u32,
    len: usize,
}

impl OneHotEncoding {
    pub fn object_id(&self) -> u32 {
        self.object_id
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.len];
        v[self.object_id as usize] = 1.0;
        v
    }

    /// Writes the encoding into `out`, which must have length `len()`.
    pub fn write_into(&self, out: &mut [f64]) {
        out.fill(0.0);
        out[self.object_id as usize] = 1.0;
    }
}

pub fn one_hot_encode(object_id: u32, n_objects: u32) -> Result<OneHotEncoding> {
    if object_id > n_objects {
        return Err(Error::InvalidId { id: object_id, n_objects });
    }
    Ok(OneHotEncoding { object_id, len: n_objects as usize + 1 })
}

/// Voxel-centered unit that decodes into `offsets.len()` Gaussians per view.
#[derive(Clone, Debug, PartialEq)]
pub struct Anchor {
    pub center: Vector3<f64>,
    pub scaling: Vector3<f64>,
    pub feature: Vec<f64>,
    pub offsets: Vec<Vector3<f64>>,
    object_id: u32,
    /// Replaces the color-head output when set (scene editing).
    pub color_override: Option<[f64; 3]>,
}

impl Anchor {
    pub fn new(
        center: Vector3<f64>,
        scaling: Vector3<f64>,
        feature: Vec<f64>,
        offsets: Vec<Vector3<f64>>,
        object_id: u32,
    ) -> Self {
        Self { center, scaling, feature, offsets, object_id, color_override: None }
    }

    pub fn object_id(&self) -> u32 {
        self.object_id
    }

    pub fn k(&self) -> usize {
        self.offsets.len()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianPrimitive {
    pub mean: Vector3<f64>,
    pub scale: Vector3<f64>,
    /// Unit quaternion `(w, x, y, z)`.
    pub rotation: [f64; 4],
    pub opacity: f64,
    pub color: [f64; 3],
    pub object_id: u32,
}
