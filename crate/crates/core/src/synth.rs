//! Synthetic labeled scenes rendered by ray casting.
//!
//! The renderer here is deliberately independent of the splatting code: it
//! intersects camera rays with analytic shapes and reports the nearest hit.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{Camera, IdMap, LabeledPoint, LabeledPointCloud};
use crate::train::TrainView;
use crate::voting::{TrackCorrespondences, TrackObservation};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Sphere,
    Box,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectSpec {
    pub object_id: u32,
    pub name: String,
    pub shape: Shape,
    pub center: [f64; 3],
    /// Sphere: diameter (all three equal). Box: edge lengths along x, y, z.
    pub size: [f64; 3],
    pub color: [f64; 3],
}

/// Cameras on a horizontal circle around `target`, looking at it with +z up.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraRing {
    pub count: usize,
    /// Held-out views, placed halfway between training azimuths.
    #[serde(default)]
    pub test_count: usize,
    pub radius: f64,
    /// Degrees above the horizontal plane through `target`.
    pub elevation: f64,
    #[serde(default = "default_fov")]
    pub fov_y: f64,
    #[serde(default)]
    pub target: [f64; 3],
}

fn default_fov() -> f64 {
    40.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub cameras: CameraRing,
    pub width: u32,
    pub height: u32,
    pub points_per_object: usize,
    #[serde(default)]
    pub label_noise: f64,
}

/// Direction towards the light.
const LIGHT: [f64; 3] = [0.3, -0.5, 0.8];
const AMBIENT: f64 = 0.3;

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: String| Err(Error::Config(m));
        if self.objects.is_empty() {
            return cfg("scene has no objects".into());
        }
        let mut ids: Vec<u32> = self.objects.iter().map(|o| o.object_id).collect();
        ids.sort_unstable();
        if ids.iter().enumerate().any(|(i, &id)| id != i as u32 + 1) {
            return cfg(format!("object IDs must be 1..{} without gaps, got {ids:?}", self.objects.len()));
        }
        for o in &self.objects {
            if !o.size.iter().all(|&s| s > 0.0 && s.is_finite()) {
                return cfg(format!("object {} has a non-positive size", o.object_id));
            }
            if o.shape == Shape::Sphere && (o.size[0] != o.size[1] || o.size[0] != o.size[2]) {
                return cfg(format!("sphere {} needs equal size components", o.object_id));
            }
            if !o.color.iter().all(|c| (0.0..=1.0).contains(c)) {
                return cfg(format!("object {} color outside [0, 1]", o.object_id));
            }
        }
        if self.cameras.count == 0 || !(self.cameras.radius > 0.0) {
            return cfg("camera ring needs a positive count and radius".into());
        }
        if !(self.cameras.fov_y > 0.0 && self.cameras.fov_y < 180.0) {
            return cfg(format!("field of view {} outside (0, 180)", self.cameras.fov_y));
        }
        if self.width == 0 || self.height == 0 {
            return cfg("image size must be positive".into());
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return cfg(format!("label noise {} outside [0, 1)", self.label_noise));
        }
        Ok(())
    }

    pub fn n_objects(&self) -> u32 {
        self.objects.len() as u32
    }

    fn ring_camera(&self, azimuth_deg: f64) -> Result<Camera> {
        let r = &self.cameras;
        let (az, el) = (azimuth_deg.to_radians(), r.elevation.to_radians());
        let t = Vector3::from(r.target);
        let eye = t + r.radius * Vector3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin());
        Camera::look_at(eye, t, Vector3::z(), self.width, self.height, r.fov_y)
    }

    pub fn train_cameras(&self) -> Result<Vec<Camera>> {
        let n = self.cameras.count;
        (0..n).map(|i| self.ring_camera(360.0 * i as f64 / n as f64)).collect()
    }

    pub fn test_cameras(&self) -> Result<Vec<Camera>> {
        let (n, m) = (self.cameras.test_count, self.cameras.count.max(1));
        // Halfway between training slots, spread evenly around the ring.
        (0..n).map(|i| self.ring_camera(360.0 * ((i * m / n) as f64 + 0.5) / m as f64)).collect()
    }

    /// Three objects used by the end-to-end tests: two spheres and a box.
    pub fn toy() -> Self {
        Self {
            objects: vec![
                ObjectSpec {
                    object_id: 1,
                    name: "red_ball".into(),
                    shape: Shape::Sphere,
                    center: [-0.45, -0.1, 0.3],
                    size: [0.6; 3],
                    color: [0.85, 0.2, 0.15],
                },
                ObjectSpec {
                    object_id: 2,
                    name: "green_box".into(),
                    shape: Shape::Box,
                    center: [0.45, -0.15, 0.25],
                    size: [0.5, 0.4, 0.5],
                    color: [0.2, 0.75, 0.3],
                },
                ObjectSpec {
                    object_id: 3,
                    name: "blue_ball".into(),
                    shape: Shape::Sphere,
                    center: [0.0, 0.5, 0.2],
                    size: [0.4; 3],
                    color: [0.2, 0.35, 0.9],
                },
            ],
            cameras: CameraRing {
                count: 16,
                test_count: 4,
                radius: 2.6,
                elevation: 30.0,
                fov_y: 40.0,
                target: [0.0, 0.0, 0.25],
            },
            width: 128,
            height: 128,
            points_per_object: 4000,
            label_noise: 0.0,
        }
    }

    /// Two spheres that overlap on screen from most ring positions.
    pub fn overlapping() -> Self {
        let mut s = Self::toy();
        s.objects = vec![
            ObjectSpec {
                object_id: 1,
                name: "front".into(),
                shape: Shape::Sphere,
                center: [0.0, 0.0, 0.3],
                size: [0.6; 3],
                color: [0.9, 0.6, 0.1],
            },
            ObjectSpec {
                object_id: 2,
                name: "back".into(),
                shape: Shape::Box,
                center: [0.35, 0.35, 0.35],
                size: [0.5, 0.5, 0.7],
                color: [0.2, 0.5, 0.85],
            },
        ];
        s
    }
}

/// Nearest positive ray parameter and outward normal.
fn intersect(o: &ObjectSpec, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
    let c = Vector3::from(o.center);
    match o.shape {
        Shape::Sphere => {
            let r = 0.5 * o.size[0];
            let oc = origin - c;
            let b = oc.dot(dir);
            let cc = oc.norm_squared() - r * r;
            let disc = b * b - cc;
            if disc < 0.0 {
                return None;
            }
            let s = disc.sqrt();
            let t = if -b - s > 0.0 { -b - s } else { -b + s };
            (t > 0.0).then(|| (t, (origin + t * dir - c) / r))
        }
        Shape::Box => {
            let half = Vector3::from(o.size) * 0.5;
            let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
            let mut axis = 0;
            for a in 0..3 {
                let lo = c[a] - half[a];
                let hi = c[a] + half[a];
                if dir[a] == 0.0 {
                    if origin[a] < lo || origin[a] > hi {
                        return None;
                    }
                    continue;
                }
                let (mut ta, mut tb) = ((lo - origin[a]) / dir[a], (hi - origin[a]) / dir[a]);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                if ta > t0 {
                    t0 = ta;
                    axis = a;
                }
                t1 = t1.min(tb);
            }
            if t0 > t1 || t1 <= 0.0 || t0 <= 0.0 {
                return None;
            }
            let mut n = Vector3::zeros();
            n[axis] = -dir[axis].signum();
            Some((t0, n))
        }
    }
}

/// Nearest hit over all objects: `(t, object index, normal)`.
fn cast(spec: &SceneSpec, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, usize, Vector3<f64>)> {
    let mut best: Option<(f64, usize, Vector3<f64>)> = None;
    for (i, o) in spec.objects.iter().enumerate() {
        if let Some((t, n)) = intersect(o, origin, dir) {
            if best.map_or(true, |(bt, _, _)| t < bt) {
                best = Some((t, i, n));
            }
        }
    }
    best
}

fn shade(albedo: [f64; 3], normal: &Vector3<f64>) -> [f64; 3] {
    let l = Vector3::from(LIGHT).normalize();
    let k = AMBIENT + (1.0 - AMBIENT) * normal.dot(&l).max(0.0);
    albedo.map(|a| a * k)
}

fn pixel_ray(camera: &Camera, x: f64, y: f64) -> (Vector3<f64>, Vector3<f64>) {
    let d_cam = Vector3::new((x - camera.cx) / camera.fx, (y - camera.cy) / camera.fy, 1.0);
    let d = camera.rotation_matrix().transpose() * d_cam;
    (camera.center(), d.normalize())
}

/// Exact RGB (`height × width × 3`) and object-ID map of one view.
pub fn render_oracle(spec: &SceneSpec, camera: &Camera) -> (Vec<f64>, IdMap) {
    let (w, h) = (camera.width, camera.height);
    let mut rgb = vec![0.0; (w * h * 3) as usize];
    let mut ids = vec![0u32; (w * h) as usize];
    for y in 0..h {
        for x in 0..w {
            let (o, d) = pixel_ray(camera, x as f64, y as f64);
            if let Some((_, i, n)) = cast(spec, &o, &d) {
                let p = (y * w + x) as usize;
                let obj = &spec.objects[i];
                rgb[3 * p..3 * p + 3].copy_from_slice(&shade(obj.color, &n));
                ids[p] = obj.object_id;
            }
        }
    }
    (rgb, IdMap { width: w, height: h, ids })
}

fn sample_surface(o: &ObjectSpec, rng: &mut ChaCha8Rng) -> Vector3<f64> {
    let c = Vector3::from(o.center);
    match o.shape {
        Shape::Sphere => {
            // Uniform height and azimuth give a uniform sphere sample.
            let z: f64 = rng.gen_range(-1.0..=1.0);
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).max(0.0).sqrt();
            let v = Vector3::new(r * phi.cos(), r * phi.sin(), z);
            c + 0.5 * o.size[0] * v
        }
        Shape::Box => {
            let s = o.size;
            let areas = [s[1] * s[2], s[0] * s[2], s[0] * s[1]];
            let total: f64 = 2.0 * areas.iter().sum::<f64>();
            let mut pick = rng.gen::<f64>() * total;
            let mut face = 0;
            for (i, a) in areas.iter().enumerate() {
                if pick < 2.0 * a || i == 2 {
                    face = i;
                    break;
                }
                pick -= 2.0 * a;
            }
            let mut local: Vector3<f64> = Vector3::from_fn(|i, _| (rng.gen::<f64>() - 0.5) * s[i]);
            local[face] = if rng.gen::<bool>() { 0.5 } else { -0.5 } * s[face];
            c + local
        }
    }
}

fn project(camera: &Camera, p: &Vector3<f64>) -> Option<(u32, u32)> {
    let q = camera.rotation_matrix() * p + camera.translation_vector();
    if q.z <= 0.0 {
        return None;
    }
    let x = (camera.fx * q.x / q.z + camera.cx).round();
    let y = (camera.fy * q.y / q.z + camera.cy).round();
    (x >= 0.0 && y >= 0.0 && x < camera.width as f64 && y < camera.height as f64).then_some((x as u32, y as u32))
}

/// Everything a training run consumes, plus the held-out views.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub names: BTreeMap<u32, String>,
    pub cloud: LabeledPointCloud,
    pub tracks: TrackCorrespondences,
    pub train: Vec<TrainView>,
    pub test: Vec<TrainView>,
}

impl Dataset {
    pub fn n_objects(&self) -> u32 {
        self.names.keys().copied().max().unwrap_or(0)
    }
}

/// Renders every view, samples surface points (with label noise) and records
/// each point's unoccluded observations in the training views.
pub fn generate(spec: &SceneSpec, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let views = |cams: Vec<Camera>| -> Vec<TrainView> {
        cams.into_iter()
            .map(|camera| {
                let (rgb, ids) = render_oracle(spec, &camera);
                TrainView { camera, rgb, ids }
            })
            .collect()
    };
    let train_cams = spec.train_cameras()?;
    let test = views(spec.test_cameras()?);

    let n = spec.n_objects();
    let mut points = Vec::with_capacity(spec.points_per_object * spec.objects.len());
    let mut tracks = Vec::with_capacity(points.capacity());
    let mut objects: Vec<&ObjectSpec> = spec.objects.iter().collect();
    objects.sort_by_key(|o| o.object_id);
    for o in objects {
        for _ in 0..spec.points_per_object {
            let p = sample_surface(o, &mut rng);
            let mut id = o.object_id;
            if rng.gen::<f64>() < spec.label_noise {
                // Uniform over the n other labels in 0..=n.
                let r = rng.gen_range(0..n);
                id = if r >= id { r + 1 } else { r };
            }
            let mut track = Vec::new();
            for (v, cam) in train_cams.iter().enumerate() {
                let Some((x, y)) = project(cam, &p) else { continue };
                let origin = cam.center();
                let to = p - origin;
                let dist = to.norm();
                let visible = cast(spec, &origin, &(to / dist)).is_some_and(|(t, _, _)| t >= dist - 1e-9 * (1.0 + dist) - 1e-7);
                if visible {
                    track.push(TrackObservation { view: v as u32, x, y });
                }
            }
            points.push(LabeledPoint { position: p.into(), color: o.color, object_id: id });
            tracks.push(track);
        }
    }
    let names = spec.objects.iter().map(|o| (o.object_id, o.name.clone())).collect();
    Ok(Dataset {
        names,
        cloud: LabeledPointCloud::new(points),
        tracks: TrackCorrespondences { tracks },
        train: views(train_cams),
        test,
    })
}
