//! Differentiable splatting: covariance construction, EWA projection, tiled
//! compositing over a variable number of channels, and their backward passes.

mod composite;
mod projection;

pub use composite::{
    argmax_id, rasterize_backward, rasterize_forward, rasterize_naive, ProjectedSplat,
    RenderTarget, SplatGrad, ALPHA_MAX, ALPHA_MIN, COLOR_CHANNELS, TILE_SIZE, TRANSMITTANCE_MIN,
};
pub use projection::{
    compute_cov3d, cov3d_backward, project_geometry, project_geometry_backward, GeometryGrad,
    ProjectedGeometry, ProjectionCache, LOW_PASS, NEAR_PLANE,
};

use crate::error::Result;
use crate::scene::{one_hot_encode, Camera, GaussianPrimitive};

/// Projects a primitive with channels `[r, g, b, one-hot(object_id)]`.
pub fn project_gaussian(
    primitive: &GaussianPrimitive,
    camera: &Camera,
    n_objects: u32,
    index: usize,
) -> Result<Option<ProjectedSplat>> {
    let encoding = one_hot_encode(primitive.object_id, n_objects)?;
    let Some(geom) = project_geometry(&primitive.mean, &primitive.scale, primitive.rotation, camera)?
    else {
        return Ok(None);
    };
    let mut channels = Vec::with_capacity(COLOR_CHANNELS + encoding.len());
    channels.extend_from_slice(&primitive.color);
    channels.extend(encoding.to_vec());
    Ok(Some(ProjectedSplat {
        mean2d: geom.mean2d,
        cov2d: geom.cov2d,
        depth: geom.depth,
        channels,
        opacity: primitive.opacity,
        index,
    }))
}
