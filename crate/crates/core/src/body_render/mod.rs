//! Textured body model, skinning, cameras and pose-map rasterization.

pub mod camera;
pub mod mesh;
pub mod raster;
pub mod skinning;
pub mod texture;

pub use camera::{trajectory_from_text, trajectory_to_text, CameraPose, Intrinsics};
pub use mesh::{humanoid, BodyMesh, Skeleton};
pub use raster::{render_pose_map, render_sequence, render_with_correspondence, PoseMap, RenderOptions};
pub use skinning::{pose_mesh, BodyModelState};
pub use texture::{
    complete_texture, extract_partial_texture, NearestValid, SurfaceCorrespondence, TextureCompleter,
    UVTextureMap,
};

use crate::error::Result;
use crate::scalar::Scalar;

/// A mesh together with its completed texture.
#[derive(Debug, Clone, PartialEq)]
pub struct TexturedBody<T> {
    pub mesh: BodyMesh<T>,
    pub texture: UVTextureMap<T>,
}

impl<T: Scalar> TexturedBody<T> {
    pub fn new(mesh: BodyMesh<T>, texture: UVTextureMap<T>) -> Result<Self> {
        mesh.validate()?;
        if !texture.is_complete() {
            return Err(crate::Error::invalid("textured body needs a complete texture"));
        }
        Ok(Self { mesh, texture })
    }
}
