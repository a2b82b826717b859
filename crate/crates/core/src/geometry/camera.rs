use serde::{Deserialize, Serialize};

use super::{GeometryError, Pose, Vec3};

/// Pinhole camera with square pixels. Pixel origin is the top-left corner,
/// +u to the right, +v downward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct CameraModel {
    pub pose: Pose,
    pub horizontal_fov: f64,
    pub image_width: u32,
    pub image_height: u32,
}

impl CameraModel {
    pub fn new(pose: Pose, horizontal_fov: f64, image_width: u32, image_height: u32) -> Self {
        Self {
            pose,
            horizontal_fov,
            image_width,
            image_height,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.horizontal_fov > 0.0 && self.horizontal_fov < 180.0) {
            return Err(GeometryError::InvalidCamera(format!(
                "horizontal fov {} not in (0, 180)",
                self.horizontal_fov
            )));
        }
        if self.image_width == 0 || self.image_height == 0 {
            return Err(GeometryError::InvalidCamera("empty image".into()));
        }
        if !self.pose.has_unit_rotation() {
            return Err(GeometryError::InvalidCamera("rotation is not unit".into()));
        }
        Ok(())
    }

    /// Focal length in pixels.
    pub fn focal_px(&self) -> f64 {
        (self.image_width as f64 / 2.0) / (self.horizontal_fov.to_radians() / 2.0).tan()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
}

impl Ray {
    /// Normalizes `direction`.
    pub fn new(origin: Vec3, direction: Vec3) -> Self {
        Self {
            origin,
            direction: direction.normalize(),
        }
    }

    pub fn at(&self, distance: f64) -> Vec3 {
        self.origin + self.direction * distance
    }
}

/// World-space ray through pixel `(u, v)`.
pub fn unproject(u: f64, v: f64, camera: &CameraModel) -> Result<Ray, GeometryError> {
    camera.validate()?;
    let (w, h) = (camera.image_width as f64, camera.image_height as f64);
    if !(u >= 0.0 && u <= w && v >= 0.0 && v <= h) {
        return Err(GeometryError::PixelOutOfBounds {
            u,
            v,
            width: camera.image_width,
            height: camera.image_height,
        });
    }
    let f = camera.focal_px();
    let local = Vec3::new((u - w / 2.0) / f, -(v - h / 2.0) / f, -1.0);
    let dir = camera.pose.unit_rotation() * local;
    Ok(Ray::new(camera.pose.position, dir))
}

/// Pixel coordinates of a world point. Inverse of [`unproject`].
pub fn project(point: &Vec3, camera: &CameraModel) -> Result<(f64, f64), GeometryError> {
    camera.validate()?;
    let local = camera.pose.unit_rotation().inverse() * (point - camera.pose.position);
    if local.z >= 0.0 {
        return Err(GeometryError::BehindCamera);
    }
    let f = camera.focal_px();
    let depth = -local.z;
    let u = camera.image_width as f64 / 2.0 + f * local.x / depth;
    let v = camera.image_height as f64 / 2.0 - f * local.y / depth;
    Ok((u, v))
}
