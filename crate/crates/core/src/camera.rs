//! Pinhole cameras and primary rays.
//!
//! Camera frame: x right, y up, looking down −z. Pixel `(col, row)` has its
//! center at image coordinates `(u, v) = (col, row)`, with `v` growing
//! downwards.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Points closer than this to the image plane count as behind the camera.
pub const MIN_DEPTH: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    /// Camera-to-world rotation.
    pub rotation: Matrix3<f64>,
    /// Camera center in world coordinates (translation of the pose).
    pub center: Vector3<f64>,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vector3<f64>,
    pub dir: Vector3<f64>,
    pub frame: usize,
    pub pixel: usize,
}

impl Camera {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        [fx, fy, cx, cy]: [f64; 4],
        rotation: Matrix3<f64>,
        center: Vector3<f64>,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let cam = Self { fx, fy, cx, cy, rotation, center, width, height, near, far };
        cam.validate()?;
        Ok(cam)
    }

    /// Builds a camera from the 12 row-major values of a 3×4 camera-to-world
    /// matrix.
    pub fn from_pose(
        intrinsics: [f64; 4],
        pose: &[f64; 12],
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let rotation = Matrix3::new(
            pose[0], pose[1], pose[2], pose[4], pose[5], pose[6], pose[8], pose[9], pose[10],
        );
        let center = Vector3::new(pose[3], pose[7], pose[11]);
        Self::new(intrinsics, rotation, center, width, height, near, far)
    }

    pub fn pose(&self) -> [f64; 12] {
        let r = &self.rotation;
        let c = &self.center;
        [
            r[(0, 0)], r[(0, 1)], r[(0, 2)], c.x,
            r[(1, 0)], r[(1, 1)], r[(1, 2)], c.y,
            r[(2, 0)], r[(2, 1)], r[(2, 2)], c.z,
        ]
    }

    pub fn intrinsics(&self) -> [f64; 4] {
        [self.fx, self.fy, self.cx, self.cy]
    }

    /// Camera at `eye` looking at `target`.
    #[allow(clippy::too_many_arguments)]
    pub fn look_at(
        intrinsics: [f64; 4],
        eye: Vector3<f64>,
        target: Vector3<f64>,
        up: Vector3<f64>,
        width: usize,
        height: usize,
        near: f64,
        far: f64,
    ) -> Result<Self> {
        let back = (eye - target).normalize();
        let right = up.cross(&back).normalize();
        let true_up = back.cross(&right);
        let rotation = Matrix3::from_columns(&[right, true_up, back]);
        Self::new(intrinsics, rotation, eye, width, height, near, far)
    }

    pub fn validate(&self) -> Result<()> {
        let rtr = self.rotation.transpose() * self.rotation;
        let dev = (rtr - Matrix3::identity()).abs().max();
        if !(dev <= 1e-6) {
            return Err(Error::InvalidCamera(format!("rotation is not orthonormal (|RᵀR − I| = {dev:e})")));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::InvalidCamera(format!(
                "bounds must satisfy 0 < near < far, got near={} far={}",
                self.near, self.far
            )));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::InvalidCamera("focal lengths and image size must be positive".into()));
        }
        let finite = [self.fx, self.fy, self.cx, self.cy, self.near, self.far]
            .iter()
            .chain(self.center.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidCamera("non-finite parameter".into()));
        }
        Ok(())
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    /// `(col, row)` of a row-major pixel index.
    pub fn pixel_coords(&self, pixel: usize) -> Result<(usize, usize)> {
        if pixel >= self.num_pixels() {
            return Err(Error::PixelOutOfBounds {
                col: pixel % self.width,
                row: pixel / self.width,
                width: self.width,
                height: self.height,
            });
        }
        Ok((pixel % self.width, pixel / self.width))
    }

    /// Unit world-space direction through image point `(u, v)`.
    pub fn direction_through(&self, u: f64, v: f64) -> Vector3<f64> {
        let local = Vector3::new((u - self.cx) / self.fx, -(v - self.cy) / self.fy, -1.0);
        (self.rotation * local).normalize()
    }

    pub fn to_camera_frame(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (x - self.center)
    }

    /// Image coordinates `(u, v)` of a world point.
    pub fn project(&self, x: &Vector3<f64>) -> Result<[f64; 2]> {
        let xc = self.to_camera_frame(x);
        let depth = -xc.z;
        if depth <= MIN_DEPTH {
            return Err(Error::BehindCamera(depth));
        }
        Ok([self.cx + self.fx * xc.x / depth, self.cy - self.fy * xc.y / depth])
    }

    pub fn ray(&self, frame: usize, pixel: usize) -> Result<Ray> {
        let (col, row) = self.pixel_coords(pixel)?;
        Ok(Ray {
            origin: self.center,
            dir: self.direction_through(col as f64, row as f64),
            frame,
            pixel,
        })
    }
}

/// Rays through the centers of the given row-major pixels.
pub fn generate_rays(cam: &Camera, frame: usize, pixels: &[usize]) -> Result<Vec<Ray>> {
    pixels.iter().map(|&p| cam.ray(frame, p)).collect()
}
