//! Analytic test scene: an emissive sphere translating in front of a
//! checkered plane, seen by a camera sweeping a small arc.
//!
//! Frames, masks, optical flow and depth are exact ray intersections. The
//! same geometry is exposed as density fields and scene flow in normalized
//! scene units so renderers and losses can be checked against it.

use nalgebra::Vector3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{DepthMap, FlowMap, Frame, Normalization, RawDataset, SceneDataset};
use crate::camera::{Camera, Ray};
use crate::error::{Error, Result};
use crate::raster::Image;
use crate::view::{RenderMode, ViewRenderer};

/// Density given to occupied space by the oracle media, in normalized units.
pub const ORACLE_DENSITY: f64 = 1e4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Focal length in pixels, both axes.
    pub focal: f64,
    /// Distance of the camera arc from the origin (world units).
    pub orbit_radius: f64,
    /// Total sweep of the arc around the y axis.
    pub orbit_degrees: f64,
    pub near: f64,
    pub far: f64,
    /// The plane is `z = plane_z`, facing the cameras.
    pub plane_z: f64,
    pub checker_size: f64,
    pub checker_colors: [[u8; 3]; 2],
    pub sphere_radius: f64,
    pub sphere_color: [u8; 3],
    /// Sphere displacement per frame, normalized scene units.
    pub speed: f64,
    pub direction: [f64; 3],
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            frames: 6,
            width: 40,
            height: 30,
            focal: 40.0,
            orbit_radius: 4.0,
            orbit_degrees: 10.0,
            near: 2.0,
            far: 7.0,
            plane_z: -1.0,
            checker_size: 1.0,
            checker_colors: [[204, 179, 51], [38, 77, 153]],
            sphere_radius: 0.4,
            sphere_color: [230, 51, 26],
            speed: 0.03,
            direction: [1.0, 0.0, 0.0],
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::DegenerateScene(m));
        if self.frames < 2 {
            return bad(format!("need at least 2 frames, got {}", self.frames));
        }
        if self.width == 0 || self.height == 0 {
            return bad("image size must be positive".into());
        }
        let positive = [self.focal, self.orbit_radius, self.checker_size, self.sphere_radius];
        if positive.iter().any(|v| !(*v > 0.0)) {
            return bad("focal, orbit radius, checker size and sphere radius must be positive".into());
        }
        if !(self.speed >= 0.0 && self.speed.is_finite()) {
            return bad(format!("speed must be finite and nonnegative, got {}", self.speed));
        }
        if Vector3::from(self.direction).norm() == 0.0 {
            return bad("sphere direction is zero".into());
        }
        Ok(())
    }

    fn intrinsics(&self) -> [f64; 4] {
        let (w, h) = (self.width as f64, self.height as f64);
        [self.focal, self.focal, (w - 1.0) / 2.0, (h - 1.0) / 2.0]
    }

    /// World camera on the arc at `degrees` from the +z axis.
    pub fn camera_at(&self, degrees: f64) -> Result<Camera> {
        let a = degrees.to_radians();
        let eye = Vector3::new(a.sin(), 0.0, a.cos()) * self.orbit_radius;
        Camera::look_at(
            self.intrinsics(),
            eye,
            Vector3::zeros(),
            Vector3::y(),
            self.width,
            self.height,
            self.near,
            self.far,
        )
    }

    fn frame_degrees(&self, i: usize) -> f64 {
        -self.orbit_degrees / 2.0 + self.orbit_degrees * i as f64 / (self.frames - 1) as f64
    }
}

/// What a ray sees first.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub point: Vector3<f64>,
    pub dynamic: bool,
    pub color: [f64; 3],
}

/// Oracle dynamic-field values at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DynamicSample {
    pub sigma: f64,
    pub color: [f64; 3],
    pub blend: f64,
    pub flow_fw: [f64; 3],
    pub flow_bw: [f64; 3],
}

/// Everything needed to regenerate the scene exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TruthFile {
    pub spec: SyntheticSpec,
    pub checker_offset: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub spec: SyntheticSpec,
    pub checker_offset: [f64; 2],
    pub normalization: Normalization,
    /// Training cameras, world units.
    pub world_cameras: Vec<Camera>,
    /// Sphere center at frame 0, world units.
    pub start: Vector3<f64>,
    /// Sphere displacement per frame, world units.
    pub velocity: Vector3<f64>,
    /// Novel camera at the middle of the arc, normalized.
    pub held_out: Camera,
    pub held_out_time: f64,
}

fn unit_color(c: [u8; 3]) -> [f64; 3] {
    c.map(|v| v as f64 / 255.0)
}

impl GroundTruth {
    pub fn new(spec: SyntheticSpec, checker_offset: [f64; 2]) -> Result<Self> {
        spec.validate()?;
        let world_cameras = (0..spec.frames).map(|i| spec.camera_at(spec.frame_degrees(i))).collect::<Result<Vec<_>>>()?;
        let normalization = Normalization::from_cameras(&world_cameras);
        let velocity = Vector3::from(spec.direction).normalize() * (spec.speed / normalization.scale);
        let start = -velocity * ((spec.frames - 1) as f64 / 2.0);
        let held_out = normalization.camera(&spec.camera_at(0.0)?)?;
        let held_out_time = 2.min(spec.frames - 1) as f64 / (spec.frames - 1) as f64;
        let truth = Self { spec, checker_offset, normalization, world_cameras, start, velocity, held_out, held_out_time };
        truth.check_visible()?;
        Ok(truth)
    }

    pub fn from_file(file: TruthFile) -> Result<Self> {
        Self::new(file.spec, file.checker_offset)
    }

    pub fn to_file(&self) -> TruthFile {
        TruthFile { spec: self.spec.clone(), checker_offset: self.checker_offset }
    }

    fn frames_minus_one(&self) -> f64 {
        (self.spec.frames - 1) as f64
    }

    /// Sphere center at normalized time `t`, world units.
    pub fn sphere_center(&self, t: f64) -> Vector3<f64> {
        self.start + self.velocity * (t * self.frames_minus_one())
    }

    /// Scene flow of the sphere per frame step, normalized units.
    pub fn sphere_flow(&self) -> Vector3<f64> {
        self.velocity * self.normalization.scale
    }

    /// The sphere must stay fully in front of, and projected inside, every
    /// training view and the held-out view, and inside the normalized box.
    fn check_visible(&self) -> Result<()> {
        let held_world = self.spec.camera_at(0.0)?;
        let views = self
            .world_cameras
            .iter()
            .enumerate()
            .map(|(i, c)| (format!("frame {i}"), c, i as f64 / self.frames_minus_one()))
            .chain(std::iter::once(("the held-out view".to_string(), &held_world, self.held_out_time)));
        let r = self.spec.sphere_radius;
        for (name, cam, t) in views {
            let c = self.sphere_center(t);
            let depth = -cam.to_camera_frame(&c).z;
            let leaves = || Error::DegenerateScene(format!("sphere leaves the view of {name}"));
            if depth - r <= cam.near || depth + r >= cam.far {
                return Err(leaves());
            }
            let [u, v] = cam.project(&c).map_err(|_| leaves())?;
            let margin = cam.fx * r / (depth - r);
            let (w, h) = (cam.width as f64 - 0.5, cam.height as f64 - 0.5);
            if u - margin < -0.5 || u + margin > w || v - margin < -0.5 || v + margin > h {
                return Err(leaves());
            }
            let n = self.normalization.point(&c);
            if n.amax() + r * self.normalization.scale > 1.0 {
                return Err(Error::DegenerateScene(format!("sphere leaves the scene bounds at {name}")));
            }
        }
        Ok(())
    }

    fn checker(&self, x: f64, y: f64) -> [f64; 3] {
        let s = self.spec.checker_size;
        let i = ((x + self.checker_offset[0]) / s).floor() as i64 + ((y + self.checker_offset[1]) / s).floor() as i64;
        unit_color(self.spec.checker_colors[i.rem_euclid(2) as usize])
    }

    fn hit_sphere(&self, o: &Vector3<f64>, d: &Vector3<f64>, t: f64) -> Option<Hit> {
        let oc = o - self.sphere_center(t);
        let b = d.dot(&oc);
        let disc = b * b - (oc.norm_squared() - self.spec.sphere_radius.powi(2));
        if disc < 0.0 {
            return None;
        }
        let root = disc.sqrt();
        let s = if -b - root > 0.0 { -b - root } else { -b + root };
        (s > 0.0).then(|| Hit { distance: s, point: o + d * s, dynamic: true, color: unit_color(self.spec.sphere_color) })
    }

    fn hit_plane(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        if d.z == 0.0 {
            return None;
        }
        let s = (self.spec.plane_z - o.z) / d.z;
        (s > 0.0).then(|| {
            let p = o + d * s;
            Hit { distance: s, point: p, dynamic: false, color: self.checker(p.x, p.y) }
        })
    }

    /// First surface along a world ray at normalized time `t`.
    pub fn trace(&self, o: &Vector3<f64>, d: &Vector3<f64>, t: f64, mode: RenderMode) -> Option<Hit> {
        let sphere = if mode == RenderMode::Static { None } else { self.hit_sphere(o, d, t) };
        let plane = if mode == RenderMode::Dynamic { None } else { self.hit_plane(o, d) };
        match (sphere, plane) {
            (Some(a), Some(b)) => Some(if a.distance <= b.distance { a } else { b }),
            (a, b) => a.or(b),
        }
    }

    /// Oracle static medium at a normalized point: everything behind the
    /// plane is solid and colored by the checker above it.
    pub fn static_medium(&self, x: &Vector3<f64>) -> (f64, [f64; 3]) {
        let w = self.normalization.to_world(x);
        if w.z <= self.spec.plane_z {
            (ORACLE_DENSITY, self.checker(w.x, w.y))
        } else {
            (0.0, [0.0; 3])
        }
    }

    /// Oracle dynamic medium at a normalized point and time: the solid
    /// sphere, moving with its velocity; empty space is fully static.
    pub fn dynamic_medium(&self, x: &Vector3<f64>, t: f64) -> DynamicSample {
        let w = self.normalization.to_world(x);
        if (w - self.sphere_center(t)).norm() <= self.spec.sphere_radius {
            let v = self.sphere_flow();
            DynamicSample {
                sigma: ORACLE_DENSITY,
                color: unit_color(self.spec.sphere_color),
                blend: 0.0,
                flow_fw: v.into(),
                flow_bw: (-v).into(),
            }
        } else {
            DynamicSample { sigma: 0.0, color: [0.0; 3], blend: 1.0, flow_fw: [0.0; 3], flow_bw: [0.0; 3] }
        }
    }

    /// Frame `i` in world units, with exact flow and depth.
    pub fn frame(&self, i: usize) -> Result<Frame> {
        let cam = &self.world_cameras[i];
        let n = self.spec.frames;
        let t = i as f64 / self.frames_minus_one();
        let (w, h) = (cam.width, cam.height);
        let mut image = Image::new(w, h);
        let mut mask = vec![0.0; w * h];
        let mut depth = DepthMap { width: w, height: h, data: vec![cam.far as f32; w * h] };
        let mut fw = (i + 1 < n).then(|| FlowMap::zeros(w, h));
        let mut bw = (i > 0).then(|| FlowMap::zeros(w, h));
        for p in 0..w * h {
            let ray = cam.ray(i, p)?;
            let Some(hit) = self.trace(&ray.origin, &ray.dir, t, RenderMode::Full) else { continue };
            image.set_pixel(p, hit.color);
            mask[p] = if hit.dynamic { 1.0 } else { 0.0 };
            depth.data[p] = hit.distance as f32;
            // Differencing two projections keeps a still scene's flow exactly zero.
            let here = cam.project(&hit.point)?;
            for (map, j, sign) in [(&mut fw, i + 1, 1.0), (&mut bw, i.wrapping_sub(1), -1.0)] {
                if let Some(map) = map {
                    let moved = if hit.dynamic { hit.point + self.velocity * sign } else { hit.point };
                    let [u, v] = self.world_cameras[j].project(&moved)?;
                    map.data[p] = [(u - here[0]) as f32, (v - here[1]) as f32];
                }
            }
        }
        Ok(Frame { image, mask, camera: cam.clone(), flow_fw: fw, flow_bw: bw, depth: Some(depth) })
    }

    pub fn raw_dataset(&self) -> Result<RawDataset> {
        Ok(RawDataset { frames: (0..self.spec.frames).map(|i| self.frame(i)).collect::<Result<_>>()? })
    }

    /// Exact image of a normalized camera at time `t`.
    pub fn image(&self, cam: &Camera, t: f64, mode: RenderMode) -> Result<Image> {
        let rays = crate::camera::generate_rays(cam, 0, &(0..cam.num_pixels()).collect::<Vec<_>>())?;
        let colors = self.render_rays(cam, &rays, t, mode)?;
        Image::from_pixels(cam.width, cam.height, &colors)
    }
}

impl ViewRenderer for GroundTruth {
    fn render_rays(&self, _cam: &Camera, rays: &[Ray], time: f64, mode: RenderMode) -> Result<Vec<[f64; 3]>> {
        Ok(rays
            .iter()
            .map(|r| {
                let o = self.normalization.to_world(&r.origin);
                self.trace(&o, &r.dir, time, mode).map_or([0.0; 3], |h| h.color)
            })
            .collect())
    }
}

/// A generated scene: the on-disk form, its loaded form and the oracle.
#[derive(Clone, Debug)]
pub struct Synthetic {
    pub raw: RawDataset,
    pub dataset: SceneDataset,
    pub truth: GroundTruth,
}

/// Builds the scene; `rng` places the checker pattern.
pub fn synth_scene<R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Result<Synthetic> {
    spec.validate()?;
    let offset = [rng.gen::<f64>() * spec.checker_size, rng.gen::<f64>() * spec.checker_size];
    let truth = GroundTruth::new(spec.clone(), offset)?;
    let raw = truth.raw_dataset()?;
    let dataset = SceneDataset::from_raw(raw.clone())?;
    Ok(Synthetic { raw, dataset, truth })
}
