//! Synthetic ground-truth generator: Gaussian objects with scripted motion,
//! a textured background plane and a scripted camera, rendered into every
//! supervision signal the fitting stages consume.

mod bundle;
mod oc;

pub use bundle::{
    render_ground_truth, FrameData, GroundTruthBundle, ObjectCentric, ObjectData, OrbitViews, OC_BACKGROUND,
};
pub use oc::OcTransform;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{rotation_from_axis_angle, Gaussian3D, GaussianCloud, Mat3, PinholeCamera, Quat, Vec3};
use crate::motion::CameraTrack;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ColorScheme {
    Uniform { rgb: [f64; 3] },
    /// Per-channel sinusoids over the normalized object coordinates.
    Smooth { base: [f64; 3], amplitude: f64, frequency: f64 },
    Random,
}

/// Per-frame motion of an object. Displacements are applied to the frame-1
/// shape; `velocity` is in world units per frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MotionProgram {
    Static,
    /// Translation plus spin about the centroid (axis-angle per frame).
    Rigid { velocity: [f64; 3], spin: [f64; 3] },
    /// The `x > 0` half swings about a hinge through the center, reaching
    /// `max_angle` radians at the last frame.
    Articulated { velocity: [f64; 3], hinge_axis: [f64; 3], max_angle: f64 },
    /// `y += amplitude · sin(2π x / wavelength) · (t−1)/(T−1)` in object
    /// coordinates.
    Bending { velocity: [f64; 3], amplitude: f64, wavelength: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub count: usize,
    /// Frame-1 world center.
    pub center: [f64; 3],
    /// Semi-axes of the ellipsoid shell.
    pub radii: [f64; 3],
    /// Mean per-axis Gaussian standard deviation.
    pub gaussian_scale: f64,
    pub opacity: f64,
    pub color: ColorScheme,
    pub motion: MotionProgram,
}

/// Textured square of Gaussians facing the frame-1 camera.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackgroundSpec {
    pub depth: f64,
    pub half_extent: f64,
    /// Gaussians per side.
    pub grid: usize,
    pub color: ColorScheme,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum CameraProgram {
    Static,
    /// Rotates about a vertical axis through `center`.
    Orbit { center: [f64; 3], degrees_per_frame: f64 },
    Translate { velocity: [f64; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub objects: Vec<ObjectSpec>,
    pub background: Option<BackgroundSpec>,
    pub camera: CameraProgram,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub focal: f64,
    /// Side of the square object-centric frames.
    pub crop_size: usize,
    /// Fraction of the object-centric frame the object spans.
    pub occupancy: f64,
    /// Spacing of the ground-truth track queries in pixels.
    pub track_stride: usize,
    pub background_color: [f64; 3],
    pub seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidInput(m.to_string()));
        if self.frames < 2 {
            return bad("a scene needs at least 2 frames");
        }
        if self.width == 0 || self.height == 0 || self.crop_size == 0 {
            return bad("image sizes must be positive");
        }
        if !(self.focal > 0.0) {
            return bad("focal length must be positive");
        }
        if !(self.occupancy > 0.0 && self.occupancy <= 1.0) {
            return bad("occupancy must lie in (0, 1]");
        }
        if self.track_stride == 0 {
            return bad("track stride must be positive");
        }
        if self.objects.is_empty() || self.objects.len() > 7 {
            return bad("a scene holds between 1 and 7 objects");
        }
        for o in &self.objects {
            if o.count == 0 {
                return bad("objects need at least one Gaussian");
            }
            if o.radii.iter().any(|r| !(*r > 0.0)) || !(o.gaussian_scale > 0.0) {
                return bad("object radii and Gaussian scales must be positive");
            }
            if !(o.opacity > 0.0 && o.opacity < 1.0) {
                return bad("object opacity must lie in (0, 1)");
            }
            if !(o.center[2] > 0.0) {
                return bad("objects must start in front of the camera");
            }
            if let MotionProgram::Bending { wavelength, .. } = o.motion {
                if !(wavelength > 0.0) {
                    return bad("bending wavelength must be positive");
                }
            }
        }
        if let Some(b) = &self.background {
            if b.grid < 2 || !(b.depth > 0.0) || !(b.half_extent > 0.0) {
                return bad("background needs grid >= 2 and positive depth and extent");
            }
        }
        Ok(())
    }

    pub fn base_camera(&self) -> PinholeCamera {
        PinholeCamera::new(
            self.focal,
            self.focal,
            self.width as f64 / 2.0,
            self.height as f64 / 2.0,
            self.width,
            self.height,
        )
    }

    /// Object-centric camera: same focal length, square crop, identity pose.
    pub fn oc_camera(&self) -> PinholeCamera {
        self.base_camera().resized_centered(self.crop_size, self.crop_size)
    }
}

/// Generated scene: per-object world clouds for every frame, the static
/// background and the per-frame cameras.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    /// `objects[o][t-1]`.
    pub objects: Vec<Vec<GaussianCloud>>,
    pub background: Option<GaussianCloud>,
    pub base_camera: PinholeCamera,
    pub camera_track: CameraTrack,
    pub cameras: Vec<PinholeCamera>,
}

impl Scene {
    pub fn frames(&self) -> usize {
        self.spec.frames
    }

    /// Everything at frame `t`: objects in spec order, then the background.
    pub fn full_cloud(&self, t: usize) -> GaussianCloud {
        let mut parts: Vec<&GaussianCloud> = self.objects.iter().map(|o| &o[t - 1]).collect();
        parts.extend(self.background.as_ref());
        GaussianCloud::concat(&parts)
    }

    /// All clouds at frame `t` except object `skip`, background included.
    pub fn others(&self, skip: usize, t: usize) -> GaussianCloud {
        let mut parts: Vec<&GaussianCloud> =
            self.objects.iter().enumerate().filter(|(o, _)| *o != skip).map(|(_, c)| &c[t - 1]).collect();
        parts.extend(self.background.as_ref());
        GaussianCloud::concat(&parts)
    }
}

fn v3(a: [f64; 3]) -> Vec3 {
    Vec3::new(a[0], a[1], a[2])
}

fn sub_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn color_at(scheme: &ColorScheme, local: &Vec3, rng: &mut ChaCha8Rng) -> [f64; 3] {
    match scheme {
        ColorScheme::Uniform { rgb } => *rgb,
        ColorScheme::Smooth { base, amplitude, frequency } => {
            let proj = [local.x + 0.3 * local.z, local.y - 0.2 * local.x, local.z + 0.4 * local.y];
            let mut c = [0.0; 3];
            for k in 0..3 {
                c[k] = (base[k] + amplitude * (frequency * std::f64::consts::PI * proj[k] + k as f64).sin())
                    .clamp(0.02, 0.98);
            }
            c
        }
        ColorScheme::Random => [rng.gen_range(0.1..0.95), rng.gen_range(0.1..0.95), rng.gen_range(0.1..0.95)],
    }
}

fn random_quat(rng: &mut ChaCha8Rng) -> Quat {
    let (u1, u2, u3): (f64, f64, f64) = (rng.gen(), rng.gen(), rng.gen());
    let tau = std::f64::consts::TAU;
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    Quat::new(b * (tau * u3).cos(), a * (tau * u2).sin(), a * (tau * u2).cos(), b * (tau * u3).sin())
}

/// Frame-1 cloud of an object: jittered points on its ellipsoid shell.
pub fn object_cloud(spec: &ObjectSpec, rng: &mut ChaCha8Rng) -> GaussianCloud {
    let center = v3(spec.center);
    let radii = v3(spec.radii);
    let gaussians = (0..spec.count)
        .map(|_| {
            let z: f64 = rng.gen_range(-1.0..1.0);
            let phi = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = (1.0 - z * z).sqrt();
            let unit = Vec3::new(r * phi.cos(), r * phi.sin(), z) * rng.gen_range(0.95..1.05);
            let local = unit.component_mul(&radii);
            let rgb = color_at(&spec.color, &unit, rng);
            let mut g = Gaussian3D::with_color(center + local, spec.gaussian_scale, spec.opacity, rgb, 0);
            g.rot = random_quat(rng);
            for k in 0..3 {
                g.log_scale[k] = (spec.gaussian_scale * rng.gen_range(0.8..1.25)).ln();
            }
            g
        })
        .collect();
    GaussianCloud::from_gaussians(0, gaussians)
}

fn background_cloud(spec: &BackgroundSpec, rng: &mut ChaCha8Rng) -> GaussianCloud {
    let n = spec.grid;
    let step = 2.0 * spec.half_extent / (n - 1) as f64;
    let mut gaussians = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let x = -spec.half_extent + i as f64 * step;
            let y = -spec.half_extent + j as f64 * step;
            let local = Vec3::new(x, y, 0.0) / spec.half_extent;
            let rgb = color_at(&spec.color, &local, rng);
            let mut g = Gaussian3D::with_color(Vec3::new(x, y, spec.depth), 0.7 * step, 0.99, rgb, 0);
            g.log_scale[2] = (0.1 * step).ln();
            gaussians.push(g);
        }
    }
    GaussianCloud::from_gaussians(0, gaussians)
}

/// Rotates a cloud by `rot` about `pivot` and translates it, turning the
/// Gaussian orientations with it.
pub fn rigid_transform(cloud: &GaussianCloud, rot: &Mat3, pivot: &Vec3, trans: &Vec3) -> GaussianCloud {
    let q = Quat::from_rotmat(rot);
    let mut out = cloud.clone();
    for g in &mut out.gaussians {
        g.mu = pivot + rot * (g.mu - pivot) + trans;
        g.rot = q.mul(g.rot);
    }
    out
}

fn object_at(spec: &ObjectSpec, first: &GaussianCloud, t: usize, frames: usize) -> GaussianCloud {
    let center = v3(spec.center);
    let steps = (t - 1) as f64;
    let u = steps / (frames - 1) as f64;
    match &spec.motion {
        MotionProgram::Static => first.clone(),
        MotionProgram::Rigid { velocity, spin } => {
            let rot = rotation_from_axis_angle(&(v3(*spin) * steps));
            rigid_transform(first, &rot, &center, &(v3(*velocity) * steps))
        }
        MotionProgram::Articulated { velocity, hinge_axis, max_angle } => {
            let axis = v3(*hinge_axis).normalize();
            let rot = rotation_from_axis_angle(&(axis * (max_angle * u)));
            let q = Quat::from_rotmat(&rot);
            let shift = v3(*velocity) * steps;
            let mut out = first.clone();
            for g in &mut out.gaussians {
                if g.mu.x > center.x {
                    g.mu = center + rot * (g.mu - center);
                    g.rot = q.mul(g.rot);
                }
                g.mu += shift;
            }
            out
        }
        MotionProgram::Bending { velocity, amplitude, wavelength } => {
            let shift = v3(*velocity) * steps;
            let mut out = first.clone();
            for g in &mut out.gaussians {
                let x = g.mu.x - center.x;
                g.mu.y += amplitude * (std::f64::consts::TAU * x / wavelength).sin() * u;
                g.mu += shift;
            }
            out
        }
    }
}

fn camera_track(spec: &SceneSpec) -> Result<CameraTrack> {
    let frames = spec.frames;
    let mut rots = Vec::with_capacity(frames);
    let mut trans = Vec::with_capacity(frames);
    for t in 1..=frames {
        let steps = (t - 1) as f64;
        let (r, tr) = match &spec.camera {
            CameraProgram::Static => (Mat3::identity(), Vec3::zeros()),
            CameraProgram::Orbit { center, degrees_per_frame } => {
                let c = v3(*center);
                // camera-to-world rotation about the vertical axis through c
                let turn = rotation_from_axis_angle(&Vec3::new(0.0, (degrees_per_frame * steps).to_radians(), 0.0));
                let pos = c - turn * c;
                let r = turn.transpose();
                (r, -(r * pos))
            }
            CameraProgram::Translate { velocity } => (Mat3::identity(), -v3(*velocity) * steps),
        };
        rots.push(if t == 1 { Mat3::identity() } else { r });
        trans.push(if t == 1 { Vec3::zeros() } else { tr });
    }
    CameraTrack::new(rots, trans, vec![1.0; frames])
}

/// Builds the deterministic scene described by `spec`.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let objects = spec
        .objects
        .iter()
        .enumerate()
        .map(|(o, os)| {
            let mut rng = sub_rng(spec.seed, o as u64 + 1);
            let first = object_cloud(os, &mut rng);
            (1..=spec.frames).map(|t| object_at(os, &first, t, spec.frames)).collect()
        })
        .collect();
    let background = spec.background.as_ref().map(|b| background_cloud(b, &mut sub_rng(spec.seed, 0)));
    let base_camera = spec.base_camera();
    let camera_track = camera_track(spec)?;
    let cameras = (1..=spec.frames).map(|t| camera_track.camera(&base_camera, t)).collect::<Result<_>>()?;
    Ok(Scene { spec: spec.clone(), objects, background, base_camera, camera_track, cameras })
}

/// Small ready-made specs.
pub mod presets {
    use super::*;

    /// One object of radius 0.25 at depth 2 in a 128² view; `motion` sets
    /// its program.
    pub fn single_object(motion: MotionProgram, color: ColorScheme, count: usize, seed: u64) -> SceneSpec {
        SceneSpec {
            objects: vec![ObjectSpec {
                count,
                center: [0.0, 0.0, 2.0],
                radii: [0.25, 0.25, 0.25],
                gaussian_scale: 0.012,
                opacity: 0.95,
                color,
                motion,
            }],
            background: None,
            camera: CameraProgram::Static,
            frames: 8,
            width: 128,
            height: 128,
            focal: 160.0,
            crop_size: 128,
            occupancy: 0.65,
            track_stride: 4,
            background_color: [0.0; 3],
            seed,
        }
    }

    pub fn smooth_color() -> ColorScheme {
        ColorScheme::Smooth { base: [0.55, 0.45, 0.5], amplitude: 0.35, frequency: 1.5 }
    }

    pub fn textured_background() -> BackgroundSpec {
        BackgroundSpec {
            depth: 5.0,
            half_extent: 4.0,
            grid: 40,
            color: ColorScheme::Smooth { base: [0.5, 0.5, 0.5], amplitude: 0.4, frequency: 4.0 },
        }
    }
}
