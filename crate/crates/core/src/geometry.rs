//! Value types shared by every stage: vectors, quaternions, Gaussians and
//! pinhole cameras.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};
use crate::sh;

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Rotation quaternion stored as `(w, x, y, z)`. Not required to be unit
/// norm; every consumer normalizes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation of `angle` radians about `axis` (need not be unit).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::IDENTITY;
        }
        let a = axis / n;
        let (s, c) = (0.5 * angle).sin_cos();
        Self::new(c, s * a.x, s * a.y, s * a.z)
    }

    pub fn norm(self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(self) -> Result<Self> {
        let n = self.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::DegenerateRotation);
        }
        Ok(self.scale(1.0 / n))
    }

    pub fn scale(self, s: f64) -> Self {
        Self::new(self.w * s, self.x * s, self.y * s, self.z * s)
    }

    pub fn conj(self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self ⊗ rhs`.
    pub fn mul(self, r: Quat) -> Quat {
        let a = self;
        Quat::new(
            a.w * r.w - a.x * r.x - a.y * r.y - a.z * r.z,
            a.w * r.x + a.x * r.w + a.y * r.z - a.z * r.y,
            a.w * r.y - a.x * r.z + a.y * r.w + a.z * r.x,
            a.w * r.z + a.x * r.y - a.y * r.x + a.z * r.w,
        )
    }

    /// Rotation matrix of a quaternion that is already unit norm.
    pub fn to_rotmat_unit(self) -> Mat3 {
        let Quat { w, x, y, z } = self;
        Mat3::new(
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

    /// Quaternion of a proper rotation matrix (Shepperd's method).
    pub fn from_rotmat(m: &Mat3) -> Quat {
        let tr = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let q = if tr > 0.0 {
            let s = (tr + 1.0).sqrt() * 2.0;
            Quat::new(
                0.25 * s,
                (m[(2, 1)] - m[(1, 2)]) / s,
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(1, 0)] - m[(0, 1)]) / s,
            )
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
            Quat::new(
                (m[(2, 1)] - m[(1, 2)]) / s,
                0.25 * s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
            )
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
            Quat::new(
                (m[(0, 2)] - m[(2, 0)]) / s,
                (m[(0, 1)] + m[(1, 0)]) / s,
                0.25 * s,
                (m[(1, 2)] + m[(2, 1)]) / s,
            )
        } else {
            let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
            Quat::new(
                (m[(1, 0)] - m[(0, 1)]) / s,
                (m[(0, 2)] + m[(2, 0)]) / s,
                (m[(1, 2)] + m[(2, 1)]) / s,
                0.25 * s,
            )
        };
        q.scale(1.0 / q.norm())
    }
}

/// Orthonormal rotation matrix of `q`, normalizing internally.
pub fn quat_to_rotmat(q: Quat) -> Result<Mat3> {
    Ok(q.normalized()?.to_rotmat_unit())
}

/// Backpropagates `dL/dR` through `R = rotmat(q / |q|)` onto the raw `q`.
pub fn quat_to_rotmat_backward(q: Quat, d_r: &Mat3) -> [f64; 4] {
    let n = q.norm();
    let u = q.scale(1.0 / n);
    let g = d_r;
    let Quat { w, x, y, z } = u;
    let dw = 2.0
        * (-z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)]
            + x * g[(2, 1)]);
    let dx = 2.0
        * (y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
            + z * g[(2, 0)]
            + w * g[(2, 1)]
            - 2.0 * x * g[(2, 2)]);
    let dy = 2.0
        * (-2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
            - w * g[(2, 0)]
            + z * g[(2, 1)]
            - 2.0 * y * g[(2, 2)]);
    let dz = 2.0
        * (-2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)]
            - 2.0 * z * g[(1, 1)]
            + y * g[(1, 2)]
            + x * g[(2, 0)]
            + y * g[(2, 1)]);
    normalize_backward(u, n, [dw, dx, dy, dz])
}

/// Backpropagates through `u = q / |q|` given `u`, `|q|` and `dL/du`.
pub fn normalize_backward(u: Quat, n: f64, du: [f64; 4]) -> [f64; 4] {
    let ua = u.to_array();
    let dot: f64 = ua.iter().zip(du.iter()).map(|(a, b)| a * b).sum();
    let mut out = [0.0; 4];
    for k in 0..4 {
        out[k] = (du[k] - ua[k] * dot) / n;
    }
    out
}

/// Skew-symmetric cross-product matrix.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation matrix for the axis-angle vector `w` (Rodrigues).
pub fn rotation_from_axis_angle(w: &Vec3) -> Mat3 {
    let theta = w.norm();
    if theta < 1e-12 {
        return Mat3::identity() + skew(w);
    }
    let k = skew(&(w / theta));
    Mat3::identity() + k * theta.sin() + k * k * (1.0 - theta.cos())
}

/// Σ = R·diag(s²)·Rᵀ with `s = exp(log_scale)`.
pub fn build_covariance(rot: Quat, log_scale: &Vec3) -> Result<Mat3> {
    let r = quat_to_rotmat(rot)?;
    let s = log_scale.map(f64::exp);
    let m = r * Mat3::from_diagonal(&s);
    let cov = m * m.transpose();
    // symmetrize exactly
    Ok((cov + cov.transpose()) * 0.5)
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gaussian3D {
    pub mu: Vec3,
    pub rot: Quat,
    pub log_scale: Vec3,
    pub opacity_logit: f64,
    /// Coefficient-major SH: `sh[3 * k + c]` is coefficient `k` of channel `c`.
    pub sh: Vec<f64>,
}

impl Gaussian3D {
    /// Gaussian with a constant base color (degree-0 SH set so that the
    /// evaluated color equals `rgb`).
    pub fn with_color(mu: Vec3, scale: f64, opacity: f64, rgb: [f64; 3], sh_degree: usize) -> Self {
        let mut sh = vec![0.0; 3 * sh::coeff_count(sh_degree)];
        for c in 0..3 {
            sh[c] = sh::rgb_to_dc(rgb[c]);
        }
        Self {
            mu,
            rot: Quat::IDENTITY,
            log_scale: Vec3::repeat(scale.ln()),
            opacity_logit: logit(opacity),
            sh,
        }
    }

    pub fn scale(&self) -> Vec3 {
        self.log_scale.map(f64::exp)
    }

    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn max_scale(&self) -> f64 {
        self.log_scale.max().exp()
    }
}

/// Ordered Gaussians with stable ids (`ids[i]` belongs to `gaussians[i]`).
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianCloud {
    pub sh_degree: usize,
    pub ids: Vec<u32>,
    pub gaussians: Vec<Gaussian3D>,
}

impl GaussianCloud {
    pub fn new(sh_degree: usize) -> Self {
        Self { sh_degree, ids: Vec::new(), gaussians: Vec::new() }
    }

    pub fn from_gaussians(sh_degree: usize, gaussians: Vec<Gaussian3D>) -> Self {
        let ids = (0..gaussians.len() as u32).collect();
        Self { sh_degree, ids, gaussians }
    }

    pub fn len(&self) -> usize {
        self.gaussians.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gaussians.is_empty()
    }

    pub fn push(&mut self, id: u32, g: Gaussian3D) {
        self.ids.push(id);
        self.gaussians.push(g);
    }

    pub fn next_id(&self) -> u32 {
        self.ids.iter().max().map_or(0, |m| m + 1)
    }

    pub fn centroid(&self) -> Vec3 {
        if self.is_empty() {
            return Vec3::zeros();
        }
        let sum: Vec3 = self.gaussians.iter().map(|g| g.mu).sum();
        sum / self.len() as f64
    }

    /// Axis-aligned bounds of the centroids.
    pub fn bounds(&self) -> (Vec3, Vec3) {
        let mut lo = Vec3::repeat(f64::INFINITY);
        let mut hi = Vec3::repeat(f64::NEG_INFINITY);
        for g in &self.gaussians {
            lo = lo.inf(&g.mu);
            hi = hi.sup(&g.mu);
        }
        (lo, hi)
    }

    /// Largest side of the centroid bounding box.
    pub fn extent(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let (lo, hi) = self.bounds();
        (hi - lo).max()
    }

    pub fn check_compatible(&self, other: &GaussianCloud) -> Result<()> {
        if self.ids != other.ids {
            return Err(Error::IdMismatch);
        }
        Ok(())
    }

    /// Concatenates clouds, renumbering ids sequentially.
    pub fn concat(clouds: &[&GaussianCloud]) -> GaussianCloud {
        let degree = clouds.iter().map(|c| c.sh_degree).max().unwrap_or(0);
        let mut out = GaussianCloud::new(degree);
        let mut id = 0;
        for c in clouds {
            for g in &c.gaussians {
                let mut g = g.clone();
                g.sh.resize(3 * sh::coeff_count(degree), 0.0);
                out.push(id, g);
                id += 1;
            }
        }
        out
    }
}

/// World→camera pinhole camera. Camera coordinates: x right, y down, z
/// forward. Pixel `(i, j)` covers `[i, i+1) × [j, j+1)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PinholeCamera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rot: Mat3,
    pub trans: Vec3,
    pub near: f64,
    pub far: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub u: f64,
    pub v: f64,
    pub z: f64,
}

impl PinholeCamera {
    /// Camera at the origin looking down +z.
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Self {
        Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rot: Mat3::identity(),
            trans: Vec3::zeros(),
            near: 0.01,
            far: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidInput("focal lengths must be positive".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::InvalidInput("require 0 < near < far".into()));
        }
        let err = (self.rot.transpose() * self.rot - Mat3::identity()).abs().max();
        if err > 1e-6 {
            return Err(Error::InvalidInput("camera rotation is not orthonormal".into()));
        }
        Ok(())
    }

    pub fn with_pose(&self, rot: Mat3, trans: Vec3) -> Self {
        Self { rot, trans, ..self.clone() }
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rot * p + self.trans
    }

    /// Camera center in world coordinates, `-Rᵀ T`.
    pub fn center(&self) -> Vec3 {
        -(self.rot.transpose() * self.trans)
    }

    pub fn project(&self, p_world: &Vec3) -> Result<Projection> {
        let pc = self.to_camera(p_world);
        self.project_camera(&pc)
    }

    pub fn project_camera(&self, pc: &Vec3) -> Result<Projection> {
        if !(pc.z > self.near) {
            return Err(Error::BehindNearPlane);
        }
        Ok(Projection {
            u: self.fx * pc.x / pc.z + self.cx,
            v: self.fy * pc.y / pc.z + self.cy,
            z: pc.z,
        })
    }

    /// World point at pixel `(u, v)` and camera depth `z`.
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> Vec3 {
        let pc = Vec3::new((u - self.cx) * z / self.fx, (v - self.cy) * z / self.fy, z);
        self.rot.transpose() * (pc - self.trans)
    }

    /// Same intrinsics, image resized to `width × height` with the principal
    /// point at the image center.
    pub fn resized_centered(&self, width: usize, height: usize) -> Self {
        Self {
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            ..self.clone()
        }
    }
}

/// Camera orbiting `center` at `radius`. `(azimuth, elevation)` in degrees;
/// `(0, 0)` is the camera at `center - radius·ẑ` looking down +z, positive
/// elevation looks from above.
pub fn orbit_camera(
    base: &PinholeCamera,
    center: &Vec3,
    radius: f64,
    azimuth_deg: f64,
    elevation_deg: f64,
) -> PinholeCamera {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    let pos = center + radius * Vec3::new(az.sin() * el.cos(), -el.sin(), -az.cos() * el.cos());
    let fwd = (center - pos).normalize();
    let down = Vec3::new(0.0, 1.0, 0.0);
    let right = down.cross(&fwd).normalize();
    let dn = fwd.cross(&right);
    let rot = Mat3::from_rows(&[right.transpose(), dn.transpose(), fwd.transpose()]);
    let trans = -(rot * pos);
    base.with_pose(rot, trans)
}

/// Frame index `t ∈ [1, T]` with normalized time `(t-1)/(T-1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeIndex {
    pub t: usize,
    pub frames: usize,
}

impl TimeIndex {
    pub fn new(t: usize, frames: usize) -> Result<Self> {
        if frames < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 frames, got {frames}")));
        }
        if t < 1 || t > frames {
            return Err(Error::FrameOutOfRange { t, frames });
        }
        Ok(Self { t, frames })
    }

    pub fn normalized(&self) -> f64 {
        (self.t - 1) as f64 / (self.frames - 1) as f64
    }
}
