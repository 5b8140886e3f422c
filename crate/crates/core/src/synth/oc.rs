//! Ground-truth object-centric frame of one object at one frame.

use crate::error::{Error, Result};
use crate::geometry::{GaussianCloud, Mat3, PinholeCamera, Quat, Vec3};
use crate::image::PixelRect;
use crate::motion::WorldWarp;

/// Maps world Gaussians into the object-centric frame: into the camera
/// frame, rotate the box-center ray onto the optical axis, rescale about
/// the camera center so the anchor sits at depth `z0` (image unchanged),
/// then magnify by `m` about `(0, 0, z0)` so the object fills the crop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OcTransform {
    pub cam_rot: Mat3,
    pub cam_trans: Vec3,
    pub align: Mat3,
    pub depth_scale: f64,
    pub magnify: f64,
    pub z0: f64,
}

/// Rotation taking unit vector `d` onto `+z`.
fn align_to_z(d: &Vec3) -> Mat3 {
    let z = Vec3::z();
    let axis = d.cross(&z);
    let s = axis.norm();
    let c = d.dot(&z);
    if s < 1e-15 {
        return Mat3::identity();
    }
    let angle = s.atan2(c);
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle).into_inner()
}

impl OcTransform {
    /// `bbox` is the object's full-frame box at this frame, `anchor` its
    /// world anchor (ground-truth centroid), `occupancy` the fraction of the
    /// crop it should span.
    pub fn new(
        cam: &PinholeCamera,
        bbox: &PixelRect,
        anchor: &Vec3,
        z0: Option<f64>,
        crop_size: usize,
        occupancy: f64,
    ) -> Result<Self> {
        let (bx, by) = bbox.center();
        let ray = Vec3::new((bx - cam.cx) / cam.fx, (by - cam.cy) / cam.fy, 1.0).normalize();
        let align = align_to_z(&ray);
        let a = align * cam.to_camera(anchor);
        if !(a.z > cam.near) {
            return Err(Error::BehindNearPlane);
        }
        let z0 = z0.unwrap_or(a.z);
        let side = bbox.width().max(bbox.height());
        if !(side > 0.0) {
            return Err(Error::InvalidInput("zero-area bounding box".into()));
        }
        let magnify = occupancy * crop_size as f64 / side;
        Ok(Self { cam_rot: cam.rot, cam_trans: cam.trans, align, depth_scale: z0 / a.z, magnify, z0 })
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        let q = self.align * (self.cam_rot * p + self.cam_trans) * self.depth_scale;
        let c = Vec3::new(0.0, 0.0, self.z0);
        c + (q - c) * self.magnify
    }

    pub fn apply(&self, cloud: &GaussianCloud) -> GaussianCloud {
        let q = Quat::from_rotmat(&(self.align * self.cam_rot));
        let ln = (self.depth_scale * self.magnify).ln();
        let mut out = cloud.clone();
        for g in &mut out.gaussians {
            g.mu = self.apply_point(&g.mu);
            g.rot = q.mul(g.rot);
            g.log_scale.add_scalar_mut(ln);
        }
        out
    }

    /// World warp about `anchor` (object-centric coordinates) that inverts
    /// the scale and translation of this transform. Exact when the camera
    /// and alignment rotations are the identity.
    pub fn world_warp(&self, anchor: &Vec3) -> Result<WorldWarp> {
        let s = 1.0 / (self.depth_scale * self.magnify);
        let c = Vec3::new(0.0, 0.0, self.z0);
        let q = (anchor - c) / self.magnify + c;
        let pc = self.align.transpose() * q / self.depth_scale;
        let world = self.cam_rot.transpose() * (pc - self.cam_trans);
        WorldWarp::new(world - anchor, s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Gaussian3D;
    use crate::motion::object_to_world;

    #[test]
    fn centered_box_needs_no_rotation_and_inverts_exactly() {
        let cam = PinholeCamera::new(100.0, 100.0, 32.0, 32.0, 64, 64);
        let bbox = PixelRect::centered(32.0, 32.0, 20.0, 16.0);
        let anchor = Vec3::new(0.0, 0.0, 3.0);
        let tr = OcTransform::new(&cam, &bbox, &anchor, Some(2.0), 64, 0.65).unwrap();
        assert_eq!(tr.align, Mat3::identity());
        assert!((tr.apply_point(&anchor) - Vec3::new(0.0, 0.0, 2.0)).norm() < 1e-12);
        let cloud = GaussianCloud::from_gaussians(
            0,
            vec![
                Gaussian3D::with_color(Vec3::new(0.1, -0.2, 3.1), 0.05, 0.5, [0.5; 3], 0),
                Gaussian3D::with_color(Vec3::new(-0.3, 0.0, 2.8), 0.02, 0.5, [0.5; 3], 0),
            ],
        );
        let oc = tr.apply(&cloud);
        let oc_anchor = tr.apply_point(&anchor);
        let back = object_to_world(&oc, &tr.world_warp(&oc_anchor).unwrap(), &oc_anchor).unwrap();
        for (a, b) in cloud.gaussians.iter().zip(&back.gaussians) {
            assert!((a.mu - b.mu).norm() < 1e-12);
            assert!((a.log_scale - b.log_scale).norm() < 1e-12);
        }
    }

    #[test]
    fn off_center_box_moves_onto_axis() {
        let cam = PinholeCamera::new(100.0, 100.0, 32.0, 32.0, 64, 64);
        let anchor = Vec3::new(0.4, -0.2, 2.0);
        let p = cam.project(&anchor).unwrap();
        let bbox = PixelRect::centered(p.u, p.v, 10.0, 10.0);
        let tr = OcTransform::new(&cam, &bbox, &anchor, None, 64, 0.5).unwrap();
        let a = tr.apply_point(&anchor);
        assert!(a.x.abs() < 1e-12 && a.y.abs() < 1e-12);
        assert!((a.z - anchor.norm()).abs() < 1e-12);
        assert!((tr.magnify - 3.2).abs() < 1e-12);
    }
}
