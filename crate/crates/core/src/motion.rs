//! Motion factorization: object-centric deformation, the object-to-world
//! affine warp, camera motion with per-frame translation scale, and the
//! depth-scale composition of several objects.

use std::io::Write;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::field::{ByteReader, DeformationField};
use crate::geometry::{GaussianCloud, Mat3, PinholeCamera, Vec3};
use crate::image::PixelRect;
use crate::render::CloudGrads;

pub const MOTION_MAGIC: &[u8; 4] = b"GS4M";
pub const MOTION_VERSION: u32 = 1;

/// `μ ↦ a + s·(μ − a) + Δ` about a fixed anchor `a`; log-scales shift by
/// `ln s`, rotations are untouched.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldWarp {
    pub delta: Vec3,
    pub scale: f64,
}

impl Default for WorldWarp {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl WorldWarp {
    pub const IDENTITY: WorldWarp = WorldWarp { delta: Vec3::new(0.0, 0.0, 0.0), scale: 1.0 };

    pub fn new(delta: Vec3, scale: f64) -> Result<Self> {
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidInput(format!("warp scale must be positive, got {scale}")));
        }
        Ok(Self { delta, scale })
    }

    pub fn apply(&self, anchor: &Vec3, p: &Vec3) -> Vec3 {
        // written so that the identity warp is exact
        p + (p - anchor) * (self.scale - 1.0) + self.delta
    }

    /// The single warp equal to applying `self` and then `next`.
    pub fn then(&self, next: &WorldWarp) -> WorldWarp {
        WorldWarp { delta: self.delta * next.scale + next.delta, scale: self.scale * next.scale }
    }
}

pub fn object_to_world(cloud: &GaussianCloud, warp: &WorldWarp, anchor: &Vec3) -> Result<GaussianCloud> {
    let warp = WorldWarp::new(warp.delta, warp.scale)?;
    let ln_s = warp.scale.ln();
    let mut out = cloud.clone();
    for g in &mut out.gaussians {
        g.mu = warp.apply(anchor, &g.mu);
        g.log_scale.add_scalar_mut(ln_s);
    }
    Ok(out)
}

/// Gradients through [`object_to_world`]: returns gradients w.r.t. the
/// object-centric cloud (in place of `d_world`), `Δ` and `s`.
pub fn object_to_world_backward(
    cloud: &GaussianCloud,
    warp: &WorldWarp,
    anchor: &Vec3,
    d_world: &CloudGrads,
) -> (CloudGrads, Vec3, f64) {
    let mut d_obj = d_world.clone();
    let mut d_delta = Vec3::zeros();
    let mut d_scale = 0.0;
    for (i, g) in cloud.gaussians.iter().enumerate() {
        let dm = d_world.mu[i];
        d_delta += dm;
        d_scale += dm.dot(&(g.mu - anchor)) + d_world.log_scale[i].sum() / warp.scale;
        d_obj.mu[i] = dm * warp.scale;
        d_obj.mean2d[i] = d_world.mean2d[i];
    }
    (d_obj, d_delta, d_scale)
}

/// Initial warp mapping the object-centric crop onto the tracked box.
///
/// The object-centric image (camera `oc_cam`) shows the object inside
/// `crop_target`; the frame shows it inside `bbox`. The scale is the box
/// size ratio (larger axis) and the translation moves the anchor, kept at
/// its camera depth, onto the matching frame pixel.
pub fn init_warp_from_bbox(
    bbox: &PixelRect,
    crop_target: &PixelRect,
    oc_cam: &PinholeCamera,
    cam: &PinholeCamera,
    anchor: &Vec3,
) -> Result<WorldWarp> {
    if !(bbox.width() > 0.0 && bbox.height() > 0.0) {
        return Err(Error::InvalidInput("zero-area bounding box".into()));
    }
    if !(crop_target.width() > 0.0 && crop_target.height() > 0.0) {
        return Err(Error::InvalidInput("zero-area crop target".into()));
    }
    let scale = (bbox.width() / crop_target.width()).max(bbox.height() / crop_target.height());
    let a_oc = oc_cam.project(anchor)?;
    let (bx, by) = bbox.center();
    let (cx, cy) = crop_target.center();
    let pu = bx + scale * (a_oc.u - cx);
    let pv = by + scale * (a_oc.v - cy);
    let a_cam = cam.to_camera(anchor);
    if !(a_cam.z > cam.near) {
        return Err(Error::BehindNearPlane);
    }
    let target = cam.unproject(pu, pv, a_cam.z);
    WorldWarp::new(target - anchor, scale)
}

/// Per-object motion: deformation field, per-frame warps and the warp
/// anchor (canonical centroid).
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectMotion {
    pub field: DeformationField,
    pub warps: Vec<WorldWarp>,
    pub anchor: Vec3,
}

impl ObjectMotion {
    pub fn new(field: DeformationField, warps: Vec<WorldWarp>, anchor: Vec3) -> Result<Self> {
        if warps.len() != field.frames {
            return Err(Error::DimensionMismatch(format!("{} warps for {} frames", warps.len(), field.frames)));
        }
        Ok(Self { field, warps, anchor })
    }

    pub fn frames(&self) -> usize {
        self.warps.len()
    }

    fn warp(&self, t: usize) -> Result<&WorldWarp> {
        if t < 1 || t > self.frames() {
            return Err(Error::FrameOutOfRange { t, frames: self.frames() });
        }
        Ok(&self.warps[t - 1])
    }

    /// Object-centric deformed cloud at frame `t`.
    pub fn object_centric(&self, canonical: &GaussianCloud, t: usize) -> Result<GaussianCloud> {
        self.field.deform(canonical, t)
    }

    /// World-frame cloud at frame `t`.
    pub fn world(&self, canonical: &GaussianCloud, t: usize) -> Result<GaussianCloud> {
        let warp = self.warp(t)?;
        object_to_world(&self.field.deform(canonical, t)?, warp, &self.anchor)
    }
}

/// Camera poses relative to frame 1 with per-frame translation scales.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraTrack {
    pub rots: Vec<Mat3>,
    pub trans: Vec<Vec3>,
    pub beta: Vec<f64>,
}

impl CameraTrack {
    pub fn identity(frames: usize) -> Self {
        Self { rots: vec![Mat3::identity(); frames], trans: vec![Vec3::zeros(); frames], beta: vec![1.0; frames] }
    }

    pub fn new(rots: Vec<Mat3>, trans: Vec<Vec3>, beta: Vec<f64>) -> Result<Self> {
        let track = Self { rots, trans, beta };
        track.validate()?;
        Ok(track)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.rots.len();
        if n == 0 || self.trans.len() != n || self.beta.len() != n {
            return Err(Error::DimensionMismatch("camera track arrays differ in length".into()));
        }
        if self.rots[0] != Mat3::identity() || self.trans[0] != Vec3::zeros() || self.beta[0] != 1.0 {
            return Err(Error::InvalidInput("frame 1 of a camera track must be the identity with beta 1".into()));
        }
        if self.beta.iter().any(|b| !(*b > 0.0)) {
            return Err(Error::InvalidInput("beta must be positive".into()));
        }
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.rots.len()
    }

    /// Camera for frame `t` with pose `(R_t, β_t·T_t)`.
    pub fn camera(&self, base: &PinholeCamera, t: usize) -> Result<PinholeCamera> {
        if t < 1 || t > self.frames() {
            return Err(Error::FrameOutOfRange { t, frames: self.frames() });
        }
        let i = t - 1;
        Ok(base.with_pose(self.rots[i], self.trans[i] * self.beta[i]))
    }
}

/// World cloud and camera for frame `t`: deform, warp to world, pose the
/// camera.
pub fn compose_motion(
    canonical: &GaussianCloud,
    motion: &ObjectMotion,
    camera: &CameraTrack,
    base_cam: &PinholeCamera,
    t: usize,
) -> Result<(GaussianCloud, PinholeCamera)> {
    if camera.frames() != motion.frames() {
        return Err(Error::DimensionMismatch(format!(
            "camera track has {} frames, motion has {}",
            camera.frames(),
            motion.frames()
        )));
    }
    Ok((motion.world(canonical, t)?, camera.camera(base_cam, t)?))
}

/// Per-object depth scales about the reference camera center.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneComposition {
    pub scales: Vec<f64>,
    pub reference: usize,
    pub center: Vec3,
}

impl SceneComposition {
    pub fn identity(objects: usize, reference: usize, center: Vec3) -> Self {
        Self { scales: vec![1.0; objects], reference, center }
    }
}

/// `μ' = C − (C − μ)·k`, log-scales shifted by `ln k`: slides the object
/// along the rays from `C` without changing its image.
pub fn scale_about_center(cloud: &GaussianCloud, center: &Vec3, k: f64) -> Result<GaussianCloud> {
    if !(k > 0.0 && k.is_finite()) {
        return Err(Error::InvalidInput(format!("composition scale must be positive, got {k}")));
    }
    let ln_k = k.ln();
    let mut out = cloud.clone();
    for g in &mut out.gaussians {
        g.mu += (g.mu - center) * (k - 1.0);
        g.log_scale.add_scalar_mut(ln_k);
    }
    Ok(out)
}

/// Scales each object about `C^r` by its `k` and concatenates them.
pub fn compose_scene(objects: &[&GaussianCloud], comp: &SceneComposition) -> Result<GaussianCloud> {
    if objects.len() != comp.scales.len() {
        return Err(Error::DimensionMismatch(format!("{} objects, {} scales", objects.len(), comp.scales.len())));
    }
    let scaled = objects
        .iter()
        .zip(&comp.scales)
        .map(|(o, &k)| scale_about_center(o, &comp.center, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(GaussianCloud::concat(&scaled.iter().collect::<Vec<_>>()))
}

/// On-disk motion state: warps, anchor, camera track and the path of the
/// deformation checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionFile {
    pub warps: Vec<WorldWarp>,
    pub anchor: Vec3,
    pub camera: CameraTrack,
    pub field_path: PathBuf,
}

impl MotionFile {
    pub fn save(&self, path: &Path) -> Result<()> {
        let n = self.warps.len();
        if self.camera.frames() != n {
            return Err(Error::DimensionMismatch("camera track and warps differ in length".into()));
        }
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(MOTION_MAGIC)?;
        w.write_all(&MOTION_VERSION.to_le_bytes())?;
        w.write_all(&(n as u32).to_le_bytes())?;
        let put = |v: f64| v.to_le_bytes();
        for v in self.anchor.iter() {
            w.write_all(&put(*v))?;
        }
        for i in 0..n {
            let wp = &self.warps[i];
            for v in wp.delta.iter().chain(std::iter::once(&wp.scale)) {
                w.write_all(&put(*v))?;
            }
            for v in self.camera.rots[i].transpose().iter() {
                // row-major on disk
                w.write_all(&put(*v))?;
            }
            for v in self.camera.trans[i].iter().chain(std::iter::once(&self.camera.beta[i])) {
                w.write_all(&put(*v))?;
            }
        }
        let p = self.field_path.to_string_lossy();
        w.write_all(&(p.len() as u32).to_le_bytes())?;
        w.write_all(p.as_bytes())?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact(path.into())
            } else {
                e.into()
            }
        })?;
        let mut r = ByteReader { bytes: &bytes, pos: 0, path };
        if r.take(4)? != MOTION_MAGIC {
            return Err(Error::format(path, "bad magic, expected GS4M"));
        }
        let version = r.u32()?;
        if version > MOTION_VERSION {
            return Err(Error::UnsupportedVersion { path: path.into(), found: version, supported: MOTION_VERSION });
        }
        let n = r.u32()? as usize;
        if n == 0 || n > 1 << 20 {
            return Err(Error::format(path, "implausible frame count"));
        }
        let anchor = Vec3::new(r.f64()?, r.f64()?, r.f64()?);
        let mut warps = Vec::with_capacity(n);
        let mut cam = CameraTrack { rots: Vec::new(), trans: Vec::new(), beta: Vec::new() };
        for _ in 0..n {
            let delta = Vec3::new(r.f64()?, r.f64()?, r.f64()?);
            let scale = r.f64()?;
            warps.push(WorldWarp::new(delta, scale).map_err(|e| Error::format(path, e.to_string()))?);
            let mut m = [0.0; 9];
            for v in m.iter_mut() {
                *v = r.f64()?;
            }
            cam.rots.push(Mat3::from_row_slice(&m));
            cam.trans.push(Vec3::new(r.f64()?, r.f64()?, r.f64()?));
            cam.beta.push(r.f64()?);
        }
        cam.validate().map_err(|e| Error::format(path, e.to_string()))?;
        let len = r.u32()? as usize;
        let s = std::str::from_utf8(r.take(len)?).map_err(|_| Error::format(path, "field path is not UTF-8"))?;
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after motion payload"));
        }
        Ok(Self { warps, anchor, camera: cam, field_path: PathBuf::from(s) })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Gaussian3D;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud(seed: u64, n: usize) -> GaussianCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GaussianCloud::from_gaussians(
            0,
            (0..n)
                .map(|_| {
                    Gaussian3D::with_color(
                        Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(4.0..6.0)),
                        0.05,
                        0.5,
                        [0.3; 3],
                        0,
                    )
                })
                .collect(),
        )
    }

    #[test]
    fn identity_and_translation_warps() {
        let c = cloud(1, 20);
        let a = c.centroid();
        assert_eq!(object_to_world(&c, &WorldWarp::IDENTITY, &a).unwrap(), c);
        let w = WorldWarp::new(Vec3::new(1.0, 0.0, 0.0), 1.0).unwrap();
        let out = object_to_world(&c, &w, &a).unwrap();
        for (p, q) in out.gaussians.iter().zip(&c.gaussians) {
            assert!((p.mu - q.mu - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
            assert_eq!(p.log_scale, q.log_scale);
        }
        assert!(WorldWarp::new(Vec3::zeros(), 0.0).is_err());
        assert!(object_to_world(&c, &WorldWarp { delta: Vec3::zeros(), scale: -1.0 }, &a).is_err());
    }

    #[test]
    fn warp_group_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = cloud(3, 15);
        let a = c.centroid();
        for _ in 0..20 {
            let wa = WorldWarp::new(Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)), rng.gen_range(0.3..3.0)).unwrap();
            let wb = WorldWarp::new(Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)), rng.gen_range(0.3..3.0)).unwrap();
            let two = object_to_world(&object_to_world(&c, &wa, &a).unwrap(), &wb, &a).unwrap();
            let one = object_to_world(&c, &wa.then(&wb), &a).unwrap();
            for (p, q) in two.gaussians.iter().zip(&one.gaussians) {
                assert!((p.mu - q.mu).norm() < 1e-12);
                assert!((p.log_scale - q.log_scale).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn bbox_init_examples() {
        let cam = PinholeCamera::new(100.0, 100.0, 64.0, 64.0, 128, 128);
        let anchor = Vec3::new(0.0, 0.0, 5.0);
        let crop = PixelRect::centered(64.0, 64.0, 40.0, 40.0);
        let w = init_warp_from_bbox(&crop, &crop, &cam, &cam, &anchor).unwrap();
        assert!(w.delta.norm() < 1e-12 && (w.scale - 1.0).abs() < 1e-12);
        let shifted = PixelRect::centered(84.0, 64.0, 40.0, 40.0);
        let w = init_warp_from_bbox(&shifted, &crop, &cam, &cam, &anchor).unwrap();
        assert!((w.delta - Vec3::new(1.0, 0.0, 0.0)).norm() < 1e-12);
        assert!(init_warp_from_bbox(&PixelRect::new(3.0, 3.0, 3.0, 9.0), &crop, &cam, &cam, &anchor).is_err());
    }

    #[test]
    fn bbox_init_reprojects_anchor_onto_box() {
        // oracle: the warped anchor must land at the box point that
        // corresponds to the anchor's crop position
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cam = PinholeCamera::new(150.0, 150.0, 60.0, 70.0, 128, 128);
        let oc = cam.resized_centered(96, 96);
        let crop = PixelRect::centered(48.0, 48.0, 62.4, 62.4);
        for _ in 0..50 {
            let anchor = Vec3::new(rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1), rng.gen_range(2.0..3.0));
            let (cx, cy) = (rng.gen_range(20.0..100.0), rng.gen_range(20.0..100.0));
            let bbox = PixelRect::centered(cx, cy, rng.gen_range(10.0..50.0), rng.gen_range(10.0..50.0));
            let w = init_warp_from_bbox(&bbox, &crop, &oc, &cam, &anchor).unwrap();
            assert_eq!(w.delta.z, 0.0);
            let p = cam.project(&w.apply(&anchor, &anchor)).unwrap();
            let a = oc.project(&anchor).unwrap();
            let expect_u = cx + w.scale * (a.u - 48.0);
            let expect_v = cy + w.scale * (a.v - 48.0);
            assert!((p.u - expect_u).abs() < 0.5 && (p.v - expect_v).abs() < 0.5);
            // a centered crop maps the box center to the crop center
            if a.u == 48.0 && a.v == 48.0 {
                assert!((p.u - cx).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn warp_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let c = cloud(7, 6);
        let a = c.centroid();
        let warp = WorldWarp::new(Vec3::new(0.2, -0.1, 0.3), 1.4).unwrap();
        let mut up = CloudGrads::zeros(&c);
        for i in 0..c.len() {
            up.mu[i] = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            up.log_scale[i] = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        }
        let f = |c: &GaussianCloud, w: &WorldWarp| {
            let o = object_to_world(c, w, &a).unwrap();
            o.gaussians.iter().enumerate().map(|(i, g)| g.mu.dot(&up.mu[i]) + g.log_scale.dot(&up.log_scale[i])).sum::<f64>()
        };
        let (d_obj, d_delta, d_scale) = object_to_world_backward(&c, &warp, &a, &up);
        let h = 1e-6;
        for k in 0..3 {
            let mut wp = warp;
            wp.delta[k] += h;
            let mut wm = warp;
            wm.delta[k] -= h;
            assert!(((f(&c, &wp) - f(&c, &wm)) / (2.0 * h) - d_delta[k]).abs() < 1e-6);
            let mut cp = c.clone();
            cp.gaussians[2].mu[k] += h;
            let mut cm = c.clone();
            cm.gaussians[2].mu[k] -= h;
            assert!(((f(&cp, &warp) - f(&cm, &warp)) / (2.0 * h) - d_obj.mu[2][k]).abs() < 1e-6);
        }
        let mut wp = warp;
        wp.scale += h;
        let mut wm = warp;
        wm.scale -= h;
        assert!(((f(&c, &wp) - f(&c, &wm)) / (2.0 * h) - d_scale).abs() < 1e-6);
    }

    #[test]
    fn compose_scene_examples() {
        let mut c = GaussianCloud::from_gaussians(0, vec![Gaussian3D::with_color(Vec3::new(0.0, 0.0, 2.0), 0.1, 0.5, [0.5; 3], 0)]);
        let comp = SceneComposition { scales: vec![2.0], reference: 0, center: Vec3::zeros() };
        let out = compose_scene(&[&c], &comp).unwrap();
        assert_eq!(out.gaussians[0].mu, Vec3::new(0.0, 0.0, 4.0));
        assert!((out.gaussians[0].log_scale[0] - (0.2f64).ln()).abs() < 1e-12);
        c.gaussians[0].mu = Vec3::new(0.3, -0.2, 3.0);
        let same = compose_scene(&[&c], &SceneComposition::identity(1, 0, Vec3::new(1.0, 2.0, 3.0))).unwrap();
        assert_eq!(same.gaussians[0], c.gaussians[0]);
    }

    #[test]
    fn composition_preserves_rays() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let c = cloud(9, 30);
        for _ in 0..10 {
            let center = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..0.0));
            let k = rng.gen_range(0.2..4.0);
            let out = scale_about_center(&c, &center, k).unwrap();
            for (p, q) in out.gaussians.iter().zip(&c.gaussians) {
                let a = (p.mu - center).normalize();
                let b = (q.mu - center).normalize();
                assert!(a.cross(&b).norm().atan2(a.dot(&b)) < 1e-9);
            }
        }
    }

    #[test]
    fn camera_track_poses_scale_translation() {
        let base = PinholeCamera::new(100.0, 100.0, 64.0, 64.0, 128, 128);
        let mut track = CameraTrack::identity(3);
        track.trans[1] = Vec3::new(0.5, 0.0, 0.0);
        track.beta[1] = 2.0;
        let cam = track.camera(&base, 2).unwrap();
        assert_eq!(cam.trans, Vec3::new(1.0, 0.0, 0.0));
        assert!(track.camera(&base, 4).is_err());
        let mut bad = track.clone();
        bad.beta[0] = 2.0;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn motion_file_roundtrip() {
        let mut track = CameraTrack::identity(3);
        track.rots[2] = crate::geometry::rotation_from_axis_angle(&Vec3::new(0.1, 0.2, 0.3));
        track.trans[2] = Vec3::new(0.1, 0.2, -0.3);
        track.beta[2] = 1.5;
        let mf = MotionFile {
            warps: vec![WorldWarp::IDENTITY, WorldWarp::new(Vec3::new(1.0, 2.0, 3.0), 0.5).unwrap(), WorldWarp::IDENTITY],
            anchor: Vec3::new(0.0, 0.1, 2.0),
            camera: track,
            field_path: PathBuf::from("obj0.field"),
        };
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.gs4m");
        mf.save(&p).unwrap();
        assert_eq!(MotionFile::load(&p).unwrap(), mf);
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, &bytes).unwrap();
        assert!(MotionFile::load(&p).is_err());
    }
}
