//! On-disk dataset convention:
//!
//! ```text
//! manifest.json
//! frames/0001.png             full frames
//! masks/<obj>/0001.png        visible object masks
//! depth/0001.pfm              per-frame depth (any positive-affine scale)
//! flow/fwd_0001.pfm           flow from frame t to t+1 (and bwd_ back)
//! tracks.csv                  ground-truth point tracks
//! background/0001.png         background-only frames  (optional)
//! background.ply              background reconstruction (optional)
//! objects/<obj>/oc/…          object-centric frames, masks, flow
//! objects/<obj>/amodal/…      object-only full frames
//! objects/<obj>/prior/0001.ply novel-view prior per frame
//! ```
//!
//! Frame numbers are 1-based and zero-padded to four digits.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::pfm::{write_flow, write_pfm};
use super::ply::save_cloud;
use super::png::{write_mask, write_png};
use super::read_artifact;
use crate::error::{Error, Result};
use crate::geometry::{Mat3, PinholeCamera, Vec3};
use crate::image::{Image, PixelRect};
use crate::motion::CameraTrack;
use crate::synth::GroundTruthBundle;

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Intrinsics {
    pub fn of(cam: &PinholeCamera) -> Self {
        Self { fx: cam.fx, fy: cam.fy, cx: cam.cx, cy: cam.cy, width: cam.width, height: cam.height, near: cam.near, far: cam.far }
    }

    pub fn camera(&self) -> PinholeCamera {
        PinholeCamera { near: self.near, far: self.far, ..PinholeCamera::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height) }
    }
}

/// Camera pose relative to frame 1; `rot` is row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rot: [[f64; 3]; 3],
    pub trans: [f64; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectEntry {
    pub id: String,
    pub oc_camera: Intrinsics,
    /// Canonical centroid in object-centric coordinates.
    pub anchor: [f64; 3],
    /// Depth of the object-centric orbit center `(0, 0, z0)`.
    pub z0: f64,
    /// Full-frame boxes `[x0, y0, x1, y1]`, one per frame.
    pub bboxes: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub camera: Intrinsics,
    pub poses: Vec<Pose>,
    pub objects: Vec<ObjectEntry>,
    pub has_background: bool,
    pub background_color: [f64; 3],
    pub crop_size: usize,
    pub occupancy: f64,
}

impl Manifest {
    pub fn base_camera(&self) -> PinholeCamera {
        self.camera.camera()
    }

    pub fn camera_track(&self) -> Result<CameraTrack> {
        CameraTrack::new(
            self.poses.iter().map(|p| Mat3::from_fn(|r, c| p.rot[r][c])).collect(),
            self.poses.iter().map(|p| Vec3::from(p.trans)).collect(),
            vec![1.0; self.poses.len()],
        )
    }

    pub fn bbox(&self, o: usize, t: usize) -> PixelRect {
        let [x0, y0, x1, y1] = self.objects[o].bboxes[t - 1];
        PixelRect::new(x0, y0, x1, y1)
    }

    fn check(&self, path: &Path) -> Result<()> {
        let bad = |m: String| Err(Error::format(path, m));
        if self.frames == 0 || self.poses.len() != self.frames {
            return bad(format!("{} poses for {} frames", self.poses.len(), self.frames));
        }
        if self.camera.width != self.width || self.camera.height != self.height {
            return bad("camera size differs from the image size".into());
        }
        if self.objects.is_empty() {
            return bad("no objects listed".into());
        }
        for o in &self.objects {
            if o.id.is_empty() || o.id.contains(['/', '\\']) || o.id.starts_with('.') {
                return bad(format!("object id '{}' is not a plain name", o.id));
            }
            if !(o.z0 > 0.0) {
                return bad(format!("object {} has non-positive z0", o.id));
            }
            if o.bboxes.len() != self.frames {
                return bad(format!("object {} has {} boxes for {} frames", o.id, o.bboxes.len(), self.frames));
            }
        }
        self.base_camera().validate().map_err(|e| Error::format(path, e.to_string()))?;
        self.camera_track().map_err(|e| Error::format(path, e.to_string()))?;
        Ok(())
    }
}

/// Path helpers for one dataset directory.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetLayout {
    pub root: PathBuf,
}

fn numbered(dir: PathBuf, prefix: &str, t: usize, ext: &str) -> PathBuf {
    dir.join(format!("{prefix}{t:04}.{ext}"))
}

impl DatasetLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn frame(&self, t: usize) -> PathBuf {
        numbered(self.root.join("frames"), "", t, "png")
    }
    pub fn mask(&self, obj: &str, t: usize) -> PathBuf {
        numbered(self.root.join("masks").join(obj), "", t, "png")
    }
    pub fn depth(&self, t: usize) -> PathBuf {
        numbered(self.root.join("depth"), "", t, "pfm")
    }
    pub fn flow_fwd(&self, t: usize) -> PathBuf {
        numbered(self.root.join("flow"), "fwd_", t, "pfm")
    }
    pub fn flow_bwd(&self, t: usize) -> PathBuf {
        numbered(self.root.join("flow"), "bwd_", t, "pfm")
    }
    pub fn tracks(&self) -> PathBuf {
        self.root.join("tracks.csv")
    }
    pub fn background_frame(&self, t: usize) -> PathBuf {
        numbered(self.root.join("background"), "", t, "png")
    }
    pub fn background_cloud(&self) -> PathBuf {
        self.root.join("background.ply")
    }
    fn object(&self, obj: &str) -> PathBuf {
        self.root.join("objects").join(obj)
    }
    pub fn oc_frame(&self, obj: &str, t: usize) -> PathBuf {
        numbered(self.object(obj).join("oc").join("frames"), "", t, "png")
    }
    pub fn oc_mask(&self, obj: &str, t: usize) -> PathBuf {
        numbered(self.object(obj).join("oc").join("masks"), "", t, "png")
    }
    /// Object-centric flow from frame `t` to `t+1`.
    pub fn oc_flow(&self, obj: &str, t: usize) -> PathBuf {
        numbered(self.object(obj).join("oc").join("flow"), "", t, "pfm")
    }
    /// Forward-backward consistent pixels of [`Self::oc_flow`].
    pub fn oc_flow_mask(&self, obj: &str, t: usize) -> PathBuf {
        numbered(self.object(obj).join("oc").join("flow_masks"), "", t, "png")
    }
    pub fn amodal(&self, obj: &str, t: usize) -> PathBuf {
        numbered(self.object(obj).join("amodal"), "", t, "png")
    }
    pub fn prior(&self, obj: &str, t: usize) -> PathBuf {
        numbered(self.object(obj).join("prior"), "", t, "ply")
    }

    /// Every file a complete dataset with `manifest` must contain.
    pub fn expected_files(&self, m: &Manifest) -> Vec<PathBuf> {
        let mut out = vec![self.tracks()];
        if m.has_background {
            out.push(self.background_cloud());
        }
        for t in 1..=m.frames {
            out.push(self.frame(t));
            out.push(self.depth(t));
            if m.has_background {
                out.push(self.background_frame(t));
            }
            if t < m.frames {
                out.push(self.flow_fwd(t));
                out.push(self.flow_bwd(t));
            }
            for o in &m.objects {
                out.extend([self.mask(&o.id, t), self.oc_frame(&o.id, t), self.oc_mask(&o.id, t), self.amodal(&o.id, t), self.prior(&o.id, t)]);
                if t < m.frames {
                    out.extend([self.oc_flow(&o.id, t), self.oc_flow_mask(&o.id, t)]);
                }
            }
        }
        out
    }

    /// Loads and checks the manifest and that every referenced file exists.
    pub fn load_manifest(&self) -> Result<Manifest> {
        let path = self.manifest();
        let bytes = read_artifact(&path)?;
        let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| Error::format(&path, e.to_string()))?;
        let found = value.get("version").and_then(|v| v.as_u64()).ok_or_else(|| Error::format(&path, "missing version"))?;
        if found > MANIFEST_VERSION as u64 {
            return Err(Error::UnsupportedVersion { path, found: found as u32, supported: MANIFEST_VERSION });
        }
        let m: Manifest = serde_json::from_value(value).map_err(|e| Error::format(&path, e.to_string()))?;
        m.check(&path)?;
        if let Some(missing) = self.expected_files(&m).into_iter().find(|p| !p.is_file()) {
            return Err(Error::MissingArtifact(missing));
        }
        Ok(m)
    }
}

fn create_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    Ok(())
}

/// Surface depth of a render: expected depth normalized by alpha, the far
/// plane where nothing is covered.
pub(crate) fn surface_depth(depth: &Image, alpha: &Image, far: f64) -> Image {
    Image::from_fn(depth.width, depth.height, 1, |x, y, _| {
        let a = alpha.get(x, y, 0);
        if a < 1e-6 {
            far
        } else {
            (depth.get(x, y, 0) - (1.0 - a) * far) / a
        }
    })
}

/// Writes a ground-truth bundle in the dataset layout. Object ids are the
/// object indices.
pub fn write_oracle_dataset(bundle: &GroundTruthBundle, layout: &DatasetLayout) -> Result<Manifest> {
    let scene = &bundle.scene;
    let spec = &scene.spec;
    let frames = scene.frames();
    let ids: Vec<String> = (0..bundle.objects.len()).map(|o| o.to_string()).collect();
    let track = &scene.camera_track;
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        frames,
        width: spec.width,
        height: spec.height,
        camera: Intrinsics::of(&scene.base_camera),
        poses: (0..frames)
            .map(|i| Pose {
                rot: std::array::from_fn(|r| std::array::from_fn(|c| track.rots[i][(r, c)])),
                trans: track.trans[i].into(),
            })
            .collect(),
        objects: bundle
            .objects
            .iter()
            .zip(&ids)
            .map(|(o, id)| ObjectEntry {
                id: id.clone(),
                oc_camera: Intrinsics::of(&o.oc.camera),
                anchor: o.oc.anchor.into(),
                z0: o.oc.z0,
                bboxes: o.bboxes.iter().map(|b| [b.x0, b.y0, b.x1, b.y1]).collect(),
            })
            .collect(),
        has_background: scene.background.is_some(),
        background_color: spec.background_color,
        crop_size: spec.crop_size,
        occupancy: spec.occupancy,
    };
    let put = |path: PathBuf| -> Result<PathBuf> {
        create_parent(&path)?;
        Ok(path)
    };
    for t in 1..=frames {
        let f = &bundle.frames[t - 1];
        write_png(&put(layout.frame(t))?, &f.rgb)?;
        write_pfm(&put(layout.depth(t))?, &surface_depth(&f.depth, &f.alpha, scene.base_camera.far))?;
        if let Some(bg) = &f.background {
            write_png(&put(layout.background_frame(t))?, bg)?;
        }
        if t < frames {
            write_flow(&put(layout.flow_fwd(t))?, &bundle.flow_fwd[t - 1])?;
            write_flow(&put(layout.flow_bwd(t))?, &bundle.flow_bwd[t - 1])?;
        }
        for (o, id) in bundle.objects.iter().zip(&ids) {
            write_mask(&put(layout.mask(id, t))?, &o.masks[t - 1])?;
            write_png(&put(layout.oc_frame(id, t))?, &o.oc.frames[t - 1])?;
            write_mask(&put(layout.oc_mask(id, t))?, &o.oc.masks[t - 1])?;
            write_png(&put(layout.amodal(id, t))?, &o.amodal[t - 1])?;
            save_cloud(&o.oc.clouds[t - 1], &put(layout.prior(id, t))?)?;
            if t < frames {
                write_flow(&put(layout.oc_flow(id, t))?, &o.oc.flow_fwd[t - 1])?;
                write_mask(&put(layout.oc_flow_mask(id, t))?, &o.oc.flow_masks[t - 1])?;
            }
        }
    }
    if let Some(bg) = &scene.background {
        save_cloud(bg, &layout.background_cloud())?;
    }
    bundle.export_tracks(&put(layout.tracks())?)?;
    std::fs::write(layout.manifest(), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_scene, presets, render_ground_truth, MotionProgram};

    fn small_dataset(dir: &Path) -> Manifest {
        let mut spec = presets::single_object(
            MotionProgram::Rigid { velocity: [0.03, 0.0, 0.0], spin: [0.0, 0.1, 0.0] },
            presets::smooth_color(),
            60,
            4,
        );
        spec.frames = 3;
        spec.width = 48;
        spec.height = 48;
        spec.focal = 60.0;
        spec.crop_size = 32;
        let bundle = render_ground_truth(&generate_scene(&spec).unwrap()).unwrap();
        write_oracle_dataset(&bundle, &DatasetLayout::new(dir)).unwrap()
    }

    #[test]
    fn written_dataset_validates() {
        let dir = tempfile::tempdir().unwrap();
        let m = small_dataset(dir.path());
        let layout = DatasetLayout::new(dir.path());
        assert_eq!(layout.load_manifest().unwrap(), m);
        assert_eq!(m.objects[0].id, "0");
        assert!(!layout.flow_fwd(3).exists());
        assert_eq!(m.camera_track().unwrap().frames(), 3);
    }

    #[test]
    fn missing_file_is_named() {
        let dir = tempfile::tempdir().unwrap();
        small_dataset(dir.path());
        let layout = DatasetLayout::new(dir.path());
        std::fs::remove_file(layout.oc_flow("0", 2)).unwrap();
        match layout.load_manifest() {
            Err(Error::MissingArtifact(p)) => assert_eq!(p, layout.oc_flow("0", 2)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn newer_manifest_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        small_dataset(dir.path());
        let layout = DatasetLayout::new(dir.path());
        let text = std::fs::read_to_string(layout.manifest()).unwrap().replacen("\"version\": 1", "\"version\": 2", 1);
        std::fs::write(layout.manifest(), text).unwrap();
        assert!(matches!(layout.load_manifest(), Err(Error::UnsupportedVersion { found: 2, .. })));
    }
}
