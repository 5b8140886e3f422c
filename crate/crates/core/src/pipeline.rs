//! File-driven reconstruction pipeline: each stage reads the dataset and
//! earlier artifacts from disk and writes its own, so any stage can be
//! rerun on its own.
//!
//! Artifact directory:
//!
//! ```text
//! objects/<obj>/canonical.ply   fit-static
//! objects/<obj>/field.gs4d      fit-motion
//! objects/<obj>/motion.gs4m     fit-motion (warps, anchor, camera track)
//! camera.json                   fit-camera
//! composition.json              compose
//! renders/*.png                 render
//! eval.json                     eval
//! progress.csv                  loss log of every stage
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::{DeformationField, FieldConfig};
use crate::geometry::{orbit_camera, GaussianCloud, Vec3};
use crate::image::{Mask, PixelRect};
use crate::io::dataset::{surface_depth, DatasetLayout, Manifest};
use crate::io::{
    load_cloud, load_versioned_json, read_flow, read_mask, read_pfm, read_png, save_cloud, save_versioned_json,
    write_oracle_dataset, write_png, EngineConfig,
};
use crate::metrics::{compute_epe, project_gaussian_tracks, EpeReport, TrackPoint, TrackSet};
use crate::motion::{init_warp_from_bbox, scale_about_center, CameraTrack, MotionFile, ObjectMotion, SceneComposition, WorldWarp};
use crate::optim::{
    depth_layers, fit_camera, fit_composition, fit_object_motion, fit_static, fit_world_warp, init_cloud_from_depth,
    joint_finetune, CameraSchedule, CompositionFrame, FlowTarget, MotionTargets, ProgressLog, View,
};
use crate::render::render;
use crate::synth::{generate_scene, render_ground_truth, OrbitViews, SceneSpec, OC_BACKGROUND};

pub const CAMERA_VERSION: u32 = 1;
pub const COMPOSITION_VERSION: u32 = 1;
pub const EVAL_VERSION: u32 = 1;

/// Elevation of the alternating orbit views used by the static lift.
const ORBIT_ELEVATION: f64 = 15.0;

#[derive(Debug, Clone, PartialEq)]
pub struct ArtifactLayout {
    pub root: PathBuf,
}

impl ArtifactLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    fn object(&self, obj: &str) -> PathBuf {
        self.root.join("objects").join(obj)
    }
    pub fn canonical(&self, obj: &str) -> PathBuf {
        self.object(obj).join("canonical.ply")
    }
    pub fn field(&self, obj: &str) -> PathBuf {
        self.object(obj).join("field.gs4d")
    }
    pub fn motion(&self, obj: &str) -> PathBuf {
        self.object(obj).join("motion.gs4m")
    }
    pub fn camera(&self) -> PathBuf {
        self.root.join("camera.json")
    }
    pub fn composition(&self) -> PathBuf {
        self.root.join("composition.json")
    }
    pub fn eval(&self) -> PathBuf {
        self.root.join("eval.json")
    }
    pub fn log(&self) -> PathBuf {
        self.root.join("progress.csv")
    }
    pub fn render(&self, t: usize, azimuth: f64, elevation: f64) -> PathBuf {
        self.root.join("renders").join(format!("t{t:04}_az{azimuth}_el{elevation}.png"))
    }
}

/// Fitted translation scales; poses come from the dataset manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraArtifact {
    pub beta: Vec<f64>,
    pub scale_unobservable: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositionArtifact {
    pub reference: usize,
    pub center: [f64; 3],
    pub scales: Vec<f64>,
}

impl CompositionArtifact {
    pub fn composition(&self) -> SceneComposition {
        SceneComposition { scales: self.scales.clone(), reference: self.reference, center: Vec3::from(self.center) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalArtifact {
    pub overall: EpeReport,
    /// Per object, in manifest order.
    pub objects: Vec<ObjectEpe>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectEpe {
    pub id: String,
    pub report: EpeReport,
}

impl EvalArtifact {
    pub fn table(&self) -> String {
        let mut s = self.overall.table();
        for o in &self.objects {
            s.push_str(&format!("object {:<5} {:>10.4} {:>8}\n", o.id, o.report.mean_epe, o.report.count));
        }
        s
    }
}

pub struct Pipeline {
    pub config: EngineConfig,
    pub dataset: DatasetLayout,
    pub artifacts: ArtifactLayout,
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(p) = path.parent() {
        std::fs::create_dir_all(p)?;
    }
    Ok(())
}

/// Reads a JSON scene spec.
pub fn load_spec(path: &Path) -> Result<SceneSpec> {
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.into()),
        _ => e.into(),
    })?;
    let spec: SceneSpec = serde_json::from_slice(&bytes).map_err(|e| Error::format(path, e.to_string()))?;
    spec.validate()?;
    Ok(spec)
}

/// Generates an oracle dataset from `spec`; image size, crop size and
/// occupancy come from `config`.
pub fn generate_dataset(spec: &SceneSpec, config: &EngineConfig, dir: &Path) -> Result<Manifest> {
    let mut spec = spec.clone();
    spec.width = config.image_width;
    spec.height = config.image_height;
    spec.crop_size = config.crop_size;
    spec.occupancy = config.occupancy;
    let bundle = render_ground_truth(&generate_scene(&spec)?)?;
    std::fs::create_dir_all(dir)?;
    write_oracle_dataset(&bundle, &DatasetLayout::new(dir))
}

impl Pipeline {
    pub fn new(config: EngineConfig, dataset: impl Into<PathBuf>, artifacts: impl Into<PathBuf>) -> Self {
        Self { config, dataset: DatasetLayout::new(dataset), artifacts: ArtifactLayout::new(artifacts) }
    }

    fn log(&self) -> Result<ProgressLog> {
        std::fs::create_dir_all(&self.artifacts.root)?;
        ProgressLog::to_file(&self.artifacts.log())
    }

    fn prior_views(&self, m: &Manifest, o: usize, frames: usize) -> Result<OrbitViews> {
        let entry = &m.objects[o];
        let clouds = (1..=frames).map(|t| load_cloud(&self.dataset.prior(&entry.id, t))).collect::<Result<_>>()?;
        Ok(OrbitViews {
            clouds,
            base: entry.oc_camera.camera(),
            center: Vec3::new(0.0, 0.0, entry.z0),
            radius: entry.z0,
            background: OC_BACKGROUND,
        })
    }

    /// Lifts every object's first object-centric frame to a static cloud
    /// from orbit views of the novel-view prior.
    pub fn fit_static(&self) -> Result<()> {
        let m = self.dataset.load_manifest()?;
        let cfg = &self.config;
        let mut log = self.log()?;
        for (o, entry) in m.objects.iter().enumerate() {
            let prior = self.prior_views(&m, o, 1)?;
            let n = cfg.orbit_views;
            let mut views = Vec::with_capacity(n + 1);
            let mut depths = Vec::with_capacity(n);
            let mut masks = Vec::with_capacity(n);
            for k in 0..n {
                let el = if k % 2 == 0 { ORBIT_ELEVATION } else { -ORBIT_ELEVATION };
                let camera = prior.camera(360.0 * k as f64 / n as f64, el);
                let out = render(&camera, &prior.clouds[0], OC_BACKGROUND);
                depths.push(surface_depth(&out.depth, &out.alpha, camera.far));
                masks.push(Mask::from_threshold(&out.alpha, 0, 0.5));
                views.push(View { camera, image: out.rgb });
            }
            let init = init_cloud_from_depth(
                &views,
                &depths,
                &masks,
                cfg.init_points,
                cfg.init_max_scale,
                cfg.sh_degree,
                cfg.seed.wrapping_add(o as u64),
            )?;
            views.push(View { camera: entry.oc_camera.camera(), image: read_png(&self.dataset.oc_frame(&entry.id, 1))? });
            let schedule = crate::optim::StaticSchedule { seed: cfg.seed.wrapping_add(o as u64), ..cfg.static_fit.clone() };
            let fit = fit_static(&views, &init, &schedule, Some(&cfg.densify), &mut log)?;
            let path = self.artifacts.canonical(&entry.id);
            ensure_parent(&path)?;
            save_cloud(&fit.cloud, &path)?;
            log::info!("object {}: {} Gaussians, final loss {:.5}", entry.id, fit.cloud.len(), fit.losses.last().copied().unwrap_or(0.0));
        }
        Ok(())
    }

    /// Fits `β_t` against the background; without a background every scale
    /// is unobservable and stays at one.
    pub fn fit_camera(&self) -> Result<CameraArtifact> {
        let m = self.dataset.load_manifest()?;
        let track = m.camera_track()?;
        let artifact = if m.has_background {
            let cloud = load_cloud(&self.dataset.background_cloud())?;
            let frames = (1..=m.frames).map(|t| read_png(&self.dataset.background_frame(t))).collect::<Result<Vec<_>>>()?;
            let schedule = CameraSchedule { background: m.background_color, ..self.config.camera.clone() };
            let fit = fit_camera(&frames, &cloud, &m.base_camera(), &track, &schedule, &mut self.log()?)?;
            CameraArtifact { beta: fit.track.beta, scale_unobservable: fit.scale_unobservable }
        } else {
            log::warn!("no background in the dataset; camera translation scales stay at 1");
            CameraArtifact { beta: vec![1.0; m.frames], scale_unobservable: (0..m.frames).map(|t| t > 0).collect() }
        };
        std::fs::create_dir_all(&self.artifacts.root)?;
        save_versioned_json(&self.artifacts.camera(), CAMERA_VERSION, &artifact)?;
        Ok(artifact)
    }

    /// Manifest poses with the fitted scales when `camera.json` exists.
    fn camera_track(&self, m: &Manifest) -> Result<CameraTrack> {
        let mut track = m.camera_track()?;
        let path = self.artifacts.camera();
        if path.exists() {
            let cam: CameraArtifact = load_versioned_json(&path, CAMERA_VERSION)?;
            if cam.beta.len() != m.frames {
                return Err(Error::format(&path, format!("{} scales for {} frames", cam.beta.len(), m.frames)));
            }
            track.beta = cam.beta;
            track.validate().map_err(|e| Error::format(&path, e.to_string()))?;
        }
        Ok(track)
    }

    /// Object-centric deformation, then the object-to-world warps, then the
    /// joint fine-tune, per object.
    pub fn fit_motion(&self) -> Result<()> {
        let m = self.dataset.load_manifest()?;
        let cfg = &self.config;
        let frames = m.frames;
        let canonicals = m.objects.iter().map(|e| load_cloud(&self.artifacts.canonical(&e.id))).collect::<Result<Vec<_>>>()?;
        let track = self.camera_track(&m)?;
        let base = m.base_camera();
        let cameras = (1..=frames).map(|t| track.camera(&base, t)).collect::<Result<Vec<_>>>()?;
        let mut log = self.log()?;
        let mut field_cfg = cfg.field;
        if frames > 32 {
            field_cfg.temporal_res = field_cfg.temporal_res.max(FieldConfig::for_frames(frames).temporal_res);
        }
        for (o, (entry, canonical)) in m.objects.iter().zip(&canonicals).enumerate() {
            let id = &entry.id;
            let oc_cam = entry.oc_camera.camera();
            let views = (1..=frames)
                .map(|t| Ok(View { camera: oc_cam.clone(), image: read_png(&self.dataset.oc_frame(id, t))? }))
                .collect::<Result<Vec<_>>>()?;
            let flows = (1..frames)
                .map(|t| {
                    Ok(FlowTarget {
                        flow: read_flow(&self.dataset.oc_flow(id, t))?.flow,
                        mask: read_mask(&self.dataset.oc_flow_mask(id, t))?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let novel = self.prior_views(&m, o, frames)?;
            let seed = cfg.seed.wrapping_add(o as u64);
            let field = DeformationField::new(canonical, frames, field_cfg, seed)?;
            let targets = MotionTargets { frames: &views, flows: Some(&flows), novel: Some(&novel) };
            let schedule = crate::optim::MotionSchedule { seed, ..cfg.motion_schedule(OC_BACKGROUND) };
            let fit = fit_object_motion(canonical, field, targets, &schedule, &mut log)?;

            let anchor = Vec3::from(entry.anchor);
            let c = m.crop_size as f64;
            let side = m.occupancy * c;
            let crop = PixelRect::centered(c / 2.0, c / 2.0, side, side);
            let warps = (1..=frames)
                .map(|t| init_warp_from_bbox(&m.bbox(o, t), &crop, &oc_cam, &cameras[t - 1], &anchor))
                .collect::<Result<Vec<WorldWarp>>>()?;
            let object_views = (1..=frames)
                .map(|t| Ok(View { camera: cameras[t - 1].clone(), image: read_png(&self.dataset.amodal(id, t))? }))
                .collect::<Result<Vec<_>>>()?;
            let deformed = (1..=frames).map(|t| fit.field.deform(canonical, t)).collect::<Result<Vec<_>>>()?;
            let schedule = crate::optim::WarpSchedule { background: OC_BACKGROUND, ..cfg.warp.clone() };
            let wf = fit_world_warp(&deformed, &warps, &anchor, &object_views, &schedule, &mut log)?;
            let mut motion = ObjectMotion::new(fit.field, wf.warps, anchor)?;
            if cfg.joint.steps > 0 {
                motion = joint_finetune(canonical, &motion, &object_views, &cfg.joint_schedule(OC_BACKGROUND), &mut log)?.motion;
            }
            let field_path = self.artifacts.field(id);
            motion.field.save(&field_path)?;
            let file = MotionFile {
                warps: motion.warps.clone(),
                anchor: motion.anchor,
                camera: track.clone(),
                field_path: PathBuf::from("field.gs4d"),
            };
            file.save(&self.artifacts.motion(id))?;
        }
        Ok(())
    }

    /// Loads every object's canonical cloud and motion. The camera track is
    /// the one the first object was fitted with.
    fn load_motions(&self, m: &Manifest) -> Result<(Vec<GaussianCloud>, Vec<ObjectMotion>, CameraTrack)> {
        let mut canonicals = Vec::new();
        let mut motions = Vec::new();
        let mut track = None;
        for e in &m.objects {
            canonicals.push(load_cloud(&self.artifacts.canonical(&e.id))?);
            let path = self.artifacts.motion(&e.id);
            let file = MotionFile::load(&path)?;
            let dir = path.parent().unwrap_or(Path::new("."));
            let field = DeformationField::load(&dir.join(&file.field_path))?;
            if file.camera.frames() != m.frames {
                return Err(Error::format(&path, format!("{} frames, dataset has {}", file.camera.frames(), m.frames)));
            }
            track.get_or_insert(file.camera);
            motions.push(ObjectMotion::new(field, file.warps, file.anchor)?);
        }
        Ok((canonicals, motions, track.expect("manifest lists at least one object")))
    }

    fn world_clouds(canonicals: &[GaussianCloud], motions: &[ObjectMotion], t: usize) -> Result<Vec<GaussianCloud>> {
        canonicals.iter().zip(motions).map(|(c, mo)| mo.world(c, t)).collect()
    }

    /// Aligns every object's depth scale to the first object with the
    /// dataset depth maps.
    pub fn compose(&self) -> Result<CompositionArtifact> {
        let m = self.dataset.load_manifest()?;
        let (canonicals, motions, track) = self.load_motions(&m)?;
        let base = m.base_camera();
        let mut frames = Vec::with_capacity(m.frames);
        for t in 1..=m.frames {
            let cam = track.camera(&base, t)?;
            let world = Self::world_clouds(&canonicals, &motions, t)?;
            let layers = depth_layers(&cam, &world.iter().collect::<Vec<_>>());
            let masks = m.objects.iter().map(|e| read_mask(&self.dataset.mask(&e.id, t))).collect::<Result<Vec<_>>>()?;
            frames.push(CompositionFrame { layers, masks, predicted: read_pfm(&self.dataset.depth(t))? });
        }
        let center = base.center();
        let fit = fit_composition(&frames, 0, center, &self.config.compose, &mut self.log()?)?;
        let artifact = CompositionArtifact {
            reference: fit.composition.reference,
            center: fit.composition.center.into(),
            scales: fit.composition.scales,
        };
        save_versioned_json(&self.artifacts.composition(), COMPOSITION_VERSION, &artifact)?;
        Ok(artifact)
    }

    fn composed(&self, m: &Manifest, canonicals: &[GaussianCloud], motions: &[ObjectMotion], t: usize) -> Result<GaussianCloud> {
        let comp: CompositionArtifact = load_versioned_json(&self.artifacts.composition(), COMPOSITION_VERSION)?;
        if comp.scales.len() != m.objects.len() {
            return Err(Error::format(self.artifacts.composition(), "scale count differs from the object count"));
        }
        let comp = comp.composition();
        let world = Self::world_clouds(canonicals, motions, t)?;
        let mut parts = world
            .iter()
            .zip(&comp.scales)
            .map(|(c, &k)| scale_about_center(c, &comp.center, k))
            .collect::<Result<Vec<_>>>()?;
        if m.has_background {
            parts.push(load_cloud(&self.dataset.background_cloud())?);
        }
        Ok(GaussianCloud::concat(&parts.iter().collect::<Vec<_>>()))
    }

    /// Renders the composed scene at frame `t` from an orbit around the
    /// objects' centroid; `(0, 0)` looks down the world z axis.
    pub fn render(&self, azimuth: f64, elevation: f64, t: usize, out: Option<&Path>) -> Result<PathBuf> {
        let m = self.dataset.load_manifest()?;
        if t < 1 || t > m.frames {
            return Err(Error::FrameOutOfRange { t, frames: m.frames });
        }
        let (canonicals, motions, track) = self.load_motions(&m)?;
        let scene = self.composed(&m, &canonicals, &motions, t)?;
        let objects: usize = canonicals.iter().map(GaussianCloud::len).sum();
        let center = centroid_of(&scene, objects);
        let cam_t = track.camera(&m.base_camera(), t)?;
        let radius = (center - cam_t.center()).norm();
        let camera = orbit_camera(&m.base_camera(), &center, radius, azimuth, elevation);
        let image = render(&camera, &scene, m.background_color).rgb;
        let path = out.map_or_else(|| self.artifacts.render(t, azimuth, elevation), Path::to_path_buf);
        ensure_parent(&path)?;
        write_png(&path, &image)?;
        Ok(path)
    }

    /// Tracks every ground-truth query through its object's fitted motion
    /// and scores the endpoint error.
    pub fn eval(&self) -> Result<EvalArtifact> {
        let m = self.dataset.load_manifest()?;
        let (canonicals, motions, track) = self.load_motions(&m)?;
        let gt = TrackSet::load_csv(&self.dataset.tracks())?;
        if gt.frames != m.frames {
            return Err(Error::format(self.dataset.tracks(), format!("{} frames, dataset has {}", gt.frames, m.frames)));
        }
        let base = m.base_camera();
        let cameras = (1..=m.frames).map(|t| track.camera(&base, t)).collect::<Result<Vec<_>>>()?;
        let masks = m.objects.iter().map(|e| read_mask(&self.dataset.mask(&e.id, 1))).collect::<Result<Vec<_>>>()?;
        let mut per_object: Vec<Vec<(u32, [f64; 2])>> = vec![Vec::new(); m.objects.len()];
        for p in gt.points.iter().filter(|p| p.frame == 1) {
            let q = [p.u, p.v];
            let owner = masks
                .iter()
                .position(|mk| {
                    let (x, y) = (q[0].floor(), q[1].floor());
                    x >= 0.0 && y >= 0.0 && (x as usize) < mk.width && (y as usize) < mk.height && mk.get(x as usize, y as usize)
                })
                .ok_or_else(|| Error::InvalidInput(format!("track {} starts outside every object mask", p.track_id)))?;
            per_object[owner].push((p.track_id, q));
        }
        let mut all = Vec::with_capacity(gt.points.len());
        let mut objects = Vec::new();
        for (o, list) in per_object.iter().enumerate() {
            if list.is_empty() {
                continue;
            }
            let clouds = (1..=m.frames).map(|t| motions[o].world(&canonicals[o], t)).collect::<Result<Vec<_>>>()?;
            let queries: Vec<[f64; 2]> = list.iter().map(|(_, q)| *q).collect();
            let pred = project_gaussian_tracks(&clouds, &cameras, &queries)?;
            let points: Vec<TrackPoint> =
                pred.tracks.points.iter().map(|p| TrackPoint { track_id: list[p.track_id as usize].0, ..*p }).collect();
            let ids: std::collections::HashSet<u32> = list.iter().map(|(id, _)| *id).collect();
            let gt_o = TrackSet::new(m.frames, gt.points.iter().filter(|p| ids.contains(&p.track_id)).copied().collect())?;
            let pred_o = TrackSet::new(m.frames, points.clone())?;
            objects.push(ObjectEpe { id: m.objects[o].id.clone(), report: compute_epe(&pred_o, &gt_o)? });
            all.extend(points);
        }
        let overall = compute_epe(&TrackSet::new(m.frames, all)?, &gt)?;
        let artifact = EvalArtifact { overall, objects };
        std::fs::create_dir_all(&self.artifacts.root)?;
        save_versioned_json(&self.artifacts.eval(), EVAL_VERSION, &artifact)?;
        Ok(artifact)
    }

    /// Every fitting stage in order, then the evaluation.
    pub fn run_all(&self) -> Result<EvalArtifact> {
        self.fit_static()?;
        self.fit_camera()?;
        self.fit_motion()?;
        self.compose()?;
        self.eval()
    }
}

/// Centroid of the first `n` Gaussians (the objects, before the background).
fn centroid_of(cloud: &GaussianCloud, n: usize) -> Vec3 {
    let n = n.min(cloud.len()).max(1);
    cloud.gaussians[..n].iter().fold(Vec3::zeros(), |a, g| a + g.mu) / n as f64
}
