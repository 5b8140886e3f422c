//! Rendering a generated scene into ground-truth supervision.

use std::path::Path;

use rayon::prelude::*;

use super::oc::OcTransform;
use super::{rigid_transform, Scene};
use crate::error::{Error, Result};
use crate::geometry::{orbit_camera, GaussianCloud, PinholeCamera, Vec3};
use crate::image::{subpixel_bbox, FlowField, Image, Mask, PixelRect};
use crate::losses::flow_consistency_mask;
use crate::metrics::{attach_query, follow, TrackPoint, TrackSet};
use crate::motion::WorldWarp;
use crate::optim::{FlowTarget, NovelViews, View};
use crate::render::{project_cloud, rasterize, render, render_flow, render_full, FLOW_MIN_ALPHA};

/// Background color of object-only and object-centric renders.
pub const OC_BACKGROUND: [f64; 3] = [0.0; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct FrameData {
    pub rgb: Image,
    pub depth: Image,
    pub alpha: Image,
    /// Background-only render, when the scene has a background.
    pub background: Option<Image>,
}

/// Object-centric supervision of one object.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectCentric {
    pub camera: PinholeCamera,
    pub transforms: Vec<OcTransform>,
    /// Ground-truth object-centric clouds per frame.
    pub clouds: Vec<GaussianCloud>,
    pub frames: Vec<Image>,
    pub masks: Vec<Mask>,
    /// `flow_fwd[i]`: frame `i+1 → i+2`; `flow_bwd[i]`: frame `i+2 → i+1`.
    pub flow_fwd: Vec<FlowField>,
    pub flow_bwd: Vec<FlowField>,
    /// Valid and forward-backward consistent pixels of `flow_fwd`.
    pub flow_masks: Vec<Mask>,
    /// Canonical (frame-1) object-centric centroid.
    pub anchor: Vec3,
    /// Warps back to world coordinates about `anchor`.
    pub warps: Vec<WorldWarp>,
    pub z0: f64,
}

impl ObjectCentric {
    pub fn views(&self) -> Vec<View> {
        self.frames.iter().map(|f| View { camera: self.camera.clone(), image: f.clone() }).collect()
    }

    pub fn flow_targets(&self) -> Vec<FlowTarget> {
        self.flow_fwd
            .iter()
            .zip(&self.flow_masks)
            .map(|(f, m)| FlowTarget { flow: f.flow.clone(), mask: m.clone() })
            .collect()
    }

    /// Orbit views around the object-centric anchor.
    pub fn novel_views(&self) -> OrbitViews {
        OrbitViews {
            clouds: self.clouds.clone(),
            base: self.camera.clone(),
            center: Vec3::new(0.0, 0.0, self.z0),
            radius: self.z0,
            background: OC_BACKGROUND,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectData {
    /// Visible masks (a partition of the foreground across objects).
    pub masks: Vec<Mask>,
    /// Object-only full-frame renders and their alpha ≥ 0.5 masks.
    pub amodal: Vec<Image>,
    pub amodal_masks: Vec<Mask>,
    /// Sub-pixel boxes of the amodal alpha.
    pub bboxes: Vec<PixelRect>,
    /// World centroid per frame.
    pub anchors: Vec<Vec3>,
    /// Frame-1 query pixels of the tracks; track id = query index.
    pub queries: Vec<[f64; 2]>,
    pub tracks: TrackSet,
    pub oc: ObjectCentric,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruthBundle {
    pub scene: Scene,
    pub frames: Vec<FrameData>,
    /// Full-frame flows, indexed like [`ObjectCentric::flow_fwd`].
    pub flow_fwd: Vec<FlowField>,
    pub flow_bwd: Vec<FlowField>,
    pub objects: Vec<ObjectData>,
}

impl GroundTruthBundle {
    pub fn frame_views(&self) -> Vec<View> {
        self.scene.cameras.iter().zip(&self.frames).map(|(c, f)| View { camera: c.clone(), image: f.rgb.clone() }).collect()
    }

    /// Object-only full-frame views of object `o`.
    pub fn object_views(&self, o: usize) -> Vec<View> {
        self.scene
            .cameras
            .iter()
            .zip(&self.objects[o].amodal)
            .map(|(c, f)| View { camera: c.clone(), image: f.clone() })
            .collect()
    }

    /// All objects' tracks in one set; ids are renumbered consecutively in
    /// object order.
    pub fn tracks(&self) -> Result<TrackSet> {
        merge_tracks(&self.objects.iter().map(|o| &o.tracks).collect::<Vec<_>>(), self.scene.frames())
    }

    pub fn export_tracks(&self, path: &Path) -> Result<()> {
        self.tracks()?.save_csv(path)
    }
}

/// Concatenates track sets, offsetting ids so they stay unique.
pub fn merge_tracks(sets: &[&TrackSet], frames: usize) -> Result<TrackSet> {
    let mut points = Vec::new();
    let mut offset = 0u32;
    for s in sets {
        let max = s.points.iter().map(|p| p.track_id + 1).max().unwrap_or(0);
        points.extend(s.points.iter().map(|p| TrackPoint { track_id: p.track_id + offset, ..*p }));
        offset += max;
    }
    TrackSet::new(frames, points)
}

/// Renders of a set of per-frame clouds from cameras orbiting `center`.
#[derive(Debug, Clone, PartialEq)]
pub struct OrbitViews {
    pub clouds: Vec<GaussianCloud>,
    pub base: PinholeCamera,
    pub center: Vec3,
    pub radius: f64,
    pub background: [f64; 3],
}

impl OrbitViews {
    pub fn camera(&self, azimuth_deg: f64, elevation_deg: f64) -> PinholeCamera {
        orbit_camera(&self.base, &self.center, self.radius, azimuth_deg, elevation_deg)
    }
}

impl NovelViews for OrbitViews {
    fn view(&self, t: usize, azimuth_deg: f64, elevation_deg: f64) -> Result<View> {
        let cloud = self
            .clouds
            .get(t.wrapping_sub(1))
            .ok_or(Error::FrameOutOfRange { t, frames: self.clouds.len() })?;
        let camera = self.camera(azimuth_deg, elevation_deg);
        let image = render(&camera, cloud, self.background).rgb;
        Ok(View { camera, image })
    }
}

/// Alpha-normalized depth at pixel `(x, y)` of a render, if covered.
fn surface_depth(depth: &Image, alpha: &Image, far: f64, x: usize, y: usize) -> Option<f64> {
    let a = alpha.get(x, y, 0);
    (a >= FLOW_MIN_ALPHA).then(|| (depth.get(x, y, 0) - (1.0 - a) * far) / a)
}

/// Per-object visible masks: a pixel belongs to the object with the largest
/// compositing weight there, provided objects cover at least half of it.
fn visible_masks(scene: &Scene, cam: &PinholeCamera, t: usize) -> Vec<Mask> {
    let n = scene.objects.len();
    let nch = n + usize::from(scene.background.is_some());
    let full = scene.full_cloud(t);
    let mut labels = Vec::with_capacity(full.len());
    for (o, obj) in scene.objects.iter().enumerate() {
        labels.extend(std::iter::repeat(o).take(obj[t - 1].len()));
    }
    labels.resize(full.len(), n);
    let splats = project_cloud(cam, &full);
    let mut values = vec![0.0; splats.len() * nch];
    for (i, s) in splats.iter().enumerate() {
        values[i * nch + labels[s.index]] = 1.0;
    }
    let out = rasterize(cam.width, cam.height, &splats, &values, nch, &vec![0.0; nch]);
    let mut masks = vec![Mask::new(cam.width, cam.height, false); n];
    for p in 0..cam.width * cam.height {
        let w = &out.values.data[p * nch..p * nch + nch];
        let objects: f64 = w[..n].iter().sum();
        if objects < 0.5 {
            continue;
        }
        let mut best = 0;
        for k in 1..nch {
            if w[k] > w[best] {
                best = k;
            }
        }
        if best < n {
            masks[best].data[p] = true;
        }
    }
    masks
}

fn camera_frame(cloud: &GaussianCloud, cam: &PinholeCamera) -> GaussianCloud {
    rigid_transform(cloud, &cam.rot, &Vec3::zeros(), &cam.trans)
}

/// Flow between consecutive frames seen by moving cameras: both clouds are
/// expressed in their own camera frames and rendered with an unposed camera.
fn frame_flow(scene: &Scene, a: usize, b: usize) -> Result<FlowField> {
    let ca = camera_frame(&scene.full_cloud(a), &scene.cameras[a - 1]);
    let cb = camera_frame(&scene.full_cloud(b), &scene.cameras[b - 1]);
    render_flow(&scene.base_camera, &ca, &cb)
}

fn object_centric(scene: &Scene, o: usize, bboxes: &[PixelRect]) -> Result<ObjectCentric> {
    let spec = &scene.spec;
    let frames = scene.frames();
    let camera = spec.oc_camera();
    let clouds_w = &scene.objects[o];
    let first = OcTransform::new(&scene.cameras[0], &bboxes[0], &clouds_w[0].centroid(), None, spec.crop_size, spec.occupancy)?;
    let z0 = first.z0;
    let mut transforms = vec![first];
    for t in 2..=frames {
        transforms.push(OcTransform::new(
            &scene.cameras[t - 1],
            &bboxes[t - 1],
            &clouds_w[t - 1].centroid(),
            Some(z0),
            spec.crop_size,
            spec.occupancy,
        )?);
    }
    let clouds: Vec<GaussianCloud> = transforms.iter().zip(clouds_w).map(|(tr, c)| tr.apply(c)).collect();
    let anchor = clouds[0].centroid();
    let warps = transforms.iter().map(|tr| tr.world_warp(&anchor)).collect::<Result<Vec<_>>>()?;
    let renders: Vec<(Image, Mask, Option<(FlowField, FlowField, Mask)>)> = (0..frames)
        .into_par_iter()
        .map(|i| {
            let next = clouds.get(i + 1);
            let out = render_full(&camera, &clouds[i], next, OC_BACKGROUND)?;
            let mask = Mask::from_threshold(&out.alpha, 0, 0.5);
            let flows = match (next, out.flow) {
                (Some(n), Some(fwd)) => {
                    let bwd = render_flow(&camera, n, &clouds[i])?;
                    let m = flow_consistency_mask(&fwd.flow, &bwd.flow)?.and(&fwd.valid);
                    Some((fwd, bwd, m))
                }
                _ => None,
            };
            Ok((out.rgb, mask, flows))
        })
        .collect::<Result<_>>()?;
    let mut oc = ObjectCentric {
        camera,
        transforms,
        clouds,
        frames: Vec::new(),
        masks: Vec::new(),
        flow_fwd: Vec::new(),
        flow_bwd: Vec::new(),
        flow_masks: Vec::new(),
        anchor,
        warps,
        z0,
    };
    for (img, mask, flows) in renders {
        oc.frames.push(img);
        oc.masks.push(mask);
        if let Some((f, b, m)) = flows {
            oc.flow_fwd.push(f);
            oc.flow_bwd.push(b);
            oc.flow_masks.push(m);
        }
    }
    Ok(oc)
}

/// Attaches frame-1 queries on a grid over the visible mask and follows
/// them; a point is occluded when the rest of the scene is covered at its
/// pixel and nearer than the point.
fn object_tracks(scene: &Scene, o: usize, mask1: &Mask) -> Result<(Vec<[f64; 2]>, TrackSet)> {
    let stride = scene.spec.track_stride;
    let frames = scene.frames();
    let cams = &scene.cameras;
    let clouds = &scene.objects[o];
    let mut queries = Vec::new();
    let mut attached = Vec::new();
    for y in (stride / 2..mask1.height).step_by(stride) {
        for x in (stride / 2..mask1.width).step_by(stride) {
            if !mask1.get(x, y) {
                continue;
            }
            let q = [x as f64 + 0.5, y as f64 + 0.5];
            if let Some(a) = attach_query(&cams[0], &clouds[0], q) {
                queries.push(q);
                attached.push(a);
            }
        }
    }
    let occluders: Vec<Option<(Image, Image)>> = (1..=frames)
        .into_par_iter()
        .map(|t| {
            let others = scene.others(o, t);
            (!others.is_empty()).then(|| {
                let r = render(&cams[t - 1], &others, [0.0; 3]);
                (r.depth, r.alpha)
            })
        })
        .collect();
    let mut points = Vec::with_capacity(queries.len() * frames);
    for (id, att) in attached.iter().enumerate() {
        let mut last = att.query;
        for t in 1..=frames {
            let cam = &cams[t - 1];
            let (pos, depth) = match follow(att, &cams[0], &clouds[0], cam, &clouds[t - 1]) {
                Some((p, z)) => (p, Some(z)),
                None => (last, None),
            };
            last = pos;
            let inside = pos[0] >= 0.0 && pos[1] >= 0.0 && pos[0] < cam.width as f64 && pos[1] < cam.height as f64;
            let visible = match (inside, depth) {
                (true, Some(z)) => {
                    let (x, y) = (pos[0] as usize, pos[1] as usize);
                    match &occluders[t - 1] {
                        Some((d, a)) => surface_depth(d, a, cam.far, x, y).map_or(true, |dz| dz >= z),
                        None => true,
                    }
                }
                _ => false,
            };
            points.push(TrackPoint { track_id: id as u32, frame: t, u: pos[0], v: pos[1], visible });
        }
    }
    Ok((queries, TrackSet::new(frames, points)?))
}

/// Renders every supervision signal of `scene`.
pub fn render_ground_truth(scene: &Scene) -> Result<GroundTruthBundle> {
    let frames_n = scene.frames();
    let bg_color = scene.spec.background_color;
    let frames: Vec<(FrameData, Vec<Mask>)> = (1..=frames_n)
        .into_par_iter()
        .map(|t| {
            let cam = &scene.cameras[t - 1];
            let out = render(cam, &scene.full_cloud(t), bg_color);
            let background = scene.background.as_ref().map(|b| render(cam, b, bg_color).rgb);
            let data = FrameData { rgb: out.rgb, depth: out.depth, alpha: out.alpha, background };
            (data, visible_masks(scene, cam, t))
        })
        .collect();
    let flows: Vec<(FlowField, FlowField)> = (1..frames_n)
        .into_par_iter()
        .map(|t| Ok((frame_flow(scene, t, t + 1)?, frame_flow(scene, t + 1, t)?)))
        .collect::<Result<_>>()?;

    let mut objects = Vec::with_capacity(scene.objects.len());
    for (o, clouds) in scene.objects.iter().enumerate() {
        let amodal_renders: Vec<(Image, Mask, Option<PixelRect>)> = (1..=frames_n)
            .into_par_iter()
            .map(|t| {
                let r = render(&scene.cameras[t - 1], &clouds[t - 1], OC_BACKGROUND);
                let m = Mask::from_threshold(&r.alpha, 0, 0.5);
                (r.rgb, m, subpixel_bbox(&r.alpha, 0.5))
            })
            .collect();
        let bboxes = amodal_renders
            .iter()
            .enumerate()
            .map(|(i, (_, _, b))| b.ok_or_else(|| Error::InvalidInput(format!("object {o} is not visible at frame {}", i + 1))))
            .collect::<Result<Vec<_>>>()?;
        let masks: Vec<Mask> = frames.iter().map(|(_, m)| m[o].clone()).collect();
        let (queries, tracks) = object_tracks(scene, o, &masks[0])?;
        let oc = object_centric(scene, o, &bboxes)?;
        let (amodal, amodal_masks) = amodal_renders.into_iter().map(|(i, m, _)| (i, m)).unzip();
        objects.push(ObjectData {
            masks,
            amodal,
            amodal_masks,
            bboxes,
            anchors: clouds.iter().map(GaussianCloud::centroid).collect(),
            queries,
            tracks,
            oc,
        });
    }
    let (flow_fwd, flow_bwd) = flows.into_iter().unzip();
    Ok(GroundTruthBundle {
        scene: scene.clone(),
        frames: frames.into_iter().map(|(f, _)| f).collect(),
        flow_fwd,
        flow_bwd,
        objects,
    })
}
