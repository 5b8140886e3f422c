//! Relative depth scale of each object from the affine-invariant depth
//! alignment against a predicted scene depth.

use crate::error::{Error, Result};
use crate::geometry::{GaussianCloud, PinholeCamera, Vec3};
use crate::image::{Image, Mask};
use crate::losses::{depth_align_loss, quantile};
use crate::motion::SceneComposition;
use crate::optim::adam::{AdamState, ExpDecay};
use crate::optim::log::{LossTerms, ProgressLog};
use crate::render::render;

pub const STAGE_COMPOSE: &str = "compose";

/// Rendered pixels with at least this alpha take part in the alignment.
pub const COMPOSE_MIN_ALPHA: f64 = 0.5;

/// One object's own render at one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthLayer {
    /// Alpha-normalized depth.
    pub depth: Image,
    pub alpha: Image,
}

/// Renders each object alone; scaling an object about the camera center by
/// `k` multiplies its normalized depth by `k` and leaves its alpha intact.
pub fn depth_layers(cam: &PinholeCamera, objects: &[&GaussianCloud]) -> Vec<DepthLayer> {
    objects
        .iter()
        .map(|c| {
            let out = render(cam, c, [0.0; 3]);
            let mut depth = out.depth.clone();
            for p in 0..depth.data.len() {
                let a = out.alpha.data[p];
                // remove the background share of the expected depth
                depth.data[p] = if a > 0.0 { (out.depth.data[p] - (1.0 - a) * cam.far) / a } else { cam.far };
            }
            DepthLayer { depth, alpha: out.alpha }
        })
        .collect()
}

/// Observations of one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CompositionFrame {
    pub layers: Vec<DepthLayer>,
    /// Per-object visible masks (a partition of the foreground).
    pub masks: Vec<Mask>,
    /// Scene depth from an external predictor, defined up to a positive
    /// affine map.
    pub predicted: Image,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompositionSchedule {
    pub iterations: usize,
    pub lr_start: f64,
    pub lr_end: f64,
}

impl Default for CompositionSchedule {
    fn default() -> Self {
        Self { iterations: 300, lr_start: 0.05, lr_end: 1e-4 }
    }
}

#[derive(Debug, Clone)]
pub struct CompositionFit {
    pub composition: SceneComposition,
    pub losses: Vec<f64>,
}

struct FrameMasks {
    /// Object owning each union pixel.
    owner: Vec<Option<usize>>,
    reference: Mask,
    union: Mask,
}

fn frame_masks(f: &CompositionFrame, reference: usize) -> Result<FrameMasks> {
    let d = &f.predicted;
    let mut owner = vec![None; d.pixels()];
    let mut union = Mask::new(d.width, d.height, false);
    for (o, (m, l)) in f.masks.iter().zip(&f.layers).enumerate() {
        if m.width != d.width || m.height != d.height || !l.depth.same_shape(d) {
            return Err(Error::DimensionMismatch("mask or layer size differs from the predicted depth".into()));
        }
        for p in 0..d.pixels() {
            if m.data[p] && l.alpha.data[p] >= COMPOSE_MIN_ALPHA && owner[p].is_none() {
                owner[p] = Some(o);
                union.data[p] = true;
            }
        }
    }
    // pixels on an occlusion boundary mix two surfaces in the predicted depth
    let (w, h) = (d.width, d.height);
    let raw = owner.clone();
    for y in 0..h {
        for x in 0..w {
            let Some(o) = raw[y * w + x] else { continue };
            let mixed = [(0i64, 1i64), (0, -1), (1, 0), (-1, 0)].iter().any(|&(dx, dy)| {
                let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h
                    && matches!(raw[ny as usize * w + nx as usize], Some(n) if n != o)
            });
            if mixed {
                owner[y * w + x] = None;
                union.data[y * w + x] = false;
            }
        }
    }
    let mut reference_mask = Mask::new(d.width, d.height, false);
    for p in 0..d.pixels() {
        reference_mask.data[p] = owner[p] == Some(reference);
    }
    Ok(FrameMasks { owner, reference: reference_mask, union })
}

fn composed_depth(f: &CompositionFrame, m: &FrameMasks, scales: &[f64]) -> Image {
    let mut out = Image::new(f.predicted.width, f.predicted.height, 1);
    for p in 0..out.data.len() {
        if let Some(o) = m.owner[p] {
            out.data[p] = scales[o] * f.layers[o].depth.data[p];
        }
    }
    out
}

fn median_in(img: &Image, mask: &[bool]) -> Option<f64> {
    let v: Vec<f64> = img.data.iter().zip(mask).filter(|(_, m)| **m).map(|(d, _)| *d).collect();
    quantile(&v, 0.5).ok()
}

/// Initial scales: each object's rendered-to-predicted median depth ratio
/// matched to the reference object's.
fn initial_scales(frames: &[CompositionFrame], masks: &[FrameMasks], objects: usize, reference: usize) -> Vec<f64> {
    let mut ratios = vec![Vec::new(); objects];
    for (f, m) in frames.iter().zip(masks) {
        let of = |o: usize| -> Vec<bool> { m.owner.iter().map(|x| *x == Some(o)).collect() };
        let r = of(reference);
        let (Some(pr), Some(rr)) = (median_in(&f.predicted, &r), median_in(&f.layers[reference].depth, &r)) else {
            continue;
        };
        for (o, ratio) in ratios.iter_mut().enumerate() {
            let mo = of(o);
            if let (Some(po), Some(ro)) = (median_in(&f.predicted, &mo), median_in(&f.layers[o].depth, &mo)) {
                let k = (po / pr) * (rr / ro);
                if k.is_finite() && k > 0.0 {
                    ratio.push(k);
                }
            }
        }
    }
    (0..objects)
        .map(|o| if o == reference { 1.0 } else { quantile(&ratios[o], 0.5).unwrap_or(1.0) })
        .collect()
}

/// Fits one depth scale per object (the reference stays at one) by Adam on
/// `log k`, summing the alignment loss over frames.
pub fn fit_composition(
    frames: &[CompositionFrame],
    reference: usize,
    center: Vec3,
    schedule: &CompositionSchedule,
    log: &mut ProgressLog,
) -> Result<CompositionFit> {
    let objects = frames.first().map_or(0, |f| f.layers.len());
    if objects == 0 {
        return Err(Error::InvalidInput("no objects to compose".into()));
    }
    if reference >= objects {
        return Err(Error::InvalidInput(format!("reference {reference} out of range for {objects} objects")));
    }
    if frames.iter().any(|f| f.layers.len() != objects || f.masks.len() != objects) {
        return Err(Error::DimensionMismatch("frames disagree on the object count".into()));
    }
    let masks: Vec<FrameMasks> = frames.iter().map(|f| frame_masks(f, reference)).collect::<Result<_>>()?;
    let mut log_k: Vec<f64> = initial_scales(frames, &masks, objects, reference).iter().map(|k| k.ln()).collect();
    let lr = ExpDecay { start: schedule.lr_start, end: schedule.lr_end, steps: schedule.iterations };
    let mut opt = AdamState::new(objects);
    let mut losses = Vec::with_capacity(schedule.iterations);
    let inv = 1.0 / frames.len() as f64;
    for it in 0..schedule.iterations {
        let scales: Vec<f64> = log_k.iter().map(|v| v.exp()).collect();
        let mut total = 0.0;
        let mut grad = vec![0.0; objects];
        for (f, m) in frames.iter().zip(&masks) {
            let rendered = composed_depth(f, m, &scales);
            let l = depth_align_loss(&rendered, &f.predicted, &m.reference, &m.union)?;
            total += inv * l.value;
            for p in 0..rendered.data.len() {
                if let Some(o) = m.owner[p] {
                    // d/d(log k) = k · D_o
                    grad[o] += inv * l.grad.data[p] * rendered.data[p];
                }
            }
        }
        grad[reference] = 0.0;
        losses.push(total);
        log.record(STAGE_COMPOSE, it, LossTerms { depth: Some(total), ..Default::default() }, total)?;
        opt.update(&mut log_k, &grad, lr.at(it));
        log_k[reference] = 0.0;
    }
    let mut composition = SceneComposition::identity(objects, reference, center);
    composition.scales = log_k.iter().map(|v| v.exp()).collect();
    composition.scales[reference] = 1.0;
    Ok(CompositionFit { composition, losses })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::scale_about_center;
    use crate::synth::{generate_scene, presets, render_ground_truth, ColorScheme, MotionProgram, ObjectSpec};

    fn object(center: [f64; 3], radius: f64, seed_color: f64) -> ObjectSpec {
        ObjectSpec {
            count: 600,
            center,
            radii: [radius; 3],
            gaussian_scale: 0.03,
            opacity: 0.95,
            color: ColorScheme::Smooth { base: [seed_color, 0.5, 0.4], amplitude: 0.3, frequency: 2.0 },
            motion: MotionProgram::Rigid { velocity: [0.01, 0.0, 0.0], spin: [0.0, 0.05, 0.0] },
        }
    }

    /// Frames where object `o > 0` sits `1/k_o` of the way along the rays
    /// from the camera, as independent fits would leave it.
    fn frames(objects: Vec<ObjectSpec>, gt: &[f64]) -> (Vec<CompositionFrame>, Vec3, Vec<f64>) {
        let mut spec = presets::single_object(MotionProgram::Static, presets::smooth_color(), 10, 31);
        spec.objects = objects;
        spec.frames = 3;
        spec.width = 128;
        spec.height = 128;
        spec.focal = 150.0;
        let scene = generate_scene(&spec).unwrap();
        let bundle = render_ground_truth(&scene).unwrap();
        let center = scene.base_camera.center();
        let mut visible = vec![0.0; gt.len()];
        let frames = (0..spec.frames)
            .map(|t| {
                let cam = &scene.cameras[t];
                let placed: Vec<GaussianCloud> =
                    (0..gt.len()).map(|o| scale_about_center(&scene.objects[o][t], &center, 1.0 / gt[o]).unwrap()).collect();
                let layers = depth_layers(cam, &placed.iter().collect::<Vec<_>>());
                let full = render(cam, &scene.full_cloud(t + 1), [0.0; 3]);
                let depth = Image::from_fn(128, 128, 1, |x, y, _| {
                    let a = full.alpha.get(x, y, 0);
                    if a > 1e-6 { (full.depth.get(x, y, 0) - (1.0 - a) * cam.far) / a } else { cam.far }
                });
                for (o, v) in visible.iter_mut().enumerate() {
                    *v += bundle.objects[o].masks[t].count() as f64 / bundle.objects[o].amodal_masks[t].count().max(1) as f64;
                }
                CompositionFrame {
                    layers,
                    masks: bundle.objects.iter().map(|o| o.masks[t].clone()).collect(),
                    predicted: depth.map(|d| 0.5 * d + 1.0),
                }
            })
            .collect();
        (frames, center, visible.iter().map(|v| v / spec.frames as f64).collect())
    }

    #[test]
    fn reference_alone_has_unit_scale() {
        let (f, center, _) = frames(vec![object([0.0, 0.0, 2.0], 0.3, 0.6)], &[1.0]);
        let fit = fit_composition(&f, 0, center, &CompositionSchedule::default(), &mut ProgressLog::in_memory()).unwrap();
        assert_eq!(fit.composition.scales, vec![1.0]);
    }

    #[test]
    fn three_objects_with_heavy_occlusion() {
        let gt = [1.0, 1.7, 0.6];
        let objects = vec![object([-0.2, 0.0, 2.0], 0.28, 0.7), object([0.35, 0.05, 3.0], 0.3, 0.3), object([-0.33, 0.3, 3.6], 0.35, 0.5)];
        let (f, center, visible) = frames(objects, &gt);
        assert!(visible[2] > 0.02 && visible[2] < 0.4, "visible fraction {visible:?}");
        let fit = fit_composition(&f, 0, center, &CompositionSchedule::default(), &mut ProgressLog::in_memory()).unwrap();
        for o in 1..3 {
            let k = fit.composition.scales[o];
            assert!((k - gt[o]).abs() / gt[o] <= 0.05, "object {o}: k = {k}, expected {}", gt[o]);
        }
        assert!(fit.losses.last() <= fit.losses.first());
    }

    #[test]
    fn bad_reference_is_rejected() {
        let (f, center, _) = frames(vec![object([0.0, 0.0, 2.0], 0.3, 0.6)], &[1.0]);
        let r = fit_composition(&f, 1, center, &CompositionSchedule::default(), &mut ProgressLog::in_memory());
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }
}
