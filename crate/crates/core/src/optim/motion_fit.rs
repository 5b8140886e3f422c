//! Object-centric deformation fitting with reference, flow, novel-view and
//! physical-prior supervision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::{DeformationField, FieldCache, FieldGrads, GRID_TENSORS};
use crate::geometry::GaussianCloud;
use crate::image::{Image, Mask};
use crate::losses::{flow_loss, rgb_loss, rigidity_loss, scale_reg_loss, LossWeights, NeighborGraph, RIGID_NEIGHBORS};
use crate::optim::adam::AdamState;
use crate::optim::log::{LossTerms, ProgressLog};
use crate::optim::{sample_batch, View};
use crate::render::{render_backward, render_full, CloudGrads, RenderUpstream};

pub const STAGE_MOTION: &str = "motion";

/// Supplies supervision from viewpoints other than the reference camera.
pub trait NovelViews: Sync {
    /// Target view of frame `t` from `(azimuth, elevation)` degrees.
    fn view(&self, t: usize, azimuth_deg: f64, elevation_deg: f64) -> Result<View>;
}

/// Learning rates of the deformation field.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldLr {
    pub grid: f64,
    pub mlp: f64,
}

impl Default for FieldLr {
    fn default() -> Self {
        Self { grid: 6.4e-4, mlp: 6.4e-3 }
    }
}

impl FieldLr {
    pub fn scaled(&self, s: f64) -> Self {
        Self { grid: self.grid * s, mlp: self.mlp * s }
    }
}

/// AdamW over the field tensors.
#[derive(Debug, Clone)]
pub struct FieldOptimizer {
    states: Vec<AdamState>,
}

impl FieldOptimizer {
    pub fn new(field: &DeformationField, weight_decay: f64) -> Self {
        let states = field
            .tensors()
            .iter()
            .map(|t| {
                let mut s = AdamState::new(t.len());
                s.weight_decay = weight_decay;
                s
            })
            .collect();
        Self { states }
    }

    pub fn step(&mut self, field: &mut DeformationField, grads: &FieldGrads, lr: &FieldLr) {
        for (k, (p, s)) in field.tensors_mut().into_iter().zip(&mut self.states).enumerate() {
            let rate = if k < GRID_TENSORS { lr.grid } else { lr.mlp };
            s.update(p, &grads.tensors[k], rate);
        }
    }
}

/// Forward flow target from frame `t` to `t+1` and its confidence mask.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowTarget {
    pub flow: Image,
    pub mask: Mask,
}

/// Supervision for [`fit_object_motion`].
#[derive(Clone, Copy)]
pub struct MotionTargets<'a> {
    /// One reference view per frame.
    pub frames: &'a [View],
    /// `T − 1` forward flow targets; `None` disables the flow term.
    pub flows: Option<&'a [FlowTarget]>,
    pub novel: Option<&'a dyn NovelViews>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MotionSchedule {
    pub iterations_per_frame: usize,
    pub reference_per_batch: usize,
    pub novel_per_batch: usize,
    pub lr: FieldLr,
    pub weights: LossWeights,
    /// Weight of the second-difference penalty along time on the field's
    /// time planes.
    pub time_smoothness: f64,
    /// Novel views are drawn with `|azimuth| ≤ azimuth_range`,
    /// `|elevation| ≤ elevation_range` (degrees).
    pub azimuth_range: f64,
    pub elevation_range: f64,
    pub weight_decay: f64,
    pub background: [f64; 3],
    pub seed: u64,
    /// Frames (1-based) left out of every data term; the field still covers
    /// them.
    pub held_out: Vec<usize>,
}

impl Default for MotionSchedule {
    fn default() -> Self {
        Self {
            iterations_per_frame: 100,
            reference_per_batch: 8,
            novel_per_batch: 2,
            lr: FieldLr::default(),
            weights: LossWeights::default(),
            time_smoothness: 0.0,
            azimuth_range: 60.0,
            elevation_range: 30.0,
            weight_decay: 0.0,
            background: [0.0; 3],
            seed: 0,
            held_out: Vec::new(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MotionFit {
    pub field: DeformationField,
    /// Weighted total before each update.
    pub losses: Vec<f64>,
}

/// Per-frame deformed clouds and the caches to differentiate them.
pub(crate) fn deform_all(field: &DeformationField, canonical: &GaussianCloud) -> Result<(Vec<GaussianCloud>, Vec<FieldCache>)> {
    let mut clouds = Vec::with_capacity(field.frames);
    let mut caches = Vec::with_capacity(field.frames);
    for t in 1..=field.frames {
        let (c, k) = field.deform_with_cache(canonical, t)?;
        clouds.push(c);
        caches.push(k);
    }
    Ok((clouds, caches))
}

pub(crate) fn field_backward_all(
    field: &DeformationField,
    canonical: &GaussianCloud,
    caches: &[FieldCache],
    grads: &[CloudGrads],
) -> Result<FieldGrads> {
    let mut total = FieldGrads::zeros_like(field);
    for (cache, g) in caches.iter().zip(grads) {
        total.add_scaled(&field.backward(canonical, cache, g)?, 1.0);
    }
    Ok(total)
}

/// Fits the deformation field; the canonical cloud stays fixed and no
/// Gaussians are added or removed.
pub fn fit_object_motion(
    canonical: &GaussianCloud,
    field: DeformationField,
    targets: MotionTargets,
    schedule: &MotionSchedule,
    log: &mut ProgressLog,
) -> Result<MotionFit> {
    let frames = field.frames;
    if targets.frames.len() != frames {
        return Err(Error::DimensionMismatch(format!("{} reference frames for a {frames}-frame field", targets.frames.len())));
    }
    if let Some(f) = targets.flows {
        if f.len() + 1 != frames {
            return Err(Error::DimensionMismatch(format!("{} flow targets for {frames} frames", f.len())));
        }
    }
    let novel_count = if targets.novel.is_some() { schedule.novel_per_batch } else { 0 };
    let batch_total = schedule.reference_per_batch + novel_count;
    if batch_total == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    let fit_frames: Vec<usize> = (0..frames).filter(|t| !schedule.held_out.contains(&(t + 1))).collect();
    if fit_frames.is_empty() {
        return Err(Error::InvalidInput("every frame is held out".into()));
    }
    let w = &schedule.weights;
    let use_flow = targets.flows.is_some() && w.flow > 0.0;
    let graph = NeighborGraph::knn(canonical, RIGID_NEIGHBORS);
    let mut field = field;
    let mut opt = FieldOptimizer::new(&field, schedule.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let iterations = schedule.iterations_per_frame * frames;
    let mut losses = Vec::with_capacity(iterations);
    for it in 0..iterations {
        let (clouds, caches) = deform_all(&field, canonical)?;
        let mut grads: Vec<CloudGrads> = clouds.iter().map(CloudGrads::zeros).collect();
        let mut terms = LossTerms { rgb: Some(0.0), ..Default::default() };
        let (mut rgb_total, mut flow_total) = (0.0, 0.0);

        let refs = sample_batch(&mut rng, fit_frames.len(), schedule.reference_per_batch);
        for &(i, share) in &refs {
            let t = fit_frames[i];
            let weight = share * schedule.reference_per_batch as f64 / batch_total as f64;
            let view = &targets.frames[t];
            let pair = use_flow && t + 1 < frames && !schedule.held_out.contains(&(t + 2));
            let next = pair.then(|| &clouds[t + 1]);
            let fwd = render_full(&view.camera, &clouds[t], next, schedule.background)?;
            let l = rgb_loss(&fwd.rgb, &view.image, None)?;
            rgb_total += weight * l.value;
            let up_rgb = l.grad.map(|v| v * weight * w.rgb);
            let mut up_flow = None;
            if pair {
                let target = &targets.flows.expect("checked")[t];
                let fl = flow_loss(fwd.flow.as_ref().expect("flow requested"), &target.flow, &target.mask)?;
                // in units of the image width, so the weight does not depend on resolution
                let unit = 1.0 / view.camera.width as f64;
                flow_total += weight * unit * fl.loss.value;
                up_flow = Some(fl.loss.grad.map(|v| v * weight * unit * w.flow));
            }
            let up = RenderUpstream { rgb: Some(&up_rgb), flow: up_flow.as_ref(), ..Default::default() };
            let g = render_backward(&view.camera, &clouds[t], next, schedule.background, &fwd, &up)?;
            grads[t].add_scaled(&g.cloud, 1.0);
            if let Some(ng) = g.next {
                grads[t + 1].add_scaled(&ng, 1.0);
            }
        }

        if let Some(novel) = targets.novel {
            let weight = 1.0 / batch_total as f64;
            for _ in 0..novel_count {
                let t = fit_frames[rng.gen_range(0..fit_frames.len())];
                let az = rng.gen_range(-schedule.azimuth_range..=schedule.azimuth_range);
                let el = rng.gen_range(-schedule.elevation_range..=schedule.elevation_range);
                let view = novel.view(t + 1, az, el)?;
                let fwd = render_full(&view.camera, &clouds[t], None, schedule.background)?;
                let l = rgb_loss(&fwd.rgb, &view.image, None)?;
                rgb_total += weight * l.value;
                let up_rgb = l.grad.map(|v| v * weight * w.rgb);
                let up = RenderUpstream { rgb: Some(&up_rgb), ..Default::default() };
                let g = render_backward(&view.camera, &clouds[t], None, schedule.background, &fwd, &up)?;
                grads[t].add_scaled(&g.cloud, 1.0);
            }
        }

        let refs: Vec<&GaussianCloud> = clouds.iter().collect();
        let mut total = w.rgb * rgb_total + w.flow * flow_total;
        if w.scale > 0.0 {
            let s = scale_reg_loss(&refs)?;
            total += w.scale * s.value;
            terms.scale = Some(s.value);
            for (g, sg) in grads.iter_mut().zip(&s.grad) {
                for (a, b) in g.log_scale.iter_mut().zip(sg) {
                    *a += b * w.scale;
                }
            }
        }
        if w.rigid > 0.0 {
            let r = rigidity_loss(canonical, &refs, &graph)?;
            total += w.rigid * r.value;
            terms.rigid = Some(r.value);
            for (g, rg) in grads.iter_mut().zip(&r.grad) {
                for i in 0..g.len() {
                    g.mu[i] += rg.mu[i] * w.rigid;
                    for k in 0..4 {
                        g.rot[i][k] += rg.rot[i][k] * w.rigid;
                    }
                }
            }
        }
        terms.rgb = Some(rgb_total);
        if use_flow {
            terms.flow = Some(flow_total);
        }
        let mut fg = field_backward_all(&field, canonical, &caches, &grads)?;
        if schedule.time_smoothness > 0.0 {
            total += schedule.time_smoothness * field.time_smoothness(schedule.time_smoothness, &mut fg);
        }
        losses.push(total);
        log.record(STAGE_MOTION, it, terms, total)?;
        opt.step(&mut field, &fg, &schedule.lr);
    }
    Ok(MotionFit { field, losses })
}
