//! Full-frame refinement of the object-to-world translation and the joint
//! fine-tune of deformation and translation.

use crate::error::{Error, Result};
use crate::geometry::{GaussianCloud, Vec3};
use crate::losses::rgb_loss;
use crate::motion::{object_to_world, object_to_world_backward, ObjectMotion, WorldWarp};
use crate::optim::adam::AdamState;
use crate::optim::log::{LossTerms, ProgressLog};
use crate::optim::motion_fit::{deform_all, field_backward_all, FieldLr, FieldOptimizer};
use crate::optim::View;
use crate::render::{render_backward, render_full, CloudGrads, RenderUpstream};

pub const STAGE_WARP: &str = "warp";
pub const STAGE_JOINT: &str = "joint";

#[derive(Debug, Clone, PartialEq)]
pub struct WarpSchedule {
    pub iterations: usize,
    /// Translation learning rate (a tenth of the position rate).
    pub lr: f64,
    pub background: [f64; 3],
    /// Keep `Δz` at its initial value (refine `Δx, Δy` only).
    pub freeze_depth: bool,
}

impl Default for WarpSchedule {
    fn default() -> Self {
        Self { iterations: 200, lr: 1e-4, background: [0.0; 3], freeze_depth: false }
    }
}

#[derive(Debug, Clone)]
pub struct WarpFit {
    pub warps: Vec<WorldWarp>,
    pub losses: Vec<f64>,
}

struct FrameLoss {
    value: f64,
    d_delta: Vec3,
    d_obj: CloudGrads,
}

/// Mean full-frame loss of one frame (scaled by `weight`) with gradients
/// w.r.t. the translation and the object-centric cloud.
fn frame_loss(oc: &GaussianCloud, warp: &WorldWarp, anchor: &Vec3, view: &View, bg: [f64; 3], weight: f64) -> Result<FrameLoss> {
    let world = object_to_world(oc, warp, anchor)?;
    let fwd = render_full(&view.camera, &world, None, bg)?;
    let l = rgb_loss(&fwd.rgb, &view.image, None)?;
    let up_rgb = l.grad.map(|v| v * weight);
    let up = RenderUpstream { rgb: Some(&up_rgb), ..Default::default() };
    let g = render_backward(&view.camera, &world, None, bg, &fwd, &up)?;
    let (d_obj, d_delta, _) = object_to_world_backward(oc, warp, anchor, &g.cloud);
    Ok(FrameLoss { value: weight * l.value, d_delta, d_obj })
}

fn check_frames(n: usize, warps: usize, views: usize) -> Result<()> {
    if n == 0 || warps != n || views != n {
        return Err(Error::DimensionMismatch(format!("{n} clouds, {warps} warps, {views} views")));
    }
    Ok(())
}

/// Refines every `Δ_t` against full frames with the scales frozen.
/// `oc_clouds[t]` is the object-centric cloud of frame `t + 1`.
pub fn fit_world_warp(
    oc_clouds: &[GaussianCloud],
    warps: &[WorldWarp],
    anchor: &Vec3,
    frames: &[View],
    schedule: &WarpSchedule,
    log: &mut ProgressLog,
) -> Result<WarpFit> {
    let n = oc_clouds.len();
    check_frames(n, warps.len(), frames.len())?;
    let mut warps = warps.to_vec();
    let mut opt = AdamState::new(3 * n);
    let mut losses = Vec::with_capacity(schedule.iterations);
    let weight = 1.0 / n as f64;
    for it in 0..schedule.iterations {
        let mut total = 0.0;
        let mut grad = vec![0.0; 3 * n];
        for t in 0..n {
            let fl = frame_loss(&oc_clouds[t], &warps[t], anchor, &frames[t], schedule.background, weight)?;
            total += fl.value;
            grad[3 * t..3 * t + 3].copy_from_slice(fl.d_delta.as_slice());
            if schedule.freeze_depth {
                grad[3 * t + 2] = 0.0;
            }
        }
        losses.push(total);
        log.record(STAGE_WARP, it, LossTerms { rgb: Some(total), ..Default::default() }, total)?;
        let mut params: Vec<f64> = warps.iter().flat_map(|w| [w.delta.x, w.delta.y, w.delta.z]).collect();
        opt.update(&mut params, &grad, schedule.lr);
        for (t, w) in warps.iter_mut().enumerate() {
            w.delta = Vec3::new(params[3 * t], params[3 * t + 1], params[3 * t + 2]);
        }
    }
    Ok(WarpFit { warps, losses })
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointSchedule {
    pub steps: usize,
    /// Multiplier applied to the base rates below.
    pub lr_scale: f64,
    pub field_lr: FieldLr,
    pub delta_lr: f64,
    pub background: [f64; 3],
}

impl Default for JointSchedule {
    fn default() -> Self {
        Self { steps: 100, lr_scale: 0.1, field_lr: FieldLr::default(), delta_lr: 1e-3, background: [0.0; 3] }
    }
}

#[derive(Debug, Clone)]
pub struct JointFit {
    pub motion: ObjectMotion,
    /// Full-frame loss of every visited iterate, including the initial and
    /// the final one.
    pub losses: Vec<f64>,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub best_step: usize,
}

/// Fine-tunes the deformation field and every `Δ_t` together on full
/// frames. Returns the best visited iterate, so the returned loss never
/// exceeds the initial one.
pub fn joint_finetune(
    canonical: &GaussianCloud,
    motion: &ObjectMotion,
    frames: &[View],
    schedule: &JointSchedule,
    log: &mut ProgressLog,
) -> Result<JointFit> {
    let n = motion.frames();
    check_frames(n, motion.warps.len(), frames.len())?;
    let lr = schedule.field_lr.scaled(schedule.lr_scale);
    let delta_lr = schedule.delta_lr * schedule.lr_scale;
    let mut current = motion.clone();
    let mut field_opt = FieldOptimizer::new(&current.field, 0.0);
    let mut delta_opt = AdamState::new(3 * n);
    let weight = 1.0 / n as f64;
    let mut losses = Vec::with_capacity(schedule.steps + 1);
    let mut best = (f64::INFINITY, 0, current.clone());
    for step in 0..=schedule.steps {
        let (clouds, caches) = deform_all(&current.field, canonical)?;
        let mut total = 0.0;
        let mut d_obj = Vec::with_capacity(n);
        let mut d_delta = vec![0.0; 3 * n];
        for t in 0..n {
            let fl = frame_loss(&clouds[t], &current.warps[t], &current.anchor, &frames[t], schedule.background, weight)?;
            total += fl.value;
            d_delta[3 * t..3 * t + 3].copy_from_slice(fl.d_delta.as_slice());
            d_obj.push(fl.d_obj);
        }
        losses.push(total);
        log.record(STAGE_JOINT, step, LossTerms { rgb: Some(total), ..Default::default() }, total)?;
        if total < best.0 {
            best = (total, step, current.clone());
        }
        if step == schedule.steps {
            break;
        }
        let fg = field_backward_all(&current.field, canonical, &caches, &d_obj)?;
        field_opt.step(&mut current.field, &fg, &lr);
        let mut params: Vec<f64> = current.warps.iter().flat_map(|w| [w.delta.x, w.delta.y, w.delta.z]).collect();
        delta_opt.update(&mut params, &d_delta, delta_lr);
        for (t, w) in current.warps.iter_mut().enumerate() {
            w.delta = Vec3::new(params[3 * t], params[3 * t + 1], params[3 * t + 2]);
        }
    }
    let (best_loss, best_step, motion) = best;
    Ok(JointFit { motion, initial_loss: losses[0], losses, best_loss, best_step })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{DeformationField, FieldConfig};
    use crate::geometry::PinholeCamera;
    use crate::synth::{object_cloud, presets, MotionProgram, ObjectSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const EXTENT: f64 = 0.5;

    fn object() -> GaussianCloud {
        let spec = ObjectSpec {
            count: 150,
            center: [0.0, 0.0, 2.0],
            radii: [0.25; 3],
            gaussian_scale: 0.03,
            opacity: 0.95,
            color: presets::smooth_color(),
            motion: MotionProgram::Static,
        };
        object_cloud(&spec, &mut ChaCha8Rng::seed_from_u64(1))
    }

    fn camera() -> PinholeCamera {
        PinholeCamera::new(70.0, 70.0, 32.0, 32.0, 64, 64)
    }

    fn true_warps() -> Vec<WorldWarp> {
        [[0.0, 0.0, 0.0], [0.06, -0.02, 0.08], [0.1, 0.03, 0.15]]
            .iter()
            .zip([1.0, 1.05, 0.95])
            .map(|(d, s)| WorldWarp::new(Vec3::from(*d), s).unwrap())
            .collect()
    }

    /// Views rendered from `oc` placed by the true warps: those warps are
    /// exactly optimal.
    fn scene() -> (Vec<GaussianCloud>, Vec3, Vec<View>) {
        let c = object();
        let anchor = c.centroid();
        let oc = vec![c.clone(), c.clone(), c];
        let cam = camera();
        let views = oc
            .iter()
            .zip(true_warps())
            .map(|(o, w)| View { camera: cam.clone(), image: crate::render::render(&cam, &object_to_world(o, &w, &anchor).unwrap(), [0.0; 3]).rgb })
            .collect();
        (oc, anchor, views)
    }

    fn max_delta_error(warps: &[WorldWarp]) -> f64 {
        warps.iter().zip(true_warps()).map(|(a, b)| (a.delta - b.delta).norm()).fold(0.0, f64::max)
    }

    #[test]
    fn exact_translation_is_a_fixed_point() {
        let (oc, anchor, views) = scene();
        let fit = fit_world_warp(&oc, &true_warps(), &anchor, &views, &WarpSchedule::default(), &mut ProgressLog::in_memory()).unwrap();
        assert!(max_delta_error(&fit.warps) < 1e-3, "{}", max_delta_error(&fit.warps));
        assert!(fit.losses[0] < 1e-12);
    }

    #[test]
    fn recovers_five_percent_perturbation() {
        let (oc, anchor, views) = scene();
        let dirs = [Vec3::new(1.0, -1.0, 1.0), Vec3::new(-1.0, 1.0, 0.5), Vec3::new(0.5, 1.0, -1.0)];
        let init: Vec<WorldWarp> = true_warps()
            .iter()
            .zip(dirs)
            .map(|(w, d)| WorldWarp { delta: w.delta + d.normalize() * 0.05 * EXTENT, ..*w })
            .collect();
        let schedule = WarpSchedule { iterations: 400, lr: 1e-3, ..Default::default() };
        let fit = fit_world_warp(&oc, &init, &anchor, &views, &schedule, &mut ProgressLog::in_memory()).unwrap();
        let err = max_delta_error(&fit.warps);
        assert!(err < 0.01 * EXTENT, "residual {err}");
    }

    #[test]
    fn depth_translation_is_observable() {
        let (oc, anchor, views) = scene();
        let init: Vec<WorldWarp> = true_warps().iter().map(|w| WorldWarp { delta: Vec3::new(w.delta.x, w.delta.y, 0.0), ..*w }).collect();
        let free = WarpSchedule { iterations: 300, lr: 1e-3, ..Default::default() };
        let frozen = WarpSchedule { freeze_depth: true, ..free.clone() };
        let mut log = ProgressLog::in_memory();
        let a = fit_world_warp(&oc, &init, &anchor, &views, &free, &mut log).unwrap();
        let b = fit_world_warp(&oc, &init, &anchor, &views, &frozen, &mut log).unwrap();
        assert!(b.warps.iter().all(|w| w.delta.z == 0.0));
        let (la, lb) = (*a.losses.last().unwrap(), *b.losses.last().unwrap());
        assert!(la < 0.5 * lb, "free {la} vs frozen {lb}");
    }

    fn motion(anchor: Vec3, warps: Vec<WorldWarp>) -> ObjectMotion {
        let config = FieldConfig { spatial_res: 8, temporal_res: 3, features: 4, hidden: 8 };
        ObjectMotion::new(DeformationField::new(&object(), 3, config, 2).unwrap(), warps, anchor).unwrap()
    }

    #[test]
    fn joint_finetune_keeps_an_optimal_fit() {
        let (_, anchor, views) = scene();
        let fit = joint_finetune(&object(), &motion(anchor, true_warps()), &views, &JointSchedule { steps: 20, ..Default::default() }, &mut ProgressLog::in_memory()).unwrap();
        assert!((fit.best_loss - fit.initial_loss).abs() < 1e-6);
        assert!(fit.losses.iter().all(|l| (l - fit.initial_loss).abs() < 1e-6));
    }

    #[test]
    fn joint_finetune_returns_the_best_iterate() {
        let (_, anchor, views) = scene();
        let shifted: Vec<WorldWarp> =
            true_warps().iter().map(|w| WorldWarp { delta: w.delta + Vec3::new(0.01, -0.01, 0.02), ..*w }).collect();
        let schedule = JointSchedule { steps: 30, lr_scale: 1.0, ..Default::default() };
        let canonical = object();
        let mut log = ProgressLog::in_memory();
        let fit = joint_finetune(&canonical, &motion(anchor, shifted), &views, &schedule, &mut log).unwrap();
        let min = fit.losses.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(fit.best_loss, min);
        assert_eq!(fit.losses[fit.best_step], min);
        assert!(fit.best_loss < fit.initial_loss);
        let again = joint_finetune(&canonical, &fit.motion, &views, &JointSchedule { steps: 0, ..schedule }, &mut log).unwrap();
        assert_eq!(again.initial_loss, fit.best_loss);
    }
}
