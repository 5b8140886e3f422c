//! Per-frame camera translation scale (and optional pose) from the
//! background rendering loss.

use crate::error::{Error, Result};
use crate::geometry::{rotation_from_axis_angle, GaussianCloud, PinholeCamera};
use crate::image::Image;
use crate::losses::background_loss;
use crate::motion::CameraTrack;
use crate::optim::adam::{AdamState, ExpDecay};
use crate::optim::log::{LossTerms, ProgressLog};

pub const STAGE_CAMERA: &str = "camera";

/// Translations shorter than this leave `β_t` without any effect.
pub const MIN_OBSERVABLE_TRANSLATION: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct CameraSchedule {
    pub iterations: usize,
    pub beta_lr_start: f64,
    pub beta_lr_end: f64,
    /// Also refine rotations and translations.
    pub refine_pose: bool,
    pub pose_lr: f64,
    pub background: [f64; 3],
}

impl Default for CameraSchedule {
    fn default() -> Self {
        Self { iterations: 150, beta_lr_start: 0.05, beta_lr_end: 5e-4, refine_pose: false, pose_lr: 1e-3, background: [0.0; 3] }
    }
}

#[derive(Debug, Clone)]
pub struct CameraFit {
    pub track: CameraTrack,
    pub losses: Vec<f64>,
    /// Per frame: `β_t` had no effect on the loss and was left at its
    /// initial value.
    pub scale_unobservable: Vec<bool>,
}

/// Minimizes the background loss over `β_2..β_T` (frame 1 is the
/// reference and stays fixed).
pub fn fit_camera(
    bg_frames: &[Image],
    bg_cloud: &GaussianCloud,
    base_cam: &PinholeCamera,
    init: &CameraTrack,
    schedule: &CameraSchedule,
    log: &mut ProgressLog,
) -> Result<CameraFit> {
    init.validate()?;
    let n = init.frames();
    if bg_frames.len() != n {
        return Err(Error::DimensionMismatch(format!("{} background frames, camera track has {n}", bg_frames.len())));
    }
    let mut track = init.clone();
    let unobservable: Vec<bool> =
        (0..n).map(|t| t > 0 && track.trans[t].norm() < MIN_OBSERVABLE_TRANSLATION && !schedule.refine_pose).collect();
    if unobservable.iter().any(|u| *u) {
        log::warn!("camera translation scale is unobservable for {} frame(s)", unobservable.iter().filter(|u| **u).count());
    }
    let lr = ExpDecay { start: schedule.beta_lr_start, end: schedule.beta_lr_end, steps: schedule.iterations };
    let mut beta_opt = AdamState::new(n);
    let mut rot_opt = AdamState::new(3 * n);
    let mut trans_opt = AdamState::new(3 * n);
    let mut losses = Vec::with_capacity(schedule.iterations);
    for it in 0..schedule.iterations {
        let l = background_loss(bg_cloud, bg_frames, &track, base_cam, schedule.background)?;
        losses.push(l.value);
        log.record(STAGE_CAMERA, it, LossTerms { background: Some(l.value), ..Default::default() }, l.value)?;
        let mut g_beta = l.grad.beta.clone();
        g_beta[0] = 0.0;
        for (t, u) in unobservable.iter().enumerate() {
            if *u {
                g_beta[t] = 0.0;
            }
        }
        beta_opt.update(&mut track.beta, &g_beta, lr.at(it));
        track.beta[0] = 1.0;
        for b in track.beta.iter_mut() {
            *b = b.max(1e-6);
        }
        if schedule.refine_pose {
            // steps in the tangent space at the current pose, frame 1 fixed
            let mut g_rot: Vec<f64> = l.grad.rot.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
            let mut g_trans: Vec<f64> = l.grad.trans.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
            g_rot[..3].fill(0.0);
            g_trans[..3].fill(0.0);
            let mut omega = vec![0.0; 3 * n];
            rot_opt.update(&mut omega, &g_rot, schedule.pose_lr);
            let mut trans: Vec<f64> = track.trans.iter().flat_map(|v| [v.x, v.y, v.z]).collect();
            trans_opt.update(&mut trans, &g_trans, schedule.pose_lr);
            for t in 1..n {
                let w = crate::geometry::Vec3::new(omega[3 * t], omega[3 * t + 1], omega[3 * t + 2]);
                track.rots[t] = rotation_from_axis_angle(&w) * track.rots[t];
                track.trans[t] = crate::geometry::Vec3::new(trans[3 * t], trans[3 * t + 1], trans[3 * t + 2]);
            }
        }
    }
    Ok(CameraFit { track, losses, scale_unobservable: unobservable })
}
