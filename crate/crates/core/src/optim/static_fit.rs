//! Static lift: fits a Gaussian cloud to posed views by rendering loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{Gaussian3D, GaussianCloud};
use crate::image::{Image, Mask};
use crate::losses::rgb_loss;
use crate::optim::adam::{CloudOptimizer, ExpDecay, GaussianLr};
use crate::optim::densify::{densify_and_prune, DensifyConfig, DensifyStats};
use crate::optim::log::{LossTerms, ProgressLog};
use crate::optim::{sample_batch, View};
use crate::render::{project_cloud, render_backward, render_full, CloudGrads, RenderUpstream};

pub const STAGE_STATIC: &str = "static";

#[derive(Debug, Clone, PartialEq)]
pub struct StaticSchedule {
    pub iterations: usize,
    pub batch: usize,
    pub lr: GaussianLr,
    pub weight_decay: f64,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for StaticSchedule {
    fn default() -> Self {
        Self { iterations: 1000, batch: 16, lr: GaussianLr::default(), weight_decay: 0.0, background: [0.0; 3], seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct StaticFit {
    pub cloud: GaussianCloud,
    /// Batch loss before each update.
    pub losses: Vec<f64>,
    pub cloned: usize,
    pub pruned: usize,
}

/// Fits `init` to `views`. Densification and pruning run only when
/// `densify` is given.
pub fn fit_static(
    views: &[View],
    init: &GaussianCloud,
    schedule: &StaticSchedule,
    densify: Option<&DensifyConfig>,
    log: &mut ProgressLog,
) -> Result<StaticFit> {
    if views.is_empty() {
        return Err(Error::InvalidInput("static fit needs at least one view".into()));
    }
    if schedule.batch == 0 {
        return Err(Error::InvalidInput("batch size must be positive".into()));
    }
    let mut cloud = init.clone();
    let mut opt = CloudOptimizer::new(&cloud, schedule.weight_decay);
    let pos_lr = ExpDecay { start: schedule.lr.position_start, end: schedule.lr.position_end, steps: schedule.iterations };
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut stats = DensifyStats::new(cloud.len());
    let mut losses = Vec::with_capacity(schedule.iterations);
    let (mut cloned, mut pruned) = (0, 0);
    for it in 0..schedule.iterations {
        let batch = sample_batch(&mut rng, views.len(), schedule.batch);
        let mut grads = CloudGrads::zeros(&cloud);
        let mut total = 0.0;
        for &(vi, weight) in &batch {
            let v = &views[vi];
            let fwd = render_full(&v.camera, &cloud, None, schedule.background)?;
            let l = rgb_loss(&fwd.rgb, &v.image, None)?;
            total += weight * l.value;
            let up = RenderUpstream { rgb: Some(&l.grad), ..Default::default() };
            let g = render_backward(&v.camera, &cloud, None, schedule.background, &fwd, &up)?;
            grads.add_scaled(&g.cloud, weight);
            if densify.is_some() {
                // per-view summed squared error
                let to_sum = (v.image.data.len()) as f64;
                for s in project_cloud(&v.camera, &cloud) {
                    let m = g.cloud.mean2d[s.index];
                    stats.add(s.index, [m[0] * to_sum, m[1] * to_sum]);
                }
            }
        }
        losses.push(total);
        log.record(STAGE_STATIC, it, LossTerms { rgb: Some(total), ..Default::default() }, total)?;
        opt.step(&mut cloud, &grads, pos_lr.at(it), &schedule.lr);
        if let Some(cfg) = densify {
            if cfg.fires_at(it + 1) {
                let r = densify_and_prune(&mut cloud, &stats, cfg, Some(&mut opt));
                cloned += r.cloned;
                pruned += r.pruned;
                log::debug!("iteration {}: cloned {}, pruned {}, {} Gaussians", it + 1, r.cloned, r.pruned, cloud.len());
                stats = DensifyStats::new(cloud.len());
            }
        }
    }
    Ok(StaticFit { cloud, losses, cloned, pruned })
}

fn interior(mask: &Mask, x: usize, y: usize) -> bool {
    if x == 0 || y == 0 || x + 1 >= mask.width || y + 1 >= mask.height {
        return false;
    }
    mask.get(x, y) && mask.get(x - 1, y) && mask.get(x + 1, y) && mask.get(x, y - 1) && mask.get(x, y + 1)
}

/// Initial cloud from per-view depth maps: `count` interior foreground
/// pixels are unprojected and colored from their view. Scales are sized so
/// the samples tile the visible surface, capped at `max_scale`.
pub fn init_cloud_from_depth(
    views: &[View],
    depths: &[Image],
    masks: &[Mask],
    count: usize,
    max_scale: f64,
    sh_degree: usize,
    seed: u64,
) -> Result<GaussianCloud> {
    if views.is_empty() || depths.len() != views.len() || masks.len() != views.len() {
        return Err(Error::DimensionMismatch("views, depths and masks must have equal, non-zero length".into()));
    }
    let mut pool: Vec<(usize, usize, usize)> = Vec::new();
    let mut area = 0.0;
    for (vi, (v, m)) in views.iter().zip(masks).enumerate() {
        let before = pool.len();
        for y in 0..m.height {
            for x in 0..m.width {
                if interior(m, x, y) {
                    pool.push((vi, x, y));
                }
            }
        }
        let mut view_area = 0.0;
        for &(_, x, y) in &pool[before..] {
            let z = depths[vi].get(x, y, 0);
            view_area += z * z / (v.camera.fx * v.camera.fy);
        }
        area += view_area;
    }
    if pool.is_empty() {
        return Err(Error::InvalidInput("no foreground pixels to initialize from".into()));
    }
    // a closed surface is seen about four times over its projected area
    let surface = 4.0 * area / views.len() as f64;
    let sigma = (0.5 * (surface / count as f64).sqrt()).min(0.9 * max_scale);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cloud = GaussianCloud::new(sh_degree);
    for id in 0..count {
        let (vi, x, y) = pool[rng.gen_range(0..pool.len())];
        let v = &views[vi];
        let z = depths[vi].get(x, y, 0);
        let p = v.camera.unproject(x as f64 + 0.5, y as f64 + 0.5, z);
        let px = v.image.pixel(x, y);
        let rgb = [px[0].clamp(0.02, 0.98), px[1].clamp(0.02, 0.98), px[2].clamp(0.02, 0.98)];
        cloud.push(id as u32, Gaussian3D::with_color(p, sigma, 0.7, rgb, sh_degree));
    }
    Ok(cloud)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Gaussian3D, PinholeCamera, Vec3};
    use crate::metrics::psnr;
    use crate::render::render;

    #[test]
    fn single_gaussian_self_render_converges() {
        let cam = PinholeCamera::new(40.0, 40.0, 16.0, 16.0, 32, 32);
        let target_cloud =
            GaussianCloud::from_gaussians(0, vec![Gaussian3D::with_color(Vec3::new(0.05, -0.04, 2.0), 0.12, 0.9, [0.8, 0.3, 0.2], 0)]);
        let target = render(&cam, &target_cloud, [0.0; 3]).rgb;
        let init = GaussianCloud::from_gaussians(0, vec![Gaussian3D::with_color(Vec3::new(-0.03, 0.02, 2.0), 0.08, 0.5, [0.4, 0.4, 0.4], 0)]);
        let views = [View { camera: cam.clone(), image: target.clone() }];
        let schedule = StaticSchedule { batch: 1, ..Default::default() };
        let fit = fit_static(&views, &init, &schedule, None, &mut ProgressLog::in_memory()).unwrap();
        assert_eq!(fit.losses.len(), 1000);
        let score = psnr(&render(&cam, &fit.cloud, [0.0; 3]).rgb, &target).unwrap();
        assert!(score >= 40.0, "PSNR {score}");
    }

    #[test]
    fn rejects_empty_inputs() {
        let init = GaussianCloud::new(0);
        let mut log = ProgressLog::in_memory();
        assert!(fit_static(&[], &init, &StaticSchedule::default(), None, &mut log).is_err());
        assert!(init_cloud_from_depth(&[], &[], &[], 10, 0.05, 0, 0).is_err());
    }
}
