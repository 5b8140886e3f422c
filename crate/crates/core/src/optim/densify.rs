//! Clone-and-prune densification for the static lift.

use crate::geometry::GaussianCloud;
use crate::optim::adam::CloudOptimizer;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DensifyConfig {
    /// Mean screen-space gradient norm above which a Gaussian is cloned.
    pub grad_threshold: f64,
    /// Clone only below, prune above this activated max scale.
    pub max_scale: f64,
    pub min_opacity: f64,
    pub interval: usize,
    /// No densification at or after this iteration.
    pub until_iter: usize,
}

impl Default for DensifyConfig {
    fn default() -> Self {
        Self { grad_threshold: 0.5, max_scale: 0.05, min_opacity: 0.01, interval: 100, until_iter: 800 }
    }
}

impl DensifyConfig {
    pub fn fires_at(&self, iteration: usize) -> bool {
        self.interval > 0 && iteration > 0 && iteration % self.interval == 0 && iteration < self.until_iter
    }
}

/// Per-Gaussian accumulated screen-space gradient norms.
#[derive(Debug, Clone, PartialEq)]
pub struct DensifyStats {
    pub accum: Vec<f64>,
    pub count: Vec<u32>,
}

impl DensifyStats {
    pub fn new(n: usize) -> Self {
        Self { accum: vec![0.0; n], count: vec![0; n] }
    }

    /// Adds one view's gradients for the Gaussians visible in it.
    pub fn add(&mut self, index: usize, grad: [f64; 2]) {
        self.accum[index] += grad[0].hypot(grad[1]);
        self.count[index] += 1;
    }

    pub fn mean(&self, index: usize) -> f64 {
        if self.count[index] == 0 {
            0.0
        } else {
            self.accum[index] / self.count[index] as f64
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub pruned: usize,
}

/// Clones Gaussians with a large mean gradient and small max scale, then
/// prunes transparent or oversized ones. Clones get fresh ids and zeroed
/// optimizer moments.
pub fn densify_and_prune(
    cloud: &mut GaussianCloud,
    stats: &DensifyStats,
    cfg: &DensifyConfig,
    mut optimizer: Option<&mut CloudOptimizer>,
) -> DensifyReport {
    let n = cloud.len();
    let clones: Vec<usize> =
        (0..n).filter(|&i| stats.mean(i) > cfg.grad_threshold && cloud.gaussians[i].max_scale() < cfg.max_scale).collect();
    let mut next = cloud.next_id();
    for &i in &clones {
        let g = cloud.gaussians[i].clone();
        cloud.push(next, g);
        next += 1;
    }
    if let Some(opt) = optimizer.as_deref_mut() {
        opt.extend(clones.len());
    }
    let keep: Vec<bool> =
        cloud.gaussians.iter().map(|g| !(g.opacity() < cfg.min_opacity || g.max_scale() > cfg.max_scale)).collect();
    let pruned = keep.iter().filter(|k| !**k).count();
    if pruned > 0 {
        let mut k = keep.iter();
        let mut ids = cloud.ids.iter();
        let pairs: Vec<(u32, crate::geometry::Gaussian3D)> = cloud
            .gaussians
            .drain(..)
            .filter_map(|g| {
                let id = *ids.next().unwrap();
                k.next().unwrap().then_some((id, g))
            })
            .collect();
        cloud.ids = pairs.iter().map(|p| p.0).collect();
        cloud.gaussians = pairs.into_iter().map(|p| p.1).collect();
        if let Some(opt) = optimizer {
            opt.retain(&keep);
        }
    }
    DensifyReport { cloned: clones.len(), pruned }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Gaussian3D, Vec3};

    fn cloud(scales: &[f64], opacities: &[f64]) -> GaussianCloud {
        GaussianCloud::from_gaussians(
            0,
            scales
                .iter()
                .zip(opacities)
                .enumerate()
                .map(|(i, (s, o))| Gaussian3D::with_color(Vec3::new(i as f64, 0.0, 0.0), *s, *o, [0.5; 3], 0))
                .collect(),
        )
    }

    #[test]
    fn clones_only_high_gradient_small_gaussians() {
        let mut c = cloud(&[0.01, 0.01, 0.04], &[0.5, 0.5, 0.5]);
        let mut stats = DensifyStats::new(3);
        stats.add(0, [0.6, 0.0]);
        stats.add(1, [0.3, 0.3]);
        stats.add(2, [0.0, 0.9]);
        let mut opt = CloudOptimizer::new(&c, 0.0);
        let r = densify_and_prune(&mut c, &stats, &DensifyConfig::default(), Some(&mut opt));
        assert_eq!(r, DensifyReport { cloned: 2, pruned: 0 });
        assert_eq!(c.ids, vec![0, 1, 2, 3, 4]);
        assert_eq!(c.gaussians[3], c.gaussians[0]);
        assert_eq!(c.gaussians[4], c.gaussians[2]);
        assert_eq!(opt.len(), 5);
    }

    #[test]
    fn gradient_is_averaged_over_views() {
        let mut c = cloud(&[0.01], &[0.5]);
        let mut stats = DensifyStats::new(1);
        stats.add(0, [0.9, 0.0]);
        stats.add(0, [0.0, 0.0]);
        let r = densify_and_prune(&mut c, &stats, &DensifyConfig::default(), None);
        assert_eq!(r.cloned, 0);
    }

    #[test]
    fn large_gaussians_are_pruned_not_cloned() {
        let mut c = cloud(&[0.06, 0.01, 0.01], &[0.5, 0.005, 0.5]);
        let mut stats = DensifyStats::new(3);
        stats.add(0, [5.0, 0.0]);
        let mut opt = CloudOptimizer::new(&c, 0.0);
        let r = densify_and_prune(&mut c, &stats, &DensifyConfig::default(), Some(&mut opt));
        assert_eq!(r, DensifyReport { cloned: 0, pruned: 2 });
        assert_eq!(c.ids, vec![2]);
        assert_eq!(opt.len(), 1);
    }

    #[test]
    fn schedule_respects_interval_and_bound() {
        let cfg = DensifyConfig { until_iter: 300, ..Default::default() };
        let fired: Vec<usize> = (0..1000).filter(|&i| cfg.fires_at(i)).collect();
        assert_eq!(fired, vec![100, 200]);
    }
}
