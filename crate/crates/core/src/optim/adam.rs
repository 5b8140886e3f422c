//! AdamW with per-group learning rates and the Gaussian parameter groups.

use crate::geometry::GaussianCloud;
use crate::render::CloudGrads;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

/// Moments for one flat parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
    pub weight_decay: f64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0, weight_decay: 0.0 }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// One AdamW update with bias correction and decoupled weight decay.
    pub fn update(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        assert_eq!(params.len(), self.m.len(), "parameter count changed without resizing the optimizer");
        assert_eq!(grads.len(), self.m.len());
        self.step += 1;
        let bc1 = 1.0 - BETA1.powi(self.step as i32);
        let bc2 = 1.0 - BETA2.powi(self.step as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = BETA1 * self.m[i] + (1.0 - BETA1) * g;
            self.v[i] = BETA2 * self.v[i] + (1.0 - BETA2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= lr * (mh / (vh.sqrt() + EPS) + self.weight_decay * params[i]);
        }
    }

    /// Keeps the moments of entries whose block (of `stride` values) is
    /// flagged in `keep`.
    pub fn retain_blocks(&mut self, keep: &[bool], stride: usize) {
        let filter = |v: &Vec<f64>| -> Vec<f64> {
            v.chunks(stride).zip(keep).filter(|(_, k)| **k).flat_map(|(c, _)| c.iter().copied()).collect()
        };
        self.m = filter(&self.m);
        self.v = filter(&self.v);
    }

    /// Appends zeroed moments for `blocks` new blocks.
    pub fn extend_zeros(&mut self, blocks: usize, stride: usize) {
        self.m.resize(self.m.len() + blocks * stride, 0.0);
        self.v.resize(self.v.len() + blocks * stride, 0.0);
    }
}

/// Exponential interpolation from `start` to `end` over `steps` iterations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpDecay {
    pub start: f64,
    pub end: f64,
    pub steps: usize,
}

impl ExpDecay {
    pub fn at(&self, it: usize) -> f64 {
        if self.steps <= 1 {
            return self.start;
        }
        let f = (it.min(self.steps - 1)) as f64 / (self.steps - 1) as f64;
        self.start * (self.end / self.start).powf(f)
    }
}

/// Learning rates of the Gaussian parameter groups.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianLr {
    pub position_start: f64,
    pub position_end: f64,
    pub sh: f64,
    pub opacity: f64,
    pub scale: f64,
    pub rotation: f64,
}

impl Default for GaussianLr {
    fn default() -> Self {
        Self { position_start: 1e-3, position_end: 2e-5, sh: 0.01, opacity: 0.05, scale: 5e-3, rotation: 5e-3 }
    }
}

const GROUPS: usize = 5;
const STRIDES: [usize; 4] = [3, 4, 3, 1];

/// AdamW over every parameter of a cloud, one group per attribute.
#[derive(Debug, Clone)]
pub struct CloudOptimizer {
    groups: [AdamState; GROUPS],
    sh_len: usize,
}

fn flat_vec3(v: &[crate::geometry::Vec3]) -> Vec<f64> {
    v.iter().flat_map(|x| [x.x, x.y, x.z]).collect()
}

impl CloudOptimizer {
    pub fn new(cloud: &GaussianCloud, weight_decay: f64) -> Self {
        let n = cloud.len();
        let sh_len = 3 * crate::sh::coeff_count(cloud.sh_degree);
        let mut groups = [
            AdamState::new(3 * n),
            AdamState::new(4 * n),
            AdamState::new(3 * n),
            AdamState::new(n),
            AdamState::new(sh_len * n),
        ];
        for g in &mut groups {
            g.weight_decay = weight_decay;
        }
        Self { groups, sh_len }
    }

    fn stride(&self, group: usize) -> usize {
        if group < 4 {
            STRIDES[group]
        } else {
            self.sh_len
        }
    }

    pub fn step(&mut self, cloud: &mut GaussianCloud, grads: &CloudGrads, position_lr: f64, lr: &GaussianLr) {
        let n = cloud.len();
        let mut mu = flat_vec3(&cloud.gaussians.iter().map(|g| g.mu).collect::<Vec<_>>());
        self.groups[0].update(&mut mu, &flat_vec3(&grads.mu), position_lr);
        let mut rot: Vec<f64> = cloud.gaussians.iter().flat_map(|g| g.rot.to_array()).collect();
        let grot: Vec<f64> = grads.rot.iter().flatten().copied().collect();
        self.groups[1].update(&mut rot, &grot, lr.rotation);
        let mut ls = flat_vec3(&cloud.gaussians.iter().map(|g| g.log_scale).collect::<Vec<_>>());
        self.groups[2].update(&mut ls, &flat_vec3(&grads.log_scale), lr.scale);
        let mut op: Vec<f64> = cloud.gaussians.iter().map(|g| g.opacity_logit).collect();
        self.groups[3].update(&mut op, &grads.opacity_logit, lr.opacity);
        let mut sh: Vec<f64> = cloud.gaussians.iter().flat_map(|g| g.sh.iter().copied()).collect();
        self.groups[4].update(&mut sh, &grads.sh, lr.sh);
        for i in 0..n {
            let g = &mut cloud.gaussians[i];
            g.mu = crate::geometry::Vec3::new(mu[3 * i], mu[3 * i + 1], mu[3 * i + 2]);
            g.rot = crate::geometry::Quat::from_array([rot[4 * i], rot[4 * i + 1], rot[4 * i + 2], rot[4 * i + 3]]);
            g.log_scale = crate::geometry::Vec3::new(ls[3 * i], ls[3 * i + 1], ls[3 * i + 2]);
            g.opacity_logit = op[i];
            g.sh.copy_from_slice(&sh[i * self.sh_len..(i + 1) * self.sh_len]);
        }
    }

    /// Drops the moments of pruned Gaussians.
    pub fn retain(&mut self, keep: &[bool]) {
        for k in 0..GROUPS {
            let s = self.stride(k);
            self.groups[k].retain_blocks(keep, s);
        }
    }

    /// Zero moments for `count` appended Gaussians.
    pub fn extend(&mut self, count: usize) {
        for k in 0..GROUPS {
            let s = self.stride(k);
            self.groups[k].extend_zeros(count, s);
        }
    }

    pub fn len(&self) -> usize {
        self.groups[3].len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
