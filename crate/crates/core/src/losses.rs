//! Training objectives and their gradients.

use crate::error::{Error, Result};
use crate::geometry::{quat_to_rotmat_backward, GaussianCloud, Mat3, PinholeCamera, Vec3};
use crate::image::{FlowField, Image, Mask};
use crate::motion::CameraTrack;
use crate::render::{render_backward, render_full, RenderUpstream};

pub const FLOW_TAU_ABS: f64 = 1.5;
pub const FLOW_TAU_REL: f64 = 0.05;
pub const RIGID_NEIGHBORS: usize = 8;

/// Scalar loss with its gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue<G> {
    pub value: f64,
    pub grad: G,
}

/// Relative weights of the motion-stage terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub rgb: f64,
    pub flow: f64,
    pub scale: f64,
    pub rigid: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { rgb: 1.0, flow: 0.5, scale: 0.1, rigid: 0.1 }
    }
}

fn check_mask(img: &Image, mask: &Mask) -> Result<()> {
    if img.width != mask.width || img.height != mask.height {
        return Err(Error::DimensionMismatch(format!(
            "image {}x{} vs mask {}x{}",
            img.width, img.height, mask.width, mask.height
        )));
    }
    Ok(())
}

/// Mean squared error over (masked) pixels and channels; gradient w.r.t.
/// `rendered`.
pub fn rgb_loss(rendered: &Image, target: &Image, mask: Option<&Mask>) -> Result<LossValue<Image>> {
    rendered.check_same_shape(target)?;
    if let Some(m) = mask {
        check_mask(rendered, m)?;
    }
    let ch = rendered.channels;
    let count = mask.map_or(rendered.pixels(), |m| m.count()) * ch;
    let mut grad = Image::new(rendered.width, rendered.height, ch);
    if count == 0 {
        return Ok(LossValue { value: 0.0, grad });
    }
    let inv = 1.0 / count as f64;
    let mut sum = 0.0;
    for p in 0..rendered.pixels() {
        if mask.is_some_and(|m| !m.data[p]) {
            continue;
        }
        for c in 0..ch {
            let i = p * ch + c;
            let d = rendered.data[i] - target.data[i];
            sum += d * d;
            grad.data[i] = 2.0 * d * inv;
        }
    }
    Ok(LossValue { value: sum * inv, grad })
}

/// Result of [`flow_loss`]; `empty` is set when no pixel was supervised.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowLoss {
    pub loss: LossValue<Image>,
    pub empty: bool,
}

/// Mean over pixels with `mask` set and a valid rendered flow of
/// `|Δu| + |Δv|`; gradient w.r.t. the rendered flow.
pub fn flow_loss(rendered: &FlowField, target: &Image, mask: &Mask) -> Result<FlowLoss> {
    rendered.flow.check_same_shape(target)?;
    check_mask(target, mask)?;
    let mut grad = Image::new(target.width, target.height, 2);
    let active: Vec<usize> = (0..target.pixels()).filter(|&p| mask.data[p] && rendered.valid.data[p]).collect();
    if active.is_empty() {
        return Ok(FlowLoss { loss: LossValue { value: 0.0, grad }, empty: true });
    }
    let inv = 1.0 / active.len() as f64;
    let mut sum = 0.0;
    for &p in &active {
        for c in 0..2 {
            let d = rendered.flow.data[2 * p + c] - target.data[2 * p + c];
            sum += d.abs();
            grad.data[2 * p + c] = if d > 0.0 {
                inv
            } else if d < 0.0 {
                -inv
            } else {
                0.0
            };
        }
    }
    Ok(FlowLoss { loss: LossValue { value: sum * inv, grad }, empty: false })
}

/// Forward-backward check: pixel `x` passes when
/// `‖fwd(x) + bwd(x + fwd(x))‖ < max(τ_abs, τ_rel·‖fwd(x)‖)`. Pixels whose
/// forward flow leaves the image fail.
pub fn flow_consistency_mask(fwd: &Image, bwd: &Image) -> Result<Mask> {
    fwd.check_same_shape(bwd)?;
    if fwd.channels != 2 {
        return Err(Error::DimensionMismatch("flow images need 2 channels".into()));
    }
    let (w, h) = (fwd.width, fwd.height);
    let mut mask = Mask::new(w, h, false);
    let mut b = [0.0; 2];
    for y in 0..h {
        for x in 0..w {
            let f = fwd.pixel(x, y);
            let (tx, ty) = (x as f64 + 0.5 + f[0], y as f64 + 0.5 + f[1]);
            if !(tx >= 0.0 && ty >= 0.0 && tx <= w as f64 && ty <= h as f64) {
                continue;
            }
            bwd.sample_bilinear(tx, ty, &mut b);
            let r = ((f[0] + b[0]).powi(2) + (f[1] + b[1]).powi(2)).sqrt();
            let fnorm = (f[0] * f[0] + f[1] * f[1]).sqrt();
            mask.data[y * w + x] = r < FLOW_TAU_ABS.max(FLOW_TAU_REL * fnorm);
        }
    }
    Ok(mask)
}

/// Mean over Gaussians of `(1/(T−1)) Σ_t ‖s_{t+1} − s_t‖₁` on activated
/// scales; gradient w.r.t. each frame's log-scales.
pub fn scale_reg_loss(clouds: &[&GaussianCloud]) -> Result<LossValue<Vec<Vec<Vec3>>>> {
    let frames = clouds.len();
    if frames < 2 {
        return Err(Error::InvalidInput(format!("scale regularization needs at least 2 frames, got {frames}")));
    }
    let n = clouds[0].len();
    if clouds.iter().any(|c| c.len() != n) {
        return Err(Error::DimensionMismatch("clouds differ in size".into()));
    }
    let mut grad = vec![vec![Vec3::zeros(); n]; frames];
    if n == 0 {
        return Ok(LossValue { value: 0.0, grad });
    }
    let norm = 1.0 / ((frames - 1) * n) as f64;
    let mut sum = 0.0;
    for t in 0..frames - 1 {
        for i in 0..n {
            let a = clouds[t].gaussians[i].scale();
            let b = clouds[t + 1].gaussians[i].scale();
            for k in 0..3 {
                let d = b[k] - a[k];
                sum += d.abs();
                let s = if d > 0.0 {
                    norm
                } else if d < 0.0 {
                    -norm
                } else {
                    0.0
                };
                grad[t + 1][i][k] += s * b[k];
                grad[t][i][k] -= s * a[k];
            }
        }
    }
    Ok(LossValue { value: sum * norm, grad })
}

/// k-nearest-neighbor edges of the canonical cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborGraph {
    pub edges: Vec<(usize, usize)>,
}

impl NeighborGraph {
    /// `k` nearest neighbors per Gaussian by centroid distance (ties by
    /// index); `k` shrinks when the cloud is too small.
    pub fn knn(cloud: &GaussianCloud, k: usize) -> Self {
        let n = cloud.len();
        let k = k.min(n.saturating_sub(1));
        let mut edges = Vec::with_capacity(n * k);
        let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
        for i in 0..n {
            cand.clear();
            let p = cloud.gaussians[i].mu;
            for j in 0..n {
                if j != i {
                    cand.push(((cloud.gaussians[j].mu - p).norm_squared(), j));
                }
            }
            cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            edges.extend(cand.iter().take(k).map(|&(_, j)| (i, j)));
        }
        Self { edges }
    }
}

/// Per-frame gradients of a prior w.r.t. positions and raw rotations.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGrads {
    pub mu: Vec<Vec3>,
    pub rot: Vec<[f64; 4]>,
}

/// Mean over edges and frames of
/// `‖(μ_i,t − μ_j,t) − R_i,t R_i,1ᵀ (μ_i,1 − μ_j,1)‖₂`, with frame 1 the
/// canonical cloud.
pub fn rigidity_loss(
    canonical: &GaussianCloud,
    deformed: &[&GaussianCloud],
    graph: &NeighborGraph,
) -> Result<LossValue<Vec<FrameGrads>>> {
    let n = canonical.len();
    if deformed.iter().any(|c| c.len() != n) {
        return Err(Error::DimensionMismatch("deformed cloud size differs from canonical".into()));
    }
    let mut grads: Vec<FrameGrads> =
        deformed.iter().map(|_| FrameGrads { mu: vec![Vec3::zeros(); n], rot: vec![[0.0; 4]; n] }).collect();
    let count = graph.edges.len() * deformed.len();
    if count == 0 {
        return Ok(LossValue { value: 0.0, grad: grads });
    }
    let inv = 1.0 / count as f64;
    let r1: Vec<Mat3> = canonical.gaussians.iter().map(|g| crate::geometry::quat_to_rotmat(g.rot)).collect::<Result<_>>()?;
    let mut sum = 0.0;
    for (f, cloud) in deformed.iter().enumerate() {
        let rt: Vec<Mat3> = cloud.gaussians.iter().map(|g| crate::geometry::quat_to_rotmat(g.rot)).collect::<Result<_>>()?;
        let mut d_rot = vec![Mat3::zeros(); n];
        for &(i, j) in &graph.edges {
            let base = r1[i].transpose() * (canonical.gaussians[i].mu - canonical.gaussians[j].mu);
            let r = (cloud.gaussians[i].mu - cloud.gaussians[j].mu) - rt[i] * base;
            let len = r.norm();
            sum += len;
            if len > 0.0 {
                let u = r * (inv / len);
                grads[f].mu[i] += u;
                grads[f].mu[j] -= u;
                d_rot[i] -= u * base.transpose();
            }
        }
        for i in 0..n {
            if d_rot[i] != Mat3::zeros() {
                grads[f].rot[i] = quat_to_rotmat_backward(cloud.gaussians[i].rot, &d_rot[i]);
            }
        }
    }
    Ok(LossValue { value: sum * inv, grad: grads })
}

/// Gradients of the background loss.
#[derive(Debug, Clone, PartialEq)]
pub struct BackgroundGrads {
    pub beta: Vec<f64>,
    /// Left-perturbation rotation and translation gradients per frame.
    pub rot: Vec<Vec3>,
    pub trans: Vec<Vec3>,
}

/// `(1/T) Σ_t MSE(I_t, render(G_bg, R_t, β_t T_t))` with gradients w.r.t.
/// `β_t` and the poses.
pub fn background_loss(
    bg_cloud: &GaussianCloud,
    frames: &[Image],
    camera: &CameraTrack,
    base_cam: &PinholeCamera,
    background: [f64; 3],
) -> Result<LossValue<BackgroundGrads>> {
    let t_count = camera.frames();
    if frames.len() != t_count {
        return Err(Error::DimensionMismatch(format!("{} frames, camera track has {}", frames.len(), t_count)));
    }
    let mut grad = BackgroundGrads { beta: vec![0.0; t_count], rot: vec![Vec3::zeros(); t_count], trans: vec![Vec3::zeros(); t_count] };
    let mut total = 0.0;
    for t in 0..t_count {
        let cam = camera.camera(base_cam, t + 1)?;
        let fwd = render_full(&cam, bg_cloud, None, background)?;
        let l = rgb_loss(&fwd.rgb, &frames[t], None)?;
        total += l.value / t_count as f64;
        let up = l.grad.map(|v| v / t_count as f64);
        let g = render_backward(&cam, bg_cloud, None, background, &fwd, &RenderUpstream { rgb: Some(&up), ..Default::default() })?;
        grad.trans[t] = g.camera.trans * camera.beta[t];
        grad.beta[t] = g.camera.trans.dot(&camera.trans[t]);
        grad.rot[t] = g.camera.rot;
    }
    Ok(LossValue { value: total, grad })
}

/// Median and `q90 − q10` of the reference-object depths.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DepthNormalization {
    pub t_d: f64,
    pub sigma_d: f64,
}

/// Quantile by linear interpolation between order statistics, with the
/// weights it puts on the sorted entries `(lo, 1−f), (lo+1, f)`.
fn quantile_sorted(sorted: &[f64], q: f64) -> (f64, usize, f64) {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = (pos.floor() as usize).min(sorted.len() - 1);
    let hi = (lo + 1).min(sorted.len() - 1);
    let f = pos - lo as f64;
    (sorted[lo] + f * (sorted[hi] - sorted[lo]), lo, f)
}

pub fn quantile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidInput("quantile of an empty set".into()));
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Ok(quantile_sorted(&v, q).0)
}

struct StatsWithGrad {
    stats: DepthNormalization,
    /// `(pixel, ∂t_d/∂d_p)` and `(pixel, ∂σ_d/∂d_p)` sparse partials.
    d_median: Vec<(usize, f64)>,
    d_sigma: Vec<(usize, f64)>,
}

fn stats_with_grad(depth: &Image, mask: &Mask) -> Result<StatsWithGrad> {
    check_mask(depth, mask)?;
    let mut idx: Vec<usize> = (0..depth.pixels()).filter(|&p| mask.data[p]).collect();
    if idx.is_empty() {
        return Err(Error::InvalidInput("empty reference mask".into()));
    }
    idx.sort_by(|&a, &b| depth.data[a].total_cmp(&depth.data[b]).then(a.cmp(&b)));
    let sorted: Vec<f64> = idx.iter().map(|&p| depth.data[p]).collect();
    let (med, ml, mf) = quantile_sorted(&sorted, 0.5);
    let (q90, hl, hf) = quantile_sorted(&sorted, 0.9);
    let (q10, ll, lf) = quantile_sorted(&sorted, 0.1);
    let sigma = q90 - q10;
    if !(sigma > 0.0) {
        return Err(Error::DegenerateReferenceDepth);
    }
    let last = idx.len() - 1;
    let pair = |lo: usize, f: f64, s: f64| [(idx[lo], s * (1.0 - f)), (idx[(lo + 1).min(last)], s * f)];
    let d_median = pair(ml, mf, 1.0).to_vec();
    let mut d_sigma = pair(hl, hf, 1.0).to_vec();
    d_sigma.extend(pair(ll, lf, -1.0));
    Ok(StatsWithGrad { stats: DepthNormalization { t_d: med, sigma_d: sigma }, d_median, d_sigma })
}

/// Normalization statistics of `depth` over `ref_mask`.
pub fn depth_stats(depth: &Image, ref_mask: &Mask) -> Result<DepthNormalization> {
    Ok(stats_with_grad(depth, ref_mask)?.stats)
}

/// `(d − t_d) / σ_d` elementwise.
pub fn depth_normalize(depth: &Image, stats: &DepthNormalization) -> Result<Image> {
    if !(stats.sigma_d > 0.0) {
        return Err(Error::DegenerateReferenceDepth);
    }
    Ok(depth.map(|d| (d - stats.t_d) / stats.sigma_d))
}

/// Affine-invariant L1 between the rendered and predicted depth maps, each
/// normalized by its own reference-object statistics, averaged over
/// `union_mask`. Gradient w.r.t. the rendered depth.
pub fn depth_align_loss(
    rendered: &Image,
    predicted: &Image,
    ref_mask: &Mask,
    union_mask: &Mask,
) -> Result<LossValue<Image>> {
    rendered.check_same_shape(predicted)?;
    check_mask(rendered, union_mask)?;
    let rs = stats_with_grad(rendered, ref_mask)?;
    let ps = stats_with_grad(predicted, ref_mask)?;
    let rn = depth_normalize(rendered, &rs.stats)?;
    let pn = depth_normalize(predicted, &ps.stats)?;
    let mut grad = Image::new(rendered.width, rendered.height, 1);
    let count = union_mask.count();
    if count == 0 {
        return Ok(LossValue { value: 0.0, grad });
    }
    let inv = 1.0 / count as f64;
    let sigma = rs.stats.sigma_d;
    let mut sum = 0.0;
    let mut sum_a = 0.0;
    let mut sum_ad = 0.0;
    for p in 0..rendered.pixels() {
        if !union_mask.data[p] {
            continue;
        }
        let d = rn.data[p] - pn.data[p];
        sum += d.abs();
        let a = if d > 0.0 {
            inv
        } else if d < 0.0 {
            -inv
        } else {
            0.0
        };
        grad.data[p] += a / sigma;
        sum_a += a;
        sum_ad += a * rn.data[p];
    }
    for &(p, w) in &rs.d_median {
        grad.data[p] -= sum_a / sigma * w;
    }
    for &(p, w) in &rs.d_sigma {
        grad.data[p] -= sum_ad / sigma * w;
    }
    Ok(LossValue { value: sum * inv, grad })
}
