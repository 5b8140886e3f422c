//! Differentiable splat renderer: RGB, expected depth, alpha and optical
//! flow images with exact reverse-mode gradients.

pub mod project;
pub mod raster;

use rayon::prelude::*;

pub use project::{
    project_gaussian, project_gaussian_backward, project_mean, CameraGrad, GaussianGrad, SplatGrad,
    SplatProjection, LOW_PASS,
};
pub use raster::{contributor_signature, rasterize, rasterize_backward, sort_splats, RasterOutput, TILE_SIZE};

use crate::error::{Error, Result};
use crate::geometry::{GaussianCloud, PinholeCamera, Vec3};
use crate::image::{FlowField, Image, Mask};

/// Pixels whose alpha falls below this carry an invalid flow flag.
pub const FLOW_MIN_ALPHA: f64 = 0.5;

const CH_DEPTH: usize = 3;
const CH_FLOW: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub rgb: Image,
    pub depth: Image,
    pub alpha: Image,
    pub flow: Option<FlowField>,
}

/// Projects every Gaussian and returns the visible splats in compositing
/// order.
pub fn project_cloud(cam: &PinholeCamera, cloud: &GaussianCloud) -> Vec<SplatProjection> {
    let mut splats: Vec<SplatProjection> = cloud
        .gaussians
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| project_gaussian(cam, g, cloud.sh_degree, i, cloud.ids[i]))
        .collect();
    sort_splats(&mut splats);
    splats
}

fn displacements(cam: &PinholeCamera, splats: &[SplatProjection], next: &GaussianCloud) -> Vec<[f64; 2]> {
    splats
        .iter()
        .map(|s| match project_mean(cam, &next.gaussians[s.index].mu) {
            Some(m) => [m[0] - s.mean2d[0], m[1] - s.mean2d[1]],
            None => [0.0, 0.0],
        })
        .collect()
}

fn splat_values(splats: &[SplatProjection], disp: Option<&[[f64; 2]]>) -> (Vec<f64>, usize) {
    let nch = if disp.is_some() { 6 } else { 4 };
    let mut values = Vec::with_capacity(splats.len() * nch);
    for (i, s) in splats.iter().enumerate() {
        values.extend_from_slice(&s.color);
        values.push(s.depth);
        if let Some(d) = disp {
            values.extend_from_slice(&d[i]);
        }
    }
    (values, nch)
}

/// Renders `cloud` over a constant background color. Uncovered pixels get
/// the background color and depth `cam.far`.
pub fn render(cam: &PinholeCamera, cloud: &GaussianCloud, background: [f64; 3]) -> RenderOutput {
    render_full(cam, cloud, None, background).expect("render without a paired cloud cannot fail")
}

/// Renders the flow from `cloud_t` to `cloud_t1` (same ids): per-Gaussian
/// screen displacement composited with frame-t weights, normalized by alpha.
pub fn render_flow(cam: &PinholeCamera, cloud_t: &GaussianCloud, cloud_t1: &GaussianCloud) -> Result<FlowField> {
    Ok(render_full(cam, cloud_t, Some(cloud_t1), [0.0; 3])?.flow.expect("flow requested"))
}

/// Single compositing pass producing RGB, depth, alpha and, when `next` is
/// given, the flow toward it.
pub fn render_full(
    cam: &PinholeCamera,
    cloud: &GaussianCloud,
    next: Option<&GaussianCloud>,
    background: [f64; 3],
) -> Result<RenderOutput> {
    if let Some(n) = next {
        cloud.check_compatible(n)?;
    }
    let splats = project_cloud(cam, cloud);
    let disp = next.map(|n| displacements(cam, &splats, n));
    let (values, nch) = splat_values(&splats, disp.as_deref());
    let mut bg = vec![background[0], background[1], background[2], cam.far];
    if next.is_some() {
        bg.extend_from_slice(&[0.0, 0.0]);
    }
    let raster = rasterize(cam.width, cam.height, &splats, &values, nch, &bg);
    Ok(split_output(raster, nch, next.is_some()))
}

fn split_output(raster: RasterOutput, nch: usize, with_flow: bool) -> RenderOutput {
    let (w, h) = (raster.values.width, raster.values.height);
    let mut rgb = Image::new(w, h, 3);
    let mut depth = Image::new(w, h, 1);
    let mut flow = with_flow.then(|| FlowField { flow: Image::new(w, h, 2), valid: Mask::new(w, h, false) });
    for p in 0..w * h {
        let v = &raster.values.data[p * nch..p * nch + nch];
        rgb.data[p * 3..p * 3 + 3].copy_from_slice(&v[..3]);
        depth.data[p] = v[CH_DEPTH];
        if let Some(f) = flow.as_mut() {
            let a = raster.alpha.data[p];
            if a >= FLOW_MIN_ALPHA {
                f.flow.data[2 * p] = v[CH_FLOW] / a;
                f.flow.data[2 * p + 1] = v[CH_FLOW + 1] / a;
                f.valid.data[p] = true;
            }
        }
    }
    RenderOutput { rgb, depth, alpha: raster.alpha, flow }
}

/// Upstream per-pixel gradients. `flow` is w.r.t. the normalized flow and
/// is ignored at invalid pixels.
#[derive(Debug, Clone, Copy, Default)]
pub struct RenderUpstream<'a> {
    pub rgb: Option<&'a Image>,
    pub depth: Option<&'a Image>,
    pub alpha: Option<&'a Image>,
    pub flow: Option<&'a Image>,
}

/// Per-Gaussian parameter gradients for a whole cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct CloudGrads {
    pub mu: Vec<Vec3>,
    pub rot: Vec<[f64; 4]>,
    pub log_scale: Vec<Vec3>,
    pub opacity_logit: Vec<f64>,
    /// Flattened like the Gaussians' `sh` arrays, `sh_len` per Gaussian.
    pub sh: Vec<f64>,
    pub sh_len: usize,
    /// Screen-space positional gradient (densification statistic).
    pub mean2d: Vec<[f64; 2]>,
}

impl CloudGrads {
    pub fn zeros(cloud: &GaussianCloud) -> Self {
        let n = cloud.len();
        let sh_len = 3 * crate::sh::coeff_count(cloud.sh_degree);
        Self {
            mu: vec![Vec3::zeros(); n],
            rot: vec![[0.0; 4]; n],
            log_scale: vec![Vec3::zeros(); n],
            opacity_logit: vec![0.0; n],
            sh: vec![0.0; n * sh_len],
            sh_len,
            mean2d: vec![[0.0; 2]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.mu.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mu.is_empty()
    }

    pub fn add_gaussian(&mut self, i: usize, g: &GaussianGrad) {
        self.mu[i] += g.mu;
        for k in 0..4 {
            self.rot[i][k] += g.rot[k];
        }
        self.log_scale[i] += g.log_scale;
        self.opacity_logit[i] += g.opacity_logit;
        for (a, b) in self.sh[i * self.sh_len..(i + 1) * self.sh_len].iter_mut().zip(&g.sh) {
            *a += b;
        }
    }

    pub fn add_scaled(&mut self, o: &CloudGrads, s: f64) {
        for i in 0..self.len() {
            self.mu[i] += o.mu[i] * s;
            for k in 0..4 {
                self.rot[i][k] += o.rot[i][k] * s;
            }
            self.log_scale[i] += o.log_scale[i] * s;
            self.opacity_logit[i] += o.opacity_logit[i] * s;
            self.mean2d[i][0] += o.mean2d[i][0] * s;
            self.mean2d[i][1] += o.mean2d[i][1] * s;
        }
        for (a, b) in self.sh.iter_mut().zip(&o.sh) {
            *a += b * s;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.mu.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.rot.iter().flatten().all(|x| x.is_finite())
            && self.log_scale.iter().all(|v| v.iter().all(|x| x.is_finite()))
            && self.opacity_logit.iter().all(|x| x.is_finite())
            && self.sh.iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderGradients {
    pub cloud: CloudGrads,
    /// Gradients w.r.t. the paired next-frame cloud (flow only).
    pub next: Option<CloudGrads>,
    pub camera: CameraGrad,
}

/// Exact gradients of `Σ_pixels upstream · output` w.r.t. every Gaussian
/// parameter and the camera pose. `forward` must be the matching
/// [`render_full`] output.
pub fn render_backward(
    cam: &PinholeCamera,
    cloud: &GaussianCloud,
    next: Option<&GaussianCloud>,
    background: [f64; 3],
    forward: &RenderOutput,
    upstream: &RenderUpstream,
) -> Result<RenderGradients> {
    if let Some(n) = next {
        cloud.check_compatible(n)?;
    }
    if upstream.flow.is_some() && (next.is_none() || forward.flow.is_none()) {
        return Err(Error::InvalidInput("flow gradient requires a paired next cloud".into()));
    }
    let (w, h) = (cam.width, cam.height);
    let splats = project_cloud(cam, cloud);
    let disp = next.map(|n| displacements(cam, &splats, n));
    let (values, nch) = splat_values(&splats, disp.as_deref());
    let mut bg = vec![background[0], background[1], background[2], cam.far];
    if next.is_some() {
        bg.extend_from_slice(&[0.0, 0.0]);
    }

    let mut d_values = Image::new(w, h, nch);
    let mut d_alpha = upstream.alpha.cloned().unwrap_or_else(|| Image::new(w, h, 1));
    for p in 0..w * h {
        if let Some(rgb) = upstream.rgb {
            d_values.data[p * nch..p * nch + 3].copy_from_slice(&rgb.data[p * 3..p * 3 + 3]);
        }
        if let Some(d) = upstream.depth {
            d_values.data[p * nch + CH_DEPTH] = d.data[p];
        }
        if let (Some(df), Some(f)) = (upstream.flow, forward.flow.as_ref()) {
            if f.valid.data[p] {
                let a = forward.alpha.data[p];
                let (gx, gy) = (df.data[2 * p], df.data[2 * p + 1]);
                d_values.data[p * nch + CH_FLOW] = gx / a;
                d_values.data[p * nch + CH_FLOW + 1] = gy / a;
                d_alpha.data[p] -= (gx * f.flow.data[2 * p] + gy * f.flow.data[2 * p + 1]) / a;
            }
        }
    }

    let raster = rasterize_backward(w, h, &splats, &values, nch, &bg, &d_values, Some(&d_alpha));

    let per_splat: Vec<(usize, GaussianGrad, CameraGrad, Option<([f64; 2], GaussianGrad, CameraGrad)>)> = splats
        .par_iter()
        .zip(raster.par_iter())
        .map(|(s, rg)| {
            let g = &cloud.gaussians[s.index];
            let mut sg = SplatGrad {
                mean2d: rg.mean2d,
                conic: rg.conic,
                depth: rg.values[CH_DEPTH],
                alpha: rg.alpha,
                color: [rg.values[0], rg.values[1], rg.values[2]],
            };
            let mut next_part = None;
            if let Some(n) = next {
                let dflow = [rg.values[CH_FLOW], rg.values[CH_FLOW + 1]];
                sg.mean2d[0] -= dflow[0];
                sg.mean2d[1] -= dflow[1];
                let mu_next = &n.gaussians[s.index].mu;
                if project_mean(cam, mu_next).is_some() {
                    let (dmu, cg) = project::project_mean_backward(cam, mu_next, dflow);
                    let mut gg = GaussianGrad::zeros(0);
                    gg.mu = dmu;
                    next_part = Some((dflow, gg, cg));
                }
            }
            let (gg, cg) = project_gaussian_backward(cam, g, cloud.sh_degree, s, &sg);
            (s.index, gg, cg, next_part)
        })
        .collect();

    let mut grads = CloudGrads::zeros(cloud);
    let mut next_grads = next.map(CloudGrads::zeros);
    let mut cam_grad = CameraGrad::default();
    for ((idx, gg, cg, np), rg) in per_splat.into_iter().zip(&raster) {
        grads.add_gaussian(idx, &gg);
        grads.mean2d[idx] = rg.mean2d;
        cam_grad += cg;
        if let (Some((dflow, ng, ncg)), Some(ngr)) = (np, next_grads.as_mut()) {
            ngr.mu[idx] += ng.mu;
            ngr.mean2d[idx] = dflow;
            cam_grad += ncg;
        }
    }
    Ok(RenderGradients { cloud: grads, next: next_grads, camera: cam_grad })
}

/// Compositing weights `α_i ∏_{j<i}(1 − α_j)` of the Gaussians covering the
/// image point `(x, y)`, in compositing order, as `(cloud index, weight)`.
pub fn point_weights(cam: &PinholeCamera, cloud: &GaussianCloud, x: f64, y: f64) -> Vec<(usize, f64)> {
    let mut out = Vec::new();
    let mut trans = 1.0;
    for s in project_cloud(cam, cloud) {
        let Some((alpha, _, _, _)) = raster::splat_alpha(&s, x, y) else { continue };
        out.push((s.index, alpha * trans));
        trans *= 1.0 - alpha;
        if trans < raster::MIN_TRANSMITTANCE {
            break;
        }
    }
    out
}

/// Identical contributor lists at two parameter settings mean the
/// compositing took the same branches (used to validate finite-difference
/// probes across the footprint and alpha cutoffs).
pub fn render_signature(cam: &PinholeCamera, cloud: &GaussianCloud) -> (Vec<Vec<u32>>, Vec<(u32, [bool; 3])>) {
    let splats = project_cloud(cam, cloud);
    let colors = splats.iter().map(|s| (s.id, s.color_active)).collect();
    (contributor_signature(cam.width, cam.height, &splats), colors)
}

#[cfg(test)]
mod tests;
