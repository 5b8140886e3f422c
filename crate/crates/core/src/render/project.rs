//! EWA projection of 3D Gaussians to screen-space splats and its adjoint.

use nalgebra::{Matrix2, Matrix2x3};

use crate::geometry::{quat_to_rotmat_backward, skew, Gaussian3D, Mat3, PinholeCamera, Vec3};
use crate::sh;

/// Isotropic variance (px²) added to every projected covariance.
pub const LOW_PASS: f64 = 0.3;
/// Footprint radius in standard deviations.
pub const FOOTPRINT_SIGMA: f64 = 3.0;

/// Screen-space state of one Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplatProjection {
    /// Index into the source cloud.
    pub index: usize,
    pub id: u32,
    pub mean2d: [f64; 2],
    /// Upper triangle `(a, b, c)` of the 2×2 covariance, low-pass included.
    pub cov2d: [f64; 3],
    /// Upper triangle of the inverse covariance.
    pub conic: [f64; 3],
    pub depth: f64,
    /// Clamped color and per-channel "inside [0,1]" flags.
    pub color: [f64; 3],
    pub color_active: [bool; 3],
    /// Activated opacity.
    pub alpha: f64,
    /// Footprint radius in pixels.
    pub radius: f64,
}

/// Gradients of a scalar loss w.r.t. the screen-space splat quantities.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SplatGrad {
    pub mean2d: [f64; 2],
    pub conic: [f64; 3],
    pub depth: f64,
    pub alpha: f64,
    pub color: [f64; 3],
}

/// Gradient w.r.t. one Gaussian's raw parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianGrad {
    pub mu: Vec3,
    pub rot: [f64; 4],
    pub log_scale: Vec3,
    pub opacity_logit: f64,
    pub sh: Vec<f64>,
}

impl GaussianGrad {
    pub fn zeros(sh_len: usize) -> Self {
        Self { mu: Vec3::zeros(), rot: [0.0; 4], log_scale: Vec3::zeros(), opacity_logit: 0.0, sh: vec![0.0; sh_len] }
    }
}

/// Camera gradient: translation and a left-multiplied rotation perturbation
/// `R ← exp([ω]×) R`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct CameraGrad {
    pub trans: Vec3,
    pub rot: Vec3,
}

impl std::ops::AddAssign for CameraGrad {
    fn add_assign(&mut self, o: Self) {
        self.trans += o.trans;
        self.rot += o.rot;
    }
}

fn jacobian(cam: &PinholeCamera, pc: &Vec3) -> Matrix2x3<f64> {
    let iz = 1.0 / pc.z;
    let iz2 = iz * iz;
    Matrix2x3::new(cam.fx * iz, 0.0, -cam.fx * pc.x * iz2, 0.0, cam.fy * iz, -cam.fy * pc.y * iz2)
}

fn sym2(m: &Matrix2<f64>) -> [f64; 3] {
    [m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]]
}

/// Screen-space covariance `J W Σ Wᵀ Jᵀ + λ I` for a camera-space center.
pub fn project_covariance(cam: &PinholeCamera, pc: &Vec3, cov3d: &Mat3) -> [f64; 3] {
    let j = jacobian(cam, pc);
    let sc = cam.rot * cov3d * cam.rot.transpose();
    let c = j * sc * j.transpose();
    let mut out = sym2(&c);
    out[0] += LOW_PASS;
    out[2] += LOW_PASS;
    out
}

/// Projects `g`; `None` when the center is not in front of the near plane or
/// the 3σ footprint misses the image.
pub fn project_gaussian(
    cam: &PinholeCamera,
    g: &Gaussian3D,
    sh_degree: usize,
    index: usize,
    id: u32,
) -> Option<SplatProjection> {
    let pc = cam.to_camera(&g.mu);
    if !(pc.z > cam.near) {
        return None;
    }
    let u = cam.fx * pc.x / pc.z + cam.cx;
    let v = cam.fy * pc.y / pc.z + cam.cy;
    let qn = g.rot.norm();
    if !(qn > 0.0) {
        return None;
    }
    let rg = g.rot.scale(1.0 / qn).to_rotmat_unit();
    let m = rg * Mat3::from_diagonal(&g.log_scale.map(f64::exp));
    let cov3d = m * m.transpose();
    let [a, b, c] = project_covariance(cam, &pc, &cov3d);
    let det = a * c - b * b;
    if !(det > 0.0) {
        return None;
    }
    let conic = [c / det, -b / det, a / det];
    let mid = 0.5 * (a + c);
    let lambda_max = mid + (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let radius = FOOTPRINT_SIGMA * lambda_max.sqrt();
    if u + radius < 0.0 || u - radius > cam.width as f64 || v + radius < 0.0 || v - radius > cam.height as f64 {
        return None;
    }
    let dir = (g.mu - cam.center()).normalize();
    let raw = sh::eval_unchecked(sh_degree, &g.sh, &dir);
    let mut color = [0.0; 3];
    let mut color_active = [false; 3];
    for ch in 0..3 {
        color[ch] = raw[ch].clamp(0.0, 1.0);
        color_active[ch] = raw[ch] > 0.0 && raw[ch] < 1.0;
    }
    Some(SplatProjection {
        index,
        id,
        mean2d: [u, v],
        cov2d: [a, b, c],
        conic,
        depth: pc.z,
        color,
        color_active,
        alpha: g.opacity(),
        radius,
    })
}

/// Screen position of a center without culling against the image; `None`
/// behind the near plane.
pub fn project_mean(cam: &PinholeCamera, mu: &Vec3) -> Option<[f64; 2]> {
    let pc = cam.to_camera(mu);
    (pc.z > cam.near).then(|| [cam.fx * pc.x / pc.z + cam.cx, cam.fy * pc.y / pc.z + cam.cy])
}

/// Adjoint of [`project_mean`].
pub fn project_mean_backward(cam: &PinholeCamera, mu: &Vec3, d_mean: [f64; 2]) -> (Vec3, CameraGrad) {
    let pc = cam.to_camera(mu);
    let iz = 1.0 / pc.z;
    let dpc = Vec3::new(
        d_mean[0] * cam.fx * iz,
        d_mean[1] * cam.fy * iz,
        -(d_mean[0] * cam.fx * pc.x + d_mean[1] * cam.fy * pc.y) * iz * iz,
    );
    let d_rot = dpc * mu.transpose();
    (cam.rot.transpose() * dpc, CameraGrad { trans: dpc, rot: rotation_perturbation_grad(&d_rot, &cam.rot) })
}

/// Converts `dL/dR` (full matrix) into the gradient of the left
/// perturbation `exp([ω]×) R` at ω = 0.
pub fn rotation_perturbation_grad(d_rot: &Mat3, rot: &Mat3) -> Vec3 {
    let mut out = Vec3::zeros();
    for k in 0..3 {
        let e = Vec3::ith(k, 1.0);
        out[k] = d_rot.component_mul(&(skew(&e) * rot)).sum();
    }
    out
}

/// Backpropagates splat gradients onto the Gaussian's parameters and the
/// camera pose.
pub fn project_gaussian_backward(
    cam: &PinholeCamera,
    g: &Gaussian3D,
    sh_degree: usize,
    splat: &SplatProjection,
    grad: &SplatGrad,
) -> (GaussianGrad, CameraGrad) {
    let w = &cam.rot;
    let pc = cam.to_camera(&g.mu);
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let iz = 1.0 / z;
    let iz2 = iz * iz;
    let mut out = GaussianGrad::zeros(g.sh.len());
    let mut d_w = Mat3::zeros();
    let mut d_t = Vec3::zeros();

    // opacity
    let o = splat.alpha;
    out.opacity_logit = grad.alpha * o * (1.0 - o);

    // color through SH and the view direction
    let center = cam.center();
    let view = g.mu - center;
    let vn = view.norm();
    let dir = view / vn;
    let mut dcol = grad.color;
    for ch in 0..3 {
        if !splat.color_active[ch] {
            dcol[ch] = 0.0;
        }
    }
    let mut d_mu = Vec3::zeros();
    if dcol.iter().any(|&v| v != 0.0) {
        let basis = sh::basis(sh_degree, &dir);
        let n = sh::coeff_count(sh_degree);
        for k in 0..n {
            for ch in 0..3 {
                out.sh[3 * k + ch] = dcol[ch] * basis[k];
            }
        }
        if sh_degree > 0 {
            let bg = sh::basis_grad(sh_degree, &dir);
            let mut d_dir = Vec3::zeros();
            for k in 1..n {
                let s: f64 = (0..3).map(|ch| dcol[ch] * g.sh[3 * k + ch]).sum();
                d_dir += Vec3::new(bg[k][0], bg[k][1], bg[k][2]) * s;
            }
            let d_view = (d_dir - dir * dir.dot(&d_dir)) / vn;
            d_mu += d_view;
            // center = -Wᵀ t
            let d_center = -d_view;
            d_t += -(w * d_center);
            d_w += -(cam.trans * d_center.transpose());
        }
    }

    // conic -> covariance
    let [ca, cb, cc] = splat.conic;
    let k = Matrix2::new(ca, cb, cb, cc);
    let gk = Matrix2::new(grad.conic[0], 0.5 * grad.conic[1], 0.5 * grad.conic[1], grad.conic[2]);
    let g_cov = -(k * gk * k);

    let j = jacobian(cam, &pc);
    let qn = g.rot.norm();
    let qu = g.rot.scale(1.0 / qn);
    let rg = qu.to_rotmat_unit();
    let s = g.log_scale.map(f64::exp);
    let m = rg * Mat3::from_diagonal(&s);
    let cov3d = m * m.transpose();
    let sc = w * cov3d * w.transpose();

    let d_sc = j.transpose() * g_cov * j;
    let d_j = 2.0 * g_cov * j * sc;

    // camera-space center
    let mut d_pc = Vec3::zeros();
    d_pc.x += grad.mean2d[0] * cam.fx * iz;
    d_pc.y += grad.mean2d[1] * cam.fy * iz;
    d_pc.z += -(grad.mean2d[0] * cam.fx * x + grad.mean2d[1] * cam.fy * y) * iz2;
    d_pc.z += grad.depth;
    d_pc.x += d_j[(0, 2)] * (-cam.fx * iz2);
    d_pc.y += d_j[(1, 2)] * (-cam.fy * iz2);
    d_pc.z += d_j[(0, 0)] * (-cam.fx * iz2)
        + d_j[(0, 2)] * (2.0 * cam.fx * x * iz2 * iz)
        + d_j[(1, 1)] * (-cam.fy * iz2)
        + d_j[(1, 2)] * (2.0 * cam.fy * y * iz2 * iz);

    d_mu += w.transpose() * d_pc;
    d_t += d_pc;
    d_w += d_pc * g.mu.transpose();

    // Σc = W Σ Wᵀ
    let d_cov3d = w.transpose() * d_sc * w;
    d_w += 2.0 * d_sc * w * cov3d;

    // Σ = M Mᵀ, M = R S
    let d_m = 2.0 * d_cov3d * m;
    let d_rg = d_m * Mat3::from_diagonal(&s);
    let rt_dm = rg.transpose() * d_m;
    for i in 0..3 {
        out.log_scale[i] = rt_dm[(i, i)] * s[i];
    }
    out.rot = quat_to_rotmat_backward(g.rot, &d_rg);
    out.mu = d_mu;

    let cam_grad = CameraGrad { trans: d_t, rot: rotation_perturbation_grad(&d_w, w) };
    (out, cam_grad)
}
