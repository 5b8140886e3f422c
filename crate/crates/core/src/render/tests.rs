use super::*;
use crate::geometry::{Gaussian3D, Quat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn cam(w: usize, h: usize) -> PinholeCamera {
    PinholeCamera::new(40.0, 40.0, w as f64 / 2.0, h as f64 / 2.0, w, h)
}

fn random_cloud(rng: &mut ChaCha8Rng, n: usize, degree: usize) -> GaussianCloud {
    let k = crate::sh::coeff_count(degree);
    let gs = (0..n)
        .map(|_| Gaussian3D {
            mu: Vec3::new(rng.gen_range(-0.6..0.6), rng.gen_range(-0.6..0.6), rng.gen_range(2.0..3.0)),
            rot: Quat::new(rng.gen_range(0.5..1.0), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)),
            log_scale: Vec3::new(rng.gen_range(-2.8..-1.8), rng.gen_range(-2.8..-1.8), rng.gen_range(-2.8..-1.8)),
            opacity_logit: rng.gen_range(-1.0..2.0),
            sh: (0..3 * k).map(|i| if i < 3 { rng.gen_range(-1.2..1.2) } else { rng.gen_range(-0.3..0.3) }).collect(),
        })
        .collect();
    GaussianCloud::from_gaussians(degree, gs)
}

#[test]
fn empty_cloud_renders_background() {
    let c = cam(20, 12);
    let out = render(&c, &GaussianCloud::new(0), [0.1, 0.2, 0.3]);
    for p in 0..20 * 12 {
        assert_eq!(&out.rgb.data[3 * p..3 * p + 3], &[0.1, 0.2, 0.3]);
        assert_eq!(out.alpha.data[p], 0.0);
        assert_eq!(out.depth.data[p], c.far);
    }
}

#[test]
fn opaque_single_gaussian() {
    let c = cam(16, 16);
    let mut g = Gaussian3D::with_color(Vec3::new(0.0, 0.0, 2.0), 1.0, 0.99999, [1.0, 0.0, 0.0], 0);
    g.opacity_logit = 20.0;
    let cloud = GaussianCloud::from_gaussians(0, vec![g]);
    let out = render(&c, &cloud, [0.0; 3]);
    let p = 8 * 16 + 8;
    // pixel center offset of half a pixel from the mean: alpha ≈ 1
    assert!((out.rgb.data[3 * p] - 1.0).abs() < 1e-3);
    assert!(out.rgb.data[3 * p + 1].abs() < 1e-12);
    assert!((out.depth.data[p] - 2.0).abs() < 1e-3 * c.far);
}

#[test]
fn two_layer_compositing() {
    let c = cam(16, 16);
    let mut front = Gaussian3D::with_color(Vec3::new(0.0, 0.0, 1.0), 1.0, 0.5, [1.0, 0.0, 0.0], 0);
    let mut back = Gaussian3D::with_color(Vec3::new(0.0, 0.0, 2.0), 1.0, 0.5, [0.0, 0.0, 1.0], 0);
    front.opacity_logit = 0.0; // 0.5
    back.opacity_logit = 40.0; // ≈ 1
    let cloud = GaussianCloud::from_gaussians(0, vec![back, front]);
    let out = render(&c, &cloud, [0.0; 3]);
    // huge footprint: the Gaussian factor at the pixel next to the center
    // is exp(-tiny); compare with the exact two-term formula
    let p = 8 * 16 + 8;
    let s = project_cloud(&c, &cloud);
    let a0 = s[0].alpha * raster::splat_alpha(&s[0], 8.5, 8.5).unwrap().1;
    let a1 = s[1].alpha * raster::splat_alpha(&s[1], 8.5, 8.5).unwrap().1;
    let expect_r = a0;
    let expect_b = (1.0 - a0) * a1;
    assert!((out.rgb.data[3 * p] - expect_r).abs() < 1e-12);
    assert!((out.rgb.data[3 * p + 2] - expect_b).abs() < 1e-12);
    assert!((out.rgb.data[3 * p] - 0.5).abs() < 1e-3 && (out.rgb.data[3 * p + 2] - 0.5).abs() < 1e-3);
}

#[test]
fn isotropic_on_axis_projection() {
    let c = cam(32, 32);
    let g = Gaussian3D::with_color(Vec3::new(0.0, 0.0, 3.0), 0.2, 0.5, [0.5; 3], 0);
    let s = project_gaussian(&c, &g, 0, 0, 0).unwrap();
    assert_eq!(s.mean2d, [16.0, 16.0]);
    assert!((s.cov2d[0] - s.cov2d[2]).abs() < 1e-12 && s.cov2d[1].abs() < 1e-12);
    let behind = Gaussian3D::with_color(Vec3::new(0.0, 0.0, -1.0), 0.2, 0.5, [0.5; 3], 0);
    assert!(project_gaussian(&c, &behind, 0, 0, 0).is_none());
}

#[test]
fn projected_covariance_matches_numeric_jacobian() {
    // oracle: Jacobian of the pinhole map by central differences
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut c = cam(64, 64);
    c.rot = crate::geometry::rotation_from_axis_angle(&Vec3::new(0.1, -0.2, 0.05));
    c.trans = Vec3::new(0.1, 0.0, 0.3);
    for _ in 0..20 {
        let cloud = random_cloud(&mut rng, 1, 0);
        let g = &cloud.gaussians[0];
        let cov3d = crate::geometry::build_covariance(g.rot, &g.log_scale).unwrap();
        let proj = |p: &Vec3| {
            let q = c.to_camera(p);
            [c.fx * q.x / q.z + c.cx, c.fy * q.y / q.z + c.cy]
        };
        let mut jw = nalgebra::Matrix2x3::<f64>::zeros();
        for k in 0..3 {
            let h = 1e-6;
            let mut a = g.mu;
            a[k] += h;
            let mut b = g.mu;
            b[k] -= h;
            let (pa, pb) = (proj(&a), proj(&b));
            jw[(0, k)] = (pa[0] - pb[0]) / (2.0 * h);
            jw[(1, k)] = (pa[1] - pb[1]) / (2.0 * h);
        }
        let expect = jw * cov3d * jw.transpose();
        let got = project::project_covariance(&c, &c.to_camera(&g.mu), &cov3d);
        assert!((got[0] - LOW_PASS - expect[(0, 0)]).abs() < 1e-6 * (1.0 + expect[(0, 0)].abs()));
        assert!((got[1] - expect[(0, 1)]).abs() < 1e-6 * (1.0 + expect[(0, 1)].abs()));
        assert!((got[2] - LOW_PASS - expect[(1, 1)]).abs() < 1e-6 * (1.0 + expect[(1, 1)].abs()));
    }
}

#[test]
fn flow_of_identical_clouds_is_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let c = cam(32, 32);
    let cloud = random_cloud(&mut rng, 30, 0);
    let f = render_flow(&c, &cloud, &cloud).unwrap();
    for p in 0..32 * 32 {
        if f.valid.data[p] {
            assert_eq!(f.flow.data[2 * p], 0.0);
            assert_eq!(f.flow.data[2 * p + 1], 0.0);
        }
    }
}

#[test]
fn uniform_translation_flow() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let c = cam(32, 32);
    let mut cloud = random_cloud(&mut rng, 40, 0);
    for g in &mut cloud.gaussians {
        g.mu.z = 2.5;
        g.opacity_logit = 3.0;
        g.log_scale = Vec3::repeat(-1.5);
    }
    // +3 px at depth 2.5 and fx 40
    let mut moved = cloud.clone();
    for g in &mut moved.gaussians {
        g.mu.x += 3.0 * 2.5 / 40.0;
    }
    let f = render_flow(&c, &cloud, &moved).unwrap();
    let r = render(&c, &cloud, [0.0; 3]);
    let mut checked = 0;
    for p in 0..32 * 32 {
        if r.alpha.data[p] > 0.9999 {
            assert!((f.flow.data[2 * p] - 3.0).abs() < 1e-6);
            assert!(f.flow.data[2 * p + 1].abs() < 1e-6);
            checked += 1;
        }
    }
    assert!(checked > 50);
}

#[test]
fn flow_requires_matching_ids() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = cam(8, 8);
    let a = random_cloud(&mut rng, 3, 0);
    let mut b = a.clone();
    b.ids[0] = 99;
    assert!(matches!(render_flow(&c, &a, &b), Err(Error::IdMismatch)));
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let c = cam(24, 24);
    let cloud = random_cloud(&mut rng, 10, 1);
    let fwd = render_full(&c, &cloud, None, [0.2; 3]).unwrap();
    let zero = Image::new(24, 24, 3);
    let g = render_backward(&c, &cloud, None, [0.2; 3], &fwd, &RenderUpstream { rgb: Some(&zero), ..Default::default() }).unwrap();
    assert!(g.cloud.mu.iter().all(|v| *v == Vec3::zeros()));
    assert!(g.cloud.sh.iter().all(|v| *v == 0.0));
    assert_eq!(g.camera, CameraGrad::default());
}

#[test]
fn alpha_and_rgb_stay_in_range() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let c = cam(32, 32);
    for _ in 0..5 {
        let cloud = random_cloud(&mut rng, 60, 2);
        let out = render(&c, &cloud, [1.0, 0.0, 0.5]);
        assert!(out.alpha.data.iter().all(|&a| (0.0..=1.0).contains(&a)));
        assert!(out.rgb.data.iter().all(|&a| (0.0..=1.0 + 1e-12).contains(&a)));
    }
}

/// Probes `f` at ±h; `None` when the compositing branches change.
fn probe(
    c: &PinholeCamera,
    cloud: &GaussianCloud,
    base_sig: &(Vec<Vec<u32>>, Vec<(u32, [bool; 3])>),
    set: impl Fn(&mut GaussianCloud, f64),
    f: impl Fn(&GaussianCloud) -> f64,
    h: f64,
) -> Option<f64> {
    let mut p = cloud.clone();
    set(&mut p, h);
    let mut m = cloud.clone();
    set(&mut m, -h);
    if &render_signature(c, &p) != base_sig || &render_signature(c, &m) != base_sig {
        return None;
    }
    Some((f(&p) - f(&m)) / (2.0 * h))
}

fn close(fd: f64, an: f64) -> bool {
    (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()) + 1e-7
}

#[test]
fn single_gaussian_l2_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let c = cam(32, 32);
    for _ in 0..5 {
        let cloud = random_cloud(&mut rng, 1, 1);
        let target = Image::from_fn(32, 32, 3, |_, _, _| rng.gen_range(0.0..1.0));
        let bg = [0.3, 0.6, 0.1];
        let loss = |cl: &GaussianCloud| {
            let o = render(&c, cl, bg);
            o.rgb.data.iter().zip(&target.data).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        };
        let fwd = render_full(&c, &cloud, None, bg).unwrap();
        let up = Image { data: fwd.rgb.data.iter().zip(&target.data).map(|(a, b)| 2.0 * (a - b)).collect(), ..target.clone() };
        let g = render_backward(&c, &cloud, None, bg, &fwd, &RenderUpstream { rgb: Some(&up), ..Default::default() }).unwrap();
        let sig = render_signature(&c, &cloud);
        let h = 1e-4;
        let mut checked = 0;
        for k in 0..3 {
            if let Some(fd) = probe(&c, &cloud, &sig, |cl, d| cl.gaussians[0].mu[k] += d, loss, h) {
                assert!(close(fd, g.cloud.mu[0][k]), "mu[{k}] fd={fd} an={}", g.cloud.mu[0][k]);
                checked += 1;
            }
            if let Some(fd) = probe(&c, &cloud, &sig, |cl, d| cl.gaussians[0].log_scale[k] += d, loss, h) {
                assert!(close(fd, g.cloud.log_scale[0][k]), "ls[{k}] fd={fd} an={}", g.cloud.log_scale[0][k]);
                checked += 1;
            }
        }
        for k in 0..4 {
            let set = |cl: &mut GaussianCloud, d: f64| {
                let mut a = cl.gaussians[0].rot.to_array();
                a[k] += d;
                cl.gaussians[0].rot = Quat::from_array(a);
            };
            if let Some(fd) = probe(&c, &cloud, &sig, set, loss, h) {
                assert!(close(fd, g.cloud.rot[0][k]), "rot[{k}] fd={fd} an={}", g.cloud.rot[0][k]);
                checked += 1;
            }
        }
        if let Some(fd) = probe(&c, &cloud, &sig, |cl, d| cl.gaussians[0].opacity_logit += d, loss, h) {
            assert!(close(fd, g.cloud.opacity_logit[0]));
            checked += 1;
        }
        for k in 0..12 {
            if let Some(fd) = probe(&c, &cloud, &sig, |cl, d| cl.gaussians[0].sh[k] += d, loss, h) {
                assert!(close(fd, g.cloud.sh[k]), "sh[{k}] fd={fd} an={}", g.cloud.sh[k]);
                checked += 1;
            }
        }
        assert!(checked > 15);
    }
}

#[test]
fn camera_translation_and_rotation_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let base = cam(32, 32);
    let cloud = random_cloud(&mut rng, 20, 1);
    let up_rgb = Image::from_fn(32, 32, 3, |_, _, _| rng.gen_range(-1.0..1.0));
    let up_d = Image::from_fn(32, 32, 1, |_, _, _| rng.gen_range(-1.0..1.0) * 1e-2);
    let f = |c: &PinholeCamera| {
        let o = render(c, &cloud, [0.5; 3]);
        o.rgb.data.iter().zip(&up_rgb.data).map(|(a, b)| a * b).sum::<f64>()
            + o.depth.data.iter().zip(&up_d.data).map(|(a, b)| a * b).sum::<f64>()
    };
    let fwd = render_full(&base, &cloud, None, [0.5; 3]).unwrap();
    let g = render_backward(&base, &cloud, None, [0.5; 3], &fwd, &RenderUpstream { rgb: Some(&up_rgb), depth: Some(&up_d), ..Default::default() }).unwrap();
    let sig = render_signature(&base, &cloud);
    let h = 1e-5;
    let mut checked = 0;
    for k in 0..3 {
        let mut cp = base.clone();
        cp.trans[k] += h;
        let mut cm = base.clone();
        cm.trans[k] -= h;
        if render_signature(&cp, &cloud) == sig && render_signature(&cm, &cloud) == sig {
            let fd = (f(&cp) - f(&cm)) / (2.0 * h);
            assert!(close(fd, g.camera.trans[k]), "t[{k}] {fd} vs {}", g.camera.trans[k]);
            checked += 1;
        }
        let e = Vec3::ith(k, h);
        let cp = base.with_pose(crate::geometry::rotation_from_axis_angle(&e) * base.rot, base.trans);
        let cm = base.with_pose(crate::geometry::rotation_from_axis_angle(&-e) * base.rot, base.trans);
        if render_signature(&cp, &cloud) == sig && render_signature(&cm, &cloud) == sig {
            let fd = (f(&cp) - f(&cm)) / (2.0 * h);
            assert!(close(fd, g.camera.rot[k]), "w[{k}] {fd} vs {}", g.camera.rot[k]);
            checked += 1;
        }
    }
    assert!(checked >= 4);
}

#[test]
fn flow_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let c = cam(32, 32);
    let cloud = random_cloud(&mut rng, 25, 0);
    let mut next = cloud.clone();
    for g in &mut next.gaussians {
        g.mu += Vec3::new(rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), 0.0);
    }
    let up = Image::from_fn(32, 32, 2, |_, _, _| rng.gen_range(-1.0..1.0));
    let f = |a: &GaussianCloud, b: &GaussianCloud| {
        let fl = render_flow(&c, a, b).unwrap();
        (0..32 * 32).filter(|&p| fl.valid.data[p]).map(|p| fl.flow.data[2 * p] * up.data[2 * p] + fl.flow.data[2 * p + 1] * up.data[2 * p + 1]).sum::<f64>()
    };
    let fwd = render_full(&c, &cloud, Some(&next), [0.0; 3]).unwrap();
    let g = render_backward(&c, &cloud, Some(&next), [0.0; 3], &fwd, &RenderUpstream { flow: Some(&up), ..Default::default() }).unwrap();
    let gn = g.next.unwrap();
    let sig = render_signature(&c, &cloud);
    let valid = fwd.flow.as_ref().unwrap().valid.clone();
    let h = 1e-5;
    let mut checked = 0;
    for i in 0..cloud.len() {
        for k in 0..2 {
            let mut p = cloud.clone();
            p.gaussians[i].mu[k] += h;
            let mut m = cloud.clone();
            m.gaussians[i].mu[k] -= h;
            let same = render_signature(&c, &p) == sig && render_signature(&c, &m) == sig;
            let vp = render_flow(&c, &p, &next).unwrap().valid == valid;
            let vm = render_flow(&c, &m, &next).unwrap().valid == valid;
            if same && vp && vm {
                let fd = (f(&p, &next) - f(&m, &next)) / (2.0 * h);
                assert!(close(fd, g.cloud.mu[i][k]), "mu {i},{k}: {fd} vs {}", g.cloud.mu[i][k]);
                checked += 1;
            }
            let mut p = next.clone();
            p.gaussians[i].mu[k] += h;
            let mut m = next.clone();
            m.gaussians[i].mu[k] -= h;
            let fd = (f(&cloud, &p) - f(&cloud, &m)) / (2.0 * h);
            assert!(close(fd, gn.mu[i][k]), "next {i},{k}: {fd} vs {}", gn.mu[i][k]);
        }
    }
    assert!(checked > 20);
}

#[test]
fn rendering_is_thread_count_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let c = cam(48, 40);
    let cloud = random_cloud(&mut rng, 80, 1);
    let run = |threads: usize| {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        pool.install(|| {
            let fwd = render_full(&c, &cloud, None, [0.1; 3]).unwrap();
            let up = fwd.rgb.clone();
            let g = render_backward(&c, &cloud, None, [0.1; 3], &fwd, &RenderUpstream { rgb: Some(&up), ..Default::default() }).unwrap();
            (fwd, g)
        })
    };
    let (a, ga) = run(1);
    let (b, gb) = run(8);
    assert_eq!(a, b);
    assert_eq!(ga, gb);
}
