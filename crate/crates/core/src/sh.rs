//! Real spherical harmonics up to degree 3 in the usual splat layout, with
//! the `0.5 + Σ c·Y` color offset.

use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub const MAX_DEGREE: usize = 3;

const C0: f64 = 0.282_094_791_773_878_14;
const C1: f64 = 0.488_602_511_902_919_9;
const C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];
const C3: [f64; 7] = [
    -0.590_043_589_926_643_5,
    2.890_611_442_640_554,
    -0.457_045_799_464_465_8,
    0.373_176_332_590_115_4,
    -0.457_045_799_464_465_8,
    1.445_305_721_320_277,
    -0.590_043_589_926_643_5,
];

pub const fn coeff_count(degree: usize) -> usize {
    (degree + 1) * (degree + 1)
}

/// Degree of a coefficient array holding `len` reals (three channels).
pub fn degree_for_len(len: usize) -> Option<usize> {
    (0..=MAX_DEGREE).find(|&d| 3 * coeff_count(d) == len)
}

/// DC coefficient that evaluates to `rgb` for every direction.
pub fn rgb_to_dc(rgb: f64) -> f64 {
    (rgb - 0.5) / C0
}

/// Basis values `Y_k(d)` for unit `d`, `k < (degree+1)²`.
pub fn basis(degree: usize, d: &Vec3) -> [f64; 16] {
    let mut y = [0.0; 16];
    let (x, yy, z) = (d.x, d.y, d.z);
    y[0] = C0;
    if degree >= 1 {
        y[1] = -C1 * yy;
        y[2] = C1 * z;
        y[3] = -C1 * x;
    }
    if degree >= 2 {
        let (xx, y2, zz) = (x * x, yy * yy, z * z);
        y[4] = C2[0] * x * yy;
        y[5] = C2[1] * yy * z;
        y[6] = C2[2] * (2.0 * zz - xx - y2);
        y[7] = C2[3] * x * z;
        y[8] = C2[4] * (xx - y2);
        if degree >= 3 {
            y[9] = C3[0] * yy * (3.0 * xx - y2);
            y[10] = C3[1] * x * yy * z;
            y[11] = C3[2] * yy * (4.0 * zz - xx - y2);
            y[12] = C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * y2);
            y[13] = C3[4] * x * (4.0 * zz - xx - y2);
            y[14] = C3[5] * z * (xx - y2);
            y[15] = C3[6] * x * (xx - 3.0 * y2);
        }
    }
    y
}

/// Partial derivatives `∂Y_k/∂(x,y,z)` of the basis polynomials.
pub fn basis_grad(degree: usize, d: &Vec3) -> [[f64; 3]; 16] {
    let mut g = [[0.0; 3]; 16];
    let (x, y, z) = (d.x, d.y, d.z);
    if degree >= 1 {
        g[1] = [0.0, -C1, 0.0];
        g[2] = [0.0, 0.0, C1];
        g[3] = [-C1, 0.0, 0.0];
    }
    if degree >= 2 {
        g[4] = [C2[0] * y, C2[0] * x, 0.0];
        g[5] = [0.0, C2[1] * z, C2[1] * y];
        g[6] = [-2.0 * C2[2] * x, -2.0 * C2[2] * y, 4.0 * C2[2] * z];
        g[7] = [C2[3] * z, 0.0, C2[3] * x];
        g[8] = [2.0 * C2[4] * x, -2.0 * C2[4] * y, 0.0];
        if degree >= 3 {
            let (xx, yy, zz) = (x * x, y * y, z * z);
            g[9] = [C3[0] * 6.0 * x * y, C3[0] * (3.0 * xx - 3.0 * yy), 0.0];
            g[10] = [C3[1] * y * z, C3[1] * x * z, C3[1] * x * y];
            g[11] = [
                C3[2] * (-2.0 * x * y),
                C3[2] * (4.0 * zz - xx - 3.0 * yy),
                C3[2] * 8.0 * y * z,
            ];
            g[12] = [
                C3[3] * (-6.0 * x * z),
                C3[3] * (-6.0 * y * z),
                C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy),
            ];
            g[13] = [
                C3[4] * (4.0 * zz - 3.0 * xx - yy),
                C3[4] * (-2.0 * x * y),
                C3[4] * 8.0 * x * z,
            ];
            g[14] = [C3[5] * 2.0 * x * z, -C3[5] * 2.0 * y * z, C3[5] * (xx - yy)];
            g[15] = [C3[6] * (3.0 * xx - 3.0 * yy), C3[6] * (-6.0 * x * y), 0.0];
        }
    }
    g
}

/// Unclamped color `0.5 + Σ_k sh[k]·Y_k(dir)`.
pub fn evaluate_sh(degree: usize, sh: &[f64], view_dir: &Vec3) -> Result<[f64; 3]> {
    let n = coeff_count(degree);
    if degree > MAX_DEGREE || sh.len() != 3 * n {
        return Err(Error::ShCoefficientCount { expected: 3 * n, got: sh.len() });
    }
    Ok(eval_unchecked(degree, sh, view_dir))
}

pub(crate) fn eval_unchecked(degree: usize, sh: &[f64], dir: &Vec3) -> [f64; 3] {
    let y = basis(degree, dir);
    let mut rgb = [0.5; 3];
    for k in 0..coeff_count(degree) {
        for c in 0..3 {
            rgb[c] += sh[3 * k + c] * y[k];
        }
    }
    rgb
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_dir(rng: &mut ChaCha8Rng) -> Vec3 {
        Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
            .normalize()
    }

    #[test]
    fn zero_coefficients_give_mid_gray() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for degree in 0..=3 {
            let sh = vec![0.0; 3 * coeff_count(degree)];
            for _ in 0..10 {
                assert_eq!(evaluate_sh(degree, &sh, &random_dir(&mut rng)).unwrap(), [0.5; 3]);
            }
        }
    }

    #[test]
    fn degree_zero_is_view_independent() {
        let sh = [0.3, -0.2, 1.1];
        let a = evaluate_sh(0, &sh, &Vec3::new(0.0, 0.0, 1.0)).unwrap();
        let b = evaluate_sh(0, &sh, &Vec3::new(0.6, -0.8, 0.0)).unwrap();
        assert_eq!(a, b);
        assert!((rgb_to_dc(0.8) * C0 + 0.5 - 0.8).abs() < 1e-15);
    }

    #[test]
    fn band_one_is_odd() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let sh: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let d = random_dir(&mut rng);
        let a = evaluate_sh(1, &sh, &d).unwrap();
        let b = evaluate_sh(1, &sh, &(-d)).unwrap();
        // direct band-1 contribution: -C1 y c1 + C1 z c2 - C1 x c3
        for c in 0..3 {
            let band1 = -C1 * d.y * sh[3 + c] + C1 * d.z * sh[6 + c] - C1 * d.x * sh[9 + c];
            assert!(((a[c] - b[c]) - 2.0 * band1).abs() < 1e-12);
        }
    }

    #[test]
    fn coefficient_count_mismatch() {
        assert!(matches!(evaluate_sh(1, &[0.0; 3], &Vec3::z()), Err(Error::ShCoefficientCount { .. })));
        assert_eq!(degree_for_len(48), Some(3));
        assert_eq!(degree_for_len(5), None);
    }

    #[test]
    fn basis_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..10 {
            let d = random_dir(&mut rng);
            let g = basis_grad(3, &d);
            for axis in 0..3 {
                let h = 1e-6;
                let mut dp = d;
                dp[axis] += h;
                let mut dm = d;
                dm[axis] -= h;
                let (yp, ym) = (basis(3, &dp), basis(3, &dm));
                for k in 0..16 {
                    let fd = (yp[k] - ym[k]) / (2.0 * h);
                    assert!((fd - g[k][axis]).abs() < 1e-7, "k={k} axis={axis}");
                }
            }
        }
    }
}
