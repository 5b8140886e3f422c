//! Object-centric deformation network: six factorized feature planes over
//! `(x, y, z, t)` fused by elementwise product, followed by a small MLP that
//! predicts a 10-D per-Gaussian deformation.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{normalize_backward, GaussianCloud, Quat, TimeIndex, Vec3};
use crate::render::CloudGrads;

/// Coordinate pairs of the six planes; index 3 is time.
pub const PLANE_AXES: [(usize, usize); 6] = [(0, 1), (0, 2), (1, 2), (0, 3), (1, 3), (2, 3)];
pub const OUTPUT_DIM: usize = 10;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GS4D";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FieldConfig {
    pub spatial_res: usize,
    pub temporal_res: usize,
    pub features: usize,
    pub hidden: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self { spatial_res: 64, temporal_res: 25, features: 32, hidden: 64 }
    }
}

impl FieldConfig {
    /// Default sizes with the temporal resolution raised to `⌈0.8·T⌉` for
    /// videos longer than 32 frames.
    pub fn for_frames(frames: usize) -> Self {
        let mut c = Self::default();
        if frames > 32 {
            c.temporal_res = (0.8 * frames as f64).ceil() as usize;
        }
        c
    }
}

/// Six feature planes. Plane `p` over axes `(a, b)` stores `F` features per
/// node at `((j * res_a) + i) * F + f` for node `(i, j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiPlaneGrid {
    pub spatial_res: usize,
    pub temporal_res: usize,
    pub features: usize,
    pub planes: [Vec<f64>; 6],
}

/// Bilinear stencil on one plane: four node offsets (in units of `F`) and
/// their weights.
#[derive(Debug, Clone, Copy)]
pub struct Stencil {
    pub nodes: [usize; 4],
    pub weights: [f64; 4],
}

impl MultiPlaneGrid {
    pub fn filled(spatial_res: usize, temporal_res: usize, features: usize, value: f64) -> Self {
        let planes = std::array::from_fn(|p| {
            let (a, b) = PLANE_AXES[p];
            vec![value; Self::res_of(spatial_res, temporal_res, a) * Self::res_of(spatial_res, temporal_res, b) * features]
        });
        Self { spatial_res, temporal_res, features, planes }
    }

    fn res_of(ns: usize, nt: usize, axis: usize) -> usize {
        if axis == 3 {
            nt
        } else {
            ns
        }
    }

    pub fn res(&self, axis: usize) -> usize {
        Self::res_of(self.spatial_res, self.temporal_res, axis)
    }

    /// Continuous grid coordinate of a normalized query along `axis`
    /// (align-corners, clamped to the grid).
    fn grid_coord(&self, axis: usize, v: f64) -> f64 {
        let n = self.res(axis) as f64 - 1.0;
        let unit = if axis == 3 { v } else { 0.5 * (v + 1.0) };
        (unit * n).clamp(0.0, n)
    }

    pub fn stencil(&self, plane: usize, q: &[f64; 4]) -> Stencil {
        let (a, b) = PLANE_AXES[plane];
        let (ra, rb) = (self.res(a), self.res(b));
        let ga = self.grid_coord(a, q[a]);
        let gb = self.grid_coord(b, q[b]);
        let i0 = (ga.floor() as usize).min(ra.saturating_sub(2));
        let j0 = (gb.floor() as usize).min(rb.saturating_sub(2));
        let (fa, fb) = (ga - i0 as f64, gb - j0 as f64);
        let i1 = (i0 + 1).min(ra - 1);
        let j1 = (j0 + 1).min(rb - 1);
        let f = self.features;
        Stencil {
            nodes: [(j0 * ra + i0) * f, (j0 * ra + i1) * f, (j1 * ra + i0) * f, (j1 * ra + i1) * f],
            weights: [(1.0 - fa) * (1.0 - fb), fa * (1.0 - fb), (1.0 - fa) * fb, fa * fb],
        }
    }

    fn interpolate(&self, plane: usize, st: &Stencil, out: &mut [f64]) {
        let f = self.features;
        let data = &self.planes[plane];
        out.fill(0.0);
        for k in 0..4 {
            let w = st.weights[k];
            if w == 0.0 {
                continue;
            }
            let cell = &data[st.nodes[k]..st.nodes[k] + f];
            for (o, c) in out.iter_mut().zip(cell) {
                *o += w * c;
            }
        }
    }

    /// Fused feature at normalized spatial coords `x ∈ [-1,1]³` and time
    /// `u ∈ [0,1]`: elementwise product of the six interpolated planes.
    pub fn sample(&self, x: &Vec3, u: f64) -> Vec<f64> {
        let q = [x.x, x.y, x.z, u];
        let mut out = vec![1.0; self.features];
        let mut tmp = vec![0.0; self.features];
        for p in 0..6 {
            let st = self.stencil(p, &q);
            self.interpolate(p, &st, &mut tmp);
            for (o, v) in out.iter_mut().zip(&tmp) {
                *o *= v;
            }
        }
        out
    }
}

/// `F → H → H → 10` ReLU network, weights column-major.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead {
    pub w1: DMatrix<f64>,
    pub b1: DVector<f64>,
    pub w2: DMatrix<f64>,
    pub b2: DVector<f64>,
    pub w3: DMatrix<f64>,
    pub b3: DVector<f64>,
}

impl MlpHead {
    /// He-uniform hidden layers; the output layer starts at exactly zero.
    pub fn new(features: usize, hidden: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layer = |rows: usize, cols: usize| {
            let bound = (6.0 / cols as f64).sqrt();
            DMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-bound..bound))
        };
        let w1 = layer(hidden, features);
        let w2 = layer(hidden, hidden);
        Self {
            w1,
            b1: DVector::zeros(hidden),
            w2,
            b2: DVector::zeros(hidden),
            w3: DMatrix::zeros(OUTPUT_DIM, hidden),
            b3: DVector::zeros(OUTPUT_DIM),
        }
    }
}

/// Per-Gaussian 10-D deformation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DeformationOutput {
    pub dmu: Vec3,
    /// Raw rotation offset; the applied delta is `normalize((1,0,0,0) + drot)`.
    pub drot: [f64; 4],
    pub dscale: Vec3,
}

impl DeformationOutput {
    fn from_slice(o: &[f64]) -> Self {
        Self {
            dmu: Vec3::new(o[0], o[1], o[2]),
            drot: [o[3], o[4], o[5], o[6]],
            dscale: Vec3::new(o[7], o[8], o[9]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    pub grid: MultiPlaneGrid,
    pub head: MlpHead,
    /// Normalization box mapped to `[-1,1]³`.
    pub box_lo: Vec3,
    pub box_hi: Vec3,
    pub frames: usize,
}

/// Forward intermediates needed by [`DeformationField::backward`].
#[derive(Debug, Clone)]
pub struct FieldCache {
    t: TimeIndex,
    stencils: Vec<[Stencil; 6]>,
    /// Per Gaussian, per plane interpolated features (`n × 6 × F`).
    interp: Vec<f64>,
    x: DMatrix<f64>,
    h1: DMatrix<f64>,
    h2: DMatrix<f64>,
    outputs: DMatrix<f64>,
}

impl FieldCache {
    pub fn time(&self) -> TimeIndex {
        self.t
    }

    /// Which hidden ReLU units are active, both layers, row-major. Equal
    /// patterns mean two evaluations took the same linear pieces.
    pub fn active_units(&self) -> Vec<bool> {
        self.h1.iter().chain(self.h2.iter()).map(|v| *v > 0.0).collect()
    }

    pub fn outputs(&self) -> Vec<DeformationOutput> {
        (0..self.outputs.nrows())
            .map(|i| {
                let row: Vec<f64> = self.outputs.row(i).iter().copied().collect();
                DeformationOutput::from_slice(&row)
            })
            .collect()
    }
}

/// Gradients laid out like [`DeformationField::tensors`].
#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrads {
    pub tensors: Vec<Vec<f64>>,
}

impl FieldGrads {
    pub fn zeros_like(field: &DeformationField) -> Self {
        Self { tensors: field.tensors().iter().map(|t| vec![0.0; t.len()]).collect() }
    }

    pub fn add_scaled(&mut self, o: &FieldGrads, s: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&o.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += s * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }
}

/// Number of leading grid tensors in [`DeformationField::tensors`].
pub const GRID_TENSORS: usize = 6;

impl DeformationField {
    /// Fresh field for `frames` frames over the bounds of `canonical`
    /// expanded by 20%. Spatial planes start uniform in `[0.1, 0.5]`,
    /// temporal planes at one.
    pub fn new(canonical: &GaussianCloud, frames: usize, config: FieldConfig, seed: u64) -> Result<Self> {
        if frames < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 frames, got {frames}")));
        }
        if canonical.is_empty() {
            return Err(Error::InvalidInput("empty canonical cloud".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut grid = MultiPlaneGrid::filled(config.spatial_res, config.temporal_res, config.features, 1.0);
        for p in 0..3 {
            for v in grid.planes[p].iter_mut() {
                *v = rng.gen_range(0.1..0.5);
            }
        }
        let head = MlpHead::new(config.features, config.hidden, &mut rng);
        let (lo, hi) = canonical.bounds();
        let center = (lo + hi) * 0.5;
        // keep a usable box for flat or single-point clouds
        let half = ((hi - lo) * 0.5 * 1.2).map(|v| v.max(1e-3));
        Ok(Self { grid, head, box_lo: center - half, box_hi: center + half, frames })
    }

    pub fn config(&self) -> FieldConfig {
        FieldConfig {
            spatial_res: self.grid.spatial_res,
            temporal_res: self.grid.temporal_res,
            features: self.grid.features,
            hidden: self.head.w1.nrows(),
        }
    }

    pub fn normalize(&self, p: &Vec3) -> Vec3 {
        let mut out = Vec3::zeros();
        for k in 0..3 {
            out[k] = 2.0 * (p[k] - self.box_lo[k]) / (self.box_hi[k] - self.box_lo[k]) - 1.0;
        }
        out
    }

    /// Parameter tensors: six planes, then `w1, b1, w2, b2, w3, b3`.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.grid.planes.iter().map(|p| p.as_slice()).collect();
        let h = &self.head;
        v.extend([h.w1.as_slice(), h.b1.as_slice(), h.w2.as_slice(), h.b2.as_slice(), h.w3.as_slice(), h.b3.as_slice()]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = self.grid.planes.iter_mut().map(|p| p.as_mut_slice()).collect();
        let h = &mut self.head;
        v.push(h.w1.as_mut_slice());
        v.push(h.b1.as_mut_slice());
        v.push(h.w2.as_mut_slice());
        v.push(h.b2.as_mut_slice());
        v.push(h.w3.as_mut_slice());
        v.push(h.b3.as_mut_slice());
        v
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    /// Raw 10-D outputs for every canonical Gaussian at frame `t`.
    pub fn evaluate(&self, canonical: &GaussianCloud, t: usize) -> Result<FieldCache> {
        let t = TimeIndex::new(t, self.frames)?;
        let u = t.normalized();
        let n = canonical.len();
        let f = self.grid.features;
        let per: Vec<([Stencil; 6], Vec<f64>)> = canonical
            .gaussians
            .par_iter()
            .map(|g| {
                let x = self.normalize(&g.mu);
                let q = [x.x, x.y, x.z, u];
                let stencils: [Stencil; 6] = std::array::from_fn(|p| self.grid.stencil(p, &q));
                let mut interp = vec![0.0; 6 * f];
                for p in 0..6 {
                    self.grid.interpolate(p, &stencils[p], &mut interp[p * f..(p + 1) * f]);
                }
                (stencils, interp)
            })
            .collect();
        let mut x = DMatrix::zeros(n, f);
        let mut stencils = Vec::with_capacity(n);
        let mut interp = Vec::with_capacity(n * 6 * f);
        for (i, (st, it)) in per.into_iter().enumerate() {
            for k in 0..f {
                let mut prod = 1.0;
                for p in 0..6 {
                    prod *= it[p * f + k];
                }
                x[(i, k)] = prod;
            }
            stencils.push(st);
            interp.extend_from_slice(&it);
        }
        let h = &self.head;
        let mut h1 = &x * h.w1.transpose();
        add_bias_relu(&mut h1, &h.b1, true);
        let mut h2 = &h1 * h.w2.transpose();
        add_bias_relu(&mut h2, &h.b2, true);
        let mut outputs = &h2 * h.w3.transpose();
        add_bias_relu(&mut outputs, &h.b3, false);
        Ok(FieldCache { t, stencils, interp, x, h1, h2, outputs })
    }

    /// Mean squared second difference along time over the three time planes.
    /// Adds `weight` times its gradient to `grads` and returns the unweighted
    /// value.
    pub fn time_smoothness(&self, weight: f64, grads: &mut FieldGrads) -> f64 {
        let g = &self.grid;
        let (ns, nt, f) = (g.spatial_res, g.temporal_res, g.features);
        if nt < 3 {
            return 0.0;
        }
        let inv = 1.0 / (3 * ns * (nt - 2) * f) as f64;
        let mut sum = 0.0;
        for p in 3..6 {
            let plane = &g.planes[p];
            let out = &mut grads.tensors[p];
            let at = |i: usize, j: usize, k: usize| (j * ns + i) * f + k;
            for j in 1..nt - 1 {
                for i in 0..ns {
                    for k in 0..f {
                        let d = plane[at(i, j - 1, k)] - 2.0 * plane[at(i, j, k)] + plane[at(i, j + 1, k)];
                        sum += d * d;
                        let c = 2.0 * d * inv * weight;
                        out[at(i, j - 1, k)] += c;
                        out[at(i, j, k)] -= 2.0 * c;
                        out[at(i, j + 1, k)] += c;
                    }
                }
            }
        }
        sum * inv
    }

    /// Deformed cloud at frame `t`, plus the cache for the backward pass.
    pub fn deform_with_cache(&self, canonical: &GaussianCloud, t: usize) -> Result<(GaussianCloud, FieldCache)> {
        let cache = self.evaluate(canonical, t)?;
        let mut out = canonical.clone();
        for (i, g) in out.gaussians.iter_mut().enumerate() {
            let d = DeformationOutput::from_slice(cache.outputs.row(i).clone_owned().as_slice());
            apply_deformation(g, &d)?;
        }
        Ok((out, cache))
    }

    pub fn deform(&self, canonical: &GaussianCloud, t: usize) -> Result<GaussianCloud> {
        Ok(self.deform_with_cache(canonical, t)?.0)
    }

    /// Gradients of the field parameters given gradients w.r.t. the deformed
    /// cloud's `mu`, `rot` and `log_scale`.
    pub fn backward(&self, canonical: &GaussianCloud, cache: &FieldCache, upstream: &CloudGrads) -> Result<FieldGrads> {
        let n = canonical.len();
        if upstream.len() != n || cache.outputs.nrows() != n {
            return Err(Error::DimensionMismatch(format!("{} gaussians vs {} gradients", n, upstream.len())));
        }
        let mut d_out = DMatrix::zeros(n, OUTPUT_DIM);
        for i in 0..n {
            let o = DeformationOutput::from_slice(cache.outputs.row(i).clone_owned().as_slice());
            let d = deformation_backward(&canonical.gaussians[i].rot, &o, upstream.mu[i], upstream.rot[i], upstream.log_scale[i]);
            for k in 0..OUTPUT_DIM {
                d_out[(i, k)] = d[k];
            }
        }
        self.backward_outputs(cache, &d_out)
    }

    /// Gradients of the field parameters given `dL/d(raw outputs)` (`n × 10`).
    pub fn backward_outputs(&self, cache: &FieldCache, d_out: &DMatrix<f64>) -> Result<FieldGrads> {
        let h = &self.head;
        let f = self.grid.features;
        let mut grads = FieldGrads::zeros_like(self);

        let dw3 = d_out.transpose() * &cache.h2;
        let db3 = column_sums(d_out);
        let mut dh2 = d_out * &h.w3;
        relu_mask(&mut dh2, &cache.h2);
        let dw2 = dh2.transpose() * &cache.h1;
        let db2 = column_sums(&dh2);
        let mut dh1 = &dh2 * &h.w2;
        relu_mask(&mut dh1, &cache.h1);
        let dw1 = dh1.transpose() * &cache.x;
        let db1 = column_sums(&dh1);
        let dx = &dh1 * &h.w1;

        for (slot, m) in [(6, dw1.as_slice()), (7, db1.as_slice()), (8, dw2.as_slice()), (9, db2.as_slice()), (10, dw3.as_slice()), (11, db3.as_slice())] {
            grads.tensors[slot].copy_from_slice(m);
        }

        // scatter into the planes in Gaussian order (deterministic)
        let mut d_interp = vec![0.0; f];
        for i in 0..cache.stencils.len() {
            let it = &cache.interp[i * 6 * f..(i + 1) * 6 * f];
            for p in 0..6 {
                let mut any = false;
                for k in 0..f {
                    let mut others = 1.0;
                    for q in 0..6 {
                        if q != p {
                            others *= it[q * f + k];
                        }
                    }
                    d_interp[k] = dx[(i, k)] * others;
                    any |= d_interp[k] != 0.0;
                }
                if !any {
                    continue;
                }
                let st = &cache.stencils[i][p];
                let plane = &mut grads.tensors[p];
                for c in 0..4 {
                    let w = st.weights[c];
                    if w == 0.0 {
                        continue;
                    }
                    for k in 0..f {
                        plane[st.nodes[c] + k] += w * d_interp[k];
                    }
                }
            }
        }
        Ok(grads)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        let c = self.config();
        for v in [CHECKPOINT_VERSION, c.spatial_res as u32, c.temporal_res as u32, c.features as u32, c.hidden as u32, self.frames as u32] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in self.box_lo.iter().chain(self.box_hi.iter()) {
            w.write_all(&v.to_le_bytes())?;
        }
        for t in self.tensors() {
            for v in t {
                w.write_all(&(*v as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| if e.kind() == std::io::ErrorKind::NotFound { Error::MissingArtifact(path.into()) } else { e.into() })?
            .read_to_end(&mut bytes)?;
        let mut r = ByteReader { bytes: &bytes, pos: 0, path };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format(path, "bad magic, expected GS4D"));
        }
        let version = r.u32()?;
        if version > CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion { path: path.into(), found: version, supported: CHECKPOINT_VERSION });
        }
        let (ns, nt, f, hidden, frames) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        if ns < 2 || nt < 2 || f == 0 || hidden == 0 || frames < 2 || ns > 4096 || nt > 4096 || f > 4096 || hidden > 4096 {
            return Err(Error::format(path, "implausible field dimensions"));
        }
        let mut lo = Vec3::zeros();
        let mut hi = Vec3::zeros();
        for k in 0..3 {
            lo[k] = r.f64()?;
        }
        for k in 0..3 {
            hi[k] = r.f64()?;
        }
        let mut field = DeformationField {
            grid: MultiPlaneGrid::filled(ns, nt, f, 0.0),
            head: MlpHead {
                w1: DMatrix::zeros(hidden, f),
                b1: DVector::zeros(hidden),
                w2: DMatrix::zeros(hidden, hidden),
                b2: DVector::zeros(hidden),
                w3: DMatrix::zeros(OUTPUT_DIM, hidden),
                b3: DVector::zeros(OUTPUT_DIM),
            },
            box_lo: lo,
            box_hi: hi,
            frames,
        };
        for t in field.tensors_mut() {
            for v in t.iter_mut() {
                *v = r.f32()? as f64;
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after checkpoint payload"));
        }
        Ok(field)
    }
}

pub(crate) struct ByteReader<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub path: &'a Path,
}

impl<'a> ByteReader<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(self.path, "truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn add_bias_relu(m: &mut DMatrix<f64>, b: &DVector<f64>, relu: bool) {
    for c in 0..m.ncols() {
        let bc = b[c];
        for v in m.column_mut(c).iter_mut() {
            *v += bc;
            if relu && *v < 0.0 {
                *v = 0.0;
            }
        }
    }
}

fn relu_mask(d: &mut DMatrix<f64>, act: &DMatrix<f64>) {
    for (g, a) in d.iter_mut().zip(act.iter()) {
        if *a <= 0.0 {
            *g = 0.0;
        }
    }
}

fn column_sums(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum()))
}

/// Applies a raw deformation to a canonical Gaussian in place.
pub fn apply_deformation(g: &mut crate::geometry::Gaussian3D, d: &DeformationOutput) -> Result<()> {
    g.mu += d.dmu;
    let dq = Quat::new(1.0 + d.drot[0], d.drot[1], d.drot[2], d.drot[3]).normalized()?;
    g.rot = dq.mul(g.rot).normalized()?;
    g.log_scale += d.dscale;
    Ok(())
}

/// `dL/d(raw output)` from gradients w.r.t. the deformed `mu`, `rot`
/// (raw quaternion) and `log_scale`.
pub fn deformation_backward(rot1: &Quat, d: &DeformationOutput, d_mu: Vec3, d_rot: [f64; 4], d_ls: Vec3) -> [f64; OUTPUT_DIM] {
    let mut out = [0.0; OUTPUT_DIM];
    out[..3].copy_from_slice(d_mu.as_slice());
    out[7..].copy_from_slice(d_ls.as_slice());
    let raw = Quat::new(1.0 + d.drot[0], d.drot[1], d.drot[2], d.drot[3]);
    let rn = raw.norm();
    let dq = raw.scale(1.0 / rn);
    let p = dq.mul(*rot1);
    let pn = p.norm();
    let d_p = normalize_backward(p.scale(1.0 / pn), pn, d_rot);
    // p = dq ⊗ r is linear in dq
    let mut d_dq = [0.0; 4];
    for k in 0..4 {
        let mut e = [0.0; 4];
        e[k] = 1.0;
        let col = Quat::from_array(e).mul(*rot1).to_array();
        d_dq[k] = (0..4).map(|j| col[j] * d_p[j]).sum();
    }
    let d_raw = normalize_backward(dq, rn, d_dq);
    out[3..7].copy_from_slice(&d_raw);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Gaussian3D;

    fn cloud(n: usize, seed: u64) -> GaussianCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gs = (0..n)
            .map(|_| {
                let mut g = Gaussian3D::with_color(
                    Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
                    0.1,
                    0.5,
                    [0.5; 3],
                    0,
                );
                g.rot = Quat::new(rng.gen_range(0.5..1.0), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5));
                g
            })
            .collect();
        GaussianCloud::from_gaussians(0, gs)
    }

    fn tiny() -> FieldConfig {
        FieldConfig { spatial_res: 4, temporal_res: 3, features: 2, hidden: 5 }
    }

    fn randomize(field: &mut DeformationField, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in field.tensors_mut() {
            for v in t.iter_mut() {
                *v = rng.gen_range(-0.8..1.2);
            }
        }
    }

    #[test]
    fn temporal_resolution_rule() {
        assert_eq!(FieldConfig::for_frames(8).temporal_res, 25);
        assert_eq!(FieldConfig::for_frames(32).temporal_res, 25);
        assert_eq!(FieldConfig::for_frames(40).temporal_res, 32);
        assert_eq!(FieldConfig::for_frames(33).temporal_res, 27);
    }

    #[test]
    fn sample_at_node_is_product_of_nodes() {
        let mut g = MultiPlaneGrid::filled(3, 3, 2, 1.0);
        // node (x=1,y=1) of the xy plane is at the origin, t=0.5 node 1
        let f = 2;
        g.planes[0][(3 + 1) * f] = 2.0;
        g.planes[3][(3 + 1) * f] = 3.0;
        let v = g.sample(&Vec3::new(0.0, 0.0, 0.0), 0.5);
        assert_eq!(v, vec![6.0, 1.0]);
    }

    #[test]
    fn ones_planes_give_ones() {
        let g = MultiPlaneGrid::filled(5, 4, 3, 1.0);
        assert_eq!(g.sample(&Vec3::new(0.3, -0.7, 0.9), 0.21), vec![1.0; 3]);
    }

    #[test]
    fn mid_cell_bilinear_average() {
        let mut g = MultiPlaneGrid::filled(3, 2, 1, 1.0);
        // xy plane nodes (0,0)=1, (1,0)=2, (0,1)=3, (1,1)=4
        g.planes[0][0] = 1.0;
        g.planes[0][1] = 2.0;
        g.planes[0][3] = 3.0;
        g.planes[0][4] = 4.0;
        // grid coordinate 0.5 along x and y is normalized -0.5
        let v = g.sample(&Vec3::new(-0.5, -0.5, 0.0), 0.0);
        assert!((v[0] - 2.5).abs() < 1e-15);
    }

    #[test]
    fn zero_init_is_identity() {
        let c = cloud(50, 1);
        let field = DeformationField::new(&c, 8, FieldConfig::default(), 3).unwrap();
        for t in 1..=8 {
            let d = field.deform(&c, t).unwrap();
            for (a, b) in d.gaussians.iter().zip(&c.gaussians) {
                assert_eq!(a.mu, b.mu);
                assert_eq!(a.log_scale, b.log_scale);
                assert_eq!(a.rot, b.rot.normalized().unwrap());
                assert_eq!(a.sh, b.sh);
                assert_eq!(a.opacity_logit, b.opacity_logit);
            }
        }
        assert!(matches!(field.deform(&c, 9), Err(Error::FrameOutOfRange { .. })));
    }

    #[test]
    fn constant_translation_bias() {
        let c = cloud(20, 2);
        let mut field = DeformationField::new(&c, 4, tiny(), 0).unwrap();
        field.head.b3[0] = 0.25;
        field.head.b3[2] = -0.5;
        let d = field.deform(&c, 3).unwrap();
        for (a, b) in d.gaussians.iter().zip(&c.gaussians) {
            assert_eq!(a.mu - b.mu, Vec3::new(0.25, 0.0, -0.5));
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let c = cloud(10, 3);
        let mut field = DeformationField::new(&c, 4, tiny(), 0).unwrap();
        randomize(&mut field, 4);
        let (_, cache) = field.deform_with_cache(&c, 2).unwrap();
        let g = field.backward(&c, &cache, &CloudGrads::zeros(&c)).unwrap();
        assert!(g.tensors.iter().flatten().all(|&v| v == 0.0));
    }

    fn loss(field: &DeformationField, c: &GaussianCloud, t: usize, w: &CloudGrads) -> f64 {
        let d = field.deform(c, t).unwrap();
        let mut s = 0.0;
        for (i, g) in d.gaussians.iter().enumerate() {
            s += g.mu.dot(&w.mu[i]) + g.log_scale.dot(&w.log_scale[i]);
            s += g.rot.to_array().iter().zip(&w.rot[i]).map(|(a, b)| a * b).sum::<f64>();
        }
        s
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for trial in 0..3 {
            let c = cloud(1 + trial, 10 + trial as u64);
            let mut field = DeformationField::new(&c, 5, tiny(), 0).unwrap();
            randomize(&mut field, 20 + trial as u64);
            let mut w = CloudGrads::zeros(&c);
            for i in 0..c.len() {
                w.mu[i] = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                w.log_scale[i] = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
                w.rot[i] = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            }
            let t = 3;
            let (_, cache) = field.deform_with_cache(&c, t).unwrap();
            let g = field.backward(&c, &cache, &w).unwrap();
            let n_tensors = field.tensors().len();
            let h = 1e-5;
            for ti in 0..n_tensors {
                let len = field.tensors()[ti].len();
                for k in 0..len {
                    let mut fp = field.clone();
                    fp.tensors_mut()[ti][k] += h;
                    let mut fm = field.clone();
                    fm.tensors_mut()[ti][k] -= h;
                    // a ReLU switching inside the probe makes the difference meaningless
                    let a = fp.evaluate(&c, t).unwrap();
                    let b = fm.evaluate(&c, t).unwrap();
                    let same = |x: &DMatrix<f64>, y: &DMatrix<f64>, z: &DMatrix<f64>| {
                        x.iter().zip(y.iter()).zip(z.iter()).all(|((p, q), r)| (*p > 0.0) == (*q > 0.0) && (*q > 0.0) == (*r > 0.0))
                    };
                    if !same(&a.h1, &b.h1, &cache.h1) || !same(&a.h2, &b.h2, &cache.h2) {
                        continue;
                    }
                    let fd = (loss(&fp, &c, t, &w) - loss(&fm, &c, t, &w)) / (2.0 * h);
                    let an = g.tensors[ti][k];
                    assert!((fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()) + 1e-7, "tensor {ti}[{k}]: fd {fd} an {an}");
                }
            }
        }
    }

    #[test]
    fn untouched_cells_get_zero_gradient() {
        let mut c = cloud(1, 5);
        c.gaussians[0].mu = Vec3::new(0.0, 0.0, 0.0);
        let mut two = c.clone();
        two.push(1, c.gaussians[0].clone());
        two.gaussians[1].mu = Vec3::new(1.0, 1.0, 1.0);
        let mut field = DeformationField::new(&two, 4, FieldConfig { spatial_res: 8, temporal_res: 3, features: 2, hidden: 4 }, 0).unwrap();
        randomize(&mut field, 9);
        let (_, cache) = field.deform_with_cache(&c, 1).unwrap();
        let mut w = CloudGrads::zeros(&c);
        w.mu[0] = Vec3::new(1.0, 1.0, 1.0);
        let g = field.backward(&c, &cache, &w).unwrap();
        let st = &cache.stencils[0][0];
        let f = 2;
        for (k, v) in g.tensors[0].iter().enumerate() {
            let node = k / f * f;
            if !st.nodes.contains(&node) {
                assert_eq!(*v, 0.0);
            }
        }
    }

    #[test]
    fn locality_of_cell_perturbation() {
        let c = cloud(60, 6);
        let mut field = DeformationField::new(&c, 4, FieldConfig { spatial_res: 8, temporal_res: 3, features: 2, hidden: 4 }, 0).unwrap();
        randomize(&mut field, 10);
        let base = field.evaluate(&c, 2).unwrap();
        let node = 3 * 8 + 4;
        field.grid.planes[0][node * 2] += 0.5;
        let pert = field.evaluate(&c, 2).unwrap();
        for i in 0..c.len() {
            let touched = base.stencils[i][0].nodes.iter().zip(&base.stencils[i][0].weights).any(|(&n, &w)| n == node * 2 && w != 0.0);
            let changed = base.outputs.row(i) != pert.outputs.row(i);
            if changed {
                assert!(touched, "gaussian {i} changed outside the support");
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let c = cloud(10, 8);
        let mut field = DeformationField::new(&c, 6, tiny(), 0).unwrap();
        randomize(&mut field, 11);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.gs4d");
        field.save(&p).unwrap();
        let back = DeformationField::load(&p).unwrap();
        assert_eq!(back.config(), field.config());
        assert_eq!(back.box_lo, field.box_lo);
        for (a, b) in back.tensors().iter().zip(field.tensors()) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
        let mut bytes = std::fs::read(&p).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(DeformationField::load(&p), Err(Error::UnsupportedVersion { found: 99, .. })));
        bytes.truncate(40);
        bytes[4..8].copy_from_slice(&1u32.to_le_bytes());
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(DeformationField::load(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn time_smoothness_gradient_and_linear_zero() {
        let config = FieldConfig { spatial_res: 4, temporal_res: 5, features: 2, hidden: 4 };
        let mut field = DeformationField::new(&cloud(8, 1), 4, config, 2).unwrap();
        // linear in time: no penalty
        for p in 3..6 {
            for (n, v) in field.grid.planes[p].iter_mut().enumerate() {
                *v = 0.3 + 0.1 * ((n / 8) as f64);
            }
        }
        let mut g = FieldGrads::zeros_like(&field);
        assert!(field.time_smoothness(1.0, &mut g).abs() < 1e-24);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for p in 3..6 {
            for v in field.grid.planes[p].iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
        }
        let mut g = FieldGrads::zeros_like(&field);
        field.time_smoothness(2.0, &mut g);
        let h = 1e-6;
        for (p, idx) in [(3, 0), (4, 17), (5, 39), (3, 22)] {
            let probe = |d: f64| {
                let mut f = field.clone();
                f.grid.planes[p][idx] += d;
                2.0 * f.time_smoothness(0.0, &mut FieldGrads::zeros_like(&f))
            };
            let fd = (probe(h) - probe(-h)) / (2.0 * h);
            assert!((fd - g.tensors[p][idx]).abs() < 1e-7, "plane {p} entry {idx}: {fd} vs {}", g.tensors[p][idx]);
        }
        assert!(g.tensors[..3].iter().flatten().all(|v| *v == 0.0));
    }
}
