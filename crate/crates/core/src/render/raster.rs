//! Tile-based front-to-back compositing of sorted splats and its adjoint.
//!
//! Every splat carries `nch` value channels that are composited with the
//! same weights `w_i = α_i ∏_{j<i} (1 - α_j)`; the remaining transmittance is
//! filled with the per-channel background. Tiles are processed in parallel
//! but each pixel only ever touches its own tile's ordered list, and
//! backward partial sums are merged in tile order, so results do not depend
//! on the thread count.

use rayon::prelude::*;

use super::project::{SplatProjection, FOOTPRINT_SIGMA};
use crate::image::Image;

pub const TILE_SIZE: usize = 16;
pub const MIN_SPLAT_ALPHA: f64 = 1.0 / 255.0;
pub const MIN_TRANSMITTANCE: f64 = 1e-4;
pub const MAX_CHANNELS: usize = 8;
/// Exponent below which a pixel lies outside the 3σ footprint.
pub const CUTOFF_POWER: f64 = -0.5 * FOOTPRINT_SIGMA * FOOTPRINT_SIGMA;

#[derive(Debug, Clone)]
pub struct RasterOutput {
    pub values: Image,
    pub alpha: Image,
}

#[derive(Debug, Clone, Copy)]
pub struct RasterGrad {
    pub mean2d: [f64; 2],
    pub conic: [f64; 3],
    pub alpha: f64,
    pub values: [f64; MAX_CHANNELS],
}

impl Default for RasterGrad {
    fn default() -> Self {
        Self { mean2d: [0.0; 2], conic: [0.0; 3], alpha: 0.0, values: [0.0; MAX_CHANNELS] }
    }
}

impl RasterGrad {
    fn add(&mut self, o: &RasterGrad) {
        self.mean2d[0] += o.mean2d[0];
        self.mean2d[1] += o.mean2d[1];
        for k in 0..3 {
            self.conic[k] += o.conic[k];
        }
        self.alpha += o.alpha;
        for k in 0..MAX_CHANNELS {
            self.values[k] += o.values[k];
        }
    }
}

/// Sorts splats by camera depth, ties broken by Gaussian id.
pub fn sort_splats(splats: &mut [SplatProjection]) {
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.id.cmp(&b.id)));
}

/// Per-pixel footprint test shared by forward and backward. Returns
/// `(alpha, gaussian, dx, dy)` when the splat contributes.
#[inline(always)]
pub fn splat_alpha(s: &SplatProjection, px: f64, py: f64) -> Option<(f64, f64, f64, f64)> {
    let dx = px - s.mean2d[0];
    let dy = py - s.mean2d[1];
    let power = -0.5 * (s.conic[0] * dx * dx + s.conic[2] * dy * dy) - s.conic[1] * dx * dy;
    if power < CUTOFF_POWER {
        return None;
    }
    let g = power.exp();
    let alpha = s.alpha * g;
    if alpha < MIN_SPLAT_ALPHA {
        return None;
    }
    Some((alpha, g, dx, dy))
}

pub(crate) struct TileGrid {
    pub tiles_x: usize,
    pub lists: Vec<Vec<u32>>,
}

pub(crate) fn bin_tiles(width: usize, height: usize, splats: &[SplatProjection]) -> TileGrid {
    let tiles_x = width.div_ceil(TILE_SIZE);
    let tiles_y = height.div_ceil(TILE_SIZE);
    let mut lists = vec![Vec::new(); tiles_x * tiles_y];
    for (i, s) in splats.iter().enumerate() {
        // one pixel of slack keeps the box a strict superset of the
        // per-pixel footprint test
        let r = s.radius + 1.0;
        let x0 = ((s.mean2d[0] - r) / TILE_SIZE as f64).floor().max(0.0) as usize;
        let y0 = ((s.mean2d[1] - r) / TILE_SIZE as f64).floor().max(0.0) as usize;
        let x1 = ((s.mean2d[0] + r) / TILE_SIZE as f64).floor();
        let y1 = ((s.mean2d[1] + r) / TILE_SIZE as f64).floor();
        if x1 < 0.0 || y1 < 0.0 {
            continue;
        }
        let x1 = (x1 as usize).min(tiles_x - 1);
        let y1 = (y1 as usize).min(tiles_y - 1);
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                lists[ty * tiles_x + tx].push(i as u32);
            }
        }
    }
    TileGrid { tiles_x, lists }
}

fn tile_pixels(grid: &TileGrid, t: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let (tx, ty) = (t % grid.tiles_x, t / grid.tiles_x);
    let x0 = tx * TILE_SIZE;
    let y0 = ty * TILE_SIZE;
    (x0, y0, (x0 + TILE_SIZE).min(width), (y0 + TILE_SIZE).min(height))
}

/// Composites `splats` (already depth-sorted) into `nch` value channels.
/// `values[i * nch + c]` is channel `c` of splat `i`.
pub fn rasterize(
    width: usize,
    height: usize,
    splats: &[SplatProjection],
    values: &[f64],
    nch: usize,
    background: &[f64],
) -> RasterOutput {
    assert!(nch <= MAX_CHANNELS && background.len() == nch && values.len() == splats.len() * nch);
    let grid = bin_tiles(width, height, splats);
    let blocks: Vec<(Vec<f64>, Vec<f64>)> = (0..grid.lists.len())
        .into_par_iter()
        .map(|t| {
            let (x0, y0, x1, y1) = tile_pixels(&grid, t, width, height);
            let list = &grid.lists[t];
            let mut vals = Vec::with_capacity((x1 - x0) * (y1 - y0) * nch);
            let mut alphas = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for y in y0..y1 {
                for x in x0..x1 {
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    let mut acc = [0.0; MAX_CHANNELS];
                    let mut trans = 1.0;
                    for &si in list {
                        let s = &splats[si as usize];
                        let Some((alpha, _, _, _)) = splat_alpha(s, px, py) else { continue };
                        let w = alpha * trans;
                        let v = &values[si as usize * nch..si as usize * nch + nch];
                        for c in 0..nch {
                            acc[c] += w * v[c];
                        }
                        trans *= 1.0 - alpha;
                        if trans < MIN_TRANSMITTANCE {
                            break;
                        }
                    }
                    for c in 0..nch {
                        vals.push(acc[c] + trans * background[c]);
                    }
                    alphas.push(1.0 - trans);
                }
            }
            (vals, alphas)
        })
        .collect();

    let mut out = RasterOutput { values: Image::new(width, height, nch), alpha: Image::new(width, height, 1) };
    for (t, (vals, alphas)) in blocks.into_iter().enumerate() {
        let (x0, y0, x1, y1) = tile_pixels(&grid, t, width, height);
        let mut k = 0;
        for y in y0..y1 {
            for x in x0..x1 {
                let p = y * width + x;
                out.values.data[p * nch..p * nch + nch].copy_from_slice(&vals[k * nch..k * nch + nch]);
                out.alpha.data[p] = alphas[k];
                k += 1;
            }
        }
    }
    out
}

struct Contribution {
    local: u32,
    alpha: f64,
    gauss: f64,
    trans: f64,
    dx: f64,
    dy: f64,
}

/// Exact reverse-mode adjoint of [`rasterize`]. `d_values` has `nch`
/// channels; `d_alpha` is the upstream gradient of the alpha image.
pub fn rasterize_backward(
    width: usize,
    height: usize,
    splats: &[SplatProjection],
    values: &[f64],
    nch: usize,
    background: &[f64],
    d_values: &Image,
    d_alpha: Option<&Image>,
) -> Vec<RasterGrad> {
    assert_eq!(d_values.channels, nch);
    let grid = bin_tiles(width, height, splats);
    let partials: Vec<Vec<RasterGrad>> = (0..grid.lists.len())
        .into_par_iter()
        .map(|t| {
            let (x0, y0, x1, y1) = tile_pixels(&grid, t, width, height);
            let list = &grid.lists[t];
            let mut local = vec![RasterGrad::default(); list.len()];
            if list.is_empty() {
                return local;
            }
            let mut contribs: Vec<Contribution> = Vec::new();
            for y in y0..y1 {
                for x in x0..x1 {
                    let p = y * width + x;
                    let up = &d_values.data[p * nch..p * nch + nch];
                    let up_alpha = d_alpha.map_or(0.0, |a| a.data[p]);
                    if up_alpha == 0.0 && up.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                    contribs.clear();
                    let mut trans = 1.0;
                    for (li, &si) in list.iter().enumerate() {
                        let s = &splats[si as usize];
                        let Some((alpha, gauss, dx, dy)) = splat_alpha(s, px, py) else { continue };
                        contribs.push(Contribution { local: li as u32, alpha, gauss, trans, dx, dy });
                        trans *= 1.0 - alpha;
                        if trans < MIN_TRANSMITTANCE {
                            break;
                        }
                    }
                    // suffix value R: what the remaining layers composite to
                    let mut rest = [0.0; MAX_CHANNELS];
                    rest[..nch].copy_from_slice(background);
                    // alpha channel treated as value 1 over background 0
                    let mut rest_alpha = 0.0;
                    for c in contribs.iter().rev() {
                        let si = list[c.local as usize] as usize;
                        let s = &splats[si];
                        let v = &values[si * nch..si * nch + nch];
                        let mut d_a = up_alpha * c.trans * (1.0 - rest_alpha);
                        let w = c.alpha * c.trans;
                        let g = &mut local[c.local as usize];
                        for ch in 0..nch {
                            d_a += up[ch] * c.trans * (v[ch] - rest[ch]);
                            g.values[ch] += up[ch] * w;
                        }
                        for ch in 0..nch {
                            rest[ch] = c.alpha * v[ch] + (1.0 - c.alpha) * rest[ch];
                        }
                        rest_alpha = c.alpha + (1.0 - c.alpha) * rest_alpha;

                        g.alpha += d_a * c.gauss;
                        let d_power = d_a * c.alpha;
                        let [ca, cb, cc] = s.conic;
                        g.conic[0] += -0.5 * c.dx * c.dx * d_power;
                        g.conic[1] += -c.dx * c.dy * d_power;
                        g.conic[2] += -0.5 * c.dy * c.dy * d_power;
                        g.mean2d[0] += d_power * (ca * c.dx + cb * c.dy);
                        g.mean2d[1] += d_power * (cb * c.dx + cc * c.dy);
                    }
                }
            }
            local
        })
        .collect();

    let mut out = vec![RasterGrad::default(); splats.len()];
    for (t, local) in partials.iter().enumerate() {
        for (li, g) in local.iter().enumerate() {
            out[grid.lists[t][li] as usize].add(g);
        }
    }
    out
}

/// Per-pixel contributor lists (splat ids in compositing order). Two inputs
/// with equal signatures composite through identical branches.
pub fn contributor_signature(width: usize, height: usize, splats: &[SplatProjection]) -> Vec<Vec<u32>> {
    let grid = bin_tiles(width, height, splats);
    let mut out = vec![Vec::new(); width * height];
    for t in 0..grid.lists.len() {
        let (x0, y0, x1, y1) = tile_pixels(&grid, t, width, height);
        for y in y0..y1 {
            for x in x0..x1 {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut trans = 1.0;
                let sig = &mut out[y * width + x];
                for &si in &grid.lists[t] {
                    let s = &splats[si as usize];
                    let Some((alpha, _, _, _)) = splat_alpha(s, px, py) else { continue };
                    sig.push(s.id);
                    trans *= 1.0 - alpha;
                    if trans < MIN_TRANSMITTANCE {
                        break;
                    }
                }
            }
        }
    }
    out
}
