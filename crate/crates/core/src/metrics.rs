//! Point-track readout from Gaussians, end-point error and image metrics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{GaussianCloud, PinholeCamera};
use crate::image::Image;
use crate::render::point_weights;

/// One track sample. Frames are 1-based.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub track_id: u32,
    pub frame: usize,
    pub u: f64,
    pub v: f64,
    pub visible: bool,
}

/// Persistent tracks: every id has exactly one sample per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet {
    pub frames: usize,
    /// Sorted by `(track_id, frame)`.
    pub points: Vec<TrackPoint>,
}

impl TrackSet {
    pub fn new(frames: usize, mut points: Vec<TrackPoint>) -> Result<Self> {
        points.sort_by_key(|p| (p.track_id, p.frame));
        let set = Self { frames, points };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frames == 0 || self.points.len() % self.frames != 0 {
            return Err(Error::InvalidInput("tracks are not persistent across frames".into()));
        }
        for chunk in self.points.chunks(self.frames) {
            let id = chunk[0].track_id;
            for (k, p) in chunk.iter().enumerate() {
                if p.track_id != id || p.frame != k + 1 {
                    return Err(Error::InvalidInput(format!("track {id} is missing frame {}", k + 1)));
                }
                if !(p.u.is_finite() && p.v.is_finite()) {
                    return Err(Error::InvalidInput(format!("track {id} has non-finite coordinates")));
                }
            }
        }
        Ok(())
    }

    pub fn track_count(&self) -> usize {
        self.points.len() / self.frames.max(1)
    }

    /// CSV with header `track_id,frame,u,v,visible`.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["track_id", "frame", "u", "v", "visible"])?;
        for p in &self.points {
            w.write_record([
                p.track_id.to_string(),
                p.frame.to_string(),
                p.u.to_string(),
                p.v.to_string(),
                (p.visible as u8).to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let header = r.headers()?.clone();
        if header.iter().collect::<Vec<_>>() != ["track_id", "frame", "u", "v", "visible"] {
            return Err(Error::format(path, "expected header track_id,frame,u,v,visible"));
        }
        let mut points = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let field = |i: usize| rec.get(i).unwrap_or("");
            let bad = |what: &str| Error::format(path, format!("bad {what} on line {}", points.len() + 2));
            let visible = match field(4) {
                "0" => false,
                "1" => true,
                _ => return Err(bad("visible flag")),
            };
            points.push(TrackPoint {
                track_id: field(0).parse().map_err(|_| bad("track_id"))?,
                frame: field(1).parse().map_err(|_| bad("frame"))?,
                u: field(2).parse().map_err(|_| bad("u"))?,
                v: field(3).parse().map_err(|_| bad("v"))?,
                visible,
            });
        }
        let frames = points.iter().map(|p| p.frame).max().unwrap_or(0);
        TrackSet::new(frames, points)
    }
}

/// A query attached to the Gaussians covering it at frame 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Attachment {
    pub query: [f64; 2],
    /// `(cloud index, weight)`, weights summing to one.
    pub weights: Vec<(usize, f64)>,
}

/// Attaches `query` to the frame-1 Gaussians with weights proportional to
/// their compositing contribution there; `None` when nothing covers it.
pub fn attach_query(cam: &PinholeCamera, cloud: &GaussianCloud, query: [f64; 2]) -> Option<Attachment> {
    let w = point_weights(cam, cloud, query[0], query[1]);
    let sum: f64 = w.iter().map(|x| x.1).sum();
    if w.is_empty() || !(sum > 0.0) {
        return None;
    }
    Some(Attachment { query, weights: w.into_iter().map(|(i, x)| (i, x / sum)).collect() })
}

/// Attaches `query` to the single Gaussian whose projected center is
/// nearest; `None` when no center projects in front of the camera.
pub fn attach_nearest(cam: &PinholeCamera, cloud: &GaussianCloud, query: [f64; 2]) -> Option<Attachment> {
    let mut best: Option<(usize, f64)> = None;
    for (i, g) in cloud.gaussians.iter().enumerate() {
        let Ok(p) = cam.project(&g.mu) else { continue };
        let d = (p.u - query[0]).powi(2) + (p.v - query[1]).powi(2);
        if best.map_or(true, |b| d < b.1) {
            best = Some((i, d));
        }
    }
    best.map(|(i, _)| Attachment { query, weights: vec![(i, 1.0)] })
}

/// Position and camera depth of an attached query at one frame: the query
/// moved by the weighted mean screen displacement of its Gaussians since
/// frame 1. Gaussians that fall behind the camera are left out.
pub fn follow(
    att: &Attachment,
    cam1: &PinholeCamera,
    cloud1: &GaussianCloud,
    cam: &PinholeCamera,
    cloud: &GaussianCloud,
) -> Option<([f64; 2], f64)> {
    let (mut du, mut dv, mut z, mut wsum) = (0.0, 0.0, 0.0, 0.0);
    for &(i, w) in &att.weights {
        let (Ok(p1), Ok(pt)) = (cam1.project(&cloud1.gaussians[i].mu), cam.project(&cloud.gaussians[i].mu)) else {
            continue;
        };
        du += w * (pt.u - p1.u);
        dv += w * (pt.v - p1.v);
        z += w * pt.z;
        wsum += w;
    }
    if wsum <= 0.0 {
        return None;
    }
    Some(([att.query[0] + du / wsum, att.query[1] + dv / wsum], z / wsum))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectedTracks {
    pub tracks: TrackSet,
    /// Indices of queries no Gaussian covers at frame 1. They follow the
    /// Gaussian with the nearest projected center instead.
    pub unassigned: Vec<usize>,
}

/// Tracks of `queries` (frame-1 pixels) through the per-frame clouds of a
/// fitted object, attached at the first cloud. Track ids are query indices.
pub fn project_gaussian_tracks(
    clouds: &[GaussianCloud],
    cameras: &[PinholeCamera],
    queries: &[[f64; 2]],
) -> Result<ProjectedTracks> {
    let first = clouds.first().ok_or_else(|| Error::InvalidInput("no frames to track".into()))?;
    project_tracks_from(first, clouds, cameras, queries)
}

/// Like [`project_gaussian_tracks`] but attaches the queries to `reference`
/// (a cloud with the same ids, e.g. the undeformed canonical cloud placed at
/// frame 1) seen by the first camera; tracks follow the per-frame clouds.
pub fn project_tracks_from(
    reference: &GaussianCloud,
    clouds: &[GaussianCloud],
    cameras: &[PinholeCamera],
    queries: &[[f64; 2]],
) -> Result<ProjectedTracks> {
    let frames = clouds.len();
    if frames == 0 || cameras.len() != frames {
        return Err(Error::DimensionMismatch(format!("{frames} clouds, {} cameras", cameras.len())));
    }
    for c in clouds {
        reference.check_compatible(c)?;
    }
    let mut points = Vec::with_capacity(queries.len() * frames);
    let mut unassigned = Vec::new();
    for (q, query) in queries.iter().enumerate() {
        let att = match attach_query(&cameras[0], reference, *query) {
            Some(a) => a,
            None => {
                unassigned.push(q);
                match attach_nearest(&cameras[0], reference, *query) {
                    Some(a) => a,
                    None => Attachment { query: *query, weights: Vec::new() },
                }
            }
        };
        let mut last = *query;
        for t in 0..frames {
            let pos = follow(&att, &cameras[0], reference, &cameras[t], &clouds[t]).map_or(last, |x| x.0);
            last = pos;
            points.push(TrackPoint { track_id: q as u32, frame: t + 1, u: pos[0], v: pos[1], visible: true });
        }
    }
    Ok(ProjectedTracks { tracks: TrackSet::new(frames, points)?, unassigned })
}

/// EPE aggregates over all `(track, frame)` points; "occluded" points have
/// ground-truth visibility 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpeReport {
    pub mean_epe: f64,
    pub median_epe: f64,
    pub mean_epe_visible: f64,
    pub mean_epe_occluded: f64,
    pub count: usize,
    pub visible_count: usize,
    pub occluded_count: usize,
}

impl EpeReport {
    pub fn table(&self) -> String {
        format!(
            "{:<12} {:>10} {:>8}\n{:<12} {:>10.4} {:>8}\n{:<12} {:>10.4} {:>8}\n{:<12} {:>10.4} {:>8}\n{:<12} {:>10.4} {:>8}\n",
            "metric", "px", "points",
            "mean", self.mean_epe, self.count,
            "median", self.median_epe, self.count,
            "visible", self.mean_epe_visible, self.visible_count,
            "occluded", self.mean_epe_occluded, self.occluded_count,
        )
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn compute_epe(pred: &TrackSet, gt: &TrackSet) -> Result<EpeReport> {
    if pred.points.len() != gt.points.len() {
        return Err(Error::InvalidInput(format!(
            "track id mismatch: {} predicted points, {} ground-truth points",
            pred.points.len(),
            gt.points.len()
        )));
    }
    let (mut all, mut vis, mut occ) = (Vec::new(), Vec::new(), Vec::new());
    for (p, g) in pred.points.iter().zip(&gt.points) {
        if p.track_id != g.track_id || p.frame != g.frame {
            return Err(Error::InvalidInput(format!("track id mismatch at track {} frame {}", g.track_id, g.frame)));
        }
        let e = (p.u - g.u).hypot(p.v - g.v);
        all.push(e);
        if g.visible {
            vis.push(e);
        } else {
            occ.push(e);
        }
    }
    if all.is_empty() {
        return Err(Error::InvalidInput("no track points to evaluate".into()));
    }
    let mut sorted = all.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let median = if n % 2 == 1 { sorted[n / 2] } else { 0.5 * (sorted[n / 2 - 1] + sorted[n / 2]) };
    Ok(EpeReport {
        mean_epe: mean(&all),
        median_epe: median,
        mean_epe_visible: mean(&vis),
        mean_epe_occluded: mean(&occ),
        count: n,
        visible_count: vis.len(),
        occluded_count: occ.len(),
    })
}

pub const PSNR_CAP: f64 = 99.0;

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Mean SSIM over channels and all fully covered 11×11 Gaussian windows
/// (σ = 1.5, K1 = 0.01, K2 = 0.03, data range 1).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    if a.width < SSIM_WINDOW || a.height < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!("SSIM needs images of at least {SSIM_WINDOW}×{SSIM_WINDOW}")));
    }
    let k = ssim_kernel();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (ow, oh) = (a.width - SSIM_WINDOW + 1, a.height - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for c in 0..a.channels {
        for y in 0..oh {
            for x in 0..ow {
                let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for j in 0..SSIM_WINDOW {
                    for i in 0..SSIM_WINDOW {
                        let w = k[i] * k[j];
                        let va = a.get(x + i, y + j, c);
                        let vb = b.get(x + i, y + j, c);
                        ma += w * va;
                        mb += w * vb;
                        saa += w * va * va;
                        sbb += w * vb * vb;
                        sab += w * va * vb;
                    }
                }
                let (va, vb, cov) = (saa - ma * ma, sbb - mb * mb, sab - ma * mb);
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            }
        }
    }
    Ok(total / (ow * oh * a.channels) as f64)
}
