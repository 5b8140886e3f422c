//! Dense float images, boolean masks and flow fields.

use crate::error::{Error, Result};

/// Row-major `height × width × channels` float image.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Self {
        Self::filled(width, height, channels, 0.0)
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Self { width, height, channels, data: vec![value; width * height * channels] }
    }

    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut img = Self::new(width, height, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(x, y, c);
                }
            }
        }
        img
    }

    pub fn pixels(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::DimensionMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.width, self.height, self.channels, other.width, other.height, other.channels
            )))
        }
    }

    /// Bilinear sample at continuous pixel coordinates (pixel centers at
    /// `i + 0.5`), clamped at the borders.
    pub fn sample_bilinear(&self, x: f64, y: f64, out: &mut [f64]) {
        let gx = (x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let gy = (y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = (gx.floor() as usize).min(self.width.saturating_sub(2));
        let y0 = (gy.floor() as usize).min(self.height.saturating_sub(2));
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let (fx, fy) = (gx - x0 as f64, gy - y0 as f64);
        for c in 0..self.channels {
            let a = self.get(x0, y0, c) * (1.0 - fx) + self.get(x1, y0, c) * fx;
            let b = self.get(x0, y1, c) * (1.0 - fx) + self.get(x1, y1, c) * fx;
            out[c] = a * (1.0 - fy) + b * fy;
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image { data: self.data.iter().map(|&v| f(v)).collect(), ..self.clone() }
    }
}

/// Boolean per-pixel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, value: bool) -> Self {
        Self { width, height, data: vec![value; width * height] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn and(&self, other: &Mask) -> Mask {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect();
        Mask { data, ..self.clone() }
    }

    pub fn or(&self, other: &Mask) -> Mask {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| *a || *b).collect();
        Mask { data, ..self.clone() }
    }

    pub fn from_threshold(img: &Image, channel: usize, threshold: f64) -> Mask {
        let data = (0..img.pixels()).map(|i| img.data[i * img.channels + channel] >= threshold).collect();
        Mask { width: img.width, height: img.height, data }
    }

    /// Tight pixel bounding box of the set pixels.
    pub fn bbox(&self) -> Option<PixelRect> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x + 1);
                    y1 = y1.max(y + 1);
                }
            }
        }
        (x0 != usize::MAX).then(|| PixelRect::new(x0 as f64, y0 as f64, x1 as f64, y1 as f64))
    }
}

/// Sub-pixel box of the region where a one-channel `alpha` image reaches
/// `threshold`: on each side, the crossing of the row/column maxima with
/// `threshold`, linearly interpolated between pixel centers.
pub fn subpixel_bbox(alpha: &Image, threshold: f64) -> Option<PixelRect> {
    let cols: Vec<f64> =
        (0..alpha.width).map(|x| (0..alpha.height).map(|y| alpha.get(x, y, 0)).fold(f64::MIN, f64::max)).collect();
    let rows: Vec<f64> =
        (0..alpha.height).map(|y| (0..alpha.width).map(|x| alpha.get(x, y, 0)).fold(f64::MIN, f64::max)).collect();
    let (x0, x1) = crossing_span(&cols, threshold)?;
    let (y0, y1) = crossing_span(&rows, threshold)?;
    Some(PixelRect::new(x0, y0, x1, y1))
}

fn crossing_span(profile: &[f64], thr: f64) -> Option<(f64, f64)> {
    let first = profile.iter().position(|&v| v >= thr)?;
    let last = profile.iter().rposition(|&v| v >= thr)?;
    let lerp = |inside: usize, outside: usize| {
        let (a, b) = (profile[outside], profile[inside]);
        let f = if b > a { (thr - a) / (b - a) } else { 1.0 };
        outside as f64 + 0.5 + f * (inside as f64 - outside as f64)
    };
    let lo = if first == 0 { 0.0 } else { lerp(first, first - 1) };
    let hi = if last + 1 == profile.len() { profile.len() as f64 } else { lerp(last, last + 1) };
    Some((lo, hi))
}

/// Axis-aligned pixel rectangle `[x0, x1) × [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PixelRect {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl PixelRect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self { x0, y0, x1, y1 }
    }

    pub fn centered(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        Self::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h)
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x0 + self.x1), 0.5 * (self.y0 + self.y1))
    }

    /// Square of side `max(w, h)` sharing the center.
    pub fn squared(&self) -> Self {
        let (cx, cy) = self.center();
        let s = self.width().max(self.height());
        Self::centered(cx, cy, s, s)
    }
}

/// Two-channel flow image with a per-pixel validity flag.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub flow: Image,
    pub valid: Mask,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self { flow: Image::new(width, height, 2), valid: Mask::new(width, height, true) }
    }

    pub fn width(&self) -> usize {
        self.flow.width
    }

    pub fn height(&self) -> usize {
        self.flow.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 2] {
        [self.flow.get(x, y, 0), self.flow.get(x, y, 1)]
    }
}

#[cfg(test)]
mod tests {
    #[test]
    fn subpixel_box_interpolates_edges() {
        // ramp 0, 0.25, 0.75, 1, 1, 0.75, 0.25, 0 along x, constant along y
        let ramp = [0.0, 0.25, 0.75, 1.0, 1.0, 0.75, 0.25, 0.0];
        let img = Image::from_fn(8, 3, 1, |x, _, _| ramp[x]);
        let b = subpixel_bbox(&img, 0.5).unwrap();
        assert!((b.x0 - 2.0).abs() < 1e-12 && (b.x1 - 6.0).abs() < 1e-12);
        assert_eq!((b.y0, b.y1), (0.0, 3.0));
        assert!(subpixel_bbox(&Image::new(4, 4, 1), 0.5).is_none());
    }

    use super::*;

    #[test]
    fn bilinear_sampling_at_centers_and_midpoints() {
        let img = Image::from_fn(4, 3, 1, |x, y, _| (x + 10 * y) as f64);
        let mut out = [0.0];
        img.sample_bilinear(1.5, 1.5, &mut out);
        assert_eq!(out[0], 11.0);
        img.sample_bilinear(2.0, 1.5, &mut out);
        assert!((out[0] - 11.5).abs() < 1e-12);
        img.sample_bilinear(1.5, 2.0, &mut out);
        assert!((out[0] - 16.0).abs() < 1e-12);
    }

    #[test]
    fn mask_bbox() {
        let mut m = Mask::new(8, 8, false);
        m.data[2 * 8 + 3] = true;
        m.data[5 * 8 + 6] = true;
        assert_eq!(m.bbox(), Some(PixelRect::new(3.0, 2.0, 7.0, 6.0)));
        assert_eq!(Mask::new(4, 4, false).bbox(), None);
    }
}
