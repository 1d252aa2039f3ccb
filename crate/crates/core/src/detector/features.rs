//! Fixed (non-trainable) feature extraction feeding the linear heads.
//!
//! Cell descriptors are multi-scale box and strip means of every channel,
//! computed from per-channel integral images. Contour descriptors are
//! bilinear samples placed in the local frame of a contour point.

use serde::{Deserialize, Serialize};

use crate::geometry::{BBox, Point};
use crate::scene::SceneImage;

/// Localization grid stride, in image cells.
pub const LOC_STRIDE: usize = 4;
/// Half-extents `(x, y)` of the rectangle means around a grid-cell
/// center: nested squares, then horizontal and vertical bands. Ink mass in
/// nested windows gives linear access to instance extent.
pub const LOC_RECTS: [(usize, usize); 13] = [
    (2, 2),
    (4, 4),
    (7, 7),
    (10, 10),
    (14, 14),
    (8, 2),
    (14, 2),
    (14, 6),
    (20, 4),
    (2, 8),
    (2, 14),
    (6, 14),
    (4, 20),
];

/// Tangential sample offsets (fraction of edge length) for the
/// extreme-point regressor.
pub const INIT_ALONG: [f64; 9] = [-0.5, -0.375, -0.25, -0.125, 0.0, 0.125, 0.25, 0.375, 0.5];
/// Inward sample depths (fraction of the perpendicular box extent).
pub const INIT_DEPTH: [f64; 2] = [0.04, 0.15];

/// Normal sample offsets (fraction of box diagonal) for the deformation
/// head, outward positive.
pub const DEFORM_NORMAL: [f64; 7] = [-0.24, -0.16, -0.08, 0.0, 0.08, 0.16, 0.24];
/// Circular neighbourhood of the deformation head.
pub const DEFORM_WINDOW: usize = 9;

#[inline]
pub fn loc_dim(f: usize) -> usize {
    1 + LOC_RECTS.len() * f
}

#[inline]
pub fn init_dim(f: usize) -> usize {
    1 + INIT_ALONG.len() * INIT_DEPTH.len() * f
}

/// Per-point descriptor length before neighbourhood aggregation.
#[inline]
pub fn point_dim(f: usize) -> usize {
    1 + DEFORM_NORMAL.len() * f
}

/// Deformation input: own descriptor plus the window mean.
#[inline]
pub fn deform_dim(f: usize) -> usize {
    2 * point_dim(f)
}

/// Fixed per-channel affine map `(v - shift) / scale` applied to every
/// channel block of every descriptor. Keeps the linear heads well
/// conditioned under plain gradient descent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputNorm {
    pub shift: Vec<f64>,
    pub scale: Vec<f64>,
}

impl InputNorm {
    pub fn identity(f: usize) -> Self {
        Self {
            shift: vec![0.0; f],
            scale: vec![1.0; f],
        }
    }

    /// Per-channel mean and standard deviation over all cells of `images`.
    pub fn fit<'a>(f: usize, images: impl IntoIterator<Item = &'a SceneImage>) -> Self {
        let mut sum = vec![0.0f64; f];
        let mut sq = vec![0.0f64; f];
        let mut n = 0usize;
        for img in images {
            for cell in img.data.chunks_exact(f) {
                for (c, &v) in cell.iter().enumerate() {
                    sum[c] += v as f64;
                    sq[c] += (v as f64) * (v as f64);
                }
                n += 1;
            }
        }
        if n == 0 {
            return Self::identity(f);
        }
        let shift: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        let scale = sq
            .iter()
            .zip(&shift)
            .map(|(q, m)| (q / n as f64 - m * m).max(0.0).sqrt().max(1e-3))
            .collect();
        Self { shift, scale }
    }

    pub fn dim(&self) -> usize {
        self.shift.len()
    }

    pub fn is_valid(&self) -> bool {
        self.shift.len() == self.scale.len()
            && self.shift.iter().all(|v| v.is_finite())
            && self.scale.iter().all(|v| v.is_finite() && *v > 0.0)
    }

    /// Normalizes consecutive channel blocks of `v` in place.
    #[inline]
    pub fn apply(&self, v: &mut [f64]) {
        for block in v.chunks_exact_mut(self.shift.len()) {
            for ((x, m), s) in block.iter_mut().zip(&self.shift).zip(&self.scale) {
                *x = (*x - m) / s;
            }
        }
    }
}

/// Number of localization grid cells covering `n` image cells.
#[inline]
pub fn grid_len(n: usize) -> usize {
    n.div_ceil(LOC_STRIDE)
}

/// Image-space center of grid cell `g` along one axis.
#[inline]
pub fn grid_center(g: usize) -> f64 {
    (g * LOC_STRIDE) as f64 + LOC_STRIDE as f64 / 2.0
}

/// Row-major `height x width x loc_dim` descriptor map over the
/// localization grid.
pub struct CellFeatures {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl CellFeatures {
    pub fn compute(img: &SceneImage, norm: &InputNorm) -> Self {
        let (w, h, f) = (img.width, img.height, img.feature_dim);
        let stride = w + 1;
        let mut integral = vec![0.0f64; (w + 1) * (h + 1) * f];
        for y in 0..h {
            let mut row = vec![0.0f64; f];
            for x in 0..w {
                let cell = img.cell(x, y);
                let above = (y * stride + x + 1) * f;
                let here = ((y + 1) * stride + x + 1) * f;
                for c in 0..f {
                    row[c] += cell[c] as f64;
                    integral[here + c] = integral[above + c] + row[c];
                }
            }
        }
        // mean over cells [x0, x1) x [y0, y1), clipped to the image
        let rect_mean = |cx: usize, cy: usize, hx: usize, hy: usize, out: &mut [f64]| {
            let (x0, x1) = (cx.saturating_sub(hx), (cx + hx).min(w));
            let (y0, y1) = (cy.saturating_sub(hy), (cy + hy).min(h));
            let n = ((x1 - x0) * (y1 - y0)) as f64;
            let a = (y0 * stride + x0) * f;
            let b = (y0 * stride + x1) * f;
            let c = (y1 * stride + x0) * f;
            let d = (y1 * stride + x1) * f;
            for k in 0..f {
                out[k] = (integral[d + k] - integral[b + k] - integral[c + k] + integral[a + k]) / n;
            }
        };
        let (gw, gh) = (grid_len(w), grid_len(h));
        let dim = loc_dim(f);
        let half = LOC_STRIDE / 2;
        let mut data = vec![0.0; gw * gh * dim];
        for gy in 0..gh {
            for gx in 0..gw {
                let (cx, cy) = (gx * LOC_STRIDE + half, gy * LOC_STRIDE + half);
                let o = (gy * gw + gx) * dim;
                let d = &mut data[o..o + dim];
                d[0] = 1.0;
                let mut k = 1;
                for &(hx, hy) in &LOC_RECTS {
                    rect_mean(cx, cy, hx, hy, &mut d[k..k + f]);
                    k += f;
                }
                norm.apply(&mut d[1..]);
            }
        }
        Self {
            width: gw,
            height: gh,
            dim,
            data,
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.width + x) * self.dim;
        &self.data[o..o + self.dim]
    }
}

/// Local frame of one box side: midpoint, unit tangent (walking direction
/// of the canonical orientation), inward unit normal, and the lengths that
/// normalize tangential / normal offsets.
#[derive(Debug, Clone, Copy)]
pub struct SideFrame {
    pub anchor: Point,
    pub tangent: Point,
    pub inward: Point,
    pub along_len: f64,
    pub across_len: f64,
}

/// Frames for the top, right, bottom and left sides.
pub fn side_frames(b: &BBox) -> [SideFrame; 4] {
    let mids = crate::geometry::box_midpoints(b);
    let (w, h) = (b.width(), b.height());
    let mk = |anchor, tx, ty, nx, ny, along_len, across_len| SideFrame {
        anchor,
        tangent: Point::new(tx, ty),
        inward: Point::new(nx, ny),
        along_len,
        across_len,
    };
    [
        mk(mids[0], 1.0, 0.0, 0.0, 1.0, w, h),
        mk(mids[1], 0.0, 1.0, -1.0, 0.0, h, w),
        mk(mids[2], -1.0, 0.0, 0.0, -1.0, w, h),
        mk(mids[3], 0.0, -1.0, 1.0, 0.0, h, w),
    ]
}

/// Extreme-point regressor input for one side.
pub fn init_features(img: &SceneImage, norm: &InputNorm, frame: &SideFrame, out: &mut [f64]) {
    let f = img.feature_dim;
    out[0] = 1.0;
    let mut k = 1;
    for &depth in &INIT_DEPTH {
        for &along in &INIT_ALONG {
            let p = frame.anchor + frame.tangent * (along * frame.along_len) + frame.inward * (depth * frame.across_len);
            img.sample_bilinear(p, &mut out[k..k + f]);
            k += f;
        }
    }
    norm.apply(&mut out[1..]);
}

/// Unit tangent and outward normal at each contour point.
pub fn contour_frames(points: &[Point]) -> Vec<(Point, Point)> {
    let n = points.len();
    (0..n)
        .map(|i| {
            let d = points[(i + 1) % n] - points[(i + n - 1) % n];
            let len = d.norm();
            let t = if len > 0.0 { d * (1.0 / len) } else { Point::new(1.0, 0.0) };
            (t, Point::new(t.y, -t.x))
        })
        .collect()
}

/// Deformation inputs for every contour point: `[own, window mean]`.
pub fn deform_features(
    img: &SceneImage,
    norm: &InputNorm,
    points: &[Point],
    frames: &[(Point, Point)],
    scale: f64,
) -> Vec<Vec<f64>> {
    let f = img.feature_dim;
    let pd = point_dim(f);
    let n = points.len();
    let own: Vec<Vec<f64>> = points
        .iter()
        .zip(frames)
        .map(|(&p, &(_, normal))| {
            let mut g = vec![0.0; pd];
            g[0] = 1.0;
            for (j, &off) in DEFORM_NORMAL.iter().enumerate() {
                img.sample_bilinear(p + normal * (off * scale), &mut g[1 + j * f..1 + (j + 1) * f]);
            }
            norm.apply(&mut g[1..]);
            g
        })
        .collect();
    let half = DEFORM_WINDOW / 2;
    let inv = 1.0 / DEFORM_WINDOW as f64;
    (0..n)
        .map(|i| {
            let mut x = vec![0.0; 2 * pd];
            x[..pd].copy_from_slice(&own[i]);
            for k in 0..DEFORM_WINDOW {
                let j = (i + n + k - half) % n;
                for (acc, v) in x[pd..].iter_mut().zip(&own[j]) {
                    *acc += v * inv;
                }
            }
            x
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn direct_mean(img: &SceneImage, c: usize, x0: i64, x1: i64, y0: i64, y1: i64) -> f64 {
        let (mut s, mut n) = (0.0, 0.0);
        for y in y0.max(0)..y1.min(img.height as i64) {
            for x in x0.max(0)..x1.min(img.width as i64) {
                s += img.cell(x as usize, y as usize)[c] as f64;
                n += 1.0;
            }
        }
        s / n
    }

    #[test]
    fn cell_features_match_direct_means() {
        let mut img = SceneImage::zeros(22, 18, 2);
        for y in 0..18 {
            for x in 0..22 {
                let c = img.cell_mut(x, y);
                c[0] = (x * 3 + y) as f32 * 0.1;
                c[1] = ((x * y) % 5) as f32;
            }
        }
        let feats = CellFeatures::compute(&img, &InputNorm::identity(2));
        assert_eq!((feats.width, feats.height), (6, 5));
        assert_eq!(feats.dim, loc_dim(2));
        // includes clipped corner cells and the partial last column/row
        for (gx, gy) in [(2, 1), (0, 0), (5, 4), (3, 2)] {
            let d = feats.at(gx, gy);
            assert_eq!(d[0], 1.0);
            let (cx, cy) = ((4 * gx + 2) as i64, (4 * gy + 2) as i64);
            for (k, &(hx, hy)) in LOC_RECTS.iter().enumerate() {
                let (hx, hy) = (hx as i64, hy as i64);
                for c in 0..2 {
                    let want = direct_mean(&img, c, cx - hx, cx + hx, cy - hy, cy + hy);
                    assert!((d[1 + 2 * k + c] - want).abs() < 1e-9, "cell ({gx},{gy}) rect {k} channel {c}");
                }
            }
        }

        let norm = InputNorm {
            shift: vec![1.0, -2.0],
            scale: vec![2.0, 4.0],
        };
        let normed = CellFeatures::compute(&img, &norm);
        let (a, b) = (feats.at(2, 1), normed.at(2, 1));
        assert_eq!(b[0], 1.0);
        assert!((b[3] - (a[3] - 1.0) / 2.0).abs() < 1e-12);
        assert!((b[4] - (a[4] + 2.0) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn fitted_norm_standardizes_cells() {
        let mut img = SceneImage::zeros(4, 4, 1);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = i as f32;
        }
        let n = InputNorm::fit(1, [&img]);
        assert!((n.shift[0] - 7.5).abs() < 1e-12);
        let var: f64 = (0..16).map(|i| (i as f64 - 7.5).powi(2)).sum::<f64>() / 16.0;
        assert!((n.scale[0] - var.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn frames_of_ccw_square_point_outward() {
        let pts = vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(2.0, 0.0),
            Point::new(2.0, 2.0),
            Point::new(0.0, 2.0),
        ];
        let fr = contour_frames(&pts);
        // middle of the top edge: outward is up (negative y)
        assert!((fr[1].1.y + 1.0).abs() < 1e-12);
    }
}
