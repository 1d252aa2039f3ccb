//! Planar polygon and box primitives.
//!
//! Coordinates are in scene units with `y` growing downwards, as in image
//! space. "Counter-clockwise" means positive shoelace area, so a polygon
//! stored here walks top edge left-to-right, then down the right side.

use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Number of contour points used by the deformation stage.
pub const CONTOUR_POINTS: usize = 128;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("polygon needs at least 3 distinct vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon has zero signed area")]
    ZeroArea,
    #[error("polygon is self-intersecting")]
    SelfIntersecting,
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("degenerate box (zero width or height)")]
    DegenerateBox,
    #[error("invalid box: min corner exceeds max corner")]
    InvalidBox,
    #[error("extreme point lies outside its box")]
    ExtremeOutsideBox,
    #[error("contour needs at least 3 points, got {0}")]
    TooFewSamples(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point<T = f64> {
    pub x: T,
    pub y: T,
}

impl<T: Scalar> Point<T> {
    #[inline]
    pub fn new(x: T, y: T) -> Self {
        Self { x, y }
    }

    #[inline]
    pub fn dot(self, o: Self) -> T {
        self.x * o.x + self.y * o.y
    }

    #[inline]
    pub fn cross(self, o: Self) -> T {
        self.x * o.y - self.y * o.x
    }

    #[inline]
    pub fn norm(self) -> T {
        self.x.hypot(self.y)
    }

    #[inline]
    pub fn dist(self, o: Self) -> T {
        (self - o).norm()
    }

    #[inline]
    pub fn lerp(self, o: Self, t: T) -> Self {
        self + (o - self) * t
    }

    #[inline]
    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl<T: Scalar> Add for Point<T> {
    type Output = Self;
    #[inline]
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y)
    }
}

impl<T: Scalar> Sub for Point<T> {
    type Output = Self;
    #[inline]
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y)
    }
}

impl<T: Scalar> Mul<T> for Point<T> {
    type Output = Self;
    #[inline]
    fn mul(self, s: T) -> Self {
        Self::new(self.x * s, self.y * s)
    }
}

/// Axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox<T = f64> {
    pub x_min: T,
    pub y_min: T,
    pub x_max: T,
    pub y_max: T,
}

impl<T: Scalar> BBox<T> {
    pub fn new(x_min: T, y_min: T, x_max: T, y_max: T) -> Result<Self, GeometryError> {
        if !(x_min.is_finite() && y_min.is_finite() && x_max.is_finite() && y_max.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        if x_min > x_max || y_min > y_max {
            return Err(GeometryError::InvalidBox);
        }
        Ok(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    /// Box from a center and full width/height.
    pub fn from_center(cx: T, cy: T, w: T, h: T) -> Result<Self, GeometryError> {
        let two = T::lit(2.0);
        Self::new(cx - w / two, cy - h / two, cx + w / two, cy + h / two)
    }

    #[inline]
    pub fn width(&self) -> T {
        self.x_max - self.x_min
    }

    #[inline]
    pub fn height(&self) -> T {
        self.y_max - self.y_min
    }

    #[inline]
    pub fn area(&self) -> T {
        self.width() * self.height()
    }

    #[inline]
    pub fn center(&self) -> Point<T> {
        let two = T::lit(2.0);
        Point::new((self.x_min + self.x_max) / two, (self.y_min + self.y_max) / two)
    }

    #[inline]
    pub fn diagonal(&self) -> T {
        self.width().hypot(self.height())
    }

    pub fn is_degenerate(&self) -> bool {
        self.width() <= T::zero() || self.height() <= T::zero()
    }

    pub fn contains_point(&self, p: Point<T>, tol: T) -> bool {
        p.x >= self.x_min - tol
            && p.x <= self.x_max + tol
            && p.y >= self.y_min - tol
            && p.y <= self.y_max + tol
    }

    pub fn contains_box(&self, o: &Self) -> bool {
        o.x_min >= self.x_min && o.y_min >= self.y_min && o.x_max <= self.x_max && o.y_max <= self.y_max
    }

    /// Strict containment on all four sides.
    pub fn strictly_contains_box(&self, o: &Self) -> bool {
        o.x_min > self.x_min && o.y_min > self.y_min && o.x_max < self.x_max && o.y_max < self.y_max
    }

    pub fn union(&self, o: &Self) -> Self {
        Self {
            x_min: self.x_min.min(o.x_min),
            y_min: self.y_min.min(o.y_min),
            x_max: self.x_max.max(o.x_max),
            y_max: self.y_max.max(o.y_max),
        }
    }

    /// Intersection with another box, `None` when they do not overlap.
    pub fn intersect(&self, o: &Self) -> Option<Self> {
        let x_min = self.x_min.max(o.x_min);
        let y_min = self.y_min.max(o.y_min);
        let x_max = self.x_max.min(o.x_max);
        let y_max = self.y_max.min(o.y_max);
        (x_min <= x_max && y_min <= y_max).then_some(Self {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn clamp_point(&self, p: Point<T>) -> Point<T> {
        Point::new(p.x.max(self.x_min).min(self.x_max), p.y.max(self.y_min).min(self.y_max))
    }

    /// Box with the same center and both extents scaled by `factor`.
    pub fn scaled(&self, factor: T) -> Self {
        let c = self.center();
        let two = T::lit(2.0);
        let hw = self.width() * factor / two;
        let hh = self.height() * factor / two;
        Self {
            x_min: c.x - hw,
            y_min: c.y - hh,
            x_max: c.x + hw,
            y_max: c.y + hh,
        }
    }
}

/// Simple polygon, implicitly closed, stored counter-clockwise.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Polygon<T = f64> {
    vertices: Vec<Point<T>>,
}

impl<T: Scalar> Polygon<T> {
    /// Validates and canonicalizes a vertex list.
    ///
    /// Consecutive duplicates (including last == first) are dropped and
    /// clockwise input is reversed. Self-intersecting rings are rejected.
    pub fn new(vertices: Vec<Point<T>>) -> Result<Self, GeometryError> {
        if vertices.iter().any(|p| !p.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let mut pts: Vec<Point<T>> = Vec::with_capacity(vertices.len());
        for p in vertices {
            if pts.last() != Some(&p) {
                pts.push(p);
            }
        }
        while pts.len() > 1 && pts.first() == pts.last() {
            pts.pop();
        }
        if pts.len() < 3 {
            return Err(GeometryError::TooFewVertices(pts.len()));
        }
        let area = signed_area(&pts);
        let scale = coord_scale(&pts);
        if area.abs() <= T::geom_eps() * scale * scale {
            return Err(GeometryError::ZeroArea);
        }
        if area < T::zero() {
            pts.reverse();
        }
        if !ring_is_simple(&pts) {
            return Err(GeometryError::SelfIntersecting);
        }
        Ok(Self { vertices: pts })
    }

    pub fn from_xy(coords: &[(T, T)]) -> Result<Self, GeometryError> {
        Self::new(coords.iter().map(|&(x, y)| Point::new(x, y)).collect())
    }

    #[inline]
    pub fn vertices(&self) -> &[Point<T>] {
        &self.vertices
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    /// Area (always positive, orientation is canonical).
    pub fn area(&self) -> T {
        signed_area(&self.vertices)
    }

    pub fn perimeter(&self) -> T {
        self.edges().fold(T::zero(), |acc, (a, b)| acc + a.dist(b))
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point<T>, Point<T>)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn bbox(&self) -> BBox<T> {
        bbox_of_polygon(self)
    }

    /// Even-odd containment test; boundary points count as inside.
    pub fn contains_point(&self, p: Point<T>) -> bool {
        let eps = T::geom_eps() * coord_scale(&self.vertices);
        match classify_point(p, &self.vertices, eps) {
            PointClass::Outside => false,
            _ => true,
        }
    }

    /// Applies `p -> p * s + t`; `s` must be positive.
    pub fn affine(&self, s: T, t: Point<T>) -> Result<Self, GeometryError> {
        Self::new(self.vertices.iter().map(|&p| p * s + t).collect())
    }
}

impl<'de, T: Scalar + Deserialize<'de>> Deserialize<'de> for Polygon<T> {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw<T> {
            vertices: Vec<Point<T>>,
        }
        let raw = Raw::<T>::deserialize(d)?;
        Polygon::new(raw.vertices).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtremePoints<T = f64> {
    pub top: Point<T>,
    pub left: Point<T>,
    pub bottom: Point<T>,
    pub right: Point<T>,
}

/// Ordered contour samples with uniform arc-length spacing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contour<T = f64> {
    pub points: Vec<Point<T>>,
}

impl<T: Scalar> Contour<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Closed polyline length.
    pub fn perimeter(&self) -> T {
        let n = self.points.len();
        (0..n).fold(T::zero(), |acc, i| acc + self.points[i].dist(self.points[(i + 1) % n]))
    }

    pub fn to_polygon(&self) -> Result<Polygon<T>, GeometryError> {
        Polygon::new(self.points.clone())
    }
}

pub(crate) fn signed_area<T: Scalar>(pts: &[Point<T>]) -> T {
    let n = pts.len();
    let mut acc = T::zero();
    for i in 0..n {
        acc += pts[i].cross(pts[(i + 1) % n]);
    }
    acc / T::lit(2.0)
}

fn coord_scale<T: Scalar>(pts: &[Point<T>]) -> T {
    pts.iter()
        .fold(T::one(), |m, p| m.max(p.x.abs()).max(p.y.abs()))
}

#[inline]
fn orient<T: Scalar>(a: Point<T>, b: Point<T>, c: Point<T>) -> T {
    (b - a).cross(c - a)
}

#[inline]
fn on_segment<T: Scalar>(a: Point<T>, b: Point<T>, p: Point<T>) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed-segment intersection test (touching counts).
fn segments_touch<T: Scalar>(p1: Point<T>, p2: Point<T>, p3: Point<T>, p4: Point<T>) -> bool {
    let d1 = orient(p3, p4, p1);
    let d2 = orient(p3, p4, p2);
    let d3 = orient(p1, p2, p3);
    let d4 = orient(p1, p2, p4);
    let z = T::zero();
    if ((d1 > z && d2 < z) || (d1 < z && d2 > z)) && ((d3 > z && d4 < z) || (d3 < z && d4 > z)) {
        return true;
    }
    (d1 == z && on_segment(p3, p4, p1))
        || (d2 == z && on_segment(p3, p4, p2))
        || (d3 == z && on_segment(p1, p2, p3))
        || (d4 == z && on_segment(p1, p2, p4))
}

fn ring_is_simple<T: Scalar>(pts: &[Point<T>]) -> bool {
    let n = pts.len();
    // adjacent edges may only share their common vertex
    for i in 0..n {
        let a = pts[i];
        let b = pts[(i + 1) % n];
        let c = pts[(i + 2) % n];
        if orient(a, b, c) == T::zero() && (b - a).dot(c - b) < T::zero() {
            return false;
        }
    }
    if n == 3 {
        return true;
    }
    for i in 0..n {
        let (a, b) = (pts[i], pts[(i + 1) % n]);
        let (lo_x, hi_x) = (a.x.min(b.x), a.x.max(b.x));
        let (lo_y, hi_y) = (a.y.min(b.y), a.y.max(b.y));
        for j in (i + 2)..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            let (c, d) = (pts[j], pts[(j + 1) % n]);
            if c.x.max(d.x) < lo_x || c.x.min(d.x) > hi_x || c.y.max(d.y) < lo_y || c.y.min(d.y) > hi_y {
                continue;
            }
            if segments_touch(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

/// Smallest axis-aligned box containing every vertex.
pub fn bbox_of_polygon<T: Scalar>(poly: &Polygon<T>) -> BBox<T> {
    let v = poly.vertices();
    let mut b = BBox {
        x_min: v[0].x,
        y_min: v[0].y,
        x_max: v[0].x,
        y_max: v[0].y,
    };
    for p in &v[1..] {
        b.x_min = b.x_min.min(p.x);
        b.y_min = b.y_min.min(p.y);
        b.x_max = b.x_max.max(p.x);
        b.y_max = b.y_max.max(p.y);
    }
    b
}

/// Index of the top, left, bottom and right extreme vertices.
///
/// Ties go to the smallest vertex index in canonical (CCW) order.
pub fn extreme_indices<T: Scalar>(poly: &Polygon<T>) -> [usize; 4] {
    let v = poly.vertices();
    let (mut top, mut left, mut bottom, mut right) = (0, 0, 0, 0);
    for (i, p) in v.iter().enumerate().skip(1) {
        if p.y < v[top].y {
            top = i;
        }
        if p.x < v[left].x {
            left = i;
        }
        if p.y > v[bottom].y {
            bottom = i;
        }
        if p.x > v[right].x {
            right = i;
        }
    }
    [top, left, bottom, right]
}

pub fn extreme_points<T: Scalar>(poly: &Polygon<T>) -> ExtremePoints<T> {
    let [t, l, b, r] = extreme_indices(poly);
    let v = poly.vertices();
    ExtremePoints {
        top: v[t],
        left: v[l],
        bottom: v[b],
        right: v[r],
    }
}

/// The four box-edge midpoints in top, right, bottom, left order.
pub fn box_midpoints<T: Scalar>(b: &BBox<T>) -> [Point<T>; 4] {
    let c = b.center();
    [
        Point::new(c.x, b.y_min),
        Point::new(b.x_max, c.y),
        Point::new(c.x, b.y_max),
        Point::new(b.x_min, c.y),
    ]
}

/// Quadrilateral through the four edge midpoints of `b`.
pub fn diamond_from_box<T: Scalar>(b: &BBox<T>) -> Result<Polygon<T>, GeometryError> {
    if b.is_degenerate() {
        return Err(GeometryError::DegenerateBox);
    }
    Polygon::new(box_midpoints(b).to_vec())
}

/// Octagon built from a segment of a quarter edge length centered on each
/// extreme point, parallel to the matching box edge and clipped to the box.
pub fn octagon_from_extremes<T: Scalar>(
    ex: &ExtremePoints<T>,
    b: &BBox<T>,
) -> Result<Polygon<T>, GeometryError> {
    if b.is_degenerate() {
        return Err(GeometryError::DegenerateBox);
    }
    let tol = T::geom_eps() * coord_scale(&[ex.top, ex.left, ex.bottom, ex.right]);
    for p in [ex.top, ex.left, ex.bottom, ex.right] {
        if !b.contains_point(p, tol) {
            return Err(GeometryError::ExtremeOutsideBox);
        }
    }
    let eighth = T::lit(0.125);
    let hw = b.width() * eighth;
    let hh = b.height() * eighth;
    let cx = |x: T| x.max(b.x_min).min(b.x_max);
    let cy = |y: T| y.max(b.y_min).min(b.y_max);
    let (t, r, bo, l) = (ex.top, ex.right, ex.bottom, ex.left);
    Polygon::new(vec![
        Point::new(cx(t.x - hw), t.y),
        Point::new(cx(t.x + hw), t.y),
        Point::new(r.x, cy(r.y - hh)),
        Point::new(r.x, cy(r.y + hh)),
        Point::new(cx(bo.x + hw), bo.y),
        Point::new(cx(bo.x - hw), bo.y),
        Point::new(l.x, cy(l.y + hh)),
        Point::new(l.x, cy(l.y - hh)),
    ])
}

/// `n` points at uniform arc-length spacing, starting at the top extreme
/// vertex and walking in canonical orientation.
pub fn resample_contour<T: Scalar>(poly: &Polygon<T>, n: usize) -> Result<Contour<T>, GeometryError> {
    if n < 3 {
        return Err(GeometryError::TooFewSamples(n));
    }
    let v = poly.vertices();
    let m = v.len();
    let start = extreme_indices(poly)[0];
    let ring: Vec<Point<T>> = (0..=m).map(|k| v[(start + k) % m]).collect();
    let seg_len: Vec<T> = ring.windows(2).map(|w| w[0].dist(w[1])).collect();
    let total = seg_len.iter().fold(T::zero(), |a, &b| a + b);
    let step = total / T::from_usize(n).unwrap();

    let mut out = Vec::with_capacity(n);
    let mut edge = 0;
    let mut edge_start = T::zero();
    for k in 0..n {
        let s = step * T::from_usize(k).unwrap();
        while edge + 1 < m && edge_start + seg_len[edge] <= s {
            edge_start += seg_len[edge];
            edge += 1;
        }
        let t = if seg_len[edge] > T::zero() {
            ((s - edge_start) / seg_len[edge]).min(T::one()).max(T::zero())
        } else {
            T::zero()
        };
        out.push(ring[edge].lerp(ring[edge + 1], t));
    }
    Ok(Contour { points: out })
}

/// Width scaled by `1 + fx`, height by `1 + fy`, center fixed.
pub fn expand_box<T: Scalar>(b: &BBox<T>, fx: T, fy: T) -> BBox<T> {
    let two = T::lit(2.0);
    let dx = b.width() * fx / two;
    let dy = b.height() * fy / two;
    BBox {
        x_min: b.x_min - dx,
        y_min: b.y_min - dy,
        x_max: b.x_max + dx,
        y_max: b.y_max + dy,
    }
}

pub fn box_iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let inter = a.intersect(b).map(|i| i.area()).unwrap_or_else(T::zero);
    let union = a.area() + b.area() - inter;
    if union <= T::zero() || inter <= T::zero() {
        return T::zero();
    }
    (inter / union).min(T::one())
}

enum PointClass<T> {
    Inside,
    Outside,
    /// On the boundary; carries the direction of the edge it lies on.
    Boundary(Point<T>),
}

fn point_segment_dist<T: Scalar>(p: Point<T>, a: Point<T>, b: Point<T>) -> T {
    let d = b - a;
    let len2 = d.dot(d);
    let t = if len2 > T::zero() {
        ((p - a).dot(d) / len2).max(T::zero()).min(T::one())
    } else {
        T::zero()
    };
    p.dist(a + d * t)
}

fn classify_point<T: Scalar>(p: Point<T>, ring: &[Point<T>], eps: T) -> PointClass<T> {
    let n = ring.len();
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + 1) % n]);
        if point_segment_dist(p, a, b) <= eps {
            return PointClass::Boundary(b - a);
        }
    }
    let mut inside = false;
    for i in 0..n {
        let (a, b) = (ring[i], ring[(i + 1) % n]);
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
    }
    if inside {
        PointClass::Inside
    } else {
        PointClass::Outside
    }
}

/// Twice the area contributed by the part of `src`'s boundary lying inside
/// `other` (boundary-integral form of the clipped region's area).
fn clipped_boundary_term<T: Scalar>(src: &[Point<T>], other: &[Point<T>], keep_shared: bool, eps: T) -> T {
    let n = src.len();
    let m = other.len();
    let mut acc = T::zero();
    let mut cuts: Vec<T> = Vec::new();
    for i in 0..n {
        let (p, q) = (src[i], src[(i + 1) % n]);
        let d = q - p;
        let len = d.norm();
        cuts.clear();
        cuts.push(T::zero());
        cuts.push(T::one());
        for j in 0..m {
            let (r, s) = (other[j], other[(j + 1) % m]);
            let e = s - r;
            let denom = d.cross(e);
            let elen = e.norm();
            if denom.abs() > eps * len.max(elen) {
                let t = (r - p).cross(e) / denom;
                let u = (r - p).cross(d) / denom;
                let tol_t = eps / len;
                let tol_u = eps / elen;
                if t > -tol_t && t < T::one() + tol_t && u > -tol_u && u < T::one() + tol_u {
                    cuts.push(t.max(T::zero()).min(T::one()));
                }
            } else if (r - p).cross(d).abs() <= eps * len {
                let len2 = len * len;
                for w in [r, s] {
                    let t = (w - p).dot(d) / len2;
                    if t > T::zero() && t < T::one() {
                        cuts.push(t);
                    }
                }
            }
        }
        cuts.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let half = T::lit(0.5);
        for w in cuts.windows(2) {
            if (w[1] - w[0]) * len <= eps {
                continue;
            }
            let a = p + d * w[0];
            let b = p + d * w[1];
            let mid = p + d * ((w[0] + w[1]) * half);
            match classify_point(mid, other, eps) {
                PointClass::Inside => acc += a.cross(b),
                PointClass::Boundary(dir) => {
                    if keep_shared && dir.dot(d) > T::zero() {
                        acc += a.cross(b);
                    }
                }
                PointClass::Outside => {}
            }
        }
    }
    acc
}

/// Area of the intersection of two simple polygons.
pub fn intersection_area<T: Scalar>(a: &Polygon<T>, b: &Polygon<T>) -> T {
    let (ba, bb) = (a.bbox(), b.bbox());
    if ba.intersect(&bb).is_none() {
        return T::zero();
    }
    let scale = coord_scale(a.vertices()).max(coord_scale(b.vertices()));
    let eps = T::geom_eps() * scale;
    let twice = clipped_boundary_term(a.vertices(), b.vertices(), true, eps)
        + clipped_boundary_term(b.vertices(), a.vertices(), false, eps);
    (twice / T::lit(2.0)).max(T::zero())
}

/// Intersection over union of two polygons by exact clipping.
pub fn polygon_iou<T: Scalar>(a: &Polygon<T>, b: &Polygon<T>) -> T {
    let inter = intersection_area(a, b);
    if inter <= T::zero() {
        return T::zero();
    }
    let union = a.area() + b.area() - inter;
    (inter / union).max(T::zero()).min(T::one())
}
