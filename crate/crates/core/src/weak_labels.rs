//! Weak supervision derived from polygon ground truth: tight, loose and
//! coarse boxes plus the image-level tag.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{bbox_of_polygon, expand_box, BBox, Point, Polygon};
use crate::scalar::Scalar;

/// Mean-shift bandwidth as a fraction of the image's short side.
pub const COARSE_RADIUS_FRACTION: f64 = 0.3;
/// Loose boxes grow each axis by a factor drawn from this range.
pub const LOOSE_EXPANSION: (f64, f64) = (0.1, 0.2);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeakKind {
    Tight,
    Loose,
    Coarse,
    Tag,
}

impl WeakKind {
    pub const ALL: [WeakKind; 4] = [WeakKind::Tight, WeakKind::Loose, WeakKind::Coarse, WeakKind::Tag];

    pub fn as_str(self) -> &'static str {
        match self {
            WeakKind::Tight => "tight",
            WeakKind::Loose => "loose",
            WeakKind::Coarse => "coarse",
            WeakKind::Tag => "tag",
        }
    }
}

impl fmt::Display for WeakKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown weak label kind `{0}` (expected tight, loose, coarse or tag)")]
pub struct ParseKindError(pub String);

impl FromStr for WeakKind {
    type Err = ParseKindError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "tight" => Ok(WeakKind::Tight),
            "loose" => Ok(WeakKind::Loose),
            "coarse" => Ok(WeakKind::Coarse),
            "tag" => Ok(WeakKind::Tag),
            _ => Err(ParseKindError(s.to_owned())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeakLabel<T = f64> {
    pub kind: WeakKind,
    pub boxes: Vec<BBox<T>>,
    pub has_text: bool,
}

impl<T: Scalar> WeakLabel<T> {
    pub fn tag(has_text: bool) -> Self {
        Self {
            kind: WeakKind::Tag,
            boxes: Vec::new(),
            has_text,
        }
    }
}

/// Per-image annotation time, in seconds, for each label form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AnnotationCost<T = f64> {
    pub polygon: T,
    pub tight: T,
    pub loose: T,
    pub coarse: T,
    pub tag: T,
}

impl<T: Scalar> Default for AnnotationCost<T> {
    /// Tight/loose/coarse/tag are the measured per-image times. The polygon
    /// cost is 43,200 s / 710 images, the strong-only allocation of a
    /// twelve-hour budget.
    fn default() -> Self {
        Self {
            polygon: T::lit(60.8),
            tight: T::lit(39.0),
            loose: T::lit(28.0),
            coarse: T::lit(15.0),
            tag: T::lit(2.0),
        }
    }
}

impl<T: Scalar> AnnotationCost<T> {
    pub fn is_valid(&self) -> bool {
        [self.polygon, self.tight, self.loose, self.coarse, self.tag]
            .iter()
            .all(|&c| c.is_finite() && c > T::zero())
    }

    pub fn weak(&self, kind: WeakKind) -> T {
        match kind {
            WeakKind::Tight => self.tight,
            WeakKind::Loose => self.loose,
            WeakKind::Coarse => self.coarse,
            WeakKind::Tag => self.tag,
        }
    }
}

pub fn gen_tight<T: Scalar>(polys: &[Polygon<T>]) -> WeakLabel<T> {
    WeakLabel {
        kind: WeakKind::Tight,
        boxes: polys.iter().map(bbox_of_polygon).collect(),
        has_text: !polys.is_empty(),
    }
}

/// Tight boxes grown by independent per-axis factors in [0.1, 0.2].
pub fn gen_loose<T: Scalar>(polys: &[Polygon<T>], rng_seed: u64) -> WeakLabel<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (lo, hi) = LOOSE_EXPANSION;
    let boxes = polys
        .iter()
        .map(|p| {
            let fx = T::lit(rng.gen_range(lo..=hi));
            let fy = T::lit(rng.gen_range(lo..=hi));
            expand_box(&bbox_of_polygon(p), fx, fy)
        })
        .collect();
    WeakLabel {
        kind: WeakKind::Loose,
        boxes,
        has_text: !polys.is_empty(),
    }
}

/// Flat-kernel mean shift. Returns a cluster index per input point, indices
/// numbered in order of first appearance.
pub fn mean_shift<T: Scalar>(points: &[Point<T>], radius: T) -> Vec<usize> {
    const MAX_ITER: usize = 100;
    let tol = radius * T::lit(1e-4);
    let r2 = radius * radius;
    let modes: Vec<Point<T>> = points
        .iter()
        .map(|&start| {
            let mut m = start;
            for _ in 0..MAX_ITER {
                let (mut sx, mut sy, mut cnt) = (T::zero(), T::zero(), 0usize);
                for p in points {
                    let d = *p - m;
                    if d.dot(d) <= r2 {
                        sx += p.x;
                        sy += p.y;
                        cnt += 1;
                    }
                }
                if cnt == 0 {
                    break;
                }
                let c = T::from_usize(cnt).unwrap();
                let next = Point::new(sx / c, sy / c);
                let shift = next.dist(m);
                m = next;
                if shift < tol {
                    break;
                }
            }
            m
        })
        .collect();

    let merge = radius / T::lit(2.0);
    let mut centers: Vec<Point<T>> = Vec::new();
    modes
        .iter()
        .map(|&m| match centers.iter().position(|c| c.dist(m) < merge) {
            Some(k) => k,
            None => {
                centers.push(m);
                centers.len() - 1
            }
        })
        .collect()
}

/// One box per mean-shift cluster of instance centers, covering the tight
/// boxes of its members.
pub fn gen_coarse<T: Scalar>(polys: &[Polygon<T>], image_w: T, image_h: T) -> WeakLabel<T> {
    let tight: Vec<BBox<T>> = polys.iter().map(bbox_of_polygon).collect();
    let centers: Vec<Point<T>> = tight.iter().map(BBox::center).collect();
    let radius = T::lit(COARSE_RADIUS_FRACTION) * image_w.min(image_h);
    let assign = mean_shift(&centers, radius);
    let n_clusters = assign.iter().map(|&a| a + 1).max().unwrap_or(0);
    let mut boxes: Vec<Option<BBox<T>>> = vec![None; n_clusters];
    for (b, &k) in tight.iter().zip(&assign) {
        boxes[k] = Some(match boxes[k] {
            Some(acc) => acc.union(b),
            None => *b,
        });
    }
    WeakLabel {
        kind: WeakKind::Coarse,
        boxes: boxes.into_iter().flatten().collect(),
        has_text: !polys.is_empty(),
    }
}

pub fn gen_tag<T: Scalar>(polys: &[Polygon<T>]) -> WeakLabel<T> {
    WeakLabel::tag(!polys.is_empty())
}

/// Dispatches to the generator for `kind`.
pub fn generate<T: Scalar>(kind: WeakKind, polys: &[Polygon<T>], image_w: T, image_h: T, rng_seed: u64) -> WeakLabel<T> {
    match kind {
        WeakKind::Tight => gen_tight(polys),
        WeakKind::Loose => gen_loose(polys, rng_seed),
        WeakKind::Coarse => gen_coarse(polys, image_w, image_h),
        WeakKind::Tag => gen_tag(polys),
    }
}
