//! Synthetic scenes: smooth closed shapes on a feature grid, plus the JSON
//! dataset format and strong/weak splitting.

use std::f64::consts::PI;
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{BBox, GeometryError, Point, Polygon};
use crate::seeds::sub_seed;
use crate::weak_labels::{self, WeakKind, WeakLabel};

pub const DEFAULT_FEATURE_DIM: usize = 8;
pub const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

/// Strong label: one instance outline.
pub type PolygonAnnotation = Polygon;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("could not place instance {index} after {attempts} attempts")]
    PlacementFailed { index: usize, attempts: usize },
    #[error("invalid synthesis parameters: {0}")]
    InvalidParams(String),
    #[error("geometry: {0}")]
    Geometry(#[from] GeometryError),
    #[error("dataset format: {0}")]
    Format(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Dense `height x width x feature_dim` grid, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneImage {
    pub width: usize,
    pub height: usize,
    pub feature_dim: usize,
    pub data: Vec<f32>,
}

impl SceneImage {
    pub fn zeros(width: usize, height: usize, feature_dim: usize) -> Self {
        Self {
            width,
            height,
            feature_dim,
            data: vec![0.0; width * height * feature_dim],
        }
    }

    #[inline]
    pub fn cell(&self, x: usize, y: usize) -> &[f32] {
        let o = (y * self.width + x) * self.feature_dim;
        &self.data[o..o + self.feature_dim]
    }

    #[inline]
    pub fn cell_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let o = (y * self.width + x) * self.feature_dim;
        &mut self.data[o..o + self.feature_dim]
    }

    /// Bilinear sample at a continuous position. Cell `(x, y)` has its
    /// center at `(x + 0.5, y + 0.5)`; positions outside the grid clamp to
    /// the border. Writes `feature_dim` values into `out`.
    pub fn sample_bilinear(&self, p: Point, out: &mut [f64]) {
        let fx = (p.x - 0.5).clamp(0.0, (self.width - 1) as f64);
        let fy = (p.y - 0.5).clamp(0.0, (self.height - 1) as f64);
        let x0 = fx.floor() as usize;
        let y0 = fy.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = fx - x0 as f64;
        let ty = fy - y0 as f64;
        let (a, b, c, d) = (self.cell(x0, y0), self.cell(x1, y0), self.cell(x0, y1), self.cell(x1, y1));
        for k in 0..self.feature_dim {
            let top = a[k] as f64 * (1.0 - tx) + b[k] as f64 * tx;
            let bot = c[k] as f64 * (1.0 - tx) + d[k] as f64 * tx;
            out[k] = top * (1.0 - ty) + bot * ty;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn bounds(&self) -> BBox {
        BBox {
            x_min: 0.0,
            y_min: 0.0,
            x_max: self.width as f64,
            y_max: self.height as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub image: SceneImage,
    pub strong: Option<Vec<PolygonAnnotation>>,
    pub weak: Option<WeakLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub width: usize,
    pub height: usize,
    pub feature_dim: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Longest instance extent, in cells.
    pub size_range: (f64, f64),
    /// Ribbon bend, as total turning angle in radians.
    pub curvature_range: (f64, f64),
    pub ribbon_probability: f64,
    /// Ink-like clutter blobs that are not instances.
    pub max_distractors: usize,
    pub noise_std: f64,
    /// Minimum gap between instance boxes, in cells.
    pub margin: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            feature_dim: DEFAULT_FEATURE_DIM,
            min_instances: 1,
            max_instances: 4,
            size_range: (12.0, 28.0),
            curvature_range: (0.0, 1.6),
            ribbon_probability: 0.5,
            max_distractors: 2,
            noise_std: 0.3,
            margin: 2.0,
        }
    }
}

impl SynthParams {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::InvalidParams(m.to_owned()));
        if self.width < 8 || self.height < 8 {
            return bad("scene must be at least 8x8 cells");
        }
        if self.feature_dim < 2 {
            return bad("feature_dim must be at least 2");
        }
        if self.min_instances > self.max_instances {
            return bad("min_instances exceeds max_instances");
        }
        let (lo, hi) = self.size_range;
        if !(lo >= 4.0 && lo <= hi && hi < self.width.min(self.height) as f64 - 2.0) {
            return bad("size_range must satisfy 4 <= lo <= hi < short side - 2");
        }
        let (c0, c1) = self.curvature_range;
        if !(c0 >= 0.0 && c0 <= c1 && c1 <= 2.5) {
            return bad("curvature_range must satisfy 0 <= lo <= hi <= 2.5");
        }
        if !(0.0..=1.0).contains(&self.ribbon_probability) {
            return bad("ribbon_probability must lie in [0, 1]");
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0 && self.margin >= 0.0) {
            return bad("noise_std and margin must be non-negative");
        }
        Ok(())
    }
}

/// Perturbed ellipse with 24 vertices, star-shaped about its center.
fn ellipse_shape(rng: &mut impl Rng, center: Point, extent: f64) -> Vec<Point> {
    let a = extent / 2.0;
    let b = a * rng.gen_range(0.35..0.8);
    let rot = rng.gen_range(0.0..PI);
    let (e2, p2) = (rng.gen_range(0.0..0.08), rng.gen_range(0.0..2.0 * PI));
    let (e3, p3) = (rng.gen_range(0.0..0.06), rng.gen_range(0.0..2.0 * PI));
    let (s, c) = rot.sin_cos();
    (0..24)
        .map(|k| {
            let t = 2.0 * PI * k as f64 / 24.0;
            let r = 1.0 + e2 * (2.0 * t + p2).sin() + e3 * (3.0 * t + p3).sin();
            let (x, y) = (a * r * t.cos(), b * r * t.sin());
            Point::new(center.x + c * x - s * y, center.y + s * x + c * y)
        })
        .collect()
}

/// Thick circular-arc band: 8 samples along each side of the centerline.
fn ribbon_shape(rng: &mut impl Rng, center: Point, extent: f64, bend: f64) -> Vec<Point> {
    let len = extent;
    let thick = len * rng.gen_range(0.22..0.34);
    let bend = if rng.gen_bool(0.5) { bend } else { -bend };
    let rot: f64 = rng.gen_range(-0.6..0.6);
    let (s, c) = rot.sin_cos();
    const M: usize = 8;
    let mut upper = Vec::with_capacity(M);
    let mut lower = Vec::with_capacity(M);
    for k in 0..M {
        let u = k as f64 / (M - 1) as f64 - 0.5;
        let (px, py, nx, ny) = if bend.abs() < 1e-6 {
            (u * len, 0.0, 0.0, 1.0)
        } else {
            // arc of radius len/bend through the origin, tangent to +x
            let rad = len / bend;
            let th = u * bend;
            (rad * th.sin(), rad * (1.0 - th.cos()), -th.sin(), th.cos())
        };
        upper.push((px - nx * thick / 2.0, py - ny * thick / 2.0));
        lower.push((px + nx * thick / 2.0, py + ny * thick / 2.0));
    }
    let mut pts: Vec<(f64, f64)> = upper;
    pts.extend(lower.into_iter().rev());
    let cx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
    let cy = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
    pts.into_iter()
        .map(|(x, y)| {
            let (x, y) = (x - cx, y - cy);
            Point::new(center.x + c * x - s * y, center.y + s * x + c * y)
        })
        .collect()
}

/// Fraction of cell `(x, y)` covered by `poly`, from 4x4 supersampling.
fn coverage(poly: &Polygon, x: usize, y: usize) -> f64 {
    let mut hit = 0;
    for i in 0..4 {
        for j in 0..4 {
            let p = Point::new(x as f64 + (i as f64 + 0.5) / 4.0, y as f64 + (j as f64 + 0.5) / 4.0);
            if poly.contains_point(p) {
                hit += 1;
            }
        }
    }
    hit as f64 / 16.0
}

fn cell_range(b: &BBox, w: usize, h: usize) -> (usize, usize, usize, usize) {
    let x0 = b.x_min.floor().max(0.0) as usize;
    let y0 = b.y_min.floor().max(0.0) as usize;
    let x1 = (b.x_max.ceil().max(0.0) as usize).min(w);
    let y1 = (b.y_max.ceil().max(0.0) as usize).min(h);
    (x0, y0, x1, y1)
}

/// Per-cell coverage of the union of `polys`.
fn rasterize(polys: &[Polygon], w: usize, h: usize) -> Vec<f64> {
    let mut out = vec![0.0; w * h];
    for poly in polys {
        let (x0, y0, x1, y1) = cell_range(&poly.bbox(), w, h);
        for y in y0..y1 {
            for x in x0..x1 {
                out[y * w + x] = f64::max(out[y * w + x], coverage(poly, x, y));
            }
        }
    }
    out
}

/// Generates one scene with its polygon ground truth.
pub fn synth_scene(rng_seed: u64, params: &SynthParams) -> Result<ImageRecord, SceneError> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (w, h) = (params.width, params.height);
    let (wf, hf) = (w as f64, h as f64);
    let k = rng.gen_range(params.min_instances..=params.max_instances);

    let mut polys: Vec<Polygon> = Vec::with_capacity(k);
    let mut taken: Vec<BBox> = Vec::new();
    for index in 0..k {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let extent = rng.gen_range(params.size_range.0..=params.size_range.1);
            let center = Point::new(rng.gen_range(1.0..wf - 1.0), rng.gen_range(1.0..hf - 1.0));
            let pts = if rng.gen_bool(params.ribbon_probability) {
                let bend = rng.gen_range(params.curvature_range.0..=params.curvature_range.1);
                ribbon_shape(&mut rng, center, extent, bend)
            } else {
                ellipse_shape(&mut rng, center, extent)
            };
            let Ok(poly) = Polygon::new(pts) else { continue };
            let b = poly.bbox();
            if b.x_min < 1.0 || b.y_min < 1.0 || b.x_max > wf - 1.0 || b.y_max > hf - 1.0 {
                continue;
            }
            let grown = BBox {
                x_min: b.x_min - params.margin,
                y_min: b.y_min - params.margin,
                x_max: b.x_max + params.margin,
                y_max: b.y_max + params.margin,
            };
            if taken.iter().any(|t| t.intersect(&grown).is_some()) {
                continue;
            }
            taken.push(b);
            polys.push(poly);
            placed = true;
            break;
        }
        if !placed {
            return Err(SceneError::PlacementFailed {
                index,
                attempts: MAX_PLACEMENT_ATTEMPTS,
            });
        }
    }

    // clutter: small round blobs away from instances
    let n_distractors = rng.gen_range(0..=params.max_distractors);
    let mut distractors: Vec<Polygon> = Vec::new();
    for _ in 0..n_distractors {
        for _ in 0..50 {
            let r = rng.gen_range(1.5..3.5);
            let c = Point::new(rng.gen_range(r + 1.0..wf - r - 1.0), rng.gen_range(r + 1.0..hf - r - 1.0));
            let pts = (0..12)
                .map(|i| {
                    let t = 2.0 * PI * i as f64 / 12.0;
                    Point::new(c.x + r * t.cos(), c.y + r * t.sin())
                })
                .collect();
            let blob = Polygon::new(pts)?;
            let b = blob.bbox();
            if taken.iter().any(|t| t.intersect(&b).is_some()) {
                continue;
            }
            taken.push(b);
            distractors.push(blob);
            break;
        }
    }

    let ink = rasterize(&polys, w, h);
    let clutter = rasterize(&distractors, w, h);

    let f = params.feature_dim;
    let noise = Normal::new(0.0, params.noise_std.max(1e-12)).unwrap();
    // low-frequency nuisance fields, one per extra channel
    let fields: Vec<(f64, f64, f64, f64)> = (0..f)
        .map(|_| {
            (
                rng.gen_range(0.05..0.2),
                rng.gen_range(0.05..0.2),
                rng.gen_range(0.0..2.0 * PI),
                rng.gen_range(0.1..0.35),
            )
        })
        .collect();
    let mut image = SceneImage::zeros(w, h, f);
    for y in 0..h {
        for x in 0..w {
            let (c, d) = (ink[y * w + x], clutter[y * w + x]);
            let cell = image.cell_mut(x, y);
            for (ch, v) in cell.iter_mut().enumerate() {
                let n = if params.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
                let value = match ch {
                    0 => c + 0.9 * d,
                    1 => 0.6 * c - 0.5 * d,
                    _ => {
                        let (fx, fy, ph, amp) = fields[ch];
                        0.35 * c / (ch - 1) as f64 + amp * (fx * x as f64 + fy * y as f64 + ph).sin()
                    }
                };
                *v = (value + n) as f32;
            }
        }
    }

    Ok(ImageRecord {
        id: format!("scene-{rng_seed:016x}"),
        image,
        strong: Some(polys),
        weak: None,
    })
}

/// `n` scenes from seeds derived from `seed`.
pub fn synth_dataset(n: usize, seed: u64, params: &SynthParams) -> Result<Vec<ImageRecord>, SceneError> {
    (0..n)
        .map(|i| {
            let mut r = synth_scene(sub_seed(seed, i as u64), params)?;
            r.id = format!("img-{i:05}");
            Ok(r)
        })
        .collect()
}

/// Training split: strong records keep polygons, weak records carry only a
/// weak label of one kind. The weak records' polygons are kept aside for
/// pseudo-label diagnostics.
#[derive(Debug, Clone)]
pub struct SplitDataset {
    pub strong: Vec<ImageRecord>,
    pub weak: Vec<ImageRecord>,
    pub weak_truth: Vec<Vec<Polygon>>,
}

/// Random partition into `round(strong_fraction * n)` strong records and
/// weak records labelled with `weak_kind`. Input order is preserved within
/// each part.
pub fn split_dataset(
    records: &[ImageRecord],
    strong_fraction: f64,
    rng_seed: u64,
    weak_kind: WeakKind,
) -> Result<SplitDataset, SceneError> {
    if !(0.0..=1.0).contains(&strong_fraction) {
        return Err(SceneError::InvalidParams(format!(
            "strong_fraction must lie in [0, 1], got {strong_fraction}"
        )));
    }
    let n = records.len();
    let n_strong = ((strong_fraction * n as f64).round() as usize).min(n);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(rng_seed));
    let mut is_strong = vec![false; n];
    for &i in &idx[..n_strong] {
        is_strong[i] = true;
    }
    let mut out = SplitDataset {
        strong: Vec::with_capacity(n_strong),
        weak: Vec::with_capacity(n - n_strong),
        weak_truth: Vec::with_capacity(n - n_strong),
    };
    for (i, rec) in records.iter().enumerate() {
        let polys = rec
            .strong
            .clone()
            .ok_or_else(|| SceneError::Format(format!("record {} has no strong labels", rec.id)))?;
        if is_strong[i] {
            out.strong.push(ImageRecord {
                weak: None,
                ..rec.clone()
            });
        } else {
            let weak = weak_labels::generate(
                weak_kind,
                &polys,
                rec.image.width as f64,
                rec.image.height as f64,
                sub_seed(rng_seed, i as u64 + 1),
            );
            out.weak.push(ImageRecord {
                id: rec.id.clone(),
                image: rec.image.clone(),
                strong: None,
                weak: Some(weak),
            });
            out.weak_truth.push(polys);
        }
    }
    Ok(out)
}

// ---- dataset file -------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct WeakDoc {
    kind: WeakKind,
    boxes: Vec<[f64; 4]>,
    has_text: bool,
}

#[derive(Serialize, Deserialize)]
struct RecordDoc {
    id: String,
    width: usize,
    height: usize,
    features: Vec<f32>,
    strong: Option<Vec<Vec<[f64; 2]>>>,
    weak: Option<WeakDoc>,
}

#[derive(Serialize, Deserialize)]
struct DatasetDoc {
    feature_dim: usize,
    records: Vec<RecordDoc>,
}

fn to_doc(r: &ImageRecord) -> RecordDoc {
    RecordDoc {
        id: r.id.clone(),
        width: r.image.width,
        height: r.image.height,
        features: r.image.data.clone(),
        strong: r.strong.as_ref().map(|ps| {
            ps.iter()
                .map(|p| p.vertices().iter().map(|v| [v.x, v.y]).collect())
                .collect()
        }),
        weak: r.weak.as_ref().map(|w| WeakDoc {
            kind: w.kind,
            boxes: w.boxes.iter().map(|b| [b.x_min, b.y_min, b.x_max, b.y_max]).collect(),
            has_text: w.has_text,
        }),
    }
}

fn from_doc(d: RecordDoc, feature_dim: usize) -> Result<ImageRecord, SceneError> {
    if d.features.len() != d.width * d.height * feature_dim {
        return Err(SceneError::Format(format!(
            "record {}: expected {} feature values, found {}",
            d.id,
            d.width * d.height * feature_dim,
            d.features.len()
        )));
    }
    let strong = d
        .strong
        .map(|ps| {
            ps.into_iter()
                .map(|p| Polygon::new(p.into_iter().map(|[x, y]| Point::new(x, y)).collect()))
                .collect::<Result<Vec<_>, _>>()
        })
        .transpose()?;
    let weak = d
        .weak
        .map(|w| {
            let boxes = w
                .boxes
                .into_iter()
                .map(|[a, b, c, e]| BBox::new(a, b, c, e))
                .collect::<Result<Vec<_>, _>>()?;
            Ok::<_, GeometryError>(WeakLabel {
                kind: w.kind,
                boxes,
                has_text: w.has_text,
            })
        })
        .transpose()?;
    Ok(ImageRecord {
        id: d.id,
        image: SceneImage {
            width: d.width,
            height: d.height,
            feature_dim,
            data: d.features,
        },
        strong,
        weak,
    })
}

/// Writes the dataset JSON document.
pub fn write_dataset<W: Write>(out: W, feature_dim: usize, records: &[ImageRecord]) -> Result<(), SceneError> {
    for r in records {
        if r.image.feature_dim != feature_dim {
            return Err(SceneError::Format(format!(
                "record {} has feature_dim {}, dataset declares {feature_dim}",
                r.id, r.image.feature_dim
            )));
        }
    }
    let doc = DatasetDoc {
        feature_dim,
        records: records.iter().map(to_doc).collect(),
    };
    serde_json::to_writer(out, &doc)?;
    Ok(())
}

/// Reads a dataset document; returns `(feature_dim, records)`.
pub fn read_dataset<R: Read>(input: R) -> Result<(usize, Vec<ImageRecord>), SceneError> {
    let doc: DatasetDoc = serde_json::from_reader(input)?;
    let f = doc.feature_dim;
    let records = doc
        .records
        .into_iter()
        .map(|d| from_doc(d, f))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((f, records))
}
