use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::features::{
    self, contour_frames, deform_features, init_features, side_frames, CellFeatures, SideFrame,
};
use super::features::{grid_center, LOC_STRIDE};
use super::{Candidate, DetectorError, DetectorState, BOX_ROWS, DEFORM_ITERATIONS, SIZE_UNIT};
use crate::geometry::{
    box_midpoints, expand_box, extreme_points, octagon_from_extremes, resample_contour, BBox, ExtremePoints,
    Point, Polygon, CONTOUR_POINTS,
};
use crate::scene::SceneImage;
use crate::seeds::sub_seed;

/// Transition point of the smooth-L1 loss, in normalized offset units.
pub const SMOOTH_L1_BETA: f64 = 0.05;
/// Exponent of the negative-cell penalty reduction in the focal loss.
pub const FOCAL_NEG_POWER: f64 = 4.0;
/// Per-iteration deformation offsets are clamped to this fraction of the
/// box diagonal (per component).
pub const DEFORM_CLAMP: f64 = 0.5;
/// Output contours stay inside the input box scaled by this factor.
pub const OUTPUT_EXTENT: f64 = 1.5;
/// Smallest regressed box side, in cells.
pub const MIN_BOX_SIDE: f64 = 2.0;
/// Inward extreme-point offsets are clamped to this fraction of the
/// perpendicular extent; tangential ones to half the edge.
const INIT_NORMAL_MAX: f64 = 0.45;
const INIT_TANGENT_MAX: f64 = 0.5;
/// Chebyshev radius (grid cells) of the box-regression region around a center.
const BOX_REGION: usize = 0;
/// Largest center offset decoded at a peak, in grid cells.
const MAX_OFFSET: f64 = BOX_REGION as f64 + 0.5;
/// Smallest heatmap Gaussian spread, in grid cells.
const MIN_SIGMA: f64 = 1.2;
/// Gaussian footprint below this value does not claim a cell.
const FOOTPRINT_MIN: f64 = 1e-3;
/// Range of the random training-box enlargement.
const AUG_RANGE: (f64, f64) = (0.0, 0.2);

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[inline]
fn dot(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

#[inline]
fn axpy(acc: &mut [f64], a: f64, x: &[f64]) {
    for (o, v) in acc.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline]
fn smooth_l1(r: f64) -> (f64, f64) {
    if r.abs() < SMOOTH_L1_BETA {
        (0.5 * r * r / SMOOTH_L1_BETA, r / SMOOTH_L1_BETA)
    } else {
        (r.abs() - 0.5 * SMOOTH_L1_BETA, r.signum())
    }
}

/// Penalty-reduced focal loss of one cell and its derivative w.r.t. the
/// logit. `target` is the splatted heatmap value; exactly 1 marks a center.
#[inline]
fn focal(z: f64, target: f64, gamma: f64) -> (f64, f64) {
    let p = sigmoid(z);
    if target >= 1.0 {
        let log_p = -softplus(-z);
        let q = (1.0 - p).powf(gamma);
        (-q * log_p, q * (gamma * p * log_p - (1.0 - p)))
    } else {
        let log_q = -softplus(z);
        let reduce = (1.0 - target).powf(FOCAL_NEG_POWER);
        let pg = p.powf(gamma);
        (-reduce * pg * log_q, reduce * pg * (p - gamma * (1.0 - p) * log_q))
    }
}

/// Expands a box by independent factors drawn from `[0, 0.2]`.
pub fn pretrain_loose_augmentation(b: &BBox, rng_seed: u64) -> BBox {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let fx = rng.gen_range(AUG_RANGE.0..=AUG_RANGE.1);
    let fy = rng.gen_range(AUG_RANGE.0..=AUG_RANGE.1);
    expand_box(b, fx, fy)
}

/// Shifts the centre by `rel` times the side and scales each side by
/// `exp(rel * n)`, with standard normal draws.
pub fn jitter_box(b: &BBox, rel: f64, rng_seed: u64) -> BBox {
    if rel <= 0.0 {
        return *b;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut n = || rng.sample::<f64, _>(StandardNormal) * rel;
    let c = b.center();
    let (w, h) = (b.width(), b.height());
    let (cx, cy) = (c.x + w * n(), c.y + h * n());
    let (w, h) = (w * n().exp(), h * n().exp());
    BBox::from_center(cx, cy, w, h).unwrap_or(*b)
}

/// Loss terms; `total = l_det + lambda1 * l_cin + lambda2 * l_cdn`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_det: f64,
    pub l_cin: f64,
    pub l_cdn: f64,
    pub total: f64,
    /// Per-iteration deformation terms (sum to `l_cdn`).
    pub l_cdn_iters: [f64; DEFORM_ITERATIONS],
}

impl LossBreakdown {
    fn add(&mut self, o: &Self) {
        self.l_det += o.l_det;
        self.l_cin += o.l_cin;
        self.l_cdn += o.l_cdn;
        self.total += o.total;
        for (a, b) in self.l_cdn_iters.iter_mut().zip(&o.l_cdn_iters) {
            *a += b;
        }
    }
}

/// Gradient, shaped like the state's weight blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub loc: Vec<f64>,
    pub box_reg: Vec<f64>,
    pub init_reg: Vec<f64>,
    pub deform: Vec<Vec<f64>>,
}

impl ParamGrad {
    fn zeros_like(s: &DetectorState) -> Self {
        Self {
            loc: vec![0.0; s.loc_weights.len()],
            box_reg: vec![0.0; s.box_reg_weights.len()],
            init_reg: vec![0.0; s.init_reg_weights.len()],
            deform: s.deform_weights.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    fn add(&mut self, o: &Self) {
        axpy(&mut self.loc, 1.0, &o.loc);
        axpy(&mut self.box_reg, 1.0, &o.box_reg);
        axpy(&mut self.init_reg, 1.0, &o.init_reg);
        for (a, b) in self.deform.iter_mut().zip(&o.deform) {
            axpy(a, 1.0, b);
        }
    }

    pub fn blocks(&self) -> Vec<(&'static str, &[f64])> {
        let mut v: Vec<(&'static str, &[f64])> =
            vec![("loc", &self.loc), ("box_reg", &self.box_reg), ("init_reg", &self.init_reg)];
        for (name, b) in ["deform_0", "deform_1", "deform_2"].into_iter().zip(&self.deform) {
            v.push((name, b));
        }
        v
    }

    pub fn is_zero(&self) -> bool {
        self.blocks().iter().all(|(_, b)| b.iter().all(|&v| v == 0.0))
    }
}

/// One training instance: box (localization and contour-stage input),
/// outline and confidence weight.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainInstance {
    pub bbox: BBox,
    pub polygon: Polygon,
    pub confidence: f64,
}

impl TrainInstance {
    /// Fully trusted instance boxed by its own outline.
    pub fn strong(polygon: Polygon) -> Self {
        Self {
            bbox: polygon.bbox(),
            polygon,
            confidence: 1.0,
        }
    }

    pub fn weighted(polygon: Polygon, confidence: f64) -> Self {
        Self {
            confidence,
            ..Self::strong(polygon)
        }
    }
}

impl From<&Candidate> for TrainInstance {
    fn from(c: &Candidate) -> Self {
        Self {
            bbox: c.bbox,
            polygon: c.polygon.clone(),
            confidence: c.score,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainRecord<'a> {
    pub image: &'a SceneImage,
    pub instances: Vec<TrainInstance>,
    /// Regions that may hold unlabelled instances: heatmap cells centered
    /// inside them and outside every instance footprint do not train as
    /// background.
    pub ignore: Vec<BBox>,
}

impl<'a> TrainRecord<'a> {
    pub fn new(image: &'a SceneImage, instances: Vec<TrainInstance>) -> Self {
        Self {
            image,
            instances,
            ignore: Vec::new(),
        }
    }
}

struct PreparedInstance {
    weight: f64,
    cin: Vec<(Vec<f64>, [f64; 2])>,
    /// Per active iteration: inputs and targets per contour point.
    deform: Vec<(Vec<Vec<f64>>, Vec<[f64; 2]>)>,
}

struct PreparedRecord {
    feats: CellFeatures,
    heat_target: Vec<f64>,
    heat_weight: Vec<f64>,
    /// `(grid cell, box targets, weight)`.
    sizes: Vec<(usize, [f64; BOX_ROWS], f64)>,
    norm: f64,
    instances: Vec<PreparedInstance>,
}

/// Training inputs with every state-dependent intermediate (contours fed
/// to each head) fixed. The objective is an exact function of the
/// weights given this batch; gradients do not flow between stages.
pub struct PreparedBatch {
    records: Vec<PreparedRecord>,
}

/// Intermediate contours of one box-conditioned forward pass.
struct ContourTrace {
    frames: [SideFrame; 4],
    init_inputs: Vec<Vec<f64>>,
    /// Contour fed to each iteration, then the final output.
    contours: Vec<Vec<Point>>,
    deform_inputs: Vec<Vec<Vec<f64>>>,
    octagon: Polygon,
}

fn row(w: &[f64], r: usize, dim: usize) -> &[f64] {
    &w[r * dim..(r + 1) * dim]
}

impl DetectorState {
    /// Localization logits for every cell.
    fn logits(&self, feats: &CellFeatures) -> Vec<f64> {
        feats.data.chunks_exact(feats.dim).map(|phi| dot(&self.loc_weights, phi)).collect()
    }

    /// Width, height (size units) and center offset (grid cells).
    fn box_at(&self, phi: &[f64]) -> [f64; BOX_ROWS] {
        let d = phi.len();
        std::array::from_fn(|r| dot(row(&self.box_reg_weights, r, d), phi))
    }

    fn contour_trace(&self, img: &SceneImage, b: &BBox, iterations: usize) -> Result<ContourTrace, DetectorError> {
        let f = self.config.feature_dim;
        let di = features::init_dim(f);
        let frames = side_frames(b);
        let mut init_inputs = Vec::with_capacity(4);
        let mut ex = [Point::default(); 4];
        for (k, fr) in frames.iter().enumerate() {
            let mut x = vec![0.0; di];
            init_features(img, &self.config.input_norm, fr, &mut x);
            let u0 = dot(row(&self.init_reg_weights, 0, di), &x).clamp(-INIT_TANGENT_MAX, INIT_TANGENT_MAX);
            let u1 = dot(row(&self.init_reg_weights, 1, di), &x).clamp(0.0, INIT_NORMAL_MAX);
            ex[k] = b.clamp_point(fr.anchor + fr.tangent * (u0 * fr.along_len) + fr.inward * (u1 * fr.across_len));
            init_inputs.push(x);
        }
        let extremes = ExtremePoints {
            top: ex[0],
            right: ex[1],
            bottom: ex[2],
            left: ex[3],
        };
        let octagon = match octagon_from_extremes(&extremes, b) {
            Ok(o) => o,
            Err(_) => {
                let [top, right, bottom, left] = box_midpoints(b);
                octagon_from_extremes(&ExtremePoints { top, left, bottom, right }, b)?
            }
        };
        let mut contours = vec![resample_contour(&octagon, CONTOUR_POINTS)?.points];
        let mut deform_inputs = Vec::with_capacity(iterations);
        let diag = b.diagonal();
        let limit = b.scaled(OUTPUT_EXTENT);
        let dd = features::deform_dim(f);
        for it in 0..iterations {
            let cur = contours.last().unwrap();
            let fr = contour_frames(cur);
            let xs = deform_features(img, &self.config.input_norm, cur, &fr, diag);
            let w = &self.deform_weights[it];
            let next: Vec<Point> = cur
                .iter()
                .zip(&fr)
                .zip(&xs)
                .map(|((&p, &(t, n)), x)| {
                    let un = dot(row(w, 0, dd), x).clamp(-DEFORM_CLAMP, DEFORM_CLAMP);
                    let ut = dot(row(w, 1, dd), x).clamp(-DEFORM_CLAMP, DEFORM_CLAMP);
                    limit.clamp_point(p + n * (un * diag) + t * (ut * diag))
                })
                .collect();
            deform_inputs.push(xs);
            contours.push(next);
        }
        Ok(ContourTrace {
            frames,
            init_inputs,
            contours,
            deform_inputs,
            octagon,
        })
    }

    /// Contour initialization and deformation from a given box.
    ///
    /// The box is clipped to the image first. The output is the last
    /// iteration's contour that forms a simple polygon, falling back to the
    /// initial octagon.
    pub fn contour_from_box(&self, img: &SceneImage, b: &BBox) -> Result<Polygon, DetectorError> {
        self.check_image(img)?;
        let clipped = b
            .intersect(&img.bounds())
            .ok_or(crate::geometry::GeometryError::DegenerateBox)?;
        if clipped.is_degenerate() {
            return Err(crate::geometry::GeometryError::DegenerateBox.into());
        }
        let trace = self.contour_trace(img, &clipped, self.config.deform_iterations)?;
        for c in trace.contours.iter().rev() {
            if let Ok(p) = Polygon::new(c.clone()) {
                return Ok(p);
            }
        }
        Ok(trace.octagon)
    }

    /// Heatmap peaks (strict 3x3 local maxima with score >= floor) and the
    /// regressed box at each, sorted by score descending.
    pub fn proposals(&self, img: &SceneImage, score_floor: f64) -> Result<Vec<(BBox, f64)>, DetectorError> {
        self.check_image(img)?;
        let feats = CellFeatures::compute(img, &self.config.input_norm);
        let scores: Vec<f64> = self.logits(&feats).into_iter().map(sigmoid).collect();
        let (w, h) = (feats.width, feats.height);
        let bounds = img.bounds();
        let mut out = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let s = scores[y * w + x];
                if !(s >= score_floor) {
                    continue;
                }
                let mut is_peak = true;
                'nb: for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        if dx == 0 && dy == 0 {
                            continue;
                        }
                        let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                        if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                            continue;
                        }
                        if scores[ny as usize * w + nx as usize] >= s {
                            is_peak = false;
                            break 'nb;
                        }
                    }
                }
                if !is_peak {
                    continue;
                }
                let [sw, sh, ox, oy] = self.box_at(feats.at(x, y));
                let bw = (sw * SIZE_UNIT).clamp(MIN_BOX_SIDE, bounds.width());
                let bh = (sh * SIZE_UNIT).clamp(MIN_BOX_SIDE, bounds.height());
                let cx = grid_center(x) + ox.clamp(-MAX_OFFSET, MAX_OFFSET) * LOC_STRIDE as f64;
                let cy = grid_center(y) + oy.clamp(-MAX_OFFSET, MAX_OFFSET) * LOC_STRIDE as f64;
                let Ok(b) = BBox::from_center(cx, cy, bw, bh) else { continue };
                let Some(b) = b.intersect(&bounds) else { continue };
                if b.is_degenerate() {
                    continue;
                }
                out.push((b, s));
            }
        }
        out.sort_by(|a, b| b.1.total_cmp(&a.1));
        Ok(out)
    }

    /// Full pipeline: peaks, boxes, contour initialization and deformation.
    pub fn infer(&self, img: &SceneImage, score_floor: f64) -> Result<Vec<Candidate>, DetectorError> {
        self.infer_where(img, score_floor, |_, _| true)
    }

    /// Like [`infer`](Self::infer) but only builds contours for proposals
    /// accepted by `keep(box, score)`.
    pub fn infer_where(
        &self,
        img: &SceneImage,
        score_floor: f64,
        keep: impl Fn(&BBox, f64) -> bool + Sync,
    ) -> Result<Vec<Candidate>, DetectorError> {
        self.proposals(img, score_floor)?
            .into_iter()
            .filter(|(b, s)| keep(b, *s))
            .map(|(b, s)| {
                Ok(Candidate {
                    polygon: self.contour_from_box(img, &b)?,
                    bbox: b,
                    score: s,
                })
            })
            .collect()
    }

    /// One SGD step on the confidence-weighted composite loss. Returns the
    /// loss at the pre-update weights.
    pub fn train_step(&self, batch: &[TrainRecord<'_>], lr: f64) -> Result<(DetectorState, LossBreakdown), DetectorError> {
        let prepared = prepare_batch(self, batch)?;
        let (loss, grad) = objective(self, &prepared);
        if !loss.total.is_finite() {
            return Err(DetectorError::NonFiniteLoss);
        }
        let mut next = self.clone();
        let r = self.config.head_rates;
        axpy(&mut next.loc_weights, -lr * r.loc, &grad.loc);
        axpy(&mut next.box_reg_weights, -lr * r.size, &grad.box_reg);
        axpy(&mut next.init_reg_weights, -lr * r.init, &grad.init_reg);
        for (w, g) in next.deform_weights.iter_mut().zip(&grad.deform) {
            axpy(w, -lr * r.deform, g);
        }
        next.steps += 1;
        Ok((next, loss))
    }
}

/// Best cyclic shift of `target` onto `reference` (least squares).
fn align_cyclic(reference: &[Point], target: &[Point]) -> Vec<Point> {
    let n = target.len();
    let shift = (0..n)
        .min_by(|&a, &b| {
            let cost = |s: usize| -> f64 {
                reference
                    .iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let d = *p - target[(i + s) % n];
                        d.dot(d)
                    })
                    .sum()
            };
            cost(a).total_cmp(&cost(b))
        })
        .unwrap_or(0);
    (0..n).map(|i| target[(i + shift) % n]).collect()
}

fn prepare_record(state: &DetectorState, rec: &TrainRecord<'_>, rec_index: usize) -> Result<PreparedRecord, DetectorError> {
    let img = rec.image;
    state.check_image(img)?;
    for inst in &rec.instances {
        if !(0.0..=1.0).contains(&inst.confidence) {
            return Err(DetectorError::InvalidConfidence(inst.confidence));
        }
        if inst.bbox.is_degenerate() {
            return Err(crate::geometry::GeometryError::DegenerateBox.into());
        }
    }
    let feats = CellFeatures::compute(img, &state.config.input_norm);
    let (w, h) = (feats.width, feats.height);
    let n_inst = rec.instances.len();
    let background = if n_inst == 0 {
        1.0
    } else {
        rec.instances.iter().map(|i| i.confidence).sum::<f64>() / n_inst as f64
    };
    let mut heat_target = vec![0.0f64; w * h];
    let mut heat_weight = vec![background; w * h];
    let mut claim = vec![0.0f64; w * h];
    let mut sizes = Vec::with_capacity(n_inst);
    for inst in &rec.instances {
        let b = inst.bbox;
        let c = b.center();
        let stride = LOC_STRIDE as f64;
        let cx = ((c.x / stride).floor().max(0.0) as usize).min(w - 1);
        let cy = ((c.y / stride).floor().max(0.0) as usize).min(h - 1);
        let sigma = ((0.3 * b.width().min(b.height()) / stride + 1.0) / 6.0).max(MIN_SIGMA);
        let reach = (sigma * 4.0).ceil() as i64;
        for y in (cy as i64 - reach).max(0)..=(cy as i64 + reach).min(h as i64 - 1) {
            for x in (cx as i64 - reach).max(0)..=(cx as i64 + reach).min(w as i64 - 1) {
                let d2 = ((x - cx as i64).pow(2) + (y - cy as i64).pow(2)) as f64;
                let g = (-d2 / (2.0 * sigma * sigma)).exp();
                if g < FOOTPRINT_MIN {
                    continue;
                }
                let i = y as usize * w + x as usize;
                heat_target[i] = heat_target[i].max(g);
                if g > claim[i] {
                    claim[i] = g;
                    heat_weight[i] = inst.confidence;
                }
            }
        }
        // cells within BOX_REGION of the center regress the box
        let region: Vec<(usize, usize)> = (cy.saturating_sub(BOX_REGION)..=(cy + BOX_REGION).min(h - 1))
            .flat_map(|gy| (cx.saturating_sub(BOX_REGION)..=(cx + BOX_REGION).min(w - 1)).map(move |gx| (gx, gy)))
            .collect();
        let share = inst.confidence / region.len() as f64;
        for (gx, gy) in region {
            sizes.push((
                gy * w + gx,
                [
                    b.width() / SIZE_UNIT,
                    b.height() / SIZE_UNIT,
                    (c.x - grid_center(gx)) / stride,
                    (c.y - grid_center(gy)) / stride,
                ],
                share,
            ));
        }
    }

    if !rec.ignore.is_empty() {
        for gy in 0..h {
            for gx in 0..w {
                let i = gy * w + gx;
                let p = Point::new(grid_center(gx), grid_center(gy));
                if claim[i] == 0.0 && rec.ignore.iter().any(|b| b.contains_point(p, 0.0)) {
                    heat_weight[i] = 0.0;
                }
            }
        }
    }

    let iterations = state.config.deform_iterations;
    let mut instances = Vec::with_capacity(n_inst);
    for (j, inst) in rec.instances.iter().enumerate() {
        if inst.confidence == 0.0 {
            continue;
        }
        let mut b = inst.bbox;
        let seed = sub_seed(sub_seed(state.config.aug_seed, state.steps), (rec_index * 1024 + j) as u64);
        if state.config.loose_augmentation {
            b = pretrain_loose_augmentation(&b, seed);
        }
        b = jitter_box(&b, state.config.box_jitter, sub_seed(seed, 1));
        if b.is_degenerate() {
            continue;
        }
        let trace = state.contour_trace(img, &b, iterations)?;
        let ex = extreme_points(&inst.polygon);
        let truth = [ex.top, ex.right, ex.bottom, ex.left];
        let cin = trace
            .frames
            .iter()
            .zip(trace.init_inputs)
            .zip(truth)
            .map(|((fr, x), z)| {
                let d = z - fr.anchor;
                (x, [d.dot(fr.tangent) / fr.along_len, d.dot(fr.inward) / fr.across_len])
            })
            .collect();
        let gt = resample_contour(&inst.polygon, CONTOUR_POINTS)?.points;
        let gt = align_cyclic(&trace.contours[0], &gt);
        let diag = b.diagonal();
        let deform = trace
            .deform_inputs
            .into_iter()
            .enumerate()
            .map(|(it, xs)| {
                let cur = &trace.contours[it];
                let targets = contour_frames(cur)
                    .iter()
                    .zip(cur)
                    .zip(&gt)
                    .map(|((&(t, n), &p), &g)| {
                        let r = g - p;
                        [r.dot(n) / diag, r.dot(t) / diag]
                    })
                    .collect();
                (xs, targets)
            })
            .collect();
        instances.push(PreparedInstance {
            weight: inst.confidence,
            cin,
            deform,
        });
    }
    Ok(PreparedRecord {
        feats,
        heat_target,
        heat_weight,
        sizes,
        norm: 1.0 / n_inst.max(1) as f64,
        instances,
    })
}

/// Freezes the state-dependent training inputs of a batch.
pub fn prepare_batch(state: &DetectorState, batch: &[TrainRecord<'_>]) -> Result<PreparedBatch, DetectorError> {
    let records = batch
        .par_iter()
        .enumerate()
        .map(|(i, r)| prepare_record(state, r, i))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(PreparedBatch { records })
}

fn record_objective(state: &DetectorState, rec: &PreparedRecord) -> (LossBreakdown, ParamGrad) {
    let cfg = &state.config;
    let gamma = cfg.loss.focal_gamma;
    let mut g = ParamGrad::zeros_like(state);
    let mut loss = LossBreakdown::default();
    let feats = &rec.feats;
    let d = feats.dim;

    let mut l_focal = 0.0;
    for (i, phi) in feats.data.chunks_exact(d).enumerate() {
        let wgt = rec.heat_weight[i];
        if wgt == 0.0 {
            continue;
        }
        let (l, dz) = focal(dot(&state.loc_weights, phi), rec.heat_target[i], gamma);
        l_focal += wgt * l;
        axpy(&mut g.loc, wgt * dz * rec.norm, phi);
    }
    let mut l_size = 0.0;
    for &(cell, target, wgt) in &rec.sizes {
        if wgt == 0.0 {
            continue;
        }
        let phi = &feats.data[cell * d..(cell + 1) * d];
        for (r, (p, t)) in state.box_at(phi).iter().zip(target).enumerate() {
            l_size += wgt * (p - t).abs();
            axpy(&mut g.box_reg[r * d..(r + 1) * d], wgt * (p - t).signum() * rec.norm, phi);
        }
    }
    loss.l_det = (l_focal + l_size) * rec.norm;

    let di = features::init_dim(cfg.feature_dim);
    let dd = features::deform_dim(cfg.feature_dim);
    for inst in &rec.instances {
        let scale = inst.weight * rec.norm;
        let inv = 1.0 / (2.0 * inst.cin.len() as f64);
        let mut l_cin = 0.0;
        for (x, target) in &inst.cin {
            for (r, t) in target.iter().enumerate() {
                let (l, dl) = smooth_l1(dot(row(&state.init_reg_weights, r, di), x) - t);
                l_cin += l * inv;
                axpy(&mut g.init_reg[r * di..(r + 1) * di], cfg.loss.lambda1 * scale * dl * inv, x);
            }
        }
        loss.l_cin += scale * l_cin;
        for (it, (xs, targets)) in inst.deform.iter().enumerate() {
            let w = &state.deform_weights[it];
            let inv = 1.0 / (2.0 * xs.len() as f64);
            let mut l_it = 0.0;
            for (x, target) in xs.iter().zip(targets) {
                for (r, t) in target.iter().enumerate() {
                    let (l, dl) = smooth_l1(dot(row(w, r, dd), x) - t);
                    l_it += l * inv;
                    axpy(&mut g.deform[it][r * dd..(r + 1) * dd], cfg.loss.lambda2 * scale * dl * inv, x);
                }
            }
            loss.l_cdn_iters[it] += scale * l_it;
        }
    }
    loss.l_cdn = loss.l_cdn_iters.iter().sum();
    loss.total = loss.l_det + cfg.loss.lambda1 * loss.l_cin + cfg.loss.lambda2 * loss.l_cdn;
    (loss, g)
}

/// Loss and analytic gradient of a prepared batch at `state`'s weights.
/// Record contributions are summed.
pub fn objective(state: &DetectorState, batch: &PreparedBatch) -> (LossBreakdown, ParamGrad) {
    let parts: Vec<(LossBreakdown, ParamGrad)> =
        batch.records.par_iter().map(|r| record_objective(state, r)).collect();
    let mut loss = LossBreakdown::default();
    let mut grad = ParamGrad::zeros_like(state);
    for (l, g) in &parts {
        loss.add(l);
        grad.add(g);
    }
    (loss, grad)
}

/// Largest relative error per weight block between the analytic gradient
/// and central finite differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub max_rel_err: Vec<(&'static str, f64)>,
}

impl GradCheck {
    pub fn worst(&self) -> f64 {
        self.max_rel_err.iter().map(|&(_, e)| e).fold(0.0, f64::max)
    }
}

/// Central-difference check of every weight. The relative error of one
/// coordinate is `|a - n| / max(|a|, |n|, floor)`.
pub fn gradient_check(state: &DetectorState, batch: &PreparedBatch, eps: f64, floor: f64) -> GradCheck {
    let (_, grad) = objective(state, batch);
    let analytic: Vec<(&'static str, Vec<f64>)> = grad.blocks().into_iter().map(|(n, b)| (n, b.to_vec())).collect();
    let mut probe = state.clone();
    let mut max_rel_err = Vec::new();
    for (bi, (name, a)) in analytic.iter().enumerate() {
        let mut worst = 0.0f64;
        for k in 0..a.len() {
            let orig = probe.param_blocks()[bi].1[k];
            probe.param_blocks_mut()[bi].1[k] = orig + eps;
            let up = objective(&probe, batch).0.total;
            probe.param_blocks_mut()[bi].1[k] = orig - eps;
            let down = objective(&probe, batch).0.total;
            probe.param_blocks_mut()[bi].1[k] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let denom = a[k].abs().max(numeric.abs()).max(floor);
            worst = worst.max((a[k] - numeric).abs() / denom);
        }
        max_rel_err.push((*name, worst));
    }
    GradCheck { max_rel_err }
}
