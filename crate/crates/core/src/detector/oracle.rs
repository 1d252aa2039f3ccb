//! Ground-truth replaying labeler with controllable corruption, used to
//! exercise the EM loop independently of detector quality.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{Candidate, DetectorError, PseudoLabeler};
use crate::geometry::{box_iou, diamond_from_box, BBox, Point, Polygon};
use crate::scene::ImageRecord;
use crate::seeds::{named_seed, sub_seed};

/// Scores are drawn uniformly from `mean +- spread` and clamped to [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreModel {
    pub tp_mean: f64,
    pub fp_mean: f64,
    pub spread: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Probability that a true instance is missed.
    pub drop_rate: f64,
    /// Vertex jitter standard deviation, in cells.
    pub jitter_std: f64,
    /// Expected false positives per image.
    pub fp_rate: f64,
    pub score_model: ScoreModel,
    /// Sides of false-positive boxes are drawn from this range, in cells.
    pub fp_size: (f64, f64),
}

impl NoiseSpec {
    /// Exact replay: every instance, no jitter, no false positives, score 1.
    pub fn none() -> Self {
        Self {
            drop_rate: 0.0,
            jitter_std: 0.0,
            fp_rate: 0.0,
            score_model: ScoreModel {
                tp_mean: 1.0,
                fp_mean: 0.0,
                spread: 0.0,
            },
            fp_size: (6.0, 20.0),
        }
    }
}

/// Replays stored polygons per record id.
#[derive(Debug, Clone)]
pub struct OracleLabeler {
    pub truth: HashMap<String, Vec<Polygon>>,
    pub noise: NoiseSpec,
    pub rng_seed: u64,
}

/// A noise-free oracle over `(id, polygons)` pairs.
pub fn oracle_detector<I>(truth: I) -> OracleLabeler
where
    I: IntoIterator<Item = (String, Vec<Polygon>)>,
{
    OracleLabeler {
        truth: truth.into_iter().collect(),
        noise: NoiseSpec::none(),
        rng_seed: 0,
    }
}

fn jitter(poly: &Polygon, std: f64, rng: &mut ChaCha8Rng) -> Polygon {
    if std <= 0.0 {
        return poly.clone();
    }
    let normal = Normal::new(0.0, std).expect("positive std");
    // Large jitter can fold the outline; halve until it stays simple.
    let mut scale = 1.0;
    for _ in 0..6 {
        let pts: Vec<Point> = poly
            .vertices()
            .iter()
            .map(|p| Point::new(p.x + scale * normal.sample(rng), p.y + scale * normal.sample(rng)))
            .collect();
        if let Ok(p) = Polygon::new(pts) {
            return p;
        }
        scale *= 0.5;
    }
    poly.clone()
}

fn draw_score(m: f64, spread: f64, rng: &mut ChaCha8Rng) -> f64 {
    let s = if spread > 0.0 { rng.gen_range(m - spread..=m + spread) } else { m };
    s.clamp(0.0, 1.0)
}

impl OracleLabeler {
    pub fn new(truth: HashMap<String, Vec<Polygon>>, noise: NoiseSpec, rng_seed: u64) -> Self {
        Self { truth, noise, rng_seed }
    }

    /// All candidates of a record before score filtering, deterministic in
    /// (seed, id).
    pub fn candidates(&self, record: &ImageRecord) -> Vec<Candidate> {
        let mut rng = ChaCha8Rng::seed_from_u64(named_seed(self.rng_seed, &record.id));
        let n = &self.noise;
        let mut out = Vec::new();
        for poly in self.truth.get(&record.id).map(Vec::as_slice).unwrap_or(&[]) {
            if n.drop_rate > 0.0 && rng.gen::<f64>() < n.drop_rate {
                continue;
            }
            let p = jitter(poly, n.jitter_std, &mut rng);
            out.push(Candidate {
                bbox: p.bbox(),
                polygon: p,
                score: draw_score(n.score_model.tp_mean, n.score_model.spread, &mut rng),
            });
        }
        if n.fp_rate > 0.0 {
            let k = Poisson::new(n.fp_rate).expect("positive rate").sample(&mut rng) as usize;
            let bounds = record.image.bounds();
            for _ in 0..k {
                let w = rng.gen_range(n.fp_size.0..=n.fp_size.1).min(bounds.width());
                let h = rng.gen_range(n.fp_size.0..=n.fp_size.1).min(bounds.height());
                let x = rng.gen_range(0.0..=bounds.width() - w);
                let y = rng.gen_range(0.0..=bounds.height() - h);
                let Ok(b) = BBox::new(x, y, x + w, y + h) else { continue };
                let Ok(polygon) = diamond_from_box(&b) else { continue };
                out.push(Candidate {
                    bbox: b,
                    polygon,
                    score: draw_score(n.score_model.fp_mean, n.score_model.spread, &mut rng),
                });
            }
        }
        out.sort_by(|a, b| b.score.total_cmp(&a.score));
        out
    }
}

impl PseudoLabeler for OracleLabeler {
    fn detect(&self, record: &ImageRecord, score_floor: f64) -> Result<Vec<Candidate>, DetectorError> {
        Ok(self.candidates(record).into_iter().filter(|c| c.score >= score_floor).collect())
    }

    /// The stored polygon whose box best overlaps `b` (box IoU > 0.3),
    /// jittered; a diamond inscribed in `b` otherwise.
    fn contour_from_box(&self, record: &ImageRecord, b: &BBox) -> Result<Polygon, DetectorError> {
        let best = self.truth.get(&record.id).and_then(|polys| {
            polys
                .iter()
                .map(|p| (box_iou(&p.bbox(), b), p))
                .filter(|(iou, _)| *iou > 0.3)
                .max_by(|x, y| x.0.total_cmp(&y.0))
        });
        match best {
            Some((_, p)) => {
                let seed = sub_seed(named_seed(self.rng_seed, &record.id), (b.x_min * 1e3) as u64 ^ (b.y_min * 1e3) as u64);
                Ok(jitter(p, self.noise.jitter_std, &mut ChaCha8Rng::seed_from_u64(seed)))
            }
            None => Ok(diamond_from_box(b)?),
        }
    }
}
