//! Polygon-level precision / recall / F-measure with greedy IoU matching.

use serde::{Deserialize, Serialize};

use crate::detector::Candidate;
use crate::geometry::{polygon_iou, Polygon};
use crate::scalar::Scalar;

pub const DEFAULT_IOU_THRESH: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(detection index, truth index)` pairs.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_dets: Vec<usize>,
    pub unmatched_truths: Vec<usize>,
}

/// Precision, recall and F-measure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf<T = f64> {
    #[serde(rename = "P")]
    pub precision: T,
    #[serde(rename = "R")]
    pub recall: T,
    #[serde(rename = "F")]
    pub f_measure: T,
}

/// Metrics document for one dataset split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    #[serde(rename = "P")]
    pub precision: f64,
    #[serde(rename = "R")]
    pub recall: f64,
    #[serde(rename = "F")]
    pub f_measure: f64,
    pub iou_thresh: f64,
    pub matches: usize,
    pub n_dets: usize,
    pub n_truths: usize,
}

/// Greedy matching: detections in descending score order (ties by index)
/// each claim the highest-IoU unmatched truth whose IoU reaches the threshold.
pub fn match_detections<T: Scalar>(dets: &[Candidate<T>], truths: &[Polygon<T>], iou_thresh: T) -> MatchResult {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .score
            .partial_cmp(&dets[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let truth_boxes: Vec<_> = truths.iter().map(Polygon::bbox).collect();
    let mut taken = vec![false; truths.len()];
    let mut result = MatchResult::default();
    for d in order {
        let det_box = dets[d].polygon.bbox();
        let mut best: Option<(usize, T)> = None;
        for (t, truth) in truths.iter().enumerate() {
            if taken[t] || det_box.intersect(&truth_boxes[t]).is_none() {
                continue;
            }
            let iou = polygon_iou(&dets[d].polygon, truth);
            if iou >= iou_thresh && best.map_or(true, |(_, b)| iou > b) {
                best = Some((t, iou));
            }
        }
        match best {
            Some((t, _)) => {
                taken[t] = true;
                result.pairs.push((d, t));
            }
            None => result.unmatched_dets.push(d),
        }
    }
    result.unmatched_dets.sort_unstable();
    result.unmatched_truths = (0..truths.len()).filter(|&t| !taken[t]).collect();
    result
}

/// Empty sets count as perfect precision / recall; F is 0 when P + R = 0.
pub fn prf<T: Scalar>(matches: usize, n_dets: usize, n_truths: usize) -> Prf<T> {
    let m = T::from_usize(matches).unwrap();
    let precision = if n_dets == 0 { T::one() } else { m / T::from_usize(n_dets).unwrap() };
    let recall = if n_truths == 0 { T::one() } else { m / T::from_usize(n_truths).unwrap() };
    let sum = precision + recall;
    let f_measure = if sum > T::zero() {
        T::lit(2.0) * precision * recall / sum
    } else {
        T::zero()
    };
    Prf {
        precision,
        recall,
        f_measure,
    }
}

pub fn prf_of_match<T: Scalar>(m: &MatchResult, n_dets: usize, n_truths: usize) -> Prf<T> {
    prf(m.pairs.len(), n_dets, n_truths)
}

/// Pools matches over images, then computes P/R/F once.
pub fn evaluate_split<'a, I>(images: I, iou_thresh: f64) -> Metrics
where
    I: IntoIterator<Item = (&'a [Candidate], &'a [Polygon])>,
{
    let (mut matches, mut n_dets, mut n_truths) = (0, 0, 0);
    for (dets, truths) in images {
        matches += match_detections(dets, truths, iou_thresh).pairs.len();
        n_dets += dets.len();
        n_truths += truths.len();
    }
    let p: Prf = prf(matches, n_dets, n_truths);
    Metrics {
        precision: p.precision,
        recall: p.recall,
        f_measure: p.f_measure,
        iou_thresh,
        matches,
        n_dets,
        n_truths,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x: f64, y: f64, s: f64) -> Polygon {
        Polygon::from_xy(&[(x, y), (x + s, y), (x + s, y + s), (x, y + s)]).unwrap()
    }

    fn cand(p: Polygon, score: f64) -> Candidate {
        Candidate {
            bbox: p.bbox(),
            polygon: p,
            score,
        }
    }

    #[test]
    fn exact_replay_is_perfect() {
        let truths = vec![square(0.0, 0.0, 2.0), square(5.0, 5.0, 3.0)];
        let dets: Vec<_> = truths.iter().cloned().map(|p| cand(p, 0.9)).collect();
        let m = match_detections(&dets, &truths, 0.5);
        assert_eq!(m.pairs.len(), 2);
        let p: Prf = prf_of_match(&m, 2, 2);
        assert_eq!((p.precision, p.recall, p.f_measure), (1.0, 1.0, 1.0));
    }

    #[test]
    fn empty_conventions() {
        let truths = vec![square(0.0, 0.0, 2.0)];
        let m = match_detections::<f64>(&[], &truths, 0.5);
        assert_eq!(m.unmatched_truths, vec![0]);
        let p: Prf = prf_of_match(&m, 0, 1);
        assert_eq!((p.precision, p.recall, p.f_measure), (1.0, 0.0, 0.0));
    }

    #[test]
    fn prf_arithmetic() {
        let p: Prf = prf(8, 10, 10);
        assert!((p.precision - 0.8).abs() < 1e-15);
        assert!((p.recall - 0.8).abs() < 1e-15);
        assert!((p.f_measure - 0.8).abs() < 1e-15);
        let p: Prf = prf(0, 0, 5);
        assert_eq!((p.precision, p.recall, p.f_measure), (1.0, 0.0, 0.0));
    }

    #[test]
    fn higher_score_claims_first() {
        let truth = vec![square(0.0, 0.0, 4.0)];
        let dets = vec![cand(square(0.5, 0.0, 4.0), 0.3), cand(square(1.0, 0.0, 4.0), 0.8)];
        let m = match_detections(&dets, &truth, 0.5);
        assert_eq!(m.pairs, vec![(1, 0)]);
        assert_eq!(m.unmatched_dets, vec![0]);
    }

    #[test]
    fn below_threshold_is_unmatched() {
        let truth = vec![square(0.0, 0.0, 1.0)];
        let dets = vec![cand(square(0.5, 0.5, 1.0), 1.0)];
        assert!(match_detections(&dets, &truth, 0.5).pairs.is_empty());
        assert_eq!(match_detections(&dets, &truth, 0.1).pairs.len(), 1);
    }
}
