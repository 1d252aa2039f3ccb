use std::collections::HashMap;

use weakpoly::detector::{oracle_detector, NoiseSpec, OracleLabeler, PseudoLabeler, ScoreModel};
use weakpoly::evaluation::match_detections;
use weakpoly::scene::{synth_dataset, ImageRecord, SynthParams};

fn scenes(n: usize, seed: u64) -> Vec<ImageRecord> {
    let params = SynthParams {
        width: 48,
        height: 48,
        feature_dim: 2,
        size_range: (8.0, 14.0),
        ..SynthParams::default()
    };
    synth_dataset(n, seed, &params).unwrap()
}

fn truth_map(recs: &[ImageRecord]) -> HashMap<String, Vec<weakpoly::geometry::Polygon>> {
    recs.iter().map(|r| (r.id.clone(), r.strong.clone().unwrap())).collect()
}

#[test]
fn noiseless_oracle_replays_truth() {
    let recs = scenes(5, 1);
    let oracle = oracle_detector(recs.iter().map(|r| (r.id.clone(), r.strong.clone().unwrap())));
    for r in &recs {
        let c = oracle.detect(r, 0.5).unwrap();
        let truth = r.strong.as_ref().unwrap();
        assert_eq!(c.len(), truth.len());
        for (cand, t) in c.iter().zip(truth) {
            assert_eq!(&cand.polygon, t);
            assert_eq!(cand.score, 1.0);
            assert_eq!(cand.bbox, t.bbox());
        }
    }
}

#[test]
fn full_drop_without_false_positives_is_empty() {
    let recs = scenes(5, 2);
    let noise = NoiseSpec {
        drop_rate: 1.0,
        ..NoiseSpec::none()
    };
    let oracle = OracleLabeler::new(truth_map(&recs), noise, 3);
    assert!(recs.iter().all(|r| oracle.candidates(r).is_empty()));
}

#[test]
fn drop_rate_sets_recall() {
    let recs = scenes(4200, 3);
    let noise = NoiseSpec {
        drop_rate: 0.3,
        ..NoiseSpec::none()
    };
    let oracle = OracleLabeler::new(truth_map(&recs), noise, 4);
    let (mut kept, mut total) = (0, 0);
    for r in &recs {
        kept += oracle.candidates(r).len();
        total += r.strong.as_ref().unwrap().len();
    }
    assert!(total >= 10_000, "{total} trials");
    let recall = kept as f64 / total as f64;
    assert!((recall - 0.7).abs() < 0.02, "recall {recall}");
}

#[test]
fn noisy_candidates_are_seeded_and_scored_by_kind() {
    let recs = scenes(300, 5);
    let noise = NoiseSpec {
        drop_rate: 0.1,
        jitter_std: 0.3,
        fp_rate: 1.0,
        score_model: ScoreModel {
            tp_mean: 0.8,
            fp_mean: 0.3,
            spread: 0.2,
        },
        fp_size: (6.0, 16.0),
    };
    let oracle = OracleLabeler::new(truth_map(&recs), noise, 6);
    let (mut tp, mut n_tp, mut fp, mut n_fp) = (0.0, 0, 0.0, 0);
    for r in &recs {
        let c = oracle.candidates(r);
        assert_eq!(c, oracle.candidates(r));
        assert!(c.windows(2).all(|w| w[0].score >= w[1].score));
        let m = match_detections(&c, r.strong.as_ref().unwrap(), 0.5);
        for &(d, _) in &m.pairs {
            tp += c[d].score;
            n_tp += 1;
        }
        for &d in &m.unmatched_dets {
            fp += c[d].score;
            n_fp += 1;
        }
        for cand in &c {
            assert!((0.0..=1.0).contains(&cand.score));
        }
    }
    // expected Poisson(1) false positives per image
    assert!((n_fp as f64 / recs.len() as f64 - 1.0).abs() < 0.2);
    assert!(tp / n_tp as f64 > 0.75 && fp / (n_fp as f64) < 0.35);
}
