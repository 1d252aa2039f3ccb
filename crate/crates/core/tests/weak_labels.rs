mod common;

use common::{rng, star_polygon};
use proptest::prelude::*;
use rand::Rng;
use weakpoly::geometry::{bbox_of_polygon, Point, Polygon};
use weakpoly::weak_labels::{gen_coarse, gen_loose, gen_tag, gen_tight, generate, mean_shift, WeakKind};

fn scene_polys(seed: u64, n: usize) -> Vec<Polygon> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| {
            let c = (r.gen_range(20.0..108.0), r.gen_range(20.0..108.0));
            star_polygon(&mut r, c, 2.0, 12.0)
        })
        .collect()
}

#[test]
fn separated_blobs_form_one_cluster_each() {
    let mut r = rng(4);
    let centres = [(0.0, 0.0), (100.0, 0.0), (0.0, 100.0), (100.0, 100.0)];
    let mut pts = Vec::new();
    let mut truth = Vec::new();
    for (k, c) in centres.iter().enumerate() {
        for _ in 0..r.gen_range(1..6) {
            pts.push(Point::new(c.0 + r.gen_range(-3.0..3.0), c.1 + r.gen_range(-3.0..3.0)));
            truth.push(k);
        }
    }
    let got = mean_shift(&pts, 10.0);
    // same partition, labels numbered by first appearance
    assert_eq!(got, truth);
}

#[test]
fn single_precision_labels_agree() {
    let polys = scene_polys(9, 6);
    let polys32: Vec<Polygon<f32>> = polys
        .iter()
        .map(|p| Polygon::new(p.vertices().iter().map(|v| Point::new(v.x as f32, v.y as f32)).collect()).unwrap())
        .collect();
    let a = gen_coarse(&polys, 128.0, 128.0);
    let b = gen_coarse(&polys32, 128.0f32, 128.0);
    assert_eq!(a.boxes.len(), b.boxes.len());
    for (x, y) in a.boxes.iter().zip(&b.boxes) {
        assert!((x.x_min - y.x_min as f64).abs() < 1e-4 && (x.y_max - y.y_max as f64).abs() < 1e-4);
    }
}

proptest! {
    #[test]
    fn tight_boxes_are_polygon_boxes(seed in any::<u64>(), n in 0usize..8) {
        let polys = scene_polys(seed, n);
        let t = gen_tight(&polys);
        prop_assert_eq!(t.kind, WeakKind::Tight);
        prop_assert_eq!(t.has_text, n > 0);
        for (b, p) in t.boxes.iter().zip(&polys) {
            prop_assert_eq!(*b, bbox_of_polygon(p));
        }
    }

    #[test]
    fn loose_boxes_grow_by_ten_to_twenty_percent(seed in any::<u64>(), n in 1usize..8, label_seed in any::<u64>()) {
        let polys = scene_polys(seed, n);
        let l = gen_loose(&polys, label_seed);
        prop_assert_eq!(&l, &gen_loose(&polys, label_seed));
        for (b, p) in l.boxes.iter().zip(&polys) {
            let t = bbox_of_polygon(p);
            prop_assert!(b.strictly_contains_box(&t));
            let (fx, fy) = (b.width() / t.width() - 1.0, b.height() / t.height() - 1.0);
            prop_assert!((0.1 - 1e-9..=0.2 + 1e-9).contains(&fx));
            prop_assert!((0.1 - 1e-9..=0.2 + 1e-9).contains(&fy));
            let (cb, ct) = (b.center(), t.center());
            prop_assert!(cb.dist(ct) < 1e-9);
        }
    }

    #[test]
    fn coarse_boxes_cover_clusters(seed in any::<u64>(), n in 0usize..10) {
        let polys = scene_polys(seed, n);
        let c = gen_coarse(&polys, 128.0, 128.0);
        prop_assert!(c.boxes.len() <= n);
        prop_assert_eq!(c.boxes.is_empty(), n == 0);
        let tight: Vec<_> = polys.iter().map(bbox_of_polygon).collect();
        for t in &tight {
            prop_assert!(c.boxes.iter().any(|g| g.contains_box(t)));
        }
        // every coarse box is the union of the tight boxes it contains
        for g in &c.boxes {
            let inner: Vec<_> = tight.iter().filter(|t| g.contains_box(t)).collect();
            prop_assert!(!inner.is_empty());
            let u = inner.iter().skip(1).fold(*inner[0], |acc, t| acc.union(t));
            prop_assert_eq!(u, *g);
        }
    }

    #[test]
    fn mean_shift_labels_are_dense_and_ordered(seed in any::<u64>(), n in 1usize..30, radius in 1.0..60.0f64) {
        let mut r = rng(seed);
        let pts: Vec<Point> = (0..n).map(|_| Point::new(r.gen_range(0.0..128.0), r.gen_range(0.0..128.0))).collect();
        let a = mean_shift(&pts, radius);
        prop_assert_eq!(a.len(), n);
        let mut next = 0;
        for &k in &a {
            prop_assert!(k <= next);
            if k == next {
                next += 1;
            }
        }
        prop_assert_eq!(&a, &mean_shift(&pts, radius));
    }

    #[test]
    fn tag_reports_presence(seed in any::<u64>(), n in 0usize..4) {
        let polys = scene_polys(seed, n);
        let t = gen_tag(&polys);
        prop_assert_eq!(t.has_text, n > 0);
        prop_assert!(t.boxes.is_empty());
        prop_assert_eq!(generate(WeakKind::Tag, &polys, 128.0, 128.0, 0), t);
    }
}
