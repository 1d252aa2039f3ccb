#![allow(dead_code)]

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use weakpoly::geometry::{Point, Polygon};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Star-shaped (possibly non-convex) polygon around `c` with radii in
/// `[r_min, r_max]` and strictly increasing angles.
pub fn star_polygon(rng: &mut ChaCha8Rng, c: (f64, f64), r_min: f64, r_max: f64) -> Polygon {
    loop {
        let n = rng.gen_range(3..=12);
        let mut angles: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..std::f64::consts::TAU)).collect();
        angles.sort_by(f64::total_cmp);
        if angles.windows(2).any(|w| w[1] - w[0] < 1e-3) {
            continue;
        }
        let pts = angles
            .iter()
            .map(|a| {
                let r = rng.gen_range(r_min..=r_max);
                Point::new(c.0 + r * a.cos(), c.1 + r * a.sin())
            })
            .collect();
        if let Ok(p) = Polygon::new(pts) {
            return p;
        }
    }
}

/// Pixel-centre membership count of a polygon region on an `n x n` grid
/// spanning `[0, side]^2`, by even-odd scanlines.
pub fn raster_areas(a: &Polygon, b: &Polygon, n: usize, side: f64) -> (f64, f64, f64) {
    let px = side / n as f64;
    let (mut ca, mut cb, mut ci) = (0usize, 0usize, 0usize);
    for row in 0..n {
        let y = (row as f64 + 0.5) * px;
        let ia = crossings(a, y);
        let ib = crossings(b, y);
        if ia.is_empty() && ib.is_empty() {
            continue;
        }
        for col in 0..n {
            let x = (col as f64 + 0.5) * px;
            let in_a = inside(&ia, x);
            let in_b = inside(&ib, x);
            ca += in_a as usize;
            cb += in_b as usize;
            ci += (in_a && in_b) as usize;
        }
    }
    let cell = px * px;
    (ca as f64 * cell, cb as f64 * cell, ci as f64 * cell)
}

fn crossings(p: &Polygon, y: f64) -> Vec<f64> {
    let v = p.vertices();
    let mut xs = Vec::new();
    for i in 0..v.len() {
        let (a, b) = (v[i], v[(i + 1) % v.len()]);
        if (a.y <= y) != (b.y <= y) {
            xs.push(a.x + (y - a.y) / (b.y - a.y) * (b.x - a.x));
        }
    }
    xs.sort_by(f64::total_cmp);
    xs
}

fn inside(xs: &[f64], x: f64) -> bool {
    xs.iter().filter(|&&c| c < x).count() % 2 == 1
}
