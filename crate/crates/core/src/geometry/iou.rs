//! Rotated-rectangle overlap via convex polygon clipping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::boxes::{OrientedBox, Point};

/// Intersections below this area are reported as empty.
pub const MIN_INTERSECTION: f64 = 1e-12;

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

/// Signed shoelace area; positive for counter-clockwise vertex order.
pub fn signed_area(poly: &[Point]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut twice = 0.0;
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        twice += a.x * b.y - b.x * a.y;
    }
    twice / 2.0
}

/// Sutherland–Hodgman: clips `subject` against the convex counter-clockwise `clip`.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let (ea, eb) = (clip[i], clip[(i + 1) % clip.len()]);
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = cross(ea, eb, cur) >= 0.0;
            let prev_in = cross(ea, eb, prev) >= 0.0;
            if cur_in != prev_in {
                output.push(edge_intersection(prev, cur, ea, eb));
            }
            if cur_in {
                output.push(cur);
            }
        }
    }
    output
}

fn edge_intersection(p: Point, q: Point, a: Point, b: Point) -> Point {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let t = dp / (dp - dq);
    Point::new(p.x + t * (q.x - p.x), p.y + t * (q.y - p.y))
}

/// Area shared by two convex counter-clockwise polygons.
pub fn convex_intersection_area(a: &[Point], b: &[Point]) -> f64 {
    signed_area(&clip_convex(a, b)).max(0.0)
}

pub fn intersection_area(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let area = convex_intersection_area(&a.corners(), &b.corners());
    if area < MIN_INTERSECTION {
        0.0
    } else {
        area
    }
}

pub fn rotated_iou(a: &OrientedBox, b: &OrientedBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Monte-Carlo IoU estimate by uniform sampling over the joint bounding rectangle.
pub fn mc_iou_oracle(a: &OrientedBox, b: &OrientedBox, samples: usize, seed: u64) -> Result<f64> {
    if samples == 0 {
        return Err(Error::Config("sample count must be positive".into()));
    }
    let pts: Vec<Point> = a.corners().into_iter().chain(b.corners()).collect();
    let (x0, x1) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.x), hi.max(p.x))
        });
    let (y0, y1) = pts
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
            (lo.min(p.y), hi.max(p.y))
        });
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut both, mut either) = (0u64, 0u64);
    for _ in 0..samples {
        let p = Point::new(rng.gen_range(x0..=x1), rng.gen_range(y0..=y1));
        let (ia, ib) = (a.contains(p), b.contains(p));
        both += (ia && ib) as u64;
        either += (ia || ib) as u64;
    }
    Ok(if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    })
}
