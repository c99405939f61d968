//! Minimum-area rotated rectangle around the foreground of a binary mask.

use super::RotatedBox;
use crate::error::{Error, Result};
use crate::img::Mask;

/// Smallest rotated rectangle containing all foreground pixel centers.
///
/// Extents are clamped to at least one pixel so degenerate regions (a single
/// pixel, a one-pixel-wide line) still produce a valid box. The result is
/// canonicalized.
pub fn min_area_box(mask: &Mask) -> Result<RotatedBox> {
    let pts: Vec<[f64; 2]> = mask
        .foreground()
        .into_iter()
        .map(|(x, y)| [x as f64 + 0.5, y as f64 + 0.5])
        .collect();
    if pts.is_empty() {
        return Err(Error::EmptyRegion("mask has no foreground pixels".into()));
    }
    let hull = convex_hull(&pts);

    if hull.len() == 1 {
        return RotatedBox::new(hull[0][0], hull[0][1], 1.0, 1.0, 0.0);
    }
    if hull.len() == 2 {
        // collinear points: a segment-aligned box
        let (a, b) = (hull[0], hull[1]);
        let dx = b[0] - a[0];
        let dy = b[1] - a[1];
        let len = (dx * dx + dy * dy).sqrt();
        let deg = dy.atan2(dx).to_degrees();
        let (folded, w, h) = fold_quarter(deg, len.max(1.0), 1.0);
        return RotatedBox::new((a[0] + b[0]) / 2.0, (a[1] + b[1]) / 2.0, w, h, folded);
    }

    // the minimum-area rectangle has a side collinear with some hull edge
    let mut best: Option<(f64, RotatedBox)> = None;
    let n = hull.len();
    for i in 0..n {
        let a = hull[i];
        let b = hull[(i + 1) % n];
        let theta = (b[1] - a[1]).atan2(b[0] - a[0]);
        let (s, c) = theta.sin_cos();
        let mut min_u = f64::INFINITY;
        let mut max_u = f64::NEG_INFINITY;
        let mut min_v = f64::INFINITY;
        let mut max_v = f64::NEG_INFINITY;
        for p in &hull {
            let u = c * p[0] + s * p[1];
            let v = -s * p[0] + c * p[1];
            min_u = min_u.min(u);
            max_u = max_u.max(u);
            min_v = min_v.min(v);
            max_v = max_v.max(v);
        }
        let w = max_u - min_u;
        let h = max_v - min_v;
        let area = w * h;
        if best.as_ref().is_none_or(|(best_area, _)| area < *best_area) {
            let cu = (min_u + max_u) / 2.0;
            let cv = (min_v + max_v) / 2.0;
            let cx = c * cu - s * cv;
            let cy = s * cu + c * cv;
            let (folded, w, h) = fold_quarter(theta.to_degrees(), w.max(1.0), h.max(1.0));
            let b = RotatedBox::new(cx, cy, w, h, folded)?;
            best = Some((area, b));
        }
    }
    Ok(best.expect("hull has at least one edge").1)
}

/// Folds an equivalent-rectangle parameterization so the angle lands in
/// [-45, 45], swapping extents per quarter turn. Pixelized masks often have
/// their minimal rectangle on an exact diagonal, and a vertical mirror swaps
/// the two diagonal extents there; putting the longer extent in `w` at the
/// boundary keeps `w` stable under mirroring, so mirrored masks yield boxes
/// with identical sizes.
fn fold_quarter(deg: f64, w: f64, h: f64) -> (f64, f64, f64) {
    let r = deg.rem_euclid(90.0);
    let folded = if r >= 45.0 { r - 90.0 } else { r };
    let quarter_turns = ((deg - folded) / 90.0).round() as i64;
    let (w, h) = if quarter_turns.rem_euclid(2) == 1 { (h, w) } else { (w, h) };
    if folded <= -45.0 + 1e-9 && w < h {
        (folded + 90.0, h, w)
    } else {
        (folded, w, h)
    }
}

/// Andrew monotone chain; returns hull vertices counterclockwise, collinear
/// points dropped. Degenerate inputs yield fewer than three vertices.
fn convex_hull(pts: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts: Vec<[f64; 2]> = pts.to_vec();
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    let n = pts.len();
    if n <= 2 {
        return pts;
    }
    let cross = |o: [f64; 2], a: [f64; 2], b: [f64; 2]| {
        (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
    };
    let mut hull: Vec<[f64; 2]> = Vec::with_capacity(2 * n);
    for &p in pts.iter() {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
        {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    if hull.len() < 3 {
        // all points collinear: keep the two extremes
        return vec![pts[0], pts[n - 1]];
    }
    hull
}
