//! Oracles used by the integration suites. Everything here recomputes the
//! quantity under test from first principles (quadrature, half-plane tests,
//! corner matching) so a shared bug in the library cannot hide itself.

#![allow(dead_code)]

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reflectgen::dataset::{generate_scene, sample_scene_spec, DataTuple, ReflectionType};
use reflectgen::geometry::{box_to_gaussian, GaussianBox, RotatedBox};
use reflectgen::img::Mask;

/// In-memory twin of dataset sampling: same master stream, same label draw,
/// same deterministic retry on degenerate scenes, no image files.
pub fn sample_tuples(n: usize, type_ratio: f64, canvas: usize, seed: u64) -> Vec<DataTuple> {
    let mut master = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let ty = if master.random_bool(type_ratio) {
            ReflectionType::Vertical
        } else {
            ReflectionType::Others
        };
        let mut child = master.next_u64();
        let mut tuple = None;
        for _ in 0..64 {
            let mut crng = ChaCha8Rng::seed_from_u64(child);
            let spec = sample_scene_spec(&mut crng, canvas, canvas, ty);
            match generate_scene(&spec) {
                Ok(t) => {
                    tuple = Some(t);
                    break;
                }
                Err(reflectgen::Error::DegenerateScene(_)) => child = crng.next_u64(),
                Err(e) => panic!("scene generation failed: {e}"),
            }
        }
        out.push(tuple.unwrap_or_else(|| panic!("no viable scene for tuple {i}")));
    }
    out
}

/// Random box with every parameter away from degeneracy. Bounds are wide
/// enough to exercise anisotropy and all angle quadrants.
pub fn random_box(rng: &mut ChaCha8Rng) -> RotatedBox {
    let cx = rng.random_range(-20.0..140.0);
    let cy = rng.random_range(-20.0..140.0);
    let w = rng.random_range(2.0..80.0);
    let h = rng.random_range(2.0..80.0);
    let theta = rng.random_range(-360.0..360.0);
    RotatedBox::new(cx, cy, w, h, theta).unwrap()
}

/// Box kept strictly inside a `size` x `size` canvas.
pub fn random_box_on_canvas(rng: &mut ChaCha8Rng, size: usize) -> RotatedBox {
    let s = size as f64;
    let w = rng.random_range(4.0..0.35 * s);
    let h = rng.random_range(4.0..0.35 * s);
    let margin = 0.5 * (w * w + h * h).sqrt() + 2.0;
    let cx = rng.random_range(margin..s - margin);
    let cy = rng.random_range(margin..s - margin);
    let theta = rng.random_range(-360.0..360.0);
    RotatedBox::new(cx, cy, w, h, theta).unwrap()
}

/// Pair of moderately sized, moderately separated boxes so the fused mass is
/// far from underflow and quadrature converges on a reasonable grid.
pub fn random_close_pair(rng: &mut ChaCha8Rng) -> (RotatedBox, RotatedBox) {
    let mk = |rng: &mut ChaCha8Rng, cx: f64, cy: f64| {
        let w = rng.random_range(4.0..40.0);
        let h = rng.random_range(4.0..40.0);
        let theta = rng.random_range(-360.0..360.0);
        RotatedBox::new(cx, cy, w, h, theta).unwrap()
    };
    let cx = rng.random_range(0.0..60.0);
    let cy = rng.random_range(0.0..60.0);
    let dx = rng.random_range(-25.0..25.0);
    let dy = rng.random_range(-25.0..25.0);
    let a = mk(rng, cx, cy);
    let b = mk(rng, cx + dx, cy + dy);
    (a, b)
}

/// Largest distance between the two corner sets under optimal matching in
/// either direction; insensitive to corner order and winding.
pub fn corner_set_distance(a: &RotatedBox, b: &RotatedBox) -> f64 {
    let ca = a.corners();
    let cb = b.corners();
    let one_way = |from: &[[f64; 2]; 4], to: &[[f64; 2]; 4]| -> f64 {
        from.iter()
            .map(|p| {
                to.iter()
                    .map(|q| ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min)
            })
            .fold(0.0, f64::max)
    };
    one_way(&ca, &cb).max(one_way(&cb, &ca))
}

fn det2(m: &[[f64; 2]; 2]) -> f64 {
    m[0][0] * m[1][1] - m[0][1] * m[1][0]
}

/// Normalized bivariate Gaussian density at (x, y).
pub fn gaussian_density(g: &GaussianBox, x: f64, y: f64) -> f64 {
    let det = det2(&g.cov);
    let inv = [
        [g.cov[1][1] / det, -g.cov[0][1] / det],
        [-g.cov[1][0] / det, g.cov[0][0] / det],
    ];
    let dx = x - g.mean[0];
    let dy = y - g.mean[1];
    let q = dx * dx * inv[0][0] + 2.0 * dx * dy * inv[0][1] + dy * dy * inv[1][1];
    (-0.5 * q).exp() / (2.0 * std::f64::consts::PI * det.sqrt())
}

/// Fused overlap mass of two boxes by brute-force midpoint quadrature of the
/// Gaussian density product. The closed form being checked is
/// `vf = sqrt(det1 * det2 / det(S1 + S2)) * exp(-0.5 d' (S1+S2)^-1 d)`, and
/// `integral(N1 * N2) = N(mu1; mu2, S1 + S2)`, so
/// `vf = 2 pi * sqrt(det1 * det2) * integral(N1 * N2)`. Only the scalar
/// identity, not the integral, is taken on trust; the integral itself is
/// summed numerically on a grid covering both densities.
pub fn quadrature_fused_mass(a: &RotatedBox, b: &RotatedBox) -> f64 {
    let g1 = box_to_gaussian(a).unwrap();
    let g2 = box_to_gaussian(b).unwrap();
    // sqrt(trace) bounds the largest directional standard deviation.
    let s1 = (g1.cov[0][0] + g1.cov[1][1]).sqrt();
    let s2 = (g2.cov[0][0] + g2.cov[1][1]).sqrt();
    let lo_x = (g1.mean[0] - 8.0 * s1).min(g2.mean[0] - 8.0 * s2);
    let hi_x = (g1.mean[0] + 8.0 * s1).max(g2.mean[0] + 8.0 * s2);
    let lo_y = (g1.mean[1] - 8.0 * s1).min(g2.mean[1] - 8.0 * s2);
    let hi_y = (g1.mean[1] + 8.0 * s1).max(g2.mean[1] + 8.0 * s2);
    let step = 0.2;
    let nx = ((hi_x - lo_x) / step).ceil() as usize;
    let ny = ((hi_y - lo_y) / step).ceil() as usize;
    let mut integral = 0.0;
    for iy in 0..ny {
        let y = lo_y + (iy as f64 + 0.5) * step;
        for ix in 0..nx {
            let x = lo_x + (ix as f64 + 0.5) * step;
            integral += gaussian_density(&g1, x, y) * gaussian_density(&g2, x, y);
        }
    }
    integral *= step * step;
    let d1 = det2(&g1.cov);
    let d2 = det2(&g2.cov);
    2.0 * std::f64::consts::PI * (d1 * d2).sqrt() * integral
}

/// Fused mass as the library computes it, recovered from the published ratio:
/// `kfiou = vf / (v1 + v2 - vf)` with `v = sqrt(det cov)`.
pub fn implied_fused_mass(a: &RotatedBox, b: &RotatedBox) -> f64 {
    let k = reflectgen::geometry::kfiou(a, b).unwrap();
    let v1 = det2(&box_to_gaussian(a).unwrap().cov).sqrt();
    let v2 = det2(&box_to_gaussian(b).unwrap().cov).sqrt();
    k * (v1 + v2) / (1.0 + k)
}

/// Rasterization oracle: a pixel is inside when its center sits on the inner
/// side of all four edges built directly from the polygon corners. Boundary
/// contact counts as inside, matching the library convention.
pub fn halfplane_raster(b: &RotatedBox, height: usize, width: usize) -> Mask {
    let c = b.corners();
    let mut area2 = 0.0;
    for i in 0..4 {
        let j = (i + 1) % 4;
        area2 += c[i][0] * c[j][1] - c[j][0] * c[i][1];
    }
    let orient = if area2 >= 0.0 { 1.0 } else { -1.0 };
    let mut m = Mask::new(width, height);
    for y in 0..height {
        let py = y as f64 + 0.5;
        for x in 0..width {
            let px = x as f64 + 0.5;
            let mut inside = true;
            for i in 0..4 {
                let j = (i + 1) % 4;
                let ex = c[j][0] - c[i][0];
                let ey = c[j][1] - c[i][1];
                let cross = ex * (py - c[i][1]) - ey * (px - c[i][0]);
                let eps = 1e-9 * (ex.hypot(ey)).max(1.0);
                if orient * cross < -eps {
                    inside = false;
                    break;
                }
            }
            m.set(x, y, inside);
        }
    }
    m
}
