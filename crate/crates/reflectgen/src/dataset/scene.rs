//! Procedural scene synthesis: a textured object above a reflective surface,
//! its reflection composited below, with exact masks and boxes as ground
//! truth.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{validate_tuple, DataTuple, ReflectionType};
use crate::error::{Error, Result};
use crate::geometry::min_area_box;
use crate::img::{quantize8, ImageBuf, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceKind {
    Water,
    GlossyFloor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectShape {
    Ellipse,
    Polygon,
    Sprite,
}

/// Object placement in canvas pixels. `rx`/`ry` are half-extents of the
/// shape's local frame; `rot_deg` rotates that frame (ignored for sprites,
/// which stay axis-aligned).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectParams {
    pub cx: f64,
    pub cy: f64,
    pub rx: f64,
    pub ry: f64,
    pub rot_deg: f64,
}

/// Full recipe for one scene. Texture choice, polygon vertices, ripple phase
/// and similar cosmetic draws all derive from `rng_seed`, so equal specs
/// produce bit-identical tuples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub canvas_h: usize,
    pub canvas_w: usize,
    /// First canvas row belonging to the reflective surface; the mirror line
    /// sits on the boundary between rows `surface_y - 1` and `surface_y`.
    pub surface_y: usize,
    pub surface_kind: SurfaceKind,
    pub object_shape: ObjectShape,
    pub object: ObjectParams,
    pub reflection_type: ReflectionType,
    /// Blend weight of the reflection against the background, in (0, 1].
    pub attenuation: f64,
    pub blur_sigma: f64,
    pub ripple_amp: f64,
    /// Shear of the reflection; consulted only for the "others" type.
    pub shear_deg: f64,
    pub rng_seed: u64,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.canvas_h < 8 || self.canvas_w < 8 {
            return Err(Error::Config("canvas must be at least 8x8".into()));
        }
        if self.surface_y < 2 || self.surface_y >= self.canvas_h {
            return Err(Error::Config(format!(
                "surface_y {} outside canvas of height {}",
                self.surface_y, self.canvas_h
            )));
        }
        if !(self.attenuation > 0.0 && self.attenuation <= 1.0) {
            return Err(Error::Config(format!("attenuation {} not in (0, 1]", self.attenuation)));
        }
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return Err(Error::Config("blur_sigma must be finite and >= 0".into()));
        }
        if !(self.ripple_amp >= 0.0 && self.ripple_amp.is_finite()) {
            return Err(Error::Config("ripple_amp must be finite and >= 0".into()));
        }
        if !(self.shear_deg.is_finite() && self.shear_deg.abs() < 60.0) {
            return Err(Error::Config("shear_deg must be finite and within (-60, 60)".into()));
        }
        let o = &self.object;
        if !(o.rx > 0.5 && o.ry > 0.5 && o.rx.is_finite() && o.ry.is_finite()) {
            return Err(Error::Config("object half-extents must be finite and > 0.5".into()));
        }
        if !(o.cx.is_finite() && o.cy.is_finite() && o.rot_deg.is_finite()) {
            return Err(Error::Config("object placement must be finite".into()));
        }
        Ok(())
    }
}

// Object palettes, two tones each. Every tone in rows 0..=3 keeps red at or
// above 0.85 and rows 4..=5 keep blue at or above 0.82, so any convex mix of
// the two tones stays far from both below-surface backgrounds (water red
// <= 0.13, floor blue <= 0.23) and the composited reflection always clears
// the one-quantization-level visibility threshold.
const PALETTES: [[[f32; 3]; 2]; 6] = [
    [[0.88, 0.20, 0.15], [0.96, 0.55, 0.12]],
    [[0.95, 0.85, 0.15], [0.93, 0.93, 0.90]],
    [[0.85, 0.20, 0.75], [0.95, 0.60, 0.70]],
    [[0.90, 0.35, 0.30], [0.98, 0.80, 0.25]],
    [[0.20, 0.50, 0.90], [0.15, 0.65, 0.82]],
    [[0.55, 0.30, 0.85], [0.55, 0.60, 0.95]],
];

struct Texture {
    palette: [[f32; 3]; 2],
    pattern: u8,
    period: f64,
}

impl Texture {
    fn sample(&self, u: f64, v: f64) -> [f32; 3] {
        let coord = match self.pattern {
            0 => u,
            1 => v,
            2 => (u * u + v * v).sqrt(),
            _ => return self.palette[((u / self.period).floor() + (v / self.period).floor()).rem_euclid(2.0) as usize],
        };
        self.palette[(coord / self.period).floor().rem_euclid(2.0) as usize]
    }
}

enum ShapeTest {
    Ellipse,
    Polygon(Vec<[f64; 2]>),
    Sprite(Vec<[f64; 4]>),
}

impl ShapeTest {
    /// Inclusion test in the object's local frame, boundary inclusive.
    fn contains(&self, u: f64, v: f64, rx: f64, ry: f64) -> bool {
        match self {
            ShapeTest::Ellipse => {
                let a = u / rx;
                let b = v / ry;
                a * a + b * b <= 1.0
            }
            ShapeTest::Polygon(verts) => {
                let n = verts.len();
                for i in 0..n {
                    let a = verts[i];
                    let b = verts[(i + 1) % n];
                    let cross = (b[0] - a[0]) * (v - a[1]) - (b[1] - a[1]) * (u - a[0]);
                    if cross < 0.0 {
                        return false;
                    }
                }
                true
            }
            ShapeTest::Sprite(rects) => rects
                .iter()
                .any(|r| u >= r[0] && u <= r[2] && v >= r[1] && v <= r[3]),
        }
    }
}

/// Renders the full tuple for `spec`. Deterministic for a fixed `rng_seed`.
///
/// The composite holds background plus object; the target additionally holds
/// the reflection, blended below `surface_y` with weight `attenuation`. The
/// reflection of target pixel row `y` samples object row `2*surface_y - 1 - y`
/// (an exact row mirror), shifted horizontally by the ripple field and, for
/// the "others" type, by a depth-proportional shear. Both images are snapped
/// to 8-bit levels so disk round-trips are exact, and `refl_mask` marks
/// precisely the pixels where they differ.
pub fn generate_scene(spec: &SceneSpec) -> Result<DataTuple> {
    spec.validate()?;
    let (h, w, sy) = (spec.canvas_h, spec.canvas_w, spec.surface_y);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);

    let texture = Texture {
        palette: PALETTES[rng.random_range(0..PALETTES.len())],
        pattern: rng.random_range(0..4u8),
        period: rng.random_range(2.2..5.5),
    };
    let streak_phase = rng.random_range(0.0..std::f64::consts::TAU);
    let plank_period = rng.random_range(6..11usize);
    let shape = match spec.object_shape {
        ObjectShape::Ellipse => ShapeTest::Ellipse,
        ObjectShape::Polygon => {
            let n = rng.random_range(3..=7usize);
            let mut verts = Vec::with_capacity(n);
            for k in 0..n {
                let base = std::f64::consts::TAU * k as f64 / n as f64;
                let ang = base + rng.random_range(-0.2..0.2) * std::f64::consts::TAU / n as f64;
                let r = rng.random_range(0.6..1.0);
                verts.push([spec.object.rx * r * ang.cos(), spec.object.ry * r * ang.sin()]);
            }
            ShapeTest::Polygon(verts)
        }
        ObjectShape::Sprite => {
            let (rx, ry) = (spec.object.rx, spec.object.ry);
            let head_w = rng.random_range(0.35..0.6) * rx;
            let leg_w = rng.random_range(0.15..0.3) * rx;
            ShapeTest::Sprite(vec![
                [-rx, -0.15 * ry, rx, 0.55 * ry],
                [-head_w, -ry, head_w, -0.15 * ry],
                [-rx * 0.8, 0.55 * ry, -rx * 0.8 + leg_w, ry],
                [rx * 0.8 - leg_w, 0.55 * ry, rx * 0.8, ry],
            ])
        }
    };
    let ripple_wavelength = rng.random_range(6.0..14.0);
    let ripple_phase = rng.random_range(0.0..std::f64::consts::TAU);

    let mut composite = ImageBuf::new(w, h);
    paint_background(&mut composite, sy, spec.surface_kind, streak_phase, plank_period);

    // object footprint over the whole canvas; anything at or below the
    // surface row means the SceneSpec broke the strictly-above placement
    let mut fg_mask = Mask::new(w, h);
    let o = &spec.object;
    let rot = if matches!(spec.object_shape, ObjectShape::Sprite) { 0.0 } else { o.rot_deg.to_radians() };
    let (rs, rc) = rot.sin_cos();
    let reach = o.rx.max(o.ry) * 1.5 + 2.0;
    let x_lo = ((o.cx - reach).floor().max(0.0)) as usize;
    let x_hi = ((o.cx + reach).ceil().min(w as f64 - 1.0)) as usize;
    let y_lo = ((o.cy - reach).floor().max(0.0)) as usize;
    let y_hi = ((o.cy + reach).ceil().min(h as f64 - 1.0)) as usize;
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let dx = x as f64 + 0.5 - o.cx;
            let dy = y as f64 + 0.5 - o.cy;
            let u = rc * dx + rs * dy;
            let v = -rs * dx + rc * dy;
            if shape.contains(u, v, o.rx, o.ry) {
                if y >= sy {
                    return Err(Error::DegenerateScene(
                        "object footprint reaches the reflective surface".into(),
                    ));
                }
                fg_mask.set(x, y, true);
                composite.set(x, y, texture.sample(u, v));
            }
        }
    }
    if fg_mask.is_empty() {
        return Err(Error::DegenerateScene("object footprint misses the canvas".into()));
    }
    for v in composite.data_mut() {
        *v = quantize8(*v);
    }

    // inverse-map the reflection: nearest-neighbor source lookup keeps the
    // footprint binary, so the mask stays exact under ripple and shear
    let shear_t = match spec.reflection_type {
        ReflectionType::Others => spec.shear_deg.to_radians().tan(),
        ReflectionType::Vertical => 0.0,
    };
    let mut coverage = Mask::new(w, h);
    let mut refl = vec![[0.0f32; 3]; w * h];
    for y in sy..h {
        let depth = y as f64 + 0.5 - sy as f64;
        let shift = spec.ripple_amp
            * (std::f64::consts::TAU * depth / ripple_wavelength + ripple_phase).sin()
            + shear_t * depth;
        // exact mirror row, strictly above the surface; negative when the
        // surface sits high enough that this row has no source
        let y_src = 2 * sy as isize - 1 - y as isize;
        if y_src < 0 {
            continue;
        }
        let y_src = y_src as usize;
        for x in 0..w {
            let x_src = (x as f64 - shift).round();
            if x_src < 0.0 || x_src >= w as f64 {
                continue;
            }
            let x_src = x_src as usize;
            if fg_mask.get(x_src, y_src) {
                coverage.set(x, y, true);
                refl[y * w + x] = composite.get(x_src, y_src);
            }
        }
    }
    if coverage.is_empty() {
        return Err(Error::DegenerateScene("reflection lands outside the canvas".into()));
    }

    if spec.blur_sigma > 0.0 {
        blur_within(&mut refl, &coverage, spec.blur_sigma);
    }

    let mut target = composite.clone();
    let a = spec.attenuation as f32;
    for (x, y) in coverage.foreground() {
        let c = composite.get(x, y);
        let r = refl[y * w + x];
        let blended = [
            quantize8((1.0 - a) * c[0] + a * r[0]),
            quantize8((1.0 - a) * c[1] + a * r[1]),
            quantize8((1.0 - a) * c[2] + a * r[2]),
        ];
        target.set(x, y, blended);
    }

    // the stored mask is wherever the images actually differ after 8-bit
    // snapping, so mask and pixels can never disagree on disk
    let mut refl_mask = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            if composite.max_abs_diff_at(&target, x, y) > 0.5 / 255.0 {
                refl_mask.set(x, y, true);
            }
        }
    }
    if refl_mask.is_empty() {
        return Err(Error::DegenerateScene("reflection is invisible after blending".into()));
    }

    let box_o = min_area_box(&fg_mask)?;
    let box_r = min_area_box(&refl_mask)?;
    let tuple = DataTuple {
        composite,
        fg_mask,
        refl_mask,
        target,
        box_o,
        box_r,
        type_label: spec.reflection_type,
    };
    validate_tuple(&tuple)?;
    Ok(tuple)
}

fn paint_background(
    img: &mut ImageBuf,
    sy: usize,
    kind: SurfaceKind,
    streak_phase: f64,
    plank_period: usize,
) {
    let (w, h) = (img.width(), img.height());
    for y in 0..h {
        let above = y < sy;
        let f_above = y as f32 / sy.max(1) as f32;
        let f_below = (y - sy.min(y)) as f32 / (h - sy).max(1) as f32;
        for x in 0..w {
            let px = match (kind, above) {
                (SurfaceKind::Water, true) => lerp3([0.62, 0.80, 0.93], [0.80, 0.88, 0.95], f_above),
                (SurfaceKind::Water, false) => {
                    let streak =
                        0.02 * ((y as f64 * 0.9 + streak_phase).sin() as f32);
                    let base = lerp3([0.10, 0.28, 0.42], [0.04, 0.14, 0.30], f_below);
                    [base[0] + streak, base[1] + streak, base[2] + streak]
                }
                (SurfaceKind::GlossyFloor, true) => {
                    lerp3([0.58, 0.55, 0.50], [0.68, 0.65, 0.60], f_above)
                }
                (SurfaceKind::GlossyFloor, false) => {
                    let base = lerp3([0.48, 0.34, 0.20], [0.40, 0.28, 0.16], f_below);
                    let seam = x % plank_period == 0;
                    if seam { [base[0] * 0.85, base[1] * 0.85, base[2] * 0.85] } else { base }
                }
            };
            img.set(x, y, px);
        }
    }
}

fn lerp3(a: [f32; 3], b: [f32; 3], t: f32) -> [f32; 3] {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

/// Mask-normalized Gaussian blur of the reflection colors. Only pixels inside
/// `coverage` contribute and only they are rewritten, so colors remain convex
/// mixes of in-footprint samples and the footprint itself never spreads.
fn blur_within(colors: &mut [[f32; 3]], coverage: &Mask, sigma: f64) {
    let (w, h) = (coverage.width(), coverage.height());
    let radius = (3.0 * sigma).ceil().min(8.0) as isize;
    let denom = (2.0 * sigma * sigma) as f32;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    for i in -radius..=radius {
        kernel.push((-((i * i) as f32) / denom).exp());
    }
    let src = colors.to_vec();
    for (x, y) in coverage.foreground() {
        let mut acc = [0.0f32; 3];
        let mut wsum = 0.0f32;
        for dy in -radius..=radius {
            let yy = y as isize + dy;
            if yy < 0 || yy >= h as isize {
                continue;
            }
            for dx in -radius..=radius {
                let xx = x as isize + dx;
                if xx < 0 || xx >= w as isize {
                    continue;
                }
                if !coverage.get(xx as usize, yy as usize) {
                    continue;
                }
                let k = kernel[(dy + radius) as usize] * kernel[(dx + radius) as usize];
                let s = src[yy as usize * w + xx as usize];
                acc[0] += k * s[0];
                acc[1] += k * s[1];
                acc[2] += k * s[2];
                wsum += k;
            }
        }
        colors[y * w + x] = [acc[0] / wsum, acc[1] / wsum, acc[2] / wsum];
    }
}

/// Draws a SceneSpec whose object and full reflection are guaranteed to fit
/// on canvas, so generation cannot come out degenerate and vertical tuples
/// keep exact mirror symmetry.
pub fn sample_scene_spec(
    rng: &mut ChaCha8Rng,
    canvas_h: usize,
    canvas_w: usize,
    ty: ReflectionType,
) -> SceneSpec {
    let h = canvas_h as f64;
    let w = canvas_w as f64;

    // the surface kind is the visible cue the type label correlates with;
    // without it the reflection-free input would carry no type signal
    let cue = rng.random_bool(0.97);
    let surface_kind = match (ty, cue) {
        (ReflectionType::Vertical, true) | (ReflectionType::Others, false) => SurfaceKind::Water,
        _ => SurfaceKind::GlossyFloor,
    };

    let sy = rng.random_range((0.45 * h) as usize..=(0.60 * h) as usize);
    let depth_cap = ((canvas_h - sy) as f64 - 2.0).min(0.32 * h);
    let r_hi = ((depth_cap - 2.0) / 2.0)
        .min((sy as f64 - 6.0) / 2.0)
        .min(0.15 * h.max(w));
    let r_lo = (0.08 * h).max(3.0).min(r_hi);
    let rmax = rng.random_range(r_lo..=r_hi);
    let aspect = rng.random_range(0.55..1.0);
    let (rx, ry) = if rng.random_bool(0.5) { (rmax, rmax * aspect) } else { (rmax * aspect, rmax) };

    let shape = match rng.random_range(0..3u8) {
        0 => ObjectShape::Ellipse,
        1 => ObjectShape::Polygon,
        _ => ObjectShape::Sprite,
    };
    let rot_deg = rng.random_range(-75.0..75.0);

    let attenuation = rng.random_range(0.35..0.95);
    let blur_sigma = if rng.random_bool(0.4) { rng.random_range(0.4..1.2) } else { 0.0 };
    let (ripple_amp, shear_deg): (f64, f64) = match ty {
        ReflectionType::Vertical => {
            let amp_hi = 0.03 * h;
            let amp = if rng.random_bool(0.5) { rng.random_range(0.35 * amp_hi..amp_hi) } else { 0.0 };
            (amp, 0.0)
        }
        ReflectionType::Others => {
            let mag = rng.random_range(8.0..25.0);
            (0.0, if rng.random_bool(0.5) { mag } else { -mag })
        }
    };

    // vertical margins keep the object strictly above the surface and the
    // whole mirrored footprint on canvas
    let cy_lo = (rmax + 2.0).max(sy as f64 + rmax - depth_cap);
    let cy_hi = sy as f64 - 2.0 - rmax;
    let cy = rng.random_range(cy_lo..=cy_hi.max(cy_lo));

    let depth_max = sy as f64 - cy + rmax;
    let reach = shear_deg.to_radians().tan().abs() * depth_max + ripple_amp;
    let m = rmax + reach + 2.0;
    let cx = rng.random_range(m..=(w - m).max(m));

    SceneSpec {
        canvas_h,
        canvas_w,
        surface_y: sy,
        surface_kind,
        object_shape: shape,
        object: ObjectParams { cx, cy, rx, ry, rot_deg },
        reflection_type: ty,
        attenuation,
        blur_sigma,
        ripple_amp,
        shear_deg,
        rng_seed: rng.next_u64(),
    }
}
