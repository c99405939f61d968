//! Rotated-box geometry: the box parameterization, the five-coefficient
//! regression transform between an object box and its reflection box, the
//! Gaussian overlap measure used to supervise box regression, and the
//! rasterization/fitting bridges between boxes and binary masks.

mod gaussian;
mod jet;
mod min_area;
mod raster;

pub use gaussian::{
    box_to_gaussian, kfiou, kfiou_loss, kfiou_loss_grad, kfiou_with_options, GaussianBox,
    KfiouOptions, KFIOU_MAX,
};
pub use min_area::min_area_box;
pub use raster::rasterize_box;

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Oriented rectangle: center `(cx, cy)`, extents `(w, h)` and the rotation
/// of the `w`-edge in degrees, counterclockwise from the x-axis.
///
/// Angles are stored canonically in `[-90, 90)`; a rectangle is invariant
/// under a 180-degree rotation, so every orientation has a representative in
/// that range with unchanged extents.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotatedBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

/// Map an angle in degrees to its 180-degree-periodic representative in `[-90, 90)`.
pub fn canonical_angle(deg: f64) -> f64 {
    let r = (deg + 90.0).rem_euclid(180.0) - 90.0;
    // rem_euclid can land exactly on 90 through rounding
    if r >= 90.0 {
        r - 180.0
    } else {
        r
    }
}

impl RotatedBox {
    /// Build a validated, canonicalized box.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, theta: f64) -> Result<Self> {
        let b = Self { cx, cy, w, h, theta: canonical_angle(theta) };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.cx.is_finite()
            && self.cy.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && self.theta.is_finite();
        if !finite {
            return Err(Error::InvalidBox(format!("non-finite parameter in {self:?}")));
        }
        if self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "extents must be positive, got w={}, h={}",
                self.w, self.h
            )));
        }
        Ok(())
    }

    /// Same rectangle with the angle normalized to `[-90, 90)`.
    pub fn canonicalized(&self) -> Self {
        Self { theta: canonical_angle(self.theta), ..*self }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// The four corners, counterclockwise in the box frame.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let t = self.theta.to_radians();
        let (s, c) = t.sin_cos();
        let hw = self.w / 2.0;
        let hh = self.h / 2.0;
        let locals = [[-hw, -hh], [hw, -hh], [hw, hh], [-hw, hh]];
        locals.map(|[u, v]| [self.cx + c * u - s * v, self.cy + s * u + c * v])
    }

    /// Pixel-center inclusion test; the boundary counts as inside.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let t = self.theta.to_radians();
        let (s, c) = t.sin_cos();
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.w / 2.0 && v.abs() <= self.h / 2.0
    }
}

/// The five regression coefficients mapping an object box to its reflection
/// box: normalized center offsets, log size ratios, and the angle difference
/// in radians.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxRegressionCoeffs {
    pub tx: f64,
    pub ty: f64,
    pub tw: f64,
    pub th: f64,
    pub ttheta: f64,
}

impl BoxRegressionCoeffs {
    pub fn new(tx: f64, ty: f64, tw: f64, th: f64, ttheta: f64) -> Self {
        Self { tx, ty, tw, th, ttheta }
    }

    pub fn to_array(&self) -> [f64; 5] {
        [self.tx, self.ty, self.tw, self.th, self.ttheta]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self { tx: a[0], ty: a[1], tw: a[2], th: a[3], ttheta: a[4] }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite())
    }
}

/// Shortest 180-degree-periodic representative of an angle difference,
/// reduced into `(-90, 90]` degrees.
fn shortest_angle_diff(deg: f64) -> f64 {
    let r = deg.rem_euclid(180.0);
    if r > 90.0 {
        r - 180.0
    } else {
        r
    }
}

/// Regression coefficients from object box to reflection box.
///
/// Center offsets are normalized by the object extents, sizes enter as log
/// ratios, and the angle difference (shortest equivalent, degrees) is scaled
/// to radians.
pub fn encode_regression(b_o: &RotatedBox, b_r: &RotatedBox) -> Result<BoxRegressionCoeffs> {
    b_o.validate()?;
    b_r.validate()?;
    Ok(BoxRegressionCoeffs {
        tx: (b_r.cx - b_o.cx) / b_o.w,
        ty: (b_r.cy - b_o.cy) / b_o.h,
        tw: (b_r.w / b_o.w).ln(),
        th: (b_r.h / b_o.h).ln(),
        ttheta: shortest_angle_diff(b_r.theta - b_o.theta).to_radians(),
    })
}

/// Inverse of [`encode_regression`]: reconstruct the reflection box from the
/// object box and coefficients. The result is canonicalized.
pub fn decode_regression(b_o: &RotatedBox, t: &BoxRegressionCoeffs) -> Result<RotatedBox> {
    b_o.validate()?;
    if !t.is_finite() {
        return Err(Error::InvalidCoefficients(format!("non-finite coefficients {t:?}")));
    }
    let w = b_o.w * t.tw.exp();
    let h = b_o.h * t.th.exp();
    if !w.is_finite() || !h.is_finite() || w <= 0.0 || h <= 0.0 {
        return Err(Error::InvalidCoefficients(format!(
            "size coefficients overflow: tw={}, th={}",
            t.tw, t.th
        )));
    }
    RotatedBox::new(
        b_o.cx + t.tx * b_o.w,
        b_o.cy + t.ty * b_o.h,
        w,
        h,
        b_o.theta + t.ttheta.to_degrees(),
    )
}
