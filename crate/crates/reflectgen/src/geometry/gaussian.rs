//! Gaussian embedding of rotated boxes and the Kalman-fusion overlap measure.
//!
//! A box maps to a Gaussian with mean at the box center and covariance
//! `R diag(w^2/4, h^2/4) R^T`. The overlap of two boxes is measured through
//! the Kalman fusion of their Gaussians: with `S = S1 + S2`,
//!
//! ```text
//! Sf  = S1 S^-1 S2
//! vi  = |Si|^(1/2)                      (volume, constant factor dropped)
//! a   = exp(-1/2 d^T S^-1 d)            (center factor, d = mu1 - mu2)
//! vf  = a |Sf|^(1/2)
//! kfiou = vf / (v1 + v2 - vf)
//! ```
//!
//! The measure peaks at 1/3 for identical boxes and decays to 0 as the
//! centers separate. The regression loss is `exp(1 - kfiou)`.

use super::jet::{Jet, Real};
use super::RotatedBox;
use crate::error::{Error, Result};

/// Upper bound of the overlap measure, attained exactly at identity.
pub const KFIOU_MAX: f64 = 1.0 / 3.0;

/// 2-D Gaussian stand-in for a rotated box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianBox {
    /// Box center.
    pub mean: [f64; 2],
    /// Symmetric positive-definite covariance, `[[s11, s12], [s12, s22]]`.
    pub cov: [[f64; 2]; 2],
}

/// Gaussian embedding of a rotated box.
pub fn box_to_gaussian(b: &RotatedBox) -> Result<GaussianBox> {
    b.validate()?;
    let t = b.theta.to_radians();
    let (s, c) = t.sin_cos();
    let a = b.w * b.w / 4.0;
    let bb = b.h * b.h / 4.0;
    let s11 = a * c * c + bb * s * s;
    let s12 = (a - bb) * c * s;
    let s22 = a * s * s + bb * c * c;
    Ok(GaussianBox { mean: [b.cx, b.cy], cov: [[s11, s12], [s12, s22]] })
}

/// Options for the overlap measure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KfiouOptions {
    /// Scale the fused volume by the center distance factor `a`. Disabling
    /// reduces the measure to a pure shape overlap, insensitive to offsets.
    pub center_factor: bool,
}

impl Default for KfiouOptions {
    fn default() -> Self {
        Self { center_factor: true }
    }
}

/// Generic core shared by the f64 path and the jet (gradient) path.
///
/// Boxes are passed as `(cx, cy, w, h, theta_deg)` tuples of the scalar type.
fn kfiou_impl<R: Real>(b1: &[R; 5], b2: &[R; 5], opts: KfiouOptions) -> Result<R> {
    let quarter = R::constant(0.25);
    let deg2rad = R::constant(std::f64::consts::PI / 180.0);

    let cov = |b: &[R; 5]| {
        let t = b[4] * deg2rad;
        let (s, c) = (t.sin(), t.cos());
        let a = b[2] * b[2] * quarter;
        let e = b[3] * b[3] * quarter;
        let s11 = a * c * c + e * s * s;
        let s12 = (a - e) * c * s;
        let s22 = a * s * s + e * c * c;
        (s11, s12, s22, a * e)
    };

    let (a11, a12, a22, det1) = cov(b1);
    let (b11, b12, b22, det2) = cov(b2);

    let s11 = a11 + b11;
    let s12 = a12 + b12;
    let s22 = a22 + b22;
    let det_s = s11 * s22 - s12 * s12;
    if det_s.value() <= 0.0 || !det_s.value().is_finite() {
        return Err(Error::Numeric(format!(
            "summed covariance is not positive definite (det = {})",
            det_s.value()
        )));
    }

    // |Sf| = |S1||S2|/|S|
    let v1 = det1.sqrt();
    let v2 = det2.sqrt();
    let mut vf = (det1 * det2 / det_s).sqrt();

    if opts.center_factor {
        let dx = b1[0] - b2[0];
        let dy = b1[1] - b2[1];
        // d^T S^-1 d through the adjugate
        let quad = (dx * dx * s22 - R::constant(2.0) * dx * dy * s12 + dy * dy * s11) / det_s;
        vf = vf * (-(quad * R::constant(0.5))).exp();
    }

    Ok(vf / (v1 + v2 - vf))
}

fn box_params(b: &RotatedBox) -> [f64; 5] {
    [b.cx, b.cy, b.w, b.h, b.theta]
}

/// Kalman-fusion overlap of two rotated boxes, in `(0, 1/3]`.
pub fn kfiou(b1: &RotatedBox, b2: &RotatedBox) -> Result<f64> {
    kfiou_with_options(b1, b2, KfiouOptions::default())
}

pub fn kfiou_with_options(b1: &RotatedBox, b2: &RotatedBox, opts: KfiouOptions) -> Result<f64> {
    b1.validate()?;
    b2.validate()?;
    kfiou_impl(&box_params(b1), &box_params(b2), opts)
}

/// Regression loss `exp(1 - kfiou)`, in `[e^(2/3), e)`.
pub fn kfiou_loss(b_pred: &RotatedBox, b_gt: &RotatedBox) -> Result<f64> {
    Ok((1.0 - kfiou(b_pred, b_gt)?).exp())
}

/// Loss value together with its gradient against the five predicted box
/// parameters `(cx, cy, w, h, theta_deg)`, computed with dual numbers.
pub fn kfiou_loss_grad(b_pred: &RotatedBox, b_gt: &RotatedBox) -> Result<(f64, [f64; 5])> {
    b_pred.validate()?;
    b_gt.validate()?;
    let p = box_params(b_pred);
    let pred: [Jet<5>; 5] = std::array::from_fn(|i| Jet::variable(p[i], i));
    let gt = box_params(b_gt).map(Jet::<5>::constant);
    let kf = kfiou_impl(&pred, &gt, KfiouOptions::default())?;
    let one = Jet::<5>::constant(1.0);
    let loss = (one - kf).exp();
    Ok((loss.v, loss.d))
}
