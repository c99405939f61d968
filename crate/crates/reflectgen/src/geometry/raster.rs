//! Rotated-box rasterization.

use super::RotatedBox;
use crate::error::Result;
use crate::img::Mask;

/// Rasterize a rotated box onto a `height x width` canvas.
///
/// A pixel is set when its center `(x + 0.5, y + 0.5)` lies inside the box or
/// on its boundary. Boxes extending past the canvas are clipped.
pub fn rasterize_box(b: &RotatedBox, height: usize, width: usize) -> Result<Mask> {
    b.validate()?;
    let mut mask = Mask::new(width, height);

    // scan only the box's axis-aligned footprint
    let corners = b.corners();
    let min_x = corners.iter().map(|c| c[0]).fold(f64::INFINITY, f64::min);
    let max_x = corners.iter().map(|c| c[0]).fold(f64::NEG_INFINITY, f64::max);
    let min_y = corners.iter().map(|c| c[1]).fold(f64::INFINITY, f64::min);
    let max_y = corners.iter().map(|c| c[1]).fold(f64::NEG_INFINITY, f64::max);

    let x0 = (min_x - 1.0).floor().max(0.0) as usize;
    let y0 = (min_y - 1.0).floor().max(0.0) as usize;
    if min_x >= width as f64 || min_y >= height as f64 || max_x < 0.0 || max_y < 0.0 {
        return Ok(mask);
    }
    let x1 = (max_x.ceil() as usize).min(width.saturating_sub(1));
    let y1 = (max_y.ceil() as usize).min(height.saturating_sub(1));

    for y in y0..=y1 {
        for x in x0..=x1 {
            if b.contains(x as f64 + 0.5, y as f64 + 0.5) {
                mask.set(x, y, true);
            }
        }
    }
    Ok(mask)
}
