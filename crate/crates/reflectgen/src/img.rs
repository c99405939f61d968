//! In-memory raster types shared across the crate.
//!
//! Images are interleaved RGB `f32` in `[0, 1]`, row-major, origin at the
//! top-left corner with y growing downward. Pixel `(x, y)` has its center at
//! `(x + 0.5, y + 0.5)` in continuous coordinates.

use crate::error::{Error, Result};

/// Interleaved RGB image, `f32` in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuf {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl ImageBuf {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![0.0; width * height * 3] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected {} samples for {width}x{height} RGB, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, px: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i] = px[0];
        self.data[i + 1] = px[1];
        self.data[i + 2] = px[2];
    }

    pub fn fill(&mut self, px: [f32; 3]) {
        for chunk in self.data.chunks_exact_mut(3) {
            chunk.copy_from_slice(&px);
        }
    }

    /// Largest per-channel absolute difference at one pixel.
    #[inline]
    pub fn max_abs_diff_at(&self, other: &ImageBuf, x: usize, y: usize) -> f32 {
        let a = self.get(x, y);
        let b = other.get(x, y);
        (a[0] - b[0]).abs().max((a[1] - b[1]).abs()).max((a[2] - b[2]).abs())
    }

    pub fn same_shape(&self, other: &ImageBuf) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Flip rows top-to-bottom.
    pub fn flip_vertical(&self) -> ImageBuf {
        let mut out = ImageBuf::new(self.width, self.height);
        for y in 0..self.height {
            let src = (self.height - 1 - y) * self.width * 3;
            let dst = y * self.width * 3;
            out.data[dst..dst + self.width * 3]
                .copy_from_slice(&self.data[src..src + self.width * 3]);
        }
        out
    }

    /// Axis-aligned crop. The rectangle must lie inside the image.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<ImageBuf> {
        if x0 + w > self.width || y0 + h > self.height || w == 0 || h == 0 {
            return Err(Error::ShapeMismatch(format!(
                "crop {w}x{h}+{x0}+{y0} outside {}x{}",
                self.width, self.height
            )));
        }
        let mut out = ImageBuf::new(w, h);
        for y in 0..h {
            let src = ((y0 + y) * self.width + x0) * 3;
            let dst = y * w * 3;
            out.data[dst..dst + w * 3].copy_from_slice(&self.data[src..src + w * 3]);
        }
        Ok(out)
    }

    /// Bilinear resize to `w x h`.
    pub fn resize(&self, w: usize, h: usize) -> ImageBuf {
        let mut out = ImageBuf::new(w, h);
        if w == 0 || h == 0 {
            return out;
        }
        let sx = self.width as f32 / w as f32;
        let sy = self.height as f32 / h as f32;
        for y in 0..h {
            // map output pixel center back into source coordinates
            let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, self.height as f32 - 1.0);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(self.height - 1);
            let wy = fy - y0 as f32;
            for x in 0..w {
                let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, self.width as f32 - 1.0);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(self.width - 1);
                let wx = fx - x0 as f32;
                let mut px = [0.0f32; 3];
                let p00 = self.get(x0, y0);
                let p10 = self.get(x1, y0);
                let p01 = self.get(x0, y1);
                let p11 = self.get(x1, y1);
                for c in 0..3 {
                    let top = p00[c] * (1.0 - wx) + p10[c] * wx;
                    let bot = p01[c] * (1.0 - wx) + p11[c] * wx;
                    px[c] = top * (1.0 - wy) + bot * wy;
                }
                out.set(x, y, px);
            }
        }
        out
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

/// Binary mask with the same coordinate conventions as [`ImageBuf`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self { width, height, data: vec![false; width * height] }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "expected {} samples for {width}x{height} mask, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn intersects(&self, other: &Mask) -> bool {
        self.data.iter().zip(&other.data).any(|(&a, &b)| a && b)
    }

    /// Foreground pixel coordinates as `(x, y)` pairs.
    pub fn foreground(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    /// Tight axis-aligned bounding box `(x0, y0, w, h)` of the foreground.
    pub fn bounding_box(&self) -> Result<(usize, usize, usize, usize)> {
        let mut x0 = usize::MAX;
        let mut y0 = usize::MAX;
        let mut x1 = 0usize;
        let mut y1 = 0usize;
        let mut any = false;
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    any = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        if !any {
            return Err(Error::EmptyRegion("mask has no foreground pixels".into()));
        }
        Ok((x0, y0, x1 - x0 + 1, y1 - y0 + 1))
    }
}

/// Separable Gaussian blur with reflected borders. `sigma <= 0` is a copy.
pub fn gaussian_blur(src: &[f32], width: usize, height: usize, channels: usize, sigma: f32) -> Vec<f32> {
    if sigma <= 0.0 {
        return src.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * radius + 1) as usize);
    let denom = 2.0 * sigma * sigma;
    for i in -radius..=radius {
        kernel.push((-((i * i) as f32) / denom).exp());
    }
    let sum: f32 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= sum;
    }

    let reflect = |i: isize, n: isize| -> usize {
        let mut i = i;
        if i < 0 {
            i = -i - 1;
        }
        if i >= n {
            i = 2 * n - 1 - i;
        }
        i.clamp(0, n - 1) as usize
    };

    // horizontal pass
    let mut tmp = vec![0.0f32; src.len()];
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + ki as isize - radius, width as isize);
                    acc += k * src[(y * width + sx) * channels + c];
                }
                tmp[(y * width + x) * channels + c] = acc;
            }
        }
    }
    // vertical pass
    let mut out = vec![0.0f32; src.len()];
    for y in 0..height {
        for x in 0..width {
            for c in 0..channels {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + ki as isize - radius, height as isize);
                    acc += k * tmp[(sy * width + x) * channels + c];
                }
                out[(y * width + x) * channels + c] = acc;
            }
        }
    }
    out
}

/// Snaps a channel value to the nearest 8-bit level, staying in `[0, 1]`.
pub fn quantize8(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn to_u8(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_rgb_png(img: &ImageBuf, path: &std::path::Path) -> Result<()> {
    let mut out = image::RgbImage::new(img.width() as u32, img.height() as u32);
    for y in 0..img.height() {
        for x in 0..img.width() {
            let px = img.get(x, y);
            out.put_pixel(x as u32, y as u32, image::Rgb([to_u8(px[0]), to_u8(px[1]), to_u8(px[2])]));
        }
    }
    out.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_rgb_png(path: &std::path::Path) -> Result<ImageBuf> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let decoded = image::open(path)?.into_rgb8();
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let mut img = ImageBuf::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let p = decoded.get_pixel(x as u32, y as u32);
            img.set(x, y, [p[0] as f32 / 255.0, p[1] as f32 / 255.0, p[2] as f32 / 255.0]);
        }
    }
    Ok(img)
}

pub fn save_mask_png(mask: &Mask, path: &std::path::Path) -> Result<()> {
    let mut out = image::GrayImage::new(mask.width() as u32, mask.height() as u32);
    for y in 0..mask.height() {
        for x in 0..mask.width() {
            out.put_pixel(x as u32, y as u32, image::Luma([if mask.get(x, y) { 255 } else { 0 }]));
        }
    }
    out.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

pub fn load_mask_png(path: &std::path::Path) -> Result<Mask> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let decoded = image::open(path)?.into_luma8();
    let (w, h) = (decoded.width() as usize, decoded.height() as usize);
    let mut mask = Mask::new(w, h);
    for y in 0..h {
        for x in 0..w {
            mask.set(x, y, decoded.get_pixel(x as u32, y as u32)[0] > 127);
        }
    }
    Ok(mask)
}
