//! Shared network plumbing on candle: deterministic parameter seeding,
//! raster/tensor conversion, seeded Gaussian draws, and the conv blocks the
//! encoders and the denoiser are built from.

use candle_core::{DType, Device, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, GroupNorm, Linear, Module, VarBuilder, VarMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::img::{ImageBuf, Mask};

/// Rewrites every variable of `varmap` from a ChaCha stream keyed by `seed`,
/// visiting names in sorted order so the assignment is reproducible no matter
/// how the layers were constructed. Rules: names containing "zero" and all
/// biases become zeros, rank-one weights (norm gains) become ones, everything
/// else is Kaiming-normal over its fan-in.
pub fn seed_parameters(varmap: &VarMap, seed: u64) -> Result<()> {
    let data = varmap.data().lock().unwrap();
    let mut names: Vec<String> = data.keys().cloned().collect();
    names.sort();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for name in &names {
        let var = &data[name];
        let shape = var.shape().clone();
        let dtype = var.dtype();
        let device = var.device().clone();
        let dims = shape.dims();
        let value = if name.contains("zero") || name.ends_with(".bias") || name == "bias" {
            Tensor::zeros(&shape, dtype, &device)?
        } else if dims.len() <= 1 {
            Tensor::ones(&shape, dtype, &device)?
        } else {
            let fan_in: usize = dims[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            let n = shape.elem_count();
            let vals: Vec<f64> = randn_vec(&mut rng, n).into_iter().map(|v| v as f64 * std).collect();
            Tensor::from_vec(vals, &shape, &device)?.to_dtype(dtype)?
        };
        var.set(&value)?;
    }
    Ok(())
}

/// Standard normal draws via Box-Muller, deterministic for a given stream.
pub fn randn_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        let u1: f64 = 1.0 - rng.random::<f64>(); // (0, 1], keeps ln finite
        let u2: f64 = rng.random();
        let r = (-2.0 * u1.ln()).sqrt();
        let a = std::f64::consts::TAU * u2;
        out.push((r * a.cos()) as f32);
        out.push((r * a.sin()) as f32);
    }
    out.truncate(n);
    out
}

pub fn randn_tensor(rng: &mut ChaCha8Rng, shape: &[usize], device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    Ok(Tensor::from_vec(randn_vec(rng, n), shape, device)?)
}

/// Image as a `(3, H, W)` f32 tensor in `[0, 1]`.
pub fn image_to_tensor(img: &ImageBuf, device: &Device) -> Result<Tensor> {
    let (w, h) = (img.width(), img.height());
    let mut planar = vec![0.0f32; 3 * h * w];
    for y in 0..h {
        for x in 0..w {
            let px = img.get(x, y);
            for c in 0..3 {
                planar[c * h * w + y * w + x] = px[c];
            }
        }
    }
    Ok(Tensor::from_vec(planar, (3, h, w), device)?)
}

/// `(3, H, W)` or `(1, 3, H, W)` tensor back to an image, clamped to `[0, 1]`.
pub fn tensor_to_image(t: &Tensor) -> Result<ImageBuf> {
    let t = if t.dims().len() == 4 { t.get(0)? } else { t.clone() };
    let (_c, h, w) = t.dims3()?;
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut img = ImageBuf::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let px = [
                data[y * w + x].clamp(0.0, 1.0),
                data[h * w + y * w + x].clamp(0.0, 1.0),
                data[2 * h * w + y * w + x].clamp(0.0, 1.0),
            ];
            img.set(x, y, px);
        }
    }
    Ok(img)
}

/// Mask as a `(1, H, W)` f32 tensor of zeros and ones.
pub fn mask_to_tensor(mask: &Mask, device: &Device) -> Result<Tensor> {
    let (w, h) = (mask.width(), mask.height());
    let data: Vec<f32> = mask.data().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    Ok(Tensor::from_vec(data, (1, h, w), device)?)
}

/// Sinusoidal timestep embedding; `t` is a `(B,)` f32 tensor, output `(B, dim)`.
pub fn timestep_embedding(t: &Tensor, dim: usize) -> Result<Tensor> {
    let half = dim / 2;
    let device = t.device();
    let freqs: Vec<f32> = (0..half)
        .map(|i| (-(10000f64.ln()) * i as f64 / half as f64).exp() as f32)
        .collect();
    let freqs = Tensor::from_vec(freqs, (1, half), device)?.to_dtype(t.dtype())?;
    let args = t.unsqueeze(1)?.broadcast_mul(&freqs)?; // (B, half)
    Ok(Tensor::cat(&[args.sin()?, args.cos()?], D::Minus1)?)
}

/// Largest group count from {8, 4, 2, 1} dividing the channel count.
pub fn norm_groups(channels: usize) -> usize {
    [8usize, 4, 2].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}

pub fn group_norm(channels: usize, vb: VarBuilder) -> Result<GroupNorm> {
    Ok(candle_nn::group_norm(norm_groups(channels), channels, 1e-5, vb)?)
}

pub fn conv3x3(c_in: usize, c_out: usize, stride: usize, vb: VarBuilder) -> Result<Conv2d> {
    let cfg = Conv2dConfig { padding: 1, stride, ..Default::default() };
    Ok(candle_nn::conv2d(c_in, c_out, 3, cfg, vb)?)
}

pub fn conv1x1(c_in: usize, c_out: usize, vb: VarBuilder) -> Result<Conv2d> {
    Ok(candle_nn::conv2d(c_in, c_out, 1, Conv2dConfig::default(), vb)?)
}

/// Residual block: two 3x3 convs with group norm and SiLU, an optional
/// timestep-embedding injection between them, and a 1x1 skip when the channel
/// count changes.
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    t_proj: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

impl ResBlock {
    pub fn new(c_in: usize, c_out: usize, t_dim: Option<usize>, vb: VarBuilder) -> Result<Self> {
        Ok(ResBlock {
            norm1: group_norm(c_in, vb.pp("norm1"))?,
            conv1: conv3x3(c_in, c_out, 1, vb.pp("conv1"))?,
            t_proj: t_dim.map(|d| candle_nn::linear(d, c_out, vb.pp("t_proj"))).transpose()?,
            norm2: group_norm(c_out, vb.pp("norm2"))?,
            conv2: conv3x3(c_out, c_out, 1, vb.pp("conv2"))?,
            skip: if c_in == c_out { None } else { Some(conv1x1(c_in, c_out, vb.pp("skip"))?) },
        })
    }

    pub fn forward(&self, x: &Tensor, t_emb: Option<&Tensor>) -> Result<Tensor> {
        let mut h = self.conv1.forward(&self.norm1.forward(x)?.silu()?)?;
        if let (Some(proj), Some(te)) = (&self.t_proj, t_emb) {
            let te = proj.forward(&te.silu()?)?; // (B, c_out)
            h = h.broadcast_add(&te.unsqueeze(2)?.unsqueeze(3)?)?;
        }
        let h = self.conv2.forward(&self.norm2.forward(&h)?.silu()?)?;
        let x = match &self.skip {
            Some(s) => s.forward(x)?,
            None => x.clone(),
        };
        Ok((x + h)?)
    }
}

/// Stride-2 conv downsample.
pub struct Downsample(Conv2d);

impl Downsample {
    pub fn new(c: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Downsample(conv3x3(c, c, 2, vb.pp("conv"))?))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.0.forward(x)?)
    }
}

/// Nearest-neighbor x2 upsample followed by a 3x3 conv.
pub struct Upsample(Conv2d);

impl Upsample {
    pub fn new(c: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Upsample(conv3x3(c, c, 1, vb.pp("conv"))?))
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_b, _c, h, w) = x.dims4()?;
        Ok(self.0.forward(&x.upsample_nearest2d(2 * h, 2 * w)?)?)
    }
}
