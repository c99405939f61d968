//! Reference conditioning: masked reference extraction, a small token
//! encoder over the reference crop, a shared linear+norm adapter, learnable
//! per-type embeddings, and the two-stream cross-attention that injects both
//! signals into a query feature map.

use candle_core::{Tensor, D};
use candle_nn::{LayerNorm, LayerNormConfig, Linear, Module, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::dataset::ReflectionType;
use crate::error::{Error, Result};
use crate::img::{ImageBuf, Mask};
use crate::nn;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CondConfig {
    /// Token width inside the reference encoder.
    pub d_enc: usize,
    /// Shared width of adapted tokens and attention queries.
    pub d_model: usize,
    pub heads: usize,
    /// Side length of the square reference crop.
    pub ref_size: usize,
}

impl Default for CondConfig {
    fn default() -> Self {
        CondConfig { d_enc: 64, d_model: 64, heads: 4, ref_size: 32 }
    }
}

impl CondConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_enc == 0 || self.d_model == 0 || self.heads == 0 || self.ref_size < 4 {
            return Err(Error::Config("conditioning dimensions must be positive".into()));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        if self.ref_size % 4 != 0 {
            return Err(Error::Config(format!("ref_size {} must be divisible by 4", self.ref_size)));
        }
        Ok(())
    }

    fn patch(&self) -> usize {
        self.ref_size / 4
    }
}

/// Tight crop of the reflected object: bounding box of `fg_mask`, pixels
/// outside the mask zeroed, resized to `ref_size` square, and flipped
/// vertically for the vertical type so the crop already looks like the
/// reflection it conditions.
pub fn extract_reference(
    composite: &ImageBuf,
    fg_mask: &Mask,
    ty: ReflectionType,
    ref_size: usize,
) -> Result<ImageBuf> {
    if composite.width() != fg_mask.width() || composite.height() != fg_mask.height() {
        return Err(Error::ShapeMismatch(format!(
            "composite {}x{} vs mask {}x{}",
            composite.width(),
            composite.height(),
            fg_mask.width(),
            fg_mask.height()
        )));
    }
    let (x0, y0, bw, bh) = fg_mask.bounding_box()?;
    let mut crop = ImageBuf::new(bw, bh);
    for y in 0..bh {
        for x in 0..bw {
            if fg_mask.get(x0 + x, y0 + y) {
                crop.set(x, y, composite.get(x0 + x, y0 + y));
            }
        }
    }
    let resized = crop.resize(ref_size, ref_size);
    Ok(match ty {
        ReflectionType::Vertical => resized.flip_vertical(),
        ReflectionType::Others => resized,
    })
}

struct MixBlock {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl MixBlock {
    fn new(d: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        let ln = LayerNormConfig { eps: 1e-5, ..Default::default() };
        Ok(MixBlock {
            norm1: candle_nn::layer_norm(d, ln, vb.pp("norm1"))?,
            attn: SelfAttention::new(d, heads, vb.pp("attn"))?,
            norm2: candle_nn::layer_norm(d, ln, vb.pp("norm2"))?,
            fc1: candle_nn::linear(d, 4 * d, vb.pp("fc1"))?,
            fc2: candle_nn::linear(4 * d, d, vb.pp("fc2"))?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        let h = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?)?;
        Ok((x + h)?)
    }
}

struct SelfAttention {
    wq: Linear,
    wk: Linear,
    wv: Linear,
    wo: Linear,
    heads: usize,
}

impl SelfAttention {
    fn new(d: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        Ok(SelfAttention {
            wq: candle_nn::linear_no_bias(d, d, vb.pp("wq"))?,
            wk: candle_nn::linear_no_bias(d, d, vb.pp("wk"))?,
            wv: candle_nn::linear_no_bias(d, d, vb.pp("wv"))?,
            wo: candle_nn::linear_no_bias(d, d, vb.pp("wo"))?,
            heads,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let q = split_heads(&self.wq.forward(x)?, self.heads)?;
        let k = split_heads(&self.wk.forward(x)?, self.heads)?;
        let v = split_heads(&self.wv.forward(x)?, self.heads)?;
        let out = merge_heads(&attention_probs(&q, &k)?.matmul(&v)?)?;
        Ok(self.wo.forward(&out)?)
    }
}

/// `(B, N, d)` to `(B, h, N, d/h)`.
fn split_heads(t: &Tensor, heads: usize) -> Result<Tensor> {
    let (b, n, d) = t.dims3()?;
    Ok(t.reshape((b, n, heads, d / heads))?.transpose(1, 2)?.contiguous()?)
}

fn merge_heads(t: &Tensor) -> Result<Tensor> {
    let (b, h, n, dh) = t.dims4()?;
    Ok(t.transpose(1, 2)?.reshape((b, n, h * dh))?)
}

/// Scaled dot-product attention weights: rows are probability distributions
/// over the keys. `q` is `(B, h, N, dh)`, `k` is `(B, h, M, dh)`; the result
/// is `(B, h, N, M)`.
pub fn attention_probs(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let dh = q.dim(D::Minus1)?;
    let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? / (dh as f64).sqrt())?;
    Ok(candle_nn::ops::softmax(&scores, D::Minus1)?)
}

/// Patchify-and-mix encoder over the reference crop. A stride-`patch` conv
/// produces a 4x4 grid of patch tokens; their mean is prepended as a summary
/// token, giving 17 tokens that two transformer blocks then mix.
pub struct RefEncoder {
    patchify: candle_nn::Conv2d,
    blocks: Vec<MixBlock>,
    cfg: CondConfig,
}

impl RefEncoder {
    pub fn new(cfg: &CondConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        let p = cfg.patch();
        let conv_cfg = candle_nn::Conv2dConfig { stride: p, ..Default::default() };
        let patchify = candle_nn::conv2d(3, cfg.d_enc, p, conv_cfg, vb.pp("patchify"))?;
        let blocks = (0..2)
            .map(|i| MixBlock::new(cfg.d_enc, cfg.heads, vb.pp(format!("block{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(RefEncoder { patchify, blocks, cfg: *cfg })
    }

    /// `(B, 3, S, S)` image to `(B, 17, d_enc)` tokens.
    pub fn forward(&self, img: &Tensor) -> Result<Tensor> {
        let (b, _c, h, w) = img.dims4()?;
        if h != self.cfg.ref_size || w != self.cfg.ref_size {
            return Err(Error::ShapeMismatch(format!(
                "reference must be {0}x{0}, got {h}x{w}",
                self.cfg.ref_size
            )));
        }
        let grid = self.patchify.forward(img)?; // (B, d, 4, 4)
        let tokens = grid.flatten_from(2)?.transpose(1, 2)?.contiguous()?; // (B, 16, d)
        let summary = tokens.mean_keepdim(1)?; // (B, 1, d)
        let mut x = Tensor::cat(&[summary, tokens], 1)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        debug_assert_eq!(x.dims(), &[b, 17, self.cfg.d_enc]);
        Ok(x)
    }
}

/// Linear map into the attention width followed by a LayerNorm; shared by the
/// reference tokens and the type embeddings so both land in one space.
pub struct Adapter {
    lin: Linear,
    norm: LayerNorm,
}

impl Adapter {
    pub fn new(cfg: &CondConfig, vb: VarBuilder) -> Result<Self> {
        let ln = LayerNormConfig { eps: 1e-5, ..Default::default() };
        Ok(Adapter {
            lin: candle_nn::linear(cfg.d_enc, cfg.d_model, vb.pp("lin"))?,
            norm: candle_nn::layer_norm(cfg.d_model, ln, vb.pp("norm"))?,
        })
    }

    /// `(B, N, d_enc)` to `(B, N, d_model)`.
    pub fn forward(&self, tokens: &Tensor) -> Result<Tensor> {
        Ok(self.norm.forward(&self.lin.forward(tokens)?)?)
    }
}

/// One learnable embedding per reflection type; selection is a hard row
/// lookup, so only the chosen row receives gradient.
pub struct TypeEmbeddings {
    table: Tensor, // (2, d_enc)
}

impl TypeEmbeddings {
    pub fn new(cfg: &CondConfig, vb: VarBuilder) -> Result<Self> {
        Ok(TypeEmbeddings { table: vb.get((2, cfg.d_enc), "table")? })
    }

    /// `(B, 1, d_enc)` rows for a batch of type labels.
    pub fn select(&self, types: &[ReflectionType]) -> Result<Tensor> {
        let idx: Vec<u32> = types.iter().map(|t| t.index() as u32).collect();
        let idx = Tensor::from_vec(idx, (types.len(),), self.table.device())?;
        Ok(self.table.index_select(&idx, 0)?.unsqueeze(1)?)
    }
}

/// Adapted conditioning tokens for one batch: the 17 reference tokens and the
/// single type token, both `d_model` wide.
pub struct ConditioningBundle {
    pub ref_tokens: Tensor,
    pub type_token: Tensor,
}

/// Everything between a data tuple and a conditioning bundle.
pub struct Conditioner {
    pub encoder: RefEncoder,
    pub adapter: Adapter,
    pub types: TypeEmbeddings,
    cfg: CondConfig,
}

impl Conditioner {
    pub fn new(cfg: &CondConfig, vb: VarBuilder) -> Result<Self> {
        cfg.validate()?;
        Ok(Conditioner {
            encoder: RefEncoder::new(cfg, vb.pp("encoder"))?,
            adapter: Adapter::new(cfg, vb.pp("adapter"))?,
            types: TypeEmbeddings::new(cfg, vb.pp("types"))?,
            cfg: *cfg,
        })
    }

    pub fn config(&self) -> &CondConfig {
        &self.cfg
    }

    /// Bundle for pre-extracted reference crops, `(B, 3, S, S)`, one type per
    /// batch row.
    pub fn bundle_from_tensors(&self, refs: &Tensor, types: &[ReflectionType]) -> Result<ConditioningBundle> {
        if refs.dim(0)? != types.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} reference crops vs {} type labels",
                refs.dim(0)?,
                types.len()
            )));
        }
        let ref_tokens = self.adapter.forward(&self.encoder.forward(refs)?)?;
        let type_token = self.adapter.forward(&self.types.select(types)?)?;
        Ok(ConditioningBundle { ref_tokens, type_token })
    }

    /// Bundle for a single scene, extracting the reference crop on the fly.
    pub fn bundle_from_scene(
        &self,
        composite: &ImageBuf,
        fg_mask: &Mask,
        ty: ReflectionType,
        device: &candle_core::Device,
    ) -> Result<ConditioningBundle> {
        let reference = extract_reference(composite, fg_mask, ty, self.cfg.ref_size)?;
        let refs = nn::image_to_tensor(&reference, device)?.unsqueeze(0)?;
        self.bundle_from_tensors(&refs, &[ty])
    }
}

/// Two-stream cross-attention: one stream attends to the type token, the
/// other to the reference tokens, and the output is their plain sum. No
/// output projection, so disabling a stream removes exactly its summand.
pub struct DecoupledCrossAttention {
    wq: Linear,
    wk_type: Linear,
    wv_type: Linear,
    wk_ref: Linear,
    wv_ref: Linear,
    heads: usize,
}

impl DecoupledCrossAttention {
    pub fn new(d_model: usize, heads: usize, vb: VarBuilder) -> Result<Self> {
        if heads == 0 || d_model % heads != 0 {
            return Err(Error::Config(format!(
                "d_model {d_model} must be divisible by heads {heads}"
            )));
        }
        Ok(DecoupledCrossAttention {
            wq: candle_nn::linear_no_bias(d_model, d_model, vb.pp("wq"))?,
            wk_type: candle_nn::linear_no_bias(d_model, d_model, vb.pp("wk_type"))?,
            wv_type: candle_nn::linear_no_bias(d_model, d_model, vb.pp("wv_type"))?,
            wk_ref: candle_nn::linear_no_bias(d_model, d_model, vb.pp("wk_ref"))?,
            wv_ref: candle_nn::linear_no_bias(d_model, d_model, vb.pp("wv_ref"))?,
            heads,
        })
    }

    /// `f_q` is `(B, N, d_model)`; absent streams contribute nothing, and with
    /// both absent the result is all zeros.
    pub fn forward(
        &self,
        f_q: &Tensor,
        type_token: Option<&Tensor>,
        ref_tokens: Option<&Tensor>,
    ) -> Result<Tensor> {
        let q = split_heads(&self.wq.forward(f_q)?, self.heads)?;
        let mut out = Tensor::zeros_like(f_q)?;
        if let Some(tt) = type_token {
            let k = split_heads(&self.wk_type.forward(tt)?, self.heads)?;
            let v = split_heads(&self.wv_type.forward(tt)?, self.heads)?;
            out = (out + merge_heads(&attention_probs(&q, &k)?.matmul(&v)?)?)?;
        }
        if let Some(rt) = ref_tokens {
            let k = split_heads(&self.wk_ref.forward(rt)?, self.heads)?;
            let v = split_heads(&self.wv_ref.forward(rt)?, self.heads)?;
            out = (out + merge_heads(&attention_probs(&q, &k)?.matmul(&v)?)?)?;
        }
        Ok(out)
    }
}
