//! Auxiliary encoder: a small residual conv net over the composite and the
//! object mask that classifies the reflection type and regresses the five
//! reflection-box coefficients, plus its combined training loss.

use candle_core::{Device, Tensor, D};
use candle_nn::{AdamW, Conv2d, GroupNorm, Linear, Module, Optimizer, ParamsAdamW, VarBuilder, VarMap};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DataTuple, ReflectionType};
use crate::error::{Error, Result};
use crate::geometry::{
    decode_regression, kfiou, min_area_box, rasterize_box, BoxRegressionCoeffs, RotatedBox,
};
use crate::img::{ImageBuf, Mask};
use crate::nn::{self, conv3x3, group_norm, Downsample, ResBlock};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AuxConfig {
    pub backbone_width: usize,
    /// Number of stride-2 stages after the stem.
    pub depth: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for AuxConfig {
    fn default() -> Self {
        AuxConfig {
            backbone_width: 24,
            depth: 4,
            learning_rate: 1e-3,
            epochs: 12,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl AuxConfig {
    pub fn validate(&self) -> Result<()> {
        if self.backbone_width == 0 || self.depth == 0 || self.batch_size == 0 {
            return Err(Error::Config("width, depth and batch size must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!("bad learning rate {}", self.learning_rate)));
        }
        Ok(())
    }

    fn stage_widths(&self) -> Vec<usize> {
        (0..self.depth)
            .map(|i| self.backbone_width * [1usize, 2, 4, 4][i.min(3)])
            .collect()
    }
}

/// Raw single-sample output: two type logits and the five box coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxPrediction {
    pub type_logits: [f64; 2],
    pub coeffs: BoxRegressionCoeffs,
}

impl AuxPrediction {
    /// Argmax with ties going to vertical.
    pub fn predicted_type(&self) -> ReflectionType {
        if self.type_logits[ReflectionType::Others.index()]
            > self.type_logits[ReflectionType::Vertical.index()]
        {
            ReflectionType::Others
        } else {
            ReflectionType::Vertical
        }
    }
}

/// The three loss readings for one prediction; `l_en` is the exact sum of the
/// other two.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AuxLoss {
    pub l_cls: f64,
    pub l_rbbox: f64,
    pub l_en: f64,
}

/// Cross entropy of a two-way softmax against the true index.
fn cross_entropy_2(logits: [f64; 2], truth: usize) -> f64 {
    let m = logits[0].max(logits[1]);
    let log_z = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    log_z - logits[truth]
}

/// Scalar loss for one prediction against its ground truth.
pub fn aux_loss(
    pred: &AuxPrediction,
    gt_type: ReflectionType,
    b_o: &RotatedBox,
    b_r: &RotatedBox,
) -> Result<AuxLoss> {
    let l_cls = cross_entropy_2(pred.type_logits, gt_type.index());
    let decoded = decode_regression(b_o, &pred.coeffs)?;
    let l_rbbox = crate::geometry::kfiou_loss(&decoded, b_r)?;
    Ok(AuxLoss { l_cls, l_rbbox, l_en: l_cls + l_rbbox })
}

/// Batched overlap loss `exp(1 - kfiou)` expressed in tensor ops so it can be
/// backpropagated. `b_o` and `b_r` are `(B, 5)` rows of
/// `(cx, cy, w, h, theta_deg)`; `coeffs` is the `(B, 5)` prediction. Mirrors
/// the scalar path in `geometry::gaussian` term for term.
pub fn kfiou_loss_tensor(b_o: &Tensor, coeffs: &Tensor, b_r: &Tensor) -> Result<Tensor> {
    let col = |t: &Tensor, i: usize| -> Result<Tensor> {
        Ok(t.narrow(1, i, 1)?.squeeze(1)?)
    };
    let deg2rad = std::f64::consts::PI / 180.0;

    // Decode the predicted box from the base box and the coefficients.
    let (xo, yo, wo, ho, to) = (col(b_o, 0)?, col(b_o, 1)?, col(b_o, 2)?, col(b_o, 3)?, col(b_o, 4)?);
    let (tx, ty, tw, th, tt) = (
        col(coeffs, 0)?,
        col(coeffs, 1)?,
        col(coeffs, 2)?,
        col(coeffs, 3)?,
        col(coeffs, 4)?,
    );
    let xp = (&xo + (&tx * &wo)?)?;
    let yp = (&yo + (&ty * &ho)?)?;
    let wp = (&wo * tw.exp()?)?;
    let hp = (&ho * th.exp()?)?;
    // Coefficient angle offsets are radians, base angles degrees.
    let tp = ((to * deg2rad)? + tt)?;

    let cov = |w: &Tensor, h: &Tensor, t_rad: &Tensor| -> Result<(Tensor, Tensor, Tensor, Tensor)> {
        let c = t_rad.cos()?;
        let s = t_rad.sin()?;
        let a = (w.sqr()? * 0.25)?;
        let e = (h.sqr()? * 0.25)?;
        let s11 = ((&a * c.sqr()?)? + (&e * s.sqr()?)?)?;
        let s22 = ((&a * s.sqr()?)? + (&e * c.sqr()?)?)?;
        let s12 = (((&a - &e)? * &c)? * &s)?;
        let det = (&a * &e)?;
        Ok((s11, s12, s22, det))
    };

    let (xg, yg, wg, hg, tg) = (col(b_r, 0)?, col(b_r, 1)?, col(b_r, 2)?, col(b_r, 3)?, col(b_r, 4)?);
    let tg = (tg * deg2rad)?;
    let (a11, a12, a22, det1) = cov(&wp, &hp, &tp)?;
    let (b11, b12, b22, det2) = cov(&wg, &hg, &tg)?;

    let s11 = (a11 + b11)?;
    let s12 = (a12 + b12)?;
    let s22 = (a22 + b22)?;
    let det_s = ((&s11 * &s22)? - s12.sqr()?)?;

    let v1 = det1.sqrt()?;
    let v2 = det2.sqrt()?;
    let vf = ((det1 * det2)? / &det_s)?.sqrt()?;

    let dx = (xp - xg)?;
    let dy = (yp - yg)?;
    let quad = ((((dx.sqr()? * &s22)? - ((dx * dy.clone())? * (s12 * 2.0)?)?)? + (dy.sqr()? * &s11)?)?
        / &det_s)?;
    let vf = (vf * (quad * (-0.5))?.exp()?)?;

    let kf = (&vf / ((v1 + v2)? - &vf)?)?;
    Ok(((kf * (-1.0))? + 1.0)?.exp()?)
}

/// One loaded training sample for the auxiliary task.
pub struct AuxSample {
    pub image: Tensor,
    pub mask: Tensor,
    pub label: ReflectionType,
    pub box_o: RotatedBox,
    pub box_r: RotatedBox,
}

pub fn aux_sample_from_tuple(t: &DataTuple, device: &Device) -> Result<AuxSample> {
    Ok(AuxSample {
        image: nn::image_to_tensor(&t.composite, device)?,
        mask: nn::mask_to_tensor(&t.fg_mask, device)?,
        label: t.type_label,
        box_o: t.box_o,
        box_r: t.box_r,
    })
}

fn box_row(b: &RotatedBox) -> [f32; 5] {
    [b.cx as f32, b.cy as f32, b.w as f32, b.h as f32, b.theta as f32]
}

/// Residual classification/regression backbone. Input is the composite image
/// stacked with the object mask, output is seven numbers: two type logits and
/// five box coefficients. The head is zero at initialization, so an untrained
/// model starts from uniform class odds and an identity box.
pub struct AuxModel {
    stem: Conv2d,
    stages: Vec<(ResBlock, Downsample)>,
    final_norm: GroupNorm,
    head: Linear,
    varmap: VarMap,
    cfg: AuxConfig,
}

impl AuxModel {
    pub fn new(cfg: &AuxConfig, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let varmap = VarMap::new();
        let vb = VarBuilder::from_varmap(&varmap, candle_core::DType::F32, device);
        let model = Self::build(cfg, &varmap, vb)?;
        nn::seed_parameters(&varmap, cfg.seed)?;
        Ok(model)
    }

    fn build(cfg: &AuxConfig, varmap: &VarMap, vb: VarBuilder) -> Result<Self> {
        let widths = cfg.stage_widths();
        let stem = conv3x3(4, widths[0], 1, vb.pp("stem"))?;
        let mut stages = Vec::new();
        let mut c_in = widths[0];
        for (i, &c_out) in widths.iter().enumerate() {
            let block = ResBlock::new(c_in, c_out, None, vb.pp(format!("stage{i}.block")))?;
            let down = Downsample::new(c_out, vb.pp(format!("stage{i}.down")))?;
            stages.push((block, down));
            c_in = c_out;
        }
        let final_norm = group_norm(c_in, vb.pp("final_norm"))?;
        let head = candle_nn::linear(c_in, 7, vb.pp("zero_head"))?;
        Ok(AuxModel { stem, stages, final_norm, head, varmap: varmap.clone(), cfg: *cfg })
    }

    pub fn config(&self) -> &AuxConfig {
        &self.cfg
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    /// Batched forward: `(B, 3, H, W)` images and `(B, 1, H, W)` masks to
    /// `(B, 7)` raw outputs.
    pub fn forward(&self, images: &Tensor, masks: &Tensor) -> Result<Tensor> {
        let mut x = self.stem.forward(&Tensor::cat(&[images, masks], 1)?)?;
        for (block, down) in &self.stages {
            x = down.forward(&block.forward(&x, None)?)?;
        }
        let x = self.final_norm.forward(&x)?.silu()?.mean(D::Minus1)?.mean(D::Minus1)?;
        Ok(self.head.forward(&x)?)
    }

    /// Single-scene forward returning scalar logits and coefficients.
    pub fn predict(&self, composite: &ImageBuf, fg_mask: &Mask) -> Result<AuxPrediction> {
        let device = self.head_device()?;
        let img = nn::image_to_tensor(composite, &device)?.unsqueeze(0)?;
        let mask = nn::mask_to_tensor(fg_mask, &device)?.unsqueeze(0)?;
        let out = self.forward(&img, &mask)?.squeeze(0)?.to_vec1::<f32>()?;
        Ok(AuxPrediction {
            type_logits: [out[0] as f64, out[1] as f64],
            coeffs: BoxRegressionCoeffs::new(
                out[2] as f64,
                out[3] as f64,
                out[4] as f64,
                out[5] as f64,
                out[6] as f64,
            ),
        })
    }

    fn head_device(&self) -> Result<Device> {
        let data = self.varmap.data().lock().unwrap();
        let var = data.values().next().ok_or_else(|| Error::Config("empty model".into()))?;
        Ok(var.device().clone())
    }
}

/// Full prediction for one scene: the type, the decoded reflection box, and
/// its raster mask on the scene canvas.
pub struct ReflectionPrediction {
    pub ty: ReflectionType,
    pub box_r: RotatedBox,
    pub box_mask: Mask,
}

pub fn predict_reflection_box(
    model: &AuxModel,
    composite: &ImageBuf,
    fg_mask: &Mask,
) -> Result<ReflectionPrediction> {
    let pred = model.predict(composite, fg_mask)?;
    let b_o = min_area_box(fg_mask)?;
    let box_r = decode_regression(&b_o, &pred.coeffs)?;
    let box_mask = rasterize_box(&box_r, composite.height(), composite.width())?;
    Ok(ReflectionPrediction { ty: pred.predicted_type(), box_r, box_mask })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuxEpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
    pub val_mean_kfiou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct AuxTrainReport {
    pub epochs: Vec<AuxEpochMetrics>,
}

impl AuxTrainReport {
    pub fn last(&self) -> Option<&AuxEpochMetrics> {
        self.epochs.last()
    }
}

/// Held-out metrics: argmax type accuracy and the mean overlap between the
/// decoded predicted box and the true reflection box. Samples whose decode
/// fails contribute zero overlap instead of failing the evaluation.
pub fn evaluate_aux(model: &AuxModel, samples: &[AuxSample]) -> Result<(f64, f64)> {
    if samples.is_empty() {
        return Err(Error::EmptyRegion("no samples to evaluate".into()));
    }
    let mut correct = 0usize;
    let mut kf_sum = 0.0;
    for s in samples {
        let out = model
            .forward(&s.image.unsqueeze(0)?, &s.mask.unsqueeze(0)?)?
            .squeeze(0)?
            .to_vec1::<f32>()?;
        let pred = AuxPrediction {
            type_logits: [out[0] as f64, out[1] as f64],
            coeffs: BoxRegressionCoeffs::new(
                out[2] as f64,
                out[3] as f64,
                out[4] as f64,
                out[5] as f64,
                out[6] as f64,
            ),
        };
        if pred.predicted_type() == s.label {
            correct += 1;
        }
        let kf = decode_regression(&s.box_o, &pred.coeffs)
            .and_then(|decoded| kfiou(&decoded, &s.box_r))
            .unwrap_or(0.0);
        kf_sum += kf;
    }
    Ok((correct as f64 / samples.len() as f64, kf_sum / samples.len() as f64))
}

/// Trains the auxiliary model. With zero epochs the returned model is exactly
/// its seeded initialization. Aborts with an error the moment a batch loss
/// stops being finite.
pub fn train_aux(
    train: &[AuxSample],
    val: &[AuxSample],
    cfg: &AuxConfig,
    device: &Device,
) -> Result<(AuxModel, AuxTrainReport)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyRegion("no training samples".into()));
    }
    let model = AuxModel::new(cfg, device)?;
    let mut report = AuxTrainReport::default();
    if cfg.epochs == 0 {
        return Ok((model, report));
    }

    let params = ParamsAdamW { lr: cfg.learning_rate, ..Default::default() };
    let mut opt = AdamW::new(model.varmap.all_vars(), params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x61757874); // distinct from init stream
    let labels_all: Vec<u32> = train.iter().map(|s| s.label.index() as u32).collect();

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let images = Tensor::stack(
                &chunk.iter().map(|&i| train[i].image.clone()).collect::<Vec<_>>(),
                0,
            )?;
            let masks = Tensor::stack(
                &chunk.iter().map(|&i| train[i].mask.clone()).collect::<Vec<_>>(),
                0,
            )?;
            let labels = Tensor::from_vec(
                chunk.iter().map(|&i| labels_all[i]).collect::<Vec<u32>>(),
                (chunk.len(),),
                device,
            )?;
            let rows_o: Vec<f32> = chunk.iter().flat_map(|&i| box_row(&train[i].box_o)).collect();
            let rows_r: Vec<f32> = chunk.iter().flat_map(|&i| box_row(&train[i].box_r)).collect();
            let b_o = Tensor::from_vec(rows_o, (chunk.len(), 5), device)?;
            let b_r = Tensor::from_vec(rows_r, (chunk.len(), 5), device)?;

            let out = model.forward(&images, &masks)?;
            let logits = out.narrow(1, 0, 2)?;
            let coeffs = out.narrow(1, 2, 5)?;
            let l_cls = candle_nn::loss::cross_entropy(&logits, &labels)?;
            let l_box = kfiou_loss_tensor(&b_o, &coeffs, &b_r)?.mean_all()?;
            let loss = (&l_cls + &l_box)?;

            let v = loss.to_scalar::<f32>()?;
            if !v.is_finite() {
                return Err(Error::Diverged(format!(
                    "aux loss became {v} at epoch {epoch}"
                )));
            }
            loss_sum += v as f64;
            batches += 1;
            opt.backward_step(&loss)?;
        }
        let (val_accuracy, val_mean_kfiou) = if val.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            evaluate_aux(&model, val)?
        };
        report.epochs.push(AuxEpochMetrics {
            epoch,
            train_loss: loss_sum / batches as f64,
            val_accuracy,
            val_mean_kfiou,
        });
    }
    Ok((model, report))
}
