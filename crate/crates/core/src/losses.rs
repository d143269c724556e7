//! Scribble supervision (partial cross-entropy), pseudo-label Dice
//! supervision, edge regression, and their weighted total.
//!
//! Label tensors are `[batch, H, W]` u32 maps where the value `num_classes`
//! marks unlabeled pixels.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, data_err, shape_err, Result};
use crate::nn;

/// Label value used for unlabeled pixels in stored 8-bit files.
pub const UNKNOWN_ON_DISK: u8 = 255;

/// Dice smoothing term.
pub const DICE_EPS: f64 = 1e-5;

/// Sparse per-pixel labels for one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScribbleMap {
    pub labels: Vec<u32>,
    pub height: usize,
    pub width: usize,
    pub unknown_code: u32,
}

impl ScribbleMap {
    /// Checks every entry is a class id below `num_classes` or the unknown
    /// code, which is `num_classes`.
    pub fn new(labels: Vec<u32>, height: usize, width: usize, num_classes: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(shape_err!("scribble has {} entries for {height}x{width}", labels.len()));
        }
        let unknown_code = num_classes as u32;
        if let Some(bad) = labels.iter().find(|&&v| v > unknown_code) {
            return Err(data_err!("scribble class id {bad} out of range for {num_classes} classes"));
        }
        Ok(Self {
            labels,
            height,
            width,
            unknown_code,
        })
    }

    pub fn unknown(height: usize, width: usize, num_classes: usize) -> Self {
        Self {
            labels: vec![num_classes as u32; height * width],
            height,
            width,
            unknown_code: num_classes as u32,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.unknown_code as usize
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn is_known(&self, y: usize, x: usize) -> bool {
        self.get(y, x) != self.unknown_code
    }

    pub fn annotated_count(&self) -> usize {
        self.labels.iter().filter(|&&v| v != self.unknown_code).count()
    }

    /// Stacks maps into a `[batch, H, W]` u32 tensor.
    pub fn stack(maps: &[&ScribbleMap]) -> Result<Tensor> {
        let first = maps.first().ok_or_else(|| data_err!("no scribbles to stack"))?;
        let (h, w) = (first.height, first.width);
        let mut all = Vec::with_capacity(maps.len() * h * w);
        for m in maps {
            if (m.height, m.width) != (h, w) || m.unknown_code != first.unknown_code {
                return Err(shape_err!("scribble maps in a batch must share size and class count"));
            }
            all.extend_from_slice(&m.labels);
        }
        Ok(Tensor::from_vec(all, (maps.len(), h, w), &candle_core::Device::Cpu)?)
    }
}

/// Weights of the scribble, pseudo-label and edge terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 0.2,
        }
    }
}

impl LossWeights {
    pub fn new(lambda1: f64, lambda2: f64, lambda3: f64) -> Result<Self> {
        let w = Self {
            lambda1,
            lambda2,
            lambda3,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_err!("{name} must be a nonnegative number, got {v}"));
            }
        }
        Ok(())
    }

    /// `λ1·ssl + λ2·psl + λ3·esl` on plain numbers.
    pub fn combine(&self, ssl: f64, psl: f64, esl: f64) -> f64 {
        self.lambda1 * ssl + self.lambda2 * psl + self.lambda3 * esl
    }
}

fn check_labels(labels: &Tensor, num_classes: usize) -> Result<()> {
    let max = labels.max_all()?.to_scalar::<u32>()?;
    if max as usize > num_classes {
        return Err(data_err!(
            "label {max} out of range: {num_classes} classes plus unknown code {num_classes}"
        ));
    }
    Ok(())
}

/// Mean negative log-likelihood of the annotated class over annotated
/// pixels. `logits` is `[B, C, H, W]`, `labels` is `[B, H, W]` u32 with
/// unknown code `C`. Returns 0 when no pixel is annotated.
pub fn partial_ce(logits: &Tensor, labels: &Tensor) -> Result<Tensor> {
    let (b, c, h, w) = logits.dims4()?;
    if labels.dims() != [b, h, w] {
        return Err(shape_err!("labels {:?} do not match logits {:?}", labels.dims(), logits.dims()));
    }
    let labels = labels.to_dtype(DType::U32)?;
    check_labels(&labels, c)?;
    let known = labels.lt(c as u32)?;
    let count = known.to_dtype(DType::F64)?.sum_all()?.to_scalar::<f64>()?;
    if count == 0.0 {
        return Ok(Tensor::zeros((), logits.dtype(), logits.device())?);
    }
    let safe = known.where_cond(&labels, &labels.zeros_like()?)?;
    let logp = nn::log_softmax(logits, 1)?;
    let picked = logp.gather(&safe.unsqueeze(1)?.contiguous()?, 1)?.squeeze(1)?;
    let zeros = picked.zeros_like()?;
    let masked = known.where_cond(&picked, &zeros)?;
    Ok((masked.sum_all()?.neg()? / count)?)
}

/// `[B, H, W]` u32 labels to a `[B, C, H, W]` one-hot of `dtype`.
pub fn one_hot(labels: &Tensor, num_classes: usize, dtype: DType) -> Result<Tensor> {
    let (b, h, w) = labels.dims3()?;
    let classes = Tensor::arange(0u32, num_classes as u32, labels.device())?.reshape((1, num_classes, 1, 1))?;
    let l = labels.to_dtype(DType::U32)?.unsqueeze(1)?;
    Ok(l.broadcast_eq(&classes)?.to_dtype(dtype)?.reshape((b, num_classes, h, w))?)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(config_err!("mixing weight must lie in (0, 1), got {alpha}"));
    }
    Ok(())
}

/// Hard pseudo-label `argmax(α·y1 + (1−α)·y2)` over the class axis of
/// `[B, C, H, W]` probabilities. The result carries no gradient.
pub fn mix_pseudo_label(y1: &Tensor, y2: &Tensor, alpha: f64) -> Result<Tensor> {
    check_alpha(alpha)?;
    if y1.dims() != y2.dims() {
        return Err(shape_err!("cannot mix {:?} with {:?}", y1.dims(), y2.dims()));
    }
    let mixed = ((y1.detach() * alpha)? + (y2.detach() * (1.0 - alpha))?)?;
    Ok(mixed.argmax(1)?)
}

/// Soft Dice loss averaged over classes. Sums run over batch and pixels.
/// With `include_background` false, class 0 is left out of the mean.
pub fn dice_loss(probs: &Tensor, target: &Tensor, include_background: bool) -> Result<Tensor> {
    if probs.dims() != target.dims() {
        return Err(shape_err!("dice: probs {:?} vs target {:?}", probs.dims(), target.dims()));
    }
    let (_, c, _, _) = probs.dims4()?;
    let (probs, target) = if include_background {
        (probs.clone(), target.clone())
    } else {
        if c < 2 {
            return Err(config_err!("dice without background needs at least 2 classes"));
        }
        (probs.narrow(1, 1, c - 1)?, target.narrow(1, 1, c - 1)?)
    };
    let sum_per_class = |t: &Tensor| -> Result<Tensor> { Ok(t.transpose(0, 1)?.flatten_from(1)?.sum(D::Minus1)?) };
    let inter = sum_per_class(&(&probs * &target)?)?;
    let denom = ((sum_per_class(&probs)? + sum_per_class(&target)?)? + DICE_EPS)?;
    let ratio = (((inter * 2.0)? + DICE_EPS)? / denom)?;
    Ok(ratio.neg()?.affine(1.0, 1.0)?.mean_all()?)
}

/// Pseudo-label loss: average Dice of both heads against the mixed hard
/// labels built from their probabilities.
pub fn psl_loss(y1: &Tensor, y2: &Tensor, alpha: f64, include_background: bool) -> Result<Tensor> {
    let (_, c, _, _) = y1.dims4()?;
    let labels = mix_pseudo_label(y1, y2, alpha)?;
    let target = one_hot(&labels, c, y1.dtype())?;
    let a = dice_loss(y1, &target, include_background)?;
    let b = dice_loss(y2, &target, include_background)?;
    Ok(((a + b)? * 0.5)?)
}

/// Mean squared error between predicted and reference edge maps.
pub fn esl_loss(edge_pred: &Tensor, edge_gt: &Tensor) -> Result<Tensor> {
    if edge_pred.dims() != edge_gt.dims() {
        return Err(shape_err!("edge: pred {:?} vs gt {:?}", edge_pred.dims(), edge_gt.dims()));
    }
    Ok((edge_pred - edge_gt.to_dtype(edge_pred.dtype())?)?.sqr()?.mean_all()?)
}

/// Average-pools a full-resolution `[B, 1, H, W]` edge map to the
/// prediction's resolution.
pub fn edge_target(edge_gt: &Tensor, pred_size: (usize, usize)) -> Result<Tensor> {
    let (_, _, h, w) = edge_gt.dims4()?;
    if (h, w) == pred_size {
        return Ok(edge_gt.clone());
    }
    if h % pred_size.0 != 0 || w % pred_size.1 != 0 || h / pred_size.0 != w / pred_size.1 {
        return Err(shape_err!("cannot pool {h}x{w} edge map to {pred_size:?}"));
    }
    nn::avg_pool(edge_gt, h / pred_size.0)
}

/// Scribble loss: average partial cross-entropy of both heads.
pub fn ssl_loss(labels: &Tensor, y1_logits: &Tensor, y2_logits: &Tensor) -> Result<Tensor> {
    let a = partial_ce(y1_logits, labels)?;
    let b = partial_ce(y2_logits, labels)?;
    Ok(((a + b)? * 0.5)?)
}

/// `λ1·ssl + λ2·psl + λ3·esl`; absent terms contribute nothing.
pub fn total_loss(ssl: &Tensor, psl: Option<&Tensor>, esl: Option<&Tensor>, w: &LossWeights) -> Result<Tensor> {
    let mut total = (ssl * w.lambda1)?;
    if let Some(p) = psl {
        total = (total + (p * w.lambda2)?)?;
    }
    if let Some(e) = esl {
        total = (total + (e * w.lambda3)?)?;
    }
    Ok(total)
}
