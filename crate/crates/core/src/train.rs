//! AdamW training with cosine annealing, weighted supervision losses,
//! best-checkpoint selection and evaluation.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Tensor, Var};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment, sample_rng, Batch, ImageSample};
use crate::error::{config_err, data_err, Error, Result};
use crate::losses::{self, LossWeights};
use crate::metrics::{self, MetricReport};
use crate::model::{ModelConfig, ModelOutput, QMaxVitUnet, Toggles};
use crate::nn;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub loss_weights: LossWeights,
    pub seed: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_grad_norm: Option<f64>,
    /// Whether class 0 takes part in the Dice class mean.
    pub dice_background: bool,
    /// Random rotations and flips of training samples.
    pub augment: bool,
}

impl TrainConfig {
    /// lr 1e-3, weight decay 0.01, 200 epochs, λ = (1, 0.5, 0.2), batch 8.
    pub fn new(model: ModelConfig) -> Self {
        Self {
            model,
            lr: 1e-3,
            weight_decay: 0.01,
            epochs: 200,
            batch_size: 8,
            loss_weights: LossWeights::default(),
            seed: 0,
            clip_grad_norm: None,
            dice_background: true,
            augment: true,
        }
    }

    pub fn toggles(&self) -> Toggles {
        self.model.toggles
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss_weights.validate()?;
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("learning rate must be positive, got {}", self.lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(config_err!("weight decay must be nonnegative, got {}", self.weight_decay));
        }
        if self.epochs == 0 {
            return Err(config_err!("need at least one epoch"));
        }
        if self.batch_size == 0 {
            return Err(config_err!("batch size must be positive"));
        }
        if let Some(c) = self.clip_grad_norm {
            if !(c > 0.0) {
                return Err(config_err!("gradient clip must be positive, got {c}"));
            }
        }
        Ok(())
    }
}

/// Cosine annealing from `base_lr` at step 0 to zero at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64) -> Result<f64> {
    if step > total_steps || total_steps == 0 {
        return Err(config_err!("step {step} outside schedule of {total_steps} steps"));
    }
    let t = step as f64 / total_steps as f64;
    Ok(0.5 * base_lr * (1.0 + (std::f64::consts::PI * t).cos()))
}

/// Loss values of one step or averaged over an epoch. Absent terms are 0.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub total: f64,
    pub ssl: f64,
    pub psl: f64,
    pub esl: f64,
}

/// Differentiable loss terms for one forward pass.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Tensor,
    pub ssl: Tensor,
    pub psl: Option<Tensor>,
    pub esl: Option<Tensor>,
}

impl LossTerms {
    pub fn values(&self) -> Result<LossComponents> {
        let v = |t: &Tensor| -> Result<f64> { Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?) };
        Ok(LossComponents {
            total: v(&self.total)?,
            ssl: v(&self.ssl)?,
            psl: self.psl.as_ref().map(v).transpose()?.unwrap_or(0.0),
            esl: self.esl.as_ref().map(v).transpose()?.unwrap_or(0.0),
        })
    }
}

/// Supervision of one forward pass: scribble loss on every head present,
/// pseudo-label loss when y2 exists, edge loss when the edge map exists.
pub fn compute_losses(
    out: &ModelOutput,
    batch: &Batch,
    alpha: f64,
    weights: &LossWeights,
    dice_background: bool,
) -> Result<LossTerms> {
    let ssl = match &out.y2 {
        Some(y2) => losses::ssl_loss(&batch.labels, &out.y1, y2)?,
        None => losses::partial_ce(&out.y1, &batch.labels)?,
    };
    let psl = match &out.y2 {
        Some(y2) => Some(losses::psl_loss(
            &nn::softmax(&out.y1, 1)?,
            &nn::softmax(y2, 1)?,
            alpha,
            dice_background,
        )?),
        None => None,
    };
    let esl = match &out.edge_pred {
        Some(e) => {
            let (_, _, h, w) = e.dims4()?;
            let target = losses::edge_target(&batch.edges.to_dtype(e.dtype())?, (h, w))?;
            Some(losses::esl_loss(e, &target)?)
        }
        None => None,
    };
    let total = losses::total_loss(&ssl, psl.as_ref(), esl.as_ref(), weights)?;
    Ok(LossTerms { total, ssl, psl, esl })
}

/// Scales all gradients so their joint L2 norm is at most `max_norm`.
/// Returns the norm before scaling.
pub fn clip_grad_norm(grads: &mut GradStore, vars: &[Var], max_norm: f64) -> Result<f64> {
    let mut sq = 0.0;
    for v in vars {
        if let Some(g) = grads.get(v.as_tensor()) {
            sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let scale = max_norm / (norm + 1e-6);
        for v in vars {
            if let Some(g) = grads.remove(v.as_tensor()) {
                grads.insert(v.as_tensor(), (g * scale)?);
            }
        }
    }
    Ok(norm)
}

/// One row of the training history.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_total: f64,
    pub loss_ssl: f64,
    pub loss_psl: f64,
    pub loss_esl: f64,
    /// NaN when no validation split was given.
    pub val_dsc: f64,
    pub val_hd95: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

pub const HISTORY_HEADER: &str = "epoch,loss_total,loss_ssl,loss_psl,loss_esl,val_dsc,val_hd95,lr";

impl History {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
        let records = r.deserialize().collect::<std::result::Result<Vec<EpochRecord>, _>>()?;
        Ok(Self { records })
    }
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => data_err!("{}: {other:?}", path.display()),
    }
}

/// Model, optimizer and run generator.
pub struct Trainer {
    pub model: QMaxVitUnet,
    cfg: TrainConfig,
    vars: Vec<Var>,
    opt: AdamW,
    rng: ChaCha8Rng,
    epoch: usize,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("epoch", &self.epoch)
            .field("vars", &self.vars.len())
            .finish()
    }
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let model = QMaxVitUnet::new(&cfg.model, dtype, cfg.seed)?;
        Self::with_model(cfg, model)
    }

    pub fn with_model(cfg: &TrainConfig, model: QMaxVitUnet) -> Result<Self> {
        cfg.validate()?;
        if model.config() != &cfg.model {
            return Err(config_err!("model was built with a different configuration"));
        }
        let vars: Vec<Var> = model.active_vars().into_iter().map(|(_, v)| v).collect();
        let opt = AdamW::new(
            vars.clone(),
            ParamsAdamW {
                lr: cfg.lr,
                weight_decay: cfg.weight_decay,
                ..ParamsAdamW::default()
            },
        )?;
        Ok(Self {
            model,
            vars,
            opt,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_a1fa),
            cfg: cfg.clone(),
            epoch: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn rng_state(&self) -> Result<String> {
        Ok(serde_json::to_string(&self.rng)?)
    }

    /// Draws a mixing weight uniformly from the open interval (0, 1).
    pub fn draw_alpha(&mut self) -> f64 {
        loop {
            let a: f64 = self.rng.random();
            if a > 0.0 {
                return a;
            }
        }
    }

    /// Forward, loss, backward and one optimizer update.
    pub fn train_step(&mut self, batch: &Batch, alpha: f64) -> Result<LossComponents> {
        let out = self.model.forward(&batch.images, true)?;
        let terms = compute_losses(
            &out,
            batch,
            alpha,
            &self.cfg.loss_weights,
            self.cfg.dice_background,
        )?;
        let values = terms.values()?;
        if !values.total.is_finite() {
            return Err(Error::Numeric(format!(
                "loss is {} at epoch {} (ssl {}, psl {}, esl {}, alpha {alpha})",
                values.total, self.epoch, values.ssl, values.psl, values.esl
            )));
        }
        let mut grads = terms.total.backward()?;
        if let Some(max) = self.cfg.clip_grad_norm {
            clip_grad_norm(&mut grads, &self.vars, max)?;
        }
        self.opt.step(&grads)?;
        Ok(values)
    }

    /// One pass over `train` in a seeded shuffled order. Returns mean losses.
    pub fn train_epoch(&mut self, train: &[ImageSample]) -> Result<(LossComponents, f64)> {
        if train.is_empty() {
            return Err(data_err!("training split is empty"));
        }
        let lr = lr_at(self.epoch, self.cfg.epochs.max(self.epoch + 1), self.cfg.lr)?;
        self.opt.set_learning_rate(lr);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut sum = LossComponents::default();
        let mut steps = 0usize;
        for chunk in order.chunks(self.cfg.batch_size) {
            let samples: Vec<ImageSample> = if self.cfg.augment {
                chunk
                    .iter()
                    .map(|&i| augment(&train[i], &mut sample_rng(self.cfg.seed, self.epoch, i)))
                    .collect::<Result<_>>()?
            } else {
                chunk.iter().map(|&i| train[i].clone()).collect()
            };
            let refs: Vec<&ImageSample> = samples.iter().collect();
            let batch = Batch::from_samples(&refs, self.model.dtype())?;
            let alpha = self.draw_alpha();
            let v = self.train_step(&batch, alpha)?;
            sum.total += v.total;
            sum.ssl += v.ssl;
            sum.psl += v.psl;
            sum.esl += v.esl;
            steps += 1;
        }
        let n = steps as f64;
        self.epoch += 1;
        Ok((
            LossComponents {
                total: sum.total / n,
                ssl: sum.ssl / n,
                psl: sum.psl / n,
                esl: sum.esl / n,
            },
            lr,
        ))
    }
}

/// Per-pixel y1 argmax predictions, one label map per sample.
pub fn predict(model: &QMaxVitUnet, samples: &[ImageSample], batch_size: usize) -> Result<Vec<Array2<u32>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&ImageSample> = chunk.iter().collect();
        let batch = Batch::from_samples(&refs, model.dtype())?;
        let labels = model.predict(&batch.images)?;
        let (b, h, w) = labels.dims3()?;
        let flat = labels.flatten_all()?.to_vec1::<u32>()?;
        for i in 0..b {
            out.push(
                Array2::from_shape_vec((h, w), flat[i * h * w..(i + 1) * h * w].to_vec())
                    .expect("prediction layout"),
            );
        }
    }
    Ok(out)
}

/// Metrics of y1 predictions against dense labels: the aggregate and one
/// report per sample.
pub fn evaluate(model: &QMaxVitUnet, samples: &[ImageSample]) -> Result<(MetricReport, Vec<MetricReport>)> {
    let k = model.config().num_classes;
    for s in samples {
        let gt = s
            .dense_gt
            .as_ref()
            .ok_or_else(|| data_err!("sample {} has no dense labels", s.id))?;
        if gt.iter().any(|&v| v as usize >= k) {
            return Err(data_err!("sample {} has labels outside {k} model classes", s.id));
        }
    }
    let preds = predict(model, samples, 16)?;
    let mut reports = Vec::with_capacity(samples.len());
    for (s, p) in samples.iter().zip(&preds) {
        let gt = s.dense_gt.as_ref().expect("checked above");
        reports.push(MetricReport::compute(p.view(), gt.view(), k, s.spacing)?);
    }
    Ok((metrics::aggregate(&reports)?, reports))
}

/// Outcome of `fit`: the selected weights are loaded into `trainer.model`.
#[derive(Debug)]
pub struct FitResult {
    pub trainer: Trainer,
    pub history: History,
    /// Epoch (1-based) whose weights were kept.
    pub best_epoch: usize,
}

/// Trains for `cfg.epochs`, validating after each epoch when `val` is given
/// and keeping the weights with the best mean foreground DSC; without
/// validation the final weights are kept. `progress` sees each record.
pub fn fit(
    cfg: &TrainConfig,
    train: &[ImageSample],
    val: Option<&[ImageSample]>,
    mut progress: impl FnMut(&EpochRecord),
) -> Result<FitResult> {
    let mut trainer = Trainer::new(cfg, DType::F32)?;
    let val = val.filter(|v| !v.is_empty());
    let mut history = History::default();
    let mut best: Option<(f64, usize, BTreeMap<String, Tensor>)> = None;
    for _ in 0..cfg.epochs {
        let (loss, lr) = trainer.train_epoch(train)?;
        let (val_dsc, val_hd95) = match val {
            Some(v) => {
                let (r, _) = evaluate(&trainer.model, v)?;
                (r.dsc_avg, r.hd95_avg)
            }
            None => (f64::NAN, f64::NAN),
        };
        let rec = EpochRecord {
            epoch: trainer.epoch(),
            loss_total: loss.total,
            loss_ssl: loss.ssl,
            loss_psl: loss.psl,
            loss_esl: loss.esl,
            val_dsc,
            val_hd95,
            lr,
        };
        progress(&rec);
        history.records.push(rec);
        if val.is_some() && best.as_ref().is_none_or(|b| val_dsc > b.0) {
            best = Some((val_dsc, rec.epoch, trainer.model.store().snapshot()?));
        }
    }
    let best_epoch = match best {
        Some((_, epoch, weights)) => {
            trainer.model.store().load(&weights)?;
            epoch
        }
        None => cfg.epochs,
    };
    Ok(FitResult {
        trainer,
        history,
        best_epoch,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_points() {
        assert_eq!(lr_at(0, 10, 1e-3).unwrap(), 1e-3);
        assert!(lr_at(10, 10, 1e-3).unwrap().abs() < 1e-18);
        assert!((lr_at(5, 10, 1e-3).unwrap() - 5e-4).abs() < 1e-15);
        assert!(lr_at(11, 10, 1e-3).is_err());
    }

    #[test]
    fn schedule_never_increases() {
        let v: Vec<f64> = (0..=50).map(|s| lr_at(s, 50, 1e-3).unwrap()).collect();
        assert!(v.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut c = TrainConfig::new(ModelConfig::desk(4, 64));
        assert!(c.validate().is_ok());
        c.lr = 0.0;
        assert!(c.validate().is_err());
        c.lr = 1e-3;
        c.epochs = 0;
        assert!(c.validate().is_err());
    }
}
