//! Set-prediction losses and the optimization loop.
//!
//! Every decoder prediction (initial queries plus each layer) is matched to the ground
//! truth separately and contributes its own loss. Only matched proposals are penalized:
//! there is no "no object" class, so unmatched proposals receive no gradient from the
//! loss through their mask or class logits.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use candle_core::{DType, Tensor, D};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FeaturePyramid, STRIDES};
use crate::classifiers::ScoreMatrix;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::matching::{hungarian, match_cost, LossWeights, MatchResult, Targets};
use crate::model::SegModel;
use crate::raster::Image;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Matches every prediction level of every image. Returns `[level][image]`.
pub fn match_batch(
    layer_logits: &[Tensor],
    class_logits: &[Tensor],
    targets: &[Targets],
    weights: &LossWeights,
) -> Result<Vec<Vec<MatchResult>>> {
    let mut out = Vec::with_capacity(layer_logits.len());
    for (level, logits) in layer_logits.iter().enumerate() {
        let (b, n, h, w) = logits.dims4()?;
        if b != targets.len() {
            return Err(Error::Shape(format!("{b} images vs {} targets", targets.len())));
        }
        let flat = logits.detach().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let probs = match class_logits.get(level) {
            Some(cl) => Some(candle_nn::ops::softmax(&cl.detach().to_dtype(DType::F64)?, D::Minus1)?.to_vec3::<f64>()?),
            None => None,
        };
        let mut per_image = Vec::with_capacity(b);
        for (i, t) in targets.iter().enumerate() {
            if (t.height, t.width) != (h, w) {
                return Err(Error::Shape(format!("targets {}×{} vs logits {h}×{w}", t.height, t.width)));
            }
            let sm = match &probs {
                Some(p) => {
                    let c = p[i][0].len();
                    Some(ScoreMatrix::new(n, c, p[i].iter().flatten().copied().collect())?)
                }
                None => None,
            };
            let cost = match_cost(&flat[i * n * h * w..(i + 1) * n * h * w], n, sm.as_ref(), t, weights)?;
            per_image.push(hungarian(&cost)?);
        }
        out.push(per_image);
    }
    Ok(out)
}

/// Deep-supervised loss for fixed matches. Per level, each term is summed over the
/// matched pairs of the batch and divided by their count; levels are then summed.
/// `class_logits` may be empty, which drops the classification term.
pub fn compute_loss(
    layer_logits: &[Tensor],
    class_logits: &[Tensor],
    targets: &[Targets],
    matches: &[Vec<MatchResult>],
    weights: &LossWeights,
) -> Result<(Tensor, LossBreakdown)> {
    let first = layer_logits
        .first()
        .ok_or_else(|| Error::InvalidArgument("no predictions to supervise".into()))?;
    let (dtype, device) = (first.dtype(), first.device().clone());
    let mut total = Tensor::zeros((), dtype, &device)?;
    let mut parts = LossBreakdown::default();
    for (level, logits) in layer_logits.iter().enumerate() {
        let (_, _, h, w) = logits.dims4()?;
        let mut pred_rows = Vec::new();
        let mut cls_rows = Vec::new();
        let mut tgt = Vec::new();
        let mut labels = Vec::new();
        for (i, m) in matches[level].iter().enumerate() {
            if m.pairs.is_empty() {
                continue;
            }
            let idx: Vec<u32> = m.pairs.iter().map(|p| p.0 as u32).collect();
            let idx = Tensor::from_vec(idx, m.pairs.len(), &device)?;
            pred_rows.push(logits.get(i)?.flatten_from(1)?.index_select(&idx, 0)?);
            if let Some(cl) = class_logits.get(level) {
                cls_rows.push(cl.get(i)?.index_select(&idx, 0)?);
            }
            for &(_, k) in &m.pairs {
                tgt.extend_from_slice(targets[i].mask(k));
                labels.push(targets[i].labels[k]);
            }
        }
        let count = labels.len();
        if count == 0 {
            continue;
        }
        let x = Tensor::cat(&pred_rows, 0)?;
        let y = Tensor::from_vec(tgt, (count, h * w), &device)?.to_dtype(dtype)?;
        let norm = count as f64;

        // softplus(x) - x*y, written stably
        let bce = (x.relu()? - (&x * &y)? + x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?)?
            .mean(1)?
            .sum_all()?
            .affine(1.0 / norm, 0.0)?;
        let p = candle_nn::ops::sigmoid(&x)?;
        let inter = (&p * &y)?.sum(1)?;
        let dice = ((inter.affine(2.0, 1.0)? / (p.sum(1)? + y.sum(1)?)?.affine(1.0, 1.0)?)?.affine(-1.0, 1.0)?)
            .sum_all()?
            .affine(1.0 / norm, 0.0)?;
        let mut layer = (bce.affine(weights.bce, 0.0)? + dice.affine(weights.dice, 0.0)?)?;
        parts.bce += scalar(&bce)?;
        parts.dice += scalar(&dice)?;

        if !cls_rows.is_empty() {
            let z = Tensor::cat(&cls_rows, 0)?;
            let c = z.dim(1)?;
            let shifted = z.broadcast_sub(&z.max_keepdim(1)?.detach())?;
            let log_probs = shifted.broadcast_sub(&shifted.exp()?.sum_keepdim(1)?.log()?)?;
            let mut onehot = vec![0.0f64; count * c];
            for (r, &l) in labels.iter().enumerate() {
                onehot[r * c + l] = 1.0;
            }
            let onehot = Tensor::from_vec(onehot, (count, c), &device)?.to_dtype(dtype)?;
            let ce = (log_probs * onehot)?.sum_all()?.affine(-1.0 / norm, 0.0)?;
            parts.cls += scalar(&ce)?;
            layer = (layer + ce.affine(weights.cls, 0.0)?)?;
        }
        total = (total + layer)?;
    }
    parts.total = scalar(&total)?;
    Ok((total, parts))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning-rate factor for backbone parameters when the backbone is trainable.
    pub backbone_lr_mult: f64,
    pub weight_decay: f64,
    /// Fractions of the total step count at which the learning rate is multiplied by `gamma`.
    pub milestones: Vec<f64>,
    pub gamma: f64,
    pub loss: LossWeights,
    pub seed: u64,
    /// Save a checkpoint every this many epochs (0: final only).
    pub checkpoint_every: usize,
    /// Stop after this many optimizer steps when set.
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 1e-3,
            backbone_lr_mult: 0.1,
            weight_decay: 0.05,
            milestones: vec![0.7, 0.9],
            gamma: 0.1,
            loss: LossWeights::default(),
            seed: 0,
            checkpoint_every: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("train.lr", "must be a finite nonnegative number"));
        }
        if !(self.backbone_lr_mult >= 0.0 && self.backbone_lr_mult.is_finite()) {
            return Err(Error::config("train.backbone_lr_mult", "must be a finite nonnegative number"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::config("train.weight_decay", "must be a finite nonnegative number"));
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::config("train.milestones", "fractions must lie in [0, 1]"));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::config("train.gamma", "must lie in (0, 1]"));
        }
        self.loss.validate()
    }

    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| step >= (m * total_steps as f64).floor() as usize)
            .count();
        self.lr * self.gamma.powi(passed as i32)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub initial_backbone_checksum: u64,
    pub final_backbone_checksum: u64,
    pub final_checksum: u64,
    pub seconds: f64,
}

/// Training examples prepared once: images, matching targets and, for a frozen
/// backbone, the cached feature pyramids.
pub struct TrainSet {
    pub images: Vec<Image>,
    pub targets: Vec<Targets>,
    pyramids: Option<Vec<FeaturePyramid>>,
}

impl TrainSet {
    /// `class_of` maps dataset category ids to indices of the training vocabulary.
    pub fn new(model: &SegModel, data: &Dataset, class_of: &[Option<usize>]) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::InvalidArgument("training set is empty".into()));
        }
        let images: Vec<Image> = data.samples.iter().map(|s| s.image.clone()).collect();
        let targets = data
            .samples
            .iter()
            .map(|s| Targets::from_panoptic(&s.gt, STRIDES[0], class_of))
            .collect::<Result<Vec<_>>>()?;
        let pyramids = if model.backbone.is_frozen() {
            let mut out = Vec::with_capacity(images.len());
            for chunk in images.chunks(32) {
                let refs: Vec<&Image> = chunk.iter().collect();
                let batch = Image::batch_tensor(&refs, model.dtype(), model.device())?;
                let pyr = model.pyramid(&batch)?.detach();
                for i in 0..chunk.len() {
                    out.push(pyr.select(&[i])?);
                }
            }
            Some(out)
        } else {
            None
        };
        Ok(Self {
            images,
            targets,
            pyramids,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn batch(&self, model: &SegModel, idx: &[usize]) -> Result<(FeaturePyramid, Vec<Targets>)> {
        let pyr = match &self.pyramids {
            Some(cache) => FeaturePyramid::cat(&idx.iter().map(|&i| cache[i].clone()).collect::<Vec<_>>())?,
            None => {
                let refs: Vec<&Image> = idx.iter().map(|&i| &self.images[i]).collect();
                model.pyramid(&Image::batch_tensor(&refs, model.dtype(), model.device())?)?
            }
        };
        Ok((pyr, idx.iter().map(|&i| self.targets[i].clone()).collect()))
    }
}

/// One forward/backward pass; returns the loss and its breakdown.
pub fn batch_loss(
    model: &SegModel,
    pyramid: &FeaturePyramid,
    targets: &[Targets],
    text: &Tensor,
    weights: &LossWeights,
) -> Result<(Tensor, LossBreakdown)> {
    let out = model.forward(pyramid, Some(text))?;
    let matches = match_batch(&out.proposals.layer_logits, &out.class_logits, targets, weights)?;
    compute_loss(&out.proposals.layer_logits, &out.class_logits, targets, &matches, weights)
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    order
}

/// Trains `model` in place. With `out_dir`, writes `metrics.jsonl`, periodic
/// checkpoints under `checkpoints/` and the final model into `out_dir` itself.
pub fn train(
    model: &mut SegModel,
    set: &TrainSet,
    train_vocab: &Vocabulary,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    if set.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let start = Instant::now();
    let initial_backbone_checksum = model.backbone_checksum()?;
    let text = model.text_tensor(train_vocab)?;
    let params = |lr: f64| ParamsAdamW {
        lr,
        weight_decay: cfg.weight_decay,
        ..ParamsAdamW::default()
    };
    let (backbone_vars, head_vars) = model.trainable_var_groups();
    let mut opt = AdamW::new(head_vars, params(cfg.lr))?;
    let mut backbone_opt = AdamW::new(backbone_vars, params(cfg.lr * cfg.backbone_lr_mult))?;
    let steps_per_epoch = set.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.max_steps.unwrap_or(usize::MAX).min(cfg.epochs * steps_per_epoch);
    let mut log = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            Some(std::io::BufWriter::new(std::fs::File::create(dir.join("metrics.jsonl"))?))
        }
        None => None,
    };
    let mut steps = Vec::with_capacity(total_steps);
    let mut step = 0;
    'outer: for epoch in 0..cfg.epochs {
        let order = epoch_order(set.len(), cfg.seed, epoch);
        for idx in order.chunks(cfg.batch_size) {
            if step >= total_steps {
                break 'outer;
            }
            let lr = cfg.lr_at(step, total_steps);
            opt.set_learning_rate(lr);
            backbone_opt.set_learning_rate(lr * cfg.backbone_lr_mult);
            let (pyr, targets) = set.batch(model, idx)?;
            let (loss, parts) = batch_loss(model, &pyr, &targets, &text, &cfg.loss)?;
            if !parts.total.is_finite() {
                let msg = format!("non-finite loss at step {step} (epoch {epoch}): {parts:?}, batch {idx:?}");
                if let Some(dir) = out_dir {
                    let dump = serde_json::json!({ "step": step, "epoch": epoch, "batch": idx, "loss": parts, "lr": lr });
                    std::fs::write(dir.join("nonfinite_dump.json"), serde_json::to_string_pretty(&dump)?)?;
                }
                return Err(Error::NonFinite(msg));
            }
            let grads = loss.backward()?;
            opt.step(&grads)?;
            backbone_opt.step(&grads)?;
            let rec = StepRecord {
                step,
                epoch,
                lr,
                loss: parts,
            };
            if let Some(w) = log.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&rec)?)?;
            }
            log::debug!("step {step} epoch {epoch} lr {lr:.2e} loss {:.4}", parts.total);
            steps.push(rec);
            step += 1;
        }
        if let (Some(dir), true) = (out_dir, cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0) {
            model.save(&checkpoint_dir(dir, epoch + 1))?;
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    if let Some(dir) = out_dir {
        model.save(dir)?;
    }
    Ok(TrainReport {
        steps,
        initial_backbone_checksum,
        final_backbone_checksum: model.backbone_checksum()?,
        final_checksum: model.checksum()?,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub fn checkpoint_dir(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("epoch_{epoch:04}"))
}
