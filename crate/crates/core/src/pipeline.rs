//! End-to-end prediction and evaluation over datasets.

use serde::{Deserialize, Serialize};

use crate::classifiers::{EnsembleMethod, EnsembleParams, ScoreMatrix};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::inference::{merge, proposal_instances, semantic_map, InstanceList, MaskProbs, MergeThresholds, PanopticMap};
use crate::metrics::{instance_ap, ApReport, Confusion, IouReport, PqReport, PqStat};
use crate::model::{RawPrediction, SegModel};
use crate::raster::Image;
use crate::vocab::Vocabulary;

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub ensemble: EnsembleParams,
    pub thresholds: MergeThresholds,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageOutput {
    pub panoptic: PanopticMap,
    pub semantic: Vec<usize>,
    /// Pre-merge thing proposals.
    pub instances: InstanceList,
    pub scores: ScoreMatrix,
}

/// Runs the network over `images` in batches of `batch_size`.
pub fn predict_raw(model: &SegModel, images: &[Image], vocab: &Vocabulary, batch_size: usize) -> Result<Vec<RawPrediction>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(batch_size.max(1)) {
        let refs: Vec<&Image> = chunk.iter().collect();
        let sizes: Vec<_> = refs.iter().map(|i| (i.width, i.height)).collect();
        if sizes.iter().any(|s| *s != sizes[0]) {
            // mixed sizes: one at a time
            for im in refs {
                out.extend(model.predict(&Image::batch_tensor(&[im], model.dtype(), model.device())?, vocab)?);
            }
            continue;
        }
        out.extend(model.predict(&Image::batch_tensor(&refs, model.dtype(), model.device())?, vocab)?);
    }
    Ok(out)
}

/// Merges, semantic map and instances for one image of `height × width`. Mask logits
/// are resized bilinearly to that size once and shared by every output.
pub fn postprocess(
    raw: &RawPrediction,
    height: usize,
    width: usize,
    vocab: &Vocabulary,
    settings: &EvalSettings,
) -> Result<ImageOutput> {
    let scores = raw.scores(vocab, &settings.ensemble)?;
    let probs = MaskProbs::from_logits(&raw.mask_logits, raw.num_proposals, raw.mask_height, raw.mask_width, height, width);
    Ok(ImageOutput {
        panoptic: merge(&probs, &scores, vocab, &settings.thresholds)?,
        semantic: semantic_map(&probs, &scores)?,
        instances: proposal_instances(&probs, &scores, vocab),
        scores,
    })
}

/// The same pipeline with the vocabulary restricted to `gt_categories`; outputs carry
/// category ids of the full `vocab`.
pub fn grounding_predict(
    raw: &RawPrediction,
    height: usize,
    width: usize,
    vocab: &Vocabulary,
    gt_categories: &[usize],
    settings: &EvalSettings,
) -> Result<ImageOutput> {
    if gt_categories.is_empty() {
        return Err(Error::InvalidArgument("grounding needs at least one ground-truth category".into()));
    }
    let (sub, back) = vocab.restrict(gt_categories)?;
    let mut out = postprocess(raw, height, width, &sub, settings)?;
    out.panoptic.map_categories(&back);
    for s in out.semantic.iter_mut() {
        *s = back[*s];
    }
    for inst in out.instances.iter_mut() {
        inst.category_id = back[inst.category_id];
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_seen: Option<f64>,
    pub pq_unseen: Option<f64>,
    pub miou: f64,
    pub ap: f64,
    pub ap50: f64,
    pub panoptic: PqReport,
    pub semantic: IouReport,
    pub instance: ApReport,
}

impl EvalReport {
    fn new(panoptic: PqReport, semantic: IouReport, instance: ApReport) -> Self {
        let all = panoptic.all.clone();
        Self {
            pq: all.as_ref().map_or(0.0, |a| a.pq),
            sq: all.as_ref().map_or(0.0, |a| a.sq),
            rq: all.as_ref().map_or(0.0, |a| a.rq),
            pq_seen: panoptic.seen.as_ref().map(|a| a.pq),
            pq_unseen: panoptic.unseen.as_ref().map(|a| a.pq),
            miou: semantic.miou,
            ap: instance.ap,
            ap50: instance.ap50,
            panoptic,
            semantic,
            instance,
        }
    }
}

/// Scores cached raw predictions against `data`. `vocab` must index the same
/// categories as the dataset. With `grounding`, each image uses only its own
/// ground-truth categories.
pub fn evaluate_raw(
    raws: &[RawPrediction],
    data: &Dataset,
    vocab: &Vocabulary,
    settings: &EvalSettings,
    grounding: bool,
) -> Result<EvalReport> {
    if raws.len() != data.len() {
        return Err(Error::Shape(format!("{} predictions for {} images", raws.len(), data.len())));
    }
    if vocab.len() != data.categories.len() {
        return Err(Error::Shape(format!(
            "vocabulary has {} categories, dataset has {}",
            vocab.len(),
            data.categories.len()
        )));
    }
    let c = vocab.len();
    let outputs = parallel_map(raws.len(), |i| {
        let (raw, s) = (&raws[i], &data.samples[i]);
        let (h, w) = (s.gt.height, s.gt.width);
        if grounding {
            grounding_predict(raw, h, w, vocab, &s.category_ids(), settings)
        } else {
            postprocess(raw, h, w, vocab, settings)
        }
    })?;
    let mut pq = PqStat::new(c);
    let mut conf = Confusion::new(c);
    let mut pred_inst = Vec::with_capacity(raws.len());
    let mut gt_inst = Vec::with_capacity(raws.len());
    for (out, s) in outputs.into_iter().zip(&data.samples) {
        pq.accumulate(&out.panoptic, &s.gt)?;
        conf.accumulate(&out.semantic, &s.gt.semantic())?;
        pred_inst.push(out.instances);
        gt_inst.push(crate::inference::panoptic_instances(&s.gt));
    }
    Ok(EvalReport::new(
        pq.report(&vocab.seen_mask),
        conf.report(),
        instance_ap(&pred_inst, &gt_inst, c)?,
    ))
}

/// Test-time resize: shorter side to `short`, longer side capped at `max_long`, both
/// multiples of 32. Predictions are mapped back to the original size afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TestResize {
    pub short: usize,
    pub max_long: usize,
}

impl TestResize {
    pub fn apply(&self, image: &Image) -> Result<Image> {
        image.resize_shorter_side(self.short, self.max_long, 32)
    }
}

/// Raw predictions for every sample of `data`.
pub fn predict_dataset(
    model: &SegModel,
    data: &Dataset,
    vocab: &Vocabulary,
    resize: TestResize,
    batch_size: usize,
) -> Result<Vec<RawPrediction>> {
    let images = data.samples.iter().map(|s| resize.apply(&s.image)).collect::<Result<Vec<_>>>()?;
    predict_raw(model, &images, vocab, batch_size)
}

pub fn evaluate(
    model: &SegModel,
    data: &Dataset,
    vocab: &Vocabulary,
    settings: &EvalSettings,
    resize: TestResize,
    batch_size: usize,
) -> Result<EvalReport> {
    let raws = predict_dataset(model, data, vocab, resize, batch_size)?;
    evaluate_raw(&raws, data, vocab, settings, false)
}

/// Runs `f(0..n)` on scoped worker threads; results come back in index order.
fn parallel_map<T: Send>(n: usize, f: impl Fn(usize) -> Result<T> + Sync) -> Result<Vec<T>> {
    let workers = std::thread::available_parallelism().map_or(1, |p| p.get()).min(n.max(1));
    if workers <= 1 {
        return (0..n).map(&f).collect();
    }
    let chunk = n.div_ceil(workers);
    let f = &f;
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| scope.spawn(move || (w * chunk..((w + 1) * chunk).min(n)).map(f).collect::<Result<Vec<T>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(n);
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// `(α, β)` cells of the ensemble sweep.
pub const SWEEP_GRID: [(f64, f64); 12] = [
    (0.0, 0.0),
    (1.0, 1.0),
    (0.0, 1.0),
    (1.0, 0.0),
    (0.5, 0.5),
    (0.5, 0.6),
    (0.5, 0.7),
    (0.5, 0.8),
    (0.4, 0.6),
    (0.4, 0.7),
    (0.4, 0.8),
    (0.4, 0.9),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecord {
    pub alpha: f64,
    pub beta: f64,
    pub method: EnsembleMethod,
    pub pq: f64,
    pub pq_seen: Option<f64>,
    pub pq_unseen: Option<f64>,
    pub miou: f64,
    pub ap: f64,
}

/// Evaluates every grid cell with both ensemble methods on cached predictions.
pub fn sweep(
    raws: &[RawPrediction],
    data: &Dataset,
    vocab: &Vocabulary,
    thresholds: MergeThresholds,
    grid: &[(f64, f64)],
) -> Result<Vec<SweepRecord>> {
    let mut out = Vec::with_capacity(grid.len() * 2);
    for &(alpha, beta) in grid {
        for method in [EnsembleMethod::Arithmetic, EnsembleMethod::Geometric] {
            let settings = EvalSettings {
                ensemble: EnsembleParams::new(alpha, beta, method)?,
                thresholds,
            };
            let r = evaluate_raw(raws, data, vocab, &settings, false)?;
            out.push(SweepRecord {
                alpha,
                beta,
                method,
                pq: r.pq,
                pq_seen: r.pq_seen,
                pq_unseen: r.pq_unseen,
                miou: r.miou,
                ap: r.ap,
            });
        }
    }
    Ok(out)
}

/// Test vocabulary over every dataset category (with its seen/unseen partition), the
/// training vocabulary, and the map from dataset category ids to training indices.
pub struct VocabSetup {
    pub full: Vocabulary,
    pub train: Vocabulary,
    pub class_of: Vec<Option<usize>>,
}

pub fn vocab_setup(
    categories: &[crate::vocab::Category],
    train_ids: &[usize],
    encoder: &dyn crate::vocab::TextEncoder,
    templates: &[String],
) -> Result<VocabSetup> {
    let full = crate::vocab::build_vocabulary(categories.to_vec(), encoder, templates)?;
    let (train, back) = full.restrict(train_ids)?;
    let seen = crate::vocab::partition_seen_unseen(&full, &train);
    let full = full.with_seen_mask(seen)?;
    let mut class_of = vec![None; full.len()];
    for (k, &id) in back.iter().enumerate() {
        class_of[id] = Some(k);
    }
    Ok(VocabSetup { full, train, class_of })
}
