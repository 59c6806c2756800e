//! Panoptic quality, mean IoU and mask AP.
//!
//! Every metric accumulates per-image statistics into a plain struct whose `merge` is
//! associative, so evaluation can be split across workers and reduced in any grouping.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inference::{InstanceList, PanopticMap, IGNORE};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassPq {
    pub iou_sum: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ClassPq {
    pub fn counted(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }

    /// `(PQ, SQ, RQ)`; SQ is 0 when there is no true positive.
    pub fn quality(&self) -> (f64, f64, f64) {
        let denom = self.tp as f64 + 0.5 * self.fp as f64 + 0.5 * self.fn_ as f64;
        if denom == 0.0 {
            return (0.0, 0.0, 0.0);
        }
        let pq = self.iou_sum / denom;
        let sq = if self.tp > 0 { self.iou_sum / self.tp as f64 } else { 0.0 };
        let rq = self.tp as f64 / denom;
        (pq, sq, rq)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PqAggregate {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub classes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PqReport {
    pub per_class: Vec<ClassPq>,
    pub all: Option<PqAggregate>,
    pub seen: Option<PqAggregate>,
    pub unseen: Option<PqAggregate>,
}

impl PqReport {
    pub fn pq(&self) -> f64 {
        self.all.as_ref().map_or(0.0, |a| a.pq)
    }

    pub fn pq_seen(&self) -> f64 {
        self.seen.as_ref().map_or(0.0, |a| a.pq)
    }

    pub fn pq_unseen(&self) -> f64 {
        self.unseen.as_ref().map_or(0.0, |a| a.pq)
    }
}

/// Matching statistics for panoptic quality.
#[derive(Debug, Clone, PartialEq)]
pub struct PqStat {
    pub per_class: Vec<ClassPq>,
}

impl PqStat {
    pub fn new(num_classes: usize) -> Self {
        Self {
            per_class: vec![ClassPq::default(); num_classes],
        }
    }

    /// Adds one image. Segments match iff they share a category and IoU > 0.5, where the
    /// union excludes the prediction's overlap with ground-truth void. Unmatched
    /// predictions lying more than half in void are not false positives.
    pub fn accumulate(&mut self, pred: &PanopticMap, gt: &PanopticMap) -> Result<()> {
        if pred.height != gt.height || pred.width != gt.width {
            return Err(Error::Shape(format!(
                "prediction {}×{} vs ground truth {}×{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        for s in pred.segments.values().chain(gt.segments.values()) {
            if s.category_id >= self.per_class.len() {
                return Err(Error::InvalidArgument(format!("category {} out of range", s.category_id)));
            }
        }
        let mut inter: HashMap<(u32, u32), usize> = HashMap::new();
        for (&g, &p) in gt.segment_ids.iter().zip(&pred.segment_ids) {
            *inter.entry((g, p)).or_default() += 1;
        }
        let gt_area = gt.areas();
        let pred_area = pred.areas();
        let void_overlap = |p: u32| inter.get(&(0, p)).copied().unwrap_or(0);

        let mut gt_matched = std::collections::HashSet::new();
        let mut pred_matched = std::collections::HashSet::new();
        let mut pairs: Vec<_> = inter.iter().filter(|((g, p), _)| *g != 0 && *p != 0).collect();
        pairs.sort();
        for (&(g, p), &i) in pairs {
            let (Some(gs), Some(ps)) = (gt.segments.get(&g), pred.segments.get(&p)) else {
                continue;
            };
            if gs.category_id != ps.category_id {
                continue;
            }
            let union = pred_area[&p] + gt_area[&g] - i - void_overlap(p);
            let iou = i as f64 / union as f64;
            if iou > 0.5 {
                debug_assert!(!gt_matched.contains(&g) && !pred_matched.contains(&p));
                let c = &mut self.per_class[gs.category_id];
                c.tp += 1;
                c.iou_sum += iou;
                gt_matched.insert(g);
                pred_matched.insert(p);
            }
        }
        for (g, s) in &gt.segments {
            if !gt_matched.contains(g) {
                self.per_class[s.category_id].fn_ += 1;
            }
        }
        for (p, s) in &pred.segments {
            if pred_matched.contains(p) {
                continue;
            }
            let area = pred_area.get(p).copied().unwrap_or(0);
            if area > 0 && void_overlap(*p) as f64 / area as f64 > 0.5 {
                continue;
            }
            self.per_class[s.category_id].fp += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &PqStat) {
        for (a, b) in self.per_class.iter_mut().zip(&other.per_class) {
            a.iou_sum += b.iou_sum;
            a.tp += b.tp;
            a.fp += b.fp;
            a.fn_ += b.fn_;
        }
    }

    fn aggregate(&self, include: impl Fn(usize) -> bool) -> Option<PqAggregate> {
        let qs: Vec<_> = self
            .per_class
            .iter()
            .enumerate()
            .filter(|(j, c)| include(*j) && c.counted())
            .map(|(_, c)| c.quality())
            .collect();
        if qs.is_empty() {
            return None;
        }
        let n = qs.len() as f64;
        Some(PqAggregate {
            pq: qs.iter().map(|q| q.0).sum::<f64>() / n,
            sq: qs.iter().map(|q| q.1).sum::<f64>() / n,
            rq: qs.iter().map(|q| q.2).sum::<f64>() / n,
            classes: qs.len(),
        })
    }

    pub fn report(&self, seen_mask: &[bool]) -> PqReport {
        PqReport {
            per_class: self.per_class.clone(),
            all: self.aggregate(|_| true),
            seen: self.aggregate(|j| seen_mask.get(j).copied().unwrap_or(true)),
            unseen: self.aggregate(|j| !seen_mask.get(j).copied().unwrap_or(true)),
        }
    }
}

/// Single-image panoptic quality.
pub fn panoptic_quality(pred: &PanopticMap, gt: &PanopticMap, seen_mask: &[bool]) -> Result<PqReport> {
    let mut stat = PqStat::new(seen_mask.len());
    stat.accumulate(pred, gt)?;
    Ok(stat.report(seen_mask))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class: Vec<Option<f64>>,
    pub miou: f64,
}

/// Confusion matrix over non-ignored pixels, `gt × pred`.
#[derive(Debug, Clone, PartialEq)]
pub struct Confusion {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Self {
            num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    /// Pixels whose ground truth is [`IGNORE`] are skipped.
    pub fn accumulate(&mut self, pred: &[usize], gt: &[usize]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!("{} predicted vs {} ground-truth pixels", pred.len(), gt.len())));
        }
        let c = self.num_classes;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE {
                continue;
            }
            if g >= c || p >= c {
                return Err(Error::InvalidArgument(format!("label out of range: pred {p}, gt {g}")));
            }
            self.counts[g * c + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Confusion) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn report(&self) -> IouReport {
        let c = self.num_classes;
        let per_class: Vec<Option<f64>> = (0..c)
            .map(|j| {
                let tp = self.counts[j * c + j];
                let gt_total: u64 = (0..c).map(|p| self.counts[j * c + p]).sum();
                let pred_total: u64 = (0..c).map(|g| self.counts[g * c + j]).sum();
                let union = gt_total + pred_total - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = per_class.iter().flatten().copied().collect();
        let miou = if present.is_empty() { 0.0 } else { present.iter().sum::<f64>() / present.len() as f64 };
        IouReport { per_class, miou }
    }
}

pub fn mean_iou(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<IouReport> {
    let mut c = Confusion::new(num_classes);
    c.accumulate(pred, gt)?;
    Ok(c.report())
}

pub const AP_IOU_THRESHOLDS: [f64; 10] = [0.5, 0.55, 0.6, 0.65, 0.7, 0.75, 0.8, 0.85, 0.9, 0.95];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    pub ap: f64,
    pub ap50: f64,
    /// Mean over IoU thresholds per class; `None` for classes without ground truth.
    pub per_class: Vec<Option<f64>>,
}

fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut i, mut u) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        i += (x && y) as usize;
        u += (x || y) as usize;
    }
    if u == 0 {
        0.0
    } else {
        i as f64 / u as f64
    }
}

/// 101-point interpolated average precision from ranked hit flags.
pub fn interpolated_ap(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(hits.len());
    let mut recall = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (k, &h) in hits.iter().enumerate() {
        tp += h as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / num_gt as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut sum = 0.0;
    for r in 0..=100 {
        let thr = r as f64 / 100.0;
        let idx = recall.partition_point(|&v| v < thr - 1e-12);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / 101.0
}

/// COCO-style mask AP over images. Per class and IoU threshold, detections from all
/// images are ranked by score and each is matched greedily to the unmatched ground
/// truth (same image and class) of highest IoU at or above the threshold.
pub fn instance_ap(preds: &[InstanceList], gts: &[InstanceList], num_classes: usize) -> Result<ApReport> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!("{} prediction lists vs {} ground-truth lists", preds.len(), gts.len())));
    }
    let mut per_threshold = vec![Vec::new(); AP_IOU_THRESHOLDS.len()];
    let mut per_class = vec![None; num_classes];
    for c in 0..num_classes {
        let num_gt: usize = gts.iter().map(|g| g.iter().filter(|x| x.category_id == c).count()).sum();
        if num_gt == 0 {
            continue;
        }
        let mut dets: Vec<(usize, usize)> = preds
            .iter()
            .enumerate()
            .flat_map(|(img, ps)| ps.iter().enumerate().filter(|(_, p)| p.category_id == c).map(move |(k, _)| (img, k)))
            .collect();
        dets.sort_by(|a, b| preds[b.0][b.1].score.total_cmp(&preds[a.0][a.1].score).then(a.cmp(b)));
        let mut class_sum = 0.0;
        for (t, &thr) in AP_IOU_THRESHOLDS.iter().enumerate() {
            let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
            let hits: Vec<bool> = dets
                .iter()
                .map(|&(img, k)| {
                    let pm = &preds[img][k].mask;
                    let mut best: Option<(usize, f64)> = None;
                    for (gi, g) in gts[img].iter().enumerate() {
                        if g.category_id != c || used[img][gi] {
                            continue;
                        }
                        let iou = mask_iou(pm, &g.mask);
                        if iou >= thr && best.is_none_or(|(_, b)| iou > b) {
                            best = Some((gi, iou));
                        }
                    }
                    if let Some((gi, _)) = best {
                        used[img][gi] = true;
                        true
                    } else {
                        false
                    }
                })
                .collect();
            let ap = interpolated_ap(&hits, num_gt);
            per_threshold[t].push(ap);
            class_sum += ap;
        }
        per_class[c] = Some(class_sum / AP_IOU_THRESHOLDS.len() as f64);
    }
    let mean = |v: &Vec<f64>| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let ap = per_threshold.iter().map(mean).sum::<f64>() / AP_IOU_THRESHOLDS.len() as f64;
    Ok(ApReport {
        ap,
        ap50: mean(&per_threshold[0]),
        per_class,
    })
}
