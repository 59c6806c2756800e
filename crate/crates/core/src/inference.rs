//! Turning proposals and class scores into panoptic, semantic and instance outputs.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::classifiers::ScoreMatrix;
use crate::error::{Error, Result};
use crate::util::{resize_bilinear, sigmoid};
use crate::vocab::Vocabulary;

/// Semantic label for pixels that carry no class.
pub const IGNORE: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub category_id: usize,
    pub is_thing: bool,
    pub score: f64,
}

/// Per-pixel segment ids (0 = void) plus the segment table.
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticMap {
    pub height: usize,
    pub width: usize,
    pub segment_ids: Vec<u32>,
    pub segments: BTreeMap<u32, Segment>,
}

impl PanopticMap {
    pub fn void(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            segment_ids: vec![0; height * width],
            segments: BTreeMap::new(),
        }
    }

    pub fn area(&self, id: u32) -> usize {
        self.segment_ids.iter().filter(|&&s| s == id).count()
    }

    pub fn areas(&self) -> HashMap<u32, usize> {
        let mut out = HashMap::new();
        for &s in &self.segment_ids {
            if s != 0 {
                *out.entry(s).or_default() += 1;
            }
        }
        out
    }

    /// Checks that the map's nonzero ids and the table keys coincide, and that no stuff
    /// category owns more than one segment.
    pub fn validate(&self) -> Result<()> {
        if self.segment_ids.len() != self.height * self.width {
            return Err(Error::Shape(format!(
                "segment map has {} pixels, expected {}×{}",
                self.segment_ids.len(),
                self.height,
                self.width
            )));
        }
        let in_map: BTreeSet<u32> = self.segment_ids.iter().copied().filter(|&s| s != 0).collect();
        let in_table: BTreeSet<u32> = self.segments.keys().copied().collect();
        if self.segments.contains_key(&0) {
            return Err(Error::Format("segment id 0 is reserved for void".into()));
        }
        if in_map != in_table {
            return Err(Error::Format(format!(
                "segment ids in map {in_map:?} differ from table {in_table:?}"
            )));
        }
        let mut stuff = BTreeSet::new();
        for s in self.segments.values() {
            if !s.is_thing && !stuff.insert(s.category_id) {
                return Err(Error::Format(format!("stuff category {} appears twice", s.category_id)));
            }
        }
        Ok(())
    }

    /// Per-pixel category, [`IGNORE`] for void.
    pub fn semantic(&self) -> Vec<usize> {
        self.segment_ids
            .iter()
            .map(|&s| if s == 0 { IGNORE } else { self.segments[&s].category_id })
            .collect()
    }

    /// Re-labels categories through `map` (e.g. from a restricted vocabulary back to
    /// the full one).
    pub fn map_categories(&mut self, map: &[usize]) {
        for s in self.segments.values_mut() {
            s.category_id = map[s.category_id];
        }
    }
}

/// Sigmoid mask probabilities at output resolution, `n × height × width`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskProbs {
    pub n: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl MaskProbs {
    /// Bilinearly upsamples `n` logit maps of `h×w` to `out_h×out_w`, then applies the sigmoid.
    pub fn from_logits(logits: &[f32], n: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Self {
        let mut data = Vec::with_capacity(n * out_h * out_w);
        for i in 0..n {
            let up = resize_bilinear(&logits[i * h * w..(i + 1) * h * w], h, w, out_h, out_w);
            data.extend(up.into_iter().map(sigmoid));
        }
        Self {
            n,
            height: out_h,
            width: out_w,
            data,
        }
    }

    pub fn mask(&self, i: usize) -> &[f32] {
        let p = self.height * self.width;
        &self.data[i * p..(i + 1) * p]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MergeThresholds {
    /// Proposals whose best class score is below this are discarded.
    pub object: f64,
    /// Minimum ratio of painted area to the proposal's own (p ≥ 0.5) area.
    pub overlap: f64,
}

impl Default for MergeThresholds {
    fn default() -> Self {
        Self {
            object: 0.25,
            overlap: 0.8,
        }
    }
}

/// Greedy mask-wise merging.
///
/// Proposals scoring at least `object` are ranked by confidence (ties by lower index)
/// and every pixel goes to the ranked proposal maximizing `score · p(pixel)`. A
/// proposal keeps the pixels it wins where its own probability is at least 0.5; it is
/// dropped if that painted area is below `overlap` times its own `p ≥ 0.5` area. Stuff
/// segments of the same class are fused. Everything else is void.
pub fn merge(probs: &MaskProbs, scores: &ScoreMatrix, vocab: &Vocabulary, thresholds: &MergeThresholds) -> Result<PanopticMap> {
    if probs.n != scores.rows {
        return Err(Error::Shape(format!("{} masks vs {} score rows", probs.n, scores.rows)));
    }
    if scores.cols != vocab.len() {
        return Err(Error::Shape(format!("{} score columns vs {} categories", scores.cols, vocab.len())));
    }
    let (h, w) = (probs.height, probs.width);
    let top = scores.top1();
    let mut order: Vec<usize> = (0..probs.n).filter(|&i| top[i].1 >= thresholds.object).collect();
    order.sort_by(|&a, &b| top[b].1.total_cmp(&top[a].1).then(a.cmp(&b)));

    let mut out = PanopticMap::void(h, w);
    if order.is_empty() {
        return Ok(out);
    }
    let npx = h * w;
    // winner rank per pixel
    let mut winner = vec![0usize; npx];
    for (p, win) in winner.iter_mut().enumerate() {
        let mut best = f64::NEG_INFINITY;
        for (r, &i) in order.iter().enumerate() {
            let v = top[i].1 * probs.mask(i)[p] as f64;
            if v > best {
                best = v;
                *win = r;
            }
        }
    }
    let mut stuff_ids: HashMap<usize, u32> = HashMap::new();
    let mut next_id = 1u32;
    for (r, &i) in order.iter().enumerate() {
        let m = probs.mask(i);
        let original = m.iter().filter(|&&v| v >= 0.5).count();
        let painted: Vec<usize> = (0..npx).filter(|&p| winner[p] == r && m[p] >= 0.5).collect();
        if original == 0 || painted.is_empty() {
            continue;
        }
        if (painted.len() as f64) / (original as f64) < thresholds.overlap {
            continue;
        }
        let (class, score) = top[i];
        let is_thing = vocab.is_thing(class);
        let id = if !is_thing {
            if let Some(&id) = stuff_ids.get(&class) {
                id
            } else {
                let id = next_id;
                next_id += 1;
                stuff_ids.insert(class, id);
                out.segments.insert(id, Segment { category_id: class, is_thing, score });
                id
            }
        } else {
            let id = next_id;
            next_id += 1;
            out.segments.insert(id, Segment { category_id: class, is_thing, score });
            id
        };
        for p in painted {
            out.segment_ids[p] = id;
        }
    }
    Ok(out)
}

/// Per-pixel `argmax_j Σ_i scores(i, j) · p_i(pixel)`.
pub fn semantic_map(probs: &MaskProbs, scores: &ScoreMatrix) -> Result<Vec<usize>> {
    if probs.n != scores.rows {
        return Err(Error::Shape(format!("{} masks vs {} score rows", probs.n, scores.rows)));
    }
    let npx = probs.height * probs.width;
    let c = scores.cols;
    let mut out = Vec::with_capacity(npx);
    let mut acc = vec![0.0f64; c];
    for p in 0..npx {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for i in 0..probs.n {
            let m = probs.mask(i)[p] as f64;
            for (a, s) in acc.iter_mut().zip(scores.row(i)) {
                *a += s * m;
            }
        }
        out.push(crate::util::argmax(&acc));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub mask: Vec<bool>,
    pub category_id: usize,
    pub score: f64,
}

pub type InstanceList = Vec<Instance>;

/// Pre-merge instances: every proposal whose top class is a thing, with its `p ≥ 0.5`
/// mask and its raw top score.
pub fn proposal_instances(probs: &MaskProbs, scores: &ScoreMatrix, vocab: &Vocabulary) -> InstanceList {
    scores
        .top1()
        .into_iter()
        .enumerate()
        .filter(|(_, (c, _))| vocab.is_thing(*c))
        .filter_map(|(i, (c, s))| {
            let mask: Vec<bool> = probs.mask(i).iter().map(|&v| v >= 0.5).collect();
            mask.iter().any(|&b| b).then_some(Instance {
                mask,
                category_id: c,
                score: s,
            })
        })
        .collect()
}

/// Thing segments of a panoptic map as instances with score 1.
pub fn panoptic_instances(map: &PanopticMap) -> InstanceList {
    map.segments
        .iter()
        .filter(|(_, s)| s.is_thing)
        .map(|(&id, s)| Instance {
            mask: map.segment_ids.iter().map(|&v| v == id).collect(),
            category_id: s.category_id,
            score: 1.0,
        })
        .collect()
}
