//! Minimum-cost bipartite assignment and the proposal/ground-truth matching cost.

use serde::{Deserialize, Serialize};

use crate::classifiers::ScoreMatrix;
use crate::error::{Error, Result};
use crate::inference::PanopticMap;

/// Row-major `rows × cols` costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} costs for a {rows}×{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.get(r, c));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(proposal, ground truth)` pairs sorted by proposal.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_proposals: Vec<usize>,
}

impl MatchResult {
    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(r, c)| cost.get(r, c)).sum()
    }
}

/// Shortest augmenting path with row/column potentials; requires `rows <= cols`.
/// Returns the column assigned to each row.
fn assign_rows(cost: &CostMatrix) -> Vec<usize> {
    let (n, m) = (cost.rows, cost.cols);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    // owner[j]: 1-based row assigned to column j, 0 if free; column 0 is a sentinel
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut out = vec![usize::MAX; n];
    for j in 1..=m {
        if owner[j] != 0 {
            out[owner[j] - 1] = j - 1;
        }
    }
    out
}

/// Minimum-cost one-to-one assignment of size `min(rows, cols)`; rows are proposals.
pub fn hungarian(cost: &CostMatrix) -> Result<MatchResult> {
    if let Some(v) = cost.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("matching cost contains {v}")));
    }
    let mut pairs = Vec::new();
    if cost.rows > 0 && cost.cols > 0 {
        if cost.rows <= cost.cols {
            for (r, c) in assign_rows(cost).into_iter().enumerate() {
                pairs.push((r, c));
            }
        } else {
            for (c, r) in assign_rows(&cost.transpose()).into_iter().enumerate() {
                pairs.push((r, c));
            }
            pairs.sort_unstable();
        }
    }
    let matched: std::collections::HashSet<usize> = pairs.iter().map(|p| p.0).collect();
    let unmatched_proposals = (0..cost.rows).filter(|r| !matched.contains(r)).collect();
    Ok(MatchResult {
        pairs,
        unmatched_proposals,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub cls: f64,
    pub bce: f64,
    pub dice: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            cls: 2.0,
            bce: 5.0,
            dice: 5.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (f, v) in [("loss.cls", self.cls), ("loss.bce", self.bce), ("loss.dice", self.dice)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(f, "must be a finite nonnegative number"));
            }
        }
        if self.cls + self.bce + self.dice == 0.0 {
            return Err(Error::config("loss", "at least one weight must be positive"));
        }
        Ok(())
    }
}

/// Ground truth resampled to the mask-logit grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Targets {
    /// Class index in the training vocabulary, per segment.
    pub labels: Vec<usize>,
    /// `K × height × width` soft masks in [0, 1].
    pub masks: Vec<f32>,
    pub height: usize,
    pub width: usize,
}

impl Targets {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn mask(&self, k: usize) -> &[f32] {
        let p = self.height * self.width;
        &self.masks[k * p..(k + 1) * p]
    }

    /// Area-averages every segment of `gt` over `stride × stride` blocks. `class_of` maps
    /// dataset category ids to training-vocabulary indices; unmapped categories are an error.
    pub fn from_panoptic(gt: &PanopticMap, stride: usize, class_of: &[Option<usize>]) -> Result<Self> {
        if stride == 0 || !gt.height.is_multiple_of(stride) || !gt.width.is_multiple_of(stride) {
            return Err(Error::Shape(format!("{}×{} is not divisible by stride {stride}", gt.height, gt.width)));
        }
        let (h, w) = (gt.height / stride, gt.width / stride);
        let ids: Vec<u32> = gt.segments.keys().copied().collect();
        let mut labels = Vec::with_capacity(ids.len());
        for id in &ids {
            let cat = gt.segments[id].category_id;
            let label = class_of
                .get(cat)
                .copied()
                .flatten()
                .ok_or_else(|| Error::InvalidArgument(format!("category {cat} is not in the training vocabulary")))?;
            labels.push(label);
        }
        let index: std::collections::HashMap<u32, usize> = ids.iter().enumerate().map(|(k, &id)| (id, k)).collect();
        let mut masks = vec![0.0f32; ids.len() * h * w];
        let inv = 1.0 / (stride * stride) as f32;
        for y in 0..gt.height {
            for x in 0..gt.width {
                let s = gt.segment_ids[y * gt.width + x];
                if let Some(&k) = index.get(&s) {
                    masks[k * h * w + (y / stride) * w + x / stride] += inv;
                }
            }
        }
        Ok(Self {
            labels,
            masks,
            height: h,
            width: w,
        })
    }
}

/// Mean binary cross-entropy between `sigmoid(logits)` and soft targets.
pub fn bce_with_logits(logits: &[f32], target: &[f32]) -> f64 {
    let n = logits.len().max(1) as f64;
    logits
        .iter()
        .zip(target)
        .map(|(&x, &y)| {
            let (x, y) = (x as f64, y as f64);
            x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
        })
        .sum::<f64>()
        / n
}

/// `1 - (2·Σ p·y + 1) / (Σ p + Σ y + 1)` with `p = sigmoid(logits)`.
pub fn dice_loss(logits: &[f32], target: &[f32]) -> f64 {
    let (mut inter, mut sp, mut sy) = (0.0, 0.0, 0.0);
    for (&x, &y) in logits.iter().zip(target) {
        let p = 1.0 / (1.0 + (-(x as f64)).exp());
        inter += p * y as f64;
        sp += p;
        sy += y as f64;
    }
    1.0 - (2.0 * inter + 1.0) / (sp + sy + 1.0)
}

/// `N × K` matching cost. `class_probs` holds training-vocabulary probabilities; when
/// it is `None` the class term is omitted.
pub fn match_cost(
    mask_logits: &[f32],
    num_proposals: usize,
    class_probs: Option<&ScoreMatrix>,
    targets: &Targets,
    weights: &LossWeights,
) -> Result<CostMatrix> {
    let p = targets.height * targets.width;
    if mask_logits.len() != num_proposals * p {
        return Err(Error::Shape(format!(
            "{} mask logits for {num_proposals} proposals of {p} pixels",
            mask_logits.len()
        )));
    }
    let k = targets.len();
    let mut data = Vec::with_capacity(num_proposals * k);
    for i in 0..num_proposals {
        let m = &mask_logits[i * p..(i + 1) * p];
        for j in 0..k {
            let t = targets.mask(j);
            let cls = class_probs.map_or(0.0, |c| 1.0 - c.get(i, targets.labels[j]));
            data.push(weights.cls * cls + weights.bce * bce_with_logits(m, t) + weights.dice * dice_loss(m, t));
        }
    }
    CostMatrix::new(num_proposals, k, data)
}
