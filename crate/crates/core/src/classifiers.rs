//! Mask pooling, the in-/out-of-vocabulary classifiers and score ensembling.

use candle_core::{DType, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Linear, ParamStore};
use crate::util::{resize_bilinear, sigmoid};
use crate::vocab::Vocabulary;

/// Fixed temperature of the out-of-vocabulary classifier.
pub const OUT_VOCAB_TEMPERATURE: f64 = 0.07;
pub const NORM_FLOOR: f64 = 1e-12;

/// Dense per-pixel features, pixel-major: `data[(y*w + x)*dim + c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    /// From a `D×h×w` tensor.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let (dim, height, width) = t.dims3()?;
        let data = t
            .to_dtype(DType::F32)?
            .reshape((dim, height * width))?
            .t()?
            .contiguous()?
            .flatten_all()?
            .to_vec1::<f32>()?;
        Ok(Self { height, width, dim, data })
    }

    pub fn pixel(&self, p: usize) -> &[f32] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }
}

/// Pooling weights for one mask: the sigmoid thresholded at 0.5 to {0, 1}; the soft
/// sigmoid if nothing survives; uniform weights if even the soft weights vanish.
pub fn pool_weights(mask_logits: &[f32]) -> Vec<f32> {
    let hard: Vec<f32> = mask_logits.iter().map(|&l| if l >= 0.0 { 1.0 } else { 0.0 }).collect();
    if hard.iter().any(|&w| w > 0.0) {
        return hard;
    }
    let soft: Vec<f32> = mask_logits.iter().map(|&l| sigmoid(l)).collect();
    if soft.iter().map(|&w| w as f64).sum::<f64>() >= 1e-12 {
        return soft;
    }
    vec![1.0; mask_logits.len()]
}

/// Weighted average of `features` under one mask given as `mh×mw` logits, which are
/// bilinearly resized to the feature resolution first.
pub fn mask_pool(features: &FeatureMap, mask_logits: &[f32], mh: usize, mw: usize) -> Vec<f64> {
    let resized = resize_bilinear(mask_logits, mh, mw, features.height, features.width);
    let w = pool_weights(&resized);
    let total: f64 = w.iter().map(|&v| v as f64).sum();
    let mut out = vec![0.0f64; features.dim];
    for (p, &wp) in w.iter().enumerate() {
        if wp == 0.0 {
            continue;
        }
        for (o, &f) in out.iter_mut().zip(features.pixel(p)) {
            *o += wp as f64 * f as f64;
        }
    }
    out.iter_mut().for_each(|o| *o /= total);
    out
}

pub fn cosine(a: &[f64], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * *y as f64).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(NORM_FLOOR);
    let nb = b.iter().map(|y| (*y as f64).powi(2)).sum::<f64>().sqrt().max(NORM_FLOOR);
    dot / (na * nb)
}

/// `N × |C|` class scores, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub rows: usize,
    pub cols: usize,
    pub probs: Vec<f64>,
}

impl ScoreMatrix {
    pub fn new(rows: usize, cols: usize, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != rows * cols {
            return Err(Error::Shape(format!("{} scores for a {rows}×{cols} matrix", probs.len())));
        }
        Ok(Self { rows, cols, probs })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.probs[i * self.cols + j]
    }

    /// `(argmax class, max value)` per row; ties go to the lower class index.
    pub fn top1(&self) -> Vec<(usize, f64)> {
        (0..self.rows)
            .map(|i| {
                let j = crate::util::argmax(self.row(i));
                (j, self.get(i, j))
            })
            .collect()
    }

    /// Keeps only columns `cols` (in order).
    pub fn select_columns(&self, cols: &[usize]) -> Self {
        let mut probs = Vec::with_capacity(self.rows * cols.len());
        for i in 0..self.rows {
            probs.extend(cols.iter().map(|&j| self.get(i, j)));
        }
        Self {
            rows: self.rows,
            cols: cols.len(),
            probs,
        }
    }
}

fn softmax_row(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Row `i` is `softmax_j(cos(v_i, t_j) / T)`.
pub fn in_vocab_probs(pooled: &[Vec<f64>], vocab: &Vocabulary, temperature: f64) -> Result<ScoreMatrix> {
    if vocab.is_empty() {
        return Err(Error::InvalidArgument("empty vocabulary".into()));
    }
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::InvalidArgument(format!("temperature must be positive, got {temperature}")));
    }
    let mut probs = Vec::with_capacity(pooled.len() * vocab.len());
    for v in pooled {
        if v.len() != vocab.dim {
            return Err(Error::Shape(format!("pooled dim {} vs text dim {}", v.len(), vocab.dim)));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("pooled feature".into()));
        }
        let logits: Vec<f64> = (0..vocab.len()).map(|j| cosine(v, vocab.embedding(j)) / temperature).collect();
        probs.extend(softmax_row(&logits));
    }
    ScoreMatrix::new(pooled.len(), vocab.len(), probs)
}

/// Pools the joint-space backbone map under each proposal (`mh×mw` logits) and scores
/// the pooled vectors against the vocabulary with a fixed temperature.
pub fn out_vocab_probs(
    clip_dense: &FeatureMap,
    mask_logits: &[Vec<f32>],
    mh: usize,
    mw: usize,
    vocab: &Vocabulary,
    temperature: f64,
) -> Result<ScoreMatrix> {
    if clip_dense.dim != vocab.dim {
        return Err(Error::Shape(format!(
            "joint-space map has {} channels, vocabulary embeddings have {}",
            clip_dense.dim, vocab.dim
        )));
    }
    let pooled: Vec<Vec<f64>> = mask_logits.iter().map(|m| mask_pool(clip_dense, m, mh, mw)).collect();
    in_vocab_probs(&pooled, vocab, temperature)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleMethod {
    Geometric,
    Arithmetic,
}

impl std::str::FromStr for EnsembleMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "geometric" => Ok(Self::Geometric),
            "arithmetic" => Ok(Self::Arithmetic),
            _ => Err(Error::InvalidArgument(format!("unknown ensemble method {s:?}"))),
        }
    }
}

impl std::fmt::Display for EnsembleMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Geometric => "geometric",
            Self::Arithmetic => "arithmetic",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnsembleParams {
    alpha: f64,
    beta: f64,
    method: EnsembleMethod,
}

impl EnsembleParams {
    pub fn new(alpha: f64, beta: f64, method: EnsembleMethod) -> Result<Self> {
        for (name, v) in [("alpha", alpha), ("beta", beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidArgument(format!("{name} = {v} outside [0, 1]")));
            }
        }
        Ok(Self { alpha, beta, method })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn method(&self) -> EnsembleMethod {
        self.method
    }
}

impl Default for EnsembleParams {
    fn default() -> Self {
        Self {
            alpha: 0.4,
            beta: 0.8,
            method: EnsembleMethod::Geometric,
        }
    }
}

/// Per-entry fusion; `alpha` weighs the out-of-vocabulary score for seen classes and
/// `beta` for unseen ones. Results are not renormalized.
pub fn ensemble(
    in_probs: &ScoreMatrix,
    out_probs: &ScoreMatrix,
    seen_mask: &[bool],
    params: &EnsembleParams,
) -> Result<ScoreMatrix> {
    if in_probs.rows != out_probs.rows || in_probs.cols != out_probs.cols {
        return Err(Error::Shape(format!(
            "in-vocab scores {}×{} vs out-of-vocab scores {}×{}",
            in_probs.rows, in_probs.cols, out_probs.rows, out_probs.cols
        )));
    }
    if seen_mask.len() != in_probs.cols {
        return Err(Error::Shape(format!("seen mask length {} vs {} classes", seen_mask.len(), in_probs.cols)));
    }
    let fuse = |a: f64, x: f64, y: f64| -> f64 {
        if a == 0.0 {
            x
        } else if a == 1.0 {
            y
        } else {
            match params.method {
                EnsembleMethod::Geometric => x.powf(1.0 - a) * y.powf(a),
                EnsembleMethod::Arithmetic => (1.0 - a) * x + a * y,
            }
        }
    };
    let probs = in_probs
        .probs
        .iter()
        .zip(&out_probs.probs)
        .enumerate()
        .map(|(idx, (&x, &y))| {
            let a = if seen_mask[idx % in_probs.cols] { params.alpha } else { params.beta };
            fuse(a, x, y)
        })
        .collect();
    ScoreMatrix::new(in_probs.rows, in_probs.cols, probs)
}

/// Learnable temperature, stored as its logarithm so it stays positive.
#[derive(Debug, Clone)]
pub struct Temperature {
    pub log_t: Tensor,
}

impl Temperature {
    pub fn new(ps: &ParamStore, name: &str, init: f64) -> Result<Self> {
        if init <= 0.0 {
            return Err(Error::InvalidArgument(format!("temperature must be positive, got {init}")));
        }
        Ok(Self {
            log_t: ps.insert(name, &[1], vec![init.ln()])?,
        })
    }

    pub fn value(&self) -> Result<f64> {
        Ok(self.log_t.to_dtype(DType::F64)?.to_vec1::<f64>()?[0].exp())
    }
}

/// The trainable half of the in-vocabulary classifier: a projection of pooled pixel
/// features into the text space and the temperature.
#[derive(Debug, Clone)]
pub struct ClassHead {
    pub proj: Linear,
    pub temperature: Temperature,
}

impl ClassHead {
    pub fn new(ps: &ParamStore, prefix: &str, pixel_dim: usize, text_dim: usize, init_temperature: f64) -> Result<Self> {
        Ok(Self {
            proj: Linear::new(ps, &format!("{prefix}proj"), pixel_dim, text_dim)?,
            temperature: Temperature::new(ps, &format!("{prefix}log_temperature"), init_temperature)?,
        })
    }

    /// `(B, N, D_text)` class embeddings: `F_pix` pooled under each mask, then projected.
    pub fn embed(&self, pixel: &Tensor, mask_logits: &Tensor) -> Result<Tensor> {
        let (b, d, h, w) = pixel.dims4()?;
        let n = mask_logits.dim(1)?;
        let weights = pool_weight_tensor(mask_logits)?;
        let flat = pixel.reshape((b, d, h * w))?.transpose(1, 2)?;
        let pooled = weights.matmul(&flat.contiguous()?)?;
        debug_assert_eq!(pooled.dims(), &[b, n, d]);
        self.proj.forward(&pooled)
    }

    /// `(B, N, C)` logits `cos(v, t_j) / T` against `text` `(C, D_text)`.
    pub fn logits(&self, embeddings: &Tensor, text: &Tensor) -> Result<Tensor> {
        let norm = embeddings.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.maximum(NORM_FLOOR)?;
        let unit = embeddings.broadcast_div(&norm)?;
        let cos = unit.broadcast_matmul(&text.t()?)?;
        let inv_t = self.temperature.log_t.neg()?.exp()?;
        Ok(cos.broadcast_mul(&inv_t)?)
    }
}

/// Row-normalized pooling weights `(B, N, h*w)` built from detached logits.
pub fn pool_weight_tensor(mask_logits: &Tensor) -> Result<Tensor> {
    let (b, n, h, w) = mask_logits.dims4()?;
    let hw = h * w;
    let data = mask_logits.detach().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let mut out = Vec::with_capacity(b * n * hw);
    for q in 0..b * n {
        let wts = pool_weights(&data[q * hw..(q + 1) * hw]);
        let total: f64 = wts.iter().map(|&v| v as f64).sum();
        out.extend(wts.iter().map(|&v| v as f64 / total));
    }
    Ok(Tensor::from_vec(out, (b, n, hw), mask_logits.device())?.to_dtype(mask_logits.dtype())?)
}
