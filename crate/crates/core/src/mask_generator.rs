//! Class-agnostic mask proposals: a pixel decoder over the backbone pyramid followed by a
//! masked-attention transformer decoder over learned object queries.
//!
//! The pixel decoder runs dense multi-scale self-attention over the concatenated
//! stride-8/16/32 tokens (with a learned per-level embedding), then fuses the refined
//! stride-8 map top-down with the stride-4 backbone level to give the per-pixel
//! embedding map `F_pix`. Each mask-decoder layer performs masked cross-attention to one
//! scale (cycling 32 → 16 → 8), query self-attention and a feed-forward block. Mask
//! logits are the dot product between an MLP of each query state and `F_pix`.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{sine_position_encoding, Conv2d, FeedForward, LayerNorm, Linear, Mlp, MultiHeadAttention, ParamStore};
use crate::util::resize_bilinear;

/// Logit added to masked-out attention positions.
const MASKED: f64 = -1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MaskGeneratorConfig {
    pub num_queries: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub pixel_decoder_layers: usize,
    pub mask_decoder_layers: usize,
    /// Sigmoid probability at or above which a pixel stays visible to cross-attention.
    pub attn_mask_threshold: f64,
}

impl Default for MaskGeneratorConfig {
    fn default() -> Self {
        Self {
            num_queries: 20,
            hidden_dim: 64,
            heads: 4,
            ffn_dim: 128,
            pixel_decoder_layers: 2,
            mask_decoder_layers: 3,
            attn_mask_threshold: 0.5,
        }
    }
}

impl MaskGeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str, m: &str| Err(Error::config(format!("model.generator.{f}"), m));
        if self.num_queries == 0 {
            return bad("num_queries", "must be positive");
        }
        if self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(self.heads.max(1)) || !self.hidden_dim.is_multiple_of(4) {
            return bad("hidden_dim", "must be a positive multiple of 4 and of `heads`");
        }
        if self.heads == 0 {
            return bad("heads", "must be positive");
        }
        if self.mask_decoder_layers == 0 {
            return bad("mask_decoder_layers", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.attn_mask_threshold) {
            return bad("attn_mask_threshold", "must lie in [0, 1]");
        }
        Ok(())
    }
}

/// One refined scale as a token sequence.
#[derive(Debug, Clone)]
pub struct ScaleTokens {
    /// `(B, h*w, D_q)`
    pub tokens: Tensor,
    /// `(h*w, D_q)`
    pub pos: Tensor,
    pub height: usize,
    pub width: usize,
}

impl ScaleTokens {
    /// `(B, D_q, h, w)` view of the tokens.
    pub fn map(&self) -> Result<Tensor> {
        let (b, _, d) = self.tokens.dims3()?;
        Ok(self.tokens.transpose(1, 2)?.reshape((b, d, self.height, self.width))?)
    }
}

#[derive(Debug, Clone)]
pub struct PixelFeatures {
    /// Refined scales, ordered stride 32, 16, 8.
    pub scales: Vec<ScaleTokens>,
    /// `F_pix`: `(B, D_q, H/4, W/4)`.
    pub pixel: Tensor,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn: MultiHeadAttention,
    norm: LayerNorm,
    ffn: FeedForward,
}

impl EncoderLayer {
    fn forward(&self, x: &Tensor, pos: &Tensor) -> Result<Tensor> {
        let q = x.broadcast_add(pos)?;
        let (a, _) = self.attn.forward(&q, &q, x, None)?;
        let x = self.norm.forward(&(x + a)?)?;
        self.ffn.forward(&x)
    }
}

#[derive(Debug, Clone)]
pub struct PixelDecoder {
    /// Input projections for strides 32, 16, 8.
    input_proj: Vec<Linear>,
    level_embed: Tensor,
    layers: Vec<EncoderLayer>,
    lateral: Conv2d,
    output_conv: Conv2d,
    mask_features: Conv2d,
    dim: usize,
}

impl PixelDecoder {
    /// `level_channels` are the backbone channels at strides 4, 8, 16, 32.
    pub fn new(ps: &ParamStore, prefix: &str, level_channels: [usize; 4], cfg: &MaskGeneratorConfig) -> Result<Self> {
        let d = cfg.hidden_dim;
        let input_proj = [3usize, 2, 1]
            .iter()
            .map(|&l| Linear::new(ps, &format!("{prefix}input_proj.{l}"), level_channels[l], d))
            .collect::<Result<_>>()?;
        let layers = (0..cfg.pixel_decoder_layers)
            .map(|i| {
                let n = format!("{prefix}encoder.{i}");
                Ok(EncoderLayer {
                    attn: MultiHeadAttention::new(ps, &format!("{n}.attn"), d, cfg.heads)?,
                    norm: LayerNorm::new(ps, &format!("{n}.norm"), d)?,
                    ffn: FeedForward::new(ps, &format!("{n}.ffn"), d, cfg.ffn_dim)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            input_proj,
            level_embed: ps.uniform(&format!("{prefix}level_embed"), &[3, d], 0.1)?,
            layers,
            lateral: Conv2d::new(ps, &format!("{prefix}lateral"), level_channels[0], d, 1, 1, 0)?,
            output_conv: Conv2d::new(ps, &format!("{prefix}output_conv"), d, d, 3, 1, 1)?,
            mask_features: Conv2d::new(ps, &format!("{prefix}mask_features"), d, d, 1, 1, 0)?,
            dim: d,
        })
    }

    /// `levels` are the backbone maps at strides 4, 8, 16, 32.
    pub fn forward(&self, levels: &[Tensor]) -> Result<PixelFeatures> {
        if levels.len() != 4 {
            return Err(Error::Shape(format!("expected 4 pyramid levels, got {}", levels.len())));
        }
        let dev = levels[0].device().clone();
        let dtype = levels[0].dtype();
        let d = self.dim;
        let mut tokens = Vec::with_capacity(3);
        let mut pos = Vec::with_capacity(3);
        let mut sizes = Vec::with_capacity(3);
        for (i, &l) in [3usize, 2, 1].iter().enumerate() {
            let (b, c, h, w) = levels[l].dims4()?;
            let flat = levels[l].reshape((b, c, h * w))?.transpose(1, 2)?;
            let t = self.input_proj[i].forward(&flat)?.broadcast_add(&self.level_embed.get(i)?)?;
            tokens.push(t);
            pos.push(Tensor::from_vec(sine_position_encoding(h, w, d), (h * w, d), &dev)?.to_dtype(dtype)?);
            sizes.push((h, w));
        }
        let mut x = Tensor::cat(&tokens, 1)?;
        let all_pos = Tensor::cat(&pos, 0)?;
        for layer in &self.layers {
            x = layer.forward(&x, &all_pos)?;
        }
        let mut scales = Vec::with_capacity(3);
        let mut offset = 0;
        for (i, &(h, w)) in sizes.iter().enumerate() {
            scales.push(ScaleTokens {
                tokens: x.narrow(1, offset, h * w)?,
                pos: pos[i].clone(),
                height: h,
                width: w,
            });
            offset += h * w;
        }
        let (_, _, h4, w4) = levels[0].dims4()?;
        let up = scales[2].map()?.upsample_nearest2d(h4, w4)?;
        let fused = (self.lateral.forward(&levels[0])? + up)?;
        let pixel = self.mask_features.forward(&self.output_conv.forward(&fused)?.relu()?)?;
        Ok(PixelFeatures { scales, pixel })
    }
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    cross: MultiHeadAttention,
    cross_norm: LayerNorm,
    self_attn: MultiHeadAttention,
    self_norm: LayerNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub struct ProposalSet {
    /// Final-layer mask logits `(B, N, H/4, W/4)`.
    pub mask_logits: Tensor,
    /// Final query states `(B, N, D_q)`.
    pub query_states: Tensor,
    /// Predictions from the initial queries and after every decoder layer; the last
    /// entry is `mask_logits`.
    pub layer_logits: Vec<Tensor>,
    /// Cross-attention weights `(B, heads, N, L)` per decoder layer.
    pub cross_attention: Vec<Tensor>,
}

impl ProposalSet {
    pub fn num_proposals(&self) -> Result<usize> {
        Ok(self.mask_logits.dim(1)?)
    }
}

#[derive(Debug, Clone)]
pub struct MaskDecoder {
    query_feat: Tensor,
    query_pos: Tensor,
    layers: Vec<DecoderLayer>,
    norm: LayerNorm,
    mask_embed: Mlp,
    threshold: f64,
}

/// Additive cross-attention bias from previous mask logits `(B, N, h, w)`: pixels whose
/// probability is below `threshold` after resizing to `target` are masked, unless that
/// would hide every pixel from a query. Returns the `(B, 1, N, L)` bias and the number
/// of queries that fell back to full attention.
pub fn attention_bias(logits: &Tensor, target: (usize, usize), threshold: f64) -> Result<(Tensor, usize)> {
    let (b, n, h, w) = logits.dims4()?;
    let (th, tw) = target;
    let l = th * tw;
    let data = logits.detach().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let logit_threshold = if threshold <= 0.0 {
        f32::NEG_INFINITY
    } else if threshold >= 1.0 {
        f32::INFINITY
    } else {
        (threshold / (1.0 - threshold)).ln() as f32
    };
    let mut bias = vec![0.0f64; b * n * l];
    let mut fallbacks = 0;
    for q in 0..b * n {
        let resized = resize_bilinear(&data[q * h * w..(q + 1) * h * w], h, w, th, tw);
        let keep: Vec<bool> = resized.iter().map(|&v| v >= logit_threshold).collect();
        if keep.iter().any(|&k| k) {
            for (dst, k) in bias[q * l..(q + 1) * l].iter_mut().zip(&keep) {
                if !k {
                    *dst = MASKED;
                }
            }
        } else {
            fallbacks += 1;
        }
    }
    let t = Tensor::from_vec(bias, (b, 1, n, l), logits.device())?.to_dtype(logits.dtype())?;
    Ok((t, fallbacks))
}

/// `logits[b, i, p] = <embeddings[b, i], pixel[b, :, p]>`.
pub fn mask_logits_from_embeddings(embeddings: &Tensor, pixel: &Tensor) -> Result<Tensor> {
    let (b, d, h, w) = pixel.dims4()?;
    let n = embeddings.dim(1)?;
    let flat = pixel.reshape((b, d, h * w))?;
    Ok(embeddings.matmul(&flat)?.reshape((b, n, h, w))?)
}

impl MaskDecoder {
    pub fn new(ps: &ParamStore, prefix: &str, cfg: &MaskGeneratorConfig) -> Result<Self> {
        let d = cfg.hidden_dim;
        let layers = (0..cfg.mask_decoder_layers)
            .map(|i| {
                let n = format!("{prefix}layers.{i}");
                Ok(DecoderLayer {
                    cross: MultiHeadAttention::new(ps, &format!("{n}.cross"), d, cfg.heads)?,
                    cross_norm: LayerNorm::new(ps, &format!("{n}.cross_norm"), d)?,
                    self_attn: MultiHeadAttention::new(ps, &format!("{n}.self"), d, cfg.heads)?,
                    self_norm: LayerNorm::new(ps, &format!("{n}.self_norm"), d)?,
                    ffn: FeedForward::new(ps, &format!("{n}.ffn"), d, cfg.ffn_dim)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            query_feat: ps.uniform(&format!("{prefix}query_feat"), &[cfg.num_queries, d], 1.0)?,
            query_pos: ps.uniform(&format!("{prefix}query_pos"), &[cfg.num_queries, d], 1.0)?,
            layers,
            norm: LayerNorm::new(ps, &format!("{prefix}norm"), d)?,
            mask_embed: Mlp::new(ps, &format!("{prefix}mask_embed"), &[d, d, d, d])?,
            threshold: cfg.attn_mask_threshold,
        })
    }

    pub fn num_queries(&self) -> Result<usize> {
        Ok(self.query_feat.dim(0)?)
    }

    fn predict(&self, queries: &Tensor, pixel: &Tensor) -> Result<Tensor> {
        let e = self.mask_embed.forward(&self.norm.forward(queries)?)?;
        mask_logits_from_embeddings(&e, pixel)
    }

    pub fn forward(&self, features: &PixelFeatures) -> Result<ProposalSet> {
        let b = features.pixel.dim(0)?;
        let (n, d) = self.query_feat.dims2()?;
        let qpos = self.query_pos.unsqueeze(0)?.broadcast_as((b, n, d))?;
        let mut x = self.query_feat.unsqueeze(0)?.broadcast_as((b, n, d))?.contiguous()?;
        let mut pred = self.predict(&x, &features.pixel)?;
        let mut layer_logits = vec![pred.clone()];
        let mut cross_attention = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let scale = &features.scales[i % features.scales.len()];
            let (bias, _) = attention_bias(&pred, (scale.height, scale.width), self.threshold)?;
            let key = scale.tokens.broadcast_add(&scale.pos)?;
            let (a, weights) = layer.cross.forward(&(&x + &qpos)?, &key, &scale.tokens, Some(&bias))?;
            x = layer.cross_norm.forward(&(&x + a)?)?;
            let q = (&x + &qpos)?;
            let (a, _) = layer.self_attn.forward(&q, &q, &x, None)?;
            x = layer.self_norm.forward(&(&x + a)?)?;
            x = layer.ffn.forward(&x)?;
            pred = self.predict(&x, &features.pixel)?;
            layer_logits.push(pred.clone());
            cross_attention.push(weights);
        }
        Ok(ProposalSet {
            mask_logits: pred,
            query_states: x,
            layer_logits,
            cross_attention,
        })
    }
}
