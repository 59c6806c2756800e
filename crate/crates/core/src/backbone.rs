//! Frozen convolutional feature extractor.
//!
//! [`ToyBackbone`] is a four-stage strided CNN at strides 4/8/16/32. Part of every stage is
//! a bank of palette color detectors that is averaged down the stack, and the joint-space
//! map `clip_dense` is a 1×1 projection of the stride-32 features that sends detector `k`
//! onto the toy text encoder's prototype of color `k`. A region of pure palette color therefore
//! mask-pools to the text embedding of its color word. The remaining "generic" channels
//! are ordinary randomly initialized RGB convolutions.
//!
//! A pretrained model can be plugged in by implementing [`Backbone`]; any mean/std input
//! normalization belongs inside that implementation.

use candle_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::PALETTE;
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};

pub const STRIDES: [usize; 4] = [4, 8, 16, 32];

#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    /// `B×C_s×H/s×W/s` for s in [`STRIDES`].
    pub levels: Vec<Tensor>,
    /// `B×D×H/32×W/32`, in the text-embedding space.
    pub clip_dense: Tensor,
}

impl FeaturePyramid {
    pub fn detach(&self) -> Self {
        Self {
            levels: self.levels.iter().map(|t| t.detach()).collect(),
            clip_dense: self.clip_dense.detach(),
        }
    }

    /// Selects batch items `idx` (in order).
    pub fn select(&self, idx: &[usize]) -> Result<Self> {
        let dev = self.clip_dense.device();
        let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), dev)?;
        Ok(Self {
            levels: self
                .levels
                .iter()
                .map(|t| t.index_select(&ids, 0))
                .collect::<candle_core::Result<_>>()?,
            clip_dense: self.clip_dense.index_select(&ids, 0)?,
        })
    }

    pub fn cat(parts: &[FeaturePyramid]) -> Result<Self> {
        let levels = (0..STRIDES.len())
            .map(|l| Tensor::cat(&parts.iter().map(|p| &p.levels[l]).collect::<Vec<_>>(), 0))
            .collect::<candle_core::Result<_>>()?;
        let clip_dense = Tensor::cat(&parts.iter().map(|p| &p.clip_dense).collect::<Vec<_>>(), 0)?;
        Ok(Self { levels, clip_dense })
    }
}

pub trait Backbone {
    /// `images` is `B×3×H×W` with values in [0, 1].
    fn forward(&self, images: &Tensor) -> Result<FeaturePyramid>;
    fn is_frozen(&self) -> bool;
    /// A frozen backbone detaches its outputs so no gradient reaches its parameters;
    /// the trainer also leaves its parameters out of the optimizer.
    fn set_frozen(&mut self, frozen: bool);
    fn level_channels(&self) -> [usize; 4];
    fn embed_dim(&self) -> usize;
    /// Parameter-name prefix inside the model's [`ParamStore`].
    fn param_prefix(&self) -> &str;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyBackboneConfig {
    /// Randomly initialized channels per stage, on top of the palette detectors.
    pub generic_widths: [usize; 4],
    /// Standard deviation scale of the generic channels' initial weights.
    pub init_scale: f64,
}

impl Default for ToyBackboneConfig {
    fn default() -> Self {
        Self {
            generic_widths: [16, 24, 32, 32],
            init_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyBackbone {
    det_in: Conv2d,
    det_out: Conv2d,
    stages: Vec<Conv2d>,
    proj: Conv2d,
    channels: [usize; 4],
    embed_dim: usize,
    frozen: bool,
    prefix: String,
}

/// Detector radius in L1 RGB distance; equals the palette's minimum separation.
const DETECTOR_RADIUS: f64 = 0.5;

impl ToyBackbone {
    /// Builds the constructed initialization. `seed` drives the generic channels only;
    /// the detector and projection weights are fixed by the palette.
    pub fn new(
        ps: &ParamStore,
        prefix: &str,
        config: &ToyBackboneConfig,
        embed_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        let p = PALETTE.len();
        if embed_dim < crate::color::PROTOTYPE_DIM {
            return Err(Error::InvalidArgument(format!(
                "embedding dim {embed_dim} smaller than prototype size {}",
                crate::color::PROTOTYPE_DIM
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let name = |s: &str| format!("{prefix}{s}");

        // unit (k, c, sign): relu(sign * (x_c - a_kc))
        let mut w_in = vec![0.0; 6 * p * 3];
        let mut b_in = vec![0.0; 6 * p];
        for (k, color) in PALETTE.iter().enumerate() {
            for c in 0..3 {
                for (s, sign) in [1.0, -1.0].into_iter().enumerate() {
                    let o = k * 6 + c * 2 + s;
                    w_in[o * 3 + c] = sign;
                    b_in[o] = -sign * color.rgb[c] as f64;
                }
            }
        }
        // detector k: relu(1 - |x - a_k|_1 / r)
        let mut w_out = vec![0.0; p * 6 * p];
        let b_out = vec![1.0; p];
        for k in 0..p {
            for u in 0..6 {
                w_out[k * 6 * p + k * 6 + u] = -1.0 / DETECTOR_RADIUS;
            }
        }
        let det_in = Conv2d {
            weight: ps.insert(&name("det_in.weight"), &[6 * p, 3, 1, 1], w_in)?,
            bias: ps.insert(&name("det_in.bias"), &[6 * p], b_in)?,
            stride: 1,
            padding: 0,
        };
        let det_out = Conv2d {
            weight: ps.insert(&name("det_out.weight"), &[p, 6 * p, 1, 1], w_out)?,
            bias: ps.insert(&name("det_out.bias"), &[p], b_out)?,
            stride: 1,
            padding: 0,
        };

        let g = config.generic_widths;
        let channels = [p + g[0], p + g[1], p + g[2], p + g[3]];
        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            // stage 1 sees [rgb, detectors] with a 4×4/4 kernel; later stages 3×3/2 pad 1
            let (cin, kernel, stride, padding, taps): (usize, usize, usize, usize, Vec<(usize, usize)>) = if s == 0 {
                let taps = (0..4).flat_map(|y| (0..4).map(move |x| (y, x))).collect();
                (3 + p, 4, 4, 0, taps)
            } else {
                (channels[s - 1], 3, 2, 1, vec![(1, 1), (1, 2), (2, 1), (2, 2)])
            };
            let cout = channels[s];
            let kk = kernel * kernel;
            let mut w = vec![0.0; cout * cin * kk];
            let mut b = vec![0.0; cout];
            // detector channels are carried by block averaging
            for k in 0..p {
                let src = if s == 0 { 3 + k } else { k };
                for &(ty, tx) in &taps {
                    w[(k * cin + src) * kk + ty * kernel + tx] = 1.0 / taps.len() as f64;
                }
            }
            // generic channels read only generic inputs (rgb for stage 1)
            let generic_inputs: Vec<usize> = if s == 0 { (0..3).collect() } else { (p..cin).collect() };
            let bound = config.init_scale * (6.0 / (generic_inputs.len() * kk) as f64).sqrt();
            for o in p..cout {
                for &i in &generic_inputs {
                    for t in 0..kk {
                        w[(o * cin + i) * kk + t] = rng.random_range(-bound..=bound);
                    }
                }
                b[o] = rng.random_range(-0.1..=0.1);
            }
            stages.push(Conv2d {
                weight: ps.insert(&name(&format!("stage{s}.weight")), &[cout, cin, kernel, kernel], w)?,
                bias: ps.insert(&name(&format!("stage{s}.bias")), &[cout], b)?,
                stride,
                padding,
            });
        }

        // detector k -> prototype of color k
        let mut w_proj = vec![0.0; embed_dim * channels[3]];
        for k in 0..p {
            for (j, v) in crate::color::prototype(k).into_iter().enumerate() {
                w_proj[j * channels[3] + k] = v as f64;
            }
        }
        let proj = Conv2d {
            weight: ps.insert(&name("proj.weight"), &[embed_dim, channels[3], 1, 1], w_proj)?,
            bias: ps.constant(&name("proj.bias"), &[embed_dim], 0.0)?,
            stride: 1,
            padding: 0,
        };

        Ok(Self {
            det_in,
            det_out,
            stages,
            proj,
            channels,
            embed_dim,
            frozen: true,
            prefix: prefix.to_string(),
        })
    }
}

impl Backbone for ToyBackbone {
    fn forward(&self, images: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::Shape(format!("expected 3 input channels, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
            return Err(Error::Shape(format!("input size {h}×{w} is not a positive multiple of 32")));
        }
        let det = self.det_out.forward(&self.det_in.forward(images)?.relu()?)?.relu()?;
        let mut x = Tensor::cat(&[images, &det], 1)?;
        let mut levels = Vec::with_capacity(4);
        for stage in &self.stages {
            x = stage.forward(&x)?.relu()?;
            levels.push(x.clone());
        }
        let clip_dense = self.proj.forward(&x)?;
        let pyramid = FeaturePyramid { levels, clip_dense };
        Ok(if self.frozen { pyramid.detach() } else { pyramid })
    }

    fn is_frozen(&self) -> bool {
        self.frozen
    }

    fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    fn level_channels(&self) -> [usize; 4] {
        self.channels
    }

    fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn param_prefix(&self) -> &str {
        &self.prefix
    }
}

/// Per-pixel channel vectors of batch item `item` at `level`: `(h, w, rows of C)`.
pub fn level_vectors(pyramid: &FeaturePyramid, level: usize, item: usize) -> Result<(usize, usize, Vec<Vec<f32>>)> {
    let t = pyramid
        .levels
        .get(level)
        .ok_or_else(|| Error::InvalidArgument(format!("pyramid has no level {level}")))?;
    feature_rows(&t.get(item)?)
}

/// `C×h×w` tensor to `(h, w, h*w rows of C)`.
pub fn feature_rows(t: &Tensor) -> Result<(usize, usize, Vec<Vec<f32>>)> {
    let (c, h, w) = t.dims3()?;
    let flat = t
        .to_dtype(candle_core::DType::F32)?
        .reshape((c, h * w))?
        .t()?
        .contiguous()?
        .to_vec2::<f32>()?;
    Ok((h, w, flat))
}
