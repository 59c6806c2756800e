//! The full segmenter: backbone, mask generator and the two classifiers, plus the
//! frozen/trainable arrangements compared in ablations.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use candle_core::{DType, Device, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FeaturePyramid, ToyBackbone, ToyBackboneConfig};
use crate::classifiers::{
    ensemble, in_vocab_probs, mask_pool, ClassHead, EnsembleParams, FeatureMap, ScoreMatrix, OUT_VOCAB_TEMPERATURE,
};
use crate::error::{Error, Result};
use crate::mask_generator::{MaskDecoder, MaskGeneratorConfig, PixelDecoder, ProposalSet};
use crate::nn::ParamStore;
use crate::vocab::Vocabulary;

pub const BACKBONE_PREFIX: &str = "backbone.";
/// Untouched copy of the initial backbone, kept when the main one is trained but the
/// out-of-vocabulary classifier must stay frozen.
pub const FROZEN_COPY_PREFIX: &str = "oov_backbone.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Frozen,
    Trainable,
}

impl Mode {
    fn name(self) -> &'static str {
        match self {
            Mode::Frozen => "frozen",
            Mode::Trainable => "trainable",
        }
    }
}

/// Which backbone each component reads: mask generator / in-vocabulary classifier /
/// out-of-vocabulary classifier. `None` disables a classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArmPreset {
    pub mask_generator: Mode,
    pub in_vocab: Option<Mode>,
    pub out_vocab: Option<Mode>,
}

impl ArmPreset {
    pub const FROZEN: ArmPreset = ArmPreset {
        mask_generator: Mode::Frozen,
        in_vocab: Some(Mode::Frozen),
        out_vocab: Some(Mode::Frozen),
    };
    pub const TRAINABLE: ArmPreset = ArmPreset {
        mask_generator: Mode::Trainable,
        in_vocab: Some(Mode::Trainable),
        out_vocab: Some(Mode::Trainable),
    };

    /// The mask generator and the in-vocabulary classifier share one backbone, and a
    /// trained out-of-vocabulary backbone only exists when the shared one is trained.
    pub fn validate(&self) -> Result<()> {
        if let Some(m) = self.in_vocab {
            if m != self.mask_generator {
                return Err(Error::config(
                    "model.preset",
                    format!("{self} is infeasible: the in-vocabulary classifier shares the mask generator's backbone"),
                ));
            }
        }
        if self.out_vocab == Some(Mode::Trainable) && self.mask_generator == Mode::Frozen {
            return Err(Error::config("model.preset", format!("{self}: no trainable backbone to read from")));
        }
        if self.in_vocab.is_none() && self.out_vocab.is_none() {
            return Err(Error::config("model.preset", "at least one classifier is required"));
        }
        Ok(())
    }

    pub fn backbone_frozen(&self) -> bool {
        self.mask_generator == Mode::Frozen
    }

    fn needs_frozen_copy(&self) -> bool {
        self.mask_generator == Mode::Trainable && self.out_vocab == Some(Mode::Frozen)
    }
}

impl fmt::Display for ArmPreset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |m: Option<Mode>| m.map_or("-", Mode::name);
        write!(f, "{}/{}/{}", self.mask_generator.name(), opt(self.in_vocab), opt(self.out_vocab))
    }
}

impl FromStr for ArmPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('/').map(str::trim).collect();
        let parse = |p: &str| -> Result<Option<Mode>> {
            match p {
                "frozen" => Ok(Some(Mode::Frozen)),
                "trainable" => Ok(Some(Mode::Trainable)),
                "-" => Ok(None),
                _ => Err(Error::config("model.preset", format!("unknown mode {p:?}"))),
            }
        };
        if parts.len() != 3 {
            return Err(Error::config("model.preset", format!("expected three `/`-separated modes, got {s:?}")));
        }
        let mask_generator =
            parse(parts[0])?.ok_or_else(|| Error::config("model.preset", "the mask generator cannot be disabled"))?;
        let preset = ArmPreset {
            mask_generator,
            in_vocab: parse(parts[1])?,
            out_vocab: parse(parts[2])?,
        };
        preset.validate()?;
        Ok(preset)
    }
}

impl Serialize for ArmPreset {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for ArmPreset {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub preset: ArmPreset,
    pub text_dim: usize,
    pub init_temperature: f64,
    pub seed: u64,
    pub backbone: ToyBackboneConfig,
    pub generator: MaskGeneratorConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            preset: ArmPreset::FROZEN,
            text_dim: 24,
            init_temperature: 0.07,
            seed: 0,
            backbone: ToyBackboneConfig::default(),
            generator: MaskGeneratorConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.preset.validate()?;
        self.generator.validate()?;
        if self.text_dim < crate::color::PROTOTYPE_DIM {
            return Err(Error::config(
                "model.text_dim",
                format!("must be at least {}", crate::color::PROTOTYPE_DIM),
            ));
        }
        if !(self.init_temperature > 0.0 && self.init_temperature.is_finite()) {
            return Err(Error::config("model.init_temperature", "must be positive"));
        }
        Ok(())
    }
}

/// Everything the network produces for a batch during training.
pub struct ForwardOutput {
    pub proposals: ProposalSet,
    pub pixel: Tensor,
    /// `(B, N, C)` in-vocabulary logits per decoder prediction, aligned with
    /// `proposals.layer_logits`; empty without an in-vocabulary classifier.
    pub class_logits: Vec<Tensor>,
}

/// Raw per-image network outputs, enough to score any vocabulary and ensemble offline.
#[derive(Debug, Clone, PartialEq)]
pub struct RawPrediction {
    /// `N × mask_height × mask_width` final mask logits.
    pub mask_logits: Vec<f32>,
    pub num_proposals: usize,
    pub mask_height: usize,
    pub mask_width: usize,
    /// Projected in-vocabulary embeddings per proposal and the learned temperature.
    pub in_embeddings: Option<(Vec<Vec<f64>>, f64)>,
    /// Joint-space backbone features pooled under each proposal.
    pub out_embeddings: Option<Vec<Vec<f64>>>,
}

impl RawPrediction {
    pub fn mask_rows(&self) -> Vec<Vec<f32>> {
        let p = self.mask_height * self.mask_width;
        self.mask_logits.chunks(p).map(<[f32]>::to_vec).collect()
    }

    /// In- and out-of-vocabulary probabilities against `vocab`.
    pub fn class_probs(&self, vocab: &Vocabulary) -> Result<(Option<ScoreMatrix>, Option<ScoreMatrix>)> {
        let inp = match &self.in_embeddings {
            Some((e, t)) => Some(in_vocab_probs(e, vocab, *t)?),
            None => None,
        };
        let out = match &self.out_embeddings {
            Some(e) => Some(in_vocab_probs(e, vocab, OUT_VOCAB_TEMPERATURE)?),
            None => None,
        };
        Ok((inp, out))
    }

    /// Combined class scores using `vocab.seen_mask`. With one classifier its
    /// probabilities are returned unchanged.
    pub fn scores(&self, vocab: &Vocabulary, params: &EnsembleParams) -> Result<ScoreMatrix> {
        match self.class_probs(vocab)? {
            (Some(i), Some(o)) => ensemble(&i, &o, &vocab.seen_mask, params),
            (Some(i), None) => Ok(i),
            (None, Some(o)) => Ok(o),
            (None, None) => Err(Error::InvalidArgument("prediction has no class scores".into())),
        }
    }
}

pub struct SegModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub backbone: ToyBackbone,
    frozen_copy: Option<ToyBackbone>,
    pub pixel_decoder: PixelDecoder,
    pub mask_decoder: MaskDecoder,
    pub class_head: Option<ClassHead>,
}

impl SegModel {
    pub fn new(config: ModelConfig, dtype: DType, device: &Device) -> Result<Self> {
        config.validate()?;
        let ps = ParamStore::new(config.seed, dtype, device.clone());
        let mut backbone = ToyBackbone::new(&ps, BACKBONE_PREFIX, &config.backbone, config.text_dim, config.seed)?;
        backbone.set_frozen(config.preset.backbone_frozen());
        let pixel_decoder = PixelDecoder::new(&ps, "pixel_decoder.", backbone.level_channels(), &config.generator)?;
        let mask_decoder = MaskDecoder::new(&ps, "mask_decoder.", &config.generator)?;
        let class_head = match config.preset.in_vocab {
            Some(_) => Some(ClassHead::new(
                &ps,
                "class_head.",
                config.generator.hidden_dim,
                config.text_dim,
                config.init_temperature,
            )?),
            None => None,
        };
        let frozen_copy = if config.preset.needs_frozen_copy() {
            let mut b = ToyBackbone::new(&ps, FROZEN_COPY_PREFIX, &config.backbone, config.text_dim, config.seed)?;
            b.set_frozen(true);
            Some(b)
        } else {
            None
        };
        Ok(Self {
            config,
            params: ps,
            backbone,
            frozen_copy,
            pixel_decoder,
            mask_decoder,
            class_head,
        })
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    pub fn device(&self) -> &Device {
        self.params.device()
    }

    /// Variables the optimizer updates: everything except frozen backbones.
    pub fn trainable_vars(&self) -> Vec<Var> {
        self.params
            .all_vars()
            .into_iter()
            .filter(|(name, _)| {
                !name.starts_with(FROZEN_COPY_PREFIX) && !(self.backbone.is_frozen() && name.starts_with(BACKBONE_PREFIX))
            })
            .map(|(_, v)| v)
            .collect()
    }

    /// Trainable variables split into (backbone, rest).
    pub fn trainable_var_groups(&self) -> (Vec<Var>, Vec<Var>) {
        let frozen = self.backbone.is_frozen();
        let mut backbone = Vec::new();
        let mut rest = Vec::new();
        for (name, v) in self.params.all_vars() {
            if name.starts_with(FROZEN_COPY_PREFIX) {
                continue;
            }
            if name.starts_with(BACKBONE_PREFIX) {
                if !frozen {
                    backbone.push(v);
                }
            } else {
                rest.push(v);
            }
        }
        (backbone, rest)
    }

    pub fn backbone_checksum(&self) -> Result<u64> {
        self.params.checksum(&[BACKBONE_PREFIX])
    }

    pub fn checksum(&self) -> Result<u64> {
        self.params.checksum(&[""])
    }

    pub fn pyramid(&self, images: &Tensor) -> Result<FeaturePyramid> {
        self.backbone.forward(images)
    }

    /// Proposals and training-time class logits against `text` `(C, D_text)`.
    pub fn forward(&self, pyramid: &FeaturePyramid, text: Option<&Tensor>) -> Result<ForwardOutput> {
        let features = self.pixel_decoder.forward(&pyramid.levels)?;
        let proposals = self.mask_decoder.forward(&features)?;
        let mut class_logits = Vec::new();
        if let (Some(head), Some(text)) = (&self.class_head, text) {
            for logits in &proposals.layer_logits {
                let emb = head.embed(&features.pixel, logits)?;
                class_logits.push(head.logits(&emb, text)?);
            }
        }
        Ok(ForwardOutput {
            proposals,
            pixel: features.pixel,
            class_logits,
        })
    }

    pub fn text_tensor(&self, vocab: &Vocabulary) -> Result<Tensor> {
        Ok(Tensor::from_vec(vocab.embeddings.clone(), (vocab.len(), vocab.dim), self.device())?.to_dtype(self.dtype())?)
    }

    /// Inference on a `B×3×H×W` batch.
    pub fn predict(&self, images: &Tensor, vocab: &Vocabulary) -> Result<Vec<RawPrediction>> {
        if vocab.dim != self.config.text_dim {
            return Err(Error::Shape(format!(
                "vocabulary embeddings have dim {}, model expects {}",
                vocab.dim, self.config.text_dim
            )));
        }
        let pyramid = self.pyramid(images)?.detach();
        let features = self.pixel_decoder.forward(&pyramid.levels)?;
        let proposals = self.mask_decoder.forward(&features)?;
        let logits = proposals.mask_logits.detach();
        let (b, n, mh, mw) = logits.dims4()?;

        let in_emb = match &self.class_head {
            Some(head) => Some((
                head.embed(&features.pixel, &logits)?.to_dtype(DType::F64)?.to_vec3::<f64>()?,
                head.temperature.value()?,
            )),
            None => None,
        };
        let oov_dense = match self.config.preset.out_vocab {
            None => None,
            Some(_) => Some(match &self.frozen_copy {
                Some(copy) => copy.forward(images)?.clip_dense,
                None => pyramid.clip_dense.clone(),
            }),
        };
        let all_logits = logits.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        let per = n * mh * mw;
        let mut out = Vec::with_capacity(b);
        for i in 0..b {
            let mask_logits = all_logits[i * per..(i + 1) * per].to_vec();
            let out_embeddings = match &oov_dense {
                Some(dense) => {
                    let fm = FeatureMap::from_tensor(&dense.get(i)?.detach())?;
                    Some(mask_logits.chunks(mh * mw).map(|m| mask_pool(&fm, m, mh, mw)).collect())
                }
                None => None,
            };
            out.push(RawPrediction {
                mask_logits,
                num_proposals: n,
                mask_height: mh,
                mask_width: mw,
                in_embeddings: in_emb.as_ref().map(|(e, t)| (e[i].clone(), *t)),
                out_embeddings,
            });
        }
        Ok(out)
    }

    /// Writes `model.safetensors` and `model.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.params.save(&dir.join("model.safetensors"))?;
        std::fs::write(dir.join("model.json"), serde_json::to_string_pretty(&self.config)?)?;
        Ok(())
    }

    pub fn load(dir: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let cfg_path = dir.join("model.json");
        let text = std::fs::read_to_string(&cfg_path)
            .map_err(|e| Error::InvalidArgument(format!("cannot read {}: {e}", cfg_path.display())))?;
        let config: ModelConfig = serde_json::from_str(&text)?;
        let mut model = Self::new(config, dtype, device)?;
        model.params.load(&dir.join("model.safetensors"))?;
        Ok(model)
    }
}
