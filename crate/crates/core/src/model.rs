//! The full network: per-modality tokenizers and encoders, the text
//! encoder, the cross-attention layer(s) and the relation network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::align::{init_cross_attention, init_relation, CrossAttention, KeyValues, Queries, RelationNet};
use crate::encoder::{encode_text, encode_visual, init_text_encoder, init_visual_encoder, Dropout, TokenSequence};
use crate::error::{Error, Result};
use crate::params::{Bound, Init, ParamStore};
use crate::tensor::{Conv2dSpec, Tensor};
use crate::vision::{init_tokenizer, Modality, RasterInstance, VisionTokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferenceDirection {
    /// `r(X_{s→i}, X_{i→s})`.
    Bidirectional,
    /// `r(X_{s→i}, image tokens)`.
    SketchToImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub mlp_ratio: usize,
    pub conv_kernel: usize,
    pub conv_strides: Vec<usize>,
    pub text_layers: usize,
    pub text_heads: usize,
    pub max_text_len: usize,
    pub cross_heads: usize,
    pub relation_hidden: usize,
    pub dropout: f64,
    pub relation_dropout: f64,
    pub layer_norm_eps: f64,
    pub init_std: f64,
    pub share_visual_encoders: bool,
    pub shared_cross_attention: bool,
    pub inference: InferenceDirection,
    pub pixel_norm: PixelNorm,
}

/// Fixed `(mean, std)` per visual modality; pixels enter the tokenizer as
/// `(x - mean) / std`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelNorm {
    pub sketch: [f64; 2],
    pub image: [f64; 2],
}

impl PixelNorm {
    pub fn identity() -> Self {
        Self { sketch: [0.0, 1.0], image: [0.0, 1.0] }
    }

    pub fn get(&self, m: Modality) -> (f64, f64) {
        let [mean, std] = match m {
            Modality::Sketch => self.sketch,
            _ => self.image,
        };
        (mean, std)
    }
}

impl ModelConfig {
    pub fn desk() -> Self {
        crate::config::RunConfig::desk().model
    }

    pub fn patch_count(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        for (what, h) in [("heads", self.heads), ("text_heads", self.text_heads), ("cross_heads", self.cross_heads)] {
            if h == 0 || !self.dim.is_multiple_of(h) {
                return fail(format!("{what} = {h} does not divide dim {}", self.dim));
            }
        }
        if !self.dim.is_multiple_of(4) {
            return fail(format!("dim {} must be divisible by 4 for the conv path", self.dim));
        }
        if self.conv_strides.len() != 4 || self.conv_strides.contains(&0) {
            return fail(format!("conv_strides must list 4 positive strides, got {:?}", self.conv_strides));
        }
        let mut size = self.image_size;
        for &s in &self.conv_strides {
            let spec = Conv2dSpec { stride: s, padding: self.conv_kernel / 2 };
            size = spec
                .output_size(size, self.conv_kernel)
                .ok_or_else(|| Error::Config("conv kernel larger than feature map".into()))?;
        }
        if size != self.image_size / self.patch_size {
            return fail(format!(
                "conv stack yields a {size}×{size} grid but the patch grid is {0}×{0}",
                self.image_size / self.patch_size
            ));
        }
        if self.max_text_len < 2 || self.relation_hidden == 0 || self.channels == 0 {
            return fail("max_text_len ≥ 2, relation_hidden ≥ 1, channels ≥ 1 required".into());
        }
        for [mean, std] in [self.pixel_norm.sketch, self.pixel_norm.image] {
            if !mean.is_finite() || !(std.is_finite() && std > 0.0) {
                return fail(format!("pixel_norm entries need a finite mean and positive std, got [{mean}, {std}]"));
            }
        }
        for (what, r) in [("dropout", self.dropout), ("relation_dropout", self.relation_dropout)] {
            if !(0.0..1.0).contains(&r) {
                return fail(format!("{what} {r} outside [0, 1)"));
            }
        }
        Ok(())
    }

    fn encoder_prefix(&self, m: Modality) -> &'static str {
        match (m, self.share_visual_encoders) {
            (_, true) => "visual",
            (Modality::Sketch, false) => "sketch",
            _ => "image",
        }
    }

    fn cross_prefix(&self, kv: Modality) -> &'static str {
        match (kv, self.shared_cross_attention) {
            (_, true) => "cross",
            (Modality::Sketch, false) => "cross_sketch",
            _ => "cross_image",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab_size: usize,
    pub params: ParamStore,
}

impl Model {
    pub fn new(config: ModelConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(Error::InvalidArgument("vocabulary is empty".into()));
        }
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init { store: &mut params, rng: &mut rng };
        let visual: &[&str] = if config.share_visual_encoders { &["visual"] } else { &["sketch", "image"] };
        for p in visual {
            init_tokenizer(&mut init, &format!("{p}.tokenizer"), &config);
            init_visual_encoder(&mut init, &format!("{p}.encoder"), &config);
        }
        init_text_encoder(&mut init, "text", &config, vocab_size);
        let cross: &[&str] = if config.shared_cross_attention { &["cross"] } else { &["cross_sketch", "cross_image"] };
        for p in cross {
            init_cross_attention(&mut init, p, config.dim, config.init_std);
        }
        init_relation(&mut init, "relation", config.relation_hidden);
        Ok(Self { config, vocab_size, params })
    }

    /// Rebuilds a model from stored parameters, checking that names and
    /// shapes match the layout `config` and `vocab_size` imply.
    pub fn from_parts(config: ModelConfig, vocab_size: usize, params: ParamStore) -> Result<Self> {
        let layout = Self::new(config.clone(), vocab_size, 0)?;
        if layout.params.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter tensors, found {}",
                layout.params.len(),
                params.len()
            )));
        }
        for ((name, want), (got_name, got)) in layout.params.iter().zip(params.iter()) {
            if name != got_name || want.shape != got.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter `{got_name}` {:?} does not match expected `{name}` {:?}",
                    got.shape, want.shape
                )));
            }
        }
        Ok(Self { config, vocab_size, params })
    }

    pub fn bind(&self, trainable: bool) -> Forward<'_> {
        Forward {
            cfg: &self.config,
            bound: self.params.bind(trainable),
        }
    }
}

/// A model bound to tape leaves for one pass.
pub struct Forward<'m> {
    pub cfg: &'m ModelConfig,
    pub bound: Bound,
}

impl Forward<'_> {
    pub fn tokenizer(&self, m: Modality) -> VisionTokenizer<'_> {
        VisionTokenizer {
            cfg: self.cfg,
            scope: self.bound.scope(&format!("{}.tokenizer", self.cfg.encoder_prefix(m))),
        }
    }

    /// Tokenise and self-encode a raster.
    pub fn encode_raster(&self, x: &RasterInstance, drop: &mut Dropout) -> Result<TokenSequence> {
        if x.modality == Modality::Text {
            return Err(Error::InvalidArgument("raster with text modality".into()));
        }
        let tokens = self.tokenizer(x.modality).tokenize(x)?;
        let scope = self.bound.scope(&format!("{}.encoder", self.cfg.encoder_prefix(x.modality)));
        encode_visual(&tokens, &scope, self.cfg, drop)
    }

    pub fn encode_text(&self, ids: &[usize], drop: &mut Dropout) -> Result<TokenSequence> {
        encode_text(ids, &self.bound.scope("text"), self.cfg, drop)
    }

    /// Cross-attention layer used when attending over `kv` tokens.
    pub fn cross(&self, kv: Modality) -> Result<CrossAttention<'_>> {
        CrossAttention::new(&self.bound.scope(self.cfg.cross_prefix(kv)), self.cfg.cross_heads)
    }

    pub fn relation(&self) -> RelationNet<'_> {
        RelationNet::new(self.bound.scope("relation"), self.cfg.relation_dropout)
    }

    /// Text-free similarity of two self-encoded sequences.
    pub fn score_pair(&self, sketch: &TokenSequence, image: &TokenSequence) -> Result<Tensor> {
        self.score_prepared(&self.prepare(sketch)?, &self.prepare(image)?, &mut Dropout::eval())
    }

    /// Projects a visual sequence once for repeated cross-modal scoring.
    pub fn prepare(&self, seq: &TokenSequence) -> Result<Prepared> {
        let other = match seq.modality {
            Modality::Sketch => Modality::Image,
            Modality::Image => Modality::Sketch,
            Modality::Text => return Err(Error::InvalidArgument("prepare expects a visual sequence".into())),
        };
        Ok(Prepared {
            queries: self.cross(other)?.queries(seq)?,
            key_values: self.cross(seq.modality)?.key_values(seq)?,
            tokens: seq.tokens.clone(),
        })
    }

    /// `r(X_{s→i}, X_{i→s})`, or `r(X_{s→i}, image tokens)` for the
    /// single-direction alternative.
    pub fn score_prepared(&self, sketch: &Prepared, image: &Prepared, drop: &mut Dropout) -> Result<Tensor> {
        let s_to_i = self.cross(Modality::Image)?.attend(&sketch.queries, &image.key_values)?;
        match self.cfg.inference {
            InferenceDirection::Bidirectional => {
                let i_to_s = self.cross(Modality::Sketch)?.attend(&image.queries, &sketch.key_values)?;
                self.relation().score(&s_to_i, &i_to_s, drop)
            }
            InferenceDirection::SketchToImage => self.relation().score_tokens(&s_to_i.tokens, &image.tokens, drop),
        }
    }
}

/// A self-encoded sequence with its cross-attention projections.
pub struct Prepared {
    pub queries: Queries,
    pub key_values: KeyValues,
    pub tokens: Tensor,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn raster(seed: u64, modality: Modality) -> RasterInstance {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let px = (0..32 * 32 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
        RasterInstance::new(px, 32, 3, modality, 0, format!("r{seed}")).unwrap()
    }

    #[test]
    fn score_pair_is_deterministic_and_in_range() {
        let model = Model::new(ModelConfig::desk(), 20, 1).unwrap();
        let f = model.bind(false);
        let s = f.encode_raster(&raster(1, Modality::Sketch), &mut Dropout::eval()).unwrap();
        let i = f.encode_raster(&raster(2, Modality::Image), &mut Dropout::eval()).unwrap();
        let a = f.score_pair(&s, &i).unwrap().item();
        let b = f.score_pair(&s, &i).unwrap().item();
        assert_eq!(a.to_bits(), b.to_bits());
        assert!(a > 0.0 && a < 1.0);
    }

    #[test]
    fn from_parts_checks_layout() {
        let model = Model::new(ModelConfig::desk(), 9, 4).unwrap();
        let again = Model::from_parts(model.config.clone(), 9, model.params.clone()).unwrap();
        assert_eq!(again, model);
        assert!(Model::from_parts(model.config.clone(), 10, model.params.clone()).is_err());
        let mut cfg = ModelConfig::desk();
        cfg.dim = 32;
        assert!(Model::from_parts(cfg, 9, model.params.clone()).is_err());
    }

    #[test]
    fn separate_encoders_by_default() {
        let model = Model::new(ModelConfig::desk(), 5, 1).unwrap();
        assert!(model.params.get("sketch.encoder.global").is_some());
        assert!(model.params.get("image.encoder.global").is_some());
        assert_ne!(
            model.params.get("sketch.encoder.global").unwrap().data,
            model.params.get("image.encoder.global").unwrap().data
        );
    }

    #[test]
    fn split_cross_attention_switch() {
        let mut cfg = ModelConfig::desk();
        cfg.shared_cross_attention = false;
        let model = Model::new(cfg, 5, 1).unwrap();
        assert!(model.params.get("cross_sketch.wq").is_some());
        assert!(model.params.get("cross.wq").is_none());
    }

    #[test]
    fn sketch_to_image_alternative() {
        let mut cfg = ModelConfig::desk();
        cfg.inference = InferenceDirection::SketchToImage;
        let model = Model::new(cfg, 5, 2).unwrap();
        let f = model.bind(false);
        let s = f.encode_raster(&raster(3, Modality::Sketch), &mut Dropout::eval()).unwrap();
        let i = f.encode_raster(&raster(4, Modality::Image), &mut Dropout::eval()).unwrap();
        let r = f.score_pair(&s, &i).unwrap().item();
        assert!(r > 0.0 && r < 1.0);
    }

    #[test]
    fn config_rejects_misaligned_conv_grid() {
        let mut cfg = ModelConfig::desk();
        cfg.conv_strides = vec![2, 2, 2, 2];
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk();
        cfg.heads = 5;
        assert!(cfg.validate().is_err());
    }
}
