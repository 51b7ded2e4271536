//! Raster → token conversion: linear patch embedding plus a four-layer
//! convolutional path whose output grid matches the patch grid. The two
//! token sets are summed.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::linear;
use crate::encoder::TokenSequence;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{Init, Scope};
use crate::tensor::{Conv2dSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Sketch,
    Image,
    Text,
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Modality::Sketch => "sketch",
            Modality::Image => "image",
            Modality::Text => "text",
        })
    }
}

/// A square raster in `h×w×c` order with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RasterInstance {
    pub pixels: Vec<f64>,
    pub size: usize,
    pub channels: usize,
    pub modality: Modality,
    pub label: usize,
    pub instance_id: String,
}

impl RasterInstance {
    pub fn new(
        pixels: Vec<f64>,
        size: usize,
        channels: usize,
        modality: Modality,
        label: usize,
        instance_id: impl Into<String>,
    ) -> Result<Self> {
        if pixels.len() != size * size * channels {
            return Err(Error::shape("raster", &[size, size, channels], &[pixels.len()]));
        }
        Ok(Self {
            pixels,
            size,
            channels,
            modality,
            label,
            instance_id: instance_id.into(),
        })
    }

    pub fn pixel(&self, y: usize, x: usize, ch: usize) -> f64 {
        self.pixels[(y * self.size + x) * self.channels + ch]
    }

    /// Channel-major copy for convolution.
    pub fn to_chw(&self) -> Tensor {
        let (s, c) = (self.size, self.channels);
        let mut out = vec![0.0; s * s * c];
        for y in 0..s {
            for x in 0..s {
                for ch in 0..c {
                    out[(ch * s + y) * s + x] = self.pixel(y, x, ch);
                }
            }
        }
        Tensor::new(&[c, s, s], out).expect("raster dims are positive")
    }

    /// Non-overlapping `patch×patch` blocks flattened as (y, x, channel),
    /// one row per patch in row-major grid order.
    pub fn to_patches(&self, patch: usize) -> Result<Tensor> {
        if patch == 0 || !self.size.is_multiple_of(patch) {
            return Err(Error::InvalidArgument(format!(
                "image size {} is not divisible by patch size {patch}",
                self.size
            )));
        }
        let grid = self.size / patch;
        let width = patch * patch * self.channels;
        let mut out = Vec::with_capacity(grid * grid * width);
        for gy in 0..grid {
            for gx in 0..grid {
                for y in 0..patch {
                    for x in 0..patch {
                        for ch in 0..self.channels {
                            out.push(self.pixel(gy * patch + y, gx * patch + x, ch));
                        }
                    }
                }
            }
        }
        Tensor::new(&[grid * grid, width], out)
    }
}

/// Channel widths of the conv path: `c → d/4 → d/2 → d → d`.
pub fn conv_channels(cfg: &ModelConfig) -> [usize; 5] {
    let d = cfg.dim;
    [cfg.channels, d / 4, d / 2, d, d]
}

pub fn init_tokenizer<R: Rng>(init: &mut Init<'_, R>, prefix: &str, cfg: &ModelConfig) {
    let patch_in = cfg.patch_size * cfg.patch_size * cfg.channels;
    init.fan_in_uniform(&format!("{prefix}.patch.weight"), &[patch_in, cfg.dim], patch_in);
    init.constant(&format!("{prefix}.patch.bias"), &[cfg.dim], 0.0);
    let ch = conv_channels(cfg);
    let k = cfg.conv_kernel;
    for layer in 0..4 {
        let (cin, cout) = (ch[layer], ch[layer + 1]);
        init.fan_in_uniform(
            &format!("{prefix}.conv.{layer}.weight"),
            &[cout, cin, k, k],
            cin * k * k,
        );
        init.constant(&format!("{prefix}.conv.{layer}.bias"), &[cout], 0.0);
    }
}

pub struct VisionTokenizer<'a> {
    pub cfg: &'a ModelConfig,
    pub scope: Scope<'a>,
}

impl VisionTokenizer<'_> {
    fn check_input(&self, x: &RasterInstance) -> Result<()> {
        if x.size != self.cfg.image_size || x.channels != self.cfg.channels {
            return Err(Error::InvalidArgument(format!(
                "raster `{}` is {}×{}×{}, tokenizer expects {}×{}×{}",
                x.instance_id,
                x.size,
                x.size,
                x.channels,
                self.cfg.image_size,
                self.cfg.image_size,
                self.cfg.channels
            )));
        }
        if !x.size.is_multiple_of(self.cfg.patch_size) {
            return Err(Error::InvalidArgument(format!(
                "image size {} is not divisible by patch size {}",
                x.size, self.cfg.patch_size
            )));
        }
        Ok(())
    }

    fn normalize(&self, pixels: Tensor, m: Modality) -> Tensor {
        let (mean, std) = self.cfg.pixel_norm.get(m);
        pixels.add_scalar(-mean).scale(1.0 / std)
    }

    /// Linear projection of each flattened patch.
    pub fn patch_tokens(&self, x: &RasterInstance) -> Result<TokenSequence> {
        self.check_input(x)?;
        let patches = self.normalize(x.to_patches(self.cfg.patch_size)?, x.modality);
        let tokens = linear(
            &patches,
            self.scope.get("patch.weight")?,
            self.scope.get("patch.bias")?,
        )?;
        Ok(TokenSequence::new(tokens, false, x.modality))
    }

    /// Tokens from the conv stack (ReLU between layers, none after the
    /// last), one per cell of the final grid.
    pub fn conv_tokens(&self, x: &RasterInstance) -> Result<TokenSequence> {
        self.check_input(x)?;
        let mut h = self.normalize(x.to_chw(), x.modality);
        for layer in 0..4 {
            let spec = Conv2dSpec {
                stride: self.cfg.conv_strides[layer],
                padding: self.cfg.conv_kernel / 2,
            };
            h = h.conv2d(
                self.scope.get(&format!("conv.{layer}.weight"))?,
                self.scope.get(&format!("conv.{layer}.bias"))?,
                spec,
            )?;
            if layer < 3 {
                h = h.relu();
            }
        }
        let [d, gy, gx] = *h.shape() else {
            unreachable!("conv2d returns 3-D output")
        };
        let grid = self.cfg.image_size / self.cfg.patch_size;
        if gy != grid || gx != grid {
            return Err(Error::InvalidArgument(format!(
                "conv grid {gy}×{gx} does not match patch grid {grid}×{grid}"
            )));
        }
        let tokens = h.reshape(&[d, gy * gx])?.transpose()?;
        Ok(TokenSequence::new(tokens, false, x.modality))
    }

    /// Full tokenisation: patch tokens adjusted by conv tokens.
    pub fn tokenize(&self, x: &RasterInstance) -> Result<TokenSequence> {
        fuse_tokens(&self.patch_tokens(x)?, &self.conv_tokens(x)?)
    }
}

/// Elementwise sum of two token sequences of equal shape.
pub fn fuse_tokens(v: &TokenSequence, n: &TokenSequence) -> Result<TokenSequence> {
    if v.tokens.shape() != n.tokens.shape() {
        return Err(Error::shape("fuse_tokens", v.tokens.shape(), n.tokens.shape()));
    }
    Ok(TokenSequence::new(v.tokens.add(&n.tokens)?, false, v.modality))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn desk_cfg() -> ModelConfig {
        ModelConfig::desk()
    }

    fn setup(cfg: &ModelConfig) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        init_tokenizer(&mut Init { store: &mut store, rng: &mut rng }, "tok", cfg);
        store
    }

    fn raster(cfg: &ModelConfig, f: impl Fn(usize, usize, usize) -> f64) -> RasterInstance {
        let s = cfg.image_size;
        let mut px = Vec::new();
        for y in 0..s {
            for x in 0..s {
                for c in 0..cfg.channels {
                    px.push(f(y, x, c));
                }
            }
        }
        RasterInstance::new(px, s, cfg.channels, Modality::Sketch, 0, "r").unwrap()
    }

    #[test]
    fn sixteen_tokens_for_32_over_8() {
        let cfg = desk_cfg();
        let store = setup(&cfg);
        let bound = store.bind(false);
        let tok = VisionTokenizer { cfg: &cfg, scope: bound.scope("tok") };
        let x = raster(&cfg, |y, x, _| ((y * 7 + x * 3) % 11) as f64 / 10.0);
        assert_eq!(tok.patch_tokens(&x).unwrap().tokens.shape(), &[16, 64]);
        assert_eq!(tok.conv_tokens(&x).unwrap().tokens.shape(), &[16, 64]);
    }

    #[test]
    fn mean_sketch_zero_bias_gives_zero_tokens() {
        let cfg = desk_cfg();
        let store = setup(&cfg);
        let bound = store.bind(false);
        let tok = VisionTokenizer { cfg: &cfg, scope: bound.scope("tok") };
        let mean = cfg.pixel_norm.sketch[0];
        let x = raster(&cfg, |_, _, _| mean);
        assert!(tok.patch_tokens(&x).unwrap().tokens.data().iter().all(|&v| v == 0.0));
        assert!(tok.conv_tokens(&x).unwrap().tokens.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn paper_stride_schedule_maps_32_to_2() {
        let mut cfg = desk_cfg();
        cfg.patch_size = 16;
        cfg.conv_strides = vec![2, 2, 2, 2];
        let store = setup(&cfg);
        let bound = store.bind(false);
        let tok = VisionTokenizer { cfg: &cfg, scope: bound.scope("tok") };
        let x = raster(&cfg, |y, _, _| y as f64 / 32.0);
        assert_eq!(tok.conv_tokens(&x).unwrap().tokens.shape(), &[4, 64]);
    }

    #[test]
    fn one_pixel_touches_one_patch_token() {
        let cfg = desk_cfg();
        let store = setup(&cfg);
        let bound = store.bind(false);
        let tok = VisionTokenizer { cfg: &cfg, scope: bound.scope("tok") };
        let base = raster(&cfg, |_, _, _| 0.0);
        let mut hot = base.clone();
        // pixel (9, 18) lives in grid cell (1, 2) → token 6
        hot.pixels[(9 * cfg.image_size + 18) * cfg.channels] = 1.0;
        let a = tok.patch_tokens(&base).unwrap().tokens;
        let b = tok.patch_tokens(&hot).unwrap().tokens;
        let changed: Vec<usize> = (0..16)
            .filter(|t| a.data()[t * 64..(t + 1) * 64] != b.data()[t * 64..(t + 1) * 64])
            .collect();
        assert_eq!(changed, vec![6]);
    }

    #[test]
    fn conv_receptive_field_exceeds_patch() {
        let cfg = desk_cfg();
        let store = setup(&cfg);
        let bound = store.bind(false);
        let tok = VisionTokenizer { cfg: &cfg, scope: bound.scope("tok") };
        let base = raster(&cfg, |y, x, c| ((y * 5 + x * 3 + c) % 7) as f64 / 7.0);
        // Token 5 covers rows 8..16, cols 8..16; perturb (12, 16), just right of it.
        let mut probe = base.clone();
        probe.pixels[(12 * cfg.image_size + 16) * cfg.channels] += 0.5;
        let (pa, pb) = (
            tok.patch_tokens(&base).unwrap().tokens,
            tok.patch_tokens(&probe).unwrap().tokens,
        );
        let (ca, cb) = (
            tok.conv_tokens(&base).unwrap().tokens,
            tok.conv_tokens(&probe).unwrap().tokens,
        );
        let t = 5;
        assert_eq!(pa.data()[t * 64..(t + 1) * 64], pb.data()[t * 64..(t + 1) * 64]);
        assert_ne!(ca.data()[t * 64..(t + 1) * 64], cb.data()[t * 64..(t + 1) * 64]);
    }

    #[test]
    fn indivisible_size_rejected() {
        let mut cfg = desk_cfg();
        cfg.patch_size = 5;
        let store = setup(&desk_cfg());
        let bound = store.bind(false);
        let tok = VisionTokenizer { cfg: &cfg, scope: bound.scope("tok") };
        let x = raster(&cfg, |_, _, _| 0.5);
        assert!(tok.patch_tokens(&x).is_err());
    }

    #[test]
    fn fuse_identities() {
        let a = TokenSequence::new(
            Tensor::new(&[2, 2], vec![1., 2., 3., 4.]).unwrap(),
            false,
            Modality::Image,
        );
        let z = TokenSequence::new(Tensor::zeros(&[2, 2]), false, Modality::Image);
        let neg = TokenSequence::new(a.tokens.scale(-1.0), false, Modality::Image);
        let b = TokenSequence::new(
            Tensor::new(&[2, 2], vec![0.5, -1., 2., 0.]).unwrap(),
            false,
            Modality::Image,
        );
        assert_eq!(fuse_tokens(&a, &z).unwrap().tokens.data(), a.tokens.data());
        assert!(fuse_tokens(&a, &neg).unwrap().tokens.data().iter().all(|&v| v == 0.0));
        assert_eq!(
            fuse_tokens(&a, &b).unwrap().tokens.data(),
            fuse_tokens(&b, &a).unwrap().tokens.data()
        );
        let short = TokenSequence::new(Tensor::zeros(&[1, 2]), false, Modality::Image);
        assert!(fuse_tokens(&a, &short).is_err());
    }
}
