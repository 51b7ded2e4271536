//! Pre-norm transformer encoders: the visual encoder with a prepended
//! global token, and the text encoder with a learned aggregate token and an
//! output projection to the visual width.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{init_attention, linear, AttentionParams};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::params::{Init, Scope};
use crate::tensor::Tensor;
use crate::vision::Modality;

/// Ordered token embeddings. When `has_global` is set, row 0 is the
/// global (visual) or aggregate (text) token.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub has_global: bool,
    pub modality: Modality,
}

impl TokenSequence {
    pub fn new(tokens: Tensor, has_global: bool, modality: Modality) -> Self {
        Self {
            tokens,
            has_global,
            modality,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Dropout source: `None` means evaluation mode.
pub struct Dropout {
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn eval() -> Self {
        Self { rng: None }
    }

    pub fn train(seed: u64) -> Self {
        Self {
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn apply(&mut self, x: &Tensor, rate: f64) -> Result<Tensor> {
        match self.rng.as_mut() {
            Some(rng) => x.dropout(rate, true, rng),
            None => Ok(x.clone()),
        }
    }
}

pub fn init_block<R: Rng>(init: &mut Init<'_, R>, prefix: &str, dim: usize, mlp_ratio: usize, std: f64) {
    for ln in ["ln1", "ln2"] {
        init.constant(&format!("{prefix}.{ln}.gain"), &[dim], 1.0);
        init.constant(&format!("{prefix}.{ln}.bias"), &[dim], 0.0);
    }
    init_attention(init, &format!("{prefix}.attn"), dim, std);
    let hidden = dim * mlp_ratio;
    init.trunc_normal(&format!("{prefix}.mlp.w1"), &[dim, hidden], std);
    init.constant(&format!("{prefix}.mlp.b1"), &[hidden], 0.0);
    init.trunc_normal(&format!("{prefix}.mlp.w2"), &[hidden, dim], std);
    init.constant(&format!("{prefix}.mlp.b2"), &[dim], 0.0);
}

pub fn init_visual_encoder<R: Rng>(init: &mut Init<'_, R>, prefix: &str, cfg: &ModelConfig) {
    let n = cfg.patch_count();
    let std = cfg.init_std;
    init.trunc_normal(&format!("{prefix}.global"), &[1, cfg.dim], std);
    init.trunc_normal(&format!("{prefix}.pos"), &[n + 1, cfg.dim], std);
    for l in 0..cfg.layers {
        init_block(init, &format!("{prefix}.layers.{l}"), cfg.dim, cfg.mlp_ratio, std);
    }
}

pub fn init_text_encoder<R: Rng>(
    init: &mut Init<'_, R>,
    prefix: &str,
    cfg: &ModelConfig,
    vocab_size: usize,
) {
    let std = cfg.init_std;
    init.trunc_normal(&format!("{prefix}.embed"), &[vocab_size, cfg.dim], std);
    init.trunc_normal(&format!("{prefix}.aggregate"), &[1, cfg.dim], std);
    init.trunc_normal(&format!("{prefix}.pos"), &[cfg.max_text_len + 1, cfg.dim], std);
    for l in 0..cfg.text_layers {
        init_block(init, &format!("{prefix}.layers.{l}"), cfg.dim, cfg.mlp_ratio, std);
    }
    init.trunc_normal(&format!("{prefix}.proj.weight"), &[cfg.dim, cfg.dim], std);
    init.constant(&format!("{prefix}.proj.bias"), &[cfg.dim], 0.0);
}

/// Multi-head self-attention of a sequence with itself; returns the
/// projected output and the per-head weights.
pub fn self_attention(
    z: &Tensor,
    layer: &Scope<'_>,
    heads: usize,
    drop: &mut Dropout,
    rate: f64,
) -> Result<crate::attention::Attended> {
    let p = AttentionParams::from_scope(&layer.sub("attn"), heads)?;
    let q = p.project_queries(z)?;
    let kv = p.project_keys(z)?;
    if drop.is_training() && rate > 0.0 {
        let mut f = |t: &Tensor| drop.apply(t, rate);
        p.attend(&q, &kv, Some(&mut f))
    } else {
        p.attend(&q, &kv, None)
    }
}

/// One pre-norm block: `z + MSA(LN(z))`, then `z + MLP(LN(z))`.
fn block(z: &Tensor, layer: &Scope<'_>, heads: usize, eps: f64, rate: f64, drop: &mut Dropout) -> Result<Tensor> {
    let h = z.layer_norm(layer.get("ln1.gain")?, layer.get("ln1.bias")?, eps)?;
    let att = self_attention(&h, layer, heads, drop, rate)?.output;
    let z = z.add(&att)?;
    let h = z.layer_norm(layer.get("ln2.gain")?, layer.get("ln2.bias")?, eps)?;
    let h = linear(&h, layer.get("mlp.w1")?, layer.get("mlp.b1")?)?.gelu();
    let h = drop.apply(&h, rate)?;
    let h = linear(&h, layer.get("mlp.w2")?, layer.get("mlp.b2")?)?;
    z.add(&h)
}

/// Prepends the global token, adds positions and runs the block stack.
/// All `n + 1` outputs are returned; there is no classification head.
pub fn encode_visual(
    x: &TokenSequence,
    scope: &Scope<'_>,
    cfg: &ModelConfig,
    drop: &mut Dropout,
) -> Result<TokenSequence> {
    if x.has_global {
        return Err(Error::InvalidArgument(
            "encode_visual input already carries a global token".into(),
        ));
    }
    let pos = scope.get("pos")?;
    if pos.shape()[0] != x.len() + 1 {
        return Err(Error::InvalidArgument(format!(
            "positional table holds {} rows but the input has {} tokens (+1 global)",
            pos.shape()[0],
            x.len()
        )));
    }
    let z = Tensor::concat_rows(&[scope.get("global")?.clone(), x.tokens.clone()])?;
    let mut z = z.add(pos)?;
    for l in 0..cfg.layers {
        z = block(&z, &scope.sub(&format!("layers.{l}")), cfg.heads, cfg.layer_norm_eps, cfg.dropout, drop)?;
    }
    Ok(TokenSequence::new(z, true, x.modality))
}

/// Embeds ids, prepends the aggregate token, adds positions, runs the
/// block stack and projects every token to the visual width.
pub fn encode_text(
    ids: &[usize],
    scope: &Scope<'_>,
    cfg: &ModelConfig,
    drop: &mut Dropout,
) -> Result<TokenSequence> {
    if ids.is_empty() {
        return Err(Error::InvalidArgument("encode_text needs at least one id".into()));
    }
    let pos = scope.get("pos")?;
    if ids.len() + 1 > pos.shape()[0] {
        return Err(Error::InvalidArgument(format!(
            "text of {} tokens exceeds the positional table ({} rows)",
            ids.len(),
            pos.shape()[0]
        )));
    }
    let emb = scope.get("embed")?.gather_rows(ids)?;
    let z = Tensor::concat_rows(&[scope.get("aggregate")?.clone(), emb])?;
    let mut z = z.add(&pos.rows(0, ids.len() + 1)?)?;
    for l in 0..cfg.text_layers {
        z = block(
            &z,
            &scope.sub(&format!("layers.{l}")),
            cfg.text_heads,
            cfg.layer_norm_eps,
            cfg.dropout,
            drop,
        )?;
    }
    let t = linear(&z, scope.get("proj.weight")?, scope.get("proj.bias")?)?;
    Ok(TokenSequence::new(t, true, Modality::Text))
}
