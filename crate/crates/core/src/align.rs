//! Cross-modal alignment: one cross-attention layer, the global triplet
//! objective, the relation-network matching objective and their weighted
//! combination.
//!
//! During training the text tokens are the queries, so sketch and image
//! content is re-expressed per text token and both sides share the text
//! length. At inference the same layer is run sketch→image and image→sketch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{linear, AttentionParams, ProjectedKeys, ProjectedQueries};
use crate::encoder::{Dropout, TokenSequence};
use crate::error::{Error, Result};
use crate::params::{Init, Scope};
use crate::tensor::Tensor;
use crate::vision::Modality;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_tri: f64,
    pub lambda_rn: f64,
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_tri: 0.5,
            lambda_rn: 8.0,
            margin: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.lambda_tri, self.lambda_rn, self.margin]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(Error::Config(format!("loss weights must be ≥ 0, got {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_tri: f64,
    pub l_rn: f64,
    pub l_total: f64,
    pub triplet_count: usize,
}

/// Output of one cross-attention pass; `global` is the row produced by the
/// query side's global/aggregate token.
#[derive(Debug, Clone)]
pub struct CrossAlignedSequence {
    pub tokens: Tensor,
    pub global: Tensor,
    pub source_pair: (Modality, Modality),
}

impl CrossAlignedSequence {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn init_cross_attention<R: Rng>(init: &mut Init<'_, R>, prefix: &str, dim: usize, std: f64) {
    crate::attention::init_attention(init, prefix, dim, std);
}

pub struct Queries {
    proj: ProjectedQueries,
    modality: Modality,
}

pub struct KeyValues {
    proj: ProjectedKeys,
    modality: Modality,
}

/// The cross-attention layer.
pub struct CrossAttention<'a> {
    params: AttentionParams<'a>,
}

impl<'a> CrossAttention<'a> {
    pub fn new(scope: &Scope<'a>, heads: usize) -> Result<Self> {
        Ok(Self {
            params: AttentionParams::from_scope(scope, heads)?,
        })
    }

    pub fn queries(&self, seq: &TokenSequence) -> Result<Queries> {
        if !seq.has_global {
            return Err(Error::InvalidArgument(
                "cross-attention queries need a global/aggregate token at row 0".into(),
            ));
        }
        Ok(Queries {
            proj: self.params.project_queries(&seq.tokens)?,
            modality: seq.modality,
        })
    }

    pub fn key_values(&self, seq: &TokenSequence) -> Result<KeyValues> {
        Ok(KeyValues {
            proj: self.params.project_keys(&seq.tokens)?,
            modality: seq.modality,
        })
    }

    pub fn attend(&self, q: &Queries, kv: &KeyValues) -> Result<CrossAlignedSequence> {
        Ok(self.attend_with_weights(q, kv)?.0)
    }

    pub fn attend_with_weights(
        &self,
        q: &Queries,
        kv: &KeyValues,
    ) -> Result<(CrossAlignedSequence, Vec<Tensor>)> {
        let att = self.params.attend(&q.proj, &kv.proj, None)?;
        let global = att.output.row(0)?;
        Ok((
            CrossAlignedSequence {
                tokens: att.output,
                global,
                source_pair: (q.modality, kv.modality),
            },
            att.weights,
        ))
    }

    /// Output length equals the query length for any key/value length.
    pub fn cross_attend(
        &self,
        query_seq: &TokenSequence,
        kv_seq: &TokenSequence,
    ) -> Result<CrossAlignedSequence> {
        if query_seq.dim() != kv_seq.dim() {
            return Err(Error::shape(
                "cross_attend",
                query_seq.tokens.shape(),
                kv_seq.tokens.shape(),
            ));
        }
        self.attend(&self.queries(query_seq)?, &self.key_values(kv_seq)?)
    }
}

/// Mean over triplets of `max(‖a − p‖ − ‖a − n‖ + margin, 0)` on global
/// vectors.
pub fn triplet_loss(anchors: &[Tensor], positives: &[Tensor], negatives: &[Tensor], margin: f64) -> Result<Tensor> {
    if anchors.len() != positives.len() || anchors.len() != negatives.len() {
        return Err(Error::InvalidArgument(format!(
            "triplet batch sizes differ: {} / {} / {}",
            anchors.len(),
            positives.len(),
            negatives.len()
        )));
    }
    let mut dp = Vec::with_capacity(anchors.len());
    let mut dn = Vec::with_capacity(anchors.len());
    for ((a, p), n) in anchors.iter().zip(positives).zip(negatives) {
        dp.push(a.sub(p)?.l2_norm());
        dn.push(a.sub(n)?.l2_norm());
    }
    triplet_from_distances(&dp, &dn, margin)
}

/// Mean of `max(d⁺ − d⁻ + margin, 0)` over precomputed scalar distances.
pub fn triplet_from_distances(positive: &[Tensor], negative: &[Tensor], margin: f64) -> Result<Tensor> {
    if positive.is_empty() || positive.len() != negative.len() {
        return Err(Error::InvalidArgument(format!(
            "triplet distance lists are empty or differ: {} / {}",
            positive.len(),
            negative.len()
        )));
    }
    let terms = positive
        .iter()
        .zip(negative)
        .map(|(p, n)| Ok(p.sub(n)?.add_scalar(margin).relu()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack_scalars(&terms)?.mean())
}

pub fn init_relation<R: Rng>(init: &mut Init<'_, R>, prefix: &str, hidden: usize) {
    init.fan_in_uniform(&format!("{prefix}.fc1.weight"), &[2, hidden], 2);
    init.fan_in_uniform(&format!("{prefix}.fc1.bias"), &[hidden], 2);
    init.fan_in_uniform(&format!("{prefix}.fc2.weight"), &[hidden, hidden], hidden);
    init.fan_in_uniform(&format!("{prefix}.fc2.bias"), &[hidden], hidden);
    init.fan_in_uniform(&format!("{prefix}.head.weight"), &[hidden, 1], hidden);
    init.constant(&format!("{prefix}.head.bias"), &[1], 0.0);
}

/// The relation network ρ: (FC → ReLU → Dropout) ×2 then a scalar head,
/// applied to per-row (max, mean) statistics of the cosine kernel.
pub struct RelationNet<'a> {
    scope: Scope<'a>,
    dropout: f64,
}

impl<'a> RelationNet<'a> {
    pub fn new(scope: Scope<'a>, dropout: f64) -> Self {
        Self { scope, dropout }
    }

    /// Per-row (max, mean) of the kernel between two row-normalised token
    /// matrices, as an `m×2` tensor.
    pub fn kernel_stats(a_unit: &Tensor, b_unit: &Tensor) -> Result<Tensor> {
        let kernel = a_unit.matmul_t(b_unit)?;
        let m = kernel.shape()[0];
        Tensor::concat_cols(&[
            kernel.row_max()?.reshape(&[m, 1])?,
            kernel.row_mean()?.reshape(&[m, 1])?,
        ])
    }

    /// Pre-sigmoid score from row-normalised inputs.
    pub fn logit_normalized(&self, a_unit: &Tensor, b_unit: &Tensor, drop: &mut Dropout) -> Result<Tensor> {
        let s = &self.scope;
        let stats = Self::kernel_stats(a_unit, b_unit)?;
        let h = linear(&stats, s.get("fc1.weight")?, s.get("fc1.bias")?)?.relu();
        let h = drop.apply(&h, self.dropout)?;
        let h = linear(&h, s.get("fc2.weight")?, s.get("fc2.bias")?)?.relu();
        let h = drop.apply(&h, self.dropout)?;
        let rows = linear(&h, s.get("head.weight")?, s.get("head.bias")?)?;
        Ok(rows.mean())
    }

    /// Relation score in (0, 1). Zero-norm tokens contribute similarity 0.
    pub fn score(&self, a: &CrossAlignedSequence, b: &CrossAlignedSequence, drop: &mut Dropout) -> Result<Tensor> {
        self.score_tokens(&a.tokens, &b.tokens, drop)
    }

    pub fn score_tokens(&self, a: &Tensor, b: &Tensor, drop: &mut Dropout) -> Result<Tensor> {
        let (au, bu) = (a.normalize_rows()?, b.normalize_rows()?);
        Ok(self.logit_normalized(&au, &bu, drop)?.sigmoid())
    }
}

/// Squared error between relation scores (`N×M`, row-major) and the
/// same-label indicator, summed and divided by `N·M`.
pub fn matching_loss(scores: &Tensor, labels_q: &[usize], labels_g: &[usize]) -> Result<Tensor> {
    let (n, m) = (labels_q.len(), labels_g.len());
    if n == 0 || m == 0 || scores.numel() != n * m {
        return Err(Error::shape("matching_loss", scores.shape(), &[n, m]));
    }
    let target: Vec<f64> = labels_q
        .iter()
        .flat_map(|yq| labels_g.iter().map(move |yg| if yq == yg { 1.0 } else { 0.0 }))
        .collect();
    let target = Tensor::new(scores.shape(), target)?;
    let diff = scores.sub(&target)?;
    Ok(diff.mul(&diff)?.sum().scale(1.0 / (n * m) as f64))
}

/// `λ_tri · l_tri + λ_rn · l_rn`.
pub fn combined_loss(l_tri: &Tensor, l_rn: &Tensor, w: &LossWeights, triplet_count: usize) -> Result<(Tensor, LossReport)> {
    let total = l_tri.scale(w.lambda_tri).add(&l_rn.scale(w.lambda_rn))?;
    let report = LossReport {
        l_tri: l_tri.item(),
        l_rn: l_rn.item(),
        l_total: total.item(),
        triplet_count,
    };
    Ok((total, report))
}
