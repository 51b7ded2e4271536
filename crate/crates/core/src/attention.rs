//! Multi-head scaled dot-product attention shared by the self-attention
//! blocks and the cross-modal layer.
//!
//! Projections are split from the attention step so a projected query set
//! (e.g. one category's text tokens) can be reused against many key/value
//! sets without recomputation.

use crate::error::{Error, Result};
use crate::params::Scope;
use crate::tensor::Tensor;

pub struct AttentionParams<'a> {
    pub wq: &'a Tensor,
    pub bq: &'a Tensor,
    pub wk: &'a Tensor,
    pub bk: &'a Tensor,
    pub wv: &'a Tensor,
    pub bv: &'a Tensor,
    pub wo: &'a Tensor,
    pub bo: &'a Tensor,
    pub heads: usize,
}

/// Per-head query slices.
pub struct ProjectedQueries {
    pub heads: Vec<Tensor>,
    pub len: usize,
}

/// Per-head key and value slices.
pub struct ProjectedKeys {
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
    pub len: usize,
}

pub struct Attended {
    pub output: Tensor,
    /// One `queries × keys` row-stochastic matrix per head.
    pub weights: Vec<Tensor>,
}

pub(crate) fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.matmul(w)?.add_row(b)
}

fn split_heads(x: &Tensor, heads: usize) -> Result<Vec<Tensor>> {
    let (_, d) = x.dims2("split_heads")?;
    let dh = d / heads;
    (0..heads).map(|h| x.cols(h * dh, dh)).collect()
}

impl<'a> AttentionParams<'a> {
    pub fn from_scope(scope: &Scope<'a>, heads: usize) -> Result<Self> {
        let p = AttentionParams {
            wq: scope.get("wq")?,
            bq: scope.get("bq")?,
            wk: scope.get("wk")?,
            bk: scope.get("bk")?,
            wv: scope.get("wv")?,
            bv: scope.get("bv")?,
            wo: scope.get("wo")?,
            bo: scope.get("bo")?,
            heads,
        };
        let d = p.wq.shape()[0];
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(Error::InvalidArgument(format!(
                "head count {heads} does not divide model dim {d}"
            )));
        }
        Ok(p)
    }

    pub fn dim(&self) -> usize {
        self.wq.shape()[0]
    }

    fn check_dim(&self, x: &Tensor, op: &'static str) -> Result<()> {
        let (_, d) = x.dims2(op)?;
        if d != self.dim() {
            return Err(Error::shape(op, x.shape(), self.wq.shape()));
        }
        Ok(())
    }

    pub fn project_queries(&self, x: &Tensor) -> Result<ProjectedQueries> {
        self.check_dim(x, "attention queries")?;
        let q = linear(x, self.wq, self.bq)?;
        Ok(ProjectedQueries {
            len: x.shape()[0],
            heads: split_heads(&q, self.heads)?,
        })
    }

    pub fn project_keys(&self, x: &Tensor) -> Result<ProjectedKeys> {
        self.check_dim(x, "attention keys")?;
        let k = linear(x, self.wk, self.bk)?;
        let v = linear(x, self.wv, self.bv)?;
        Ok(ProjectedKeys {
            len: x.shape()[0],
            keys: split_heads(&k, self.heads)?,
            values: split_heads(&v, self.heads)?,
        })
    }

    /// `softmax(q kᵀ / sqrt(d_head)) v` per head, heads concatenated and
    /// passed through the output projection. `weight_dropout` is applied to
    /// the attention weights when given.
    pub fn attend(
        &self,
        q: &ProjectedQueries,
        kv: &ProjectedKeys,
        mut weight_dropout: Option<&mut dyn FnMut(&Tensor) -> Result<Tensor>>,
    ) -> Result<Attended> {
        let dh = self.dim() / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let att = q.heads[h].matmul_t(&kv.keys[h])?.scale(scale).softmax_rows()?;
            let mixed = match weight_dropout.as_mut() {
                Some(f) => f(&att)?,
                None => att.clone(),
            };
            outs.push(mixed.matmul(&kv.values[h])?);
            weights.push(att);
        }
        let cat = if outs.len() == 1 {
            outs.pop().expect("one head")
        } else {
            Tensor::concat_cols(&outs)?
        };
        Ok(Attended {
            output: linear(&cat, self.wo, self.bo)?,
            weights,
        })
    }
}

/// Initialises `wq..bo` under `prefix` with truncated-normal weights and
/// zero biases.
pub fn init_attention<R: rand::Rng>(
    init: &mut crate::params::Init<'_, R>,
    prefix: &str,
    dim: usize,
    std: f64,
) {
    for w in ["wq", "wk", "wv", "wo"] {
        init.trunc_normal(&format!("{prefix}.{w}"), &[dim, dim], std);
    }
    for b in ["bq", "bk", "bv", "bo"] {
        init.constant(&format!("{prefix}.{b}"), &[dim], 0.0);
    }
}
