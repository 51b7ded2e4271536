use std::collections::BTreeMap;

use super::batch::{TrainingPool, TripletBatch};
use super::optim::AdamState;
use super::{step_seed, TextMode, TrainConfig};
use crate::align::{combined_loss, matching_loss, triplet_from_distances, CrossAlignedSequence, LossReport, LossWeights, Queries};
use crate::encoder::{Dropout, TokenSequence};
use crate::error::{Error, Result};
use crate::model::{Forward, Model, Prepared};
use crate::tensor::Tensor;
use crate::vision::Modality;

pub struct StepContext<'a> {
    pub pool: &'a TrainingPool,
    pub loss: &'a LossWeights,
    pub train: &'a TrainConfig,
    /// Zero-based index of the step being taken.
    pub step: u64,
}

fn encode_unique<'p>(
    f: &Forward<'_>,
    ids: &[usize],
    get: impl Fn(usize) -> &'p crate::vision::RasterInstance,
    drop: &mut Dropout,
) -> Result<BTreeMap<usize, TokenSequence>> {
    let mut out = BTreeMap::new();
    for &i in ids {
        if let std::collections::btree_map::Entry::Vacant(e) = out.entry(i) {
            e.insert(f.encode_raster(get(i), drop)?);
        }
    }
    Ok(out)
}

/// Forward pass of the combined objective for one batch.
pub fn batch_loss(
    f: &Forward<'_>,
    pool: &TrainingPool,
    batch: &TripletBatch,
    weights: &LossWeights,
    mode: TextMode,
    drop: &mut Dropout,
) -> Result<(Tensor, LossReport)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    for (&a, &n) in batch.labels.iter().zip(&batch.negative_labels) {
        pool.assert_seen(a)?;
        pool.assert_seen(n)?;
    }
    let t = batch.len();
    let gallery: Vec<usize> = batch.positives.iter().chain(&batch.negatives).copied().collect();
    let gallery_labels: Vec<usize> = gallery.iter().map(|&g| pool.image(g).label).collect();
    let sketches = encode_unique(f, &batch.anchors, |i| pool.sketch(i), drop)?;
    let images = encode_unique(f, &gallery, |i| pool.image(i), drop)?;
    let relation = f.relation();

    let (l_tri, scores) = match mode {
        TextMode::Full => {
            let cross_s = f.cross(Modality::Sketch)?;
            let cross_i = f.cross(Modality::Image)?;
            let mut text_q: BTreeMap<usize, (Queries, Queries)> = BTreeMap::new();
            for &label in &batch.labels {
                if let std::collections::btree_map::Entry::Vacant(e) = text_q.entry(label) {
                    let text = f.encode_text(pool.text_ids(label)?, drop)?;
                    e.insert((cross_s.queries(&text)?, cross_i.queries(&text)?));
                }
            }
            let kv_s: BTreeMap<usize, _> = sketches
                .iter()
                .map(|(&i, s)| Ok((i, cross_s.key_values(s)?)))
                .collect::<Result<_>>()?;
            let kv_i: BTreeMap<usize, _> = images
                .iter()
                .map(|(&i, s)| Ok((i, cross_i.key_values(s)?)))
                .collect::<Result<_>>()?;
            let anchors: Vec<CrossAlignedSequence> = batch
                .anchors
                .iter()
                .zip(&batch.labels)
                .map(|(a, l)| cross_s.attend(&text_q[l].0, &kv_s[a]))
                .collect::<Result<_>>()?;
            let mut aligned: BTreeMap<(usize, usize), CrossAlignedSequence> = BTreeMap::new();
            for &label in &batch.labels {
                for &g in &gallery {
                    if let std::collections::btree_map::Entry::Vacant(e) = aligned.entry((label, g)) {
                        e.insert(cross_i.attend(&text_q[&label].1, &kv_i[&g])?);
                    }
                }
            }
            let (mut dp, mut dn) = (Vec::with_capacity(t), Vec::with_capacity(t));
            for i in 0..t {
                let a = &anchors[i].global;
                dp.push(a.sub(&aligned[&(batch.labels[i], batch.positives[i])].global)?.l2_norm());
                dn.push(a.sub(&aligned[&(batch.labels[i], batch.negatives[i])].global)?.l2_norm());
            }
            let l_tri = triplet_from_distances(&dp, &dn, weights.margin)?;
            let unit_a: Vec<Tensor> = anchors.iter().map(|x| x.tokens.normalize_rows()).collect::<Result<_>>()?;
            let unit_g: BTreeMap<(usize, usize), Tensor> = aligned
                .iter()
                .map(|(k, x)| Ok((*k, x.tokens.normalize_rows()?)))
                .collect::<Result<_>>()?;
            let mut scores = Vec::with_capacity(t * gallery.len());
            for i in 0..t {
                for &g in &gallery {
                    let key = (batch.labels[i], g);
                    scores.push(relation.logit_normalized(&unit_a[i], &unit_g[&key], drop)?.sigmoid());
                }
            }
            (l_tri, scores)
        }
        TextMode::NoText => {
            let ps: BTreeMap<usize, Prepared> =
                sketches.iter().map(|(&i, s)| Ok((i, f.prepare(s)?))).collect::<Result<_>>()?;
            let pi: BTreeMap<usize, Prepared> =
                images.iter().map(|(&i, s)| Ok((i, f.prepare(s)?))).collect::<Result<_>>()?;
            let cross_s = f.cross(Modality::Sketch)?;
            let cross_i = f.cross(Modality::Image)?;
            let distance = |a: usize, g: usize| -> Result<Tensor> {
                let s_to_i = cross_i.attend(&ps[&a].queries, &pi[&g].key_values)?;
                let i_to_s = cross_s.attend(&pi[&g].queries, &ps[&a].key_values)?;
                Ok(s_to_i.global.sub(&i_to_s.global)?.l2_norm())
            };
            let (mut dp, mut dn) = (Vec::with_capacity(t), Vec::with_capacity(t));
            for i in 0..t {
                dp.push(distance(batch.anchors[i], batch.positives[i])?);
                dn.push(distance(batch.anchors[i], batch.negatives[i])?);
            }
            let l_tri = triplet_from_distances(&dp, &dn, weights.margin)?;
            let mut scores = Vec::with_capacity(t * gallery.len());
            for &a in &batch.anchors {
                for &g in &gallery {
                    scores.push(f.score_prepared(&ps[&a], &pi[&g], drop)?);
                }
            }
            (l_tri, scores)
        }
    };
    let scores = Tensor::stack_scalars(&scores)?.reshape(&[t, gallery.len()])?;
    let l_rn = matching_loss(&scores, &batch.labels, &gallery_labels)?;
    combined_loss(&l_tri, &l_rn, weights, t)
}

/// One optimisation step: forward, backward, AdamW. Non-finite losses or
/// parameters abort with digests of both.
pub fn train_step(model: &mut Model, state: &mut AdamState, batch: &TripletBatch, ctx: &StepContext<'_>) -> Result<LossReport> {
    let mut drop = Dropout::train(step_seed(ctx.train.seed, ctx.step, 1));
    let (report, grads) = {
        let f = model.bind(true);
        let (total, report) = match batch_loss(&f, ctx.pool, batch, ctx.loss, ctx.train.text_mode, &mut drop) {
            Err(Error::NonFinite(what)) => {
                return Err(Error::Diverged {
                    step: ctx.step,
                    detail: format!(
                        "non-finite value in {what}; parameter digest {}; batch digest {}",
                        model.params.digest(),
                        batch.digest(ctx.pool)
                    ),
                })
            }
            other => other?,
        };
        if !total.is_finite() {
            return Err(Error::Diverged {
                step: ctx.step,
                detail: format!(
                    "loss {} (l_tri {}, l_rn {}); parameter digest {}; batch digest {}",
                    report.l_total,
                    report.l_tri,
                    report.l_rn,
                    model.params.digest(),
                    batch.digest(ctx.pool)
                ),
            });
        }
        total.backward()?;
        (report, f.bound.grads())
    };
    ctx.train.optimizer().update(&mut model.params, &grads, state)?;
    if !model.params.all_finite() {
        return Err(Error::Diverged {
            step: ctx.step,
            detail: format!(
                "non-finite parameters after update (loss was {}); parameter digest {}; batch digest {}",
                report.l_total,
                model.params.digest(),
                batch.digest(ctx.pool)
            ),
        });
    }
    Ok(report)
}
