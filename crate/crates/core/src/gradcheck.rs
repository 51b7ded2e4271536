//! Finite-difference gradient checks.
//!
//! Each suite compares tape gradients with central differences
//! `(f(x + h) − f(x − h)) / 2h` in `f64`. The error of one input tensor is
//! `max|analytic − numeric| / max(max|analytic|, max|numeric|, floor)`;
//! a suite reports the worst tensor. Op suites reduce the op output with a
//! fixed random weighting so every output element carries gradient.

use std::collections::{BTreeMap, BTreeSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::align::{matching_loss, triplet_loss, LossWeights};
use crate::encoder::Dropout;
use crate::error::{Error, Result};
use crate::model::{Forward, Model, ModelConfig};
use crate::tensor::{Conv2dSpec, Tensor};
use crate::train::{batch_loss, TextMode, TrainingPool, TripletBatch};
use crate::vision::{Modality, RasterInstance};

pub const STEP: f64 = 1e-5;
pub const OP_TOLERANCE: f64 = 1e-5;
pub const COMPOSITE_TOLERANCE: f64 = 1e-4;
const FLOOR: f64 = 1e-6;
/// Relative disagreement of one-sided differences that marks a kink.
const KINK: f64 = 1e-2;
/// Coordinates sampled per parameter tensor in composite suites.
const SAMPLES_PER_TENSOR: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteKind {
    Op,
    Composite,
}

#[derive(Debug, Clone, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub kind: SuiteKind,
    pub max_rel_error: f64,
    pub tolerance: f64,
    /// Name of the input or parameter tensor with the largest error.
    pub worst: String,
    pub coordinates: usize,
    /// Coordinates dropped because the loss has a kink within one step.
    pub skipped: usize,
    pub passed: bool,
}

impl CheckResult {
    pub fn line(&self) -> String {
        format!(
            "{} {:<24} rel_err={:.3e} tol={:.0e} coords={} skipped={} worst={}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.max_rel_error,
            self.tolerance,
            self.coordinates,
            self.skipped,
            self.worst
        )
    }
}

/// Running per-tensor error.
#[derive(Default)]
struct ErrorTracker {
    worst: f64,
    worst_name: String,
    coordinates: usize,
    skipped: usize,
}

impl ErrorTracker {
    fn record(&mut self, name: &str, analytic: &[f64], numeric: &[f64]) {
        let diff = analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max);
        let scale = analytic
            .iter()
            .chain(numeric)
            .map(|x| x.abs())
            .fold(FLOOR, f64::max);
        let rel = diff / scale;
        self.coordinates += analytic.len();
        if rel > self.worst || self.worst_name.is_empty() || rel.is_nan() {
            self.worst = if rel.is_nan() { f64::INFINITY } else { rel };
            self.worst_name = name.to_string();
        }
    }

    fn finish(self, name: &str, kind: SuiteKind, tolerance: f64) -> CheckResult {
        CheckResult {
            name: name.to_string(),
            kind,
            passed: self.worst <= tolerance,
            max_rel_error: self.worst,
            tolerance,
            worst: self.worst_name,
            coordinates: self.coordinates,
            skipped: self.skipped,
        }
    }
}

/// An input tensor for [`check_function`].
pub struct Input {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Input {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        Self { shape: shape.to_vec(), data }
    }
}

/// Checks every coordinate of every input of a scalar-valued `f`.
pub fn check_function(
    name: &str,
    kind: SuiteKind,
    tolerance: f64,
    inputs: &[Input],
    f: impl Fn(&[Tensor]) -> Result<Tensor>,
) -> Result<CheckResult> {
    let leaves = inputs
        .iter()
        .map(|x| Tensor::param(&x.shape, x.data.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&leaves)?;
    if out.numel() != 1 {
        return Err(Error::InvalidArgument(format!("gradient check `{name}` needs a scalar output")));
    }
    out.backward()?;
    let eval = |k: usize, j: usize, delta: f64| -> Result<f64> {
        let consts = inputs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let mut d = x.data.clone();
                if i == k {
                    d[j] += delta;
                }
                Tensor::new(&x.shape, d)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(f(&consts)?.item())
    };
    let mut tracker = ErrorTracker::default();
    for (k, (x, leaf)) in inputs.iter().zip(&leaves).enumerate() {
        let analytic = leaf.grad().unwrap_or_else(|| vec![0.0; x.data.len()]);
        let mut numeric = Vec::with_capacity(x.data.len());
        for j in 0..x.data.len() {
            numeric.push((eval(k, j, STEP)? - eval(k, j, -STEP)?) / (2.0 * STEP));
        }
        tracker.record(&format!("input{k}"), &analytic, &numeric);
    }
    Ok(tracker.finish(name, kind, tolerance))
}

/// Checks sampled coordinates of every parameter tensor of `model`.
pub fn check_params(
    name: &str,
    model: &Model,
    samples: usize,
    seed: u64,
    f: impl Fn(&Forward<'_>) -> Result<Tensor>,
) -> Result<CheckResult> {
    let store = &model.params;
    let fwd = model.bind(true);
    let out = f(&fwd)?;
    if out.numel() != 1 {
        return Err(Error::InvalidArgument(format!("gradient check `{name}` needs a scalar output")));
    }
    out.backward()?;
    let grads = fwd.bound.grads();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tracker = ErrorTracker::default();
    let mut work = store.clone();
    let names: Vec<String> = store.iter().map(|(n, _)| n.clone()).collect();
    for pname in names {
        let n = store.get(&pname).expect("listed").data.len();
        let coords: BTreeSet<usize> = if n <= samples {
            (0..n).collect()
        } else {
            let mut s = BTreeSet::new();
            while s.len() < samples {
                s.insert(rng.random_range(0..n));
            }
            s
        };
        let g = grads.get(&pname).cloned().unwrap_or_else(|| vec![0.0; n]);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for j in coords {
            let base = store.get(&pname).expect("listed").data[j];
            let mut value_at = |x: f64| -> Result<f64> {
                work.get_mut(&pname).expect("listed").data[j] = x;
                let fwd = Forward { cfg: &model.config, bound: work.bind(false) };
                f(&fwd).map(|t| t.item())
            };
            let plus = value_at(base + STEP)?;
            let minus = value_at(base - STEP)?;
            let centre = value_at(base)?;
            let (ahead, behind) = ((plus - centre) / STEP, (centre - minus) / STEP);
            if (ahead - behind).abs() > KINK * ahead.abs().max(behind.abs()).max(FLOOR) {
                tracker.skipped += 1;
                continue;
            }
            analytic.push(g[j]);
            numeric.push((plus - minus) / (2.0 * STEP));
        }
        tracker.record(&pname, &analytic, &numeric);
    }
    Ok(tracker.finish(name, SuiteKind::Composite, COMPOSITE_TOLERANCE))
}

/// Values in `±[0.1, 1]`, kept away from the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Rows whose entries are pairwise separated, so the row maximum is unique.
fn distinct_rows(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        let mut levels: Vec<f64> = (0..cols).map(|i| -1.0 + 2.0 * i as f64 / cols as f64).collect();
        for i in (1..cols).rev() {
            levels.swap(i, rng.random_range(0..=i));
        }
        out.extend(levels.iter().map(|v| v + rng.random_range(0.0..0.5 / cols as f64)));
    }
    out
}

fn input(rng: &mut ChaCha8Rng, shape: &[usize]) -> Input {
    let n = shape.iter().product();
    Input::new(shape, away_from_zero(rng, n))
}

/// Reduces `out` to a scalar with fixed pseudo-random weights.
fn weighted_sum(out: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let w: Vec<f64> = (0..out.numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
    Ok(out.mul(&Tensor::new(out.shape(), w)?)?.sum())
}

type OpFn = Box<dyn Fn(&[Tensor]) -> Result<Tensor>>;

fn op_case(name: &'static str, seed: u64) -> Option<(Vec<Input>, OpFn)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let case: (Vec<Input>, OpFn) = match name {
        "add" => (vec![input(r, &[3, 4]), input(r, &[3, 4])], Box::new(|x| x[0].add(&x[1]))),
        "sub" => (vec![input(r, &[3, 4]), input(r, &[1])], Box::new(|x| x[0].sub(&x[1]))),
        "mul" => (vec![input(r, &[3, 4]), input(r, &[3, 4])], Box::new(|x| x[0].mul(&x[1]))),
        "scale" => (vec![input(r, &[3, 4])], Box::new(|x| Ok(x[0].scale(-1.7)))),
        "add_scalar" => (vec![input(r, &[3, 4])], Box::new(|x| Ok(x[0].add_scalar(0.3)))),
        "relu" => (vec![input(r, &[3, 4])], Box::new(|x| Ok(x[0].relu()))),
        "sigmoid" => (vec![input(r, &[3, 4])], Box::new(|x| Ok(x[0].sigmoid()))),
        "sum" => (vec![input(r, &[3, 4])], Box::new(|x| Ok(x[0].sum()))),
        "mean" => (vec![input(r, &[3, 4])], Box::new(|x| Ok(x[0].mean()))),
        "l2_norm" => (vec![input(r, &[5])], Box::new(|x| Ok(x[0].l2_norm()))),
        "normalize_rows" => (vec![input(r, &[3, 4])], Box::new(|x| x[0].normalize_rows())),
        "row_max" => (vec![Input::new(&[3, 5], distinct_rows(r, 3, 5))], Box::new(|x| x[0].row_max())),
        "row_mean" => (vec![input(r, &[3, 5])], Box::new(|x| x[0].row_mean())),
        "reshape" => (vec![input(r, &[3, 4])], Box::new(|x| x[0].reshape(&[2, 6]))),
        "rows" => (vec![input(r, &[4, 3])], Box::new(|x| x[0].rows(1, 2))),
        "cols" => (vec![input(r, &[3, 4])], Box::new(|x| x[0].cols(1, 2))),
        "concat_rows" => (
            vec![input(r, &[2, 3]), input(r, &[1, 3])],
            Box::new(|x| Tensor::concat_rows(&x[..2])),
        ),
        "concat_cols" => (
            vec![input(r, &[2, 3]), input(r, &[2, 2])],
            Box::new(|x| Tensor::concat_cols(&x[..2])),
        ),
        "stack_scalars" => (
            vec![input(r, &[1]), input(r, &[1]), input(r, &[1])],
            Box::new(Tensor::stack_scalars),
        ),
        "add_row" => (vec![input(r, &[3, 4]), input(r, &[4])], Box::new(|x| x[0].add_row(&x[1]))),
        "gather_rows" => (vec![input(r, &[4, 3])], Box::new(|x| x[0].gather_rows(&[2, 0, 2]))),
        "matmul" => (vec![input(r, &[3, 4]), input(r, &[4, 2])], Box::new(|x| x[0].matmul(&x[1]))),
        "matmul_t" => (vec![input(r, &[3, 4]), input(r, &[2, 4])], Box::new(|x| x[0].matmul_t(&x[1]))),
        "transpose" => (vec![input(r, &[3, 4])], Box::new(|x| x[0].transpose())),
        "softmax_rows" => (vec![input(r, &[3, 4])], Box::new(|x| x[0].softmax_rows())),
        "layer_norm" => (
            vec![input(r, &[3, 5]), input(r, &[5]), input(r, &[5])],
            Box::new(|x| x[0].layer_norm(&x[1], &x[2], 1e-5)),
        ),
        "gelu" => (vec![input(r, &[3, 4])], Box::new(|x| Ok(x[0].gelu()))),
        "dropout" => (
            vec![input(r, &[3, 4])],
            Box::new(|x| x[0].dropout(0.4, true, &mut ChaCha8Rng::seed_from_u64(5))),
        ),
        "conv2d" => (
            vec![input(r, &[2, 5, 5]), input(r, &[3, 2, 3, 3]), input(r, &[3])],
            Box::new(|x| x[0].conv2d(&x[1], &x[2], Conv2dSpec { stride: 2, padding: 1 })),
        ),
        _ => return None,
    };
    Some(case)
}

/// Tape ops with a dedicated suite.
pub const OPS: &[&str] = &[
    "add",
    "sub",
    "mul",
    "scale",
    "add_scalar",
    "relu",
    "sigmoid",
    "sum",
    "mean",
    "l2_norm",
    "normalize_rows",
    "row_max",
    "row_mean",
    "reshape",
    "rows",
    "cols",
    "concat_rows",
    "concat_cols",
    "stack_scalars",
    "add_row",
    "gather_rows",
    "matmul",
    "matmul_t",
    "transpose",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "dropout",
    "conv2d",
];

/// Module-level and end-to-end suites.
pub const COMPOSITES: &[&str] = &[
    "tokenizer",
    "visual_encoder",
    "text_encoder",
    "cross_attention",
    "relation",
    "triplet_loss",
    "matching_loss",
    "combined_loss",
    "combined_loss_no_text",
];

pub fn check_op(name: &str, seed: u64) -> Result<CheckResult> {
    let key = OPS
        .iter()
        .find(|&&o| o == name)
        .ok_or_else(|| Error::InvalidArgument(format!("no gradient suite for op `{name}`")))?;
    let (inputs, f) = op_case(key, seed).expect("every listed op has a case");
    check_function(name, SuiteKind::Op, OP_TOLERANCE, &inputs, |x| weighted_sum(&f(x)?, seed))
}

/// Small model used by the composite suites.
pub fn tiny_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        channels: 3,
        patch_size: 4,
        dim: 8,
        heads: 2,
        layers: 1,
        mlp_ratio: 2,
        conv_kernel: 3,
        conv_strides: vec![2, 2, 1, 1],
        text_layers: 1,
        text_heads: 2,
        max_text_len: 6,
        cross_heads: 2,
        relation_hidden: 4,
        dropout: 0.1,
        relation_dropout: 0.2,
        init_std: 0.3,
        ..ModelConfig::desk()
    }
}

fn raster(rng: &mut ChaCha8Rng, cfg: &ModelConfig, modality: Modality, label: usize, id: &str) -> Result<RasterInstance> {
    let n = cfg.image_size * cfg.image_size * cfg.channels;
    let px = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    RasterInstance::new(px, cfg.image_size, cfg.channels, modality, label, id.to_string())
}

struct Fixture {
    model: Model,
    pool: TrainingPool,
    batch: TripletBatch,
}

fn fixture(seed: u64) -> Result<Fixture> {
    let cfg = tiny_config();
    let vocab_size = 9;
    let model = Model::new(cfg.clone(), vocab_size, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
    let mut sketches = Vec::new();
    let mut images = Vec::new();
    for label in 0..2 {
        for i in 0..2 {
            sketches.push(raster(&mut rng, &cfg, Modality::Sketch, label, &format!("s{label}{i}"))?);
            images.push(raster(&mut rng, &cfg, Modality::Image, label, &format!("i{label}{i}"))?);
        }
    }
    let text = BTreeMap::from([(0, vec![4, 5, 6, 2]), (1, vec![7, 8, 2])]);
    let pool = TrainingPool::new(sketches, images, text.clone(), BTreeSet::from([0, 1]))?;
    let batch = TripletBatch {
        anchors: vec![0, 2],
        positives: vec![1, 3],
        negatives: vec![2, 0],
        labels: vec![0, 1],
        negative_labels: vec![1, 0],
        text: vec![text[&0].clone(), text[&1].clone()],
    };
    Ok(Fixture { model, pool, batch })
}

fn check_composite(name: &str, seed: u64) -> Result<CheckResult> {
    let fx = fixture(seed)?;
    let drop_seed = seed + 2;
    let sketch = fx.pool.sketch(0);
    let image = fx.pool.image(1);
    match name {
        "tokenizer" => check_params(name, &fx.model, SAMPLES_PER_TENSOR, seed, |f| {
            weighted_sum(&f.tokenizer(Modality::Image).tokenize(image)?.tokens, seed)
        }),
        "visual_encoder" => check_params(name, &fx.model, SAMPLES_PER_TENSOR, seed, |f| {
            let seq = f.encode_raster(sketch, &mut Dropout::train(drop_seed))?;
            weighted_sum(&seq.tokens, seed)
        }),
        "text_encoder" => check_params(name, &fx.model, SAMPLES_PER_TENSOR, seed, |f| {
            let seq = f.encode_text(&fx.batch.text[0], &mut Dropout::train(drop_seed))?;
            weighted_sum(&seq.tokens, seed)
        }),
        "cross_attention" => check_params(name, &fx.model, SAMPLES_PER_TENSOR, seed, |f| {
            let mut drop = Dropout::eval();
            let text = f.encode_text(&fx.batch.text[0], &mut drop)?;
            let seq = f.encode_raster(image, &mut drop)?;
            let cross = f.cross(Modality::Image)?;
            let out = cross.attend(&cross.queries(&text)?, &cross.key_values(&seq)?)?;
            weighted_sum(&out.tokens, seed)
        }),
        "relation" => check_params(name, &fx.model, SAMPLES_PER_TENSOR, seed, |f| {
            let mut drop = Dropout::eval();
            let s = f.prepare(&f.encode_raster(sketch, &mut drop)?)?;
            let i = f.prepare(&f.encode_raster(image, &mut drop)?)?;
            f.score_prepared(&s, &i, &mut Dropout::train(drop_seed))
        }),
        "triplet_loss" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs: Vec<Input> = (0..6).map(|_| input(&mut rng, &[1, 4])).collect();
            check_function(name, SuiteKind::Composite, COMPOSITE_TOLERANCE, &inputs, |x| {
                triplet_loss(&x[0..2], &x[2..4], &x[4..6], 0.3)
            })
        }
        "matching_loss" => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = vec![input(&mut rng, &[2, 4])];
            check_function(name, SuiteKind::Composite, COMPOSITE_TOLERANCE, &inputs, |x| {
                matching_loss(&x[0].sigmoid(), &[0, 1], &[0, 1, 1, 0])
            })
        }
        "combined_loss" | "combined_loss_no_text" => {
            let mode = if name == "combined_loss" { TextMode::Full } else { TextMode::NoText };
            let weights = LossWeights::default();
            check_params(name, &fx.model, SAMPLES_PER_TENSOR, seed, |f| {
                let mut drop = Dropout::train(drop_seed);
                Ok(batch_loss(f, &fx.pool, &fx.batch, &weights, mode, &mut drop)?.0)
            })
        }
        _ => Err(Error::InvalidArgument(format!("no gradient suite named `{name}`"))),
    }
}

/// Runs one suite by name.
pub fn run_suite(name: &str, seed: u64) -> Result<CheckResult> {
    if OPS.contains(&name) {
        check_op(name, seed)
    } else {
        check_composite(name, seed)
    }
}

/// Names selected by `filter`: `all`, `ops`, `composites`, or suite names.
pub fn select(filter: &[String]) -> Result<Vec<&'static str>> {
    let mut out = Vec::new();
    for f in filter {
        match f.as_str() {
            "all" => out.extend(OPS.iter().chain(COMPOSITES)),
            "ops" => out.extend(OPS),
            "composites" => out.extend(COMPOSITES),
            other => out.push(
                *OPS.iter()
                    .chain(COMPOSITES)
                    .find(|&&n| n == other)
                    .ok_or_else(|| Error::InvalidArgument(format!("no gradient suite named `{other}`")))?,
            ),
        }
    }
    let mut seen = BTreeSet::new();
    out.retain(|n| seen.insert(*n));
    Ok(out)
}

pub fn run_suites(filter: &[String], seed: u64) -> Result<Vec<CheckResult>> {
    select(filter)?.into_iter().map(|n| run_suite(n, seed)).collect()
}
